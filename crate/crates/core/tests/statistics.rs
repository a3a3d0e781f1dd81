//! Monte-Carlo checks of statistical invariants.

use std::f64::consts::TAU;

use beamsim::beamform::KalmanSmoother;
use beamsim::channel::{ChannelModel, Position};
use beamsim::chirp_dsp::{fft_forward, generate_chirp, zero_lag, ChirpParams, ComplexSignal};
use beamsim::coldstart::FieldMap;
use beamsim::engine::{run_scenario, Baseline, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (m, s)
}

/// Correlator SNR over in-band power SNR, measured from noise draws: the
/// correlator side from noise-only zero-lag outputs, the raw side from the
/// noise power that falls inside the chirp band.
fn measured_gain_db(bw_hz: f64, trials: usize, rng: &mut ChaCha8Rng) -> f64 {
    let p = ChirpParams { bandwidth_hz: bw_hz, ..ChirpParams::default() };
    let reference = generate_chirp(&p, 1.0, 0.0).unwrap();
    let n = reference.len();
    let var = p.noise_variance(-99.0);
    let fft = fft_forward(n);
    let bin = p.sample_rate_hz / n as f64;
    let mut corr_noise = 0.0;
    let mut band_noise = 0.0;
    for _ in 0..trials {
        let mut noise = ComplexSignal::zeros(n, p.sample_rate_hz);
        noise.add_awgn(var, rng);
        corr_noise += zero_lag(&noise, &reference).unwrap().norm_sqr();
        let mut spec = noise.samples.clone();
        fft.process(&mut spec);
        let inband: f64 = spec
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let f = if *k <= n / 2 { *k as f64 } else { *k as f64 - n as f64 } * bin;
                f.abs() <= bw_hz / 2.0
            })
            .map(|(_, c)| c.norm_sqr())
            .sum();
        // Parseval: per-sample power of the band-limited noise
        band_noise += inband / (n as f64 * n as f64);
    }
    corr_noise /= trials as f64;
    band_noise /= trials as f64;
    let signal_power = 1.0;
    let corr_signal = reference.energy().powi(2);
    10.0 * ((corr_signal / corr_noise) / (signal_power / band_noise)).log10()
}

#[test]
fn processing_gain_tracks_time_bandwidth_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = ChirpParams::default().symbol_time_s;
    for bw in [10e3, 20e3, 40e3, 80e3] {
        let g = measured_gain_db(bw, 500, &mut rng);
        let expected = 10.0 * (t * bw).log10();
        assert!((g - expected).abs() <= 1.5, "bw {bw}: {g:.2} dB vs {expected:.2} dB");
    }
}

#[test]
fn phases_only_redistribute_power() {
    let slaves: Vec<Position> = (0..8).map(|i| Position::new(i as f64, 2.0 * (i % 3) as f64, 3.0)).collect();
    let pts = vec![Position::new(2.0, 1.0, 0.5), Position::new(5.0, 3.0, 1.0)];
    let field = FieldMap::from_model(&ChannelModel::air(4), &slaves, pts, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 4000;
    let mut acc = vec![0.0; 2];
    for _ in 0..draws {
        let phases: Vec<f64> = (0..slaves.len()).map(|_| rng.random::<f64>() * TAU).collect();
        for (a, p) in acc.iter_mut().zip(field.powers(&phases)) {
            *a += p / draws as f64;
        }
    }
    for (v, a) in acc.iter().enumerate() {
        let incoherent: f64 = field.row(v).iter().map(|h| h.norm_sqr()).sum();
        assert!((a / incoherent - 1.0).abs() < 0.05, "voxel {v}: {a} vs {incoherent}");
    }
}

fn quick(mut s: Scenario) -> f64 {
    s.sync = None;
    s.rounds = 200;
    run_scenario(&s).unwrap().power_percentage
}

#[test]
fn convergence_ignores_slave_order_and_array_rotation() {
    let seeds = 0..40u64;
    let base: Vec<f64> = seeds.clone().map(|s| quick(Scenario::testbed(8, s))).collect();
    let permuted: Vec<f64> = seeds
        .clone()
        .map(|s| {
            let mut sc = Scenario::testbed(8, s);
            sc.slaves.reverse();
            quick(sc)
        })
        .collect();
    let rotated: Vec<f64> = seeds
        .map(|s| {
            let mut sc = Scenario::testbed(8, s);
            let c = sc.node.position;
            sc.slaves = sc
                .slaves
                .iter()
                .map(|p| {
                    let d = p.sub(&c);
                    c.add(&Position::new(-d.y, d.x, d.z))
                })
                .collect();
            quick(sc)
        })
        .collect();
    let (mb, sb) = mean_sd(&base);
    for (name, other) in [("permuted", &permuted), ("rotated", &rotated)] {
        let (mo, so) = mean_sd(other);
        let se = ((sb * sb + so * so) / base.len() as f64).sqrt();
        assert!((mb - mo).abs() <= 4.0 * se + 1e-3, "{name}: {mb:.4} vs {mo:.4} (se {se:.4})");
    }
}

#[test]
fn no_round_beats_the_coherent_optimum() {
    for seed in 0..5 {
        for baseline in [Baseline::None, Baseline::RandomPhase] {
            let s = Scenario { rounds: 150, sync: None, baseline, ..Scenario::testbed(12, seed) };
            let m = run_scenario(&s).unwrap();
            assert!(m.trace.iter().all(|r| r.power_percentage <= 1.0 + 1e-9));
            assert!(m.power_percentage <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn random_phase_baseline_sits_near_one_over_n() {
    let n = 24;
    let v: Vec<f64> = (0..30)
        .map(|s| {
            let sc = Scenario { rounds: 200, sync: None, baseline: Baseline::RandomPhase, ..Scenario::testbed(n, s) };
            run_scenario(&sc).unwrap().power_percentage
        })
        .collect();
    let (m, _) = mean_sd(&v);
    // unequal path gains pull the incoherent share a little above 1/N
    assert!(m > 0.5 / n as f64 && m < 3.0 / n as f64, "{m}");
}

#[test]
fn smoother_reduces_measurement_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let truth = 5.0;
    let mut raw = Vec::new();
    let mut smoothed = Vec::new();
    // as in the alignment loop: one smoother, reset per batch, noise level
    // learned across batches
    let mut k = KalmanSmoother::new(0.0, 0.1, 16);
    k.adapt_on_reset = true;
    for _ in 0..400 {
        k.reset();
        let mut last = 0.0;
        for _ in 0..16 {
            let z = truth + rng.sample::<f64, _>(StandardNormal);
            raw.push(z);
            last = k.smooth(z);
        }
        smoothed.push(last);
    }
    let (mr, sr) = mean_sd(&raw);
    let (ms, ss) = mean_sd(&smoothed);
    assert!((mr - truth).abs() < 0.05 && (ms - truth).abs() < 0.05);
    // sixteen samples: roughly a quarter of the raw spread
    assert!(ss < 0.35 * sr, "{ss} vs {sr}");
}
