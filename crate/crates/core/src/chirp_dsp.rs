//! Chirp carriers, correlation and envelope analysis.
//!
//! Signals are complex baseband. Amplitudes are in sqrt(W), so `|x|^2` is the
//! instantaneous power in watts.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::units::dbm_to_watt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpParams {
    pub bandwidth_hz: f64,
    pub symbol_time_s: f64,
    pub sample_rate_hz: f64,
    pub center_offset_hz: f64,
}

impl Default for ChirpParams {
    fn default() -> Self {
        Self {
            bandwidth_hz: 40.0e3,
            symbol_time_s: 4.0e-3,
            sample_rate_hz: 2.048e6,
            center_offset_hz: 0.0,
        }
    }
}

impl ChirpParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.bandwidth_hz, self.symbol_time_s, self.sample_rate_hz, self.center_offset_hz]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.bandwidth_hz < 0.0 || self.symbol_time_s <= 0.0 || self.sample_rate_hz <= 0.0 {
            return domain(format!("invalid chirp parameters {self:?}"));
        }
        if self.sample_rate_hz < 2.0 * (self.bandwidth_hz + self.center_offset_hz.abs()) {
            return domain("sample rate below twice the occupied band");
        }
        let n = self.symbol_time_s * self.sample_rate_hz;
        if n < 1.0 || (n - n.round()).abs() > 1e-6 {
            return domain(format!("symbol time * sample rate must be a positive integer, got {n}"));
        }
        Ok(())
    }

    pub fn samples_per_symbol(&self) -> usize {
        (self.symbol_time_s * self.sample_rate_hz).round() as usize
    }

    /// Sweep rate in Hz/s.
    pub fn slope(&self) -> f64 {
        self.bandwidth_hz / self.symbol_time_s
    }

    /// Time-bandwidth product.
    pub fn processing_gain(&self) -> f64 {
        self.symbol_time_s * self.bandwidth_hz
    }

    /// Phase (rad) at time `t` into a symbol.
    fn phase_at(&self, t: f64) -> f64 {
        let f0 = self.center_offset_hz - self.bandwidth_hz / 2.0;
        2.0 * PI * (f0 * t + 0.5 * self.slope() * t * t)
    }

    /// Per-sample noise variance such that the noise power inside the chirp
    /// band equals `floor_dbm`.
    pub fn noise_variance(&self, floor_dbm: f64) -> f64 {
        dbm_to_watt(floor_dbm) * self.sample_rate_hz / self.bandwidth_hz
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSignal {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
}

impl ComplexSignal {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return domain("signal must have at least one sample");
        }
        if !(sample_rate_hz > 0.0) {
            return domain("sample rate must be positive");
        }
        if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return domain("signal contains non-finite samples");
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn zeros(len: usize, sample_rate_hz: f64) -> Self {
        Self { samples: vec![Complex64::new(0.0, 0.0); len], sample_rate_hz }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }

    pub fn scaled(&self, k: Complex64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * k).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn add(&mut self, other: &ComplexSignal) -> Result<()> {
        if other.sample_rate_hz != self.sample_rate_hz || other.len() != self.len() {
            return domain("cannot add signals of different rate or length");
        }
        for (a, b) in self.samples.iter_mut().zip(&other.samples) {
            *a += b;
        }
        Ok(())
    }

    /// Multiply by `exp(j 2 pi f t)`.
    pub fn frequency_shifted(&self, f_hz: f64) -> Self {
        let w = 2.0 * PI * f_hz / self.sample_rate_hz;
        Self {
            samples: self
                .samples
                .iter()
                .enumerate()
                .map(|(n, s)| s * Complex64::from_polar(1.0, w * n as f64))
                .collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn add_awgn<R: Rng + ?Sized>(&mut self, variance: f64, rng: &mut R) {
        let sd = (variance / 2.0).sqrt();
        for s in self.samples.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *s += Complex64::new(re * sd, im * sd);
        }
    }

    /// Columnar dump: `index,re,im`.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,re,im")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(w, "{i},{:e},{:e}", s.re, s.im)?;
        }
        Ok(())
    }
}

pub fn generate_chirp(params: &ChirpParams, amplitude: f64, initial_phase: f64) -> Result<ComplexSignal> {
    chirp_train(params, amplitude, initial_phase, params.samples_per_symbol(), 0.0)
}

/// A periodic chirp train of `len` samples delayed by `delay_samples`
/// (may be fractional or negative).
pub fn chirp_train(
    params: &ChirpParams,
    amplitude: f64,
    initial_phase: f64,
    len: usize,
    delay_samples: f64,
) -> Result<ComplexSignal> {
    params.validate()?;
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return domain("chirp amplitude must be finite and >= 0");
    }
    if len == 0 {
        return domain("chirp length must be positive");
    }
    let fs = params.sample_rate_hz;
    let st = params.symbol_time_s;
    let samples = (0..len)
        .map(|n| {
            let t = ((n as f64 - delay_samples) / fs).rem_euclid(st);
            Complex64::from_polar(amplitude, params.phase_at(t) + initial_phase)
        })
        .collect();
    Ok(ComplexSignal { samples, sample_rate_hz: fs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcsProfile {
    /// Correlation at lags `0..=rx_len - ref_len`.
    pub values: Vec<Complex64>,
    pub zero_lag: f64,
}

impl CcsProfile {
    pub fn peak_lag(&self) -> (usize, f64) {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.norm()))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_pair(len: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(len), p.plan_fft_inverse(len))
    })
}

pub fn fft_forward(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

/// Cross-correlation of `rx` against `reference` computed in the frequency
/// domain: `values[w] = sum_m rx[m + w] * conj(ref[m])`.
pub fn ccs_correlate(rx: &ComplexSignal, reference: &ComplexSignal) -> Result<CcsProfile> {
    if rx.sample_rate_hz != reference.sample_rate_hz {
        return domain("sample rates differ");
    }
    if rx.len() < reference.len() || reference.is_empty() {
        return domain("rx must be at least as long as the reference");
    }
    let n = rx.len().next_power_of_two();
    let (fwd, inv) = fft_pair(n);
    let zero = Complex64::new(0.0, 0.0);
    let mut a: Vec<Complex64> = rx.samples.clone();
    a.resize(n, zero);
    let mut b: Vec<Complex64> = reference.samples.clone();
    b.resize(n, zero);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y.conj();
    }
    inv.process(&mut a);
    let lags = rx.len() - reference.len() + 1;
    let scale = 1.0 / n as f64;
    let values: Vec<Complex64> = a[..lags].iter().map(|v| v * scale).collect();
    let zero_lag = values[0].norm();
    Ok(CcsProfile { values, zero_lag })
}

/// Zero-lag correlation value (complex).
pub fn zero_lag(rx: &ComplexSignal, reference: &ComplexSignal) -> Result<Complex64> {
    if rx.sample_rate_hz != reference.sample_rate_hz {
        return domain("sample rates differ");
    }
    if rx.len() < reference.len() {
        return domain("rx must be at least as long as the reference");
    }
    Ok(rx.samples.iter().zip(&reference.samples).map(|(a, b)| a * b.conj()).sum())
}

/// Magnitude of the zero-lag correlation; a linear proxy for the amplitude of
/// the chirp component embedded in `rx`.
pub fn p_ccs0(rx: &ComplexSignal, reference: &ComplexSignal) -> Result<f64> {
    Ok(zero_lag(rx, reference)?.norm())
}

/// Coherent zero-lag statistic over `rx` split into consecutive symbols of the
/// reference length.
pub fn integrated_p_ccs0(rx: &ComplexSignal, reference: &ComplexSignal) -> Result<f64> {
    if rx.sample_rate_hz != reference.sample_rate_hz {
        return domain("sample rates differ");
    }
    if reference.is_empty() || rx.len() % reference.len() != 0 {
        return domain("rx must hold a whole number of reference symbols");
    }
    let acc: Complex64 = rx
        .samples
        .chunks(reference.len())
        .map(|c| c.iter().zip(&reference.samples).map(|(a, b)| a * b.conj()).sum::<Complex64>())
        .sum();
    Ok(acc.norm())
}

/// Threshold on a zero-lag magnitude for a target false-alarm probability when
/// the input is complex white noise of the given per-sample variance.
pub fn detection_threshold(noise_variance: f64, reference_energy: f64, symbols: usize, pfa: f64) -> f64 {
    let mean_sq = noise_variance * reference_energy * symbols as f64;
    (mean_sq * (1.0 / pfa).ln()).sqrt()
}

/// Block-averaged magnitude envelope, returned as a real-valued signal at
/// `sample_rate / decimation`.
pub fn envelope(signal: &ComplexSignal, decimation: usize) -> Result<ComplexSignal> {
    if decimation == 0 || signal.len() < decimation {
        return domain("decimation must be in 1..=len");
    }
    let samples = signal
        .samples
        .chunks_exact(decimation)
        .map(|c| Complex64::new(c.iter().map(|s| s.norm()).sum::<f64>() / decimation as f64, 0.0))
        .collect();
    ComplexSignal::new(samples, signal.sample_rate_hz / decimation as f64)
}

/// Frequency resolution of [`fluctuation_rate`] for an envelope of `len`
/// samples at `sample_rate_hz`.
pub fn fluctuation_bin_hz(len: usize, sample_rate_hz: f64) -> f64 {
    sample_rate_hz / len.next_power_of_two() as f64
}

/// Dominant non-DC frequency of the magnitude envelope `signal`.
pub fn fluctuation_rate(signal: &ComplexSignal) -> Result<f64> {
    fluctuation_rate_below(signal, f64::INFINITY)
}

/// Like [`fluctuation_rate`] but only searches frequencies up to `max_hz`.
pub fn fluctuation_rate_below(signal: &ComplexSignal, max_hz: f64) -> Result<f64> {
    if signal.len() < 4 {
        return domain("envelope too short");
    }
    let mag: Vec<f64> = signal.samples.iter().map(|s| s.norm()).collect();
    let mean = mag.iter().sum::<f64>() / mag.len() as f64;
    let spread = mag.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
    if spread <= 1e-9 * mean.abs().max(f64::MIN_POSITIVE) {
        return Ok(0.0);
    }
    let len = mag.len();
    let n = len.next_power_of_two();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (i, (b, v)) in buf.iter_mut().zip(&mag).enumerate() {
        let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (len - 1) as f64).cos();
        *b = Complex64::new((v - mean) * w, 0.0);
    }
    fft_forward(n).process(&mut buf);
    let bin = signal.sample_rate_hz / n as f64;
    let half = ((max_hz / bin).floor() as usize).clamp(2, n / 2);
    let spec: Vec<f64> = buf[..=half].iter().map(|c| c.norm()).collect();
    let (k, _) = spec
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let offset = if k < half {
        let (a, b, c) = (spec[k - 1], spec[k], spec[k + 1]);
        let den = a - 2.0 * b + c;
        if den.abs() > 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 }
    } else {
        0.0
    };
    Ok(((k as f64 + offset) * bin).max(0.0))
}

/// Beat rate between two periodic chirp trains, for offsets well under a
/// symbol.
///
/// Both trains repeat every `symbol_len` samples, so their power envelope
/// `A + B cos(phase + 2π f t)` restarts each symbol and a small offset only
/// bends it within the symbol. The power is folded over all symbols, block
/// averaged by `decimation`, and fitted by a quadratic around the symbol
/// centre; with the cross-term amplitude `cross_power` (B) known, the linear
/// and quadratic coefficients pin down |f| whatever the phase. The first
/// `guard` fraction of the symbol, where the later train is still finishing
/// its previous sweep, is skipped.
pub fn folded_beat_rate(
    signal: &ComplexSignal,
    symbol_len: usize,
    decimation: usize,
    cross_power: f64,
    guard: f64,
) -> Result<f64> {
    if symbol_len == 0 || signal.len() < symbol_len || decimation == 0 || decimation > symbol_len {
        return domain("need at least one whole symbol and 1 <= decimation <= symbol length");
    }
    if !(cross_power > 0.0) || !(0.0..0.5).contains(&guard) {
        return domain("cross power must be positive and guard in [0, 0.5)");
    }
    let symbols = signal.len() / symbol_len;
    let mut folded = vec![0.0; symbol_len];
    for sym in signal.samples[..symbols * symbol_len].chunks_exact(symbol_len) {
        for (f, s) in folded.iter_mut().zip(sym) {
            *f += s.norm_sqr();
        }
    }
    let dt = decimation as f64 / signal.sample_rate_hz;
    let skip = (guard * symbol_len as f64).ceil() as usize;
    let blocks: Vec<(f64, f64)> = folded
        .chunks_exact(decimation)
        .enumerate()
        .filter(|(i, _)| i * decimation >= skip)
        .map(|(i, c)| ((i as f64 + 0.5) * dt, c.iter().sum::<f64>() / (decimation * symbols) as f64))
        .collect();
    if blocks.len() < 3 {
        return domain("too few envelope points after the guard");
    }
    let ts: Vec<f64> = blocks.iter().map(|b| b.0).collect();
    let ps: Vec<f64> = blocks.iter().map(|b| b.1).collect();
    let centre = ts.iter().sum::<f64>() / ts.len() as f64;
    let tc: Vec<f64> = ts.iter().map(|t| t - centre).collect();
    let c = crate::numeric::polyfit(&tc, &ps, 2);
    // p ≈ A + B cos(a) - B w sin(a) t - B w² cos(a) t² / 2
    let u = c[1] / cross_power;
    let v = -2.0 * c[2] / cross_power;
    let w2 = 0.5 * (u * u + (u.powi(4) + 4.0 * v * v).sqrt());
    let rate = w2.sqrt() / (2.0 * PI);
    // Over more than a fraction of a cycle the quadratic saturates, so also
    // fit the sinusoid directly; trust it only when its swing matches the
    // known cross term, which a nearly flat envelope cannot fake.
    let span = ts[ts.len() - 1] - ts[0];
    let step = 0.02 / span;
    let nyquist = 0.5 / dt;
    let mut best = (0.0, f64::INFINITY);
    let mut f = 0.15 / span;
    while f < nyquist {
        let (r, _) = sinusoid_fit(&tc, &ps, f);
        if r < best.1 {
            best = (f, r);
        }
        f += step;
    }
    let f0 = best.0;
    let (_, swing) = sinusoid_fit(&tc, &ps, f0);
    if (swing - cross_power).abs() > 0.3 * cross_power {
        return Ok(rate);
    }
    let (a, b, c) = (
        sinusoid_fit(&tc, &ps, f0 - step).0,
        best.1,
        sinusoid_fit(&tc, &ps, f0 + step).0,
    );
    let den = a - 2.0 * b + c;
    let offset = if den > 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
    Ok(f0 + offset * step)
}

/// Residual sum of squares and swing `hypot(C, S)` of the best fit
/// `A + C cos(2π f t) + S sin(2π f t)`.
fn sinusoid_fit(t: &[f64], y: &[f64], f: f64) -> (f64, f64) {
    let cols: Vec<[f64; 3]> = t.iter().map(|&t| {
        let (s, c) = (2.0 * PI * f * t).sin_cos();
        [1.0, c, s]
    }).collect();
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for (row, &yi) in cols.iter().zip(y) {
        for i in 0..3 {
            aty[i] += row[i] * yi;
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let det3 = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(&ata);
    if d.abs() < 1e-300 {
        return (f64::INFINITY, 0.0);
    }
    let mut x = [0.0; 3];
    for k in 0..3 {
        let mut m = ata;
        for i in 0..3 {
            m[i][k] = aty[i];
        }
        x[k] = det3(&m) / d;
    }
    let rss = cols
        .iter()
        .zip(y)
        .map(|(row, &yi)| (yi - row[0] * x[0] - row[1] * x[1] - row[2] * x[2]).powi(2))
        .sum();
    (rss, x[1].hypot(x[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_symbol_length() {
        let c = generate_chirp(&ChirpParams::default(), 1.0, 0.0).unwrap();
        assert_eq!(c.len(), 8192);
    }

    #[test]
    fn zero_bandwidth_is_a_tone() {
        let p = ChirpParams { bandwidth_hz: 0.0, center_offset_hz: 1000.0, ..Default::default() };
        let c = generate_chirp(&p, 1.0, 0.0).unwrap();
        let w = 2.0 * PI * 1000.0 / p.sample_rate_hz;
        for (n, s) in c.samples.iter().enumerate().take(100) {
            let e = Complex64::from_polar(1.0, w * n as f64);
            assert!((s - e).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_amplitude_is_silent() {
        let c = generate_chirp(&ChirpParams::default(), 0.0, 1.0).unwrap();
        assert!(c.samples.iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn instantaneous_frequency_sweeps_up() {
        let p = ChirpParams::default();
        let c = generate_chirp(&p, 1.0, 0.0).unwrap();
        let inst = |n: usize| (c.samples[n + 1] * c.samples[n].conj()).arg() * p.sample_rate_hz / (2.0 * PI);
        assert!((inst(0) + 20e3).abs() < 10.0);
        assert!((inst(4096) - 0.0).abs() < 10.0);
        assert!((inst(8190) - 20e3).abs() < 10.0);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = ChirpParams { sample_rate_hz: 50e3, ..Default::default() };
        assert!(generate_chirp(&p, 1.0, 0.0).is_err());
        let p = ChirpParams { symbol_time_s: 1.0e-3 / 3.0, ..Default::default() };
        assert!(p.validate().is_err());
        assert!(generate_chirp(&ChirpParams::default(), -1.0, 0.0).is_err());
    }

    #[test]
    fn autocorrelation_is_energy() {
        let c = generate_chirp(&ChirpParams::default(), 0.3, 0.2).unwrap();
        let prof = ccs_correlate(&c, &c).unwrap();
        assert!((prof.zero_lag - c.energy()).abs() < 1e-9 * c.energy());
    }

    #[test]
    fn correlation_scales_linearly() {
        let c = generate_chirp(&ChirpParams::default(), 1.0, 0.0).unwrap();
        let r = c.scaled(Complex64::new(0.25, 0.0));
        let a = p_ccs0(&c, &c).unwrap();
        let b = p_ccs0(&r, &c).unwrap();
        assert!((b - 0.25 * a).abs() < 1e-9 * a);
    }

    #[test]
    fn fft_correlation_matches_direct_sum() {
        let p = ChirpParams::default();
        let reference = generate_chirp(&p, 1.0, 0.0).unwrap();
        let mut rx = chirp_train(&p, 0.5, 0.3, 10000, 123.0).unwrap();
        rx.add_awgn(0.1, &mut ChaCha8Rng::seed_from_u64(3));
        let prof = ccs_correlate(&rx, &reference).unwrap();
        for lag in [0usize, 1, 123, 500, 1808] {
            let direct: Complex64 = (0..reference.len()).map(|m| rx.samples[m + lag] * reference.samples[m].conj()).sum();
            assert!((prof.values[lag] - direct).norm() < 1e-7 * direct.norm().max(1.0));
        }
        assert_eq!(prof.peak_lag().0, 123);
        assert!((prof.zero_lag - p_ccs0(&rx, &reference).unwrap()).abs() < 1e-7 * prof.zero_lag);
    }

    #[test]
    fn correlate_rejects_mismatch() {
        let p = ChirpParams::default();
        let a = generate_chirp(&p, 1.0, 0.0).unwrap();
        let b = ComplexSignal::zeros(8192, 1.0e6);
        assert!(ccs_correlate(&a, &b).is_err());
        let short = ComplexSignal::zeros(10, p.sample_rate_hz);
        assert!(ccs_correlate(&short, &a).is_err());
    }

    fn two_chirps(tau_s: f64) -> ComplexSignal {
        let p = ChirpParams::default();
        let n = p.samples_per_symbol();
        let mut a = chirp_train(&p, 1.0, 0.0, n, 0.0).unwrap();
        let b = chirp_train(&p, 1.0, 0.0, n, tau_s * p.sample_rate_hz).unwrap();
        a.add(&b).unwrap();
        a
    }

    #[test]
    fn beat_at_fifty_microseconds() {
        let bin = fluctuation_bin_hz(8192, 2.048e6);
        let r = fluctuation_rate(&two_chirps(50e-6)).unwrap();
        assert!((r - 500.0).abs() <= bin, "{r}");
        let r = fluctuation_rate(&two_chirps(25e-6)).unwrap();
        assert!((r - 250.0).abs() <= bin, "{r}");
    }

    #[test]
    fn aligned_chirps_have_flat_envelope() {
        assert_eq!(fluctuation_rate(&two_chirps(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn folded_beat_tracks_small_offsets() {
        let p = ChirpParams::default();
        let len = p.samples_per_symbol() * 16;
        for offset in [0.5, 2.0, 20.0, 100.0] {
            let mut s = chirp_train(&p, 1.0, 0.0, len, 0.0).unwrap();
            s.add(&chirp_train(&p, 1.0, 1.3, len, offset).unwrap()).unwrap();
            let expected = p.slope() * offset / p.sample_rate_hz;
            let r = folded_beat_rate(&s, p.samples_per_symbol(), 64, 2.0, 1.0 / 16.0).unwrap();
            assert!((r - expected).abs() <= 0.02 * expected + 0.2, "{offset}: {r} vs {expected}");
        }
    }

    #[test]
    fn envelope_decimates() {
        let s = two_chirps(50e-6);
        let e = envelope(&s, 64).unwrap();
        assert_eq!(e.len(), 128);
        assert!((e.sample_rate_hz - 32e3).abs() < 1e-9);
        let r = fluctuation_rate(&e).unwrap();
        assert!((r - 500.0).abs() <= fluctuation_bin_hz(128, 32e3));
    }

    #[test]
    fn noise_variance_scales_with_oversampling() {
        let p = ChirpParams::default();
        let v = p.noise_variance(-70.0);
        assert!((v - 1e-10 * 51.2).abs() < 1e-18);
    }

    #[test]
    fn dump_has_header_and_rows() {
        let s = ComplexSignal::new(vec![Complex64::new(1.0, -2.0); 3], 1.0).unwrap();
        let mut out = Vec::new();
        s.write_dump(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,re,im");
        assert_eq!(lines.len(), 4);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));
    }
}
