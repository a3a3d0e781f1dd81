//! Two-step chirp time synchronization.
//!
//! Step one removes each slave's coarse offset by correlating against a
//! preamble chirp. Step two aligns slaves one at a time against the first
//! slave: the leader watches the beat between the two chirp trains and sends
//! one of three commands until the beat disappears.

use std::fmt;
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chirp_dsp::{
    ccs_correlate, chirp_train, fluctuation_bin_hz, folded_beat_rate, ChirpParams, ComplexSignal,
};
use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlaveClock {
    /// Offset relative to the leader epoch, in samples.
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncFeedback {
    AddOneSample,
    SubOneSample,
    Stop,
}

impl SyncFeedback {
    /// Change in the target's residual offset caused by the command.
    pub fn step(&self) -> f64 {
        match self {
            SyncFeedback::AddOneSample => 1.0,
            SyncFeedback::SubOneSample => -1.0,
            SyncFeedback::Stop => 0.0,
        }
    }
}

impl fmt::Display for SyncFeedback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SyncFeedback::AddOneSample => "add",
            SyncFeedback::SubOneSample => "sub",
            SyncFeedback::Stop => "stop",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    /// Symbols observed by the leader per fine-sync round.
    pub observe_symbols: usize,
    /// Envelope block-averaging factor.
    pub decimation: usize,
    /// Per-sample SNR of the preamble at the slave; `None` for a clean channel.
    pub coarse_snr_db: Option<f64>,
    /// Per-sample SNR of each chirp train at the leader during fine sync.
    pub fine_snr_db: Option<f64>,
    /// Minimum ratio of correlation peak to mean correlation magnitude.
    pub peak_to_mean_min: f64,
    pub max_fine_rounds: usize,
    /// The leader stops once the beat is no faster than that of this offset.
    pub stop_residual_samples: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            observe_symbols: 128,
            decimation: 64,
            coarse_snr_db: None,
            fine_snr_db: Some(20.0),
            peak_to_mean_min: 6.0,
            max_fine_rounds: 64,
            stop_residual_samples: 0.75,
        }
    }
}

/// A single preamble chirp starting `delay` samples into a window of `len`.
pub fn preamble(params: &ChirpParams, amplitude: f64, len: usize, delay: f64) -> Result<ComplexSignal> {
    let mut s = chirp_train(params, amplitude, 0.0, len, delay)?;
    let n = params.samples_per_symbol() as f64;
    for (i, v) in s.samples.iter_mut().enumerate() {
        let t = i as f64 - delay;
        if t < 0.0 || t >= n {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    Ok(s)
}

/// Lag of the correlation peak of `rx` against the reference preamble.
pub fn coarse_sync(rx: &ComplexSignal, reference: &ComplexSignal, peak_to_mean_min: f64) -> Result<i64> {
    let prof = ccs_correlate(rx, reference)?;
    let (lag, peak) = prof.peak_lag();
    let mean = prof.values.iter().map(|v| v.norm()).sum::<f64>() / prof.values.len() as f64;
    if !(peak > peak_to_mean_min * mean) {
        return Err(Error::SyncFailure(format!(
            "no correlation peak above threshold (peak/mean {:.2})",
            peak / mean
        )));
    }
    Ok(lag as i64)
}

/// What the leader hears during fine sync: the reference slave's chirp train
/// plus the target's train `residual` samples late, with optional noise.
pub fn leader_observation<R: Rng + ?Sized>(
    params: &ChirpParams,
    cfg: &SyncConfig,
    target_phase: f64,
    residual: f64,
    rng: &mut R,
) -> Result<ComplexSignal> {
    let len = params.samples_per_symbol() * cfg.observe_symbols;
    let mut rx = chirp_train(params, 1.0, 0.0, len, 0.0)?;
    rx.add(&chirp_train(params, 1.0, target_phase, len, residual)?)?;
    if let Some(snr) = cfg.fine_snr_db {
        rx.add_awgn(10f64.powf(-snr / 10.0), rng);
    }
    Ok(rx)
}

/// Leading fraction of each symbol the beat fit ignores.
const GUARD: f64 = 1.0 / 16.0;

/// Leader-side greedy controller for one target slave.
#[derive(Debug, Clone)]
pub struct FineSyncController {
    decimation: usize,
    symbol_len: usize,
    /// Cross-term amplitude of the two trains' power; both arrive at unit
    /// amplitude, a level the leader knows from their preambles.
    cross_power: f64,
    stop_rate_hz: f64,
    threshold_hz: f64,
    last_rate: Option<f64>,
    direction: SyncFeedback,
    reversed: bool,
    finishing: bool,
}

impl FineSyncController {
    pub fn new(params: &ChirpParams, cfg: &SyncConfig) -> Self {
        // two trains offset by one sample beat at slope / sample_rate
        let beat_per_sample = params.slope() / params.sample_rate_hz;
        Self {
            decimation: cfg.decimation,
            symbol_len: params.samples_per_symbol(),
            cross_power: 2.0,
            stop_rate_hz: cfg.stop_residual_samples * beat_per_sample,
            threshold_hz: fluctuation_bin_hz(
                params.samples_per_symbol() * cfg.observe_symbols / cfg.decimation.max(1),
                params.sample_rate_hz / cfg.decimation.max(1) as f64,
            ),
            last_rate: None,
            direction: SyncFeedback::AddOneSample,
            reversed: false,
            finishing: false,
        }
    }

    fn opposite(cmd: SyncFeedback) -> SyncFeedback {
        match cmd {
            SyncFeedback::AddOneSample => SyncFeedback::SubOneSample,
            SyncFeedback::SubOneSample => SyncFeedback::AddOneSample,
            SyncFeedback::Stop => SyncFeedback::Stop,
        }
    }

    /// Returns the command and the measured fluctuation rate.
    pub fn round(&mut self, leader_rx: &ComplexSignal) -> Result<(SyncFeedback, f64)> {
        let rate = folded_beat_rate(leader_rx, self.symbol_len, self.decimation, self.cross_power, GUARD)?;
        let threshold = self.threshold_hz.max(self.stop_rate_hz);
        if self.finishing || rate <= threshold {
            return Ok((SyncFeedback::Stop, rate));
        }
        let cmd = match self.last_rate {
            None => self.direction,
            Some(prev) if rate < prev => self.direction,
            Some(_) if !self.reversed => {
                self.reversed = true;
                self.direction = Self::opposite(self.direction);
                self.direction
            }
            Some(_) => {
                // worse in both directions: step back to the best point
                self.finishing = true;
                Self::opposite(self.direction)
            }
        };
        self.last_rate = Some(rate);
        Ok((cmd, rate))
    }
}

/// One command decision for `leader_rx` with a fresh controller; exposed for
/// single-shot use.
pub fn fine_sync_round(leader_rx: &ComplexSignal, controller: &mut FineSyncController) -> Result<SyncFeedback> {
    controller.round(leader_rx).map(|(c, _)| c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub period: usize,
    pub slave: usize,
    pub round: usize,
    pub residual_samples: f64,
    pub rate_hz: f64,
    pub command: SyncFeedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaveSyncResult {
    pub initial_offset: f64,
    pub coarse_estimate: i64,
    pub residual_after_coarse: f64,
    /// Residual relative to the reference slave after fine sync.
    pub final_residual: f64,
    pub fine_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub slaves: Vec<SlaveSyncResult>,
    pub periods: usize,
    pub transcript: Vec<TranscriptRow>,
}

impl SyncReport {
    pub fn total_fine_rounds(&self) -> usize {
        self.slaves.iter().map(|s| s.fine_rounds).sum()
    }

    pub fn max_pairwise_residual(&self) -> f64 {
        let r: Vec<f64> = self.slaves.iter().map(|s| s.final_residual).collect();
        let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
        if r.is_empty() { 0.0 } else { hi - lo }
    }

    pub fn write_transcript<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "period,slave,round,residual_samples,rate_hz,command")?;
        for t in &self.transcript {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6},{}",
                t.period, t.slave, t.round, t.residual_samples, t.rate_hz, t.command
            )?;
        }
        Ok(())
    }
}

/// Coarse offset estimate for one slave whose preamble arrives `offset`
/// samples late.
pub fn coarse_estimate<R: Rng + ?Sized>(
    params: &ChirpParams,
    cfg: &SyncConfig,
    offset: f64,
    rng: &mut R,
) -> Result<i64> {
    let n = params.samples_per_symbol();
    let window = offset.ceil().max(0.0) as usize + 2 * n;
    let mut rx = preamble(params, 1.0, window, offset)?;
    if let Some(snr) = cfg.coarse_snr_db {
        rx.add_awgn(10f64.powf(-snr / 10.0), rng);
    }
    let reference = preamble(params, 1.0, n, 0.0)?;
    coarse_sync(&rx, &reference, cfg.peak_to_mean_min)
}

/// Fine-align `residual` (target minus reference, samples); returns the final
/// residual and the number of rounds including the closing stop.
pub fn fine_sync<R: Rng + ?Sized>(
    params: &ChirpParams,
    cfg: &SyncConfig,
    mut residual: f64,
    target_phase: f64,
    period: usize,
    slave: usize,
    rng: &mut R,
    transcript: &mut Vec<TranscriptRow>,
) -> Result<(f64, usize)> {
    let mut ctl = FineSyncController::new(params, cfg);
    for round in 0..cfg.max_fine_rounds {
        let rx = leader_observation(params, cfg, target_phase, residual, rng)?;
        let (cmd, rate) = ctl.round(&rx)?;
        transcript.push(TranscriptRow { period, slave, round, residual_samples: residual, rate_hz: rate, command: cmd });
        if cmd == SyncFeedback::Stop {
            return Ok((residual, round + 1));
        }
        residual += cmd.step();
    }
    Err(Error::SyncFailure(format!("slave {slave} did not converge in {} rounds", cfg.max_fine_rounds)))
}

/// Full protocol over all slaves. Slave 0 is the reference.
pub fn run_sync<R: Rng + ?Sized>(
    params: &ChirpParams,
    cfg: &SyncConfig,
    slaves: &[SlaveClock],
    rng: &mut R,
) -> Result<SyncReport> {
    params.validate()?;
    if cfg.decimation == 0 || cfg.observe_symbols == 0 {
        return domain("observe_symbols and decimation must be positive");
    }
    let mut results = Vec::with_capacity(slaves.len());
    let mut transcript = Vec::new();
    for s in slaves {
        let est = coarse_estimate(params, cfg, s.offset, rng)?;
        results.push(SlaveSyncResult {
            initial_offset: s.offset,
            coarse_estimate: est,
            residual_after_coarse: s.offset - est as f64,
            final_residual: s.offset - est as f64,
            fine_rounds: 0,
        });
    }
    if results.len() < 2 {
        if let Some(r) = results.first_mut() {
            r.final_residual = 0.0;
        }
        return Ok(SyncReport { slaves: results, periods: 0, transcript });
    }
    let reference = results[0].residual_after_coarse;
    results[0].final_residual = 0.0;
    for i in 1..results.len() {
        let rel = results[i].residual_after_coarse - reference;
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let (fin, rounds) = fine_sync(params, cfg, rel, phase, i, i, rng, &mut transcript)?;
        results[i].final_residual = fin;
        results[i].fine_rounds = rounds;
    }
    Ok(SyncReport { periods: results.len() - 1, slaves: results, transcript })
}
