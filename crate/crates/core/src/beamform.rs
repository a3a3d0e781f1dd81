//! One-bit phase alignment.
//!
//! Every round each slave transmits its reference phase plus a uniform random
//! perturbation within `+/- bound`. The leader reports a single bit: whether
//! the smoothed backscatter metric beat the best value seen so far. On a
//! yes the perturbed phases become the new reference, otherwise the slaves
//! fall back to the old reference before drawing the next perturbation.

use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backscatter::TransferCurve;
use crate::error::{domain, Result};
use crate::numeric::{inverse_bessel_ratio, normal_sf, polyfit, polyval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentState {
    /// Phases transmitted in the current round.
    pub phases: Vec<f64>,
    /// Reference phases: the last set that produced an improvement.
    pub best_phases: Vec<f64>,
    pub y_best: Option<f64>,
    pub round: usize,
    /// The next measurement replaces `y_best` unconditionally.
    pub remeasure: bool,
}

impl AlignmentState {
    pub fn new(phases: Vec<f64>) -> Self {
        let phases: Vec<f64> = phases.into_iter().map(|p| p.rem_euclid(TAU)).collect();
        Self { best_phases: phases.clone(), phases, y_best: None, round: 0, remeasure: false }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Self::new((0..n).map(|_| rng.random::<f64>() * TAU).collect())
    }

    /// Transmit the reference unperturbed next round and adopt whatever it
    /// measures as the new best. Used when the channel drifts.
    pub fn request_remeasure(&mut self) {
        self.phases.clone_from(&self.best_phases);
        self.remeasure = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub improved: bool,
    pub y_best: f64,
}

/// Feed the smoothed metric measured for `state.phases`, then draw the
/// phases for the next round.
pub fn alignment_round<R: Rng + ?Sized>(
    state: &mut AlignmentState,
    measured: f64,
    bound: f64,
    deadband_fraction: f64,
    rng: &mut R,
) -> RoundOutcome {
    let improved = match state.y_best {
        None => true,
        Some(_) if state.remeasure => true,
        Some(best) => measured > best * (1.0 + deadband_fraction),
    };
    if improved {
        state.best_phases.clone_from(&state.phases);
        state.y_best = Some(measured);
    }
    state.remeasure = false;
    for (p, b) in state.phases.iter_mut().zip(&state.best_phases) {
        let delta = if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
        *p = (b + delta).rem_euclid(TAU);
    }
    state.round += 1;
    RoundOutcome { improved, y_best: state.y_best.unwrap_or(measured) }
}

/// Scalar Kalman filter with innovation-based measurement-noise adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanSmoother {
    pub q: f64,
    pub r: f64,
    pub r_min: f64,
    pub adaptive: bool,
    /// Learn `r` continuously but apply it only at `reset`, so the samples
    /// of one batch are weighted by the same noise level.
    pub adapt_on_reset: bool,
    pub window: usize,
    estimate: Option<f64>,
    variance: f64,
    innovations: VecDeque<f64>,
}

impl KalmanSmoother {
    pub fn new(q: f64, r: f64, window: usize) -> Self {
        Self {
            q,
            r,
            r_min: r * 1e-6,
            adaptive: true,
            adapt_on_reset: false,
            window: window.max(2),
            estimate: None,
            variance: r,
            innovations: VecDeque::new(),
        }
    }

    pub fn estimate(&self) -> Option<f64> {
        self.estimate
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Forget the state estimate but keep the learned noise level.
    pub fn reset(&mut self) {
        self.estimate = None;
        if self.adaptive && self.adapt_on_reset {
            self.update_r(0.0);
        }
    }

    fn update_r(&mut self, prior: f64) {
        if self.innovations.len() >= 2 {
            let c = self.innovations.iter().sum::<f64>() / self.innovations.len() as f64;
            self.r = (c - prior).max(self.r_min);
        }
    }

    pub fn smooth(&mut self, sample: f64) -> f64 {
        if !sample.is_finite() {
            return self.estimate.unwrap_or(0.0);
        }
        let x = match self.estimate {
            None => {
                self.estimate = Some(sample);
                self.variance = self.r;
                return sample;
            }
            Some(x) => x,
        };
        let prior = self.variance + self.q;
        let innovation = sample - x;
        if self.adaptive {
            self.innovations.push_back(innovation * innovation);
            if self.innovations.len() > self.window {
                self.innovations.pop_front();
            }
            if !self.adapt_on_reset {
                self.update_r(prior);
            }
        }
        let gain = prior / (prior + self.r);
        let x = x + gain * innovation;
        self.variance = (1.0 - gain) * prior;
        self.estimate = Some(x);
        x
    }
}

pub fn smooth(smoother: &mut KalmanSmoother, sample: f64) -> f64 {
    smoother.smooth(sample)
}

/// `E[cos d]` for `d` uniform in `[-bound, bound]`.
pub fn mean_cos_uniform(bound: f64) -> f64 {
    if bound == 0.0 { 1.0 } else { bound.sin() / bound }
}

/// `I_2(eta)/I_0(eta)` where `I_1(eta)/I_0(eta) = y / n`.
pub fn second_order_ratio(y: f64, n: usize) -> f64 {
    let r = y / n as f64;
    let eta = inverse_bessel_ratio(r, 1e-10);
    // I_2 = I_0 - (2 / eta) I_1
    if eta.is_infinite() { 1.0 } else if eta == 0.0 { 0.0 } else { 1.0 - 2.0 * r / eta }
}

fn step_with_ratio(y: f64, n: usize, bound: f64, ratio2: f64) -> f64 {
    let nf = n as f64;
    let c = mean_cos_uniform(bound);
    let c2 = mean_cos_uniform(2.0 * bound);
    let var = (nf / 2.0 * ((1.0 - c * c) - ratio2 * (c * c - c2))).max(0.0);
    if var <= 1e-300 {
        return y;
    }
    let sd = var.sqrt();
    let d = y * (1.0 - c);
    let p = normal_sf(d / sd);
    let next = y * (1.0 - p * (1.0 - c)) + sd / (2.0 * PI).sqrt() * (-d * d / (2.0 * var)).exp();
    next.min(nf)
}

/// Expected beamforming amplitude after one round of the update rule with
/// `n` unit-amplitude slaves currently at amplitude `y`.
pub fn expected_amplitude_step(y: f64, n: usize, bound: f64) -> Result<f64> {
    if n == 0 || !(y >= 0.0) || y > n as f64 {
        return domain(format!("amplitude {y} outside [0, {n}]"));
    }
    if !(bound > 0.0 && bound <= PI) {
        return domain(format!("bound {bound} outside (0, pi]"));
    }
    Ok(step_with_ratio(y, n, bound, second_order_ratio(y, n)))
}

/// Expected-amplitude trajectory for a bound sequence starting at `y0`.
pub fn expected_trajectory(y0: f64, n: usize, bounds: impl Fn(usize) -> f64, rounds: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rounds + 1);
    let mut y = y0;
    out.push(y);
    for r in 0..rounds {
        y = expected_amplitude_step(y, n, bounds(r))?;
        out.push(y);
    }
    Ok(out)
}

/// Mean amplitude of an incoherent start with `n` unit phasors.
pub fn incoherent_start(n: usize) -> f64 {
    (PI * n as f64).sqrt() / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSchedule {
    /// Polynomial in the normalised round index `2n/(horizon-1) - 1`.
    pub coefficients: Vec<f64>,
    pub horizon: usize,
    pub min_bound: f64,
    pub max_bound: f64,
    /// Per-round optimum before fitting.
    pub optimal: Vec<f64>,
}

impl BoundSchedule {
    pub fn evaluate(&self, round: usize) -> f64 {
        let r = round.min(self.horizon.saturating_sub(1)) as f64;
        let x = if self.horizon > 1 { 2.0 * r / (self.horizon - 1) as f64 - 1.0 } else { 0.0 };
        polyval(&self.coefficients, x).clamp(self.min_bound, self.max_bound)
    }

    pub fn constant(bound: f64) -> Self {
        Self { coefficients: vec![bound], horizon: 1, min_bound: bound, max_bound: bound, optimal: vec![bound] }
    }
}

pub const SCHEDULE_DEGREE: usize = 7;

/// Grid of candidate bounds `step, 2 step, ..., pi`.
pub fn bound_grid(step: f64) -> Vec<f64> {
    let k = (PI / step).round() as usize;
    (1..=k).map(|i| i as f64 * step).collect()
}

/// The grid bound maximising the curve-composed expected gain at amplitude
/// `y`. `unit_power_w` converts squared normalised amplitude to incident watts.
/// Returns (bound, expected next amplitude).
pub fn optimal_bound(y: f64, n: usize, curve: &TransferCurve, unit_power_w: f64, grid: &[f64]) -> (f64, f64) {
    let ratio2 = second_order_ratio(y.min(n as f64), n);
    let before = curve.reflected_power(unit_power_w * y * y);
    let mut best = (grid[0], f64::NEG_INFINITY, y);
    for &b in grid {
        let next = step_with_ratio(y, n, b, ratio2);
        let gain = curve.reflected_power(unit_power_w * next * next) - before;
        if gain > best.1 {
            best = (b, gain, next);
        }
    }
    (best.0, best.2)
}

pub fn compute_bound_schedule(
    n: usize,
    curve: &TransferCurve,
    unit_power_w: f64,
    horizon: usize,
) -> Result<BoundSchedule> {
    if n < 2 {
        return domain("a bound schedule needs at least two slaves");
    }
    if horizon < SCHEDULE_DEGREE + 1 {
        return domain(format!("horizon must be at least {}", SCHEDULE_DEGREE + 1));
    }
    curve.validate()?;
    if !curve.is_monotone(-60.0, 30.0) {
        return domain("transfer curve is not monotone over the operating range");
    }
    let grid = bound_grid(PI / 180.0);
    let mut y = incoherent_start(n);
    let mut optimal = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let (b, next) = optimal_bound(y, n, curve, unit_power_w, &grid);
        optimal.push(b);
        y = next;
    }
    let xs: Vec<f64> = (0..horizon).map(|i| 2.0 * i as f64 / (horizon - 1) as f64 - 1.0).collect();
    let coefficients = polyfit(&xs, &optimal, SCHEDULE_DEGREE);
    Ok(BoundSchedule {
        coefficients,
        horizon,
        min_bound: grid[0],
        max_bound: grid[grid.len() - 1],
        optimal,
    })
}

/// Monte-Carlo of the noiseless update rule with unit-amplitude slaves.
/// Returns the mean amplitude after each round (index 0 = start).
pub fn simulate_mean_trajectory<R: Rng + ?Sized>(
    n: usize,
    bounds: impl Fn(usize) -> f64,
    rounds: usize,
    trials: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut sums = vec![0.0; rounds + 1];
    for _ in 0..trials {
        let mut st = AlignmentState::random(n, rng);
        for r in 0..=rounds {
            let y = coherent_amplitude(&st.phases);
            let out = alignment_round(&mut st, y, if r < rounds { bounds(r) } else { 0.0 }, 0.0, rng);
            sums[r] += out.y_best;
        }
    }
    sums.iter().map(|s| s / trials as f64).collect()
}

/// `|sum exp(j theta_i)|`.
pub fn coherent_amplitude(phases: &[f64]) -> f64 {
    phases.iter().map(|&p| Complex64::from_polar(1.0, p)).sum::<Complex64>().norm()
}

/// First round after which `y_best` grows by less than `rel` over `window`
/// rounds.
pub fn rounds_to_converge(y_best: &[f64], rel: f64, window: usize) -> Option<usize> {
    (0..y_best.len().saturating_sub(window)).find(|&i| {
        let a = y_best[i];
        a > 0.0 && y_best[i + window] / a - 1.0 < rel
    })
}
