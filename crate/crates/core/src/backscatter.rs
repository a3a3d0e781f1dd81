//! Behavioural model of the passive backscatter node.
//!
//! The node wakes once the incident carrier reaches its threshold, mixes the
//! incident signal with a cosine at `shift_freq_hz` (so both sidebands are
//! present) and re-radiates a fraction of the incident power given by its
//! transfer curve.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::chirp_dsp::{ChirpParams, ComplexSignal};
use crate::channel::{Position, INSERTION_DB};
use crate::error::{domain, Result};
use crate::units::{db_to_power_ratio, dbm_to_watt, watt_to_dbm};

pub const DEFAULT_WAKE_THRESHOLD_DBM: f64 = -20.0;
pub const DEFAULT_SHIFT_FREQ_HZ: f64 = 100.0e3;
pub const DEFAULT_POWER_DRAW_W: f64 = 42.0e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferAnchor {
    pub input_dbm: f64,
    pub amplitude_ratio: f64,
}

/// Input power -> reflected power, before the insertion loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferCurve {
    /// Constant efficiency; reflected power proportional to input.
    Linear { efficiency: f64 },
    /// Efficiency `peak / (1 + exp(-(P_dBm - midpoint) / width))`.
    Logistic { peak_efficiency: f64, midpoint_dbm: f64, width_db: f64 },
    /// Reflected amplitude ratio interpolated linearly in input dBm, held
    /// constant outside the anchors.
    Anchors { points: Vec<TransferAnchor> },
    /// A logistic curve whose output collapses above `knee_dbm`; models a radio
    /// that detunes at high drive.
    NonMonotone { peak_efficiency: f64, midpoint_dbm: f64, width_db: f64, knee_dbm: f64 },
}

impl Default for TransferCurve {
    fn default() -> Self {
        TransferCurve::Logistic { peak_efficiency: 0.5, midpoint_dbm: -20.0, width_db: 4.0 }
    }
}

fn logistic(x: f64, peak: f64, mid: f64, width: f64) -> f64 {
    peak / (1.0 + (-(x - mid) / width).exp())
}

impl TransferCurve {
    /// Legacy radio for comparison runs.
    pub fn legacy() -> Self {
        TransferCurve::NonMonotone { peak_efficiency: 0.5, midpoint_dbm: -20.0, width_db: 4.0, knee_dbm: -12.0 }
    }

    /// Reflected / incident power ratio.
    pub fn efficiency(&self, incident_w: f64) -> f64 {
        if incident_w <= 0.0 {
            return 0.0;
        }
        let x = watt_to_dbm(incident_w);
        match self {
            TransferCurve::Linear { efficiency } => *efficiency,
            TransferCurve::Logistic { peak_efficiency, midpoint_dbm, width_db } => {
                logistic(x, *peak_efficiency, *midpoint_dbm, *width_db)
            }
            TransferCurve::Anchors { points } => {
                let a = interp_anchors(points, x);
                a * a
            }
            TransferCurve::NonMonotone { peak_efficiency, midpoint_dbm, width_db, knee_dbm } => {
                let base = logistic(x, *peak_efficiency, *midpoint_dbm, *width_db);
                if x > *knee_dbm {
                    base * 10f64.powf(-2.0 * (x - knee_dbm) / 10.0)
                } else {
                    base
                }
            }
        }
    }

    pub fn reflected_power(&self, incident_w: f64) -> f64 {
        self.efficiency(incident_w) * incident_w.max(0.0)
    }

    /// Strictly increasing reflected power over `[lo_dbm, hi_dbm]`, checked on
    /// a 0.05 dB grid.
    pub fn is_monotone(&self, lo_dbm: f64, hi_dbm: f64) -> bool {
        let steps = ((hi_dbm - lo_dbm) / 0.05).ceil().max(1.0) as usize;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=steps {
            let x = lo_dbm + (hi_dbm - lo_dbm) * i as f64 / steps as f64;
            let r = self.reflected_power(dbm_to_watt(x));
            if !(r > prev) {
                return false;
            }
            prev = r;
        }
        true
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TransferCurve::Linear { efficiency } => {
                if !(*efficiency > 0.0 && *efficiency <= 1.0) {
                    return domain("linear curve efficiency must lie in (0, 1]");
                }
            }
            TransferCurve::Logistic { peak_efficiency, width_db, .. }
            | TransferCurve::NonMonotone { peak_efficiency, width_db, .. } => {
                if !(*peak_efficiency > 0.0 && *peak_efficiency <= 1.0) || !(*width_db > 0.0) {
                    return domain("logistic curve needs 0 < peak <= 1 and width > 0");
                }
            }
            TransferCurve::Anchors { points } => {
                if points.is_empty() {
                    return domain("transfer curve needs at least one anchor");
                }
                if points.windows(2).any(|w| !(w[1].input_dbm > w[0].input_dbm)) {
                    return domain("anchor inputs must be strictly increasing");
                }
                if points.iter().any(|p| !(p.amplitude_ratio > 0.0 && p.amplitude_ratio <= 1.0)) {
                    return domain("anchor amplitude ratios must lie in (0, 1]");
                }
            }
        }
        Ok(())
    }
}

fn interp_anchors(points: &[TransferAnchor], x: f64) -> f64 {
    let first = points[0];
    let last = points[points.len() - 1];
    if x <= first.input_dbm {
        return first.amplitude_ratio;
    }
    if x >= last.input_dbm {
        return last.amplitude_ratio;
    }
    let i = points.partition_point(|p| p.input_dbm <= x);
    let (a, b) = (points[i - 1], points[i]);
    let t = (x - a.input_dbm) / (b.input_dbm - a.input_dbm);
    a.amplitude_ratio + t * (b.amplitude_ratio - a.amplitude_ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackscatterNode {
    pub position: Position,
    pub wake_threshold_dbm: f64,
    pub shift_freq_hz: f64,
    pub curve: TransferCurve,
    pub insertion_loss_db: f64,
    pub dynamic_power_draw_w: f64,
    pub awake: bool,
    pub harvested_j: f64,
    pub consumed_j: f64,
}

impl BackscatterNode {
    pub fn new(position: Position) -> Self {
        Self {
            position,
            wake_threshold_dbm: DEFAULT_WAKE_THRESHOLD_DBM,
            shift_freq_hz: DEFAULT_SHIFT_FREQ_HZ,
            curve: TransferCurve::default(),
            insertion_loss_db: INSERTION_DB,
            dynamic_power_draw_w: DEFAULT_POWER_DRAW_W,
            awake: false,
            harvested_j: 0.0,
            consumed_j: 0.0,
        }
    }

    pub fn validate(&self, chirp: &ChirpParams) -> Result<()> {
        if !(self.shift_freq_hz > 1.5 * chirp.bandwidth_hz) {
            return domain("shift frequency must exceed 1.5x the chirp bandwidth");
        }
        if 2.0 * (self.shift_freq_hz + chirp.bandwidth_hz) > chirp.sample_rate_hz {
            return domain("shifted band does not fit in the sample rate");
        }
        self.curve.validate()
    }

    pub fn wake_threshold_w(&self) -> f64 {
        dbm_to_watt(self.wake_threshold_dbm)
    }

    /// Advance the power state by `dt` seconds of `incident_w` watts.
    pub fn harvest_step(&mut self, incident_w: f64, dt: f64) -> Result<()> {
        if !(incident_w >= 0.0) || !(dt >= 0.0) {
            return domain("incident power and dt must be >= 0");
        }
        self.harvested_j += incident_w * dt;
        self.awake = incident_w >= self.wake_threshold_w()
            || (self.awake && incident_w >= self.dynamic_power_draw_w);
        if self.awake {
            self.consumed_j += self.dynamic_power_draw_w * dt;
        }
        Ok(())
    }

    /// Power draw as a fraction of the harvested power.
    pub fn draw_fraction(&self, harvested_w: f64) -> f64 {
        self.dynamic_power_draw_w / harvested_w
    }

    /// Total re-radiated power (both sidebands) for an incident power.
    pub fn reflected_power(&self, incident_w: f64) -> f64 {
        self.curve.reflected_power(incident_w) * db_to_power_ratio(-self.insertion_loss_db)
    }

    /// Amplitude of one sideband relative to the incident amplitude.
    pub fn sideband_gain(&self, incident_w: f64) -> f64 {
        if !self.awake || incident_w <= 0.0 {
            return 0.0;
        }
        (self.reflected_power(incident_w) / (2.0 * incident_w)).sqrt()
    }

    pub fn reflect(&self, incident: &ComplexSignal) -> ComplexSignal {
        let p = incident.mean_power();
        if !self.awake || p <= 0.0 {
            return ComplexSignal::zeros(incident.len(), incident.sample_rate_hz);
        }
        let scale = (2.0 * self.reflected_power(p) / p).sqrt();
        let w = 2.0 * PI * self.shift_freq_hz / incident.sample_rate_hz;
        let samples = incident
            .samples
            .iter()
            .enumerate()
            .map(|(n, s)| s * (scale * (w * n as f64).cos()))
            .collect::<Vec<Complex64>>();
        ComplexSignal { samples, sample_rate_hz: incident.sample_rate_hz }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chirp_dsp::{fft_forward, generate_chirp};

    fn awake_node() -> BackscatterNode {
        let mut n = BackscatterNode::new(Position::default());
        n.awake = true;
        n
    }

    #[test]
    fn wake_threshold() {
        let mut n = BackscatterNode::new(Position::default());
        n.harvest_step(dbm_to_watt(-25.0), 1e-3).unwrap();
        assert!(!n.awake);
        n.harvest_step(dbm_to_watt(-20.0), 1e-3).unwrap();
        assert!(n.awake);
    }

    #[test]
    fn stays_awake_on_sufficient_harvest() {
        let mut n = awake_node();
        n.harvest_step(0.37e-3, 1e-3).unwrap();
        assert!(n.awake);
        let f = n.draw_fraction(0.37e-3);
        assert!(f > 0.11 && f < 0.12, "{f}");
        n.harvest_step(1e-6, 1e-3).unwrap();
        assert!(!n.awake);
    }

    #[test]
    fn negative_power_is_error() {
        assert!(BackscatterNode::new(Position::default()).harvest_step(-1.0, 1.0).is_err());
    }

    #[test]
    fn asleep_reflects_nothing() {
        let n = BackscatterNode::new(Position::default());
        let c = generate_chirp(&ChirpParams::default(), 1e-2, 0.0).unwrap();
        assert!(n.reflect(&c).samples.iter().all(|s| s.norm() == 0.0));
        assert_eq!(n.sideband_gain(1e-4), 0.0);
    }

    #[test]
    fn tone_lands_on_both_sidebands() {
        let n = awake_node();
        let fs = 2.048e6;
        let len = 8192;
        let tone = ComplexSignal::new(vec![Complex64::new(0.01, 0.0); len], fs).unwrap();
        let mut buf = n.reflect(&tone).samples;
        fft_forward(len).process(&mut buf);
        let bin = (100e3 * len as f64 / fs).round() as usize;
        let total: f64 = buf.iter().map(|c| c.norm_sqr()).sum();
        let side = buf[bin].norm_sqr() + buf[len - bin].norm_sqr();
        assert!(side / total > 0.999);
        assert!((buf[bin].norm() - buf[len - bin].norm()).abs() < 1e-9 * buf[bin].norm());
    }

    #[test]
    fn reflected_power_matches_curve() {
        let n = awake_node();
        let c = generate_chirp(&ChirpParams::default(), 0.01, 0.0).unwrap();
        let out = n.reflect(&c);
        let expected = n.reflected_power(c.mean_power());
        assert!((out.mean_power() - expected).abs() < 1e-6 * expected);
    }

    #[test]
    fn reflected_power_increases() {
        let n = awake_node();
        let c = generate_chirp(&ChirpParams::default(), 1.0, 0.0).unwrap();
        let r1 = n.reflect(&c.scaled(Complex64::new(0.003, 0.0))).mean_power();
        let r2 = n.reflect(&c.scaled(Complex64::new(0.004, 0.0))).mean_power();
        assert!(r1 < r2);
    }

    #[test]
    fn default_curve_monotone_legacy_not() {
        assert!(TransferCurve::default().is_monotone(-60.0, 30.0));
        assert!(!TransferCurve::legacy().is_monotone(-60.0, 30.0));
    }

    #[test]
    fn anchors_interpolate() {
        let curve = TransferCurve::Anchors {
            points: vec![
                TransferAnchor { input_dbm: -30.0, amplitude_ratio: 0.2 },
                TransferAnchor { input_dbm: -10.0, amplitude_ratio: 0.6 },
            ],
        };
        curve.validate().unwrap();
        let e = curve.efficiency(dbm_to_watt(-20.0));
        assert!((e - 0.16).abs() < 1e-12);
        assert!(curve.is_monotone(-50.0, 10.0));
    }

    #[test]
    fn shift_must_clear_bandwidth() {
        let mut n = BackscatterNode::new(Position::default());
        n.validate(&ChirpParams::default()).unwrap();
        n.shift_freq_hz = 50e3;
        assert!(n.validate(&ChirpParams::default()).is_err());
    }
}
