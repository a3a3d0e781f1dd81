//! The leader's measurement of the backscatter return.
//!
//! All slaves transmit the same synchronized chirp, so the carrier at the node
//! is the reference chirp scaled by one complex amplitude. The node reflects
//! it onto both sidebands, the leader downconverts the upper one and takes the
//! zero-lag correlation against the reference.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backscatter::BackscatterNode;
use crate::chirp_dsp::{generate_chirp, zero_lag, ChirpParams, ComplexSignal};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Synthesize, reflect, add noise and correlate every sample.
    Waveform,
    /// Draw the correlator output from its exact distribution.
    Statistic,
}

#[derive(Debug, Clone)]
pub struct LeaderReceiver {
    pub params: ChirpParams,
    pub noise_variance: f64,
    pub fidelity: Fidelity,
    reference: ComplexSignal,
    reference_energy: f64,
    downconvert: Vec<Complex64>,
}

impl LeaderReceiver {
    pub fn new(params: ChirpParams, noise_floor_dbm: f64, shift_freq_hz: f64, fidelity: Fidelity) -> Result<Self> {
        let reference = generate_chirp(&params, 1.0, 0.0)?;
        let reference_energy = reference.energy();
        let w = -2.0 * PI * shift_freq_hz / params.sample_rate_hz;
        let downconvert = (0..reference.len()).map(|n| Complex64::from_polar(1.0, w * n as f64)).collect();
        Ok(Self {
            noise_variance: params.noise_variance(noise_floor_dbm),
            params,
            fidelity,
            reference,
            reference_energy,
            downconvert,
        })
    }

    pub fn reference(&self) -> &ComplexSignal {
        &self.reference
    }

    pub fn reference_energy(&self) -> f64 {
        self.reference_energy
    }

    /// Standard deviation of the noise-only correlator output magnitude scale.
    pub fn correlator_noise_variance(&self) -> f64 {
        self.noise_variance * self.reference_energy
    }

    /// Zero-lag correlation for one symbol. `incident` is the complex carrier
    /// amplitude at the node (sqrt W), `back` the node-to-leader coefficient.
    pub fn measure<R: Rng + ?Sized>(
        &self,
        incident: Complex64,
        node: &BackscatterNode,
        back: Complex64,
        rng: &mut R,
    ) -> Result<Complex64> {
        match self.fidelity {
            Fidelity::Statistic => {
                let a = back * incident * node.sideband_gain(incident.norm_sqr());
                let sd = (self.correlator_noise_variance() / 2.0).sqrt();
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Ok(a * self.reference_energy + Complex64::new(re * sd, im * sd))
            }
            Fidelity::Waveform => {
                let carrier = self.reference.scaled(incident);
                let mut rx = node.reflect(&carrier).scaled(back);
                rx.add_awgn(self.noise_variance, rng);
                for (s, d) in rx.samples.iter_mut().zip(&self.downconvert) {
                    *s *= d;
                }
                zero_lag(&rx, &self.reference)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Position;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn image_sideband_cancels_at_zero_lag() {
        let rx = LeaderReceiver::new(ChirpParams::default(), -300.0, 100e3, Fidelity::Waveform).unwrap();
        let mut node = BackscatterNode::new(Position::default());
        node.awake = true;
        let incident = Complex64::new(0.01, 0.004);
        let back = Complex64::new(1e-3, -2e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = rx.measure(incident, &node, back, &mut rng).unwrap();
        let expected = back * incident * node.sideband_gain(incident.norm_sqr()) * rx.reference_energy();
        assert!((w - expected).norm() < 1e-6 * expected.norm(), "{w} {expected}");
    }

    #[test]
    fn fidelities_agree_in_distribution() {
        let mut node = BackscatterNode::new(Position::default());
        node.awake = true;
        let incident = Complex64::new(0.004, 0.0);
        let back = Complex64::new(2e-3, 0.0);
        let wave = LeaderReceiver::new(ChirpParams::default(), -99.0, 100e3, Fidelity::Waveform).unwrap();
        let stat = LeaderReceiver { fidelity: Fidelity::Statistic, ..wave.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 400;
        let moments = |r: &LeaderReceiver, rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..n).map(|_| r.measure(incident, &node, back, rng).unwrap().norm()).collect();
            let m = v.iter().sum::<f64>() / n as f64;
            let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            (m, s)
        };
        let (mw, sw) = moments(&wave, &mut rng);
        let (ms, ss) = moments(&stat, &mut rng);
        let se = (sw * sw / n as f64 + ss * ss / n as f64).sqrt();
        assert!((mw - ms).abs() < 4.0 * se, "{mw} {ms} {se}");
        assert!((sw / ss - 1.0).abs() < 0.2, "{sw} {ss}");
    }
}
