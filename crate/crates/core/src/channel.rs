//! Geometry, media and link budgets.
//!
//! Losses are kept in dB and composed by summation. Complex coefficients use
//! the convention `h = gain * exp(-j * phase)` where `phase` is the electrical
//! path delay plus a static per-transmitter offset.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::units::{db_to_amplitude_ratio, SPEED_OF_LIGHT};

pub const DEFAULT_CARRIER_HZ: f64 = 915.0e6;
pub const DEFAULT_TX_GAIN_DBI: f64 = 4.0;
pub const SKIN_INBOUND_DB: f64 = 3.0;
pub const SKIN_OUTBOUND_DB: f64 = 5.0;
pub const INSERTION_DB: f64 = 30.0;
/// 4.6 dB/cm, the slope through both measured muscle anchors.
pub const MUSCLE_DB_PER_M: f64 = 460.0;
/// Refractive index of muscle near 915 MHz (sqrt of relative permittivity ~55).
pub const MUSCLE_REFRACTIVE_INDEX: f64 = 7.4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        self.sub(other).norm()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn add(&self, o: &Position) -> Position {
        Position::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(&self, o: &Position) -> Position {
        Position::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(&self, k: f64) -> Position {
        Position::new(self.x * k, self.y * k, self.z * k)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Inbound,
    Outbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MediumKind {
    Air,
    SkinBoundary(Direction),
    Muscle,
    Insertion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediumSegment {
    pub kind: MediumKind,
    pub length_m: f64,
}

impl MediumSegment {
    pub fn air(length_m: f64) -> Self {
        Self { kind: MediumKind::Air, length_m }
    }

    pub fn muscle(length_m: f64) -> Self {
        Self { kind: MediumKind::Muscle, length_m }
    }

    pub fn skin(direction: Direction) -> Self {
        Self { kind: MediumKind::SkinBoundary(direction), length_m: 0.0 }
    }

    pub fn insertion() -> Self {
        Self { kind: MediumKind::Insertion, length_m: 0.0 }
    }

    pub fn loss_db(&self, carrier_hz: f64) -> Result<f64> {
        if !(self.length_m >= 0.0) || !self.length_m.is_finite() {
            return domain(format!("segment length must be finite and >= 0, got {}", self.length_m));
        }
        match self.kind {
            MediumKind::Air => air_loss(self.length_m, carrier_hz),
            MediumKind::Muscle => muscle_loss(self.length_m),
            MediumKind::SkinBoundary(Direction::Inbound) => Ok(SKIN_INBOUND_DB),
            MediumKind::SkinBoundary(Direction::Outbound) => Ok(SKIN_OUTBOUND_DB),
            MediumKind::Insertion => Ok(INSERTION_DB),
        }
    }

    /// Electrical length: physical length scaled by the refractive index.
    fn electrical_length(&self) -> f64 {
        match self.kind {
            MediumKind::Air => self.length_m,
            MediumKind::Muscle => self.length_m * MUSCLE_REFRACTIVE_INDEX,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub segments: Vec<MediumSegment>,
    pub total_loss_db: f64,
    /// Propagation phase delay in [0, 2pi), without any random offset.
    pub phase_rad: f64,
}

impl LinkBudget {
    pub fn received_dbm(&self, tx_dbm: f64) -> f64 {
        tx_dbm - self.total_loss_db
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelCoeff {
    pub gain: f64,
    pub phase: f64,
}

impl ChannelCoeff {
    pub fn to_complex(&self) -> Complex64 {
        Complex64::from_polar(self.gain, -self.phase)
    }
}

pub fn wavelength(carrier_hz: f64) -> f64 {
    SPEED_OF_LIGHT / carrier_hz
}

/// Free-space path loss in dB.
pub fn air_loss(d: f64, f: f64) -> Result<f64> {
    if !(d > 0.0) || !(f > 0.0) || !d.is_finite() || !f.is_finite() {
        return domain(format!("air_loss needs d > 0 and f > 0, got d={d}, f={f}"));
    }
    Ok(20.0 * (4.0 * PI * d * f / SPEED_OF_LIGHT).log10())
}

/// Muscle attenuation in dB for a path of `d` meters.
pub fn muscle_loss(d: f64) -> Result<f64> {
    if !(d >= 0.0) || !d.is_finite() {
        return domain(format!("muscle_loss needs d >= 0, got {d}"));
    }
    Ok(MUSCLE_DB_PER_M * d)
}

pub fn compose_budget(segments: &[MediumSegment], carrier_hz: f64) -> Result<LinkBudget> {
    if segments.is_empty() {
        return domain("link budget needs at least one segment");
    }
    let mut total = 0.0;
    let mut electrical = 0.0;
    for s in segments {
        total += s.loss_db(carrier_hz)?;
        electrical += s.electrical_length();
    }
    let phase = (2.0 * PI * electrical / wavelength(carrier_hz)).rem_euclid(2.0 * PI);
    Ok(LinkBudget { segments: segments.to_vec(), total_loss_db: total, phase_rad: phase })
}

/// Horizontal tissue slab, laterally unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueSlab {
    pub top_z_m: f64,
    pub thickness_m: f64,
}

impl TissueSlab {
    pub fn bottom_z_m(&self) -> f64 {
        self.top_z_m - self.thickness_m
    }

    pub fn contains(&self, p: &Position) -> bool {
        p.z <= self.top_z_m && p.z >= self.bottom_z_m()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub carrier_hz: f64,
    pub tx_gain_dbi: f64,
    pub tissue: Option<TissueSlab>,
    pub seed: u64,
    /// Add the static per-transmitter phase offset.
    pub random_phase: bool,
    /// Power of an additive diffuse Rayleigh term relative to the direct path.
    pub rayleigh_relative_power: Option<f64>,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            carrier_hz: DEFAULT_CARRIER_HZ,
            tx_gain_dbi: DEFAULT_TX_GAIN_DBI,
            tissue: None,
            seed: 0,
            random_phase: true,
            rayleigh_relative_power: None,
        }
    }
}

const RAYLEIGH_STREAM_BASE: u64 = 1 << 32;

impl ChannelModel {
    pub fn air(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn with_tissue(seed: u64, tissue: TissueSlab) -> Self {
        Self { seed, tissue: Some(tissue), ..Self::default() }
    }

    /// Split the straight line `tx -> rx` into medium segments.
    pub fn segments(&self, tx: &Position, rx: &Position) -> Result<Vec<MediumSegment>> {
        if !tx.is_finite() || !rx.is_finite() {
            return domain("positions must be finite");
        }
        let d = tx.distance(rx);
        if d == 0.0 {
            return domain("transmitter and receiver coincide");
        }
        // below lambda/(4 pi) the free-space formula would turn into a gain
        let min_air = wavelength(self.carrier_hz) / (4.0 * PI);
        let slab = match self.tissue {
            Some(s) => s,
            None => return Ok(vec![MediumSegment::air(d.max(min_air))]),
        };
        let tx_in = slab.contains(tx);
        let rx_in = slab.contains(rx);
        if tx_in && rx_in {
            return Ok(vec![MediumSegment::muscle(d)]);
        }
        let (lo, hi) = (tx.z.min(rx.z), tx.z.max(rx.z));
        let vertical = (hi.min(slab.top_z_m) - lo.max(slab.bottom_z_m())).max(0.0);
        if vertical <= 0.0 {
            return Ok(vec![MediumSegment::air(d.max(min_air))]);
        }
        let cos_i = (rx.z - tx.z).abs() / d;
        let sin_t = (1.0 - cos_i * cos_i).max(0.0).sqrt() / MUSCLE_REFRACTIVE_INDEX;
        let cos_t = (1.0 - sin_t * sin_t).sqrt();
        let tissue_len = vertical / cos_t;
        let air_len = (d - vertical / cos_i).max(0.0);
        let air = MediumSegment::air(air_len.max(min_air));
        let mut segs = Vec::with_capacity(5);
        match (tx_in, rx_in) {
            (false, true) => {
                segs.push(air);
                segs.push(MediumSegment::skin(Direction::Inbound));
                segs.push(MediumSegment::muscle(tissue_len));
            }
            (true, false) => {
                segs.push(MediumSegment::muscle(tissue_len));
                segs.push(MediumSegment::skin(Direction::Outbound));
                segs.push(air);
            }
            _ => {
                segs.push(air);
                segs.push(MediumSegment::skin(Direction::Inbound));
                segs.push(MediumSegment::muscle(tissue_len));
                segs.push(MediumSegment::skin(Direction::Outbound));
            }
        }
        Ok(segs)
    }

    pub fn budget(&self, tx: &Position, rx: &Position) -> Result<LinkBudget> {
        let segs = self.segments(tx, rx)?;
        compose_budget(&segs, self.carrier_hz)
    }

    /// Static phase offset of transmitter `tx_id`, uniform in [0, 2pi).
    pub fn phase_offset(&self, tx_id: u64) -> f64 {
        if !self.random_phase {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(tx_id);
        rng.random::<f64>() * 2.0 * PI
    }

    pub fn channel(&self, tx_id: u64, tx: &Position, rx: &Position) -> Result<ChannelCoeff> {
        let b = self.budget(tx, rx)?;
        let gain = db_to_amplitude_ratio(-b.total_loss_db + self.tx_gain_dbi);
        let phase = (b.phase_rad + self.phase_offset(tx_id)).rem_euclid(2.0 * PI);
        let coeff = ChannelCoeff { gain, phase };
        match self.rayleigh_relative_power {
            Some(k) if k > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(RAYLEIGH_STREAM_BASE + tx_id);
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                let diffuse = Complex64::new(re, im) * (k / 2.0).sqrt();
                let h = (coeff.to_complex() + diffuse * gain) / (1.0 + k).sqrt();
                Ok(ChannelCoeff { gain: h.norm(), phase: (-h.arg()).rem_euclid(2.0 * PI) })
            }
            _ => Ok(coeff),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn air_loss_table_endpoints() {
        assert!((air_loss(1.0, 915e6).unwrap() - 31.67).abs() < 0.005);
        assert!((air_loss(10.0, 915e6).unwrap() - 51.67).abs() < 0.005);
        let two = air_loss(2.0, 915e6).unwrap();
        let one = air_loss(1.0, 915e6).unwrap();
        assert!((two - one - 20.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn air_loss_rejects_bad_inputs() {
        assert!(air_loss(0.0, 915e6).is_err());
        assert!(air_loss(1.0, -1.0).is_err());
        assert!(air_loss(f64::NAN, 915e6).is_err());
    }

    #[test]
    fn muscle_anchors() {
        assert!((muscle_loss(0.02).unwrap() - 9.2).abs() < 1e-12);
        assert!((muscle_loss(0.06).unwrap() - 27.6).abs() < 1e-12);
        assert!((muscle_loss(0.04).unwrap() - 18.4).abs() < 1e-12);
        assert_eq!(muscle_loss(0.0).unwrap(), 0.0);
        assert!(muscle_loss(-0.01).is_err());
    }

    #[test]
    fn air_only_one_way() {
        let b = compose_budget(&[MediumSegment::air(1.0)], 915e6).unwrap();
        assert!((b.received_dbm(30.0) + 1.67).abs() < 0.005);
    }

    #[test]
    fn empty_budget_is_error() {
        assert!(compose_budget(&[], 915e6).is_err());
    }

    #[test]
    fn deterministic_channel() {
        let m = ChannelModel::air(11);
        let a = Position::new(0.0, 0.0, 3.0);
        let b = Position::new(1.0, 2.0, 1.0);
        assert_eq!(m.channel(3, &a, &b).unwrap(), m.channel(3, &a, &b).unwrap());
        assert_ne!(m.phase_offset(3), m.phase_offset(4));
    }

    #[test]
    fn coincident_positions_rejected() {
        let m = ChannelModel::air(0);
        let p = Position::new(1.0, 1.0, 1.0);
        assert!(m.channel(0, &p, &p).is_err());
    }

    #[test]
    fn doubling_distance_halves_gain() {
        let m = ChannelModel::air(0);
        let o = Position::default();
        let g1 = m.channel(0, &o, &Position::new(2.0, 0.0, 0.0)).unwrap().gain;
        let g2 = m.channel(0, &o, &Position::new(4.0, 0.0, 0.0)).unwrap().gain;
        assert!((g1 / g2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tissue_vs_air_ratio_is_composed_loss() {
        let slab = TissueSlab { top_z_m: 0.10, thickness_m: 0.10 };
        let tissue = ChannelModel { random_phase: false, ..ChannelModel::with_tissue(0, slab) };
        let air = ChannelModel { random_phase: false, ..ChannelModel::air(0) };
        let tx = Position::new(0.0, 0.0, 2.0);
        let rx = Position::new(0.0, 0.0, 0.0);
        let gt = tissue.channel(0, &tx, &rx).unwrap().gain;
        let ga = air.channel(0, &tx, &rx).unwrap().gain;
        // normal incidence: 1.9 m of air, skin-in, 10 cm of muscle
        let expected_db = air_loss(1.9, 915e6).unwrap() + SKIN_INBOUND_DB + 46.0
            - air_loss(2.0, 915e6).unwrap();
        let got_db = -20.0 * (gt / ga).log10();
        assert!((got_db - expected_db).abs() < 1e-9, "{got_db} vs {expected_db}");
    }

    #[test]
    fn reciprocity_swaps_skin_costs() {
        let slab = TissueSlab { top_z_m: 1.03, thickness_m: 0.10 };
        let m = ChannelModel::with_tissue(5, slab);
        let a = Position::new(0.0, 0.0, 3.0);
        let b = Position::new(0.5, 0.2, 1.0);
        let ab = m.channel(0, &a, &b).unwrap().gain;
        let ba = m.channel(0, &b, &a).unwrap().gain;
        let diff = 20.0 * (ab / ba).log10();
        assert!((diff - (SKIN_OUTBOUND_DB - SKIN_INBOUND_DB)).abs() < 1e-9);
    }

    #[test]
    fn segments_split_at_slab() {
        let slab = TissueSlab { top_z_m: 1.03, thickness_m: 0.10 };
        let m = ChannelModel::with_tissue(0, slab);
        let segs = m.segments(&Position::new(0.0, 0.0, 3.0), &Position::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(segs.len(), 3);
        assert!((segs[0].length_m - 1.97).abs() < 1e-12);
        assert!((segs[2].length_m - 0.03).abs() < 1e-12);
        let both_in = m.segments(&Position::new(0.0, 0.0, 1.0), &Position::new(0.05, 0.0, 1.0)).unwrap();
        assert_eq!(both_in, vec![MediumSegment::muscle(0.05)]);
    }

    #[test]
    fn refraction_lengthens_oblique_tissue_path() {
        let slab = TissueSlab { top_z_m: 1.03, thickness_m: 0.10 };
        let m = ChannelModel::with_tissue(0, slab);
        let segs = m.segments(&Position::new(3.0, 0.0, 2.03), &Position::new(0.0, 0.0, 1.0)).unwrap();
        let t = segs.iter().find(|s| s.kind == MediumKind::Muscle).unwrap().length_m;
        assert!(t > 0.03 && t < 0.0303, "{t}");
    }

    #[test]
    fn rayleigh_term_is_static_per_transmitter() {
        let mut m = ChannelModel::air(2);
        m.rayleigh_relative_power = Some(0.5);
        let a = Position::new(0.0, 0.0, 3.0);
        let b = Position::new(1.0, 0.0, 1.0);
        let h1 = m.channel(1, &a, &b).unwrap();
        assert_eq!(h1, m.channel(1, &a, &b).unwrap());
        let plain = ChannelModel::air(2).channel(1, &a, &b).unwrap();
        assert_ne!(h1.gain, plain.gain);
    }
}
