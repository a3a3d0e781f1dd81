//! Waking a depleted node.
//!
//! The slaves first focus on the leader, whose position is known. The node
//! sits somewhere near the leader but outside that focal spot, so the slaves
//! keep adding independent random offsets in `(-sigma, sigma)` to the focus
//! phases. Each set throws side lobes onto different parts of the space until
//! one lands on the node hard enough to wake it and the leader hears the
//! reflection.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backscatter::BackscatterNode;
use crate::channel::{ChannelModel, Position};
use crate::chirp_dsp::detection_threshold;
use crate::error::{domain, Result};
use crate::receiver::LeaderReceiver;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColdStartConfig {
    pub sigma_deg: f64,
    /// Edge of the search cube centered at the leader.
    pub search_cube_m: f64,
    pub voxel_m: f64,
    pub max_perturbations: usize,
    /// A voxel counts as scanned once it sees this fraction of its optimum.
    pub wake_power_floor: f64,
    /// False-alarm rate of the leader's wake detector, per round.
    pub detection_pfa: f64,
}

impl Default for ColdStartConfig {
    fn default() -> Self {
        Self {
            sigma_deg: 55.0,
            search_cube_m: 2.0,
            voxel_m: 0.05,
            max_perturbations: 100,
            wake_power_floor: 0.30,
            detection_pfa: 1e-4,
        }
    }
}

impl ColdStartConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_deg >= 0.0 && self.sigma_deg < 180.0) {
            return domain("sigma must be in [0, 180) degrees");
        }
        if !(self.search_cube_m > 0.0) || !(self.voxel_m > 0.0) {
            return domain("search cube and voxel size must be positive");
        }
        if !(self.wake_power_floor > 0.0 && self.wake_power_floor <= 1.0) {
            return domain("wake power floor must be in (0, 1]");
        }
        if !(self.detection_pfa > 0.0 && self.detection_pfa < 1.0) {
            return domain("detection false-alarm rate must be in (0, 1)");
        }
        Ok(())
    }

    pub fn sigma_rad(&self) -> f64 {
        self.sigma_deg.to_radians()
    }
}

/// Regular cubic grid of voxel centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub center: Position,
    pub edge_m: f64,
    pub voxel_m: f64,
    pub per_axis: usize,
}

impl VoxelGrid {
    pub fn new(center: Position, edge_m: f64, voxel_m: f64) -> Result<Self> {
        if !(edge_m > 0.0) || !(voxel_m > 0.0) || !center.is_finite() {
            return domain("grid needs a finite center and positive sizes");
        }
        let per_axis = (edge_m / voxel_m).round() as usize;
        if per_axis == 0 {
            return domain("empty grid: voxel larger than the search cube");
        }
        Ok(Self { center, edge_m, voxel_m, per_axis })
    }

    pub fn len(&self) -> usize {
        self.per_axis.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        self.per_axis == 0
    }

    fn axis(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.voxel_m - 0.5 * self.per_axis as f64 * self.voxel_m
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.per_axis + j) * self.per_axis + k
    }

    pub fn point(&self, idx: usize) -> Position {
        let n = self.per_axis;
        let (i, j, k) = (idx / (n * n), (idx / n) % n, idx % n);
        self.center.add(&Position::new(self.axis(i), self.axis(j), self.axis(k)))
    }

    pub fn points(&self) -> Vec<Position> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Index of the voxel whose center is closest to `p`.
    pub fn nearest(&self, p: &Position) -> usize {
        let n = self.per_axis;
        let rel = p.sub(&self.center);
        let f = |v: f64| {
            let t = (v + 0.5 * n as f64 * self.voxel_m) / self.voxel_m - 0.5;
            (t.round().max(0.0) as usize).min(n - 1)
        };
        self.index(f(rel.x), f(rel.y), f(rel.z))
    }

    fn neighbours(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.per_axis as i64;
        let (i, j, k) = ((idx as i64) / (n * n), (idx as i64 / n) % n, idx as i64 % n);
        [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
            .into_iter()
            .map(move |(a, b, c)| (i + a, j + b, k + c))
            .filter(move |&(a, b, c)| (0..n).contains(&a) && (0..n).contains(&b) && (0..n).contains(&c))
            .map(move |(a, b, c)| self.index(a as usize, b as usize, c as usize))
    }
}

/// Per-voxel, per-slave channel coefficients (sqrt W at unit phase).
#[derive(Debug, Clone)]
pub struct FieldMap {
    pub points: Vec<Position>,
    pub slaves: usize,
    coeffs: Vec<Complex64>,
}

impl FieldMap {
    pub fn new(points: Vec<Position>, slaves: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if points.is_empty() {
            return domain("empty grid");
        }
        if coeffs.len() != points.len() * slaves {
            return domain("coefficient matrix does not match grid and slave count");
        }
        Ok(Self { points, slaves, coeffs })
    }

    /// Coefficients from a channel model, scaled by `amplitude` (sqrt of the
    /// per-slave transmit power in W). Voxels that coincide with a slave get
    /// a zero coefficient from it.
    pub fn from_model(model: &ChannelModel, slaves: &[Position], points: Vec<Position>, amplitude: f64) -> Result<Self> {
        let mut coeffs = Vec::with_capacity(points.len() * slaves.len());
        for p in &points {
            for (i, s) in slaves.iter().enumerate() {
                let h = if s.distance(p) > 0.0 {
                    model.channel(i as u64, s, p)?.to_complex() * amplitude
                } else {
                    Complex64::new(0.0, 0.0)
                };
                coeffs.push(h);
            }
        }
        Self::new(points, slaves.len(), coeffs)
    }

    pub fn row(&self, voxel: usize) -> &[Complex64] {
        &self.coeffs[voxel * self.slaves..(voxel + 1) * self.slaves]
    }

    /// Coherent power (W) at every voxel for the given phases.
    pub fn powers(&self, phases: &[f64]) -> Vec<f64> {
        let w: Vec<Complex64> = phases.iter().map(|&p| Complex64::from_polar(1.0, p)).collect();
        self.coeffs
            .chunks_exact(self.slaves.max(1))
            .map(|row| row.iter().zip(&w).map(|(h, e)| h * e).sum::<Complex64>().norm_sqr())
            .collect()
    }

    /// `(sum |h_i|)^2` at every voxel: the most any phase set can deliver there.
    pub fn optimal(&self) -> Vec<f64> {
        self.coeffs
            .chunks_exact(self.slaves.max(1))
            .map(|row| row.iter().map(|h| h.norm()).sum::<f64>().powi(2))
            .collect()
    }
}

/// Phases that bring every coefficient in `coeffs` to zero phase.
pub fn focus_phases(coeffs: &[Complex64]) -> Vec<f64> {
    coeffs.iter().map(|h| (-h.arg()).rem_euclid(2.0 * PI)).collect()
}

pub fn perturbation_round<R: Rng + ?Sized>(base: &[f64], sigma_rad: f64, rng: &mut R) -> Vec<f64> {
    base.iter()
        .map(|&b| {
            let d = if sigma_rad > 0.0 { rng.random_range(-sigma_rad..sigma_rad) } else { 0.0 };
            (b + d).rem_euclid(2.0 * PI)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    /// Scanned fraction after the focused round and each perturbation.
    pub ratio_by_round: Vec<f64>,
    /// Cumulative max power per voxel.
    pub cumulative: Vec<f64>,
}

impl ScanResult {
    pub fn ratio(&self) -> f64 {
        self.ratio_by_round.last().copied().unwrap_or(0.0)
    }
}

/// Sweep `perturbations` random phase sets around `base` and track which
/// voxels have reached `floor` times their own optimum. Round 0 is the
/// unperturbed focus.
pub fn scan<R: Rng + ?Sized>(
    field: &FieldMap,
    base: &[f64],
    sigma_rad: f64,
    perturbations: usize,
    floor: f64,
    rng: &mut R,
) -> Result<ScanResult> {
    if field.points.is_empty() {
        return domain("empty grid");
    }
    if base.len() != field.slaves {
        return domain("phase count does not match slave count");
    }
    let target: Vec<f64> = field.optimal().iter().map(|o| floor * o).collect();
    let mut cumulative = vec![0.0; field.points.len()];
    let mut scanned = vec![false; field.points.len()];
    let mut count = 0usize;
    let mut ratio_by_round = Vec::with_capacity(perturbations + 1);
    for r in 0..=perturbations {
        let phases = if r == 0 { base.to_vec() } else { perturbation_round(base, sigma_rad, rng) };
        for (i, p) in field.powers(&phases).into_iter().enumerate() {
            if p > cumulative[i] {
                cumulative[i] = p;
            }
            if !scanned[i] && target[i] > 0.0 && p >= target[i] {
                scanned[i] = true;
                count += 1;
            }
        }
        ratio_by_round.push(count as f64 / field.points.len() as f64);
    }
    Ok(ScanResult { ratio_by_round, cumulative })
}

pub fn scanning_ratio<R: Rng + ?Sized>(
    field: &FieldMap,
    base: &[f64],
    sigma_rad: f64,
    perturbations: usize,
    floor: f64,
    rng: &mut R,
) -> Result<f64> {
    scan(field, base, sigma_rad, perturbations, floor, rng).map(|s| s.ratio())
}

/// Connected region around `seed` with at least half of the seed's power.
pub fn main_lobe(grid: &VoxelGrid, powers: &[f64], seed: usize) -> Vec<bool> {
    let mut inside = vec![false; powers.len()];
    let level = 0.5 * powers[seed];
    let mut queue = VecDeque::from([seed]);
    inside[seed] = true;
    while let Some(v) = queue.pop_front() {
        for n in grid.neighbours(v) {
            if !inside[n] && powers[n] >= level {
                inside[n] = true;
                queue.push_back(n);
            }
        }
    }
    inside
}

/// Drop (dB) from the coherent optimum at the leader voxel to the strongest
/// voxel outside the focused main lobe, for one perturbation of `base`.
pub fn side_lobe_drop_db<R: Rng + ?Sized>(
    field: &FieldMap,
    grid: &VoxelGrid,
    base: &[f64],
    leader_voxel: usize,
    sigma_rad: f64,
    rng: &mut R,
) -> Result<f64> {
    if field.points.len() != grid.len() {
        return domain("field map does not match grid");
    }
    let focused = field.powers(base);
    let lobe = main_lobe(grid, &focused, leader_voxel);
    let phases = perturbation_round(base, sigma_rad, rng);
    let powers = field.powers(&phases);
    let side = powers
        .iter()
        .zip(&lobe)
        .filter(|(_, &l)| !l)
        .map(|(p, _)| *p)
        .fold(0.0, f64::max);
    if side <= 0.0 {
        return domain("main lobe covers the whole grid");
    }
    let optimum = field.optimal()[leader_voxel];
    Ok(10.0 * (optimum / side).log10())
}

/// Channels the wake-up loop needs, all as complex amplitudes at unit phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ColdStartLink {
    /// Slave to node (sqrt W).
    pub node: Vec<Complex64>,
    /// Slave to leader, used only to derive the focus phases.
    pub leader: Vec<Complex64>,
    /// Node to leader.
    pub back: Complex64,
    pub round_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartResult {
    pub success: bool,
    /// Perturbation rounds spent; 0 means the focused beam alone worked.
    pub rounds_used: usize,
    pub wake_round: Option<usize>,
    /// Phases transmitted in the last round.
    pub phases: Vec<f64>,
}

pub fn run_cold_start<R: Rng + ?Sized>(
    link: &ColdStartLink,
    node: &mut BackscatterNode,
    receiver: &LeaderReceiver,
    cfg: &ColdStartConfig,
    rng: &mut R,
) -> Result<ColdStartResult> {
    cfg.validate()?;
    if link.node.len() != link.leader.len() || link.node.is_empty() {
        return domain("cold start needs matching, non-empty channel lists");
    }
    let threshold = detection_threshold(receiver.noise_variance, receiver.reference_energy(), 1, cfg.detection_pfa);
    let base = focus_phases(&link.leader);
    let mut wake_round = None;
    let mut phases = base.clone();
    for r in 0..=cfg.max_perturbations {
        if r > 0 {
            phases = perturbation_round(&base, cfg.sigma_rad(), rng);
        }
        let incident: Complex64 = link.node.iter().zip(&phases).map(|(h, &p)| h * Complex64::from_polar(1.0, p)).sum();
        node.harvest_step(incident.norm_sqr(), link.round_time_s)?;
        if !node.awake {
            continue;
        }
        wake_round.get_or_insert(r);
        let z = receiver.measure(incident, node, link.back, rng)?;
        if z.norm() > threshold {
            return Ok(ColdStartResult { success: true, rounds_used: r, wake_round, phases });
        }
    }
    Ok(ColdStartResult { success: false, rounds_used: cfg.max_perturbations, wake_round, phases })
}

/// Heatmap CSV with one row per voxel.
pub fn write_heatmap<W: Write>(points: &[Position], powers: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "x_m,y_m,z_m,power_w")?;
    for (p, v) in points.iter().zip(powers) {
        writeln!(w, "{:.4},{:.4},{:.4},{:.6e}", p.x, p.y, p.z, v)?;
    }
    Ok(())
}
