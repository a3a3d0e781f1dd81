//! Scenario files.
//!
//! A scenario file is TOML with the unit in every field name. Missing fields
//! fall back to the default testbed, so a file may be as small as
//! `seeds = [1]`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use beamsim::channel::{Position, TissueSlab};
use beamsim::coldstart::ColdStartConfig;
use beamsim::engine::{leader_at, Baseline, BoundMode, Scenario, Trajectory, TESTBED_NODE};
use beamsim::receiver::Fidelity;
use beamsim::sync::SyncConfig;
use serde::{Deserialize, Serialize};

/// Lowest shift frequency used when none is given; wide chirps push it up so
/// the shifted sideband stays clear of the carrier.
const MIN_AUTO_SHIFT_HZ: f64 = 100e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub seeds: Vec<u64>,
    pub slave_count: usize,
    /// Explicit radio positions; overrides `slave_count` when present.
    pub slave_positions_m: Option<Vec<[f64; 3]>>,
    pub node_position_m: [f64; 3],
    pub node_depth_m: f64,
    /// 0 puts the node in air.
    pub tissue_thickness_m: f64,
    pub leader_distance_m: f64,
    pub tx_power_dbm: f64,
    pub noise_floor_dbm: f64,
    pub wake_threshold_dbm: f64,
    pub chirp_bandwidth_hz: f64,
    pub chirp_symbol_time_s: f64,
    pub sample_rate_hz: f64,
    pub shift_freq_hz: Option<f64>,
    pub symbols_per_round: usize,
    pub feedback_latency_s: f64,
    pub rounds: usize,
    pub metric_window_rounds: usize,
    /// Fixed perturbation bound; the adaptive schedule when absent.
    pub fixed_bound_degrees: Option<f64>,
    pub baseline: Baseline,
    pub fidelity: Fidelity,
    pub sync: bool,
    pub max_clock_offset_samples: f64,
    pub cold_start: bool,
    pub cold_start_sigma_degrees: f64,
    /// Node speed along a circle entered after `warmup_rounds`; 0 is static.
    pub speed_m_per_s: f64,
    pub warmup_rounds: usize,
    pub motion_radius_m: f64,
    pub heatmap_half_width_m: f64,
    pub heatmap_step_m: f64,
    pub sweep: SweepAxes,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        let base = Scenario::testbed(24, 0);
        let cold = ColdStartConfig::default();
        Self {
            seeds: vec![0],
            slave_count: 24,
            slave_positions_m: None,
            node_position_m: [TESTBED_NODE.x, TESTBED_NODE.y, TESTBED_NODE.z],
            node_depth_m: 0.03,
            tissue_thickness_m: 0.10,
            leader_distance_m: 0.5,
            tx_power_dbm: base.tx_power_dbm,
            noise_floor_dbm: base.noise_floor_dbm,
            wake_threshold_dbm: base.node.wake_threshold_dbm,
            chirp_bandwidth_hz: base.chirp.bandwidth_hz,
            chirp_symbol_time_s: base.chirp.symbol_time_s,
            sample_rate_hz: base.chirp.sample_rate_hz,
            shift_freq_hz: None,
            symbols_per_round: base.symbols_per_round,
            feedback_latency_s: base.feedback_latency_s,
            rounds: base.rounds,
            metric_window_rounds: base.metric_window,
            fixed_bound_degrees: None,
            baseline: Baseline::None,
            fidelity: Fidelity::Statistic,
            sync: true,
            max_clock_offset_samples: base.max_clock_offset_samples,
            cold_start: true,
            cold_start_sigma_degrees: cold.sigma_deg,
            speed_m_per_s: 0.0,
            warmup_rounds: 300,
            motion_radius_m: 0.5,
            heatmap_half_width_m: 0.3,
            heatmap_step_m: 0.02,
            sweep: SweepAxes::default(),
        }
    }
}

/// Values to sweep; empty axes are held at the file's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub slave_count: Vec<usize>,
    pub cold_start_sigma_degrees: Vec<f64>,
    pub chirp_bandwidth_hz: Vec<f64>,
    pub leader_distance_m: Vec<f64>,
    pub speed_m_per_s: Vec<f64>,
}

/// One point of a sweep: axis name to value, in a stable order.
pub type Point = BTreeMap<String, f64>;

pub fn point_label(point: &Point) -> String {
    if point.is_empty() {
        return "base".into();
    }
    point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("_")
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: Self = toml::from_str(text)?;
        file.validate()?;
        Ok(file)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        let s = &self.sweep;
        let finite = s
            .cold_start_sigma_degrees
            .iter()
            .chain(&s.chirp_bandwidth_hz)
            .chain(&s.leader_distance_m)
            .chain(&s.speed_m_per_s)
            .all(|v| v.is_finite());
        if !finite {
            bail!("sweep: axis values must be finite");
        }
        if self.speed_m_per_s > 0.0 && self.rounds <= self.warmup_rounds {
            bail!("rounds: a moving node needs more rounds than warmup_rounds");
        }
        if !(self.heatmap_step_m > 0.0) || !(self.heatmap_half_width_m >= 0.0) {
            bail!("heatmap_step_m must be positive and heatmap_half_width_m non-negative");
        }
        Ok(())
    }

    /// Every combination of the sweep axes; a single empty point without one.
    pub fn points(&self) -> Vec<Point> {
        let s = &self.sweep;
        let axes: Vec<(&str, Vec<f64>)> = vec![
            ("slave_count", s.slave_count.iter().map(|&v| v as f64).collect()),
            ("cold_start_sigma_degrees", s.cold_start_sigma_degrees.clone()),
            ("chirp_bandwidth_hz", s.chirp_bandwidth_hz.clone()),
            ("leader_distance_m", s.leader_distance_m.clone()),
            ("speed_m_per_s", s.speed_m_per_s.clone()),
        ];
        let mut out = vec![Point::new()];
        for (name, values) in axes.into_iter().filter(|(_, v)| !v.is_empty()) {
            out = out
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.insert(name.to_string(), v);
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// This file with one sweep point applied.
    pub fn at(&self, point: &Point) -> Result<Self> {
        let mut f = self.clone();
        for (k, &v) in point {
            match k.as_str() {
                "slave_count" => f.slave_count = v as usize,
                "cold_start_sigma_degrees" => f.cold_start_sigma_degrees = v,
                "chirp_bandwidth_hz" => f.chirp_bandwidth_hz = v,
                "leader_distance_m" => f.leader_distance_m = v,
                "speed_m_per_s" => f.speed_m_per_s = v,
                other => bail!("unknown sweep axis {other}"),
            }
        }
        Ok(f)
    }

    pub fn shift_freq(&self) -> f64 {
        self.shift_freq_hz.unwrap_or_else(|| MIN_AUTO_SHIFT_HZ.max(2.5 * self.chirp_bandwidth_hz))
    }

    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        let mut sc = Scenario::testbed(self.slave_count, seed);
        let node = Position::new(self.node_position_m[0], self.node_position_m[1], self.node_position_m[2]);
        if let Some(ps) = &self.slave_positions_m {
            sc.slaves = ps.iter().map(|p| Position::new(p[0], p[1], p[2])).collect();
        } else if node != TESTBED_NODE {
            // the default layout is placed around the node
            let shift = node.sub(&TESTBED_NODE);
            sc.slaves = sc.slaves.iter().map(|p| p.add(&Position::new(shift.x, shift.y, 0.0))).collect();
        }
        sc.node.position = node;
        sc.node.wake_threshold_dbm = self.wake_threshold_dbm;
        sc.node.shift_freq_hz = self.shift_freq();
        sc.channel.tissue = (self.tissue_thickness_m > 0.0)
            .then(|| TissueSlab { top_z_m: node.z + self.node_depth_m, thickness_m: self.tissue_thickness_m });
        sc.leader = leader_at(&node, self.leader_distance_m, None);
        sc.tx_power_dbm = self.tx_power_dbm;
        sc.noise_floor_dbm = self.noise_floor_dbm;
        sc.chirp.bandwidth_hz = self.chirp_bandwidth_hz;
        sc.chirp.symbol_time_s = self.chirp_symbol_time_s;
        sc.chirp.sample_rate_hz = self.sample_rate_hz;
        sc.symbols_per_round = self.symbols_per_round;
        sc.feedback_latency_s = self.feedback_latency_s;
        sc.rounds = self.rounds;
        sc.metric_window = self.metric_window_rounds;
        sc.bound = match self.fixed_bound_degrees {
            Some(b) => BoundMode::Fixed { bound_deg: b },
            None => BoundMode::Adaptive,
        };
        sc.baseline = self.baseline;
        sc.fidelity = self.fidelity;
        sc.sync = self.sync.then(SyncConfig::default);
        sc.max_clock_offset_samples = self.max_clock_offset_samples;
        sc.cold_start =
            self.cold_start.then(|| ColdStartConfig { sigma_deg: self.cold_start_sigma_degrees, ..Default::default() });
        if self.speed_m_per_s > 0.0 {
            let rt = sc.round_time_s();
            let moving = (self.rounds - self.warmup_rounds) as f64 * rt;
            sc.trajectory = Some(Trajectory::circle(
                node,
                self.motion_radius_m,
                self.speed_m_per_s,
                self.warmup_rounds as f64 * rt,
                moving,
            )?);
        }
        sc.validate()?;
        Ok(sc)
    }
}

/// Parse a seed list such as `1,2,5` or `0..10`.
pub fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
            if b <= a {
                bail!("empty seed range {part}");
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().with_context(|| format!("bad seed {part:?}"))?);
        }
    }
    if out.is_empty() {
        bail!("no seeds given");
    }
    Ok(out)
}
