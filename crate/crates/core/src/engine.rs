//! Scenario orchestration.
//!
//! A run goes through the same stages as the deployed system: chirp
//! synchronization of the slaves, cold start of the node, then the one-bit
//! alignment loop. Time advances in alignment rounds; a round is
//! `symbols_per_round` chirp symbols plus the feedback latency.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backscatter::BackscatterNode;
use crate::beamform::{
    alignment_round, compute_bound_schedule, AlignmentState, BoundSchedule, KalmanSmoother,
};
use crate::channel::{ChannelModel, Position, TissueSlab};
use crate::chirp_dsp::ChirpParams;
use crate::coldstart::{run_cold_start, ColdStartConfig, ColdStartLink, ColdStartResult, FieldMap};
use crate::error::{domain, Result};
use crate::receiver::{Fidelity, LeaderReceiver};
use crate::sync::{run_sync, SlaveClock, SyncConfig, TranscriptRow};
use crate::units::{db_to_amplitude_ratio, dbm_to_watt};

// Testbed geometry.
pub const TESTBED_NODE: Position = Position::new(9.3, 8.7, 1.0);
pub const TESTBED_AREA_M: f64 = 18.0;
pub const CEILING_HEIGHT_M: f64 = 3.0;
pub const NODE_DEPTH_M: f64 = 0.03;
pub const TISSUE_THICKNESS_M: f64 = 0.10;
pub const DEFAULT_LEADER_DISTANCE_M: f64 = 0.5;

/// `n` radios on a regular grid over an `area_m` square at `height_m`.
pub fn ceiling_grid(n: usize, area_m: f64, height_m: f64) -> Vec<Position> {
    if n == 0 {
        return Vec::new();
    }
    let nx = (n as f64).sqrt().ceil() as usize;
    let ny = n.div_ceil(nx);
    let mut out = Vec::with_capacity(n);
    for i in 0..nx {
        for j in 0..ny {
            if out.len() < n {
                out.push(Position::new(
                    (i as f64 + 0.5) * area_m / nx as f64,
                    (j as f64 + 0.5) * area_m / ny as f64,
                    height_m,
                ));
            }
        }
    }
    out
}

/// A few radios on a cone above `target`, `scale` metres out.
pub fn around(target: &Position, n: usize, scale: f64) -> Vec<Position> {
    (0..n)
        .map(|k| {
            let a = k as f64 * 2.0 * PI / n as f64 + 0.3;
            target.add(&Position::new(0.6 * a.cos(), 0.6 * a.sin(), 0.8).scale(scale))
        })
        .collect()
}

/// `n` radios evenly spaced on a horizontal circle.
pub fn ring(center: &Position, n: usize, radius_m: f64) -> Vec<Position> {
    (0..n)
        .map(|k| {
            let a = k as f64 * 2.0 * PI / n as f64;
            center.add(&Position::new(radius_m * a.cos(), radius_m * a.sin(), 0.0))
        })
        .collect()
}

/// `n` radios along `axis` (normalised here), centered on `center`.
pub fn linear_array(center: &Position, n: usize, spacing_m: f64, axis: &Position) -> Vec<Position> {
    let u = axis.scale(1.0 / axis.norm());
    (0..n)
        .map(|k| center.add(&u.scale((k as f64 - 0.5 * (n as f64 - 1.0)) * spacing_m)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub time_s: f64,
    pub position: Position,
}

/// Piecewise-linear path of the node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self> {
        if waypoints.is_empty() {
            return domain("trajectory needs at least one waypoint");
        }
        if waypoints.iter().any(|w| !w.time_s.is_finite() || !w.position.is_finite()) {
            return domain("trajectory waypoints must be finite");
        }
        if waypoints.windows(2).any(|w| w[1].time_s <= w[0].time_s) {
            return domain("trajectory times must be strictly increasing");
        }
        Ok(Self { waypoints })
    }

    /// A circle in the horizontal plane through `start`, entered at
    /// `start_time_s` and followed at `speed_mps` for `duration_s`.
    pub fn circle(start: Position, radius_m: f64, speed_mps: f64, start_time_s: f64, duration_s: f64) -> Result<Self> {
        if !(radius_m > 0.0) || !(speed_mps >= 0.0) || !(duration_s >= 0.0) {
            return domain("circle needs positive radius and non-negative speed and duration");
        }
        let center = start.sub(&Position::new(radius_m, 0.0, 0.0));
        let at = |t: f64| {
            let a = speed_mps * t / radius_m;
            center.add(&Position::new(radius_m * a.cos(), radius_m * a.sin(), 0.0))
        };
        let total_angle = speed_mps * duration_s / radius_m;
        let steps = ((total_angle / (2.0 * PI / 256.0)).ceil() as usize).max(1);
        let mut w = vec![Waypoint { time_s: start_time_s, position: start }];
        if duration_s > 0.0 {
            for k in 1..=steps {
                let t = duration_s * k as f64 / steps as f64;
                w.push(Waypoint { time_s: start_time_s + t, position: at(t) });
            }
        }
        Self::new(w)
    }

    pub fn start_time(&self) -> f64 {
        self.waypoints[0].time_s
    }

    pub fn end_time(&self) -> f64 {
        self.waypoints[self.waypoints.len() - 1].time_s
    }

    pub fn position_at(&self, t: f64) -> Result<Position> {
        if !(t >= self.start_time() && t <= self.end_time()) {
            return domain(format!("time {t} outside trajectory span"));
        }
        let i = self.waypoints.partition_point(|w| w.time_s <= t);
        if i >= self.waypoints.len() {
            return Ok(self.waypoints[self.waypoints.len() - 1].position);
        }
        let (a, b) = (self.waypoints[i - 1], self.waypoints[i]);
        let f = (t - a.time_s) / (b.time_s - a.time_s);
        Ok(a.position.add(&b.position.sub(&a.position).scale(f)))
    }

    /// Whether the node ever leaves its first position.
    pub fn is_mobile(&self) -> bool {
        let p0 = self.waypoints[0].position;
        self.waypoints.iter().any(|w| w.position.distance(&p0) > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    RandomPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundMode {
    Adaptive,
    Fixed { bound_deg: f64 },
}

/// Loop behaviour while the node moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingConfig {
    pub min_bound_deg: f64,
    /// Re-measure the reference phases every this many rounds (0 = never).
    pub remeasure_every: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self { min_bound_deg: 20.0, remeasure_every: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanConfig {
    pub process_noise: f64,
    /// Initial measurement noise relative to the correlator noise variance.
    pub initial_noise_ratio: f64,
    pub window: usize,
    /// Re-estimate the measurement noise from the innovations.
    pub adaptive: bool,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self { process_noise: 0.0, initial_noise_ratio: 0.5, window: 16, adaptive: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub slaves: Vec<Position>,
    pub leader: Position,
    pub node: BackscatterNode,
    pub channel: ChannelModel,
    pub chirp: ChirpParams,
    pub tx_power_dbm: f64,
    /// Noise power within the chirp bandwidth at the leader.
    pub noise_floor_dbm: f64,
    pub symbols_per_round: usize,
    pub feedback_latency_s: f64,
    pub rounds: usize,
    /// Trailing rounds averaged for the power percentage when stationary.
    pub metric_window: usize,
    pub deadband_fraction: f64,
    pub bound: BoundMode,
    pub tracking: TrackingConfig,
    pub kalman: KalmanConfig,
    pub trajectory: Option<Trajectory>,
    pub baseline: Baseline,
    pub fidelity: Fidelity,
    pub sync: Option<SyncConfig>,
    /// Largest injected clock offset before sync, in samples.
    pub max_clock_offset_samples: f64,
    pub cold_start: Option<ColdStartConfig>,
}

impl Scenario {
    /// The default testbed: `slaves` radios around a node 3 cm deep in a
    /// 10 cm tissue slab, leader 0.5 m from the node.
    pub fn testbed(slaves: usize, seed: u64) -> Self {
        let node_pos = TESTBED_NODE;
        let slab = TissueSlab { top_z_m: node_pos.z + NODE_DEPTH_M, thickness_m: TISSUE_THICKNESS_M };
        let layout = if slaves <= 3 {
            around(&node_pos, slaves, 2.0)
        } else {
            ceiling_grid(slaves, TESTBED_AREA_M, CEILING_HEIGHT_M)
        };
        Self {
            seed,
            slaves: layout,
            leader: leader_at(&node_pos, DEFAULT_LEADER_DISTANCE_M, None),
            node: BackscatterNode::new(node_pos),
            channel: ChannelModel::with_tissue(seed, slab),
            chirp: ChirpParams::default(),
            tx_power_dbm: 30.0,
            noise_floor_dbm: -99.0,
            symbols_per_round: 4,
            feedback_latency_s: 1e-3,
            rounds: 300,
            metric_window: 50,
            deadband_fraction: 0.0,
            bound: BoundMode::Adaptive,
            tracking: TrackingConfig::default(),
            kalman: KalmanConfig::default(),
            trajectory: None,
            baseline: Baseline::None,
            fidelity: Fidelity::Statistic,
            sync: Some(SyncConfig::default()),
            max_clock_offset_samples: 8192.0,
            cold_start: Some(ColdStartConfig::default()),
        }
    }

    pub fn round_time_s(&self) -> f64 {
        self.symbols_per_round as f64 * self.chirp.symbol_time_s + self.feedback_latency_s
    }

    fn slave_amplitude(&self) -> f64 {
        dbm_to_watt(self.tx_power_dbm).sqrt()
    }

    /// The channel model actually used: the scenario seed drives the
    /// per-transmitter offsets.
    pub fn channel_model(&self) -> ChannelModel {
        ChannelModel { seed: self.seed, ..self.channel.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slaves.is_empty() {
            return domain("scenario needs at least one slave");
        }
        if self.slaves.iter().any(|p| !p.is_finite()) || !self.leader.is_finite() {
            return domain("positions must be finite");
        }
        if self.rounds == 0 || self.symbols_per_round == 0 {
            return domain("rounds and symbols_per_round must be positive");
        }
        if !(self.feedback_latency_s >= 0.0) || !(self.deadband_fraction >= 0.0) {
            return domain("latency and dead-band must be non-negative");
        }
        if let BoundMode::Fixed { bound_deg } = self.bound {
            if !(bound_deg > 0.0 && bound_deg <= 180.0) {
                return domain("fixed bound must be in (0, 180] degrees");
            }
        }
        self.chirp.validate()?;
        self.node.validate(&self.chirp)?;
        if let Some(c) = &self.cold_start {
            c.validate()?;
        }
        Ok(())
    }

    /// Node position at time `t`: the trajectory when there is one.
    fn position_at(&self, t: f64) -> Result<Position> {
        match &self.trajectory {
            Some(tr) => tr.position_at(t.clamp(tr.start_time(), tr.end_time())),
            None => Ok(self.node.position),
        }
    }

    /// Per-slave coefficients (sqrt W) to `p`.
    pub fn slave_channels(&self, p: &Position) -> Result<Vec<Complex64>> {
        let model = self.channel_model();
        let a = self.slave_amplitude();
        self.slaves
            .iter()
            .enumerate()
            .map(|(i, s)| Ok(model.channel(i as u64, s, p)?.to_complex() * a))
            .collect()
    }

    /// Node-to-leader coefficient. The node has no antenna gain.
    pub fn back_channel(&self, p: &Position) -> Result<Complex64> {
        let b = self.channel_model().budget(p, &self.leader)?;
        Ok(Complex64::from_polar(db_to_amplitude_ratio(-b.total_loss_db), -b.phase_rad))
    }
}

/// A point `distance_m` from `node` along `direction` (default: mostly up).
pub fn leader_at(node: &Position, distance_m: f64, direction: Option<Position>) -> Position {
    let d = direction.unwrap_or(Position::new(0.3, 0.0, 0.95));
    node.add(&d.scale(distance_m / d.norm()))
}

/// Channels at one instant of a mobile scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSnapshot {
    pub position: Position,
    pub slaves: Vec<Complex64>,
    pub back: Complex64,
}

pub fn mobility_step(scenario: &Scenario, t: f64) -> Result<ChannelSnapshot> {
    let position = match &scenario.trajectory {
        Some(tr) => tr.position_at(t)?,
        None => scenario.node.position,
    };
    Ok(ChannelSnapshot {
        slaves: scenario.slave_channels(&position)?,
        back: scenario.back_channel(&position)?,
        position,
    })
}

/// Sum of the slaves' individual amplitudes at the node (sqrt W).
pub fn optimal_amplitude(scenario: &Scenario) -> Result<f64> {
    Ok(scenario.slave_channels(&scenario.node.position)?.iter().map(|h| h.norm()).sum())
}

/// Coherent power (W) at each point for the given slave phases.
pub fn heatmap(scenario: &Scenario, phases: &[f64], points: &[Position]) -> Result<Vec<f64>> {
    if scenario.slaves.is_empty() {
        return Ok(vec![0.0; points.len()]);
    }
    if phases.len() != scenario.slaves.len() {
        return domain("one phase per slave required");
    }
    let field = FieldMap::from_model(&scenario.channel_model(), &scenario.slaves, points.to_vec(), scenario.slave_amplitude())?;
    Ok(field.powers(phases))
}

/// Square grid of points in the horizontal plane through `center`.
pub fn plane_grid(center: &Position, half_x: f64, half_y: f64, step: f64) -> Vec<Position> {
    let nx = (half_x / step).round() as i64;
    let ny = (half_y / step).round() as i64;
    let mut out = Vec::with_capacity(((2 * nx + 1) * (2 * ny + 1)) as usize);
    for i in -nx..=nx {
        for j in -ny..=ny {
            out.push(center.add(&Position::new(i as f64 * step, j as f64 * step, 0.0)));
        }
    }
    out
}

/// Ratio of principal standard deviations (in x-y) of the points that reach
/// half the maximum power.
pub fn half_power_axis_ratio(points: &[Position], powers: &[f64]) -> f64 {
    let max = powers.iter().cloned().fold(0.0, f64::max);
    let sel: Vec<&Position> = points.iter().zip(powers).filter(|(_, &p)| p >= 0.5 * max).map(|(q, _)| q).collect();
    let n = sel.len() as f64;
    if sel.len() < 2 {
        return 1.0;
    }
    let mx = sel.iter().map(|p| p.x).sum::<f64>() / n;
    let my = sel.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in &sel {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / n, syy / n, sxy / n);
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let (hi, lo) = (0.5 * (tr + disc), 0.5 * (tr - disc));
    if lo <= 0.0 {
        return f64::INFINITY;
    }
    (hi / lo).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub y_raw: f64,
    pub y_smoothed: f64,
    pub phi_deg: f64,
    pub power_percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSummary {
    pub max_residual_samples: f64,
    pub fine_rounds: usize,
    pub max_initial_offset_samples: f64,
    pub transcript: Vec<TranscriptRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sync,
    ColdStart,
    Alignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub stage: Stage,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub slaves: usize,
    pub baseline: Baseline,
    /// `(mean amplitude / mean optimal amplitude)^2` over the metric window;
    /// 0 when the pipeline stopped before alignment.
    pub power_percentage: f64,
    pub rounds_to_converge: Option<usize>,
    pub optimal_amplitude: f64,
    pub mean_power_w: f64,
    pub sync: Option<SyncSummary>,
    pub cold_start: Option<ColdStartResult>,
    pub stages: Vec<StageEvent>,
    pub trace: Vec<TraceRow>,
    pub final_phases: Vec<f64>,
}

impl Metrics {
    /// Per-round power percentage inside the metric window.
    pub fn window_percentages(&self, window: std::ops::Range<usize>) -> Vec<f64> {
        self.trace[window].iter().map(|r| r.power_percentage).collect()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

thread_local! {
    // Seeds of one sweep point share geometry and so share the schedule.
    static SCHEDULES: RefCell<HashMap<(usize, usize, u64, String), BoundSchedule>> = RefCell::new(HashMap::new());
}

fn bound_schedule(scenario: &Scenario, horizon: usize, unit_power_w: f64) -> Result<BoundSchedule> {
    let n = scenario.slaves.len();
    match scenario.bound {
        BoundMode::Fixed { bound_deg } => Ok(BoundSchedule::constant(bound_deg.to_radians())),
        BoundMode::Adaptive if n < 2 => Ok(BoundSchedule::constant(PI)),
        BoundMode::Adaptive => {
            let key = (n, horizon.max(8), unit_power_w.to_bits(), format!("{:?}", scenario.node.curve));
            if let Some(s) = SCHEDULES.with(|c| c.borrow().get(&key).cloned()) {
                return Ok(s);
            }
            let s = compute_bound_schedule(n, &scenario.node.curve, unit_power_w, key.1)?;
            SCHEDULES.with(|c| c.borrow_mut().insert(key, s.clone()));
            Ok(s)
        }
    }
}

/// Rounds in the metric window.
pub fn metric_window(scenario: &Scenario) -> std::ops::Range<usize> {
    let rt = scenario.round_time_s();
    match &scenario.trajectory {
        Some(tr) if tr.is_mobile() => {
            let start = (tr.start_time() / rt).ceil() as usize;
            start.min(scenario.rounds - 1)..scenario.rounds
        }
        _ => scenario.rounds.saturating_sub(scenario.metric_window.max(1))..scenario.rounds,
    }
}

pub fn run_scenario(scenario: &Scenario) -> Result<Metrics> {
    scenario.validate()?;
    let n = scenario.slaves.len();
    let mut stages = Vec::new();
    let mut metrics = Metrics {
        seed: scenario.seed,
        slaves: n,
        baseline: scenario.baseline,
        power_percentage: 0.0,
        rounds_to_converge: None,
        optimal_amplitude: optimal_amplitude(scenario)?,
        mean_power_w: 0.0,
        sync: None,
        cold_start: None,
        stages: Vec::new(),
        trace: Vec::new(),
        final_phases: Vec::new(),
    };

    if let Some(cfg) = &scenario.sync {
        let mut rng = stream_rng(scenario.seed, 1);
        let clocks: Vec<SlaveClock> = (0..n)
            .map(|_| SlaveClock { offset: rng.random::<f64>() * scenario.max_clock_offset_samples })
            .collect();
        match run_sync(&scenario.chirp, cfg, &clocks, &mut rng) {
            Ok(rep) => {
                let s = SyncSummary {
                    max_residual_samples: rep.max_pairwise_residual(),
                    fine_rounds: rep.total_fine_rounds(),
                    max_initial_offset_samples: clocks.iter().map(|c| c.offset).fold(0.0, f64::max),
                    transcript: rep.transcript,
                };
                stages.push(StageEvent {
                    stage: Stage::Sync,
                    ok: true,
                    detail: format!("residual {:.2} samples", s.max_residual_samples),
                });
                metrics.sync = Some(s);
            }
            Err(e) => {
                stages.push(StageEvent { stage: Stage::Sync, ok: false, detail: e.to_string() });
                metrics.stages = stages;
                return Ok(metrics);
            }
        }
    }

    let receiver = LeaderReceiver::new(
        scenario.chirp,
        scenario.noise_floor_dbm,
        scenario.node.shift_freq_hz,
        scenario.fidelity,
    )?;
    let mut node = scenario.node.clone();
    let mut rng = stream_rng(scenario.seed, 3);
    let mut initial = None;

    if let Some(cfg) = &scenario.cold_start {
        let mut crng = stream_rng(scenario.seed, 2);
        let start = scenario.position_at(0.0)?;
        node.position = start;
        let link = ColdStartLink {
            node: scenario.slave_channels(&start)?,
            leader: scenario.slave_channels(&scenario.leader)?,
            back: scenario.back_channel(&start)?,
            round_time_s: scenario.round_time_s(),
        };
        let res = run_cold_start(&link, &mut node, &receiver, cfg, &mut crng)?;
        stages.push(StageEvent {
            stage: Stage::ColdStart,
            ok: res.success,
            detail: format!("{} perturbation rounds", res.rounds_used),
        });
        let ok = res.success;
        initial = Some(res.phases.clone());
        metrics.cold_start = Some(res);
        if !ok {
            metrics.stages = stages;
            return Ok(metrics);
        }
    }

    let mut state = match initial {
        Some(p) => AlignmentState::new(p),
        None => AlignmentState::random(n, &mut rng),
    };
    let mobile = scenario.trajectory.as_ref().is_some_and(|t| t.is_mobile());
    let rt = scenario.round_time_s();
    let window = metric_window(scenario);
    let static_channels = scenario.slave_channels(&scenario.position_at(0.0)?)?;
    let unit_power = (static_channels.iter().map(|h| h.norm()).sum::<f64>() / n as f64).powi(2);
    let horizon = if mobile { window.start.max(8) } else { scenario.rounds };
    let schedule = bound_schedule(scenario, horizon, unit_power)?;
    let floor = if mobile { scenario.tracking.min_bound_deg.to_radians() } else { 0.0 };
    let mut smoother = KalmanSmoother::new(
        scenario.kalman.process_noise,
        scenario.kalman.initial_noise_ratio * receiver.correlator_noise_variance(),
        scenario.kalman.window,
    );
    smoother.adaptive = scenario.kalman.adaptive;
    smoother.adapt_on_reset = true;

    let mut channels = static_channels;
    let mut back = scenario.back_channel(&scenario.position_at(0.0)?)?;
    let mut amps = Vec::with_capacity(scenario.rounds);
    let mut opts = Vec::with_capacity(scenario.rounds);
    for round in 0..scenario.rounds {
        if mobile {
            let p = scenario.position_at(round as f64 * rt)?;
            channels = scenario.slave_channels(&p)?;
            back = scenario.back_channel(&p)?;
            node.position = p;
        }
        let incident: Complex64 =
            channels.iter().zip(&state.phases).map(|(h, &p)| h * Complex64::from_polar(1.0, p)).sum();
        let opt: f64 = channels.iter().map(|h| h.norm()).sum();
        amps.push(incident.norm());
        opts.push(opt);
        node.harvest_step(incident.norm_sqr(), rt)?;
        let pct = if opt > 0.0 { (incident.norm() / opt).powi(2) } else { 0.0 };

        if scenario.baseline == Baseline::RandomPhase {
            for p in state.phases.iter_mut() {
                *p = rng.random::<f64>() * 2.0 * PI;
            }
            metrics.trace.push(TraceRow { round, y_raw: 0.0, y_smoothed: 0.0, phi_deg: 180.0, power_percentage: pct });
            continue;
        }

        smoother.reset();
        let mut y_raw = 0.0;
        let mut y = 0.0;
        for _ in 0..scenario.symbols_per_round {
            y_raw = receiver.measure(incident, &node, back, &mut rng)?.norm();
            y = smoother.smooth(y_raw);
        }
        let bound = schedule.evaluate(round).max(floor);
        alignment_round(&mut state, y, bound, scenario.deadband_fraction, &mut rng);
        if mobile && scenario.tracking.remeasure_every > 0 && (round + 1) % scenario.tracking.remeasure_every == 0 {
            state.request_remeasure();
        }
        metrics.trace.push(TraceRow { round, y_raw, y_smoothed: y, phi_deg: bound.to_degrees(), power_percentage: pct });
    }
    stages.push(StageEvent { stage: Stage::Alignment, ok: true, detail: format!("{} rounds", scenario.rounds) });

    let w = window.clone();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let amp = mean(&amps[w.clone()]);
    let opt = mean(&opts[w.clone()]);
    metrics.power_percentage = if opt > 0.0 { (amp / opt).powi(2) } else { 0.0 };
    metrics.mean_power_w = mean(&amps[w].iter().map(|a| a * a).collect::<Vec<_>>());
    metrics.rounds_to_converge = converge_round(&amps, &opts, metrics.power_percentage);
    metrics.final_phases = state.best_phases.clone();
    metrics.stages = stages;
    Ok(metrics)
}

/// First round at which a 10-round moving power percentage reaches 90% of
/// the final value.
fn converge_round(amps: &[f64], opts: &[f64], fin: f64) -> Option<usize> {
    const SPAN: usize = 10;
    if amps.len() < SPAN || fin <= 0.0 {
        return None;
    }
    (0..=amps.len() - SPAN).find(|&i| {
        let a: f64 = amps[i..i + SPAN].iter().sum();
        let o: f64 = opts[i..i + SPAN].iter().sum();
        o > 0.0 && (a / o).powi(2) >= 0.9 * fin
    }).map(|i| i + SPAN - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(n: usize, seed: u64) -> Scenario {
        Scenario { sync: None, rounds: 60, ..Scenario::testbed(n, seed) }
    }

    #[test]
    fn ceiling_grid_layout() {
        let g = ceiling_grid(24, 18.0, 3.0);
        assert_eq!(g.len(), 24);
        assert!((g[0].x - 1.8).abs() < 1e-12 && (g[0].y - 1.8).abs() < 1e-12);
        assert!(g.iter().all(|p| p.z == 3.0));
        // 5 x 5 grid with the last cell unused
        assert!((g[23].x - 16.2).abs() < 1e-12 && (g[23].y - 12.6).abs() < 1e-12);
    }

    #[test]
    fn linear_array_is_centered() {
        let a = linear_array(&Position::new(1.0, 0.0, 0.0), 4, 0.5, &Position::new(2.0, 0.0, 0.0));
        assert!((a[0].x - 0.25).abs() < 1e-12 && (a[3].x - 1.75).abs() < 1e-12);
    }

    #[test]
    fn trajectory_rules() {
        let p = Position::new(0.0, 0.0, 0.0);
        assert!(Trajectory::new(vec![]).is_err());
        let bad = vec![Waypoint { time_s: 1.0, position: p }, Waypoint { time_s: 1.0, position: p }];
        assert!(Trajectory::new(bad).is_err());
        let t = Trajectory::circle(p, 0.5, 0.05, 1.0, 10.0).unwrap();
        assert!(t.position_at(0.5).is_err());
        assert!(t.position_at(11.5).is_err());
        // half a metre along the arc after 10 s: angle 1 rad
        let q = t.position_at(11.0).unwrap();
        let want = Position::new(0.5 * 1f64.cos() - 0.5, 0.5 * 1f64.sin(), 0.0);
        assert!(q.distance(&want) < 1e-4, "{q:?}");
        let still = Trajectory::circle(p, 0.5, 0.0, 0.0, 5.0).unwrap();
        assert!(!still.is_mobile());
    }

    #[test]
    fn zero_speed_keeps_channels() {
        let mut s = quick(4, 1);
        s.trajectory = Some(Trajectory::circle(s.node.position, 0.5, 0.0, 0.0, 5.0).unwrap());
        let a = mobility_step(&s, 0.0).unwrap();
        let b = mobility_step(&s, 4.0).unwrap();
        assert_eq!(a.slaves, b.slaves);
        assert!(mobility_step(&s, 6.0).is_err());
    }

    #[test]
    fn optimal_amplitude_sums_paths() {
        let s = quick(1, 0);
        let h = s.slave_channels(&s.node.position).unwrap();
        assert!((optimal_amplitude(&s).unwrap() - h[0].norm()).abs() < 1e-15);
    }

    #[test]
    fn heatmap_without_slaves_is_zero() {
        let mut s = quick(2, 0);
        s.slaves.clear();
        let pts = plane_grid(&Position::default(), 0.1, 0.1, 0.05);
        assert!(heatmap(&s, &[], &pts).unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn pipeline_orders_stages() {
        let s = Scenario { rounds: 40, sync: Some(SyncConfig { fine_snr_db: None, ..SyncConfig::default() }), max_clock_offset_samples: 50.0, ..Scenario::testbed(3, 2) };
        let m = run_scenario(&s).unwrap();
        let order: Vec<Stage> = m.stages.iter().map(|e| e.stage).collect();
        assert_eq!(order, vec![Stage::Sync, Stage::ColdStart, Stage::Alignment]);
        assert_eq!(m.trace.len(), 40);
    }

    #[test]
    fn same_seed_same_metrics() {
        let a = run_scenario(&quick(6, 9)).unwrap();
        let b = run_scenario(&quick(6, 9)).unwrap();
        assert_eq!(a, b);
        let c = run_scenario(&quick(6, 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn axis_ratio_of_a_line_and_a_disc() {
        let pts = plane_grid(&Position::default(), 1.0, 1.0, 0.05);
        let line: Vec<f64> = pts.iter().map(|p| if p.y.abs() < 0.01 { 1.0 } else { 0.0 }).collect();
        assert!(half_power_axis_ratio(&pts, &line).is_infinite());
        let disc: Vec<f64> = pts.iter().map(|p| if p.norm() < 0.5 { 1.0 } else { 0.0 }).collect();
        assert!((half_power_axis_ratio(&pts, &disc) - 1.0).abs() < 0.05);
    }
}
