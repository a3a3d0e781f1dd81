//! Per-run artifacts and the summary table.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use beamsim::coldstart::write_heatmap;
use beamsim::engine::{heatmap, plane_grid, run_scenario, Metrics, Scenario, StageEvent};
use beamsim::sync::SyncReport;
use serde::{Deserialize, Serialize};

use crate::config::{point_label, Point, ScenarioFile};

/// What goes into `metrics.json`; the per-round trace and the sync transcript
/// live in their own CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub point: Point,
    pub seed: u64,
    pub slaves: usize,
    pub power_percentage: f64,
    pub rounds_to_converge: Option<usize>,
    pub optimal_amplitude: f64,
    pub mean_power_w: f64,
    pub sync_max_residual_samples: Option<f64>,
    pub sync_fine_rounds: Option<usize>,
    pub cold_start_success: Option<bool>,
    pub cold_start_rounds: Option<usize>,
    pub max_heatmap_power_w: Option<f64>,
    pub stages: Vec<StageEvent>,
}

pub fn run_dir(out: &Path, point: &Point, seed: u64) -> PathBuf {
    out.join("runs").join(format!("{}_seed{seed}", point_label(point)))
}

/// Run one scenario and write its artifacts under `out`.
pub fn run_one(file: &ScenarioFile, point: &Point, seed: u64, out: &Path) -> Result<RunRecord> {
    let cfg = file.at(point)?;
    let scenario = cfg.scenario(seed).with_context(|| format!("building scenario for seed {seed}"))?;
    let metrics = run_scenario(&scenario)?;
    let dir = run_dir(out, point, seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    write_trace(&metrics, &dir.join("trace.csv"))?;
    if let Some(s) = &metrics.sync {
        let report = SyncReport { slaves: Vec::new(), periods: 0, transcript: s.transcript.clone() };
        report.write_transcript(BufWriter::new(File::create(dir.join("sync_transcript.csv"))?))?;
    }
    let max_heat = write_heatmap_file(&cfg, &scenario, &metrics, &dir.join("heatmap.csv"))?;

    let record = RunRecord {
        point: point.clone(),
        seed,
        slaves: metrics.slaves,
        power_percentage: metrics.power_percentage,
        rounds_to_converge: metrics.rounds_to_converge,
        optimal_amplitude: metrics.optimal_amplitude,
        mean_power_w: metrics.mean_power_w,
        sync_max_residual_samples: metrics.sync.as_ref().map(|s| s.max_residual_samples),
        sync_fine_rounds: metrics.sync.as_ref().map(|s| s.fine_rounds),
        cold_start_success: metrics.cold_start.as_ref().map(|c| c.success),
        cold_start_rounds: metrics.cold_start.as_ref().map(|c| c.rounds_used),
        max_heatmap_power_w: max_heat,
        stages: metrics.stages.clone(),
    };
    let f = File::create(dir.join("metrics.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &record)?;
    Ok(record)
}

fn write_trace(metrics: &Metrics, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "y_raw", "y_smoothed", "phi_deg", "power_percentage"])?;
    for r in &metrics.trace {
        w.write_record(&[
            r.round.to_string(),
            format!("{:.6e}", r.y_raw),
            format!("{:.6e}", r.y_smoothed),
            format!("{:.4}", r.phi_deg),
            format!("{:.6}", r.power_percentage),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Field power on a horizontal plane through the node for the final phases.
/// Skipped when the run stopped before alignment.
fn write_heatmap_file(cfg: &ScenarioFile, scenario: &Scenario, metrics: &Metrics, path: &Path) -> Result<Option<f64>> {
    if metrics.final_phases.len() != scenario.slaves.len() || scenario.slaves.is_empty() {
        return Ok(None);
    }
    let half = cfg.heatmap_half_width_m;
    let points = plane_grid(&scenario.node.position, half, half, cfg.heatmap_step_m);
    let powers = heatmap(scenario, &metrics.final_phases, &points)?;
    write_heatmap(&points, &powers, BufWriter::new(File::create(path)?))?;
    Ok(powers.iter().cloned().reduce(f64::max))
}

/// One row per run, merged after all runs finish.
pub fn write_summary(out: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["point", "seed", "slaves", "power_percentage", "rounds_to_converge", "cold_start_success"])?;
    for r in records {
        w.write_record(&[
            point_label(&r.point),
            r.seed.to_string(),
            r.slaves.to_string(),
            format!("{:.6}", r.power_percentage),
            r.rounds_to_converge.map(|v| v.to_string()).unwrap_or_default(),
            r.cold_start_success.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_records(out: &Path) -> Result<Vec<RunRecord>> {
    let runs = out.join("runs");
    let mut records = Vec::new();
    if runs.is_dir() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        for d in dirs {
            let m = d.join("metrics.json");
            if m.is_file() {
                let text = fs::read_to_string(&m)?;
                records.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", m.display()))?);
            }
        }
    }
    if records.is_empty() {
        bail!("no runs found in {}", out.display());
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub point: Point,
    pub runs: usize,
    pub mean_percentage: f64,
    /// Half-width of the normal-approximation 95% interval; 0 for one run.
    pub ci95: f64,
    pub cold_start_success: Option<f64>,
    pub mean_rounds_to_converge: Option<f64>,
}

pub fn aggregate(records: &[RunRecord]) -> Vec<ReportRow> {
    let mut groups: Vec<(Point, Vec<&RunRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(p, _)| *p == r.point) {
            Some((_, v)) => v.push(r),
            None => groups.push((r.point.clone(), vec![r])),
        }
    }
    groups.sort_by(|a, b| {
        let ka: Vec<f64> = a.0.values().cloned().collect();
        let kb: Vec<f64> = b.0.values().cloned().collect();
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
    });
    groups
        .into_iter()
        .map(|(point, rs)| {
            let n = rs.len();
            let xs: Vec<f64> = rs.iter().map(|r| r.power_percentage).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let ci95 = if n > 1 {
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                1.96 * (var / n as f64).sqrt()
            } else {
                0.0
            };
            let cs: Vec<f64> = rs.iter().filter_map(|r| r.cold_start_success).map(|b| b as u8 as f64).collect();
            let conv: Vec<f64> = rs.iter().filter_map(|r| r.rounds_to_converge).map(|v| v as f64).collect();
            let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            ReportRow {
                point,
                runs: n,
                mean_percentage: mean,
                ci95,
                cold_start_success: avg(&cs),
                mean_rounds_to_converge: avg(&conv),
            }
        })
        .collect()
}

pub fn write_report<W: Write>(rows: &[ReportRow], mut w: W) -> std::io::Result<()> {
    let axes: Vec<String> = rows.first().map(|r| r.point.keys().cloned().collect()).unwrap_or_default();
    let mut header: Vec<String> = axes.clone();
    header.extend(["runs", "mean_pct", "ci95", "cold_ok", "conv_round"].map(String::from));
    let mut cells: Vec<Vec<String>> = vec![header];
    for r in rows {
        let mut line: Vec<String> = axes.iter().map(|a| r.point.get(a).map(|v| v.to_string()).unwrap_or_default()).collect();
        line.push(r.runs.to_string());
        line.push(format!("{:.4}", r.mean_percentage));
        line.push(format!("{:.4}", r.ci95));
        line.push(r.cold_start_success.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()));
        line.push(r.mean_rounds_to_converge.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into()));
        cells.push(line);
    }
    let widths: Vec<usize> =
        (0..cells[0].len()).map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    for line in &cells {
        let row: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        writeln!(w, "{}", row.join("  "))?;
    }
    Ok(())
}
