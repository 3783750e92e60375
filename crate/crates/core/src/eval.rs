//! Ground truth, the ε₂ metric, snapshot bookkeeping and run artifacts.
//!
//! A run directory holds `metrics.csv` (step, t/T, ε₂, loss components),
//! `timings.csv` (step, wall seconds), `losses.csv` (per-step loss
//! components), one `frame_####.csv` per snapshot and `report.json`.
//! Wall-clock numbers are kept out of `metrics.csv` so that file is a pure
//! function of the configuration and seed.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cost_matrix, sample_four_balls, sample_unit_ball, Point2, SampleBatch};
use crate::nn::Mlp;
use crate::rng::{seeded, stream};
use crate::sinkhorn::{barycentric_map, sinkhorn_log, uniform_weights, SinkhornConfig};

pub const GROUND_TRUTH_CSV: &str = "ground_truth.csv";
pub const GROUND_TRUTH_META: &str = "ground_truth.meta.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TIMINGS_CSV: &str = "timings.csv";
pub const LOSSES_CSV: &str = "losses.csv";
pub const REPORT_JSON: &str = "report.json";

/// Reference pairs `(X_i, T_opt(X_i))` the learned maps are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub sources: Vec<Point2>,
    pub targets: Vec<Point2>,
    pub epsilon: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthMeta {
    format: String,
    version: u32,
    size: usize,
    epsilon: f64,
    seed: u64,
    sinkhorn_iterations: usize,
    marginal_error: f64,
}

const GROUND_TRUTH_FORMAT: &str = "otnet-ground-truth";

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn save(&self, dir: &Path, sinkhorn_iterations: usize, marginal_error: f64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(GROUND_TRUTH_CSV);
        let mut w = CsvWriter::create(&path)?;
        w.line("id,x0,x1,tx0,tx1")?;
        for (i, (x, t)) in self.sources.iter().zip(&self.targets).enumerate() {
            w.line(&format!("{i},{},{},{},{}", x.x0, x.x1, t.x0, t.x1))?;
        }
        w.finish()?;
        let meta = GroundTruthMeta {
            format: GROUND_TRUTH_FORMAT.into(),
            version: 1,
            size: self.len(),
            epsilon: self.epsilon,
            seed: self.seed,
            sinkhorn_iterations,
            marginal_error,
        };
        write_json(&dir.join(GROUND_TRUTH_META), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(GROUND_TRUTH_META);
        let meta: GroundTruthMeta = read_json(&meta_path)?;
        if meta.format != GROUND_TRUTH_FORMAT || meta.version != 1 {
            return Err(Error::Format {
                path: meta_path,
                reason: format!("unsupported ground truth {} v{}", meta.format, meta.version),
            });
        }
        let path = dir.join(GROUND_TRUTH_CSV);
        let rows = read_csv(&path, &["id", "x0", "x1", "tx0", "tx1"])?;
        let mut sources = Vec::with_capacity(rows.len());
        let mut targets = Vec::with_capacity(rows.len());
        for (k, r) in rows.iter().enumerate() {
            if r[0] != k as f64 {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: format!("row {} has id {}", k + 1, r[0]),
                });
            }
            sources.push(Point2::new(r[1], r[2]));
            targets.push(Point2::new(r[3], r[4]));
        }
        if sources.len() != meta.size || sources.is_empty() {
            return Err(Error::Format {
                path,
                reason: format!("expected {} rows, found {}", meta.size, sources.len()),
            });
        }
        Ok(GroundTruth {
            sources,
            targets,
            epsilon: meta.epsilon,
            seed: meta.seed,
        })
    }
}

/// Ground truth plus the solver diagnostics worth persisting with it.
#[derive(Debug, Clone)]
pub struct BuiltGroundTruth {
    pub truth: GroundTruth,
    pub iterations: usize,
    pub marginal_error: f64,
}

/// Samples `size` points from each measure, solves the entropic problem at
/// `epsilon` and keeps the barycentric image of every source point.
pub fn build_ground_truth(size: usize, epsilon: f64, seed: u64) -> Result<BuiltGroundTruth> {
    if size == 0 {
        return Err(Error::EmptyBatch("ground truth"));
    }
    let mut rng = seeded(seed, stream::GROUND_TRUTH);
    let xs = sample_unit_ball(size, &mut rng);
    let ys = sample_four_balls(size, &mut rng);
    let cost = cost_matrix(&xs, &ys)?;
    let w = uniform_weights(size);
    let sol = sinkhorn_log(&cost, &w, &w, &SinkhornConfig::new(epsilon))?;
    if !sol.converged {
        return Err(Error::NotConverged {
            iterations: sol.iterations_used,
            marginal_error: sol.marginal_error,
        });
    }
    let targets = barycentric_map(&sol.plan, &ys)?;
    Ok(BuiltGroundTruth {
        truth: GroundTruth {
            sources: xs.points,
            targets,
            epsilon,
            seed,
        },
        iterations: sol.iterations_used,
        marginal_error: sol.marginal_error,
    })
}

/// Mean squared distance between predictions and the reference images.
pub fn epsilon2_points(predicted: &[Point2], gt: &GroundTruth) -> Result<f64> {
    if predicted.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            got: predicted.len(),
            context: "epsilon2 predictions",
        });
    }
    let sum: f64 = predicted
        .iter()
        .zip(&gt.targets)
        .map(|(p, t)| (*p - *t).norm_sq())
        .sum();
    Ok(sum / gt.len() as f64)
}

pub fn apply_map(map: &Mlp, points: &[Point2]) -> Result<Vec<Point2>> {
    let flat: Vec<f64> = points.iter().flat_map(|p| [p.x0, p.x1]).collect();
    let (out, _) = map.forward_batch(&flat)?;
    Ok(SampleBatch::from_flat(&out, crate::geometry::Role::Mapped).points)
}

pub fn epsilon2(map: &Mlp, gt: &GroundTruth) -> Result<f64> {
    epsilon2_points(&apply_map(map, &gt.sources)?, gt)
}

/// `S` evenly spaced steps ending at `total`: `t_k = ⌈k·T/S⌉`, duplicates dropped.
/// A run with no steps gets the single snapshot 0.
pub fn snapshot_schedule(total: usize, snapshots: usize) -> Vec<usize> {
    if total == 0 || snapshots == 0 {
        return vec![0];
    }
    let mut out: Vec<usize> = (1..=snapshots)
        .map(|k| (k * total).div_ceil(snapshots))
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub t_over_t: f64,
    pub eps2: f64,
    pub wall_secs: f64,
    /// Loss components of the last step before the snapshot, in report order.
    pub losses: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss_names: Vec<String>,
    pub snapshots: Vec<Snapshot>,
    pub total_steps: usize,
    pub min_eps2: f64,
    pub t_min: usize,
    pub sigma_eps2_after_min: f64,
    pub wall_secs: f64,
    pub secs_per_step: f64,
    pub secs_to_tmin: f64,
    /// Timing of earlier stages of a multi-stage run (the potential stage).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub steps: usize,
    pub wall_secs: f64,
    pub secs_per_step: f64,
}

impl StageTiming {
    pub fn new(name: &str, steps: usize, wall_secs: f64) -> Self {
        StageTiming {
            name: name.to_string(),
            steps,
            wall_secs,
            secs_per_step: if steps == 0 {
                0.0
            } else {
                wall_secs / steps as f64
            },
        }
    }
}

/// Summary statistics of a snapshot trajectory. `t_min` is the earliest
/// minimizer; σ is the population deviation over snapshots with `t ≥ t_min`.
pub fn finalize_report(
    snapshots: Vec<Snapshot>,
    loss_names: Vec<String>,
    total_steps: usize,
    wall_secs: f64,
) -> Result<EvalReport> {
    let Some(first) = snapshots.first() else {
        return Err(Error::InvalidParameter(
            "report needs at least one snapshot".into(),
        ));
    };
    let mut best = (first.eps2, 0);
    for (k, s) in snapshots.iter().enumerate() {
        if s.eps2 < best.0 {
            best = (s.eps2, k);
        }
    }
    let (min_eps2, k_min) = best;
    let t_min = snapshots[k_min].step;
    let tail: Vec<f64> = snapshots[k_min..].iter().map(|s| s.eps2).collect();
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let secs_per_step = if total_steps == 0 {
        0.0
    } else {
        wall_secs / total_steps as f64
    };
    Ok(EvalReport {
        loss_names,
        snapshots,
        total_steps,
        min_eps2,
        t_min,
        sigma_eps2_after_min: var.sqrt(),
        wall_secs,
        secs_per_step,
        secs_to_tmin: secs_per_step * t_min as f64,
        stages: Vec::new(),
    })
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.csv")
}

/// Writes source, mapped and target points; source and mapped rows share ids.
pub fn emit_frame(
    run_dir: &Path,
    index: usize,
    xs: &[Point2],
    txs: &[Point2],
    ys: &[Point2],
) -> Result<PathBuf> {
    if xs.len() != txs.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: txs.len(),
            context: "frame mapped points",
        });
    }
    let path = run_dir.join(frame_file_name(index));
    let mut w = CsvWriter::create(&path)?;
    w.line("role,id,x0,x1")?;
    for (role, pts) in [("src", xs), ("map", txs), ("tgt", ys)] {
        for (i, p) in pts.iter().enumerate() {
            w.line(&format!("{role},{i},{},{}", p.x0, p.x1))?;
        }
    }
    w.finish()?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    /// Number of evaluation snapshots `S`.
    pub snapshots: usize,
    /// Points per cloud in each frame; 0 disables frames.
    pub frame_points: usize,
    /// Write a `losses.csv` row every this many steps; 0 disables the file.
    pub loss_log_every: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            snapshots: 50,
            frame_points: 256,
            loss_log_every: 1,
        }
    }
}

struct RunFiles {
    dir: PathBuf,
    metrics: CsvWriter,
    timings: CsvWriter,
    losses: Option<CsvWriter>,
}

/// Evaluation hooks driven from inside a training loop.
pub struct Monitor<'a> {
    gt: &'a GroundTruth,
    total_steps: usize,
    schedule: Vec<usize>,
    next: usize,
    loss_names: Vec<String>,
    last_losses: Vec<Option<f64>>,
    loss_log_every: usize,
    files: Option<RunFiles>,
    frame_x: Vec<Point2>,
    frame_y: Vec<Point2>,
    snapshots: Vec<Snapshot>,
    start: Instant,
}

impl<'a> Monitor<'a> {
    /// `out_dir` of `None` keeps everything in memory.
    pub fn new(
        gt: &'a GroundTruth,
        total_steps: usize,
        cfg: &MonitorConfig,
        loss_names: &[&str],
        out_dir: Option<&Path>,
        seed: u64,
    ) -> Result<Self> {
        let loss_names: Vec<String> = loss_names.iter().map(|s| s.to_string()).collect();
        let files = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let mut metrics = CsvWriter::create(&dir.join(METRICS_CSV))?;
                let mut header = String::from("step,t_over_T,eps2");
                for n in &loss_names {
                    header.push(',');
                    header.push_str(n);
                }
                metrics.line(&header)?;
                let mut timings = CsvWriter::create(&dir.join(TIMINGS_CSV))?;
                timings.line("step,wall_secs")?;
                let losses = if cfg.loss_log_every > 0 {
                    let mut w = CsvWriter::create(&dir.join(LOSSES_CSV))?;
                    w.line(&format!("step,{}", loss_names.join(",")))?;
                    Some(w)
                } else {
                    None
                };
                Some(RunFiles {
                    dir: dir.to_path_buf(),
                    metrics,
                    timings,
                    losses,
                })
            }
            None => None,
        };
        let (frame_x, frame_y) = if files.is_some() && cfg.frame_points > 0 {
            let mut rng = seeded(seed, stream::FRAMES);
            let x = sample_unit_ball(cfg.frame_points, &mut rng).points;
            let y = sample_four_balls(cfg.frame_points, &mut rng).points;
            (x, y)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Monitor {
            gt,
            total_steps,
            schedule: snapshot_schedule(total_steps, cfg.snapshots),
            next: 0,
            last_losses: vec![None; loss_names.len()],
            loss_names,
            loss_log_every: cfg.loss_log_every,
            files,
            frame_x,
            frame_y,
            snapshots: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    /// Records the loss components of training step `step` (1-based).
    pub fn record_losses(&mut self, step: usize, losses: &[f64]) -> Result<()> {
        if losses.len() != self.loss_names.len() {
            return Err(Error::DimensionMismatch {
                expected: self.loss_names.len(),
                got: losses.len(),
                context: "loss components",
            });
        }
        for (slot, v) in self.last_losses.iter_mut().zip(losses) {
            *slot = Some(*v);
        }
        if let Some(w) = self.files.as_mut().and_then(|f| f.losses.as_mut()) {
            if step.is_multiple_of(self.loss_log_every) {
                let mut line = step.to_string();
                for v in losses {
                    line.push(',');
                    line.push_str(&v.to_string());
                }
                w.line(&line)?;
            }
        }
        Ok(())
    }

    /// Call after every completed step (and once with 0 before training);
    /// evaluates `map` when `step` is scheduled. Returns whether it did.
    pub fn observe(&mut self, step: usize, map: &Mlp) -> Result<bool> {
        if self.schedule.get(self.next) != Some(&step) {
            return Ok(false);
        }
        let predicted = apply_map(map, &self.gt.sources)?;
        let eps2 = epsilon2_points(&predicted, self.gt)?;
        let wall_secs = self.start.elapsed().as_secs_f64();
        let t_over_t = if self.total_steps == 0 {
            0.0
        } else {
            step as f64 / self.total_steps as f64
        };
        let index = self.next;
        if let Some(f) = self.files.as_mut() {
            let mut line = format!("{step},{t_over_t},{eps2}");
            for v in &self.last_losses {
                line.push(',');
                if let Some(v) = v {
                    line.push_str(&v.to_string());
                }
            }
            f.metrics.line(&line)?;
            f.timings.line(&format!("{step},{wall_secs}"))?;
            if !self.frame_x.is_empty() {
                let tx = apply_map(map, &self.frame_x)?;
                emit_frame(&f.dir, index, &self.frame_x, &tx, &self.frame_y)?;
            }
        }
        log::debug!("step {step}: eps2 {eps2:.5}");
        self.snapshots.push(Snapshot {
            step,
            t_over_t,
            eps2,
            wall_secs,
            losses: self.last_losses.clone(),
        });
        self.next += 1;
        Ok(true)
    }

    pub fn finish(self) -> Result<EvalReport> {
        let wall_secs = self.start.elapsed().as_secs_f64();
        if self.next != self.schedule.len() {
            return Err(Error::InvalidParameter(format!(
                "training stopped after {} of {} snapshots",
                self.next,
                self.schedule.len()
            )));
        }
        if let Some(f) = self.files {
            f.metrics.finish()?;
            f.timings.finish()?;
            if let Some(w) = f.losses {
                w.finish()?;
            }
        }
        finalize_report(self.snapshots, self.loss_names, self.total_steps, wall_secs)
    }
}

pub(crate) struct CsvWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl CsvWriter {
    pub(crate) fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(CsvWriter {
            path: path.to_path_buf(),
            inner: BufWriter::new(f),
        })
    }

    pub(crate) fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.inner, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a numeric CSV with the given header.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let first = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(bad("empty file".into())),
    };
    if first.trim_end() != header.join(",") {
        return Err(bad(format!("unexpected header {first:?}")));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| bad(format!("line {}: {e}", k + 2)))?;
        if row.len() != header.len() {
            return Err(bad(format!("line {} has {} fields", k + 2, row.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
