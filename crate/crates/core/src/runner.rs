//! Named experiments, configuration resolution, run orchestration and
//! summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::adversarial::{train_adversarial, AdversarialConfig, ADVERSARIAL_LOSS_NAMES};
use crate::dual::{
    fit_map_from_potentials, train_dual, Aggregation, DualConfig, Regularization,
    DUAL_MAP_LOSS_NAMES,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_ground_truth, read_json, write_json, EvalReport, GroundTruth, Monitor, MonitorConfig,
    StageTiming, GROUND_TRUTH_CSV, GROUND_TRUTH_META, REPORT_JSON,
};
use crate::flow::{
    default_bumps, train_flow, FlowConfig, FlowFeatures, FlowLossKind, FLOW_LOSS_NAMES,
};
use crate::supervised::{
    train_supervised_map, train_supervised_plan, train_supervised_potentials, SupervisedConfig,
    SupervisedKind, SUPERVISED_MAP_LOSS_NAMES, SUPERVISED_PROB_LOSS_NAMES,
};
use crate::train::{NetworkConfig, TrainOutcome, TrainingConfig};

pub const CONFIG_JSON: &str = "config.json";
/// Subdirectory of the output root holding the shared ground truth.
pub const GROUND_TRUTH_DIR: &str = "ground_truth";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const TIMING_CSV: &str = "summary_timing.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthConfig {
    pub size: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl GroundTruthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(
                "ground truth needs a positive size and epsilon".into(),
            ));
        }
        Ok(())
    }
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig {
            size: 1000,
            epsilon: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Flow(FlowConfig),
    Adversarial(AdversarialConfig),
    Dual(DualConfig),
    Supervised(SupervisedConfig),
}

impl Strategy {
    fn loss_names(&self) -> &'static [&'static str] {
        match self {
            Strategy::Flow(_) => &FLOW_LOSS_NAMES,
            Strategy::Adversarial(_) => &ADVERSARIAL_LOSS_NAMES,
            Strategy::Dual(_) => &DUAL_MAP_LOSS_NAMES,
            Strategy::Supervised(s) => match s.kind {
                SupervisedKind::TransportMap => &SUPERVISED_MAP_LOSS_NAMES,
                SupervisedKind::PlanMatrix => &SUPERVISED_PROB_LOSS_NAMES,
                SupervisedKind::DualPotentials => &DUAL_MAP_LOSS_NAMES,
            },
        }
    }
}

/// A fully resolved run, persisted verbatim as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub experiment_name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub ground_truth: GroundTruthConfig,
    pub training: TrainingConfig,
    pub monitor: MonitorConfig,
    pub strategy: Strategy,
}

fn reported_iterations(strategy: &Strategy, training: &TrainingConfig) -> usize {
    match strategy {
        Strategy::Supervised(s) if s.kind == SupervisedKind::DualPotentials => s.dual_iterations,
        _ => training.iterations,
    }
}

impl TrainRun {
    /// The step count a results table reports as `T`.
    pub fn total_iterations(&self) -> usize {
        reported_iterations(&self.strategy, &self.training)
    }

    /// Sets `T`; both stages of a regularised dual run follow it.
    pub fn set_total_iterations(&mut self, t: usize) {
        match &mut self.strategy {
            Strategy::Supervised(s) if s.kind == SupervisedKind::DualPotentials => {
                s.dual_iterations = t
            }
            Strategy::Dual(d) => {
                d.dual_iterations = t;
                self.training.iterations = t;
            }
            _ => self.training.iterations = t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.ground_truth.validate()?;
        match &self.strategy {
            Strategy::Flow(f) => f
                .loss
                .features
                .validate(self.training.batch_source, self.training.batch_target),
            Strategy::Adversarial(a) => a.validate(),
            Strategy::Dual(d) => d.validate(),
            Strategy::Supervised(s) => s.validate(),
        }
    }
}

/// Table a registry entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Heuristic,
    Adversarial,
    Dual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub family: Family,
    pub training: TrainingConfig,
    pub strategy: Strategy,
}

impl Preset {
    pub fn total_iterations(&self) -> usize {
        reported_iterations(&self.strategy, &self.training)
    }
}

fn flow(features: FlowFeatures, with_transport_cost: bool) -> Strategy {
    Strategy::Flow(FlowConfig {
        loss: FlowLossKind {
            features,
            with_transport_cost,
        },
    })
}

fn adversarial(lambda: f64, suffix: usize, clip: Option<f64>) -> Strategy {
    Strategy::Adversarial(AdversarialConfig {
        lambda,
        critic_steps_per_map_step: suffix - 1,
        clip_threshold: clip,
        critic_network: NetworkConfig::default(),
    })
}

fn seguy(regularization: Regularization, aggregation: Aggregation, t: usize) -> Strategy {
    Strategy::Dual(DualConfig {
        regularization,
        aggregation,
        epsilon: 0.1,
        dual_iterations: t,
        ..Default::default()
    })
}

fn supervised(
    kind: SupervisedKind,
    epsilon: f64,
    inner: usize,
    dual_iterations: usize,
) -> Strategy {
    Strategy::Supervised(SupervisedConfig {
        kind,
        epsilon,
        inner_iterations: inner,
        dual_iterations,
        ..Default::default()
    })
}

/// Map-stage length of the supervised potential pipeline.
pub const SUPERVISED_DUAL_MAP_STEPS: usize = 10_000;
/// Fitting steps per label batch for potential labels.
pub const SUPERVISED_DUAL_INNER: usize = 100;

/// Every named experiment with its defaults.
pub fn registry() -> Vec<Preset> {
    use FlowFeatures::*;
    let heuristic = [
        ("covariance", Covariance, false, 5000),
        ("discr_1", DiscrepancyAtK { k: 1 }, false, 100_000),
        ("discr_5", DiscrepancyAtK { k: 5 }, false, 40_000),
        ("exp", default_bumps(), false, 30_000),
        ("sym_discr_1", SymDiscrepancyAtK { k: 1 }, false, 50_000),
        ("sym_discr_5", SymDiscrepancyAtK { k: 5 }, false, 50_000),
        ("tp_covariance", Covariance, true, 5000),
        ("tp_discr_1", DiscrepancyAtK { k: 1 }, true, 50_000),
        ("tp_discr_5", DiscrepancyAtK { k: 5 }, true, 30_000),
        ("tp_exp", default_bumps(), true, 30_000),
        ("tp_sym_discr_1", SymDiscrepancyAtK { k: 1 }, true, 50_000),
        ("tp_sym_discr_5", SymDiscrepancyAtK { k: 5 }, true, 50_000),
    ];
    let adv = [
        ("adv_l0.1_2", 0.1, 2, None),
        ("adv_l1_10", 1.0, 10, None),
        ("adv_l1_2", 1.0, 2, None),
        ("adv_l1_2_clip_0.01", 1.0, 2, Some(0.01)),
        ("adv_l10_2", 10.0, 2, None),
        ("adv_l100_2", 100.0, 2, None),
    ];
    let dual = [
        (
            "seguy_ent_mean_0.1",
            seguy(Regularization::Entropic, Aggregation::Mean, 10_000),
            10_000,
        ),
        (
            "seguy_ent_sum_0.1",
            seguy(Regularization::Entropic, Aggregation::Sum, 10_000),
            10_000,
        ),
        (
            "seguy_l2_mean_0.1",
            seguy(Regularization::L2, Aggregation::Mean, 5000),
            5000,
        ),
        (
            "seguy_l2_sum_0.1",
            seguy(Regularization::L2, Aggregation::Sum, 5000),
            5000,
        ),
        (
            "supervised_dual_0.05",
            supervised(
                SupervisedKind::DualPotentials,
                0.05,
                SUPERVISED_DUAL_INNER,
                30_600,
            ),
            SUPERVISED_DUAL_MAP_STEPS,
        ),
        (
            "supervised_dual_0.1",
            supervised(
                SupervisedKind::DualPotentials,
                0.1,
                SUPERVISED_DUAL_INNER,
                20_800,
            ),
            SUPERVISED_DUAL_MAP_STEPS,
        ),
        (
            "supervised_map_iters_1000_0.05",
            supervised(SupervisedKind::TransportMap, 0.05, 1000, 0),
            51_000,
        ),
        (
            "supervised_map_iters_200_0.05",
            supervised(SupervisedKind::TransportMap, 0.05, 200, 0),
            50_000,
        ),
        (
            "supervised_prob",
            supervised(SupervisedKind::PlanMatrix, 0.05, 1000, 0),
            51_000,
        ),
    ];
    let with_t = |t: usize| TrainingConfig {
        iterations: t,
        ..Default::default()
    };
    let mut out = Vec::new();
    for (name, features, tp, t) in heuristic {
        out.push(Preset {
            name,
            family: Family::Heuristic,
            training: with_t(t),
            strategy: flow(features, tp),
        });
    }
    for (name, lambda, suffix, clip) in adv {
        out.push(Preset {
            name,
            family: Family::Adversarial,
            training: with_t(50_000),
            strategy: adversarial(lambda, suffix, clip),
        });
    }
    for (name, strategy, t) in dual {
        out.push(Preset {
            name,
            family: Family::Dual,
            training: with_t(t),
            strategy,
        });
    }
    out
}

pub fn registry_names() -> Vec<&'static str> {
    registry().into_iter().map(|p| p.name).collect()
}

pub fn preset(name: &str) -> Result<Preset> {
    registry()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownExperiment {
            name: name.to_string(),
            known: registry_names().join(", "),
        })
}

/// Where a configuration comes from, lowest precedence first.
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    pub name: Option<String>,
    pub file: Option<PathBuf>,
    /// Dotted `key=value` pairs; values parse as JSON, falling back to a string.
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value` to a JSON tree.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override '{assignment}' is not of the form key=value"
        ))
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "override key '{key}' has an empty segment"
        )));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!(
                "override '{key}' descends into a non-object"
            )));
        };
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let Value::Object(map) = node else {
        return Err(Error::Config(format!(
            "override '{key}' descends into a non-object"
        )));
    };
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn preset_value(p: &Preset) -> Result<Value> {
    Ok(serde_json::json!({
        "experiment_name": p.name,
        "ground_truth": GroundTruthConfig::default(),
        "training": p.training,
        "monitor": MonitorConfig::default(),
        "strategy": p.strategy,
    }))
}

/// Registry preset, then file, then overrides, then the seed and iteration flags.
/// A missing `output_dir` becomes `<out_root>/<name>-seed<seed>`; a relative one
/// is taken under `out_root`.
pub fn resolve_config(src: &ConfigSources, out_root: &Path) -> Result<TrainRun> {
    let file: Option<Value> = match &src.file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let name = match (&src.name, &file) {
        (Some(n), _) => n.clone(),
        (None, Some(f)) => f
            .get("experiment_name")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                Error::Config("config file has no experiment_name and no name was given".into())
            })?
            .to_string(),
        (None, None) => {
            return Err(Error::Config(
                "an experiment name or a config file is required".into(),
            ))
        }
    };
    let mut tree = match preset(&name) {
        Ok(p) => preset_value(&p)?,
        // a custom name is fine when the file spells out the whole run
        Err(e) if file.is_none() => return Err(e),
        Err(_) => serde_json::json!({}),
    };
    if let Some(f) = file {
        merge(&mut tree, f);
    }
    tree["experiment_name"] = Value::String(name.clone());
    for o in &src.overrides {
        apply_override(&mut tree, o)?;
    }
    if let Some(strategies) = tree.get("strategy").and_then(Value::as_object) {
        if strategies.len() > 1 {
            let keys: Vec<&str> = strategies.keys().map(String::as_str).collect();
            return Err(Error::Config(format!(
                "conflicting strategy fields: {}",
                keys.join(", ")
            )));
        }
    }
    if let Some(seed) = src.seed {
        tree["seed"] = seed.into();
    }
    if tree.get("seed").is_none() {
        tree["seed"] = 0.into();
    }
    if tree.get("output_dir").is_none() {
        let seed = tree["seed"].as_u64().unwrap_or(0);
        tree["output_dir"] = Value::String(format!("{name}-seed{seed}"));
    }
    let mut run: TrainRun =
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    if run.output_dir.is_relative() {
        run.output_dir = out_root.join(&run.output_dir);
    }
    if let Some(t) = src.iterations {
        run.set_total_iterations(t);
    }
    run.validate()?;
    Ok(run)
}

/// Loads the shared ground truth from `dir`, rebuilding it when it is absent
/// or was built with different settings.
pub fn ensure_ground_truth(dir: &Path, cfg: &GroundTruthConfig) -> Result<GroundTruth> {
    if dir.join(GROUND_TRUTH_CSV).exists() {
        match GroundTruth::load(dir) {
            Ok(gt) if gt.len() == cfg.size && gt.epsilon == cfg.epsilon && gt.seed == cfg.seed => {
                return Ok(gt)
            }
            Ok(_) => log::info!(
                "ground truth in {} has other settings; rebuilding",
                dir.display()
            ),
            Err(e) => log::warn!(
                "ground truth in {} unreadable ({e}); rebuilding",
                dir.display()
            ),
        }
    }
    log::info!("building ground truth: B={}, eps={}", cfg.size, cfg.epsilon);
    let built = build_ground_truth(cfg.size, cfg.epsilon, cfg.seed)?;
    built
        .truth
        .save(dir, built.iterations, built.marginal_error)?;
    Ok(built.truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment_name: String,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub counters: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
}

fn copy_ground_truth(from: &Path, to: &Path) -> Result<()> {
    for f in [GROUND_TRUTH_CSV, GROUND_TRUTH_META] {
        if from != to {
            fs::copy(from.join(f), to.join(f)).map_err(|e| Error::io(to.join(f), e))?;
        }
    }
    Ok(())
}

fn train(run: &TrainRun, gt: &GroundTruth) -> Result<(EvalReport, BTreeMap<String, u64>)> {
    let dir = run.output_dir.as_path();
    let names = run.strategy.loss_names();
    let (t, seed) = (&run.training, run.seed);
    let new_monitor = || Monitor::new(gt, t.iterations, &run.monitor, names, Some(dir), seed);
    let single = |f: &dyn Fn(&mut Monitor) -> Result<TrainOutcome>| -> Result<(EvalReport, BTreeMap<String, u64>)> {
        let mut m = new_monitor()?;
        let out = f(&mut m)?;
        Ok((m.finish()?, out.counters))
    };
    match &run.strategy {
        Strategy::Flow(cfg) => single(&|m| train_flow(t, cfg, seed, m)),
        Strategy::Adversarial(cfg) => single(&|m| train_adversarial(t, cfg, seed, m)),
        Strategy::Supervised(cfg) if cfg.kind == SupervisedKind::TransportMap => {
            single(&|m| train_supervised_map(t, cfg, seed, m))
        }
        Strategy::Supervised(cfg) if cfg.kind == SupervisedKind::PlanMatrix => {
            single(&|m| train_supervised_plan(t, cfg, seed, m))
        }
        Strategy::Supervised(cfg) => {
            let start = Instant::now();
            let (potentials, mut counters) = train_supervised_potentials(t, cfg, seed, Some(dir))?;
            let stage =
                StageTiming::new("dual", cfg.dual_iterations, start.elapsed().as_secs_f64());
            let mut m = new_monitor()?;
            let out = fit_map_from_potentials(t, &cfg.map_stage(), &potentials, seed, &mut m)?;
            let mut report = m.finish()?;
            report.stages.push(stage);
            counters.extend(out.counters);
            Ok((report, counters))
        }
        Strategy::Dual(cfg) => {
            let start = Instant::now();
            let potentials = train_dual(t, cfg, seed, Some(dir))?;
            let stage =
                StageTiming::new("dual", cfg.dual_iterations, start.elapsed().as_secs_f64());
            let mut m = new_monitor()?;
            let out = fit_map_from_potentials(t, cfg, &potentials, seed, &mut m)?;
            let mut report = m.finish()?;
            report.stages.push(stage);
            Ok((report, out.counters))
        }
    }
}

/// Runs one experiment into `run.output_dir`, using the ground truth under
/// `ground_truth_dir`. `report.json` is written on success and on failure.
pub fn run(run: &TrainRun, ground_truth_dir: &Path) -> Result<RunRecord> {
    run.validate()?;
    let dir = run.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(CONFIG_JSON), run)?;
    let gt = ensure_ground_truth(ground_truth_dir, &run.ground_truth)?;
    copy_ground_truth(ground_truth_dir, dir)?;
    log::info!(
        "running {} (seed {}) into {}",
        run.experiment_name,
        run.seed,
        dir.display()
    );
    let mut record = RunRecord {
        experiment_name: run.experiment_name.clone(),
        seed: run.seed,
        status: RunStatus::Ok,
        error: None,
        counters: BTreeMap::new(),
        report: None,
    };
    match train(run, &gt) {
        Ok((report, counters)) => {
            record.report = Some(report);
            record.counters = counters;
            write_json(&dir.join(REPORT_JSON), &record)?;
            Ok(record)
        }
        Err(e) => {
            record.status = RunStatus::Failed;
            record.error = Some(e.to_string());
            write_json(&dir.join(REPORT_JSON), &record)?;
            Err(e)
        }
    }
}

/// One row of the quality table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityRow {
    pub model: String,
    pub seed: u64,
    pub min_eps2: f64,
    pub sigma_eps2: f64,
    pub t_min: usize,
    pub total_steps: usize,
}

/// One row of the timing table; multi-stage runs get one row per stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub model: String,
    pub seed: u64,
    pub secs_per_step: f64,
    pub secs_to_tmin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub quality: Vec<QualityRow>,
    pub timing: Vec<TimingRow>,
}

impl Summary {
    pub fn quality_csv(&self) -> String {
        let mut s = String::from("model,seed,min_eps2,sigma_eps2,t_min,T\n");
        for r in &self.quality {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.model, r.seed, r.min_eps2, r.sigma_eps2, r.t_min, r.total_steps
            );
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("model,seed,secs_per_step,secs_to_tmin\n");
        for r in &self.timing {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.model, r.seed, r.secs_per_step, r.secs_to_tmin
            );
        }
        s
    }

    /// Both tables as aligned text.
    pub fn text(&self) -> String {
        let quality: Vec<Vec<String>> = self
            .quality
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    r.seed.to_string(),
                    format!("{:.4}", r.min_eps2),
                    format!("{:.4}", r.sigma_eps2),
                    r.t_min.to_string(),
                    r.total_steps.to_string(),
                ]
            })
            .collect();
        let timing: Vec<Vec<String>> = self
            .timing
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    r.seed.to_string(),
                    format!("{:.5}", r.secs_per_step),
                    format!("{:.2}", r.secs_to_tmin),
                ]
            })
            .collect();
        let mut out = aligned(
            &["model", "seed", "min eps2", "sigma(eps2)", "t_min", "T"],
            &quality,
        );
        out.push('\n');
        out.push_str(&aligned(
            &["model", "seed", "secs/step", "secs to t_min"],
            &timing,
        ));
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            (SUMMARY_CSV, self.quality_csv()),
            (TIMING_CSV, self.timing_csv()),
            (SUMMARY_TXT, self.text()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (k, (c, w)) in cells.zip(&widths).enumerate() {
            if k == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&mut header.iter().copied());
    for r in rows {
        out.push_str(&line(&mut r.iter().map(String::as_str)));
    }
    out
}

/// Collects completed runs; directories without a successful `report.json`
/// are skipped with a warning.
pub fn summarize(dirs: &[PathBuf]) -> Result<Summary> {
    let mut quality = Vec::new();
    let mut timing = Vec::new();
    for dir in dirs {
        let path = dir.join(REPORT_JSON);
        if !path.exists() {
            log::warn!("{}: no {REPORT_JSON}; skipping", dir.display());
            continue;
        }
        let record: RunRecord = match read_json(&path) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{}: {e}; skipping", path.display());
                continue;
            }
        };
        let Some(report) = record.report.filter(|_| record.status == RunStatus::Ok) else {
            log::warn!("{}: run failed; skipping", dir.display());
            continue;
        };
        let t_total = match read_json::<TrainRun>(&dir.join(CONFIG_JSON)) {
            Ok(cfg) => cfg.total_iterations(),
            Err(_) => report.total_steps,
        };
        quality.push(QualityRow {
            model: record.experiment_name.clone(),
            seed: record.seed,
            min_eps2: report.min_eps2,
            sigma_eps2: report.sigma_eps2_after_min,
            t_min: report.t_min,
            total_steps: t_total,
        });
        let staged = !report.stages.is_empty();
        for st in &report.stages {
            timing.push(TimingRow {
                model: format!("{} ({})", record.experiment_name, st.name),
                seed: record.seed,
                secs_per_step: st.secs_per_step,
                secs_to_tmin: st.secs_per_step * report.t_min as f64,
            });
        }
        timing.push(TimingRow {
            model: if staged {
                format!("{} (map)", record.experiment_name)
            } else {
                record.experiment_name.clone()
            },
            seed: record.seed,
            secs_per_step: report.secs_per_step,
            secs_to_tmin: report.secs_to_tmin,
        });
    }
    if quality.is_empty() {
        return Err(Error::Config("no completed runs to summarize".into()));
    }
    Ok(Summary { quality, timing })
}
