use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anchorinv_core::anchors::AnchorSet;
use anchorinv_core::container::{encode_anchor_set, encode_checkpoint, load_anchor_set, load_checkpoint};
use anchorinv_core::data::{
    read_manifest, split_sessions, synth_generate, write_manifest, zscore_apply_all, zscore_fit, Dataset, SessionSplit,
    SynthSpec,
};
use anchorinv_core::eval::{median, mean_std, run_trials, Metric, TrialPlan, TrialReport};
use anchorinv_core::inversion::{invert_set, InversionConfig};
use anchorinv_core::model::{train_base, ModelState, TrainLog};
use anchorinv_core::seed::{self, stream};
use anchorinv_core::trainer::{build_base_memory, select_base_anchors};
use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataSection, ExperimentConfig};
use crate::writer::with_writer;

pub const CHECKPOINT_FILE: &str = "checkpoint.ainv";
pub const ANCHORS_FILE: &str = "anchors.ainv";

#[derive(Clone, Debug)]
pub struct Inputs {
    pub train: Dataset,
    pub test: Dataset,
    pub sample_rate: f64,
}

/// Train and test splits as configured, z-scored with train statistics
/// when enabled.
pub fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    let (train, test, sample_rate) = match &cfg.data {
        DataSection::Synthetic(s) => {
            let spec = SynthSpec::family(
                cfg.model.channels,
                cfg.model.time_steps,
                s.classes,
                s.train_per_class,
                s.test_per_class,
                s.noise,
                cfg.seed,
            );
            let (train, test) = synth_generate(&spec)?;
            (train, test, s.sample_rate)
        }
        DataSection::Manifest(m) => {
            let (manifest, train, test) = read_manifest(&m.path)?;
            ensure!(
                manifest.channels == cfg.model.channels && manifest.length == cfg.model.time_steps,
                "manifest samples are {}x{}, model expects {}x{}",
                manifest.channels,
                manifest.length,
                cfg.model.channels,
                cfg.model.time_steps
            );
            (train, test, manifest.sample_rate)
        }
    };
    if !cfg.preprocess.zscore {
        return Ok(Inputs { train, test, sample_rate });
    }
    let stats = zscore_fit(&train)?;
    Ok(Inputs {
        train: zscore_apply_all(&train, &stats)?,
        test: zscore_apply_all(&test, &stats)?,
        sample_rate,
    })
}

pub fn session_split(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<SessionSplit> {
    Ok(split_sessions(
        &inputs.train,
        &cfg.sessions.base_classes,
        cfg.sessions.way,
        cfg.sessions.shot,
    )?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub base_classes: Vec<usize>,
    pub samples: usize,
    pub feature_dim: usize,
    pub anchors: usize,
    pub anchor_strategy: String,
    pub checkpoint_sha256: String,
    pub epoch_loss: Vec<f64>,
}

/// Base model and base anchor store for `split`.
pub fn train_base_session(cfg: &ExperimentConfig, split: &SessionSplit) -> Result<(ModelState, AnchorSet, TrainLog)> {
    let (state, log) = train_base(&cfg.backbone(), &split.base, &cfg.base_train())?;
    let anchors = select_base_anchors(&state, &split.base, &cfg.fscil()?, cfg.seed)?;
    Ok((state, anchors, log))
}

/// Writes `<out>/base/{checkpoint.ainv, anchors.ainv, train_log.json}`.
pub fn cmd_train_base(cfg: &ExperimentConfig, out: &Path) -> Result<(TrainSummary, PathBuf)> {
    with_writer(out, "base", |w| {
        let inputs = load_inputs(cfg)?;
        let split = session_split(cfg, &inputs)?;
        let (state, anchors, log) = train_base_session(cfg, &split)?;
        let ckpt = encode_checkpoint(&state);
        w.write(CHECKPOINT_FILE, &ckpt)?;
        w.write(ANCHORS_FILE, &encode_anchor_set(&anchors))?;
        let summary = TrainSummary {
            seed: cfg.seed,
            base_classes: split.base_classes().to_vec(),
            samples: split.base.len(),
            feature_dim: state.feature_dim(),
            anchors: anchors.len(),
            anchor_strategy: anchors.strategy.label(),
            checkpoint_sha256: sha256_hex(&ckpt),
            epoch_loss: log.epoch_loss,
        };
        w.write_json("train_log.json", &summary)?;
        Ok(summary)
    })
}

/// Checkpoint and anchor store, checked against the config.
pub fn load_base(
    cfg: &ExperimentConfig,
    split: &SessionSplit,
    checkpoint: &Path,
    anchors: &Path,
) -> Result<(ModelState, AnchorSet)> {
    ensure!(
        checkpoint.exists(),
        "checkpoint {} not found; run `train-base` first",
        checkpoint.display()
    );
    let state = load_checkpoint(checkpoint)?;
    ensure!(
        *state.config() == cfg.backbone(),
        "checkpoint {} was trained with a different model section",
        checkpoint.display()
    );
    ensure!(
        state.classes() == split.base_classes(),
        "checkpoint {} covers classes {:?}, config base classes are {:?}",
        checkpoint.display(),
        state.classes(),
        split.base_classes()
    );
    let set = load_anchor_set(anchors, Some(state.feature_dim()))?;
    Ok((state, set))
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    split: &SessionSplit,
    state: &ModelState,
    anchors: AnchorSet,
    workers: usize,
) -> Result<TrialReport> {
    let methods = cfg.methods()?;
    let fscil = cfg.fscil()?;
    let memory = build_base_memory(state, &split.base, anchors, &methods, &fscil, cfg.seed)?;
    let plan = TrialPlan {
        trials: cfg.eval.trials,
        seed: cfg.seed,
        methods,
        workers,
    };
    Ok(run_trials(state, &memory, split, &inputs.test, &plan, &fscil)?)
}

#[derive(Clone, Debug)]
pub struct BasePaths {
    pub checkpoint: PathBuf,
    pub anchors: PathBuf,
}

impl BasePaths {
    pub fn under(out: &Path) -> Self {
        Self {
            checkpoint: out.join("base").join(CHECKPOINT_FILE),
            anchors: out.join("base").join(ANCHORS_FILE),
        }
    }
}

/// Writes `<out>/run/{report.json, report.txt}`.
pub fn cmd_run(cfg: &ExperimentConfig, base: &BasePaths, out: &Path, workers: usize) -> Result<(TrialReport, PathBuf)> {
    cfg.methods()?;
    with_writer(out, "run", |w| {
        let inputs = load_inputs(cfg)?;
        let split = session_split(cfg, &inputs)?;
        let (state, anchors) = load_base(cfg, &split, &base.checkpoint, &base.anchors)?;
        let report = run_experiment(cfg, &inputs, &split, &state, anchors, workers)?;
        w.write("report.json", format!("{}\n", report.to_json()?).as_bytes())?;
        w.write("report.txt", report.render().as_bytes())?;
        Ok(report)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    BaseClasses,
    Shots,
    Anchors,
    Strategy,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Self::BaseClasses => "base-classes",
            Self::Shots => "shots",
            Self::Anchors => "anchors",
            Self::Strategy => "strategy",
        }
    }

    pub fn values(self, cfg: &ExperimentConfig) -> Vec<String> {
        let a = &cfg.ablate;
        match self {
            Self::BaseClasses => a.base_classes.iter().map(ToString::to_string).collect(),
            Self::Shots => a.shots.iter().map(ToString::to_string).collect(),
            Self::Anchors => a.anchors.iter().map(ToString::to_string).collect(),
            Self::Strategy => a.strategies.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub value: String,
    pub report: TrialReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateReport {
    pub axis: Axis,
    pub rows: Vec<AblateRow>,
}

impl AblateReport {
    /// Final-session values of `metric` for `method`, one vector per row.
    pub fn final_metric(&self, method: &str, metric: Metric) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.report.method(method).map(|m| m.final_metric(metric)).unwrap_or_default())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ablation over {}", self.axis.label());
        let _ = writeln!(
            s,
            "{:<20} {:<12} {:>16} {:>16} {:>16}",
            self.axis.label(),
            "method",
            "all",
            "base",
            "incremental"
        );
        for row in &self.rows {
            for m in &row.report.methods {
                let cell = |metric| {
                    let v = m.final_metric(metric);
                    let (mean, std) = mean_std(&v);
                    format!("{mean:.2} ± {std:.2}")
                };
                let _ = writeln!(
                    s,
                    "{:<20} {:<12} {:>16} {:>16} {:>16}",
                    row.value,
                    m.method,
                    cell(Metric::All),
                    cell(Metric::Base),
                    cell(Metric::Incremental)
                );
            }
        }
        s
    }
}

/// Config for the first `b` configured base classes, with the dropped base
/// classes removed from the data.
fn reduce_base(cfg: &ExperimentConfig, inputs: &Inputs, b: usize) -> Result<(ExperimentConfig, Inputs)> {
    let all = &cfg.sessions.base_classes;
    ensure!(b >= 2 && b <= all.len(), "base-classes value {b} outside 2..={}", all.len());
    let dropped = &all[b..];
    let keep: Vec<usize> = inputs.train.classes().into_iter().filter(|k| !dropped.contains(k)).collect();
    let mut c = cfg.clone();
    c.sessions.base_classes = all[..b].to_vec();
    Ok((
        c,
        Inputs {
            train: inputs.train.restrict(&keep),
            test: inputs.test.restrict(&keep),
            sample_rate: inputs.sample_rate,
        },
    ))
}

fn parse_count(axis: Axis, v: &str) -> Result<usize> {
    v.parse().with_context(|| format!("{} value `{v}` is not a count", axis.label()))
}

/// One full experiment per axis value. The base model is retrained only
/// when the base classes change.
pub fn ablate(cfg: &ExperimentConfig, axis: Axis, workers: usize) -> Result<AblateReport> {
    let values = axis.values(cfg);
    if values.is_empty() {
        bail!("ablate.{} lists no values", axis.label());
    }
    let inputs = load_inputs(cfg)?;
    let shared = if axis == Axis::BaseClasses {
        None
    } else {
        let split = session_split(cfg, &inputs)?;
        let (state, _, _) = train_base_session(cfg, &split)?;
        Some(state)
    };
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let (c, data) = match axis {
            Axis::BaseClasses => reduce_base(cfg, &inputs, parse_count(axis, &v)?)?,
            Axis::Shots => {
                let mut c = cfg.clone();
                c.sessions.shot = parse_count(axis, &v)?;
                (c, inputs.clone())
            }
            Axis::Anchors => {
                let mut c = cfg.clone();
                c.anchors.base_per_class = parse_count(axis, &v)?;
                (c, inputs.clone())
            }
            Axis::Strategy => {
                let mut c = cfg.clone();
                c.anchors.base_strategy = v.clone();
                (c, inputs.clone())
            }
        };
        c.validate().with_context(|| format!("{} = {v}", axis.label()))?;
        let split = session_split(&c, &data)?;
        let report = match &shared {
            Some(state) => {
                let anchors = select_base_anchors(state, &split.base, &c.fscil()?, c.seed)?;
                run_experiment(&c, &data, &split, state, anchors, workers)?
            }
            None => {
                let (state, anchors, _) = train_base_session(&c, &split)?;
                run_experiment(&c, &data, &split, &state, anchors, workers)?
            }
        };
        rows.push(AblateRow { value: v, report });
    }
    Ok(AblateReport { axis, rows })
}

/// Writes `<out>/ablate-<axis>/{ablate.json, ablate.txt}`.
pub fn cmd_ablate(cfg: &ExperimentConfig, axis: Axis, out: &Path, workers: usize) -> Result<(AblateReport, PathBuf)> {
    with_writer(out, &format!("ablate-{}", axis.label()), |w| {
        let report = ablate(cfg, axis, workers)?;
        w.write_json("ablate.json", &report)?;
        w.write("ablate.txt", report.render().as_bytes())?;
        Ok(report)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub anchors: usize,
    pub exported: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    pub histogram: Vec<HistogramBin>,
    /// Final feature MAE per anchor, in anchor-store order.
    pub mae: Vec<f64>,
}

pub const HISTOGRAM_BINS: usize = 10;

pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![HistogramBin {
            lo,
            hi,
            count: values.len(),
        }];
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: lo + width * i as f64,
            hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

/// Inverts every anchor in the store once and reports the final feature
/// MAE. The inverted samples are exported as a synthetic manifest.
pub fn audit_inversion(
    state: &ModelState,
    anchors: &AnchorSet,
    inversion: &InversionConfig,
    master_seed: u64,
) -> Result<(AuditReport, Dataset)> {
    ensure!(!anchors.is_empty(), "anchor store is empty");
    let cfg = InversionConfig {
        seed: seed::derive(master_seed, stream::INVERSION),
        ..inversion.clone()
    };
    let replay = invert_set(state, anchors, &cfg)?;
    let mae = replay.maes();
    let (mean, _) = mean_std(&mae);
    let report = AuditReport {
        anchors: anchors.len(),
        exported: replay.len(),
        min: mae.iter().copied().fold(f64::INFINITY, f64::min),
        median: median(&mae),
        max: mae.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        histogram: histogram(&mae, HISTOGRAM_BINS),
        mae,
    };
    Ok((report, replay.to_dataset()))
}

/// Writes `<out>/audit/{audit.json, audit.txt}` and the inverted samples
/// under `<out>/audit/inverted/`.
pub fn cmd_audit_inversion(cfg: &ExperimentConfig, base: &BasePaths, out: &Path) -> Result<(AuditReport, PathBuf)> {
    with_writer(out, "audit", |w| {
        let inputs = load_inputs(cfg)?;
        let split = session_split(cfg, &inputs)?;
        let (state, anchors) = load_base(cfg, &split, &base.checkpoint, &base.anchors)?;
        let (report, samples) = audit_inversion(&state, &anchors, &cfg.inversion(), cfg.seed)?;
        let manifest = w.path("inverted/manifest.json")?;
        write_manifest(
            manifest.parent().expect("manifest has a parent"),
            &samples,
            &Dataset::default(),
            inputs.sample_rate,
            true,
        )?;
        w.write_json("audit.json", &report)?;
        w.write("audit.txt", render_audit(&report).as_bytes())?;
        Ok(report)
    })
}

pub fn render_audit(r: &AuditReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "inversion audit: {} anchors, {} samples exported", r.anchors, r.exported);
    let _ = writeln!(
        s,
        "feature MAE  min {:.6}  median {:.6}  max {:.6}  mean {:.6}",
        r.min, r.median, r.max, r.mean
    );
    for b in &r.histogram {
        let _ = writeln!(s, "  [{:.6}, {:.6}] {:>6}", b.lo, b.hi, b.count);
    }
    s
}

/// Text rendering of any JSON report this tool writes.
pub fn render_report(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(r) = serde_json::from_str::<TrialReport>(&text) {
        return Ok(r.render());
    }
    if let Ok(r) = serde_json::from_str::<AblateReport>(&text) {
        return Ok(r.render());
    }
    if let Ok(r) = serde_json::from_str::<AuditReport>(&text) {
        return Ok(render_audit(&r));
    }
    bail!("{} is not a run, ablation or audit report", path.display())
}
