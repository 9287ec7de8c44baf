//! Experiment configuration: TOML deep-merged over a named preset, then
//! deserialised strictly (unknown keys and missing keys are both errors).

use std::path::{Path, PathBuf};

use anchorinv_core::anchors::SelectionStrategy;
use anchorinv_core::inversion::{InitMode, InversionConfig, LrSchedule};
use anchorinv_core::model::{Activation, BackboneConfig, BaseTrainConfig, PARAM_NAMES};
use anchorinv_core::trainer::{FinetuneConfig, FscilConfig, Method, ReplayPolicy, TrainableSet};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const PRESETS: [(&str, &str); 4] = [
    ("desk", include_str!("../presets/desk.toml")),
    ("bci", include_str!("../presets/bci.toml")),
    ("nhie", include_str!("../presets/nhie.toml")),
    ("grabmyo", include_str!("../presets/grabmyo.toml")),
];

pub const METHOD_NAMES: [&str; 7] = [
    "anchor-inv",
    "finetune",
    "protonet",
    "teen",
    "deep-dream",
    "deep-inv",
    "real-replay",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub preprocess: PreprocessSection,
    pub sessions: SessionsSection,
    pub base: BaseSection,
    pub anchors: AnchorsSection,
    pub inversion: InversionSection,
    pub finetune: FinetuneSection,
    pub replay: ReplaySection,
    pub teen: TeenSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub time_steps: usize,
    pub filters: usize,
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DataSection {
    Synthetic(SyntheticSection),
    Manifest(ManifestSection),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub sample_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSection {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub zscore: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionsSection {
    pub base_classes: Vec<usize>,
    pub way: usize,
    pub shot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSection {
    pub epochs: usize,
    pub lr: f64,
    /// 0 trains full-batch.
    pub batch_size: usize,
    pub class_weighted: bool,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorsSection {
    pub base_strategy: String,
    pub base_per_class: usize,
    pub session_strategy: String,
    pub session_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSection {
    pub init: InitMode,
    pub lr: f64,
    pub iterations: usize,
    pub schedule: LrSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub trainable: Vec<String>,
    pub train_new_classes: bool,
    pub prototype_init: bool,
    pub class_weighted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    pub policy: ReplayPolicy,
    pub real_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeenSection {
    pub tau: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub trials: usize,
    pub methods: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Number of base classes kept, taken from the front of
    /// `sessions.base_classes`.
    pub base_classes: Vec<usize>,
    pub shots: Vec<usize>,
    pub anchors: Vec<usize>,
    pub strategies: Vec<String>,
}

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .with_context(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            format!("unknown preset `{name}`; available: {}", names.join(", "))
        })
}

/// Recursively overlays `over` onto `base`: tables merge key by key, any
/// other value replaces.
pub fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_value(text: &str, origin: &str) -> Result<toml::Value> {
    let table: toml::Table = toml::from_str(text).with_context(|| format!("parsing {origin}"))?;
    Ok(toml::Value::Table(table))
}

/// Resolves a config: with a top-level `preset = "name"` the file is an
/// overlay on that preset, otherwise it must be complete.
pub fn resolve(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let mut value = parse_value(text, origin)?;
    let preset = value
        .as_table_mut()
        .and_then(|t| t.remove("preset"))
        .map(|p| match p {
            toml::Value::String(s) => Ok(s),
            other => bail!("{origin}: `preset` must be a string, got {}", other.type_str()),
        })
        .transpose()?;
    if let Some(name) = preset {
        let mut base = parse_value(preset_text(&name)?, &format!("preset `{name}`"))?;
        deep_merge(&mut base, value);
        value = base;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let inner = inner.lines().next().unwrap_or_default();
        if path == "." {
            anyhow::anyhow!("{origin}: {inner}")
        } else {
            anyhow::anyhow!("{origin}: at `{path}`: {inner}")
        }
    })?;
    cfg.validate().with_context(|| format!("invalid config {origin}"))?;
    Ok(cfg)
}

/// Reads `path`, or the desk preset when no path is given. Manifest paths
/// are made absolute relative to the config file.
pub fn load(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => resolve(preset_text("desk")?, "preset `desk`"),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let mut cfg = resolve(&text, &p.display().to_string())?;
            if let DataSection::Manifest(m) = &mut cfg.data {
                if m.path.is_relative() {
                    let dir = p.parent().unwrap_or(Path::new("."));
                    m.path = dir.join(&m.path);
                }
            }
            Ok(cfg)
        }
    }
}

pub fn parse_method(name: &str, teen: &TeenSection) -> Result<Method> {
    let m = Method::parse(name)
        .with_context(|| format!("unknown method `{name}`; valid methods: {}", METHOD_NAMES.join(", ")))?;
    Ok(match m {
        Method::Teen { .. } => Method::Teen {
            tau: teen.tau,
            alpha: teen.alpha,
        },
        other => other,
    })
}

pub fn parse_strategy(label: &str) -> Result<SelectionStrategy> {
    SelectionStrategy::parse(label).with_context(|| {
        format!(
            "unknown anchor strategy `{label}`; expected random, closest, full, kmeans-<k> or random-closest-<percent>"
        )
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.methods()?;
        parse_strategy(&self.anchors.base_strategy)?;
        parse_strategy(&self.anchors.session_strategy)?;
        for s in &self.ablate.strategies {
            parse_strategy(s)?;
        }
        for t in &self.finetune.trainable {
            if !PARAM_NAMES.contains(&t.as_str()) {
                bail!("finetune.trainable: unknown tensor `{t}`; expected one of {}", PARAM_NAMES.join(", "));
            }
        }
        if self.eval.trials == 0 {
            bail!("eval.trials must be >= 1");
        }
        if self.sessions.base_classes.is_empty() {
            bail!("sessions.base_classes is empty");
        }
        if let DataSection::Synthetic(s) = &self.data {
            if s.classes <= self.sessions.base_classes.len() {
                bail!("data.synthetic.classes must exceed the number of base classes");
            }
        }
        self.fscil()?.validate()?;
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        let m = &self.model;
        BackboneConfig {
            channels: m.channels,
            time_steps: m.time_steps,
            filters: m.filters,
            temporal_kernel: m.temporal_kernel,
            temporal_stride: m.temporal_stride,
            pool_kernel: m.pool_kernel,
            pool_stride: m.pool_stride,
            activation: m.activation,
        }
    }

    pub fn base_train(&self) -> BaseTrainConfig {
        BaseTrainConfig {
            epochs: self.base.epochs,
            lr: self.base.lr,
            batch_size: (self.base.batch_size > 0).then_some(self.base.batch_size),
            class_weighted: self.base.class_weighted,
            temperature: self.base.temperature,
            seed: self.seed,
        }
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        if self.eval.methods.is_empty() {
            bail!("eval.methods is empty; valid methods: {}", METHOD_NAMES.join(", "));
        }
        let methods = self
            .eval
            .methods
            .iter()
            .map(|m| parse_method(m, &self.teen))
            .collect::<Result<Vec<_>>>()?;
        for m in &methods {
            m.validate()?;
        }
        Ok(methods)
    }

    pub fn inversion(&self) -> InversionConfig {
        InversionConfig {
            init: self.inversion.init,
            lr: self.inversion.lr,
            iterations: self.inversion.iterations,
            schedule: self.inversion.schedule,
            seed: self.seed,
        }
    }

    pub fn fscil(&self) -> Result<FscilConfig> {
        let f = &self.finetune;
        Ok(FscilConfig {
            finetune: FinetuneConfig {
                lambda: f.lambda,
                lr: f.lr,
                iterations: f.iterations,
                trainable: TrainableSet {
                    backbone: f.trainable.clone(),
                    new_classes: f.train_new_classes,
                },
                prototype_init: f.prototype_init,
                class_weighted: f.class_weighted,
                seed: self.seed,
            },
            inversion: self.inversion(),
            base_anchors: parse_strategy(&self.anchors.base_strategy)?,
            base_anchors_per_class: self.anchors.base_per_class,
            session_anchors: parse_strategy(&self.anchors.session_strategy)?,
            session_anchors_per_class: self.anchors.session_per_class,
            replay_policy: self.replay.policy,
            real_per_class: self.replay.real_per_class,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
