//! Incremental sessions: composite replay loss, finetuning under a freezing
//! policy, the session loop, and the baseline adapters.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use anchorinv_tensor::{Adam, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::anchors::{project_features, select_anchors, AnchorSet, SelectionStrategy};
use crate::data::{sample_few_shot, Dataset};
use crate::error::{CoreError, Result};
use crate::inversion::{invert_set, label_space_replay, InversionConfig, LabelInversionConfig, LabelMode, ReplaySet};
use crate::model::{
    checksum, class_means, sample_weights, compute_prototypes, standard_normal_vector, weighted_mean, BoundBackbone, BoundClassifier,
    ModelState, PARAM_NAMES, SPATIAL_BIAS, SPATIAL_WEIGHT, TEMPORAL_BIAS, TEMPORAL_WEIGHT,
};
use crate::seed::{self, stream};

/// Which parameters a finetuning run may update.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainableSet {
    /// Backbone tensor names, e.g. `spatial.weight`.
    pub backbone: Vec<String>,
    /// Whether the classifier entries of the session's new classes train.
    pub new_classes: bool,
}

impl TrainableSet {
    /// Last backbone layer plus the new classifier entries.
    pub fn last_layer() -> Self {
        Self {
            backbone: vec![SPATIAL_WEIGHT.into(), SPATIAL_BIAS.into()],
            new_classes: true,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.backbone.is_empty() && !self.new_classes
    }

    pub fn trains(&self, name: &str) -> bool {
        self.backbone.iter().any(|b| b == name)
    }

    fn temporal_frozen(&self) -> bool {
        !self.trains(TEMPORAL_WEIGHT) && !self.trains(TEMPORAL_BIAS)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub trainable: TrainableSet,
    pub prototype_init: bool,
    /// Weight samples by inverse class frequency within each set.
    pub class_weighted: bool,
    /// Seeds the random classifier init when `prototype_init` is off.
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 1e-3,
            iterations: 100,
            trainable: TrainableSet::last_layer(),
            prototype_init: true,
            class_weighted: false,
            seed: 5,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CoreError::InvalidConfig("lambda must be finite and >= 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(CoreError::InvalidConfig("finetune lr must be > 0".into()));
        }
        if self.iterations > 0 && self.trainable.is_empty() {
            return Err(CoreError::InvalidConfig("trainable set is empty".into()));
        }
        if let Some(b) = self.trainable.backbone.iter().find(|b| !PARAM_NAMES.contains(&b.as_str())) {
            return Err(CoreError::InvalidConfig(format!("unknown backbone tensor `{b}`")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    AnchorInv,
    FinetuneNaive,
    ProtoNet,
    Teen { tau: f64, alpha: f64 },
    DeepDreamReplay,
    DeepInvReplay,
    RealReplay,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Self::AnchorInv => "anchor-inv",
            Self::FinetuneNaive => "finetune",
            Self::ProtoNet => "protonet",
            Self::Teen { .. } => "teen",
            Self::DeepDreamReplay => "deep-dream",
            Self::DeepInvReplay => "deep-inv",
            Self::RealReplay => "real-replay",
        }
    }

    /// Parses a label; TEEN takes `tau = 32`, `alpha = 0.5`.
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "anchor-inv" => Self::AnchorInv,
            "finetune" => Self::FinetuneNaive,
            "protonet" => Self::ProtoNet,
            "teen" => Self::Teen { tau: 32.0, alpha: 0.5 },
            "deep-dream" => Self::DeepDreamReplay,
            "deep-inv" => Self::DeepInvReplay,
            "real-replay" => Self::RealReplay,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Teen { tau, alpha } = *self {
            if !(tau > 0.0) || !(0.0..=1.0).contains(&alpha) {
                return Err(CoreError::InvalidConfig("teen needs tau > 0 and alpha in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// loss and finetuning

/// Inputs of one set, either raw samples or cached temporal maps.
struct Batch {
    inputs: Vec<Tensor<f32>>,
    labels: Vec<usize>,
    weights: Vec<f64>,
}

impl Batch {
    fn new(data: &Dataset, state: &ModelState, cache_temporal: bool, class_weighted: bool) -> Result<Self> {
        let inputs = data
            .iter()
            .map(|s| {
                if cache_temporal {
                    state.backbone.temporal_features(&s.x)
                } else {
                    Ok(s.x.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
        Ok(Self {
            inputs,
            weights: sample_weights(&labels, class_weighted),
            labels,
        })
    }

    fn mean_ce<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundBackbone,
        c: &BoundClassifier,
        cached: bool,
    ) -> Result<Var> {
        let mut losses = Vec::with_capacity(self.inputs.len());
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            let xv = g.constant(&x.cast());
            let h = if cached { p.head(g, xv)? } else { p.embed(g, xv)? };
            losses.push(c.cross_entropy(g, h, y)?);
        }
        weighted_mean(g, &losses, &self.weights)
    }
}

/// `CE(new) + λ·CE(replay)`; an empty set contributes 0 and `λ = 0` skips
/// the replay term entirely.
fn session_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundBackbone,
    c: &BoundClassifier,
    new: &Batch,
    replay: &Batch,
    lambda: f64,
    cached: bool,
) -> Result<Var> {
    let use_replay = lambda != 0.0 && !replay.inputs.is_empty();
    if new.inputs.is_empty() && !use_replay {
        return Err(CoreError::Empty("finetuning sets"));
    }
    let old = if use_replay {
        let l = replay.mean_ce(g, p, c, cached)?;
        Some(g.scale(l, lambda)?)
    } else {
        None
    };
    if new.inputs.is_empty() {
        return Ok(old.expect("replay term present"));
    }
    let l = new.mean_ce(g, p, c, cached)?;
    Ok(match old {
        Some(o) => g.add(l, o)?,
        None => l,
    })
}

/// Composite finetuning loss of `state` in double precision.
pub fn composite_loss(state: &ModelState, replay: &Dataset, new: &Dataset, lambda: f64) -> Result<f64> {
    let new = Batch::new(new, state, false, false)?;
    let replay = Batch::new(replay, state, false, false)?;
    let mut g = Graph::<f64>::new();
    let p = state.backbone.bind(&mut g, |_| false);
    let c = state.bind_classifier(&mut g, |_| false)?;
    let loss = session_loss(&mut g, &p, &c, &new, &replay, lambda, false)?;
    Ok(g.scalar(loss))
}

/// Registers classifier entries for the unseen classes of `new`: class
/// prototypes, or standard-normal vectors seeded per class.
pub fn init_new_class_weights(state: &mut ModelState, new: &Dataset, prototype: bool, seed: u64) -> Result<()> {
    let classes = new.classes();
    if let Some(&k) = classes.iter().find(|k| state.phi.contains_key(k)) {
        return Err(CoreError::DuplicateClass(k));
    }
    if classes.is_empty() {
        return Ok(());
    }
    if prototype {
        let features = state.embed_all(new)?;
        let labels: Vec<usize> = new.iter().map(|s| s.label).collect();
        for &k in &classes {
            let p = class_means(&features, &labels, k)?;
            state.phi.insert(k, Tensor::vector(p));
        }
    } else {
        let d = state.feature_dim();
        for &k in &classes {
            let s = seed::derive(seed::derive(seed, stream::CLASS_INIT), k as u64);
            state.phi.insert(k, standard_normal_vector(d, s));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneLog {
    pub loss: Vec<f64>,
}

/// Checksums of every tensor `config` leaves frozen, keyed `temporal.weight`,
/// `phi.3` and so on.
pub fn frozen_checksums(state: &ModelState, trainable: &TrainableSet, new_classes: &[usize]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for (name, t) in state.backbone.named_params() {
        if !trainable.trains(name) {
            out.insert(name.to_string(), checksum(t));
        }
    }
    for (k, t) in &state.phi {
        if !(trainable.new_classes && new_classes.contains(k)) {
            out.insert(format!("phi.{k}"), checksum(t));
        }
    }
    out
}

/// Full-batch Adam on the composite loss. New classes are registered first;
/// only the configured trainable set moves, which is checked by checksum.
pub fn finetune_session(
    state: &ModelState,
    replay: &Dataset,
    new: &Dataset,
    config: &FinetuneConfig,
) -> Result<(ModelState, FinetuneLog)> {
    config.validate()?;
    let mut state = state.clone();
    let new_classes = new.classes();
    init_new_class_weights(&mut state, new, config.prototype_init, config.seed)?;
    let mut log = FinetuneLog::default();
    if config.iterations == 0 {
        return Ok((state, log));
    }
    for s in replay.iter() {
        if !state.phi.contains_key(&s.label) {
            return Err(CoreError::UnknownClass(s.label));
        }
    }
    let trainable = &config.trainable;
    let before = frozen_checksums(&state, trainable, &new_classes);
    let cached = trainable.temporal_frozen();
    let new_batch = Batch::new(new, &state, cached, config.class_weighted)?;
    let replay_batch = Batch::new(replay, &state, cached, config.class_weighted)?;
    let train_phi: BTreeSet<usize> = if trainable.new_classes {
        new_classes.iter().copied().collect()
    } else {
        BTreeSet::new()
    };
    let backbone_names: Vec<&'static str> = PARAM_NAMES.iter().copied().filter(|n| trainable.trains(n)).collect();
    let mut adam = Adam::<f32>::new(config.lr);
    for step in 0..config.iterations {
        let mut g = Graph::<f32>::new();
        let p = state.backbone.bind(&mut g, |n| trainable.trains(n));
        let c = state.bind_classifier(&mut g, |k| train_phi.contains(&k))?;
        let loss = session_loss(&mut g, &p, &c, &new_batch, &replay_batch, config.lambda, cached)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(CoreError::Diverged { stage: "finetuning", step });
        }
        log.loss.push(value);
        let grads = g.backward(loss)?;
        let mut vars: Vec<Var> = backbone_names.iter().map(|n| p.var(n).expect("known name")).collect();
        for (&k, &v) in c.ids.iter().zip(&c.raw) {
            if train_phi.contains(&k) {
                vars.push(v);
            }
        }
        let gs: Vec<Tensor<f32>> = vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        let mut params = trainable_params(&mut state, &backbone_names, &train_phi);
        let grefs: Vec<&Tensor<f32>> = gs.iter().collect();
        adam.step(&mut params, &grefs)?;
    }
    let after = frozen_checksums(&state, trainable, &new_classes);
    if let Some((name, _)) = before.iter().find(|(k, v)| after.get(*k) != Some(v)) {
        return Err(CoreError::FrozenMutated(name.clone()));
    }
    Ok((state, log))
}

/// Mutable references in the order the gradients are collected: backbone
/// names as given, then classifier entries by ascending id.
fn trainable_params<'a>(
    state: &'a mut ModelState,
    names: &[&str],
    phi: &BTreeSet<usize>,
) -> Vec<&'a mut Tensor<f32>> {
    let b = &mut state.backbone;
    let mut slots: Vec<(&str, &mut Tensor<f32>)> = vec![
        (TEMPORAL_WEIGHT, &mut b.temporal_weight),
        (TEMPORAL_BIAS, &mut b.temporal_bias),
        (SPATIAL_WEIGHT, &mut b.spatial_weight),
        (SPATIAL_BIAS, &mut b.spatial_bias),
    ];
    let mut out = Vec::new();
    for n in names {
        let i = slots.iter().position(|(s, _)| s == n).expect("known name");
        out.push(slots.swap_remove(i).1);
    }
    out.extend(state.phi.iter_mut().filter(|(k, _)| phi.contains(k)).map(|(_, t)| t));
    out
}

// ---------------------------------------------------------------------------
// baselines

/// Frozen backbone; new classifier entries are class prototypes.
pub fn adapt_protonet(state: &ModelState, new: &Dataset) -> Result<ModelState> {
    let mut out = state.clone();
    compute_prototypes(&mut out, new, &new.classes())?;
    Ok(out)
}

/// Prototypes calibrated toward the base classes:
/// `p' = α·p + (1 − α)·Σ_b softmax_b(τ·cos(p, φ_b))·φ_b`.
pub fn adapt_teen(state: &ModelState, new: &Dataset, base_classes: &[usize], tau: f64, alpha: f64) -> Result<ModelState> {
    Method::Teen { tau, alpha }.validate()?;
    if base_classes.is_empty() {
        return Err(CoreError::Empty("base classes"));
    }
    let base: Vec<(usize, Vec<f64>)> = base_classes
        .iter()
        .map(|k| {
            let t = state.phi.get(k).ok_or(CoreError::UnknownClass(*k))?;
            Ok((*k, t.data().iter().map(|&v| v as f64).collect()))
        })
        .collect::<Result<_>>()?;
    let mut out = adapt_protonet(state, new)?;
    for k in new.classes() {
        let p: Vec<f64> = out.phi[&k].data().iter().map(|&v| v as f64).collect();
        let sims: Vec<f64> = base.iter().map(|(_, b)| tau * cosine(&p, b)).collect();
        let m = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut calibrated: Vec<f64> = p.iter().map(|v| alpha * v).collect();
        for ((_, b), w) in base.iter().zip(&e) {
            for (c, bv) in calibrated.iter_mut().zip(b) {
                *c += (1.0 - alpha) * (w / z) * bv;
            }
        }
        out.phi.insert(k, Tensor::vector(calibrated.into_iter().map(|v| v as f32).collect()));
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::model::NORM_GUARD);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::model::NORM_GUARD);
    dot / (na * nb)
}

/// Finetuning with stored real samples in place of inverted ones.
pub fn adapt_real_replay(
    state: &ModelState,
    stored: &Dataset,
    new: &Dataset,
    config: &FinetuneConfig,
) -> Result<(ModelState, FinetuneLog)> {
    finetune_session(state, stored, new, config)
}

// ---------------------------------------------------------------------------
// session loop

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayPolicy {
    /// Each session's anchors are inverted once, with the model that ended
    /// that session, and the samples are kept.
    Accumulate,
    /// Every session re-inverts the whole anchor memory with the current
    /// model.
    ReinvertAll,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FscilConfig {
    pub finetune: FinetuneConfig,
    pub inversion: InversionConfig,
    pub base_anchors: SelectionStrategy,
    pub base_anchors_per_class: usize,
    pub session_anchors: SelectionStrategy,
    pub session_anchors_per_class: usize,
    pub replay_policy: ReplayPolicy,
    pub real_per_class: usize,
}

impl FscilConfig {
    pub fn validate(&self) -> Result<()> {
        self.finetune.validate()?;
        self.inversion.validate()?;
        self.base_anchors.validate()?;
        self.session_anchors.validate()?;
        if self.base_anchors_per_class == 0 || self.session_anchors_per_class == 0 || self.real_per_class == 0 {
            return Err(CoreError::InvalidConfig("per-class counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// What the base session leaves behind, shared read-only by every trial.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseMemory {
    pub base_classes: Vec<usize>,
    pub anchors: AnchorSet,
    /// Anchor inversions with the base model.
    pub replay: Option<ReplaySet>,
    pub real: Option<Dataset>,
    pub deep_dream: Option<ReplaySet>,
    pub deep_inv: Option<ReplaySet>,
}

fn label_config(mode: LabelMode, inversion: &InversionConfig, seed: u64) -> LabelInversionConfig {
    let mut c = LabelInversionConfig::new(mode, inversion);
    c.seed = seed;
    c
}

/// Anchors of the base classes plus whatever replay material `methods`
/// need. Everything is derived from `seed`.
pub fn prepare_base_memory(
    state: &ModelState,
    base_train: &Dataset,
    methods: &[Method],
    config: &FscilConfig,
    seed: u64,
) -> Result<BaseMemory> {
    config.validate()?;
    let anchors = select_base_anchors(state, base_train, config, seed)?;
    build_base_memory(state, base_train, anchors, methods, config, seed)
}

/// The base anchor store as `prepare_base_memory` selects it.
pub fn select_base_anchors(state: &ModelState, base_train: &Dataset, config: &FscilConfig, seed: u64) -> Result<AnchorSet> {
    let features = project_features(state, base_train, 0)?;
    select_anchors(
        &features,
        &config.base_anchors,
        config.base_anchors_per_class,
        seed::derive(seed, stream::ANCHORS),
    )
}

/// Replay material around an existing base anchor store.
pub fn build_base_memory(
    state: &ModelState,
    base_train: &Dataset,
    anchors: AnchorSet,
    methods: &[Method],
    config: &FscilConfig,
    seed: u64,
) -> Result<BaseMemory> {
    config.validate()?;
    let base_classes = base_train.classes();
    if anchors.dim != state.feature_dim() {
        return Err(CoreError::Shape {
            what: "base anchors",
            expected: vec![state.feature_dim()],
            got: vec![anchors.dim],
        });
    }
    if anchors.classes() != base_classes {
        return Err(CoreError::InvalidConfig(format!(
            "anchor store covers classes {:?}, base session has {:?}",
            anchors.classes(),
            base_classes
        )));
    }
    let mut memory = BaseMemory {
        base_classes: base_classes.clone(),
        anchors,
        replay: None,
        real: None,
        deep_dream: None,
        deep_inv: None,
    };
    let inv_seed = seed::derive(seed, stream::INVERSION);
    if methods.contains(&Method::AnchorInv) {
        let cfg = InversionConfig {
            seed: inv_seed,
            ..config.inversion.clone()
        };
        let targets = cycle_anchors(&memory.anchors, config.base_anchors_per_class);
        memory.replay = Some(invert_set(state, &targets, &cfg)?);
    }
    if methods.contains(&Method::RealReplay) {
        let per = base_classes
            .iter()
            .map(|&k| base_train.count(k))
            .min()
            .unwrap_or(0)
            .min(config.real_per_class);
        memory.real = Some(sample_few_shot(base_train, per, seed::derive(seed, stream::REAL_MEMORY))?);
    }
    let counts: Vec<(usize, usize)> = base_classes.iter().map(|&k| (k, config.base_anchors_per_class)).collect();
    let label_seed = seed::derive(seed, stream::LABEL_INVERSION);
    for (method, mode) in [
        (Method::DeepDreamReplay, LabelMode::DeepDream),
        (Method::DeepInvReplay, LabelMode::DeepInv),
    ] {
        if methods.contains(&method) {
            let r = label_space_replay(state, &counts, 0, &label_config(mode, &config.inversion, label_seed))?;
            match mode {
                LabelMode::DeepDream => memory.deep_dream = Some(r),
                LabelMode::DeepInv => memory.deep_inv = Some(r),
            }
        }
    }
    Ok(memory)
}

/// Repeats each class's anchors in order until the class has `per_class`
/// entries, so a few centroids still yield `per_class` replay samples.
/// Classes that already have at least `per_class` anchors are unchanged.
pub fn cycle_anchors(set: &AnchorSet, per_class: usize) -> AnchorSet {
    let mut anchors = Vec::new();
    for k in set.classes() {
        let own: Vec<_> = set.anchors.iter().filter(|a| a.class == k).collect();
        let n = own.len().max(per_class);
        anchors.extend(own.iter().cycle().take(n).map(|a| (*a).clone()));
    }
    AnchorSet {
        anchors,
        ..set.clone()
    }
}

/// Hands out incremental sessions strictly in order and by value, so data
/// of an earlier session cannot be read again. Records every hand-out.
#[derive(Debug)]
pub struct SessionFeed {
    pending: VecDeque<Dataset>,
    served: Vec<usize>,
}

impl SessionFeed {
    pub fn new(sessions: Vec<Dataset>) -> Self {
        Self {
            pending: sessions.into(),
            served: Vec::new(),
        }
    }

    /// Next `(session index, training set)`, indices starting at 1.
    pub fn next_session(&mut self) -> Option<(usize, Dataset)> {
        let d = self.pending.pop_front()?;
        let t = self.served.len() + 1;
        self.served.push(t);
        Some((t, d))
    }

    pub fn served(&self) -> &[usize] {
        &self.served
    }
}

#[derive(Clone, Debug)]
pub struct FscilRun {
    /// Base model first, then one state per incremental session.
    pub states: Vec<ModelState>,
    /// Anchor memory after the last session (anchor-based methods).
    pub anchors: AnchorSet,
    /// Session indices in the order their data was read.
    pub access_log: Vec<usize>,
    /// Per-session finetuning losses (empty for prototype methods).
    pub logs: Vec<FinetuneLog>,
}

fn missing(what: &'static str) -> CoreError {
    CoreError::InvalidConfig(format!("base memory lacks {what}"))
}

/// Adapts a copy of `base` through every session of `feed` with `method`.
/// `seed` is the trial seed; session `t` derives its own sub-seeds from it.
pub fn run_fscil(
    base: &ModelState,
    memory: &BaseMemory,
    mut feed: SessionFeed,
    method: &Method,
    config: &FscilConfig,
    seed: u64,
) -> Result<FscilRun> {
    config.validate()?;
    method.validate()?;
    let mut states = vec![base.clone()];
    let mut anchors = memory.anchors.clone();
    let mut logs = Vec::new();
    let mut replay = match method {
        Method::AnchorInv => memory.replay.clone().ok_or_else(|| missing("anchor replay"))?,
        Method::DeepDreamReplay => memory.deep_dream.clone().ok_or_else(|| missing("deep-dream replay"))?,
        Method::DeepInvReplay => memory.deep_inv.clone().ok_or_else(|| missing("deep-inv replay"))?,
        _ => ReplaySet::default(),
    };
    let mut real = match method {
        Method::RealReplay => memory.real.clone().ok_or_else(|| missing("stored real samples"))?,
        _ => Dataset::default(),
    };
    // previous session's anchors or class counts, inverted lazily by the
    // model that ended that session
    let mut pending_anchors: Option<AnchorSet> = None;
    let mut pending_counts: Vec<(usize, usize)> = Vec::new();
    let mut prev_session = 0usize;
    while let Some((t, new)) = feed.next_session() {
        let cur = states.last().expect("base state");
        let sub = seed::derive(seed, t as u64);
        let ft = FinetuneConfig {
            seed: seed::derive(sub, stream::CLASS_INIT),
            ..config.finetune.clone()
        };
        let inv = InversionConfig {
            seed: seed::derive(sub, stream::INVERSION),
            ..config.inversion.clone()
        };
        let next = match method {
            Method::AnchorInv => {
                if let Some(a) = pending_anchors.take() {
                    match config.replay_policy {
                        ReplayPolicy::Accumulate => replay.extend(invert_set(cur, &a, &inv)?),
                        ReplayPolicy::ReinvertAll => replay = invert_set(cur, &anchors, &inv)?,
                    }
                }
                let (next, log) = finetune_session(cur, &replay.to_dataset(), &new, &ft)?;
                let features = project_features(&next, &new, t)?;
                let a = select_anchors(
                    &features,
                    &config.session_anchors,
                    config.session_anchors_per_class,
                    seed::derive(sub, stream::ANCHORS),
                )?;
                anchors.append(a.clone())?;
                pending_anchors = Some(a);
                logs.push(log);
                next
            }
            Method::DeepDreamReplay | Method::DeepInvReplay => {
                if !pending_counts.is_empty() {
                    let mode = if *method == Method::DeepDreamReplay {
                        LabelMode::DeepDream
                    } else {
                        LabelMode::DeepInv
                    };
                    let lc = label_config(mode, &config.inversion, seed::derive(sub, stream::LABEL_INVERSION));
                    replay.extend(label_space_replay(cur, &pending_counts, prev_session, &lc)?);
                }
                let (next, log) = finetune_session(cur, &replay.to_dataset(), &new, &ft)?;
                pending_counts = new.classes().into_iter().map(|k| (k, new.count(k))).collect();
                logs.push(log);
                next
            }
            Method::RealReplay => {
                let (next, log) = adapt_real_replay(cur, &real, &new, &ft)?;
                real.extend(new);
                logs.push(log);
                next
            }
            Method::FinetuneNaive => {
                let naive = FinetuneConfig { lambda: 0.0, ..ft };
                let (next, log) = finetune_session(cur, &Dataset::default(), &new, &naive)?;
                logs.push(log);
                next
            }
            Method::ProtoNet => adapt_protonet(cur, &new)?,
            Method::Teen { tau, alpha } => adapt_teen(cur, &new, &memory.base_classes, *tau, *alpha)?,
        };
        prev_session = t;
        states.push(next);
    }
    Ok(FscilRun {
        states,
        anchors,
        access_log: feed.served().to_vec(),
        logs,
    })
}
