//! Replay synthesis by gradient descent on inputs: anchor-guided inversion
//! (MAE between embedding and anchor) and label-space inversion with
//! optional image-prior style regularisers.

use std::f64::consts::PI;

use anchorinv_tensor::{Adam, Graph, Scalar, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::data::{Dataset, Sample};
use crate::error::{CoreError, Result};
use crate::model::{weighted_mean, BoundBackbone, FeatureStats, ModelState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    StandardNormal,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => base * 0.5 * (1.0 + (PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub init: InitMode,
    pub lr: f64,
    pub iterations: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            init: InitMode::StandardNormal,
            lr: 1e-2,
            iterations: 4000,
            schedule: LrSchedule::Cosine,
            seed: 5,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.lr > 0.0) {
            return Err(CoreError::InvalidConfig(
                "inversion needs iterations >= 1 and a positive learning rate".into(),
            ));
        }
        Ok(())
    }
}

pub fn init_input(shape: [usize; 2], mode: InitMode, seed: u64) -> Tensor<f32> {
    match mode {
        InitMode::Zeros => Tensor::zeros(&shape),
        InitMode::StandardNormal => {
            crate::model::standard_normal_vector(shape[0] * shape[1], seed)
                .reshape(shape.to_vec())
                .expect("same element count")
        }
    }
}

/// Result of one anchor inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionOutcome {
    /// Lowest-loss iterate.
    pub x: Tensor<f32>,
    pub initial_mae: f64,
    pub final_mae: f64,
    /// MAE of every evaluated iterate, including the last.
    pub history: Vec<f64>,
}

fn mae_node<T: Scalar>(g: &mut Graph<T>, h: Var, target: Var) -> Result<Var> {
    let d = g.sub(h, target)?;
    let a = g.abs(d)?;
    Ok(g.mean(a)?)
}

fn check_dim(state: &ModelState, len: usize) -> Result<()> {
    let d = state.feature_dim();
    if len != d {
        return Err(CoreError::Shape {
            what: "anchor",
            expected: vec![d],
            got: vec![len],
        });
    }
    Ok(())
}

/// Adam on the input to minimise `mean |f(x) - anchor|`. The backbone is
/// read-only; the best iterate is returned so the final loss never exceeds
/// the initial one.
pub fn invert_anchor(state: &ModelState, anchor: &[f32], config: &InversionConfig) -> Result<InversionOutcome> {
    config.validate()?;
    check_dim(state, anchor.len())?;
    let shape = state.config().input_shape();
    let mut x = init_input(shape, config.init, config.seed);
    let target = Tensor::vector(anchor.to_vec());
    let mut adam = Adam::<f32>::new(config.lr);
    let mut history = Vec::with_capacity(config.iterations + 1);
    let mut best: Option<(f64, Tensor<f32>)> = None;
    for step in 0..=config.iterations {
        let mut g = Graph::<f32>::new();
        let p = state.backbone.bind(&mut g, |_| false);
        let xv = g.leaf(&x.clone().with_grad());
        let tv = g.constant(&target);
        let h = p.embed(&mut g, xv)?;
        let loss = mae_node(&mut g, h, tv)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(CoreError::Diverged { stage: "anchor inversion", step });
        }
        history.push(value);
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, x.clone()));
        }
        if step == config.iterations {
            break;
        }
        let grads = g.backward(loss)?;
        let gx = grads.get(xv).expect("input is tracked").clone();
        adam.lr = config.schedule.rate(config.lr, step, config.iterations);
        adam.step(&mut [&mut x], &[&gx])?;
    }
    let (final_mae, x) = best.expect("at least one evaluation");
    Ok(InversionOutcome {
        x,
        initial_mae: history[0],
        final_mae,
        history,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplaySample {
    pub x: Tensor<f32>,
    pub class: usize,
    pub session: usize,
    /// Feature MAE between the sample's embedding and its target.
    pub mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplaySet {
    pub samples: Vec<ReplaySample>,
}

impl ReplaySet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extend(&mut self, other: ReplaySet) {
        self.samples.extend(other.samples);
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset::new(
            self.samples
                .iter()
                .enumerate()
                .map(|(i, r)| Sample {
                    x: r.x.clone(),
                    label: r.class,
                    session: r.session,
                    id: i as u64,
                })
                .collect(),
        )
    }

    pub fn maes(&self) -> Vec<f64> {
        self.samples.iter().map(|r| r.mae).collect()
    }
}

/// One replay sample per anchor; anchor `j` uses seed `config.seed + j`.
/// Anchors are inverted in parallel; the output keeps anchor order.
pub fn invert_set(state: &ModelState, anchors: &AnchorSet, config: &InversionConfig) -> Result<ReplaySet> {
    if anchors.is_empty() {
        return Ok(ReplaySet::default());
    }
    check_dim(state, anchors.dim)?;
    let samples = anchors
        .anchors
        .par_iter()
        .enumerate()
        .map(|(j, a)| {
            let cfg = InversionConfig {
                seed: config.seed.wrapping_add(j as u64),
                ..config.clone()
            };
            let out = invert_anchor(state, &a.feature, &cfg)?;
            Ok(ReplaySample {
                x: out.x,
                class: a.class,
                session: a.session,
                mae: out.final_mae,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplaySet { samples })
}

// ---------------------------------------------------------------------------
// label-space inversion

/// Sum over channels and steps of `|x[c, t+1] - x[c, t]|`.
pub fn total_variation(x: &Tensor<f32>) -> Result<f64> {
    let (h, w) = match x.shape() {
        &[h, w] => (h, w),
        s => {
            return Err(CoreError::Shape {
                what: "total variation input",
                expected: vec![0, 0],
                got: s.to_vec(),
            })
        }
    };
    if w < 2 {
        return Err(CoreError::InvalidConfig("total variation needs W >= 2".into()));
    }
    let d = x.data();
    let mut tv = 0.0f64;
    for c in 0..h {
        for t in 0..w - 1 {
            tv += (d[c * w + t + 1] as f64 - d[c * w + t] as f64).abs();
        }
    }
    Ok(tv)
}

fn tv_node<T: Scalar>(g: &mut Graph<T>, x: Var, diff: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x3 = g.reshape(x, &[1, s[0], s[1]])?;
    let d = g.conv2d(x3, diff, None, (1, 1))?;
    let a = g.abs(d)?;
    Ok(g.sum(a)?)
}

fn stat_penalty_node<T: Scalar>(g: &mut Graph<T>, hs: &[Var], stats: &FeatureStats) -> Result<Var> {
    let stacked = g.stack(hs)?;
    let mean = g.mean_axis0(stacked)?;
    let mut sq = Vec::with_capacity(hs.len());
    for &h in hs {
        let d = g.sub(h, mean)?;
        sq.push(g.mul(d, d)?);
    }
    let sqs = g.stack(&sq)?;
    let var = g.mean_axis0(sqs)?;
    let to = |v: &[f32]| Tensor::vector(v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect());
    let mu = g.constant(&to(&stats.mean));
    let sigma2 = g.constant(&to(&stats.var));
    let dm = g.sub(mean, mu)?;
    let dm2 = g.mul(dm, dm)?;
    let pm = g.sum(dm2)?;
    let dv = g.sub(var, sigma2)?;
    let dv2 = g.mul(dv, dv)?;
    let pv = g.sum(dv2)?;
    Ok(g.add(pm, pv)?)
}

/// `‖mean(f(x̂)) − μ‖² + ‖var(f(x̂)) − σ²‖²` over a batch, with population
/// variance.
pub fn feature_stat_penalty(state: &ModelState, batch: &[Tensor<f32>]) -> Result<f64> {
    let stats = state.feature_stats.as_ref().ok_or(CoreError::MissingFeatureStats)?;
    if batch.is_empty() {
        return Err(CoreError::Empty("inversion batch"));
    }
    let mut g = Graph::<f64>::new();
    let p = state.backbone.bind(&mut g, |_| false);
    let mut hs = Vec::new();
    for x in batch {
        let xv = g.constant(&x.cast());
        hs.push(p.embed(&mut g, xv)?);
    }
    let out = stat_penalty_node(&mut g, &hs, stats)?;
    Ok(g.scalar(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Cross-entropy only.
    DeepDream,
    /// Cross-entropy plus l2, total-variation and feature-statistics terms.
    DeepInv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelInversionConfig {
    pub mode: LabelMode,
    pub ce_weight: f64,
    pub l2_weight: f64,
    pub tv_weight: f64,
    pub feature_weight: f64,
    /// Rescale each regulariser weight at iteration 0 so its term matches
    /// the cross-entropy term.
    pub auto_balance: bool,
    pub init: InitMode,
    pub iterations: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl LabelInversionConfig {
    pub fn new(mode: LabelMode, inversion: &InversionConfig) -> Self {
        Self {
            mode,
            ce_weight: 1.0,
            l2_weight: 1.0,
            tv_weight: 1.0,
            feature_weight: 1.0,
            auto_balance: true,
            init: inversion.init,
            iterations: inversion.iterations,
            lr: inversion.lr,
            schedule: inversion.schedule,
            seed: inversion.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.ce_weight, self.l2_weight, self.tv_weight, self.feature_weight];
        if ws.iter().any(|w| !(*w >= 0.0)) {
            return Err(CoreError::InvalidConfig("label inversion weights must be >= 0".into()));
        }
        if self.iterations == 0 || !(self.lr > 0.0) {
            return Err(CoreError::InvalidConfig(
                "label inversion needs iterations >= 1 and a positive learning rate".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelInversionOutcome {
    pub samples: Vec<Tensor<f32>>,
    pub targets: Vec<usize>,
    pub final_loss: f64,
    /// Regulariser weights in effect after balancing: l2, tv, feature.
    pub weights: [f64; 3],
    pub history: Vec<f64>,
}

struct LabelTerms {
    ce: Var,
    l2: Var,
    tv: Var,
    feat: Option<Var>,
}

fn label_terms(
    g: &mut Graph<f32>,
    state: &ModelState,
    p: &BoundBackbone,
    xs: &[Var],
    targets: &[usize],
    with_feat: bool,
) -> Result<LabelTerms> {
    let c = state.bind_classifier(g, |_| false)?;
    let diff = g.constant(&Tensor::new(vec![1, 1, 1, 2], vec![-1.0f32, 1.0])?);
    let mut ces = Vec::new();
    let mut l2s = Vec::new();
    let mut tvs = Vec::new();
    let mut hs = Vec::new();
    for (&x, &y) in xs.iter().zip(targets) {
        let h = p.embed(g, x)?;
        ces.push(c.cross_entropy(g, h, y)?);
        let sq = g.mul(x, x)?;
        l2s.push(g.sum(sq)?);
        tvs.push(tv_node(g, x, diff)?);
        hs.push(h);
    }
    let ones = vec![1.0; xs.len()];
    let ce = weighted_mean(g, &ces, &ones)?;
    let l2 = weighted_mean(g, &l2s, &ones)?;
    let tv = weighted_mean(g, &tvs, &ones)?;
    let feat = if with_feat {
        let stats = state.feature_stats.as_ref().ok_or(CoreError::MissingFeatureStats)?;
        Some(stat_penalty_node(g, &hs, stats)?)
    } else {
        None
    };
    Ok(LabelTerms { ce, l2, tv, feat })
}

/// Jointly inverts one sample per entry of `targets` toward its label.
pub fn label_space_invert_batch(
    state: &ModelState,
    targets: &[usize],
    config: &LabelInversionConfig,
) -> Result<LabelInversionOutcome> {
    config.validate()?;
    if targets.is_empty() {
        return Ok(LabelInversionOutcome {
            samples: Vec::new(),
            targets: Vec::new(),
            final_loss: 0.0,
            weights: [0.0; 3],
            history: Vec::new(),
        });
    }
    for &y in targets {
        if !state.phi.contains_key(&y) {
            return Err(CoreError::UnknownClass(y));
        }
    }
    let deep_inv = config.mode == LabelMode::DeepInv;
    if deep_inv && state.feature_stats.is_none() {
        return Err(CoreError::MissingFeatureStats);
    }
    let shape = state.config().input_shape();
    let mut xs: Vec<Tensor<f32>> = (0..targets.len())
        .map(|j| init_input(shape, config.init, config.seed.wrapping_add(j as u64)))
        .collect();
    let mut weights = if deep_inv {
        [config.l2_weight, config.tv_weight, config.feature_weight]
    } else {
        [0.0; 3]
    };
    let mut adam = Adam::<f32>::new(config.lr);
    let mut history = Vec::with_capacity(config.iterations + 1);
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;
    for step in 0..=config.iterations {
        let mut g = Graph::<f32>::new();
        let p = state.backbone.bind(&mut g, |_| false);
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(&x.clone().with_grad())).collect();
        let t = label_terms(&mut g, state, &p, &vars, targets, deep_inv)?;
        if step == 0 && deep_inv && config.auto_balance {
            let ce0 = g.scalar(t.ce) as f64 * config.ce_weight;
            let terms = [
                g.scalar(t.l2) as f64,
                g.scalar(t.tv) as f64,
                t.feat.map(|f| g.scalar(f) as f64).unwrap_or(0.0),
            ];
            for (w, term) in weights.iter_mut().zip(terms) {
                if term > 0.0 && *w > 0.0 {
                    *w *= ce0 / term;
                }
            }
        }
        let mut loss = g.scale(t.ce, config.ce_weight)?;
        let regs = [Some(t.l2), Some(t.tv), t.feat];
        for (w, term) in weights.iter().zip(regs) {
            if let (Some(term), true) = (term, *w > 0.0) {
                let s = g.scale(term, *w)?;
                loss = g.add(loss, s)?;
            }
        }
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(CoreError::Diverged { stage: "label inversion", step });
        }
        history.push(value);
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, xs.clone()));
        }
        if step == config.iterations {
            break;
        }
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor<f32>> = vars.iter().map(|v| grads.get(*v).expect("tracked").clone()).collect();
        adam.lr = config.schedule.rate(config.lr, step, config.iterations);
        let mut params: Vec<&mut Tensor<f32>> = xs.iter_mut().collect();
        let grefs: Vec<&Tensor<f32>> = gs.iter().collect();
        adam.step(&mut params, &grefs)?;
    }
    let (final_loss, samples) = best.expect("at least one evaluation");
    Ok(LabelInversionOutcome {
        samples,
        targets: targets.to_vec(),
        final_loss,
        weights,
        history,
    })
}

/// Single-target label-space inversion.
pub fn label_space_invert(
    state: &ModelState,
    target: usize,
    config: &LabelInversionConfig,
) -> Result<(Tensor<f32>, f64)> {
    let out = label_space_invert_batch(state, &[target], config)?;
    Ok((out.samples.into_iter().next().expect("one sample"), out.final_loss))
}

/// Label-space replay for every class of `counts`: `(class, how many)`.
pub fn label_space_replay(
    state: &ModelState,
    counts: &[(usize, usize)],
    session: usize,
    config: &LabelInversionConfig,
) -> Result<ReplaySet> {
    let targets: Vec<usize> = counts
        .iter()
        .flat_map(|&(k, n)| std::iter::repeat_n(k, n))
        .collect();
    let out = label_space_invert_batch(state, &targets, config)?;
    Ok(ReplaySet {
        samples: out
            .samples
            .into_iter()
            .zip(out.targets)
            .map(|(x, class)| ReplaySample {
                x,
                class,
                session,
                mae: f64::NAN,
            })
            .collect(),
    })
}

/// Mean absolute difference between the embedding of each replay sample
/// and a reference feature (for audits against real samples).
pub fn feature_mae(state: &ModelState, x: &Tensor<f32>, reference: &[f32]) -> Result<f64> {
    check_dim(state, reference.len())?;
    let h = state.embed(x)?;
    Ok(h.iter()
        .zip(reference)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum::<f64>()
        / h.len() as f64)
}
