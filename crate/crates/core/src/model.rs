//! Backbone `f_θ` (temporal conv, spatial conv, activation, average pool,
//! flatten) and the cosine classifier with temperature softmax.

use std::collections::BTreeMap;

use anchorinv_tensor::{Adam, Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::seed::{self, stream};

pub const NORM_GUARD: f64 = 1e-12;
pub const DEFAULT_TEMPERATURE: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Input channels `H`; also the spatial kernel height.
    pub channels: usize,
    /// Input time steps `W`.
    pub time_steps: usize,
    pub filters: usize,
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub activation: Activation,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            channels: 4,
            time_steps: 64,
            filters: 8,
            temporal_kernel: 9,
            temporal_stride: 1,
            pool_kernel: 8,
            pool_stride: 4,
            activation: Activation::Relu,
        }
    }

    pub fn bci() -> Self {
        Self {
            channels: 22,
            time_steps: 1000,
            filters: 40,
            temporal_kernel: 25,
            temporal_stride: 1,
            pool_kernel: 75,
            pool_stride: 15,
            activation: Activation::Relu,
        }
    }

    pub fn nhie() -> Self {
        Self {
            channels: 8,
            time_steps: 3840,
            filters: 40,
            temporal_kernel: 64,
            temporal_stride: 4,
            pool_kernel: 75,
            pool_stride: 15,
            activation: Activation::Relu,
        }
    }

    pub fn grabmyo() -> Self {
        Self {
            channels: 28,
            time_steps: 1280,
            filters: 40,
            temporal_kernel: 64,
            temporal_stride: 1,
            pool_kernel: 75,
            pool_stride: 20,
            activation: Activation::Relu,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "bci" => Some(Self::bci()),
            "nhie" => Some(Self::nhie()),
            "grabmyo" => Some(Self::grabmyo()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.channels,
            self.time_steps,
            self.filters,
            self.temporal_kernel,
            self.temporal_stride,
            self.pool_kernel,
            self.pool_stride,
        ];
        if positive.contains(&0) {
            return Err(CoreError::InvalidConfig(
                "backbone sizes, kernels and strides must be positive".into(),
            ));
        }
        if self.temporal_kernel > self.time_steps {
            return Err(CoreError::InvalidConfig(format!(
                "temporal kernel {} exceeds {} time steps",
                self.temporal_kernel, self.time_steps
            )));
        }
        if self.pool_kernel > self.temporal_out() {
            return Err(CoreError::InvalidConfig(format!(
                "pool kernel {} exceeds temporal output width {}",
                self.pool_kernel,
                self.temporal_out()
            )));
        }
        Ok(())
    }

    /// Width after the temporal convolution.
    pub fn temporal_out(&self) -> usize {
        (self.time_steps - self.temporal_kernel) / self.temporal_stride + 1
    }

    /// Width after pooling.
    pub fn pooled_out(&self) -> usize {
        (self.temporal_out() - self.pool_kernel) / self.pool_stride + 1
    }

    /// Embedding dimension `D`.
    pub fn feature_dim(&self) -> usize {
        self.filters * self.pooled_out()
    }

    pub fn input_shape(&self) -> [usize; 2] {
        [self.channels, self.time_steps]
    }
}

pub const TEMPORAL_WEIGHT: &str = "temporal.weight";
pub const TEMPORAL_BIAS: &str = "temporal.bias";
pub const SPATIAL_WEIGHT: &str = "spatial.weight";
pub const SPATIAL_BIAS: &str = "spatial.bias";
pub const PARAM_NAMES: [&str; 4] = [TEMPORAL_WEIGHT, TEMPORAL_BIAS, SPATIAL_WEIGHT, SPATIAL_BIAS];

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// `[F, 1, 1, k_t]`
    pub temporal_weight: Tensor<f32>,
    /// `[F]`
    pub temporal_bias: Tensor<f32>,
    /// `[F, F, H, 1]`
    pub spatial_weight: Tensor<f32>,
    /// `[F]`
    pub spatial_bias: Tensor<f32>,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl Backbone {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let f = config.filters;
        let bt = 1.0 / (config.temporal_kernel as f64).sqrt();
        let bs = 1.0 / ((f * config.channels) as f64).sqrt();
        Ok(Self {
            temporal_weight: uniform(&mut rng, &[f, 1, 1, config.temporal_kernel], bt),
            temporal_bias: uniform(&mut rng, &[f], bt),
            spatial_weight: uniform(&mut rng, &[f, f, config.channels, 1], bs),
            spatial_bias: uniform(&mut rng, &[f], bs),
            config,
        })
    }

    /// Expected shape of each named parameter.
    pub fn param_shape(config: &BackboneConfig, name: &str) -> Option<Vec<usize>> {
        let f = config.filters;
        match name {
            TEMPORAL_WEIGHT => Some(vec![f, 1, 1, config.temporal_kernel]),
            TEMPORAL_BIAS | SPATIAL_BIAS => Some(vec![f]),
            SPATIAL_WEIGHT => Some(vec![f, f, config.channels, 1]),
            _ => None,
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        match name {
            TEMPORAL_WEIGHT => Some(&self.temporal_weight),
            TEMPORAL_BIAS => Some(&self.temporal_bias),
            SPATIAL_WEIGHT => Some(&self.spatial_weight),
            SPATIAL_BIAS => Some(&self.spatial_bias),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        match name {
            TEMPORAL_WEIGHT => Some(&mut self.temporal_weight),
            TEMPORAL_BIAS => Some(&mut self.temporal_bias),
            SPATIAL_WEIGHT => Some(&mut self.spatial_weight),
            SPATIAL_BIAS => Some(&mut self.spatial_bias),
            _ => None,
        }
    }

    pub fn named_params(&self) -> [(&'static str, &Tensor<f32>); 4] {
        [
            (TEMPORAL_WEIGHT, &self.temporal_weight),
            (TEMPORAL_BIAS, &self.temporal_bias),
            (SPATIAL_WEIGHT, &self.spatial_weight),
            (SPATIAL_BIAS, &self.spatial_bias),
        ]
    }

    /// Puts the parameters on `g`; names for which `train` is true become
    /// gradient-tracked leaves, the rest constants.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, train: impl Fn(&str) -> bool) -> BoundBackbone {
        let mut put = |name: &str, t: &Tensor<f32>| {
            let t = t.cast::<T>();
            if train(name) {
                g.leaf(&t.with_grad())
            } else {
                g.constant(&t)
            }
        };
        BoundBackbone {
            temporal_weight: put(TEMPORAL_WEIGHT, &self.temporal_weight),
            temporal_bias: put(TEMPORAL_BIAS, &self.temporal_bias),
            spatial_weight: put(SPATIAL_WEIGHT, &self.spatial_weight),
            spatial_bias: put(SPATIAL_BIAS, &self.spatial_bias),
            config: self.config.clone(),
        }
    }

    /// Embedding of one `[H, W]` sample, computed on a throwaway graph.
    pub fn embed(&self, x: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.bind(&mut g, |_| false);
        let xv = g.constant(x);
        let h = p.embed(&mut g, xv)?;
        Ok(g.value(h).to_vec())
    }

    /// Temporal-convolution output `[F, H, W']` of one sample.
    pub fn temporal_features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.bind(&mut g, |_| false);
        let xv = g.constant(x);
        let t = p.temporal(&mut g, xv)?;
        Ok(g.tensor(t))
    }
}

/// Backbone parameters recorded on a graph.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub temporal_weight: Var,
    pub temporal_bias: Var,
    pub spatial_weight: Var,
    pub spatial_bias: Var,
    pub config: BackboneConfig,
}

impl BoundBackbone {
    pub fn var(&self, name: &str) -> Option<Var> {
        match name {
            TEMPORAL_WEIGHT => Some(self.temporal_weight),
            TEMPORAL_BIAS => Some(self.temporal_bias),
            SPATIAL_WEIGHT => Some(self.spatial_weight),
            SPATIAL_BIAS => Some(self.spatial_bias),
            _ => None,
        }
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let want = self.config.input_shape();
        let got = g.shape(x);
        let ok = got == want || got == [1, want[0], want[1]];
        if !ok {
            return Err(CoreError::Shape {
                what: "backbone input",
                expected: want.to_vec(),
                got: got.to_vec(),
            });
        }
        Ok(())
    }

    /// `[H, W]` input to the `[F, H, W']` temporal map.
    pub fn temporal<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let c = &self.config;
        let x3 = g.reshape(x, &[1, c.channels, c.time_steps])?;
        Ok(g.conv2d(
            x3,
            self.temporal_weight,
            Some(self.temporal_bias),
            (1, c.temporal_stride),
        )?)
    }

    /// Spatial conv, activation, pooling and flatten from the temporal map.
    pub fn head<T: Scalar>(&self, g: &mut Graph<T>, t: Var) -> Result<Var> {
        let c = &self.config;
        let s = g.conv2d(t, self.spatial_weight, Some(self.spatial_bias), (1, 1))?;
        let a = match c.activation {
            Activation::Relu => g.relu(s)?,
            Activation::Identity => s,
        };
        let p = g.avg_pool2d(a, (1, c.pool_kernel), (1, c.pool_stride))?;
        Ok(g.flatten(p)?)
    }

    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let t = self.temporal(g, x)?;
        self.head(g, t)
    }
}

/// Per-dimension population mean and variance of embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl FeatureStats {
    /// Two passes in sample order.
    pub fn from_features(features: &[Vec<f32>]) -> Result<Self> {
        let first = features.first().ok_or(CoreError::Empty("feature list"))?;
        let d = first.len();
        let n = features.len() as f64;
        let mut mean = vec![0.0f64; d];
        for h in features {
            for (m, &v) in mean.iter_mut().zip(h) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; d];
        for h in features {
            for ((s, &v), &m) in var.iter_mut().zip(h).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            var: var.iter().map(|&s| (s / n) as f32).collect(),
        })
    }
}

/// Backbone, per-class weights, temperature and embedding statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub backbone: Backbone,
    pub phi: BTreeMap<usize, Tensor<f32>>,
    pub temperature: f64,
    pub feature_stats: Option<FeatureStats>,
}

impl ModelState {
    pub fn new(backbone: Backbone, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            backbone,
            phi: BTreeMap::new(),
            temperature,
            feature_stats: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.config.feature_dim()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.phi.keys().copied().collect()
    }

    pub fn embed(&self, x: &Tensor<f32>) -> Result<Vec<f32>> {
        self.backbone.embed(x)
    }

    pub fn embed_all(&self, data: &Dataset) -> Result<Vec<Vec<f32>>> {
        data.iter().map(|s| self.embed(&s.x)).collect()
    }

    /// Scores per registered class, ascending class id.
    pub fn class_scores(&self, h: &[f32]) -> Result<Vec<(usize, f64)>> {
        let phi: Vec<(usize, &[f32])> = self.phi.iter().map(|(&k, t)| (k, t.data())).collect();
        class_scores(h, &phi, self.temperature)
    }

    pub fn predict(&self, h: &[f32]) -> Result<usize> {
        Ok(argmax_lowest(&self.class_scores(h)?))
    }

    /// Predicted label for every sample.
    pub fn predict_all(&self, data: &Dataset) -> Result<Vec<usize>> {
        data.iter().map(|s| self.predict(&self.embed(&s.x)?)).collect()
    }

    /// Classifier weights for `classes` on a graph: tracked leaves for the
    /// ids in `train`, constants otherwise.
    pub fn bind_classifier<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        train: impl Fn(usize) -> bool,
    ) -> Result<BoundClassifier> {
        if self.phi.is_empty() {
            return Err(CoreError::Empty("classifier"));
        }
        let mut ids = Vec::new();
        let mut raw = Vec::new();
        let mut rows = Vec::new();
        for (&k, t) in &self.phi {
            let t = t.cast::<T>();
            let v = if train(k) { g.leaf(&t.with_grad()) } else { g.constant(&t) };
            let n = g.l2_norm(v)?;
            let n = g.clamp_min(n, NORM_GUARD)?;
            rows.push(g.div(v, n)?);
            ids.push(k);
            raw.push(v);
        }
        let normed = g.stack(&rows)?;
        Ok(BoundClassifier {
            ids,
            raw,
            normed,
            temperature: self.temperature,
        })
    }
}

/// Normalised classifier matrix recorded on a graph.
#[derive(Clone, Debug)]
pub struct BoundClassifier {
    pub ids: Vec<usize>,
    /// Un-normalised `φ_k` leaves, same order as `ids`.
    pub raw: Vec<Var>,
    /// `[K, D]`, unit rows.
    pub normed: Var,
    pub temperature: f64,
}

impl BoundClassifier {
    pub fn position(&self, class: usize) -> Result<usize> {
        self.ids
            .iter()
            .position(|&k| k == class)
            .ok_or(CoreError::UnknownClass(class))
    }

    /// Cosine similarities `[K]` of feature node `h` to every class.
    pub fn cosines<T: Scalar>(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let n = g.l2_norm(h)?;
        let n = g.clamp_min(n, NORM_GUARD)?;
        let u = g.div(h, n)?;
        Ok(g.matmul(self.normed, u)?)
    }

    /// `-log s(h, φ_label)` with the temperature softmax.
    pub fn cross_entropy<T: Scalar>(&self, g: &mut Graph<T>, h: Var, label: usize) -> Result<Var> {
        let pos = self.position(label)?;
        let cos = self.cosines(g, h)?;
        let z = g.scale(cos, 1.0 / self.temperature)?;
        // constant shift: value only, no gradient path
        let shift = g
            .value(z)
            .iter()
            .map(|v| v.to_f64_lossy())
            .fold(f64::NEG_INFINITY, f64::max);
        let zs = g.add_scalar(z, -shift)?;
        let e = g.exp(zs)?;
        let s = g.sum(e)?;
        let lse = g.log(s)?;
        let mut onehot = vec![T::zero(); self.ids.len()];
        onehot[pos] = T::one();
        let sel = g.constant(&Tensor::vector(onehot));
        let picked = g.mul(zs, sel)?;
        let zy = g.sum(picked)?;
        Ok(g.sub(lse, zy)?)
    }
}

/// `−(h·w)/(max(‖h‖, ε) max(‖w‖, ε))`.
pub fn cosine_distance(h: &[f32], w: &[f32]) -> Result<f64> {
    if h.len() != w.len() {
        return Err(CoreError::Shape {
            what: "cosine distance",
            expected: vec![h.len()],
            got: vec![w.len()],
        });
    }
    let mut dot = 0.0f64;
    let mut nh = 0.0f64;
    let mut nw = 0.0f64;
    for (&a, &b) in h.iter().zip(w) {
        dot += a as f64 * b as f64;
        nh += (a as f64).powi(2);
        nw += (b as f64).powi(2);
    }
    Ok(-dot / (nh.sqrt().max(NORM_GUARD) * nw.sqrt().max(NORM_GUARD)))
}

/// Temperature softmax over `−d(h, φ_k)/T`, returned in the order of `phi`.
pub fn class_scores(h: &[f32], phi: &[(usize, &[f32])], temperature: f64) -> Result<Vec<(usize, f64)>> {
    if phi.is_empty() {
        return Err(CoreError::Empty("classifier"));
    }
    let z: Vec<f64> = phi
        .iter()
        .map(|(_, w)| cosine_distance(h, w).map(|d| -d / temperature))
        .collect::<Result<_>>()?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(phi.iter().zip(e).map(|((k, _), v)| (*k, v / total)).collect())
}

/// Arg-max over `(class, score)` pairs; exact ties go to the lowest class id.
pub fn argmax_lowest(scores: &[(usize, f64)]) -> usize {
    let mut best = scores[0];
    for &(k, s) in &scores[1..] {
        if s > best.1 || (s == best.1 && k < best.0) {
            best = (k, s);
        }
    }
    best.0
}

/// Mean embedding per class, accumulated left to right in sample order.
pub fn class_means(features: &[Vec<f32>], labels: &[usize], class: usize) -> Result<Vec<f32>> {
    let mut sum: Option<Vec<f32>> = None;
    let mut n = 0usize;
    for (h, &y) in features.iter().zip(labels) {
        if y != class {
            continue;
        }
        n += 1;
        match &mut sum {
            None => sum = Some(h.clone()),
            Some(s) => s.iter_mut().zip(h).for_each(|(a, &b)| *a += b),
        }
    }
    let mut s = sum.ok_or(CoreError::InsufficientSamples { class, have: 0, need: 1 })?;
    let inv = n as f32;
    s.iter_mut().for_each(|v| *v /= inv);
    Ok(s)
}

/// Replaces `φ_k` by the mean embedding of class `k` in `data` for every
/// class in `classes`; other entries are untouched.
pub fn compute_prototypes(state: &mut ModelState, data: &Dataset, classes: &[usize]) -> Result<()> {
    if classes.is_empty() {
        return Err(CoreError::Empty("class subset"));
    }
    let subset = data.restrict(classes);
    let features = state.embed_all(&subset)?;
    let labels: Vec<usize> = subset.iter().map(|s| s.label).collect();
    for &k in classes {
        let p = class_means(&features, &labels, k)?;
        state.phi.insert(k, Tensor::vector(p));
    }
    Ok(())
}

pub fn checksum(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn standard_normal_vector(dim: usize, seed: u64) -> Tensor<f32> {
    let mut rng = seed::rng(seed);
    Tensor::vector(
        (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Weight each sample by `N / (K · n_class)`.
    pub class_weighted: bool,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 5e-3,
            batch_size: None,
            class_weighted: false,
            temperature: DEFAULT_TEMPERATURE,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Per-sample loss weights: `N / (K · n_c)` when weighted, else 1.
pub fn sample_weights(labels: &[usize], weighted: bool) -> Vec<f64> {
    if !weighted {
        return vec![1.0; labels.len()];
    }
    let mut counts = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    let n = labels.len() as f64;
    let k = counts.len() as f64;
    labels.iter().map(|y| n / (k * counts[y] as f64)).collect()
}

/// `Σ w_i · ce_i / Σ w_i` over a batch, recorded on `g`.
pub fn weighted_mean<T: Scalar>(g: &mut Graph<T>, losses: &[Var], weights: &[f64]) -> Result<Var> {
    let stacked = g.stack(losses)?;
    let flat = g.flatten(stacked)?;
    let w: Vec<T> = weights.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let wv = g.constant(&Tensor::vector(w));
    let prod = g.mul(flat, wv)?;
    let total = g.sum(prod)?;
    let denom: f64 = weights.iter().sum();
    Ok(g.scale(total, 1.0 / denom)?)
}

/// Cross-entropy of one batch against a full-trainable model. Returns the
/// loss node plus the bound backbone and classifier.
fn base_batch_loss(
    g: &mut Graph<f32>,
    state: &ModelState,
    data: &Dataset,
    idx: &[usize],
    weights: &[f64],
) -> Result<(Var, BoundBackbone, BoundClassifier)> {
    let p = state.backbone.bind(g, |_| true);
    let c = state.bind_classifier(g, |_| true)?;
    let mut losses = Vec::with_capacity(idx.len());
    let mut w = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &data.samples[i];
        let x = g.constant(&s.x);
        let h = p.embed(g, x)?;
        losses.push(c.cross_entropy(g, h, s.label)?);
        w.push(weights[i]);
    }
    let loss = weighted_mean(g, &losses, &w)?;
    Ok((loss, p, c))
}

/// Loss of the initial (untrained) model on `data`, with or without class
/// weighting. Exposed for the weighting identity check.
pub fn base_loss(state: &ModelState, data: &Dataset, class_weighted: bool) -> Result<f64> {
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let weights = sample_weights(&labels, class_weighted);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut g = Graph::new();
    let (loss, _, _) = base_batch_loss(&mut g, state, data, &idx, &weights)?;
    Ok(g.scalar(loss) as f64)
}

/// Untrained model for the classes of `data`: initialised backbone and
/// standard-normal `φ`.
pub fn init_model(config: &BackboneConfig, data: &Dataset, tc: &BaseTrainConfig) -> Result<ModelState> {
    let backbone = Backbone::init(config.clone(), seed::derive(tc.seed, stream::BASE_INIT))?;
    let mut state = ModelState::new(backbone, tc.temperature)?;
    let d = config.feature_dim();
    for k in data.classes() {
        let s = seed::derive(seed::derive(tc.seed, stream::CLASS_INIT), k as u64);
        state.phi.insert(k, standard_normal_vector(d, s));
    }
    Ok(state)
}

/// Trains `θ` and `φ` jointly by cross-entropy, then replaces `φ` by class
/// prototypes and records embedding statistics.
pub fn train_base(
    config: &BackboneConfig,
    data: &Dataset,
    tc: &BaseTrainConfig,
) -> Result<(ModelState, TrainLog)> {
    if data.is_empty() {
        return Err(CoreError::Empty("base training set"));
    }
    let classes = data.classes();
    if classes.len() < 2 {
        return Err(CoreError::InvalidConfig("base training needs at least two classes".into()));
    }
    data.check_shape(config.channels, config.time_steps)?;
    let mut state = init_model(config, data, tc)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let weights = sample_weights(&labels, tc.class_weighted);
    let mut adam = Adam::<f32>::new(tc.lr);
    let mut rng = seed::rng(seed::derive(tc.seed, stream::BASE_SHUFFLE));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = tc.batch_size.unwrap_or(data.len()).clamp(1, data.len());
    let mut log = TrainLog::default();
    for epoch in 0..tc.epochs {
        if batch < data.len() {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let mut g = Graph::new();
            let (loss, p, c) = base_batch_loss(&mut g, &state, data, chunk, &weights)?;
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(CoreError::Diverged { stage: "base training", step: epoch });
            }
            total += value;
            batches += 1;
            let grads = g.backward(loss)?;
            let mut vars: Vec<Var> = PARAM_NAMES.iter().map(|n| p.var(n).unwrap()).collect();
            vars.extend(&c.raw);
            let gs: Vec<Tensor<f32>> = vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect();
            let bb = &mut state.backbone;
            let mut params: Vec<&mut Tensor<f32>> = vec![
                &mut bb.temporal_weight,
                &mut bb.temporal_bias,
                &mut bb.spatial_weight,
                &mut bb.spatial_bias,
            ];
            params.extend(state.phi.values_mut());
            let grefs: Vec<&Tensor<f32>> = gs.iter().collect();
            adam.step(&mut params, &grefs)?;
        }
        log.epoch_loss.push(total / batches as f64);
    }
    compute_prototypes(&mut state, data, &classes)?;
    let features = state.embed_all(data)?;
    state.feature_stats = Some(FeatureStats::from_features(&features)?);
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_dimensions() {
        assert_eq!(BackboneConfig::desk().feature_dim(), 104);
        assert_eq!(BackboneConfig::bci().feature_dim(), 2440);
        assert_eq!(BackboneConfig::nhie().feature_dim(), 2360);
        assert_eq!(BackboneConfig::grabmyo().feature_dim(), 2320);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_distance(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), -1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let d = cosine_distance(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((d + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_lowest(&[(0, 0.2), (1, 0.7), (2, 0.1)]), 1);
        assert_eq!(argmax_lowest(&[(5, 0.4), (2, 0.4), (7, 0.2)]), 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = BackboneConfig::desk();
        c.pool_kernel = 100;
        assert!(c.validate().is_err());
        c = BackboneConfig::desk();
        c.temporal_stride = 0;
        assert!(c.validate().is_err());
        assert!(BackboneConfig::preset("nope").is_none());
    }
}
