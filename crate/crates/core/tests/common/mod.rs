#![allow(dead_code)]

use std::sync::OnceLock;

use anchorinv_core::data::{
    split_sessions, synth_generate, zscore_apply_all, zscore_fit, Dataset, Sample, SessionSplit, SynthSpec,
};
use anchorinv_core::model::{train_base, Activation, Backbone, BackboneConfig, BaseTrainConfig, ModelState};
use anchorinv_tensor::Tensor;

pub struct Desk {
    pub split: SessionSplit,
    pub test: Dataset,
    pub state: ModelState,
}

/// The 4-class desk scenario with a trained base model, built once per
/// test binary.
pub fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let spec = SynthSpec::family(4, 64, 4, 60, 50, 0.5, 5);
        let (train, test) = synth_generate(&spec).unwrap();
        let stats = zscore_fit(&train).unwrap();
        let train = zscore_apply_all(&train, &stats).unwrap();
        let test = zscore_apply_all(&test, &stats).unwrap();
        let split = split_sessions(&train, &[0, 1], 1, 10).unwrap();
        let tc = BaseTrainConfig {
            epochs: 100,
            lr: 5e-3,
            ..Default::default()
        };
        let (state, _) = train_base(&BackboneConfig::desk(), &split.base, &tc).unwrap();
        Desk { split, test, state }
    })
}

pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        channels: 2,
        time_steps: 16,
        filters: 3,
        temporal_kernel: 3,
        temporal_stride: 1,
        pool_kernel: 4,
        pool_stride: 2,
        activation: Activation::Relu,
    }
}

/// Untrained state over `classes` with seeded random classifier entries.
pub fn tiny_state(classes: &[usize], seed: u64) -> ModelState {
    let cfg = tiny_config();
    let d = cfg.feature_dim();
    let mut state = ModelState::new(Backbone::init(cfg, seed).unwrap(), 16.0).unwrap();
    for &k in classes {
        state
            .phi
            .insert(k, anchorinv_core::model::standard_normal_vector(d, seed ^ (k as u64 + 1)));
    }
    state
}

/// Deterministic pseudo-random samples for `classes`, `n` each, shaped for
/// `tiny_config`.
pub fn tiny_data(classes: &[usize], n: usize, seed: u64) -> Dataset {
    let cfg = tiny_config();
    let mut samples = Vec::new();
    let mut s = seed;
    for &k in classes {
        for i in 0..n {
            let data = (0..cfg.channels * cfg.time_steps)
                .map(|j| {
                    s = anchorinv_core::seed::splitmix64(s);
                    let u = (s >> 11) as f64 / (1u64 << 53) as f64;
                    ((u - 0.5) * 2.0 + (k as f64) * ((j % 5) as f64 - 2.0) * 0.3) as f32
                })
                .collect();
            samples.push(Sample {
                x: Tensor::new(vec![cfg.channels, cfg.time_steps], data).unwrap(),
                label: k,
                session: 0,
                id: (k * 1000 + i) as u64,
            });
        }
    }
    Dataset::new(samples)
}

fn fixed_state(cfg: BackboneConfig, weights: impl Fn(&mut Backbone)) -> ModelState {
    let mut b = Backbone::init(cfg, 0).unwrap();
    weights(&mut b);
    ModelState::new(b, 16.0).unwrap()
}

/// Backbone computing `f(x) = x` on a `[1, n]` input.
pub fn identity_state(n: usize) -> ModelState {
    let cfg = BackboneConfig {
        channels: 1,
        time_steps: n,
        filters: 1,
        temporal_kernel: 1,
        temporal_stride: 1,
        pool_kernel: 1,
        pool_stride: 1,
        activation: Activation::Identity,
    };
    fixed_state(cfg, |b| {
        b.temporal_weight = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        b.temporal_bias = Tensor::new(vec![1], vec![0.0]).unwrap();
        b.spatial_weight = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        b.spatial_bias = Tensor::new(vec![1], vec![0.0]).unwrap();
    })
}

/// Affine backbone (identity activation) with seeded random weights:
/// 16 inputs, 6 features.
pub fn linear_state(seed: u64) -> ModelState {
    let cfg = BackboneConfig {
        channels: 2,
        time_steps: 8,
        filters: 2,
        temporal_kernel: 3,
        temporal_stride: 1,
        pool_kernel: 2,
        pool_stride: 2,
        activation: Activation::Identity,
    };
    ModelState::new(Backbone::init(cfg, seed).unwrap(), 16.0).unwrap()
}

/// Matrix `A` and offset `b` of an affine backbone, probed with unit
/// inputs: `f(x) = A x + b`.
pub fn probe_affine(state: &ModelState) -> (Vec<Vec<f64>>, Vec<f64>) {
    let [h, w] = state.config().input_shape();
    let n = h * w;
    let f = |x: Vec<f32>| -> Vec<f64> {
        let t = Tensor::new(vec![h, w], x).unwrap();
        state.embed(&t).unwrap().into_iter().map(f64::from).collect()
    };
    let b = f(vec![0.0; n]);
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            f(e).iter().zip(&b).map(|(v, o)| v - o).collect()
        })
        .collect();
    let a = (0..b.len()).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
    (a, b)
}

/// Solves `M y = r` by Gaussian elimination with partial pivoting.
pub fn solve(mut m: Vec<Vec<f64>>, mut r: Vec<f64>) -> Vec<f64> {
    let n = r.len();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, p);
        r.swap(col, p);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut y = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * y[k]).sum();
        y[row] = (r[row] - s) / m[row][row];
    }
    y
}

/// Minimum-norm least-squares input for `target`: `x = Aᵀ (A Aᵀ)⁻¹ (t − b)`.
pub fn least_squares_input(a: &[Vec<f64>], b: &[f64], target: &[f64]) -> Vec<f64> {
    let d = a.len();
    let n = a[0].len();
    let aat: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| (0..n).map(|k| a[i][k] * a[j][k]).sum()).collect())
        .collect();
    let rhs: Vec<f64> = target.iter().zip(b).map(|(t, o)| t - o).collect();
    let y = solve(aat, rhs);
    (0..n).map(|k| (0..d).map(|i| a[i][k] * y[i]).sum()).collect()
}
