//! Seeded random computation graphs covering every primitive. The plan is
//! drawn once; `build` replays it against whatever leaf values it is given
//! so the finite-difference oracle can perturb inputs freely.

use anchorinv_tensor::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALL_OPS: &[&str] = &[
    "add", "sub", "mul", "div", "scale", "add_scalar", "matmul", "conv2d", "avg_pool2d",
    "reshape", "relu", "exp", "log", "abs", "clamp_min", "sum", "mean", "mean_axis0", "l2_norm",
    "softmax", "stack",
];

#[derive(Clone, Debug)]
enum Source {
    Conv {
        stride: (usize, usize),
        pool: Option<((usize, usize), (usize, usize))>,
    },
    MatMul,
}

#[derive(Clone, Debug)]
enum Step {
    Relu,
    Abs,
    Exp,
    LogPos,
    ClampMin(f64),
    Softmax(f64, Tensor<f64>),
    Scale(f64),
    AddScalar(f64),
    Add(usize),
    Sub(usize),
    Mul(usize),
    Div(usize),
    NormMul,
    StackMean(usize),
    MatVec(usize),
    Reshape,
}

#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub inputs: Vec<Tensor<f64>>,
    source: Source,
    steps: Vec<Step>,
    readout: Tensor<f64>,
    use_mean: bool,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl RandomGraph {
    /// Draws a graph; `forced` names a primitive that must appear.
    pub fn generate(seed: u64, forced: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let conv = matches!(forced, "conv2d" | "avg_pool2d") || rng.random_bool(0.5);
        let (source, mut width) = if conv {
            let c = rng.random_range(1..=2);
            let h = rng.random_range(2..=4);
            let w = rng.random_range(6..=10);
            let o = rng.random_range(1..=3);
            let kh = rng.random_range(1..=h);
            let kw = rng.random_range(1..=4);
            let stride = (rng.random_range(1..=2), rng.random_range(1..=2));
            inputs.push(uniform_tensor(&mut rng, &[c, h, w], -1.0, 1.0));
            inputs.push(uniform_tensor(&mut rng, &[o, c, kh, kw], -1.0, 1.0));
            inputs.push(uniform_tensor(&mut rng, &[o], -0.5, 0.5));
            let oh = (h - kh) / stride.0 + 1;
            let ow = (w - kw) / stride.1 + 1;
            let pool = if forced == "avg_pool2d" || (ow >= 2 && rng.random_bool(0.5)) {
                let pk = (1, rng.random_range(1..=ow.min(3)));
                let ps = (1, rng.random_range(1..=2));
                Some((pk, ps))
            } else {
                None
            };
            let (ph, pw) = match pool {
                Some((k, s)) => ((oh - k.0) / s.0 + 1, (ow - k.1) / s.1 + 1),
                None => (oh, ow),
            };
            (Source::Conv { stride, pool }, o * ph * pw)
        } else {
            let m = rng.random_range(2..=5);
            let k = rng.random_range(2..=5);
            let n = rng.random_range(1..=3);
            inputs.push(uniform_tensor(&mut rng, &[m, k], -1.0, 1.0));
            inputs.push(uniform_tensor(&mut rng, &[k, n], -1.0, 1.0));
            (Source::MatMul, m * n)
        };

        let pick = |rng: &mut ChaCha8Rng, name: &str| -> &'static str {
            if ALL_OPS.contains(&name) && !matches!(name, "conv2d" | "avg_pool2d" | "sum" | "mean")
            {
                ALL_OPS.iter().copied().find(|o| *o == name).unwrap()
            } else {
                const STEPS: &[&str] = &[
                    "relu", "abs", "exp", "log", "clamp_min", "softmax", "scale", "add_scalar",
                    "add", "sub", "mul", "div", "l2_norm", "stack", "matmul", "reshape",
                ];
                STEPS[rng.random_range(0..STEPS.len())]
            }
        };

        let n_steps = rng.random_range(2..=5);
        let mut steps = Vec::new();
        for s in 0..n_steps {
            let name = if s == 0 { pick(&mut rng, forced) } else { pick(&mut rng, "") };
            let step = match name {
                "relu" => Step::Relu,
                "abs" => Step::Abs,
                "exp" => Step::Exp,
                "log" => Step::LogPos,
                "clamp_min" => Step::ClampMin(rng.random_range(-0.5..0.5)),
                "softmax" => {
                    // unit-norm, non-uniformly tilted logits: no saturation, no pure shift
                    let tilt = uniform_tensor(&mut rng, &[width], 0.5, 1.5);
                    Step::Softmax(rng.random_range(0.5..3.0), tilt)
                }
                "scale" => Step::Scale(rng.random_range(-2.0..2.0)),
                "add_scalar" => Step::AddScalar(rng.random_range(-1.0..1.0)),
                "add" | "sub" | "mul" => {
                    inputs.push(uniform_tensor(&mut rng, &[width], -1.0, 1.0));
                    let i = inputs.len() - 1;
                    match name {
                        "add" => Step::Add(i),
                        "sub" => Step::Sub(i),
                        _ => Step::Mul(i),
                    }
                }
                "div" => {
                    inputs.push(away_from_zero(&mut rng, &[width]));
                    Step::Div(inputs.len() - 1)
                }
                "l2_norm" => Step::NormMul,
                "stack" | "mean_axis0" => {
                    inputs.push(uniform_tensor(&mut rng, &[width], -1.0, 1.0));
                    Step::StackMean(inputs.len() - 1)
                }
                "matmul" => {
                    let rows = rng.random_range(1..=4);
                    inputs.push(uniform_tensor(&mut rng, &[rows, width], -1.0, 1.0));
                    width = rows;
                    Step::MatVec(inputs.len() - 1)
                }
                _ => Step::Reshape,
            };
            steps.push(step);
        }
        let readout = uniform_tensor(&mut rng, &[width], -1.0, 1.0);
        let use_mean = forced == "mean" || (forced != "sum" && rng.random_bool(0.5));
        Self {
            inputs,
            source,
            steps,
            readout,
            use_mean,
        }
    }

    pub fn build(&self, g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
        let mut cur = match &self.source {
            Source::Conv { stride, pool } => {
                let y = g.conv2d(v[0], v[1], Some(v[2]), *stride)?;
                let y = match pool {
                    Some((k, s)) => g.avg_pool2d(y, *k, *s)?,
                    None => y,
                };
                g.flatten(y)?
            }
            Source::MatMul => {
                let y = g.matmul(v[0], v[1])?;
                g.flatten(y)?
            }
        };
        for s in &self.steps {
            cur = match s {
                Step::Relu => g.relu(cur)?,
                Step::Abs => g.abs(cur)?,
                Step::Exp => {
                    let n = g.l2_norm(cur)?;
                    let n = g.clamp_min(n, 1e-12)?;
                    let u = g.div(cur, n)?;
                    g.exp(u)?
                }
                Step::LogPos => {
                    let sq = g.mul(cur, cur)?;
                    let p = g.add_scalar(sq, 0.5)?;
                    g.log(p)?
                }
                Step::ClampMin(c) => g.clamp_min(cur, *c)?,
                Step::Softmax(t, tilt) => {
                    let n = g.l2_norm(cur)?;
                    let n = g.clamp_min(n, 1e-12)?;
                    let u = g.div(cur, n)?;
                    let tv = g.constant(tilt);
                    let z = g.mul(u, tv)?;
                    g.softmax(z, *t)?
                }
                Step::Scale(f) => g.scale(cur, *f)?,
                Step::AddScalar(f) => g.add_scalar(cur, *f)?,
                Step::Add(i) => g.add(cur, v[*i])?,
                Step::Sub(i) => g.sub(cur, v[*i])?,
                Step::Mul(i) => g.mul(cur, v[*i])?,
                Step::Div(i) => g.div(cur, v[*i])?,
                Step::NormMul => {
                    let n = g.l2_norm(cur)?;
                    g.mul(cur, n)?
                }
                Step::StackMean(i) => {
                    let other = g.mul(cur, v[*i])?;
                    let s = g.stack(&[cur, other])?;
                    g.mean_axis0(s)?
                }
                Step::MatVec(i) => g.matmul(v[*i], cur)?,
                Step::Reshape => {
                    let n = g.shape(cur)[0];
                    let col = g.reshape(cur, &[n, 1])?;
                    g.flatten(col)?
                }
            };
        }
        let w = g.constant(&self.readout);
        let weighted = g.mul(cur, w)?;
        if self.use_mean {
            g.mean(weighted)
        } else {
            g.sum(weighted)
        }
    }
}
