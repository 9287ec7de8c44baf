use crate::{Graph, Result, Tensor, TensorError, Var};

const FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives the graph and one tracked leaf per entry of `inputs`
/// and must return a scalar node. Returns the largest
/// `|analytic - numeric| / max(|numeric|, 1e-6)` over every input element.
/// The floor keeps roundoff on structurally zero gradients (about 1e-11 at
/// `eps = 1e-5`) from reading as a relative error.
pub fn finite_difference_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || eps.is_nan() {
        return Err(TensorError::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t)).collect();
        let out = build(&mut g, &vars)?;
        if g.shape(out).iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(g.shape(out).to_vec()));
        }
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_grad()))
        .collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("tracked leaf").data().to_vec();
        for (idx, &a) in analytic.iter().enumerate() {
            let orig = probe[k].data()[idx];
            probe[k].data_mut()[idx] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[idx] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(FLOOR));
        }
    }
    Ok(worst)
}
