use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for the gradient of the scalar `f` at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    finite_diff_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), step)
}

/// [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter().map(|v| grads.wrt(v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let v = f(&g, &vars)?.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
