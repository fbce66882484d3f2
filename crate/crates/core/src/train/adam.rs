use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &LayerParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn matches(&self, params: &LayerParams) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .tensors()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step(
    params: &mut LayerParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::Shape(format!(
            "adam: {} gradients and {} moment pairs for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((g, name), p) in grads.iter().zip(params.names()).zip(params.tensors()) {
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "adam: gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("adam: gradient for {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (ms, vs) = (&mut state.m, &mut state.v);
    params.for_each_mut(|i, p| {
        let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    });
    Ok(())
}
