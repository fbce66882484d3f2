//! Optimizer, training loops for the generative models and the U-Net
//! segmenter, and checkpoints.
//!
//! Per-sample gradients of a minibatch may be computed in parallel; they are
//! collected in batch order and reduced sequentially, so results do not
//! depend on the thread count.

pub mod adam;
pub mod checkpoint;
mod generative;
mod segmenter;

use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerParams};
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, ModelKind, RngState, CHECKPOINT_VERSION};
pub use generative::{
    read_loss_csv, resume_generative, train_generative, write_loss_csv, EpochRecord,
    GenerativeModel, GenerativeRun, TrainConfig, LOSS_HEADER, TRAIN_KEYS,
};
pub use segmenter::{
    read_dsc_csv, train_segmenter, write_dsc_csv, SegConfig, SegEpoch, SegRun, Segmenter, DSC_HEADER, SEG_KEYS,
};

/// Final model file written by every training loop.
pub const MODEL_FILE: &str = "model.ckpt";

/// Mean gradient over `n` samples, plus each sample's side output in order.
/// `f` builds the scalar loss of sample `i` on a fresh record.
pub(crate) fn mean_gradients<T, F>(params: &LayerParams, n: usize, f: F) -> Result<(Vec<Tensor>, Vec<T>)>
where
    T: Send,
    F: for<'g> Fn(usize, &'g Graph, &Bound<'g, '_>) -> Result<(Var<'g>, T)> + Sync,
{
    let per_sample = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = Graph::with_strict(false);
            let p = params.bind(&g);
            let (loss, extra) = f(i, &g, &p)?;
            let mut grads = g.backward(loss)?;
            let flat: Vec<Tensor> = p.vars().iter().map(|v| grads.take(v)).collect();
            Ok((flat, extra))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
    let mut extras = Vec::with_capacity(n);
    for (grads, extra) in per_sample {
        for (acc, g) in sum.iter_mut().zip(&grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        extras.push(extra);
    }
    let scale = 1.0 / n as f64;
    for t in &mut sum {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((sum, extras))
}

/// Errors unless every pair is `[1, height, width]`.
pub(crate) fn check_extent(pairs: &[SamplePair], height: usize, width: usize, what: &str) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if p.height() != height || p.width() != width {
            return Err(Error::Data(format!(
                "{what} sample {i} is {}x{}, model expects {height}x{width}",
                p.height(),
                p.width()
            )));
        }
    }
    Ok(())
}

/// Prefixes errors with where in training they happened.
pub(crate) fn at_step(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} batch {batch}: {m}")),
        Error::Graph(m) => Error::Graph(format!("epoch {epoch} batch {batch}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests;
