//! Layer functions over bound parameters. Each block reads its tensors by
//! `"{prefix}.{name}"` and registers them through a matching `init_*`.

use rand::Rng;

use super::params::{Bound, ParamBuilder};
use crate::autodiff::Var;
use crate::error::{shape_err, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
const MAX_NORM_GROUPS: usize = 8;

/// Largest divisor of `channels` not exceeding eight.
pub fn norm_groups(channels: usize) -> usize {
    (1..=MAX_NORM_GROUPS.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Query/key width of the attention projections.
pub fn attention_qk_dim(channels: usize) -> usize {
    (channels / 8).max(1)
}

fn channels_of(x: &Var<'_>, what: &str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err(format!("{what} expects [C,H,W], got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

fn add_channel_bias<'g>(x: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
    let shape = x.shape();
    x.add(bias.broadcast_axes(&[1, 2], &shape)?)
}

pub fn conv<'g>(
    p: &Bound<'g, '_>,
    prefix: &str,
    x: Var<'g>,
    stride: usize,
    pad: usize,
) -> Result<Var<'g>> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    add_channel_bias(x.conv2d(w, stride, pad)?, b)
}

/// `[n] -> [out]` affine map.
pub fn linear<'g>(p: &Bound<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let n = x.value().numel();
    let out = w.shape()[0];
    w.matmul(x.reshape(&[n, 1])?)?.reshape(&[out])?.add(b)
}

pub fn group_norm<'g>(p: &Bound<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let (c, h, w) = channels_of(&x, "group norm")?;
    let groups = norm_groups(c);
    let per = c / groups * h * w;
    let flat = x.reshape(&[groups, per])?;
    let mean = flat.mean_axes(&[1])?.broadcast_axes(&[1], &[groups, per])?;
    let centered = flat.sub(mean)?;
    let var = centered.square()?.mean_axes(&[1])?;
    let inv = var
        .add_scalar(NORM_EPS)?
        .pow_scalar(-0.5)?
        .broadcast_axes(&[1], &[groups, per])?;
    let normed = centered.mul(inv)?.reshape(&[c, h, w])?;
    let scale = p.get(&format!("{prefix}.scale"))?;
    let shift = p.get(&format!("{prefix}.shift"))?;
    add_channel_bias(normed.mul(scale.broadcast_axes(&[1, 2], &[c, h, w])?)?, shift)
}

pub fn init_residual<R: Rng>(b: &mut ParamBuilder<'_, R>, prefix: &str, c: usize) -> Result<()> {
    b.conv(&format!("{prefix}.conv1"), c, c, 3)?;
    b.norm(&format!("{prefix}.norm"), c)?;
    // Zero second convolution: the block is the identity at initialization.
    b.zero_conv(&format!("{prefix}.conv2"), c, c, 3)
}

/// `x + conv2(leaky(norm(conv1(x))))`.
pub fn residual_block<'g>(p: &Bound<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let (c, _, _) = channels_of(&x, "residual block")?;
    let w1 = p.get(&format!("{prefix}.conv1.w"))?;
    if w1.shape()[1] != c {
        return Err(shape_err(format!(
            "residual block {prefix} expects {} channels, input has {c}",
            w1.shape()[1]
        )));
    }
    let h = conv(p, &format!("{prefix}.conv1"), x, 1, 1)?;
    let h = group_norm(p, &format!("{prefix}.norm"), h)?.leaky_relu(LEAKY_SLOPE)?;
    let h = conv(p, &format!("{prefix}.conv2"), h, 1, 1)?;
    x.add(h)
}

pub fn init_attention<R: Rng>(b: &mut ParamBuilder<'_, R>, prefix: &str, c: usize) -> Result<()> {
    let qk = attention_qk_dim(c);
    b.linear(&format!("{prefix}.query"), qk, c)?;
    b.linear(&format!("{prefix}.key"), qk, c)?;
    b.linear(&format!("{prefix}.value"), c, c)?;
    b.constant(&format!("{prefix}.gamma"), &[], 0.0)
}

/// 1x1 projection of `[C, N]` positions: `W x + b` with `W: [out, C]`.
fn project<'g>(p: &Bound<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let y = w.matmul(x)?;
    let shape = y.shape();
    y.add(b.broadcast_axes(&[1], &shape)?)
}

/// Attention weights `[N, N]` (rows sum to one) and the attended values `[C, H, W]`.
pub fn attention_map<'g>(
    p: &Bound<'g, '_>,
    prefix: &str,
    x: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let (c, h, w) = channels_of(&x, "self-attention")?;
    let wv = p.get(&format!("{prefix}.value.w"))?;
    if wv.shape()[1] != c {
        return Err(shape_err(format!(
            "self-attention {prefix} expects {} channels, input has {c}",
            wv.shape()[1]
        )));
    }
    let n = h * w;
    let flat = x.reshape(&[c, n])?;
    let q = project(p, &format!("{prefix}.query"), flat)?;
    let k = project(p, &format!("{prefix}.key"), flat)?;
    let v = project(p, &format!("{prefix}.value"), flat)?;
    let qk = q.shape()[0];
    let scores = q
        .transpose()?
        .matmul(k)?
        .mul_scalar(1.0 / (qk as f64).sqrt())?;
    let weights = scores.softmax(1)?;
    let attended = v.matmul(weights.transpose()?)?.reshape(&[c, h, w])?;
    Ok((weights, attended))
}

/// `x + gamma * Attn(x)`, with `gamma` initialized to zero.
pub fn self_attention<'g>(p: &Bound<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let (_, attended) = attention_map(p, prefix, x)?;
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    x.add(attended.mul(gamma)?)
}
