//! Dense row-major `f64` tensors and the raw numeric kernels behind the
//! differentiable operations in [`crate::autodiff`].

use std::fmt;

use crate::error::{shape_err, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(shape_err(format!(
                "shape {:?} holds {} values but {} were supplied",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err(format!(
                "item() needs a single-element tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Channels `start..start+len` of a tensor whose leading axis is the channel axis.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        slice_axis0(self, start, len)
    }
}

pub(crate) fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(shape_err(format!(
            "{what} expects a rank-{rank} tensor, got shape {:?}",
            t.shape
        )));
    }
    Ok(())
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "transpose")?;
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Geometry shared by the three convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }
}

pub(crate) fn conv_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(shape_err("convolution stride must be positive"));
    }
    let padded = extent + 2 * pad;
    if k == 0 || k > padded {
        return Err(shape_err(format!(
            "kernel extent {k} does not fit padded extent {padded}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(shape_err(format!(
            "output extent ({extent} + 2*{pad} - {k})/{stride} + 1 is not an integer"
        )));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn conv_geom(
    input_shape: &[usize],
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if input_shape.len() != 3 || kernel_shape.len() != 4 {
        return Err(shape_err(format!(
            "conv2d expects input [C,H,W] and kernels [Cout,Cin,kh,kw], got {input_shape:?} and {kernel_shape:?}"
        )));
    }
    if input_shape[0] != kernel_shape[1] {
        return Err(shape_err(format!(
            "conv2d channel mismatch: input has {} channels, kernels expect {}",
            input_shape[0], kernel_shape[1]
        )));
    }
    let (h, w) = (input_shape[1], input_shape[2]);
    let (kh, kw) = (kernel_shape[2], kernel_shape[3]);
    Ok(ConvGeom {
        c_in: input_shape[0],
        c_out: kernel_shape[0],
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho: conv_extent(h, kh, stride, pad)?,
        wo: conv_extent(w, kw, stride, pad)?,
    })
}

fn pad_input(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = g.padded();
    let mut out = vec![0.0; g.c_in * hp * wp];
    for c in 0..g.c_in {
        for y in 0..g.h {
            let src = &x[(c * g.h + y) * g.w..][..g.w];
            out[(c * hp + y + g.pad) * wp + g.pad..][..g.w].copy_from_slice(src);
        }
    }
    out
}

/// Patch matrix of a padded input: row `(c, ky, kx)`, column `(oy, ox)`.
fn im2col(xp: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hp, wp) = g.padded();
    let mut col = Vec::with_capacity(g.c_in * g.kh * g.kw * g.ho * g.wo);
    for c in 0..g.c_in {
        let xc = &xp[c * hp * wp..][..hp * wp];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                for oy in 0..g.ho {
                    let base = (oy * g.stride + ky) * wp + kx;
                    if g.stride == 1 {
                        col.extend_from_slice(&xc[base..base + g.wo]);
                    } else {
                        col.extend((0..g.wo).map(|ox| xc[base + ox * g.stride]));
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch matrix back onto the unpadded input grid.
fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hp, wp) = g.padded();
    let p = g.ho * g.wo;
    let mut xp = vec![0.0; g.c_in * hp * wp];
    for c in 0..g.c_in {
        let xc = &mut xp[c * hp * wp..][..hp * wp];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let base = (oy * g.stride + ky) * wp + kx;
                    let src = &row[oy * g.wo..][..g.wo];
                    if g.stride == 1 {
                        for (xv, &s) in xc[base..base + g.wo].iter_mut().zip(src) {
                            *xv += s;
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            xc[base + ox * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
    if g.pad == 0 {
        return xp;
    }
    let mut out = Vec::with_capacity(g.c_in * g.h * g.w);
    for c in 0..g.c_in {
        for y in 0..g.h {
            out.extend_from_slice(&xp[(c * hp + y + g.pad) * wp + g.pad..][..g.w]);
        }
    }
    out
}

/// Direct cross-correlation.
pub(crate) fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(&x.shape, &k.shape, stride, pad)?;
    let col = im2col(&pad_input(&x.data, &g), &g);
    let p = g.ho * g.wo;
    let r = g.c_in * g.kh * g.kw;
    let mut out = vec![0.0; g.c_out * p];
    for (o, orow) in out.chunks_exact_mut(p).enumerate() {
        for (&wv, crow) in k.data[o * r..][..r].iter().zip(col.chunks_exact(p)) {
            for (ov, &cv) in orow.iter_mut().zip(crow) {
                *ov += wv * cv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![g.c_out, g.ho, g.wo],
        data: out,
    })
}

/// Adjoint of [`conv2d`] with respect to its input: maps a `[Cout,Ho,Wo]`
/// tensor back to `[Cin,H,W]`.
pub(crate) fn conv2d_transpose(
    gy: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    input_hw: (usize, usize),
) -> Result<Tensor> {
    if k.rank() != 4 {
        return Err(shape_err(format!(
            "transposed convolution expects rank-4 kernels, got {:?}",
            k.shape
        )));
    }
    let g = conv_geom(&[k.shape[1], input_hw.0, input_hw.1], &k.shape, stride, pad)?;
    if gy.shape != [g.c_out, g.ho, g.wo] {
        return Err(shape_err(format!(
            "transposed convolution expects input {:?}, got {:?}",
            [g.c_out, g.ho, g.wo],
            gy.shape
        )));
    }
    let p = g.ho * g.wo;
    let r = g.c_in * g.kh * g.kw;
    // Row r of the patch matrix is sum_o w[o, r] * gy[o].
    let mut col = Vec::with_capacity(r * p);
    let first = &gy.data[..p];
    for &wv in &k.data[..r] {
        col.extend(first.iter().map(|&gv| wv * gv));
    }
    for (o, grow) in gy.data.chunks_exact(p).enumerate().skip(1) {
        for (&wv, crow) in k.data[o * r..][..r].iter().zip(col.chunks_exact_mut(p)) {
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += wv * gv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![g.c_in, g.h, g.w],
        data: col2im(&col, &g),
    })
}

/// Adjoint of [`conv2d`] with respect to its kernels.
pub(crate) fn conv2d_kernel_grad(
    x: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    kernel_hw: (usize, usize),
) -> Result<Tensor> {
    if x.rank() != 3 || gy.rank() != 3 {
        return Err(shape_err(format!(
            "kernel gradient expects rank-3 input and output, got {:?} and {:?}",
            x.shape, gy.shape
        )));
    }
    let kshape = [gy.shape[0], x.shape[0], kernel_hw.0, kernel_hw.1];
    let g = conv_geom(&x.shape, &kshape, stride, pad)?;
    if gy.shape != [g.c_out, g.ho, g.wo] {
        return Err(shape_err(format!(
            "kernel gradient expects output gradient {:?}, got {:?}",
            [g.c_out, g.ho, g.wo],
            gy.shape
        )));
    }
    let col = im2col(&pad_input(&x.data, &g), &g);
    let p = g.ho * g.wo;
    let mut out = Vec::with_capacity(g.c_out * g.c_in * g.kh * g.kw);
    for grow in gy.data.chunks_exact(p) {
        for crow in col.chunks_exact(p) {
            out.push(grow.iter().zip(crow).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Tensor {
        shape: kshape.to_vec(),
        data: out,
    })
}

pub(crate) fn check_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= shape.len()) {
        return Err(shape_err(format!(
            "invalid axes {axes:?} for shape {shape:?}"
        )));
    }
    Ok(sorted)
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

/// For each position of `shape`, the flat index it maps to after removing `axes`.
fn reduction_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out_shape = reduced_shape(shape, axes);
    let out_strides = row_major_strides(&out_shape);
    // Stride of each input axis in the output (0 for reduced axes).
    let mut axis_stride = Vec::with_capacity(shape.len());
    let mut k = 0;
    for i in 0..shape.len() {
        if axes.contains(&i) {
            axis_stride.push(0);
        } else {
            axis_stride.push(out_strides[k]);
            k += 1;
        }
    }
    let n = numel(shape);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for ax in (0..shape.len()).rev() {
            counter[ax] += 1;
            cur += axis_stride[ax];
            if counter[ax] < shape[ax] {
                break;
            }
            cur -= axis_stride[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

pub(crate) fn sum_axes(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let axes = check_axes(&t.shape, axes)?;
    let out_shape = reduced_shape(&t.shape, &axes);
    let mut out = vec![0.0; numel(&out_shape)];
    if axes.len() == t.rank() {
        out[0] = t.data.iter().sum();
    } else {
        for (&o, &v) in reduction_index(&t.shape, &axes).iter().zip(&t.data) {
            out[o] += v;
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

/// Inverse shape map of [`sum_axes`]: replicates `t` along `axes` of `shape`.
pub(crate) fn broadcast_axes(t: &Tensor, axes: &[usize], shape: &[usize]) -> Result<Tensor> {
    let axes = check_axes(shape, axes)?;
    let expected = reduced_shape(shape, &axes);
    if t.numel() != numel(&expected) || (t.rank() != 0 && t.shape != expected) {
        return Err(shape_err(format!(
            "cannot broadcast {:?} along axes {axes:?} to {shape:?}",
            t.shape
        )));
    }
    let data = if expected.is_empty() {
        vec![t.data[0]; numel(shape)]
    } else {
        reduction_index(shape, &axes)
            .into_iter()
            .map(|o| t.data[o])
            .collect()
    };
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

pub(crate) fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(shape_err(format!(
            "softmax axis {axis} out of range for shape {:?}",
            t.shape
        )));
    }
    let len = t.shape[axis];
    let inner: usize = t.shape[axis + 1..].iter().product();
    let outer: usize = t.shape[..axis].iter().product();
    let mut out = t.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| t.data[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (t.data[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor {
        shape: t.shape.clone(),
        data: out,
    })
}

fn expect_chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    expect_rank(t, 3, what)?;
    Ok((t.shape[0], t.shape[1], t.shape[2]))
}

/// Nearest-neighbour 2x upsampling of `[C,H,W]`.
pub(crate) fn upsample2(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = expect_chw(t, "upsample")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &t.data[(ch * h + y / 2) * w..][..w];
            let dst = &mut out[(ch * h2 + y) * w2..][..w2];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, h2, w2],
        data: out,
    })
}

/// 2x2 sum pooling of `[C,H,W]`, the adjoint of [`upsample2`].
pub(crate) fn sumpool2(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = expect_chw(t, "sum pooling")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!(
            "2x2 pooling needs even spatial extents, got {:?}",
            t.shape
        )));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h {
            let src = &t.data[(ch * h + y) * w..][..w];
            let dst = &mut out[(ch * h2 + y / 2) * w2..][..w2];
            for (x, &v) in src.iter().enumerate() {
                dst[x / 2] += v;
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, h2, w2],
        data: out,
    })
}

/// Flat indices of the maxima of each 2x2 window of `[C,H,W]`, in output order.
/// Ties resolve to the first element in row-major window order.
pub(crate) fn maxpool2_indices(t: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let (c, h, w) = expect_chw(t, "max pooling")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!(
            "2x2 pooling needs even spatial extents, got {:?}",
            t.shape
        )));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * h2 * w2);
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let mut best = (ch * h + 2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                    if t.data[cand] > t.data[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, vec![c, h2, w2]))
}

pub(crate) fn gather(t: &Tensor, idx: &[usize], shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != idx.len() || idx.iter().any(|&i| i >= t.numel()) {
        return Err(shape_err("gather indices do not match the requested shape"));
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data: idx.iter().map(|&i| t.data[i]).collect(),
    })
}

/// Adjoint of [`gather`]: accumulates `t` into a zero tensor of `shape`.
pub(crate) fn scatter_add(t: &Tensor, idx: &[usize], shape: &[usize]) -> Result<Tensor> {
    let n = numel(shape);
    if t.numel() != idx.len() || idx.iter().any(|&i| i >= n) {
        return Err(shape_err("scatter indices do not match the source tensor"));
    }
    let mut out = vec![0.0; n];
    for (&i, &v) in idx.iter().zip(&t.data) {
        out[i] += v;
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data: out,
    })
}

pub(crate) fn concat_axis0(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 || a.rank() != b.rank() || a.shape[1..] != b.shape[1..] {
        return Err(shape_err(format!(
            "concatenation needs matching trailing extents, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let mut shape = a.shape.clone();
    shape[0] += b.shape[0];
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor { shape, data })
}

pub(crate) fn slice_axis0(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if t.rank() == 0 || start + len > t.shape[0] {
        return Err(shape_err(format!(
            "slice {start}..{} out of range for shape {:?}",
            start + len,
            t.shape
        )));
    }
    let row: usize = t.shape[1..].iter().product();
    let mut shape = t.shape.clone();
    shape[0] = len;
    Ok(Tensor {
        shape,
        data: t.data[start * row..(start + len) * row].to_vec(),
    })
}
