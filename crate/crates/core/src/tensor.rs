//! Dense row-major `f64` tensors and the primitive kernels the rest of the
//! crate is built from.
//!
//! Spatial tensors are laid out channel-first (`[C, H, W]`). Sampling
//! coordinates are absolute pixel positions ordered `(row, col)`.

use crate::error::{shape_err, Error, Result};

/// Epsilon used by [`layer_norm`] callers throughout the network.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    name: Option<String>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rejecting empty extents, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(shape_err!("zero extent in shape {shape:?}"));
        }
        if numel(&shape) != data.len() {
            return Err(shape_err!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()));
        }
        let t = Tensor { shape, data, name: None };
        t.validate()?;
        Ok(t)
    }

    /// Internal constructor for kernel outputs whose shape is correct by
    /// construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data, name: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Tensor::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    /// Fills a tensor from a function of the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Tensor::from_parts(shape.to_vec(), (0..numel(shape)).map(f).collect())
    }

    /// Row-major identity matrix.
    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Checks every invariant: non-empty extents, matching length, finite values.
    pub fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.iter().any(|&e| e == 0) {
            return Err(shape_err!("invalid shape {:?}", self.shape));
        }
        if numel(&self.shape) != self.data.len() {
            return Err(shape_err!("shape {:?} does not match {} values", self.shape, self.data.len()));
        }
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) || numel(shape) != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            assert!(i < e, "index {idx:?} out of bounds for {:?}", self.shape);
            acc * e + i
        })
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let i = self.flat_index(idx);
        self.data[i] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor::from_parts(self.shape.clone(), self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err!("expected shape {shape:?}, got {:?}", self.shape));
        }
        Ok(())
    }

    pub fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(shape_err!("expected rank {rank}, got shape {:?}", self.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.axpy(1.0, other)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        self.expect_rank(2)?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Sums a rank-2 tensor over its rows, giving one value per column.
    pub fn sum_rows(&self) -> Result<Tensor> {
        self.expect_rank(2)?;
        let c = self.shape[1];
        let mut out = vec![0.0; c];
        for row in self.data.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(Tensor::from_parts(vec![c], out))
    }
}

/// Absolute sampling positions for [`grid_sample`]: shape `[H', W', 2]` or
/// `[D', H', W', 3]`, last axis ordered like the sampled tensor's spatial axes.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleCoords(Tensor);

impl SampleCoords {
    pub fn new(coords: Tensor) -> Result<Self> {
        coords.validate()?;
        let r = coords.rank();
        let last = *coords.shape().last().unwrap_or(&0);
        if r < 2 || last != r - 1 {
            return Err(shape_err!(
                "sample coords must be [..spatial, rank] with rank = number of spatial axes, got {:?}",
                coords.shape()
            ));
        }
        Ok(SampleCoords(coords))
    }

    /// Integer lattice of an `h x w` image.
    pub fn lattice(h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w * 2);
        for r in 0..h {
            for c in 0..w {
                data.push(r as f64);
                data.push(c as f64);
            }
        }
        SampleCoords(Tensor::from_parts(vec![h, w, 2], data))
    }

    /// `lattice + offsets`, where `offsets` is a `[2, H, W]` displacement field.
    pub fn from_offsets(offsets: &Tensor) -> Result<Self> {
        offsets.expect_rank(3)?;
        if offsets.shape()[0] != 2 {
            return Err(shape_err!("offset field must be [2,H,W], got {:?}", offsets.shape()));
        }
        let (h, w) = (offsets.shape()[1], offsets.shape()[2]);
        let plane = h * w;
        let od = offsets.data();
        let mut data = Vec::with_capacity(plane * 2);
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                data.push(r as f64 + od[p]);
                data.push(c as f64 + od[plane + p]);
            }
        }
        SampleCoords::new(Tensor::from_parts(vec![h, w, 2], data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Number of spatial axes addressed by each coordinate.
    pub fn spatial_rank(&self) -> usize {
        *self.0.shape().last().unwrap()
    }

    /// Output spatial shape (every axis but the last).
    pub fn grid_shape(&self) -> &[usize] {
        let s = self.0.shape();
        &s[..s.len() - 1]
    }
}

/// One axis of a linear interpolation stencil with clamp-to-border.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub i0: usize,
    pub i1: usize,
    /// Fractional position inside `[i0, i1]`.
    pub frac: f64,
    /// Derivative of the clamped coordinate with respect to the raw one.
    pub slope: f64,
}

pub(crate) fn stencil(coord: f64, extent: usize) -> Stencil {
    if extent == 1 {
        return Stencil { i0: 0, i1: 0, frac: 0.0, slope: 0.0 };
    }
    let hi = (extent - 1) as f64;
    let (c, slope) = if coord < 0.0 {
        (0.0, 0.0)
    } else if coord > hi {
        (hi, 0.0)
    } else {
        (coord, 1.0)
    };
    let i0 = (c.floor() as usize).min(extent - 2);
    Stencil { i0, i1: i0 + 1, frac: c - i0 as f64, slope }
}

/// Bilinear (2-D) or trilinear (3-D) sampling of `x` at absolute coordinates,
/// clamping coordinates to the image before interpolating.
///
/// `x` is `[C, H, W]` (or `[C, D, H, W]`); the result is `[C, ..grid]`.
pub fn grid_sample(x: &Tensor, coords: &SampleCoords) -> Result<Tensor> {
    let srank = coords.spatial_rank();
    if x.rank() != srank + 1 {
        return Err(shape_err!("grid_sample: coords address {srank} spatial axes but input has shape {:?}", x.shape()));
    }
    match srank {
        2 => Ok(grid_sample_2d(x, coords)),
        3 => Ok(grid_sample_3d(x, coords)),
        _ => Err(shape_err!("grid_sample supports 2 or 3 spatial axes, got {srank}")),
    }
}

fn grid_sample_2d(x: &Tensor, coords: &SampleCoords) -> Tensor {
    let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let grid = coords.grid_shape().to_vec();
    let n = grid.iter().product::<usize>();
    let cd = coords.tensor().data();
    let xd = x.data();
    let plane = h * w;
    let mut out = vec![0.0; ch * n];
    for p in 0..n {
        let sr = stencil(cd[2 * p], h);
        let sc = stencil(cd[2 * p + 1], w);
        let w00 = (1.0 - sr.frac) * (1.0 - sc.frac);
        let w01 = (1.0 - sr.frac) * sc.frac;
        let w10 = sr.frac * (1.0 - sc.frac);
        let w11 = sr.frac * sc.frac;
        let (a, b, c, d) = (sr.i0 * w + sc.i0, sr.i0 * w + sc.i1, sr.i1 * w + sc.i0, sr.i1 * w + sc.i1);
        for k in 0..ch {
            let base = k * plane;
            out[k * n + p] = xd[base + a] * w00 + xd[base + b] * w01 + xd[base + c] * w10 + xd[base + d] * w11;
        }
    }
    let mut shape = vec![ch];
    shape.extend(grid);
    Tensor::from_parts(shape, out)
}

fn grid_sample_3d(x: &Tensor, coords: &SampleCoords) -> Tensor {
    let (ch, dd, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let grid = coords.grid_shape().to_vec();
    let n = grid.iter().product::<usize>();
    let cd = coords.tensor().data();
    let xd = x.data();
    let vol = dd * h * w;
    let mut out = vec![0.0; ch * n];
    for p in 0..n {
        let s = [stencil(cd[3 * p], dd), stencil(cd[3 * p + 1], h), stencil(cd[3 * p + 2], w)];
        let mut corners = [(0usize, 0.0f64); 8];
        for (k, corner) in corners.iter_mut().enumerate() {
            let mut idx = 0;
            let mut wt = 1.0;
            for (axis, (st, ext)) in s.iter().zip([dd, h, w]).enumerate() {
                let hi = (k >> (2 - axis)) & 1 == 1;
                let i = if hi { st.i1 } else { st.i0 };
                wt *= if hi { st.frac } else { 1.0 - st.frac };
                idx = idx * ext + i;
            }
            *corner = (idx, wt);
        }
        for k in 0..ch {
            let base = k * vol;
            out[k * n + p] = corners.iter().map(|&(i, wt)| xd[base + i] * wt).sum();
        }
    }
    let mut shape = vec![ch];
    shape.extend(grid);
    Tensor::from_parts(shape, out)
}

/// `[M, K] x [K, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2)?;
    b.expect_rank(2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err!("matmul inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `[M, K] x [N, K]^T`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2)?;
    b.expect_rank(2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err!("matmul_nt inner dimensions differ: {:?} x {:?}^T", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `[K, M]^T x [K, N]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2)?;
    b.expect_rank(2)?;
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err!("matmul_tn inner dimensions differ: {:?}^T x {:?}", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let br = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mx = (0..n).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (xd[at(j)] - mx).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[at(j)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// In-place row softmax over contiguous rows of length `n`.
pub(crate) fn softmax_rows_inplace(data: &mut [f64], n: usize) {
    for row in data.chunks_exact_mut(n) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    /// Normalized input before the affine map.
    pub xhat: Tensor,
    /// Reciprocal standard deviation per normalized row.
    pub rstd: Vec<f64>,
}

/// Layer normalization over the last axis followed by `gamma * xhat + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_cached(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    let c = *x.shape().last().ok_or_else(|| shape_err!("layer_norm on empty shape"))?;
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    let rows = x.len() / c;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let xh = (row[j] - mean) * rs;
            xhat[r * c + j] = xh;
            y[r * c + j] = xh * g[j] + b[j];
        }
    }
    let shape = x.shape().to_vec();
    Ok((Tensor::from_parts(shape.clone(), y), LayerNormCache { xhat: Tensor::from_parts(shape, xhat), rstd }))
}

/// Same-size 2-D cross-correlation with zero padding `(k-1)/2`, plus bias.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    conv2d_strided(x, kernel, bias, 1)
}

pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geom(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<ConvGeom> {
    x.expect_rank(3)?;
    kernel.expect_rank(4)?;
    let [cin, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [cout, kcin, k, k2] = [kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]];
    if kcin != cin {
        return Err(shape_err!("conv2d: input has {cin} channels, kernel expects {kcin}"));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::Argument(format!("conv2d kernel must be square and odd, got {k}x{k2}")));
    }
    if stride == 0 {
        return Err(Error::Argument("conv2d stride must be >= 1".into()));
    }
    let pad = (k - 1) / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    Ok(ConvGeom { cin, h, w, cout, k, pad, stride, oh, ow })
}

/// Output-column range `[lo, hi)` for which input column `o*stride + t - pad`
/// lies inside `[0, extent)`.
pub(crate) fn valid_range(out_extent: usize, extent: usize, stride: usize, t: usize, pad: usize) -> (usize, usize) {
    // need o*stride + t >= pad and o*stride + t - pad < extent
    let lo = if t >= pad { 0 } else { (pad - t).div_ceil(stride) };
    let hi_excl = if extent + pad > t { (extent + pad - t).div_ceil(stride) } else { 0 };
    (lo.min(out_extent), hi_excl.min(out_extent))
}

/// Unfolds `x` into columns `[cin*k*k, oh*ow]`; out-of-image taps are zero.
pub(crate) fn im2col(xd: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let mut cols = vec![0.0; g.cin * g.k * g.k * npix];
    for ci in 0..g.cin {
        let xplane = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(g.oh, g.h, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(g.ow, g.w, g.stride, kx, g.pad);
                let row = ((ci * g.k + ky) * g.k + kx) * npix;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &xplane[iy * g.w..(iy + 1) * g.w];
                    let crow = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        crow[ox] = xrow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[cin, h, w]` buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let xplane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(g.oh, g.h, g.stride, ky, g.pad);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(g.ow, g.w, g.stride, kx, g.pad);
                let row = ((ci * g.k + ky) * g.k + kx) * npix;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let crow = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        xplane[iy * g.w + ox * g.stride + kx - g.pad] += crow[ox];
                    }
                }
            }
        }
    }
    x
}

/// Strided cross-correlation with zero padding `(k-1)/2`.
pub fn conv2d_strided(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geom(x, kernel, stride)?;
    bias.expect_shape(&[g.cout])?;
    let npix = g.oh * g.ow;
    let cols = im2col(x.data(), &g);
    let mut out = vec![0.0; g.cout * npix];
    for (plane, &b) in out.chunks_exact_mut(npix).zip(bias.data()) {
        plane.fill(b);
    }
    matmul_into(kernel.data(), &cols, &mut out, g.cout, g.cin * g.k * g.k, npix);
    Ok(Tensor::from_parts(vec![g.cout, g.oh, g.ow], out))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh())
}

pub fn gelu_derivative(v: f64) -> f64 {
    let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v)
}

/// `[C, H, W]` to token rows `[H*W, C]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    x.expect_rank(3)?;
    let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let xd = x.data();
    let mut out = vec![0.0; c * hw];
    for k in 0..c {
        for p in 0..hw {
            out[p * c + k] = xd[k * hw + p];
        }
    }
    Ok(Tensor::from_parts(vec![hw, c], out))
}

/// Token rows `[H*W, C]` back to `[C, H, W]`.
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    t.expect_rank(2)?;
    if t.shape()[0] != h * w {
        return Err(shape_err!("{} tokens cannot fill a {h}x{w} grid", t.shape()[0]));
    }
    let (hw, c) = (h * w, t.shape()[1]);
    let td = t.data();
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for k in 0..c {
            out[k * hw + p] = td[p * c + k];
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Concatenates `[C_i, H, W]` tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    first.expect_rank(3)?;
    let spatial = &first.shape()[1..];
    let mut data = Vec::new();
    let mut c = 0;
    for p in parts {
        p.expect_rank(3)?;
        if &p.shape()[1..] != spatial {
            return Err(shape_err!("concat spatial mismatch {:?} vs {:?}", first.shape(), p.shape()));
        }
        c += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![c, spatial[0], spatial[1]], data))
}

/// Splits a `[C, H, W]` tensor into consecutive channel groups.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    x.expect_rank(3)?;
    if sizes.iter().sum::<usize>() != x.shape()[0] {
        return Err(shape_err!("split sizes {sizes:?} do not cover {:?}", x.shape()));
    }
    let plane = x.shape()[1] * x.shape()[2];
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&s| {
            let t = Tensor::from_parts(
                vec![s, x.shape()[1], x.shape()[2]],
                x.data()[start * plane..(start + s) * plane].to_vec(),
            );
            start += s;
            t
        })
        .collect())
}

/// Nearest-neighbour 2x upsampling of `[C, H, W]`.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    x.expect_rank(3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for k in 0..c {
        for r in 0..oh {
            for q in 0..ow {
                out[(k * oh + r) * ow + q] = x.data()[(k * h + r / 2) * w + q / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Zero-pads `[C, H, W]` at the bottom and right to `[C, oh, ow]`.
pub fn pad_bottom_right(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    x.expect_rank(3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if oh < h || ow < w {
        return Err(shape_err!("cannot pad {:?} down to {oh}x{ow}", x.shape()));
    }
    let mut out = vec![0.0; c * oh * ow];
    for k in 0..c {
        for r in 0..h {
            out[(k * oh + r) * ow..(k * oh + r) * ow + w]
                .copy_from_slice(&x.data()[(k * h + r) * w..(k * h + r + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Keeps the top-left `[C, h, w]` corner.
pub fn crop_top_left(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    x.expect_rank(3)?;
    let (c, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h > ih || w > iw || h == 0 || w == 0 {
        return Err(shape_err!("cannot crop {:?} to {h}x{w}", x.shape()));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for r in 0..h {
            out.extend_from_slice(&x.data()[(k * ih + r) * iw..(k * ih + r) * iw + w]);
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![0, 2], vec![]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(Error::NonFinite { index: 1 })));
        let mut t = Tensor::zeros(&[3]);
        t.data_mut()[2] = f64::INFINITY;
        assert!(t.validate().is_err());
    }

    #[test]
    fn grid_sample_identity_lattice_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[3, 5, 7], &mut rng);
        let y = grid_sample(&x, &SampleCoords::lattice(5, 7)).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn grid_sample_hand_values() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let at = |r: f64, c: f64| {
            let coords = SampleCoords::new(Tensor::new(vec![1, 1, 2], vec![r, c]).unwrap()).unwrap();
            grid_sample(&x, &coords).unwrap().data()[0]
        };
        assert_eq!(at(0.5, 0.5), 1.5);
        assert_eq!(at(-3.0, 0.0), 0.0);
        assert_eq!(at(10.0, 10.0), 3.0);
        assert_eq!(at(1.0, 1.0), 3.0);
    }

    #[test]
    fn grid_sample_rank_mismatch() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let c3 = SampleCoords::new(Tensor::zeros(&[2, 2, 2, 3])).unwrap();
        assert!(matches!(grid_sample(&x, &c3), Err(Error::Shape(_))));
        assert!(SampleCoords::new(Tensor::zeros(&[2, 2, 3])).is_err());
    }

    #[test]
    fn trilinear_matches_hand_average() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let coords = SampleCoords::new(Tensor::new(vec![1, 1, 1, 3], vec![0.5, 0.5, 0.5]).unwrap()).unwrap();
        let y = grid_sample(&x, &coords).unwrap();
        assert!((y.data()[0] - 3.5).abs() < 1e-15);
        let lattice = SampleCoords::new(Tensor::from_fn(&[2, 2, 2, 3], |i| {
            let (p, a) = (i / 3, i % 3);
            ((p >> (2 - a)) & 1) as f64
        }))
        .unwrap();
        assert_eq!(grid_sample(&x, &lattice).unwrap().data(), x.data());
    }

    #[test]
    fn grid_sample_is_piecewise_linear_within_a_cell() {
        // bilinear interpolation is linear along each axis inside a cell
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 6, 6], &mut rng);
        let s = |p: [f64; 2]| {
            let coords = SampleCoords::new(Tensor::new(vec![1, 1, 2], p.to_vec()).unwrap()).unwrap();
            grid_sample(&x, &coords).unwrap()
        };
        for _ in 0..200 {
            let (r0, c0) = (rng.gen_range(0..5) as f64, rng.gen_range(0..5) as f64);
            let fixed = rng.gen::<f64>();
            let (u, v) = (rng.gen::<f64>(), rng.gen::<f64>());
            for axis in 0..2 {
                let pt = |t: f64| if axis == 0 { [r0 + t, c0 + fixed] } else { [r0 + fixed, c0 + t] };
                let (sa, sb, sm) = (s(pt(u)), s(pt(v)), s(pt(0.5 * (u + v))));
                for k in 0..2 {
                    assert!((sm.data()[k] - 0.5 * (sa.data()[k] + sb.data()[k])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 4, 5], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), x.data());

        let y = conv2d(&x, &Tensor::zeros(&[2, 1, 3, 3]), &Tensor::new(vec![2], vec![0.5, -2.0]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5]);
        assert!(y.data()[..20].iter().all(|&v| v == 0.5));
        assert!(y.data()[20..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn conv2d_averaging_on_constant_3x3() {
        // 3x3 averaging kernel over a constant 3x3 image of 9.0:
        // centre sees 9 pixels, edges 6, corners 4.
        let x = Tensor::full(&[1, 3, 3], 9.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap();
        let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, &Tensor::zeros(&[1])), Err(Error::Shape(_))));
    }

    #[test]
    fn conv2d_strided_matches_subsampled_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[2, 8, 6], &mut rng);
        let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let dense = conv2d(&x, &k, &b).unwrap();
        let strided = conv2d_strided(&x, &k, &b, 2).unwrap();
        assert_eq!(strided.shape(), &[3, 4, 3]);
        for co in 0..3 {
            for r in 0..4 {
                for c in 0..3 {
                    assert!((strided.at(&[co, r, c]) - dense.at(&[co, 2 * r, 2 * c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::full(&[4], 2.5), 0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax(&Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap(), 0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&Tensor::zeros(&[2, 2]), 2).is_err());
    }

    #[test]
    fn softmax_sums_to_one_on_many_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..1000 {
            let n = 1 + i % 9;
            let x = Tensor::from_fn(&[3, n], |_| rng.gen_range(-50.0..50.0));
            let y = softmax(&x, 1).unwrap();
            for row in y.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v > 0.0 || v == 0.0));
            }
            let y0 = softmax(&x, 0).unwrap();
            for j in 0..n {
                let s: f64 = (0..3).map(|r| y0.at(&[r, j])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        assert!(matches!(matmul(&a, &Tensor::zeros(&[3, 2])), Err(Error::Shape(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[5, 4], &mut rng);
        let c = rand_tensor(&[3, 5], &mut rng);
        assert!(matmul_nt(&a, &b).unwrap().max_abs_diff(&matmul(&a, &b.transpose().unwrap()).unwrap()) < 1e-14);
        assert!(matmul_tn(&a, &c).unwrap().max_abs_diff(&matmul(&a.transpose().unwrap(), &c).unwrap()) < 1e-14);
    }

    #[test]
    fn layer_norm_of_constant_is_beta() {
        let x = Tensor::full(&[2, 6], 3.7);
        let y = layer_norm(&x, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6]), LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[5, 8], &mut rng).scale(10.0);
        let y = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), LAYER_NORM_EPS).unwrap();
        for row in y.data().chunks(8) {
            let m = row.iter().sum::<f64>() / 8.0;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn token_layout_round_trip_and_channel_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&[3, 4, 2], &mut rng);
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.at(&[5, 1]), x.at(&[1, 2, 1]));
        assert_eq!(from_tokens(&t, 4, 2).unwrap(), x);
        let y = rand_tensor(&[2, 4, 2], &mut rng);
        let cat = concat_channels(&[&x, &y]).unwrap();
        let parts = split_channels(&cat, &[3, 2]).unwrap();
        assert_eq!(parts[0], x);
        assert_eq!(parts[1], y);
        let up = upsample_nearest2(&y).unwrap();
        assert_eq!(up.at(&[1, 7, 3]), y.at(&[1, 3, 1]));
        let padded = pad_bottom_right(&x, 6, 5).unwrap();
        assert_eq!(crop_top_left(&padded, 4, 2).unwrap(), x);
        assert_eq!(padded.at(&[0, 5, 4]), 0.0);
    }

    proptest! {
        #[test]
        fn conv2d_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&[2, 5, 6], &mut rng);
            let y = rand_tensor(&[2, 5, 6], &mut rng);
            let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let zero = Tensor::zeros(&[3]);
            let mut comb = x.scale(a);
            comb.axpy(b, &y).unwrap();
            let lhs = conv2d(&comb, &k, &zero).unwrap();
            let mut rhs = conv2d(&x, &k, &zero).unwrap().scale(a);
            rhs.axpy(b, &conv2d(&y, &k, &zero).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(seed in 0u64..1000, c in -100.0f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&[4, 5], &mut rng).scale(5.0);
            let a = softmax(&x, 1).unwrap();
            let b = softmax(&x.map(|v| v + c), 1).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
