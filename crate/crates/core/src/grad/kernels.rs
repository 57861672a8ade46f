//! Backward passes of the primitive tensor kernels and of scaling-and-squaring.

use crate::diffeo::{DeformationField, ExpTrace};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    col2im, conv_geom, gelu_derivative, im2col, matmul_nt, matmul_tn, stencil, LayerNormCache, SampleCoords, Tensor,
};

/// Gradients of `grid_sample(x, coords)` with respect to the image and to the
/// absolute coordinates (`[.., 2]`, same layout as `coords`).
///
/// Clamped coordinates receive zero gradient. At exact lattice points the
/// derivative of the cell to the right/below is used.
pub fn grid_sample_backward(x: &Tensor, coords: &SampleCoords, gy: &Tensor) -> Result<(Tensor, Tensor)> {
    if coords.spatial_rank() != 2 || x.rank() != 3 {
        return Err(Error::Argument("grid_sample_backward supports 2-D sampling only".into()));
    }
    let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let grid = coords.grid_shape();
    let n: usize = grid.iter().product();
    let mut expect = vec![ch];
    expect.extend_from_slice(grid);
    gy.expect_shape(&expect)?;
    let cd = coords.tensor().data();
    let (xd, gd) = (x.data(), gy.data());
    let plane = h * w;
    let mut gx = vec![0.0; x.len()];
    let mut gc = vec![0.0; 2 * n];
    for p in 0..n {
        let sr = stencil(cd[2 * p], h);
        let sc = stencil(cd[2 * p + 1], w);
        let (fr, fc) = (sr.frac, sc.frac);
        let (a, b, c, d) = (sr.i0 * w + sc.i0, sr.i0 * w + sc.i1, sr.i1 * w + sc.i0, sr.i1 * w + sc.i1);
        let (w00, w01, w10, w11) = ((1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc);
        let (mut dr, mut dc) = (0.0, 0.0);
        for k in 0..ch {
            let base = k * plane;
            let g = gd[k * n + p];
            if g == 0.0 {
                continue;
            }
            gx[base + a] += g * w00;
            gx[base + b] += g * w01;
            gx[base + c] += g * w10;
            gx[base + d] += g * w11;
            let (x00, x01, x10, x11) = (xd[base + a], xd[base + b], xd[base + c], xd[base + d]);
            dr += g * ((1.0 - fc) * (x10 - x00) + fc * (x11 - x01));
            dc += g * ((1.0 - fr) * (x01 - x00) + fr * (x11 - x10));
        }
        gc[2 * p] = dr * sr.slope;
        gc[2 * p + 1] = dc * sc.slope;
    }
    let mut cshape = grid.to_vec();
    cshape.push(2);
    Ok((Tensor::from_parts(x.shape().to_vec(), gx), Tensor::from_parts(cshape, gc)))
}

/// Gradients of `conv2d_strided(x, kernel, bias, stride)`: `(gx, gkernel, gbias)`.
pub fn conv2d_backward(x: &Tensor, kernel: &Tensor, stride: usize, gy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geom(x, kernel, stride)?;
    gy.expect_shape(&[g.cout, g.oh, g.ow])?;
    let npix = g.oh * g.ow;
    let taps = g.cin * g.k * g.k;
    let gb: Vec<f64> = gy.data().chunks_exact(npix).map(|p| p.iter().sum()).collect();
    let gy2 = Tensor::from_parts(vec![g.cout, npix], gy.data().to_vec());
    let cols = Tensor::from_parts(vec![taps, npix], im2col(x.data(), &g));
    let w2 = Tensor::from_parts(vec![g.cout, taps], kernel.data().to_vec());
    let gk = matmul_nt(&gy2, &cols)?;
    let gcols = matmul_tn(&w2, &gy2)?;
    Ok((
        Tensor::from_parts(x.shape().to_vec(), col2im(gcols.data(), &g)),
        Tensor::from_parts(kernel.shape().to_vec(), gk.into_data()),
        Tensor::from_parts(vec![g.cout], gb),
    ))
}

/// Backward of a softmax along `axis`, given its output `y`:
/// `gx = y * (gy - sum(gy * y))` along the axis.
pub fn softmax_backward(y: &Tensor, gy: &Tensor, axis: usize) -> Result<Tensor> {
    y.expect_same_shape(gy)?;
    if axis >= y.rank() {
        return Err(shape_err!("softmax axis {axis} out of range for {:?}", y.shape()));
    }
    let n = y.shape()[axis];
    let inner: usize = y.shape()[axis + 1..].iter().product();
    let outer: usize = y.shape()[..axis].iter().product();
    let (yd, gd) = (y.data(), gy.data());
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
            for k in 0..n {
                gx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), gx))
}

/// In-place row softmax backward on contiguous rows of length `n`.
pub(crate) fn softmax_rows_backward(y: &[f64], gy: &mut [f64], n: usize) {
    for (yr, gr) in y.chunks_exact(n).zip(gy.chunks_exact_mut(n)) {
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for (g, &p) in gr.iter_mut().zip(yr) {
            *g = p * (*g - dot);
        }
    }
}

/// Gradients of `a · b`: `(gy bᵀ, aᵀ gy)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(gy, b)?, matmul_tn(a, gy)?))
}

/// Gradients of layer norm over the last axis: `(gx, ggamma, gbeta)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    cache.xhat.expect_same_shape(gy)?;
    let c = gamma.len();
    let (xh, gd, g) = (cache.xhat.data(), gy.data(), gamma.data());
    let mut gx = vec![0.0; gy.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut gxhat = vec![0.0; c];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let row = r * c..(r + 1) * c;
        let (xr, gr) = (&xh[row.clone()], &gd[row.clone()]);
        for j in 0..c {
            ggamma[j] += gr[j] * xr[j];
            gbeta[j] += gr[j];
            gxhat[j] = gr[j] * g[j];
        }
        let s1: f64 = gxhat.iter().sum::<f64>() / c as f64;
        let s2: f64 = gxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for (j, out) in gx[row].iter_mut().enumerate() {
            *out = rs * (gxhat[j] - s1 - xr[j] * s2);
        }
    }
    Ok((
        Tensor::from_parts(gy.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    ))
}

/// Backward of elementwise GELU given its input.
pub fn gelu_backward(x: &Tensor, gy: &Tensor) -> Result<Tensor> {
    x.zip_map(gy, |v, g| g * gelu_derivative(v))
}

fn coords_to_offsets(gc: &Tensor, h: usize, w: usize) -> Tensor {
    let d = gc.data();
    Tensor::from_fn(&[2, h, w], |i| {
        let (axis, p) = (i / (h * w), i % (h * w));
        d[2 * p + axis]
    })
}

/// Gradients of `compose(outer, inner)` with respect to both offset fields.
pub fn compose_backward(outer: &DeformationField, inner: &DeformationField, gout: &Tensor) -> Result<(Tensor, Tensor)> {
    gout.expect_same_shape(outer.offsets())?;
    let (h, w) = (outer.height(), outer.width());
    let (gouter, gc) = grid_sample_backward(outer.offsets(), &inner.sample_coords(), gout)?;
    let mut ginner = coords_to_offsets(&gc, h, w);
    ginner.add_assign(gout)?;
    Ok((gouter, ginner))
}

/// Gradient of `exponentiate` with respect to the velocity, by walking the
/// recorded squaring steps backwards.
pub fn exponentiate_backward(trace: &ExpTrace, gphi: &Tensor) -> Result<Tensor> {
    let mut g = gphi.clone();
    for field in trace.fields.iter().rev() {
        let (gouter, ginner) = compose_backward(field, field, &g)?;
        g = gouter;
        g.add_assign(&ginner)?;
    }
    Ok(g.scale(1.0 / (1u64 << trace.steps) as f64))
}

/// Gradient of a warp `grid_sample(x, lattice + offsets)` with respect to
/// the offsets (`[2, H, W]`) and the image.
pub fn warp_backward(x: &Tensor, phi: &DeformationField, gy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (gx, gc) = grid_sample_backward(x, &phi.sample_coords(), gy)?;
    Ok((gx, coords_to_offsets(&gc, phi.height(), phi.width())))
}
