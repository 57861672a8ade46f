//! Morph-patch feature extraction and the window machinery feeding spatial
//! attention.
//!
//! A patch of the tiled grid is described by its centre `p0` and the lattice
//! `R` of offsets `pn` covering it. With a deformation `phi`, each patch
//! samples the input at `p0 + pn + phi(p0 + pn)` and reduces the samples with
//! learnable spatial weights `w(pn)`.

use crate::diffeo::DeformationField;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{grid_sample, SampleCoords, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch: (usize, usize),
    pub image: (usize, usize),
    /// Patch centres `p0`, raster order.
    pub centers: Vec<(f64, f64)>,
    /// Offsets `pn` relative to the centre, raster order inside the patch.
    pub region_offsets: Vec<(f64, f64)>,
    /// Spatial weights `w(pn)`, shape `[ph * pw]`.
    pub spatial_weights: Tensor,
}

impl PatchGrid {
    /// Tiles an `h x w` image with `ph x pw` patches and uniform weights.
    pub fn new(h: usize, w: usize, patch: (usize, usize)) -> Result<Self> {
        let (ph, pw) = patch;
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::Argument(format!("{ph}x{pw} patches do not tile a {h}x{w} image")));
        }
        let cr = (ph as f64 - 1.0) / 2.0;
        let cc = (pw as f64 - 1.0) / 2.0;
        let mut centers = Vec::with_capacity((h / ph) * (w / pw));
        for i in 0..h / ph {
            for j in 0..w / pw {
                centers.push(((i * ph) as f64 + cr, (j * pw) as f64 + cc));
            }
        }
        let mut region_offsets = Vec::with_capacity(ph * pw);
        for a in 0..ph {
            for b in 0..pw {
                region_offsets.push((a as f64 - cr, b as f64 - cc));
            }
        }
        let spatial_weights = Tensor::full(&[ph * pw], 1.0 / (ph * pw) as f64);
        Ok(PatchGrid { patch, image: (h, w), centers, region_offsets, spatial_weights })
    }

    pub fn with_weights(mut self, weights: Tensor) -> Result<Self> {
        weights.expect_shape(&[self.region_offsets.len()])?;
        self.spatial_weights = weights;
        Ok(self)
    }

    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    /// Pixel `p0 + pn` for patch `i`, offset `n`. Centres and offsets are
    /// half-integers for even patch sizes, so the sum is an exact integer.
    fn pixel(&self, i: usize, n: usize) -> (usize, usize) {
        let (cr, cc) = self.centers[i];
        let (or, oc) = self.region_offsets[n];
        ((cr + or).round() as usize, (cc + oc).round() as usize)
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        x.expect_rank(3)?;
        if (x.shape()[1], x.shape()[2]) != self.image {
            return Err(shape_err!("patch grid built for {:?}, input is {:?}", self.image, x.shape()));
        }
        Ok(())
    }
}

/// Reference morph-patch kernel: for every patch centre `p0`,
/// `y(p0) = sum_pn w(pn) * x(p0 + pn + phi(p0 + pn))`. Returns `[N_patch, C]`.
pub fn morph_patch_extract(x: &Tensor, phi: &DeformationField, grid: &PatchGrid) -> Result<Tensor> {
    grid.check_image(x)?;
    if (phi.height(), phi.width()) != grid.image {
        return Err(shape_err!("deformation is {}x{}, image is {:?}", phi.height(), phi.width(), grid.image));
    }
    let (n_patch, n_reg) = (grid.num_patches(), grid.region_offsets.len());
    let (h, w) = grid.image;
    let off = phi.offsets().data();
    let mut coords = Vec::with_capacity(n_patch * n_reg * 2);
    for i in 0..n_patch {
        let (cr, cc) = grid.centers[i];
        for (n, &(or, oc)) in grid.region_offsets.iter().enumerate() {
            let (pr, pc) = grid.pixel(i, n);
            let p = pr * w + pc;
            coords.push(cr + or + off[p]);
            coords.push(cc + oc + off[h * w + p]);
        }
    }
    let coords = SampleCoords::new(Tensor::new(vec![n_patch, n_reg, 2], coords)?)?;
    let samples = grid_sample(x, &coords)?; // [C, N_patch, |R|]
    let c = x.shape()[0];
    let wts = grid.spatial_weights.data();
    let sd = samples.data();
    let mut out = vec![0.0; n_patch * c];
    for i in 0..n_patch {
        for k in 0..c {
            let base = (k * n_patch + i) * n_reg;
            out[i * c + k] = (0..n_reg).map(|n| wts[n] * sd[base + n]).sum();
        }
    }
    Ok(Tensor::from_parts(vec![n_patch, c], out))
}

/// Weighted pooling of every patch of `x` (no deformation). Returns `[N_patch, C]`.
pub fn patch_pool(x: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    grid.check_image(x)?;
    let (_, w) = grid.image;
    let c = x.shape()[0];
    let plane = x.shape()[1] * w;
    let wts = grid.spatial_weights.data();
    let mut out = vec![0.0; grid.num_patches() * c];
    for i in 0..grid.num_patches() {
        for k in 0..c {
            out[i * c + k] = (0..grid.region_offsets.len())
                .map(|n| {
                    let (pr, pc) = grid.pixel(i, n);
                    wts[n] * x.data()[k * plane + pr * w + pc]
                })
                .sum();
        }
    }
    Ok(Tensor::from_parts(vec![grid.num_patches(), c], out))
}

/// Dense warp: `out(p) = x(p + phi(p))` with bilinear sampling.
pub fn deform_features(x: &Tensor, phi: &DeformationField) -> Result<Tensor> {
    x.expect_rank(3)?;
    if (x.shape()[1], x.shape()[2]) != (phi.height(), phi.width()) {
        return Err(shape_err!("deformation {}x{} vs features {:?}", phi.height(), phi.width(), x.shape()));
    }
    grid_sample(x, &phi.sample_coords())
}

fn check_windows(h: usize, w: usize, win: (usize, usize)) -> Result<()> {
    if win.0 == 0 || win.1 == 0 || h % win.0 != 0 || w % win.1 != 0 {
        return Err(Error::Argument(format!("{}x{} windows do not tile {h}x{w}", win.0, win.1)));
    }
    Ok(())
}

/// `[C, H, W]` to non-overlapping windows `[N_win, wh * ww, C]` in raster order.
pub fn window_partition(x: &Tensor, win: (usize, usize)) -> Result<Tensor> {
    x.expect_rank(3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    check_windows(h, w, win)?;
    let (wh, ww) = win;
    let (nh, nw) = (h / wh, w / ww);
    let l = wh * ww;
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..nh {
        for bj in 0..nw {
            let widx = bi * nw + bj;
            for a in 0..wh {
                for b in 0..ww {
                    let t = a * ww + b;
                    let pix = (bi * wh + a) * w + bj * ww + b;
                    for k in 0..c {
                        out[(widx * l + t) * c + k] = xd[k * h * w + pix];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![nh * nw, l, c], out))
}

/// Inverse of [`window_partition`] for an `h x w` image.
pub fn window_merge(windows: &Tensor, h: usize, w: usize, win: (usize, usize)) -> Result<Tensor> {
    windows.expect_rank(3)?;
    check_windows(h, w, win)?;
    let (wh, ww) = win;
    let (nh, nw) = (h / wh, w / ww);
    let l = wh * ww;
    if windows.shape()[0] != nh * nw || windows.shape()[1] != l {
        return Err(shape_err!("{:?} windows cannot form a {h}x{w} image", windows.shape()));
    }
    let c = windows.shape()[2];
    let wd = windows.data();
    let mut out = vec![0.0; windows.len()];
    for bi in 0..nh {
        for bj in 0..nw {
            let widx = bi * nw + bj;
            for a in 0..wh {
                for b in 0..ww {
                    let t = a * ww + b;
                    let pix = (bi * wh + a) * w + bj * ww + b;
                    for k in 0..c {
                        out[k * h * w + pix] = wd[(widx * l + t) * c + k];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Toroidal roll of the spatial axes: `out[c, (r + sh) % H, (q + sw) % W] = x[c, r, q]`.
pub fn cyclic_shift(x: &Tensor, shift: (isize, isize)) -> Result<Tensor> {
    x.expect_rank(3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let sh = shift.0.rem_euclid(h as isize) as usize;
    let sw = shift.1.rem_euclid(w as isize) as usize;
    if sh == 0 && sw == 0 {
        return Ok(x.clone());
    }
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for k in 0..c {
        for r in 0..h {
            let dr = (r + sh) % h;
            for q in 0..w {
                out[k * h * w + dr * w + (q + sw) % w] = xd[k * h * w + r * w + q];
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Undoes [`cyclic_shift`] with the same `shift`.
pub fn cyclic_unshift(x: &Tensor, shift: (isize, isize)) -> Result<Tensor> {
    cyclic_shift(x, (-shift.0, -shift.1))
}
