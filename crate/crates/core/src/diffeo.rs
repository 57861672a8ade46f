//! Stationary velocity fields and their exponentiation into diffeomorphic
//! deformation fields by scaling and squaring.
//!
//! A deformation is stored as its displacement from the identity,
//! `phi(x) = x + offset(x)`, as a `[2, H, W]` tensor of (row, col) offsets in
//! pixels. Composition samples the outer field at the inner-warped positions
//! with clamp-to-border bilinear interpolation, so results are exact only
//! away from the image border.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{grid_sample, SampleCoords, Tensor};

/// Squaring steps used when none are specified.
pub const DEFAULT_STEPS: usize = 7;

fn expect_field(t: &Tensor) -> Result<(usize, usize)> {
    t.expect_rank(3)?;
    if t.shape()[0] != 2 {
        return Err(shape_err!("vector field must be [2,H,W], got {:?}", t.shape()));
    }
    Ok((t.shape()[1], t.shape()[2]))
}

/// Largest per-pixel Euclidean norm of a `[2, H, W]` field.
pub fn max_norm(field: &Tensor) -> f64 {
    let plane = field.len() / 2;
    let d = field.data();
    (0..plane).map(|p| d[p].hypot(d[plane + p])).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    field: Tensor,
    v_max: f64,
}

impl VelocityField {
    /// Wraps a `[2, H, W]` tensor, checking that no pixel exceeds `v_max`.
    pub fn new(field: Tensor, v_max: f64) -> Result<Self> {
        expect_field(&field)?;
        field.validate()?;
        let m = max_norm(&field);
        if m > v_max {
            return Err(Error::Argument(format!("velocity norm {m} exceeds declared bound {v_max}")));
        }
        Ok(VelocityField { field, v_max })
    }

    /// Wraps a field, recording its observed maximum norm as the bound.
    pub fn unbounded(field: Tensor) -> Result<Self> {
        expect_field(&field)?;
        field.validate()?;
        let m = max_norm(&field);
        Ok(VelocityField { field, v_max: m })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        VelocityField { field: Tensor::zeros(&[2, h, w]), v_max: 0.0 }
    }

    /// A spatially constant field.
    pub fn constant(h: usize, w: usize, row: f64, col: f64) -> Self {
        let plane = h * w;
        let field = Tensor::from_fn(&[2, h, w], |i| if i < plane { row } else { col });
        VelocityField { field, v_max: row.hypot(col) }
    }

    pub fn field(&self) -> &Tensor {
        &self.field
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn height(&self) -> usize {
        self.field.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.field.shape()[2]
    }

    pub fn negate(&self) -> Self {
        VelocityField { field: self.field.scale(-1.0), v_max: self.v_max }
    }

    pub fn scale(&self, s: f64) -> Self {
        VelocityField { field: self.field.scale(s), v_max: self.v_max * s.abs() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    offsets: Tensor,
    steps: usize,
}

impl DeformationField {
    pub fn new(offsets: Tensor, steps: usize) -> Result<Self> {
        expect_field(&offsets)?;
        offsets.validate()?;
        Ok(DeformationField { offsets, steps })
    }

    pub(crate) fn from_offsets(offsets: Tensor, steps: usize) -> Self {
        DeformationField { offsets, steps }
    }

    pub fn identity(h: usize, w: usize) -> Self {
        DeformationField { offsets: Tensor::zeros(&[2, h, w]), steps: 0 }
    }

    /// `phi(x) = x + (row, col)` everywhere.
    pub fn translation(h: usize, w: usize, row: f64, col: f64) -> Self {
        let plane = h * w;
        let offsets = Tensor::from_fn(&[2, h, w], |i| if i < plane { row } else { col });
        DeformationField { offsets, steps: 0 }
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    pub fn into_offsets(self) -> Tensor {
        self.offsets
    }

    /// Number of squaring steps that produced this field (0 if built directly).
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn height(&self) -> usize {
        self.offsets.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.offsets.shape()[2]
    }

    /// Absolute sampling positions `x + offset(x)`.
    pub fn sample_coords(&self) -> SampleCoords {
        SampleCoords::from_offsets(&self.offsets).expect("deformation offsets are finite")
    }

    pub fn is_identity(&self) -> bool {
        self.offsets.data().iter().all(|&v| v == 0.0)
    }
}

/// `outer ∘ inner`: `offset(x) = inner(x) + outer(x + inner(x))`.
pub fn compose(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    outer.offsets.expect_same_shape(&inner.offsets)?;
    let coords = inner.sample_coords();
    let mut out = grid_sample(&outer.offsets, &coords)?;
    out.add_assign(&inner.offsets)?;
    Ok(DeformationField::from_offsets(out, outer.steps.max(inner.steps)))
}

/// Intermediate fields of a scaling-and-squaring run, kept for the backward
/// pass. `fields[i]` is the field squared at step `i`.
#[derive(Clone, Debug)]
pub struct ExpTrace {
    pub fields: Vec<DeformationField>,
    pub steps: usize,
}

/// Integrates a stationary velocity field over unit time: start from
/// `Id + v / 2^n` and square the field `n` times.
pub fn exponentiate(v: &VelocityField, n: usize) -> Result<DeformationField> {
    exponentiate_traced(v, n).map(|(phi, _)| phi)
}

pub fn exponentiate_traced(v: &VelocityField, n: usize) -> Result<(DeformationField, ExpTrace)> {
    if n < 1 {
        return Err(Error::Argument("exponentiate needs at least one squaring step".into()));
    }
    let dt = 1.0 / (1u64 << n) as f64;
    let mut phi = DeformationField::from_offsets(v.field.scale(dt), n);
    let mut fields = Vec::with_capacity(n);
    for _ in 0..n {
        let next = compose(&phi, &phi)?;
        fields.push(std::mem::replace(&mut phi, next));
    }
    phi.steps = n;
    Ok((phi, ExpTrace { fields, steps: n }))
}

/// Inverse deformation, obtained by exponentiating the negated velocity.
pub fn invert(v: &VelocityField, n: usize) -> Result<DeformationField> {
    exponentiate(&v.negate(), n)
}

/// Per-pixel determinant of the Jacobian of `x + offset(x)`, using central
/// differences inside the image and one-sided differences on the border.
pub fn jacobian_determinant(phi: &DeformationField) -> Result<Tensor> {
    let (h, w) = (phi.height(), phi.width());
    if h < 3 || w < 3 {
        return Err(Error::Argument(format!("jacobian needs at least 3x3 pixels, got {h}x{w}")));
    }
    let d = phi.offsets.data();
    let plane = h * w;
    let at = |c: usize, r: usize, q: usize| d[c * plane + r * w + q];
    let diff = |c: usize, r: usize, q: usize, along_rows: bool| -> f64 {
        let (i, n) = if along_rows { (r, h) } else { (q, w) };
        let get = |k: usize| if along_rows { at(c, k, q) } else { at(c, r, k) };
        if i == 0 {
            get(1) - get(0)
        } else if i == n - 1 {
            get(n - 1) - get(n - 2)
        } else {
            0.5 * (get(i + 1) - get(i - 1))
        }
    };
    let mut out = vec![0.0; plane];
    for r in 0..h {
        for q in 0..w {
            let a = 1.0 + diff(0, r, q, true);
            let b = diff(0, r, q, false);
            let c = diff(1, r, q, true);
            let e = 1.0 + diff(1, r, q, false);
            out[r * w + q] = a * e - b * c;
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Smallest determinant over pixels at least `margin` away from every border.
pub fn min_interior_jacobian(phi: &DeformationField, margin: usize) -> Result<f64> {
    let j = jacobian_determinant(phi)?;
    let (h, w) = (phi.height(), phi.width());
    let mut m = f64::INFINITY;
    for r in margin..h.saturating_sub(margin) {
        for q in margin..w.saturating_sub(margin) {
            m = m.min(j.data()[r * w + q]);
        }
    }
    Ok(m)
}

/// Largest offset norm over pixels at least `margin` from every border.
pub fn max_interior_norm(field: &Tensor, margin: usize) -> f64 {
    let (h, w) = (field.shape()[1], field.shape()[2]);
    let plane = h * w;
    let d = field.data();
    let mut m: f64 = 0.0;
    for r in margin..h.saturating_sub(margin) {
        for q in margin..w.saturating_sub(margin) {
            let p = r * w + q;
            m = m.max(d[p].hypot(d[plane + p]));
        }
    }
    m
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of every plane of a `[C, H, W]` tensor,
/// clamping at the border.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    x.expect_rank(3)?;
    if sigma <= 0.0 {
        return Ok(x.clone());
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for q in 0..w {
                tmp[ch * h * w + r * w + q] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * src[r * w + clampi(q as isize + t as isize - rad, w)])
                    .sum();
            }
        }
        for r in 0..h {
            for q in 0..w {
                out[ch * h * w + r * w + q] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * tmp[ch * h * w + clampi(r as isize + t as isize - rad, h) * w + q])
                    .sum();
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Gaussian-smoothed white noise rescaled so its largest pixel norm is
/// exactly `v_max`.
pub fn random_smooth_velocity<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    v_max: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<VelocityField> {
    let noise = Tensor::from_fn(&[2, h, w], |_| rng.sample(StandardNormal));
    let smooth = gaussian_blur(&noise, sigma)?;
    let m = max_norm(&smooth);
    let field = if m > 0.0 { smooth.scale(v_max / m) } else { smooth };
    VelocityField::unbounded(field)
}
