//! Finite-difference oracle and the kernel / network gradient checks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{mpt_block_cached, window_attention_cached, BlockOptions, BlockParams, MhaParams, StageFields};
use crate::diffeo::{compose, exponentiate_traced, random_smooth_velocity, DeformationField, VelocityField};
use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::model::{dice_loss, saturate, MptNet, MptNetConfig, NetParams};
use crate::phantom::{generate, PhantomSpec};
use crate::sca::{sca_forward_cached, soft_assign, update_cores_from_assign, ClusterState, CoreUpdate, ScaParams};
use crate::tensor::{
    conv2d_strided, crop_top_left, gelu, layer_norm_cached, matmul, softmax, SampleCoords, Tensor, LAYER_NORM_EPS,
};

use super::attention::{mpt_block_backward, window_attention_backward};
use super::kernels::{
    compose_backward, conv2d_backward, exponentiate_backward, gelu_backward, grid_sample_backward, layer_norm_backward,
    matmul_backward, softmax_backward,
};
use super::network::{dice_loss_backward, loss_and_grad, saturate_backward};
use super::sca::{sca_backward, soft_assign_backward, update_cores_backward};
use super::store::Params;

/// Step used by the checks.
pub const FD_EPS: f64 = 1e-5;
/// Coordinates probed per tensor.
pub const FD_MAX_COORDS: usize = 200;

/// One probed coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSample {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdSample {
    pub fn rel_err(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// `(tensor index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub samples: Vec<FdSample>,
}

impl FdReport {
    /// Samples whose relative error exceeds `tol`.
    pub fn exceeding(&self, tol: f64) -> impl Iterator<Item = &FdSample> {
        self.samples.iter().filter(move |s| s.rel_err() > tol)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences of `f` on a random
/// subsample of at most `max_coords` coordinates per tensor.
pub fn finite_diff_check(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport> {
    if params.len() != analytic.len() {
        return Err(Error::Argument("one analytic gradient per parameter tensor required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut report = FdReport { max_rel_err: 0.0, worst: None, checked: 0, samples: Vec::new() };
    let eval = |w: &[Tensor]| -> Result<f64> {
        let v = f(w)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok(v)
    };
    for (t, (p, a)) in params.iter().zip(analytic).enumerate() {
        p.expect_same_shape(a)?;
        let n = p.len();
        let coords: Vec<usize> =
            if n <= max_coords { (0..n).collect() } else { sample(&mut rng, n, max_coords).into_vec() };
        for i in coords {
            let x0 = p.data()[i];
            work[t].data_mut()[i] = x0 + eps;
            let fp = eval(&work)?;
            work[t].data_mut()[i] = x0 - eps;
            let fm = eval(&work)?;
            work[t].data_mut()[i] = x0;
            let num = (fp - fm) / (2.0 * eps);
            let sample = FdSample { tensor: t, index: i, analytic: a.data()[i], numeric: num };
            let err = sample.rel_err();
            report.samples.push(sample);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}

/// Names accepted by [`check_kernel`].
pub const KERNELS: &[&str] = &[
    "grid_sample",
    "conv2d",
    "conv2d_strided",
    "softmax",
    "matmul",
    "layer_norm",
    "gelu",
    "saturate",
    "compose",
    "exponentiate",
    "soft_assign",
    "update_cores",
    "update_cores_verbatim",
    "sca_forward",
    "window_attention",
    "mpt_block",
    "dice_loss",
];

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn weighted(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Copies flat tensors into a parameter container, in visiting order.
fn fill<P: Params + Clone>(template: &P, values: &[Tensor]) -> P {
    let mut p = template.clone();
    let mut it = values.iter();
    p.visit_mut("", &mut |_, t| {
        let v = it.next().expect("value per parameter tensor");
        t.data_mut().copy_from_slice(v.data());
    });
    p
}

fn flat<P: Params>(p: &P) -> Vec<Tensor> {
    p.named().into_iter().map(|(_, t)| t.clone()).collect()
}

/// Checks a map `inputs -> y` against `loss = sum(r * y)` with random `r`.
fn check_map(
    inputs: Vec<Tensor>,
    forward: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    backward: &dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
    rng: &mut ChaCha8Rng,
    eps: f64,
) -> Result<FdReport> {
    let y = forward(&inputs)?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let grads = backward(&inputs, &r)?;
    let f = |w: &[Tensor]| -> Result<f64> { Ok(weighted(&forward(w)?, &r)) };
    finite_diff_check(&f, &inputs, &grads, eps, FD_MAX_COORDS, rng.gen())
}

fn smooth_field(h: usize, w: usize, v_max: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Ok(random_smooth_velocity(h, w, v_max, 2.0, rng)?.field().clone())
}

/// Runs the analytic-vs-numeric check for one kernel at [`FD_EPS`]; returns
/// the worst relative error.
pub fn check_kernel(name: &str, seed: u64) -> Result<f64> {
    Ok(kernel_report(name, seed, FD_EPS)?.max_rel_err)
}

/// Full per-coordinate report for one kernel at step `eps`. The inputs and
/// the sampled coordinates depend only on `seed`, so reports at different
/// steps line up sample by sample.
pub fn kernel_report(name: &str, seed: u64, eps: f64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    match name {
        "grid_sample" => {
            let x = uniform(&[2, 6, 7], -1.0, 1.0, rng);
            let mut c = uniform(&[5, 4, 2], 0.0, 1.0, rng);
            for (i, v) in c.data_mut().iter_mut().enumerate() {
                let ext = if i % 2 == 0 { 6.0 } else { 7.0 };
                *v = *v * (ext + 1.0) - 1.0;
            }
            check_map(
                vec![x, c],
                &|w| crate::tensor::grid_sample(&w[0], &SampleCoords::new(w[1].clone())?),
                &|w, r| {
                    let (gx, gc) = grid_sample_backward(&w[0], &SampleCoords::new(w[1].clone())?, r)?;
                    Ok(vec![gx, gc])
                },
                rng,
                eps,
            )
        }
        "conv2d" | "conv2d_strided" => {
            let stride = if name == "conv2d" { 1 } else { 2 };
            let x = uniform(&[3, 7, 6], -1.0, 1.0, rng);
            let k = uniform(&[4, 3, 3, 3], -1.0, 1.0, rng);
            let b = uniform(&[4], -1.0, 1.0, rng);
            check_map(
                vec![x, k, b],
                &|w| conv2d_strided(&w[0], &w[1], &w[2], stride),
                &|w, r| {
                    let (gx, gk, gb) = conv2d_backward(&w[0], &w[1], stride, r)?;
                    Ok(vec![gx, gk, gb])
                },
                rng,
                eps,
            )
        }
        "softmax" => {
            let x = uniform(&[3, 5, 4], -2.0, 2.0, rng);
            check_map(
                vec![x],
                &|w| softmax(&w[0], 1),
                &|w, r| Ok(vec![softmax_backward(&softmax(&w[0], 1)?, r, 1)?]),
                rng,
                eps,
            )
        }
        "matmul" => {
            let a = uniform(&[4, 5], -1.0, 1.0, rng);
            let b = uniform(&[5, 3], -1.0, 1.0, rng);
            check_map(
                vec![a, b],
                &|w| matmul(&w[0], &w[1]),
                &|w, r| {
                    let (ga, gb) = matmul_backward(&w[0], &w[1], r)?;
                    Ok(vec![ga, gb])
                },
                rng,
                eps,
            )
        }
        "layer_norm" => {
            let x = uniform(&[6, 8], -1.0, 1.0, rng);
            let g = uniform(&[8], 0.5, 1.5, rng);
            let b = uniform(&[8], -0.5, 0.5, rng);
            check_map(
                vec![x, g, b],
                &|w| Ok(layer_norm_cached(&w[0], &w[1], &w[2], LAYER_NORM_EPS)?.0),
                &|w, r| {
                    let (_, cache) = layer_norm_cached(&w[0], &w[1], &w[2], LAYER_NORM_EPS)?;
                    let (gx, gg, gb) = layer_norm_backward(&cache, &w[1], r)?;
                    Ok(vec![gx, gg, gb])
                },
                rng,
                eps,
            )
        }
        "gelu" => {
            let x = uniform(&[40], -3.0, 3.0, rng);
            check_map(vec![x], &|w| Ok(gelu(&w[0])), &|w, r| Ok(vec![gelu_backward(&w[0], r)?]), rng, eps)
        }
        "saturate" => {
            let u = uniform(&[2, 4, 5], -3.0, 3.0, rng);
            check_map(vec![u], &|w| saturate(&w[0], 4.0), &|w, r| Ok(vec![saturate_backward(&w[0], 4.0, r)?]), rng, eps)
        }
        "compose" => {
            let outer = smooth_field(12, 12, 1.5, rng)?;
            let inner = smooth_field(12, 12, 1.5, rng)?;
            check_map(
                vec![outer, inner],
                &|w| {
                    let (o, i) = (DeformationField::new(w[0].clone(), 1)?, DeformationField::new(w[1].clone(), 1)?);
                    Ok(compose(&o, &i)?.into_offsets())
                },
                &|w, r| {
                    let (o, i) = (DeformationField::new(w[0].clone(), 1)?, DeformationField::new(w[1].clone(), 1)?);
                    let (go, gi) = compose_backward(&o, &i, r)?;
                    Ok(vec![go, gi])
                },
                rng,
                eps,
            )
        }
        "exponentiate" => {
            let v = smooth_field(12, 12, 2.0, rng)?;
            check_map(
                vec![v],
                &|w| Ok(exponentiate_traced(&VelocityField::unbounded(w[0].clone())?, 5)?.0.into_offsets()),
                &|w, r| {
                    let (_, trace) = exponentiate_traced(&VelocityField::unbounded(w[0].clone())?, 5)?;
                    Ok(vec![exponentiate_backward(&trace, r)?])
                },
                rng,
                eps,
            )
        }
        "soft_assign" => {
            let f = uniform(&[7, 4], -1.0, 1.0, rng);
            let cs = ClusterState::random(3, 4, 1.0, rng)?;
            let beta = cs.beta;
            check_map(
                vec![f, cs.cores.clone(), cs.lambda.clone(), cs.mu.clone()],
                &|w| soft_assign(&w[0], &ClusterState::from_parts(w[1].clone(), w[2].clone(), w[3].clone(), beta)?),
                &|w, r| {
                    let cs = ClusterState::from_parts(w[1].clone(), w[2].clone(), w[3].clone(), beta)?;
                    let g = soft_assign(&w[0], &cs)?;
                    let (gf, gl, gm) = soft_assign_backward(&w[0], &cs, &g, r)?;
                    Ok(vec![gf, Tensor::zeros(w[1].shape()), gl, gm])
                },
                rng,
                eps,
            )
        }
        "update_cores" | "update_cores_verbatim" => {
            let mode = if name == "update_cores" { CoreUpdate::Residual } else { CoreUpdate::Verbatim };
            let f = uniform(&[7, 4], -1.0, 1.0, rng);
            let g = softmax(&uniform(&[7, 3], -1.0, 1.0, rng), 1)?;
            let cores = uniform(&[3, 4], -1.0, 1.0, rng);
            check_map(
                vec![f, g, cores],
                &|w| Ok(update_cores_from_assign(&w[0], &w[1], &w[2], mode)?.0),
                &|w, r| {
                    let (_, cache) = update_cores_from_assign(&w[0], &w[1], &w[2], mode)?;
                    let (gf, gg, gc) = update_cores_backward(&w[0], &w[2], &cache, mode, r)?;
                    Ok(vec![gf, gg, gc])
                },
                rng,
                eps,
            )
        }
        "sca_forward" => {
            let f = uniform(&[9, 8], -1.0, 1.0, rng);
            let nc = uniform(&[3, 8], -1.0, 1.0, rng);
            let p = ScaParams::random(8, 2, rng)?;
            let (heads, scale) = (p.heads, p.scale);
            let mk =
                move |w: &[Tensor]| ScaParams { wq: w[2].clone(), wk: w[3].clone(), wv: w[4].clone(), heads, scale };
            check_map(
                vec![f, nc, p.wq.clone(), p.wk.clone(), p.wv.clone()],
                &|w| Ok(sca_forward_cached(&w[0], &w[1], &mk(w))?.0),
                &|w, r| {
                    let p = mk(w);
                    let (_, cache) = sca_forward_cached(&w[0], &w[1], &p)?;
                    let (gf, gn, gp) = sca_backward(&w[0], &w[1], &p, &cache, r)?;
                    Ok(vec![gf, gn, gp.wq, gp.wk, gp.wv])
                },
                rng,
                eps,
            )
        }
        "window_attention" => {
            let template = MhaParams::random(8, 2, (2, 2), rng)?;
            let mut inputs = vec![uniform(&[3, 4, 8], -1.0, 1.0, rng)];
            inputs.extend(flat(&template));
            let t2 = template.clone();
            check_map(
                inputs,
                &|w| Ok(window_attention_cached(&w[0], &fill(&template, &w[1..]))?.0),
                &|w, r| {
                    let p = fill(&t2, &w[1..]);
                    let (_, cache) = window_attention_cached(&w[0], &p)?;
                    let (gx, gp) = window_attention_backward(&p, &cache, r)?;
                    let mut out = vec![gx];
                    out.extend(flat(&gp));
                    Ok(out)
                },
                rng,
                eps,
            )
        }
        "mpt_block" => check_block(rng, eps),
        "dice_loss" => {
            let logits = uniform(&[3, 5, 6], -2.0, 2.0, rng);
            let labels = (0..30).map(|_| rng.gen_range(0..3u8)).collect();
            let target = SegMask::new(5, 6, labels, 3)?;
            let (_, g) = dice_loss_backward(&logits, &target)?;
            let f = |w: &[Tensor]| dice_loss(&w[0], &target);
            finite_diff_check(&f, &[logits], &[g], eps, FD_MAX_COORDS, rng.gen())
        }
        other => Err(Error::Argument(format!("unknown kernel '{other}' (known: {})", KERNELS.join(", ")))),
    }
}

fn check_block(rng: &mut ChaCha8Rng, eps: f64) -> Result<FdReport> {
    let (c, h, w) = (8, 8, 8);
    let mut template = BlockParams::random(c, 2, (4, 4), Some(3), 2, 1.0, rng)?;
    template.mlp.b1 = uniform(template.mlp.b1.shape(), -0.5, 0.5, rng);
    template.norm_attn.gamma = uniform(&[c], 0.5, 1.5, rng);
    let opts = BlockOptions::shifted((4, 4));
    let fwd = smooth_field(h, w, 1.5, rng)?;
    let inv = smooth_field(h, w, 1.5, rng)?;
    let mut inputs = vec![uniform(&[c, h, w], -1.0, 1.0, rng), fwd, inv];
    inputs.extend(flat(&template));
    let fields = |w: &[Tensor]| -> Result<StageFields> {
        Ok(StageFields {
            forward: DeformationField::new(w[1].clone(), 1)?,
            inverse: DeformationField::new(w[2].clone(), 1)?,
        })
    };
    let t2 = template.clone();
    check_map(
        inputs,
        &|w| Ok(mpt_block_cached(&w[0], Some(&fields(w)?), &fill(&template, &w[3..]), &opts)?.0),
        &|w, r| {
            let p = fill(&t2, &w[3..]);
            let sf = fields(w)?;
            let (_, cache) = mpt_block_cached(&w[0], Some(&sf), &p, &opts)?;
            let g = mpt_block_backward(Some(&sf), &p, &opts, &cache, r)?;
            let (gf, gi) = g.fields.expect("morph path enabled");
            let mut out = vec![g.input, gf, gi];
            out.extend(flat(&g.params));
            Ok(out)
        },
        rng,
        eps,
    )
}

/// Network configuration and input used by the whole-network check.
pub fn network_check_setup(seed: u64) -> Result<(MptNet, Tensor, SegMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = MptNet::new(MptNetConfig::default(), rng.gen())?;
    // velocities of about a pixel, so sampling points sit inside cells
    for s in &mut net.params.stages {
        if let Some(vp) = s.vp.as_mut() {
            vp.conv2.weight = Tensor::from_fn(vp.conv2.weight.shape(), |_| rng.gen_range(-0.3..0.3));
        }
    }
    let spec = PhantomSpec { seed: rng.gen(), ..PhantomSpec::curved() };
    let (img, mask) = generate(&spec)?;
    let img = crop_top_left(&img, 16, 16)?;
    let mask = SegMask::from_tensor(&crop_top_left(&mask.to_tensor(), 16, 16)?, 2)?;
    Ok((net, img, mask))
}

/// Whole-network check: Dice loss of the forward pass against every
/// parameter tensor. Returns the worst relative error.
pub fn check_network(seed: u64) -> Result<FdReport> {
    let (net, img, mask) = network_check_setup(seed)?;
    let (_, grads, _) = loss_and_grad(&net, &img, &mask)?;
    let values = flat(&net.params);
    let analytic = flat(&grads);
    let template: NetParams = net.params.clone();
    let f = |w: &[Tensor]| -> Result<f64> {
        let probe = MptNet { config: net.config.clone(), params: fill(&template, w) };
        dice_loss(&probe.forward(&img)?, &mask)
    };
    finite_diff_check(&f, &values, &analytic, FD_EPS, FD_MAX_COORDS, seed ^ 0x5eed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_fn(&[10], |i| i as f64 * 0.3 - 1.0);
        let g = x.scale(2.0);
        let f = |w: &[Tensor]| -> Result<f64> { Ok(w[0].data().iter().map(|v| v * v).sum()) };
        let r = finite_diff_check(&f, &[x], &[g], FD_EPS, FD_MAX_COORDS, 0).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.checked, 10);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::full(&[4], 3.0);
        let f = |_: &[Tensor]| -> Result<f64> { Ok(1.5) };
        let r = finite_diff_check(&f, &[x], &[Tensor::zeros(&[4])], FD_EPS, FD_MAX_COORDS, 0).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = |_: &[Tensor]| -> Result<f64> { Ok(f64::NAN) };
        let r = finite_diff_check(&f, &[Tensor::zeros(&[1])], &[Tensor::zeros(&[1])], FD_EPS, 10, 0);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn subsample_is_capped() {
        let x = Tensor::zeros(&[1000]);
        let f = |w: &[Tensor]| -> Result<f64> { Ok(w[0].sum()) };
        let r = finite_diff_check(&f, &[x], &[Tensor::full(&[1000], 1.0)], FD_EPS, FD_MAX_COORDS, 0).unwrap();
        assert_eq!(r.checked, FD_MAX_COORDS);
    }

    #[test]
    fn unknown_kernel_rejected() {
        assert!(check_kernel("nope", 0).is_err());
    }
}
