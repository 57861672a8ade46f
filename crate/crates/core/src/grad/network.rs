//! Backward pass of the full network and of the Dice loss.

use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::model::{
    class_probabilities, class_sums, ConvParams, MptNet, NetCache, NetParams, StageParams, VelocityCache,
    VelocityPredictor, DICE_SMOOTH,
};
use crate::tensor::{pad_bottom_right, split_channels, Tensor};

use super::attention::mpt_block_backward;
use super::kernels::{conv2d_backward, exponentiate_backward, gelu_backward, softmax_backward};

/// Dice loss and its gradient with respect to the logits.
pub fn dice_loss_backward(logits: &Tensor, target: &SegMask) -> Result<(f64, Tensor)> {
    let p = class_probabilities(logits, target)?;
    let (k, n) = (p.shape()[0], target.height() * target.width());
    let mut loss = 0.0;
    let mut gp = vec![0.0; k * n];
    for c in 0..k {
        let (inter, ps, ts) = class_sums(&p, target, c, n);
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = ps + ts + DICE_SMOOTH;
        loss += num / den;
        for (j, &l) in target.labels().iter().enumerate() {
            let t = if l as usize == c { 1.0 } else { 0.0 };
            gp[c * n + j] = -(2.0 * t * den - num) / (den * den * k as f64);
        }
    }
    let gp = Tensor::from_parts(p.shape().to_vec(), gp);
    Ok((1.0 - loss / k as f64, softmax_backward(&p, &gp, 0)?))
}

/// Backward of [`crate::model::saturate`].
pub fn saturate_backward(raw: &Tensor, v_max: f64, gv: &Tensor) -> Result<Tensor> {
    raw.expect_same_shape(gv)?;
    let n = raw.shape()[1] * raw.shape()[2];
    let (u, g) = (raw.data(), gv.data());
    let mut out = vec![0.0; 2 * n];
    for p in 0..n {
        let (a, b) = (u[p], u[n + p]);
        let s = 1.0 / (1.0 + a * a + b * b).sqrt();
        let s3 = s * s * s;
        // J = v_max (s I - s^3 u u^T), symmetric
        let dot = a * g[p] + b * g[n + p];
        out[p] = v_max * (s * g[p] - s3 * a * dot);
        out[n + p] = v_max * (s * g[n + p] - s3 * b * dot);
    }
    Ok(Tensor::from_parts(raw.shape().to_vec(), out))
}

fn conv_back(p: &ConvParams, input: &Tensor, stride: usize, gy: &Tensor) -> Result<(Tensor, ConvParams)> {
    let (gx, gw, gb) = conv2d_backward(input, &p.weight, stride, gy)?;
    Ok((gx, ConvParams { weight: gw, bias: gb }))
}

/// Backward of the velocity predictor: `(ginput, param grads)`.
pub fn velocity_backward(
    vp: &VelocityPredictor,
    cache: &VelocityCache,
    gv: &Tensor,
) -> Result<(Tensor, VelocityPredictor)> {
    let graw = saturate_backward(&cache.raw, vp.v_max, gv)?;
    let (ghidden, gconv2) = conv_back(&vp.conv2, &cache.hidden, 1, &graw)?;
    let gpre = gelu_backward(&cache.pre, &ghidden)?;
    let (gx, gconv1) = conv_back(&vp.conv1, &cache.input, 1, &gpre)?;
    Ok((gx, VelocityPredictor { conv1: gconv1, conv2: gconv2, v_max: vp.v_max }))
}

/// Sums `2 x 2` blocks: backward of nearest-neighbour 2x upsampling.
pub fn upsample_nearest2_backward(gy: &Tensor) -> Result<Tensor> {
    gy.expect_rank(3)?;
    let (c, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::Shape(format!("upsampled gradient has odd extent {:?}", gy.shape())));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        for r in 0..oh {
            for q in 0..ow {
                out[(k * h + r / 2) * w + q / 2] += gy.data()[(k * oh + r) * ow + q];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Gradients of all network parameters given the gradient of the (cropped)
/// logits.
pub fn network_backward(net: &MptNet, cache: &NetCache, glogits: &Tensor) -> Result<NetParams> {
    let cfg = &net.config;
    let p = &net.params;
    let (ph, pw) = cache.padded;
    let g = pad_bottom_right(glogits, ph, pw)?;
    let (mut g, head) = conv_back(&p.head, &cache.head_input, 1, &g)?;

    let mut skip: Vec<Option<Tensor>> = vec![None; cfg.stages];
    let mut decoder = Vec::with_capacity(cfg.stages - 1);
    for s in 0..cfg.stages - 1 {
        let dc = &cache.decoder[s];
        let gpre = gelu_backward(&dc.pre, &g)?;
        let (gin, gconv) = conv_back(&p.decoder[s], &dc.input, 1, &gpre)?;
        decoder.push(gconv);
        let parts = split_channels(&gin, &[cfg.channels(s + 1), cfg.channels(s)])?;
        skip[s] = Some(parts[1].clone());
        g = upsample_nearest2_backward(&parts[0])?;
    }
    // `g` now flows into the deepest stage output
    let mut carry = Some(g);
    let mut stages: Vec<Option<StageParams>> = vec![None; cfg.stages];
    for s in (0..cfg.stages).rev() {
        let sp = &p.stages[s];
        let sc = &cache.stages[s];
        // gradient of the stage output: skip path plus the downsampling path
        let mut g = skip[s].take().unwrap_or_else(|| Tensor::zeros(sc.output.shape()));
        let down = match (&sp.down, &sc.down_pre) {
            (Some(d), Some(pre)) => {
                let gnext = carry.take().ok_or_else(|| Error::MissingContext("stage input gradient".into()))?;
                let gpre = gelu_backward(pre, &gnext)?;
                let (gx, gd) = conv_back(d, &sc.output, 2, &gpre)?;
                g.add_assign(&gx)?;
                Some(gd)
            }
            (None, None) => {
                let gnext = carry.take().ok_or_else(|| Error::MissingContext("stage output gradient".into()))?;
                g.add_assign(&gnext)?;
                None
            }
            _ => return Err(Error::MissingContext("downsampling cache mismatch".into())),
        };
        let mut gfwd = sc.fields.as_ref().map(|f| Tensor::zeros(f.forward.offsets().shape()));
        let mut ginv = gfwd.clone();
        let mut blocks = vec![None; sp.blocks.len()];
        for b in (0..sp.blocks.len()).rev() {
            let bg = mpt_block_backward(sc.fields.as_ref(), &sp.blocks[b], &cfg.block_options(b), &sc.blocks[b], &g)?;
            g = bg.input;
            if let (Some((gf, gi)), Some(af), Some(ai)) = (bg.fields, gfwd.as_mut(), ginv.as_mut()) {
                af.add_assign(&gf)?;
                ai.add_assign(&gi)?;
            }
            blocks[b] = Some(bg.params);
        }
        let vp = match (&sp.vp, &sc.morph) {
            (Some(vp), Some(mc)) => {
                let gf = gfwd.take().expect("fields exist with the morph path");
                let gi = ginv.take().expect("fields exist with the morph path");
                let mut gv = exponentiate_backward(&mc.forward, &gf)?;
                gv.axpy(-1.0, &exponentiate_backward(&mc.inverse, &gi)?)?;
                let (gx, gvp) = velocity_backward(vp, &mc.velocity, &gv)?;
                g.add_assign(&gx)?;
                Some(gvp)
            }
            (None, None) => None,
            _ => return Err(Error::MissingContext("morph cache mismatch".into())),
        };
        stages[s] = Some(StageParams { vp, blocks: blocks.into_iter().map(Option::unwrap).collect(), down });
        carry = Some(g);
    }
    let g = carry.expect("stage 0 input gradient");
    let gpre = gelu_backward(&cache.stem_pre, &g)?;
    let (_, stem) = conv_back(&p.stem, &cache.stem_input, 1, &gpre)?;
    Ok(NetParams { stem, stages: stages.into_iter().map(Option::unwrap).collect(), decoder, head })
}

/// Loss and parameter gradients for one training pair.
pub fn loss_and_grad(net: &MptNet, image: &Tensor, target: &SegMask) -> Result<(f64, NetParams, NetCache)> {
    let (logits, cache) = net.forward_cached(image)?;
    let (loss, glogits) = dice_loss_backward(&logits, target)?;
    let grads = network_backward(net, &cache, &glogits)?;
    Ok((loss, grads, cache))
}
