//! Backward passes of window attention and the full transformer block.

use crate::attention::{
    relative_position_index, BlockCache, BlockOptions, BlockParams, Fusion, LayerNormParams, MhaParams, MlpCache,
    MlpParams, ScaBranch, StageFields, WindowAttnCache,
};
use crate::error::{Error, Result};
use crate::morphpatch::{cyclic_shift, window_merge, window_partition};
use crate::sca::ClusterState;
use crate::tensor::{from_tokens, matmul_nt, matmul_tn, to_tokens, Tensor};

use super::kernels::{gelu_backward, layer_norm_backward, softmax_rows_backward, warp_backward};
use super::sca::{sca_backward, soft_assign_backward, update_cores_backward};

/// Backward of `window_attention_cached`: `(gwindows, param grads)`.
pub fn window_attention_backward(p: &MhaParams, cache: &WindowAttnCache, gy: &Tensor) -> Result<(Tensor, MhaParams)> {
    let (nw, heads, l) = (cache.attn.shape()[0], cache.attn.shape()[1], cache.attn.shape()[2]);
    let c = p.channels();
    gy.expect_shape(&[nw, l, c])?;
    let gy = gy.clone().reshape(&[nw * l, c])?;
    let gwo = matmul_tn(&cache.o, &gy)?;
    let go = matmul_nt(&gy, &p.wo)?;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rel = relative_position_index(p.window);
    let (q, k, v, a, god) = (cache.q.data(), cache.k.data(), cache.v.data(), cache.attn.data(), go.data());
    let mut gq = vec![0.0; nw * l * c];
    let mut gk = vec![0.0; nw * l * c];
    let mut gv = vec![0.0; nw * l * c];
    let mut gbias = vec![0.0; p.rel_bias.len()];
    let mut ga = vec![0.0; l * l];
    for w in 0..nw {
        for h in 0..heads {
            let aw = &a[(w * heads + h) * l * l..(w * heads + h + 1) * l * l];
            let col = |t: usize| (w * l + t) * c + h * dh;
            for i in 0..l {
                let goi = &god[col(i)..col(i) + dh];
                for j in 0..l {
                    let vj = &v[col(j)..col(j) + dh];
                    ga[i * l + j] = goi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    let aij = aw[i * l + j];
                    for (t, g) in goi.iter().enumerate() {
                        gv[col(j) + t] += aij * g;
                    }
                }
            }
            softmax_rows_backward(aw, &mut ga, l);
            for i in 0..l {
                for j in 0..l {
                    let gs = ga[i * l + j];
                    gbias[rel[i * l + j] * heads + h] += gs;
                    let s = gs * scale;
                    for t in 0..dh {
                        gq[col(i) + t] += s * k[col(j) + t];
                        gk[col(j) + t] += s * q[col(i) + t];
                    }
                }
            }
        }
    }
    let shape = vec![nw * l, c];
    let (gq, gk, gv) =
        (Tensor::from_parts(shape.clone(), gq), Tensor::from_parts(shape.clone(), gk), Tensor::from_parts(shape, gv));
    let mut gx = matmul_nt(&gq, &p.wq)?;
    gx.add_assign(&matmul_nt(&gk, &p.wk)?)?;
    gx.add_assign(&matmul_nt(&gv, &p.wv)?)?;
    let grads = MhaParams {
        wq: matmul_tn(&cache.x, &gq)?,
        wk: matmul_tn(&cache.x, &gk)?,
        wv: matmul_tn(&cache.x, &gv)?,
        wo: gwo,
        rel_bias: Tensor::from_parts(p.rel_bias.shape().to_vec(), gbias),
        heads: p.heads,
        window: p.window,
    };
    Ok((gx.reshape(&[nw, l, c])?, grads))
}

fn add_bias_grad(g: &Tensor) -> Result<Tensor> {
    g.sum_rows()
}

/// Backward of the token MLP: `(ginput, param grads)`.
pub fn mlp_backward(p: &MlpParams, cache: &MlpCache, gy: &Tensor) -> Result<(Tensor, MlpParams)> {
    let gw2 = matmul_tn(&cache.hidden, gy)?;
    let gb2 = add_bias_grad(gy)?;
    let ghidden = matmul_nt(gy, &p.w2)?;
    let gpre = gelu_backward(&cache.pre, &ghidden)?;
    let gw1 = matmul_tn(&cache.input, &gpre)?;
    let gb1 = add_bias_grad(&gpre)?;
    let gx = matmul_nt(&gpre, &p.w1)?;
    Ok((gx, MlpParams { w1: gw1, b1: gb1, w2: gw2, b2: gb2 }))
}

/// Gradients of one block.
#[derive(Clone, Debug)]
pub struct BlockGrads {
    pub input: Tensor,
    pub params: BlockParams,
    /// Gradients of the forward and inverse stage offsets, when the morph path is on.
    pub fields: Option<(Tensor, Tensor)>,
}

pub fn mpt_block_backward(
    fields: Option<&StageFields>,
    p: &BlockParams,
    opts: &BlockOptions,
    cache: &BlockCache,
    gy: &Tensor,
) -> Result<BlockGrads> {
    let (h, w) = (cache.h, cache.w);
    let win = p.attn.window;
    let shift = (opts.shift.0 as isize, opts.shift.1 as isize);
    if fields.is_some() != cache.fwd_coords.is_some() {
        return Err(Error::MissingContext("block cache and stage fields disagree on the morph path".into()));
    }
    let g3 = to_tokens(gy)?;

    // MLP
    let (gm_in, gmlp) = mlp_backward(&p.mlp, &cache.mlp, &g3)?;
    let (gln3, ggamma3, gbeta3) = layer_norm_backward(&cache.norm_mlp, &p.norm_mlp.gamma, &gm_in)?;
    let mut g2 = g3;
    g2.add_assign(&gln3)?;

    // semantic branch
    let mut g1 = g2.clone();
    let mut g0_extra = None;
    let sca_grads = match (&p.sca, &cache.sca) {
        (Some(br), Some(sc)) => {
            let (gf_attn, gnew, gproj) = sca_backward(&sc.tokens, &sc.newcore, &br.proj, &sc.attn, &g2)?;
            let (gf_upd, gassign, gcores) =
                update_cores_backward(&sc.tokens, &br.clusters.cores, &sc.update, opts.core_update, &gnew)?;
            let (gf_assign, glambda, gmu) =
                soft_assign_backward(&sc.tokens, &br.clusters, &sc.update.assign, &gassign)?;
            let mut gf = gf_attn;
            gf.add_assign(&gf_upd)?;
            gf.add_assign(&gf_assign)?;
            let (ginput, gg, gb) = layer_norm_backward(&sc.norm, &br.norm.gamma, &gf)?;
            match opts.fusion {
                Fusion::Sequential => g1.add_assign(&ginput)?,
                Fusion::ParallelSum => g0_extra = Some(ginput),
            }
            Some(ScaBranch {
                norm: LayerNormParams { gamma: gg, beta: gb },
                clusters: ClusterState { cores: gcores, lambda: glambda, mu: gmu, beta: br.clusters.beta },
                proj: gproj,
            })
        }
        (None, None) => None,
        _ => return Err(Error::MissingContext("semantic branch cache missing".into())),
    };

    // spatial branch
    let mut g0 = g1.clone();
    if let Some(e) = g0_extra {
        g0.add_assign(&e)?;
    }
    let gback = from_tokens(&g1, h, w)?;
    let (gmerged, ginv) = match fields {
        Some(f) => {
            let (gm, go) = warp_backward(&cache.merged, &f.inverse, &gback)?;
            (gm, Some(go))
        }
        None => (gback, None),
    };
    let gatt = window_partition(&cyclic_shift(&gmerged, (-shift.0, -shift.1))?, win)?;
    let (gwin, gattn) = window_attention_backward(&p.attn, &cache.attn, &gatt)?;
    let gdeformed = cyclic_shift(&window_merge(&gwin, h, w, win)?, shift)?;
    let (gnormed, gfwd) = match fields {
        Some(f) => {
            let (gn, go) = warp_backward(&cache.normed, &f.forward, &gdeformed)?;
            (gn, Some(go))
        }
        None => (gdeformed, None),
    };
    let (gln1, ggamma1, gbeta1) = layer_norm_backward(&cache.norm_attn, &p.norm_attn.gamma, &to_tokens(&gnormed)?)?;
    g0.add_assign(&gln1)?;

    Ok(BlockGrads {
        input: from_tokens(&g0, h, w)?,
        params: BlockParams {
            norm_attn: LayerNormParams { gamma: ggamma1, beta: gbeta1 },
            attn: gattn,
            sca: sca_grads,
            norm_mlp: LayerNormParams { gamma: ggamma3, beta: gbeta3 },
            mlp: gmlp,
        },
        fields: gfwd.zip(ginv),
    })
}
