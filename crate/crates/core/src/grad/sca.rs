//! Backward passes of soft assignment, core update and semantic clustering
//! attention.

use crate::error::Result;
use crate::sca::{ClusterState, CoreUpdate, CoreUpdateCache, ScaCache, ScaParams, CORE_MASS_EPS};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

use super::kernels::softmax_rows_backward;

/// Gradients of a cluster state (`beta` is not differentiated).
#[derive(Clone, Debug)]
pub struct ClusterGrads {
    pub cores: Tensor,
    pub lambda: Tensor,
    pub mu: Tensor,
}

/// Backward of `soft_assign(f, cs)` given its output `g`: `(gf, glambda, gmu)`.
pub fn soft_assign_backward(
    f: &Tensor,
    cs: &ClusterState,
    g: &Tensor,
    gg: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    g.expect_same_shape(gg)?;
    let n = cs.n_clusters();
    let mut gl = gg.clone();
    softmax_rows_backward(g.data(), gl.data_mut(), n);
    let gf = matmul(&gl, &cs.lambda)?;
    let glambda = matmul_tn(&gl, f)?;
    let gmu = gl.sum_rows()?;
    Ok((gf, glambda, gmu))
}

/// Backward of `update_cores_from_assign`: `(gf, gassign, gcores)`.
pub fn update_cores_backward(
    f: &Tensor,
    cores: &Tensor,
    cache: &CoreUpdateCache,
    mode: CoreUpdate,
    gnew: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    gnew.expect_same_shape(cores)?;
    let (n, d) = (cores.shape()[0], cores.shape()[1]);
    let (cd, ws, gn) = (cores.data(), cache.weighted_sum.data(), gnew.data());
    let mut gw = vec![0.0; n * d];
    let mut gmass = vec![0.0; n];
    let mut gc = vec![0.0; n * d];
    for k in 0..n {
        let mass = cache.mass[k];
        let row = k * d..(k + 1) * d;
        match mode {
            CoreUpdate::Verbatim => {
                for j in row {
                    gw[j] = gn[j];
                    gmass[k] -= gn[j] * cd[j];
                    gc[j] = -mass * gn[j];
                }
            }
            CoreUpdate::Residual if mass >= CORE_MASS_EPS => {
                // W / mass
                for j in row {
                    gw[j] = gn[j] / mass;
                    gmass[k] -= gn[j] * ws[j] / (mass * mass);
                }
            }
            CoreUpdate::Residual => {
                // c + (W - mass c) / eps
                for j in row {
                    gw[j] = gn[j] / CORE_MASS_EPS;
                    gc[j] = gn[j] * (1.0 - mass / CORE_MASS_EPS);
                    gmass[k] -= gn[j] * cd[j] / CORE_MASS_EPS;
                }
            }
        }
    }
    let gw = Tensor::from_parts(vec![n, d], gw);
    // W = gᵀ f, mass = column sums of g
    let mut gassign = matmul_nt(f, &gw)?;
    for row in gassign.data_mut().chunks_exact_mut(n) {
        for (v, gm) in row.iter_mut().zip(&gmass) {
            *v += gm;
        }
    }
    let gf = matmul(&cache.assign, &gw)?;
    Ok((gf, gassign, Tensor::from_parts(vec![n, d], gc)))
}

/// Backward of `sca_forward_cached`: `(gf, gnewcore, param grads)`.
pub fn sca_backward(
    f: &Tensor,
    newcore: &Tensor,
    p: &ScaParams,
    cache: &ScaCache,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, ScaParams)> {
    let d = p.dim();
    let m = f.shape()[0];
    let n = newcore.shape()[0];
    gy.expect_shape(&[m, d])?;
    let dh = d / p.heads;
    let (q, k, v) = (cache.q.data(), cache.k.data(), cache.v.data());
    let gyd = gy.data();
    let mut gq = vec![0.0; m * d];
    let mut gk = vec![0.0; n * d];
    let mut gv = vec![0.0; n * d];
    for (h, a) in cache.attn.iter().enumerate() {
        let a = a.data();
        let off = h * dh;
        // gA = gO Vᵀ, gV = Aᵀ gO
        let mut ga = vec![0.0; m * n];
        for i in 0..m {
            let go = &gyd[i * d + off..i * d + off + dh];
            for j in 0..n {
                let vj = &v[j * d + off..j * d + off + dh];
                ga[i * n + j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                let aij = a[i * n + j];
                for (t, g) in go.iter().enumerate() {
                    gv[j * d + off + t] += aij * g;
                }
            }
        }
        softmax_rows_backward(a, &mut ga, n);
        for i in 0..m {
            for j in 0..n {
                let s = ga[i * n + j] * p.scale;
                if s == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    gq[i * d + off + t] += s * k[j * d + off + t];
                    gk[j * d + off + t] += s * q[i * d + off + t];
                }
            }
        }
    }
    let (gq, gk, gv) =
        (Tensor::from_parts(vec![m, d], gq), Tensor::from_parts(vec![n, d], gk), Tensor::from_parts(vec![n, d], gv));
    let gf = matmul_nt(&gq, &p.wq)?;
    let mut gnew = matmul_nt(&gk, &p.wk)?;
    gnew.add_assign(&matmul_nt(&gv, &p.wv)?)?;
    let grads = ScaParams {
        wq: matmul_tn(f, &gq)?,
        wk: matmul_tn(newcore, &gk)?,
        wv: matmul_tn(newcore, &gv)?,
        heads: p.heads,
        scale: p.scale,
    };
    Ok((gf, gnew, grads))
}
