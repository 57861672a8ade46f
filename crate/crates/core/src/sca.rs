//! Soft K-means semantic cores and semantic clustering attention.
//!
//! Patch features `F` (`[m, d]`) are softly assigned to `n` cluster cores
//! with logits `lambda_k . f_i + mu_k`; the assignment-weighted displacements
//! refine the cores; every patch then attends over the refined cores, so the
//! attention cost is `O(m * n)` rather than `O(m^2)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul, matmul_nt, softmax_rows_inplace, Tensor};

pub const DEFAULT_CLUSTERS: usize = 32;
pub const DEFAULT_HEADS: usize = 4;
/// Floor on the assignment mass in the normalized core update.
pub const CORE_MASS_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    /// `[n, d]`
    pub cores: Tensor,
    /// `[n, d]`
    pub lambda: Tensor,
    /// `[n]`
    pub mu: Tensor,
    pub beta: f64,
}

impl ClusterState {
    /// Ties the assignment parameters to the cores:
    /// `lambda_s = 2 beta core_s`, `mu_s = -beta |core_s|^2`.
    pub fn derived(cores: Tensor, beta: f64) -> Result<Self> {
        cores.expect_rank(2)?;
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Argument(format!("beta must be non-negative, got {beta}")));
        }
        let (n, d) = (cores.shape()[0], cores.shape()[1]);
        let lambda = cores.scale(2.0 * beta);
        let mu = Tensor::from_fn(&[n], |s| {
            let row = &cores.data()[s * d..(s + 1) * d];
            -beta * row.iter().map(|v| v * v).sum::<f64>()
        });
        Ok(ClusterState { cores, lambda, mu, beta })
    }

    /// Independent cores, `lambda` and `mu` (the trainable form).
    pub fn from_parts(cores: Tensor, lambda: Tensor, mu: Tensor, beta: f64) -> Result<Self> {
        cores.expect_rank(2)?;
        lambda.expect_same_shape(&cores)?;
        mu.expect_shape(&[cores.shape()[0]])?;
        Ok(ClusterState { cores, lambda, mu, beta })
    }

    /// Cores drawn from `N(0, 1/d)`, with `lambda`, `mu` derived from them.
    pub fn random<R: Rng + ?Sized>(n: usize, d: usize, beta: f64, rng: &mut R) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Argument("cluster state needs n >= 1 and d >= 1".into()));
        }
        let s = 1.0 / (d as f64).sqrt();
        let cores = Tensor::from_fn(&[n, d], |_| s * rng.sample::<f64, _>(StandardNormal));
        Self::derived(cores, beta)
    }

    pub fn n_clusters(&self) -> usize {
        self.cores.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.cores.shape()[1]
    }
}

/// How refined cores are formed from the assignment-weighted displacements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CoreUpdate {
    /// `core_s + sum_i g_s(f_i) (f_i - core_s) / max(sum_i g_s(f_i), eps)`.
    #[default]
    Residual,
    /// `sum_i g_s(f_i) (f_i - core_s)`, the displacement itself.
    Verbatim,
}

impl std::str::FromStr for CoreUpdate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(CoreUpdate::Residual),
            "verbatim" => Ok(CoreUpdate::Verbatim),
            other => Err(Error::Config(format!("unknown core update mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for CoreUpdate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CoreUpdate::Residual => "residual",
            CoreUpdate::Verbatim => "verbatim",
        })
    }
}

fn check_features(f: &Tensor, d: usize) -> Result<usize> {
    f.expect_rank(2)?;
    if f.shape()[1] != d {
        return Err(shape_err!("features have dimension {}, clusters expect {d}", f.shape()[1]));
    }
    Ok(f.shape()[0])
}

/// Soft assignment `g[i, k] = softmax_k(lambda_k . f_i + mu_k)`, `[m, n]`.
pub fn soft_assign(f: &Tensor, cs: &ClusterState) -> Result<Tensor> {
    let m = check_features(f, cs.dim())?;
    let n = cs.n_clusters();
    let mut logits = matmul_nt(f, &cs.lambda)?;
    let mu = cs.mu.data();
    for row in logits.data_mut().chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(mu) {
            *v += b;
        }
    }
    softmax_rows_inplace(logits.data_mut(), n);
    debug_assert_eq!(logits.shape(), &[m, n]);
    Ok(logits)
}

/// Gaussian-kernel assignment `exp(-beta |f_i - core_k|^2)` normalized over
/// clusters. Matches [`soft_assign`] when the state is in derived form.
pub fn gaussian_assign(f: &Tensor, cores: &Tensor, beta: f64) -> Result<Tensor> {
    cores.expect_rank(2)?;
    let (n, d) = (cores.shape()[0], cores.shape()[1]);
    let m = check_features(f, d)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let fi = &f.data()[i * d..(i + 1) * d];
        for k in 0..n {
            let ck = &cores.data()[k * d..(k + 1) * d];
            let dist: f64 = fi.iter().zip(ck).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i * n + k] = -beta * dist;
        }
    }
    softmax_rows_inplace(&mut out, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Intermediates of a core update, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CoreUpdateCache {
    /// Assignments `[m, n]`.
    pub assign: Tensor,
    /// `sum_i g_ik f_i`, `[n, d]`.
    pub weighted_sum: Tensor,
    /// `sum_i g_ik`, length `n`.
    pub mass: Vec<f64>,
}

/// Refined cores from features and the current cluster state.
pub fn update_cores(f: &Tensor, cs: &ClusterState, mode: CoreUpdate) -> Result<Tensor> {
    let g = soft_assign(f, cs)?;
    update_cores_from_assign(f, &g, &cs.cores, mode).map(|(c, _)| c)
}

/// Core update given precomputed assignments `g` (`[m, n]`).
pub fn update_cores_from_assign(
    f: &Tensor,
    g: &Tensor,
    cores: &Tensor,
    mode: CoreUpdate,
) -> Result<(Tensor, CoreUpdateCache)> {
    cores.expect_rank(2)?;
    let (n, d) = (cores.shape()[0], cores.shape()[1]);
    let m = check_features(f, d)?;
    g.expect_shape(&[m, n])?;
    let weighted_sum = crate::tensor::matmul_tn(g, f)?; // [n, d]
    let mass = g.sum_rows()?.into_data();
    let (ws, cd) = (weighted_sum.data(), cores.data());
    let mut out = vec![0.0; n * d];
    for k in 0..n {
        for j in 0..d {
            let disp = ws[k * d + j] - mass[k] * cd[k * d + j];
            out[k * d + j] = match mode {
                CoreUpdate::Verbatim => disp,
                // with enough mass the residual step lands exactly on the
                // weighted centroid; evaluate that form so the result does
                // not depend on the previous core through round-off
                CoreUpdate::Residual if mass[k] >= CORE_MASS_EPS => ws[k * d + j] / mass[k],
                CoreUpdate::Residual => cd[k * d + j] + disp / CORE_MASS_EPS,
            };
        }
    }
    Ok((Tensor::from_parts(vec![n, d], out), CoreUpdateCache { assign: g.clone(), weighted_sum, mass }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaParams {
    /// `[d, d]` projections.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub heads: usize,
    /// Logit scale, `1/sqrt(d)` unless overridden.
    pub scale: f64,
}

impl ScaParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, heads: usize) -> Result<Self> {
        wq.expect_rank(2)?;
        let d = wq.shape()[0];
        for w in [&wq, &wk, &wv] {
            w.expect_shape(&[d, d])?;
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Argument(format!("{heads} heads do not divide dimension {d}")));
        }
        Ok(ScaParams { wq, wk, wv, heads, scale: 1.0 / (d as f64).sqrt() })
    }

    pub fn random<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let s = 1.0 / (d as f64).sqrt();
        let mut w = || Tensor::from_fn(&[d, d], |_| s * rng.sample::<f64, _>(StandardNormal));
        let (q, k, v) = (w(), w(), w());
        Self::new(q, k, v, heads)
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        ScaParams {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            heads: self.heads,
            scale: self.scale,
        }
    }
}

/// Saved projections and per-head attention of [`sca_forward`].
#[derive(Clone, Debug)]
pub struct ScaCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// One `[m, n]` attention matrix per head.
    pub attn: Vec<Tensor>,
}

/// Multi-head attention from patch features to refined cores:
/// `softmax((F Wq)(N Wk)^T * scale) (N Wv)` per head, heads concatenated.
pub fn sca_forward(f: &Tensor, newcore: &Tensor, p: &ScaParams) -> Result<Tensor> {
    sca_forward_cached(f, newcore, p).map(|(y, _)| y)
}

pub fn sca_forward_cached(f: &Tensor, newcore: &Tensor, p: &ScaParams) -> Result<(Tensor, ScaCache)> {
    let d = p.dim();
    let m = check_features(f, d)?;
    let n = check_features(newcore, d)?;
    let q = matmul(f, &p.wq)?;
    let k = matmul(newcore, &p.wk)?;
    let v = matmul(newcore, &p.wv)?;
    let dh = d / p.heads;
    let mut out = vec![0.0; m * d];
    let mut attn = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut a = vec![0.0; m * n];
        for i in 0..m {
            let qi = &q.data()[i * d..(i + 1) * d][cols.clone()];
            for j in 0..n {
                let kj = &k.data()[j * d..(j + 1) * d][cols.clone()];
                a[i * n + j] = p.scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        softmax_rows_inplace(&mut a, n);
        for i in 0..m {
            let orow = &mut out[i * d..(i + 1) * d][cols.clone()];
            for j in 0..n {
                let aij = a[i * n + j];
                let vj = &v.data()[j * d..(j + 1) * d][cols.clone()];
                for (o, vv) in orow.iter_mut().zip(vj) {
                    *o += aij * vv;
                }
            }
        }
        attn.push(Tensor::from_parts(vec![m, n], a));
    }
    Ok((Tensor::from_parts(vec![m, d], out), ScaCache { q, k, v, attn }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn entropy_max(g: &Tensor) -> f64 {
        let n = g.shape()[1];
        g.data().chunks(n).map(|r| -r.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()).fold(0.0, f64::max)
    }

    #[test]
    fn single_cluster_assigns_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cs = ClusterState::random(1, 4, 1.0, &mut rng).unwrap();
        let g = soft_assign(&rand_tensor(&[7, 4], &mut rng), &cs).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn derived_state_matches_gaussian_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let beta = rng.gen_range(0.1..3.0);
            let cs = ClusterState::derived(rand_tensor(&[5, 3], &mut rng), beta).unwrap();
            let f = rand_tensor(&[9, 3], &mut rng);
            let a = soft_assign(&f, &cs).unwrap();
            let b = gaussian_assign(&f, &cs.cores, beta).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn large_beta_approaches_hard_assignment() {
        let f = Tensor::new(vec![2, 1], vec![0.0, 10.0]).unwrap();
        let cs = ClusterState::derived(Tensor::new(vec![2, 1], vec![1.0, 9.0]).unwrap(), 10.0).unwrap();
        let g = soft_assign(&f, &cs).unwrap();
        let hard = [1.0, 0.0, 0.0, 1.0];
        for (a, e) in g.data().iter().zip(hard) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn entropy_falls_as_beta_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::from_fn(&[40, 2], |i| (if i % 4 < 2 { 0.0 } else { 3.0 }) + 0.2 * rng.gen_range(-1.0..1.0));
        let cores = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 3.0]).unwrap();
        let ents: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&b| entropy_max(&soft_assign(&f, &ClusterState::derived(cores.clone(), b).unwrap()).unwrap()))
            .collect();
        assert!(ents[0] > ents[1] && ents[1] > ents[2], "{ents:?}");
    }

    #[test]
    fn update_cores_coincident_features() {
        let core = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let cs = ClusterState::derived(core.clone(), 1.0).unwrap();
        let f = Tensor::from_fn(&[4, 3], |i| core.data()[i % 3]);
        let v = update_cores(&f, &cs, CoreUpdate::Verbatim).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        let r = update_cores(&f, &cs, CoreUpdate::Residual).unwrap();
        assert!(r.max_abs_diff(&core) < 1e-15);
    }

    #[test]
    fn residual_update_recovers_hard_centroids() {
        let f = Tensor::new(vec![4, 1], vec![0.0, 0.2, 9.8, 10.0]).unwrap();
        let cs = ClusterState::derived(Tensor::new(vec![2, 1], vec![0.5, 9.5]).unwrap(), 100.0).unwrap();
        let c = update_cores(&f, &cs, CoreUpdate::Residual).unwrap();
        assert!((c.data()[0] - 0.1).abs() < 1e-4);
        assert!((c.data()[1] - 9.9).abs() < 1e-4);
    }

    #[test]
    fn verbatim_update_with_uniform_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = rand_tensor(&[6, 3], &mut rng);
        let cs = ClusterState::derived(rand_tensor(&[4, 3], &mut rng), 0.0).unwrap();
        let v = update_cores(&f, &cs, CoreUpdate::Verbatim).unwrap();
        // g = 1/n everywhere, so sum_i g (f_i - c) = (m/n) (mean(F) - c)
        let (m, n) = (6.0, 4.0);
        for k in 0..4 {
            for j in 0..3 {
                let mean: f64 = (0..6).map(|i| f.at(&[i, j])).sum::<f64>() / m;
                let expect = (m / n) * (mean - cs.cores.at(&[k, j]));
                assert!((v.at(&[k, j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn update_cores_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rand_tensor(&[10, 4], &mut rng);
        let cs = ClusterState::random(3, 4, 1.0, &mut rng).unwrap();
        let perm = [3, 7, 0, 9, 1, 5, 2, 8, 6, 4];
        let fp = Tensor::from_fn(&[10, 4], |i| f.at(&[perm[i / 4], i % 4]));
        for mode in [CoreUpdate::Residual, CoreUpdate::Verbatim] {
            let a = update_cores(&f, &cs, mode).unwrap();
            let b = update_cores(&fp, &cs, mode).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn sca_single_cluster_and_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ScaParams::random(8, 4, &mut rng).unwrap();
        let f = rand_tensor(&[5, 8], &mut rng);
        let one = rand_tensor(&[1, 8], &mut rng);
        let y = sca_forward(&f, &one, &p).unwrap();
        let expect = matmul(&one, &p.wv).unwrap();
        for row in y.data().chunks(8) {
            for (a, e) in row.iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }

        let mut pz = p.clone();
        pz.wq = Tensor::zeros(&[8, 8]);
        pz.wk = Tensor::zeros(&[8, 8]);
        let cores = rand_tensor(&[3, 8], &mut rng);
        let y = sca_forward(&f, &cores, &pz).unwrap();
        let v = matmul(&cores, &p.wv).unwrap();
        let mean: Vec<f64> = (0..8).map(|j| (0..3).map(|k| v.at(&[k, j])).sum::<f64>() / 3.0).collect();
        for row in y.data().chunks(8) {
            for (a, e) in row.iter().zip(&mean) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        assert!(ScaParams::random(6, 4, &mut rng).is_err());
    }

    #[test]
    fn sca_attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ScaParams::random(8, 2, &mut rng).unwrap();
        let (_, cache) =
            sca_forward_cached(&rand_tensor(&[6, 8], &mut rng), &rand_tensor(&[4, 8], &mut rng), &p).unwrap();
        assert_eq!(cache.attn.len(), 2);
        for a in &cache.attn {
            for row in a.data().chunks(4) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sca_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ScaParams::random(6, 3, &mut rng).unwrap();
        let cs = ClusterState::random(4, 6, 1.0, &mut rng).unwrap();
        let f = rand_tensor(&[9, 6], &mut rng);
        let perm = [8, 2, 5, 0, 7, 1, 4, 6, 3];
        let fp = Tensor::from_fn(&[9, 6], |i| f.at(&[perm[i / 6], i % 6]));
        let ya = sca_forward(&f, &update_cores(&f, &cs, CoreUpdate::Residual).unwrap(), &p).unwrap();
        let yb = sca_forward(&fp, &update_cores(&fp, &cs, CoreUpdate::Residual).unwrap(), &p).unwrap();
        for i in 0..9 {
            for j in 0..6 {
                assert!((yb.at(&[i, j]) - ya.at(&[perm[i], j])).abs() < 1e-12);
            }
        }
    }
}
