//! Windowed multi-head self-attention and the spatial + semantic transformer
//! block.
//!
//! One block runs:
//!
//! ```text
//! LN -> deform -> [shift] -> windows -> window attention -> merge -> [unshift] -> warp back -> +x
//! LN -> soft K-means cores -> semantic clustering attention -> +x
//! LN -> MLP -> +x
//! ```
//!
//! The deformed map is warped back with the inverse field so the residual
//! stream stays aligned with the input grid.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffeo::DeformationField;
use crate::error::{shape_err, Error, Result};
use crate::morphpatch::{cyclic_shift, window_merge, window_partition};
use crate::sca::{
    sca_forward_cached, soft_assign, update_cores_from_assign, ClusterState, CoreUpdate, CoreUpdateCache, ScaCache,
    ScaParams,
};
use crate::tensor::{
    from_tokens, gelu_scalar, grid_sample, layer_norm_cached, matmul, softmax_rows_inplace, to_tokens, LayerNormCache,
    SampleCoords, Tensor, LAYER_NORM_EPS,
};

fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    /// `[C, C]` projections.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// Relative position bias, `[(2 wh - 1) * (2 ww - 1), heads]`.
    pub rel_bias: Tensor,
    pub heads: usize,
    pub window: (usize, usize),
}

impl MhaParams {
    pub fn new(
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        wo: Tensor,
        rel_bias: Tensor,
        heads: usize,
        window: (usize, usize),
    ) -> Result<Self> {
        wq.expect_rank(2)?;
        let c = wq.shape()[0];
        for w in [&wq, &wk, &wv, &wo] {
            w.expect_shape(&[c, c])?;
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Argument(format!("{heads} heads do not divide {c} channels")));
        }
        rel_bias.expect_shape(&[bias_table_len(window), heads])?;
        Ok(MhaParams { wq, wk, wv, wo, rel_bias, heads, window })
    }

    pub fn random<R: Rng + ?Sized>(c: usize, heads: usize, window: (usize, usize), rng: &mut R) -> Result<Self> {
        let s = 1.0 / (c as f64).sqrt();
        let wq = gaussian(&[c, c], s, rng);
        let wk = gaussian(&[c, c], s, rng);
        let wv = gaussian(&[c, c], s, rng);
        let wo = gaussian(&[c, c], s, rng);
        let rel_bias = gaussian(&[bias_table_len(window), heads], 0.02, rng);
        Self::new(wq, wk, wv, wo, rel_bias, heads, window)
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.channels();
        MhaParams {
            wq: Tensor::zeros(&[c, c]),
            wk: Tensor::zeros(&[c, c]),
            wv: Tensor::zeros(&[c, c]),
            wo: Tensor::zeros(&[c, c]),
            rel_bias: Tensor::zeros(self.rel_bias.shape()),
            heads: self.heads,
            window: self.window,
        }
    }
}

pub fn bias_table_len(window: (usize, usize)) -> usize {
    (2 * window.0 - 1) * (2 * window.1 - 1)
}

/// Bias-table row for every ordered token pair `(i, j)` of a window.
pub fn relative_position_index(window: (usize, usize)) -> Vec<usize> {
    let (wh, ww) = window;
    let l = wh * ww;
    let mut idx = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            let dr = (i / ww) as isize - (j / ww) as isize + wh as isize - 1;
            let dc = (i % ww) as isize - (j % ww) as isize + ww as isize - 1;
            idx.push(dr as usize * (2 * ww - 1) + dc as usize);
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct WindowAttnCache {
    /// Input tokens flattened to `[N * L, C]`.
    pub x: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Attention probabilities, `[N, heads, L, L]`.
    pub attn: Tensor,
    /// Concatenated head outputs before the output projection, `[N * L, C]`.
    pub o: Tensor,
}

/// Multi-head self-attention inside each window, with relative position bias.
/// `windows` is `[N_win, L, C]` with `L` the window area.
pub fn window_attention(windows: &Tensor, p: &MhaParams) -> Result<Tensor> {
    window_attention_cached(windows, p).map(|(y, _)| y)
}

pub fn window_attention_cached(windows: &Tensor, p: &MhaParams) -> Result<(Tensor, WindowAttnCache)> {
    windows.expect_rank(3)?;
    let (nw, l, c) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
    if l != p.window.0 * p.window.1 {
        return Err(shape_err!("window holds {l} tokens, params expect {:?}", p.window));
    }
    if c != p.channels() {
        return Err(shape_err!("tokens have {c} channels, params expect {}", p.channels()));
    }
    let x = windows.clone().reshape(&[nw * l, c])?;
    let q = matmul(&x, &p.wq)?;
    let k = matmul(&x, &p.wk)?;
    let v = matmul(&x, &p.wv)?;
    let heads = p.heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rel = relative_position_index(p.window);
    let bias = p.rel_bias.data();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut attn = vec![0.0; nw * heads * l * l];
    let mut o = vec![0.0; nw * l * c];
    for w in 0..nw {
        for h in 0..heads {
            let a = &mut attn[(w * heads + h) * l * l..(w * heads + h + 1) * l * l];
            for i in 0..l {
                let qi = &qd[(w * l + i) * c + h * dh..(w * l + i) * c + (h + 1) * dh];
                for j in 0..l {
                    let kj = &kd[(w * l + j) * c + h * dh..(w * l + j) * c + (h + 1) * dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                    a[i * l + j] = scale * dot + bias[rel[i * l + j] * heads + h];
                }
            }
            softmax_rows_inplace(a, l);
            for i in 0..l {
                let orow = &mut o[(w * l + i) * c + h * dh..(w * l + i) * c + (h + 1) * dh];
                for j in 0..l {
                    let aij = a[i * l + j];
                    let vj = &vd[(w * l + j) * c + h * dh..(w * l + j) * c + (h + 1) * dh];
                    for (ov, vv) in orow.iter_mut().zip(vj) {
                        *ov += aij * vv;
                    }
                }
            }
        }
    }
    let o = Tensor::from_parts(vec![nw * l, c], o);
    let y = matmul(&o, &p.wo)?.reshape(&[nw, l, c])?;
    let attn = Tensor::from_parts(vec![nw, heads, l, l], attn);
    Ok((y, WindowAttnCache { x, q, k, v, attn, o }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(c: usize) -> Self {
        LayerNormParams { gamma: Tensor::full(&[c], 1.0), beta: Tensor::zeros(&[c]) }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNormParams { gamma: Tensor::zeros(self.gamma.shape()), beta: Tensor::zeros(self.beta.shape()) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    /// `[C, hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[hidden, C]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    pub fn random<R: Rng + ?Sized>(c: usize, hidden: usize, rng: &mut R) -> Self {
        MlpParams {
            w1: gaussian(&[c, hidden], 1.0 / (c as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: gaussian(&[hidden, c], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[c]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            w1: Tensor::zeros(self.w1.shape()),
            b1: Tensor::zeros(self.b1.shape()),
            w2: Tensor::zeros(self.w2.shape()),
            b2: Tensor::zeros(self.b2.shape()),
        }
    }
}

/// Semantic branch: its own layer norm, cluster state and projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaBranch {
    pub norm: LayerNormParams,
    pub clusters: ClusterState,
    pub proj: ScaParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub norm_attn: LayerNormParams,
    pub attn: MhaParams,
    /// `None` disables semantic clustering attention.
    pub sca: Option<ScaBranch>,
    pub norm_mlp: LayerNormParams,
    pub mlp: MlpParams,
}

impl BlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        c: usize,
        heads: usize,
        window: (usize, usize),
        n_clusters: Option<usize>,
        mlp_ratio: usize,
        beta_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = MhaParams::random(c, heads, window, rng)?;
        let sca = match n_clusters {
            Some(n) => Some(ScaBranch {
                norm: LayerNormParams::identity(c),
                clusters: ClusterState::random(n, c, beta_init, rng)?,
                proj: ScaParams::random(c, heads, rng)?,
            }),
            None => None,
        };
        Ok(BlockParams {
            norm_attn: LayerNormParams::identity(c),
            attn,
            sca,
            norm_mlp: LayerNormParams::identity(c),
            mlp: MlpParams::random(c, mlp_ratio * c, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.attn.channels()
    }

    /// Gradient container with the same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        BlockParams {
            norm_attn: self.norm_attn.zeros_like(),
            attn: self.attn.zeros_like(),
            sca: self.sca.as_ref().map(|s| ScaBranch {
                norm: s.norm.zeros_like(),
                clusters: ClusterState {
                    cores: Tensor::zeros(s.clusters.cores.shape()),
                    lambda: Tensor::zeros(s.clusters.lambda.shape()),
                    mu: Tensor::zeros(s.clusters.mu.shape()),
                    beta: s.clusters.beta,
                },
                proj: s.proj.zeros_like(),
            }),
            norm_mlp: self.norm_mlp.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }
}

/// How the spatial and semantic branches are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    /// Window attention, then semantic attention, each with its own residual.
    #[default]
    Sequential,
    /// Both branches read the block input; their outputs are summed.
    ParallelSum,
}

impl std::str::FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Fusion::Sequential),
            "parallel-sum" => Ok(Fusion::ParallelSum),
            other => Err(Error::Config(format!("unknown fusion '{other}'"))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Sequential => "sequential",
            Fusion::ParallelSum => "parallel-sum",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockOptions {
    /// Cyclic shift applied before windowing; `(0, 0)` for the plain block.
    pub shift: (usize, usize),
    pub fusion: Fusion,
    pub core_update: CoreUpdate,
}

impl BlockOptions {
    /// Options for the shifted member of a block pair (half-window shift).
    pub fn shifted(window: (usize, usize)) -> Self {
        BlockOptions { shift: (window.0 / 2, window.1 / 2), ..Default::default() }
    }
}

/// A stage's deformation and its inverse, shared by the stage's blocks.
#[derive(Clone, Debug)]
pub struct StageFields {
    pub forward: DeformationField,
    pub inverse: DeformationField,
}

impl StageFields {
    pub fn identity(h: usize, w: usize) -> Self {
        StageFields { forward: DeformationField::identity(h, w), inverse: DeformationField::identity(h, w) }
    }
}

#[derive(Clone, Debug)]
pub struct ScaBranchCache {
    pub norm: LayerNormCache,
    /// Normalized tokens fed to the branch, `[m, C]`.
    pub tokens: Tensor,
    pub update: CoreUpdateCache,
    pub newcore: Tensor,
    pub attn: ScaCache,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    pub input: Tensor,
    pub pre: Tensor,
    pub hidden: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    pub h: usize,
    pub w: usize,
    pub norm_attn: LayerNormCache,
    /// Normalized map fed to the forward warp, `[C, H, W]`.
    pub normed: Tensor,
    pub fwd_coords: Option<SampleCoords>,
    pub inv_coords: Option<SampleCoords>,
    pub attn: WindowAttnCache,
    /// Attention output after merge/unshift, before the inverse warp.
    pub merged: Tensor,
    pub sca: Option<ScaBranchCache>,
    pub norm_mlp: LayerNormCache,
    pub mlp: MlpCache,
}

pub(crate) fn mlp_forward(x: &Tensor, p: &MlpParams) -> Result<(Tensor, MlpCache)> {
    let mut pre = matmul(x, &p.w1)?;
    let hid = p.b1.len();
    for row in pre.data_mut().chunks_exact_mut(hid) {
        for (v, b) in row.iter_mut().zip(p.b1.data()) {
            *v += b;
        }
    }
    let hidden = pre.map(gelu_scalar);
    let mut y = matmul(&hidden, &p.w2)?;
    let c = p.b2.len();
    for row in y.data_mut().chunks_exact_mut(c) {
        for (v, b) in row.iter_mut().zip(p.b2.data()) {
            *v += b;
        }
    }
    Ok((y, MlpCache { input: x.clone(), pre, hidden }))
}

fn sca_branch_forward(tokens_in: &Tensor, br: &ScaBranch, mode: CoreUpdate) -> Result<(Tensor, ScaBranchCache)> {
    let (tokens, norm) = layer_norm_cached(tokens_in, &br.norm.gamma, &br.norm.beta, LAYER_NORM_EPS)?;
    let assign = soft_assign(&tokens, &br.clusters)?;
    let (newcore, update) = update_cores_from_assign(&tokens, &assign, &br.clusters.cores, mode)?;
    let (y, attn) = sca_forward_cached(&tokens, &newcore, &br.proj)?;
    Ok((y, ScaBranchCache { norm, tokens, update, newcore, attn }))
}

fn shift_amount(opts: &BlockOptions) -> (isize, isize) {
    (opts.shift.0 as isize, opts.shift.1 as isize)
}

/// One spatial + semantic transformer block. `fields = None` disables the
/// morph path (plain windows).
pub fn mpt_block(x: &Tensor, fields: Option<&StageFields>, p: &BlockParams, opts: &BlockOptions) -> Result<Tensor> {
    mpt_block_cached(x, fields, p, opts).map(|(y, _)| y)
}

pub fn mpt_block_cached(
    x: &Tensor,
    fields: Option<&StageFields>,
    p: &BlockParams,
    opts: &BlockOptions,
) -> Result<(Tensor, BlockCache)> {
    x.expect_rank(3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c != p.channels() {
        return Err(shape_err!("block expects {} channels, got {:?}", p.channels(), x.shape()));
    }
    if let Some(f) = fields {
        if (f.forward.height(), f.forward.width()) != (h, w) || (f.inverse.height(), f.inverse.width()) != (h, w) {
            return Err(shape_err!("stage fields do not match the {h}x{w} feature map"));
        }
    }
    let win = p.attn.window;
    let shift = shift_amount(opts);
    let t0 = to_tokens(x)?;

    // spatial branch
    let (a_tok, norm_attn) = layer_norm_cached(&t0, &p.norm_attn.gamma, &p.norm_attn.beta, LAYER_NORM_EPS)?;
    let normed = from_tokens(&a_tok, h, w)?;
    let fwd_coords = fields.map(|f| f.forward.sample_coords());
    let inv_coords = fields.map(|f| f.inverse.sample_coords());
    let deformed = match &fwd_coords {
        Some(cs) => grid_sample(&normed, cs)?,
        None => normed.clone(),
    };
    let shifted = cyclic_shift(&deformed, (-shift.0, -shift.1))?;
    let windows = window_partition(&shifted, win)?;
    let (att, attn) = window_attention_cached(&windows, &p.attn)?;
    let merged = cyclic_shift(&window_merge(&att, h, w, win)?, shift)?;
    let back = match &inv_coords {
        Some(cs) => grid_sample(&merged, cs)?,
        None => merged.clone(),
    };
    let mut t1 = t0.clone();
    t1.add_assign(&to_tokens(&back)?)?;

    // semantic branch
    let sca = match &p.sca {
        Some(br) => {
            let input = match opts.fusion {
                Fusion::Sequential => &t1,
                Fusion::ParallelSum => &t0,
            };
            let (y, cache) = sca_branch_forward(input, br, opts.core_update)?;
            t1.add_assign(&y)?;
            Some(cache)
        }
        None => None,
    };

    // MLP
    let (c_tok, norm_mlp) = layer_norm_cached(&t1, &p.norm_mlp.gamma, &p.norm_mlp.beta, LAYER_NORM_EPS)?;
    let (m_out, mlp) = mlp_forward(&c_tok, &p.mlp)?;
    t1.add_assign(&m_out)?;

    let y = from_tokens(&t1, h, w)?;
    Ok((y, BlockCache { h, w, norm_attn, normed, fwd_coords, inv_coords, attn, merged, sca, norm_mlp, mlp }))
}
