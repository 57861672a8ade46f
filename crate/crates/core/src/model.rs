//! Velocity predictor, the small UNet-style morph-patch network, and Dice loss.
//!
//! Encoder stage `s` (channels `base * 2^s`):
//!
//! ```text
//! x_s -> [velocity predictor -> exp(v), exp(-v)] -> block pairs -> skip_s
//!     -> 3x3 stride-2 conv + GELU -> x_{s+1}
//! ```
//!
//! The decoder upsamples (nearest), concatenates the skip, applies a 3x3 conv
//! + GELU, and a final 1x1 conv maps to class logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{mpt_block_cached, BlockCache, BlockOptions, BlockParams, Fusion, StageFields};
use crate::diffeo::{exponentiate_traced, min_interior_jacobian, ExpTrace, VelocityField, DEFAULT_STEPS};
use crate::error::{shape_err, Error, Result};
use crate::grad::{impl_params, Params};
use crate::metrics::SegMask;
use crate::sca::{CoreUpdate, DEFAULT_CLUSTERS, DEFAULT_HEADS};
use crate::tensor::{
    concat_channels, conv2d_strided, crop_top_left, gelu, pad_bottom_right, softmax, upsample_nearest2, Tensor,
};

/// Saturation bound of predicted velocities, in pixels.
pub const DEFAULT_V_MAX: f64 = 4.0;
/// Smoothing term of the Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Hidden width of the velocity predictor.
pub const VP_HIDDEN: usize = 8;

fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[Cout, Cin, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    /// He-normal weights, zero bias.
    pub fn random<R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        ConvParams { weight: gaussian(&[cout, cin, k, k], std, rng), bias: Tensor::zeros(&[cout]) }
    }

    pub fn zeros(cout: usize, cin: usize, k: usize) -> Self {
        ConvParams { weight: Tensor::zeros(&[cout, cin, k, k]), bias: Tensor::zeros(&[cout]) }
    }

    pub fn zeros_like(&self) -> Self {
        ConvParams { weight: Tensor::zeros(self.weight.shape()), bias: Tensor::zeros(self.bias.shape()) }
    }

    pub fn forward(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        conv2d_strided(x, &self.weight, &self.bias, stride)
    }
}

impl_params!(ConvParams { weight, bias });

/// Two 3x3 convolutions (`C -> 8 -> 2`) followed by a saturating map that
/// bounds every per-pixel vector norm strictly below `v_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityPredictor {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub v_max: f64,
}

impl_params!(VelocityPredictor { conv1, conv2 });

impl VelocityPredictor {
    /// The output layer starts small so the initial deformation is close to
    /// (but not exactly) the identity.
    pub fn random<R: Rng + ?Sized>(c: usize, v_max: f64, rng: &mut R) -> Self {
        let conv1 = ConvParams::random(VP_HIDDEN, c, 3, rng);
        let conv2 = ConvParams { weight: gaussian(&[2, VP_HIDDEN, 3, 3], 1e-2, rng), bias: Tensor::zeros(&[2]) };
        VelocityPredictor { conv1, conv2, v_max }
    }

    pub fn zeros_like(&self) -> Self {
        VelocityPredictor { conv1: self.conv1.zeros_like(), conv2: self.conv2.zeros_like(), v_max: self.v_max }
    }
}

/// `v = v_max * u / sqrt(1 + |u|^2)` per pixel, for `u` of shape `[2, H, W]`.
pub fn saturate(u: &Tensor, v_max: f64) -> Result<Tensor> {
    u.expect_rank(3)?;
    if u.shape()[0] != 2 {
        return Err(shape_err!("saturate expects [2, H, W], got {:?}", u.shape()));
    }
    let n = u.shape()[1] * u.shape()[2];
    let d = u.data();
    let mut out = vec![0.0; 2 * n];
    for p in 0..n {
        let s = v_max / (1.0 + d[p] * d[p] + d[n + p] * d[n + p]).sqrt();
        out[p] = d[p] * s;
        out[n + p] = d[n + p] * s;
    }
    Ok(Tensor::from_parts(u.shape().to_vec(), out))
}

#[derive(Clone, Debug)]
pub struct VelocityCache {
    pub input: Tensor,
    pub pre: Tensor,
    pub hidden: Tensor,
    /// Unsaturated output.
    pub raw: Tensor,
}

pub fn predict_velocity(x: &Tensor, vp: &VelocityPredictor) -> Result<VelocityField> {
    predict_velocity_cached(x, vp).map(|(v, _)| v)
}

pub fn predict_velocity_cached(x: &Tensor, vp: &VelocityPredictor) -> Result<(VelocityField, VelocityCache)> {
    let pre = vp.conv1.forward(x, 1)?;
    let hidden = gelu(&pre);
    let raw = vp.conv2.forward(&hidden, 1)?;
    let v = VelocityField::new(saturate(&raw, vp.v_max)?, vp.v_max)?;
    Ok((v, VelocityCache { input: x.clone(), pre, hidden, raw }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MptNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub stages: usize,
    /// Plain + shifted block pairs per stage.
    pub pairs_per_stage: usize,
    pub n_clusters: usize,
    pub window: usize,
    pub n_squaring: usize,
    pub v_max: f64,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Morph path (velocity predictor + deformation) enabled.
    pub morph: bool,
    /// Semantic clustering attention enabled.
    pub sca: bool,
    pub fusion: Fusion,
    pub core_update: CoreUpdate,
    pub beta_init: f64,
}

impl Default for MptNetConfig {
    fn default() -> Self {
        MptNetConfig {
            in_channels: 1,
            base_channels: 16,
            stages: 2,
            pairs_per_stage: 1,
            n_clusters: DEFAULT_CLUSTERS,
            window: 4,
            n_squaring: DEFAULT_STEPS,
            v_max: DEFAULT_V_MAX,
            heads: DEFAULT_HEADS,
            mlp_ratio: 2,
            num_classes: 2,
            morph: true,
            sca: true,
            fusion: Fusion::Sequential,
            core_update: CoreUpdate::Residual,
            beta_init: 1.0,
        }
    }
}

impl MptNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.in_channels == 0 || self.base_channels == 0 || self.num_classes < 2 {
            return bad("channel counts must be positive and num_classes >= 2");
        }
        if self.stages == 0 || self.pairs_per_stage == 0 {
            return bad("stages and pairs_per_stage must be >= 1");
        }
        if self.window == 0 || self.n_squaring == 0 || self.mlp_ratio == 0 || self.n_clusters == 0 {
            return bad("window, n_squaring, mlp_ratio and n_clusters must be >= 1");
        }
        if self.heads == 0 || self.base_channels % self.heads != 0 {
            return bad("heads must divide base_channels");
        }
        if !(self.v_max > 0.0) || !(self.beta_init > 0.0) {
            return bad("v_max and beta_init must be positive");
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Spatial extents must be multiples of this after padding.
    pub fn size_multiple(&self) -> usize {
        self.window << (self.stages - 1)
    }

    pub fn block_options(&self, index: usize) -> BlockOptions {
        let shift = if index % 2 == 1 { (self.window / 2, self.window / 2) } else { (0, 0) };
        BlockOptions { shift, fusion: self.fusion, core_update: self.core_update }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub vp: Option<VelocityPredictor>,
    pub blocks: Vec<BlockParams>,
    /// Downsampling conv into the next stage (absent on the last stage).
    pub down: Option<ConvParams>,
}

impl_params!(StageParams { vp, blocks, down });

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub stem: ConvParams,
    pub stages: Vec<StageParams>,
    /// `decoder[s]` produces stage-`s` resolution features.
    pub decoder: Vec<ConvParams>,
    pub head: ConvParams,
}

impl_params!(NetParams { stem, stages, decoder, head });

impl NetParams {
    pub fn random<R: Rng + ?Sized>(cfg: &MptNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let win = (cfg.window, cfg.window);
        let stem = ConvParams::random(cfg.channels(0), cfg.in_channels, 3, rng);
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let c = cfg.channels(s);
            let vp = cfg.morph.then(|| VelocityPredictor::random(c, cfg.v_max, rng));
            let mut blocks = Vec::new();
            for _ in 0..2 * cfg.pairs_per_stage {
                let clusters = cfg.sca.then_some(cfg.n_clusters);
                blocks.push(BlockParams::random(c, cfg.heads, win, clusters, cfg.mlp_ratio, cfg.beta_init, rng)?);
            }
            let down = (s + 1 < cfg.stages).then(|| ConvParams::random(cfg.channels(s + 1), c, 3, rng));
            stages.push(StageParams { vp, blocks, down });
        }
        let decoder = (0..cfg.stages - 1)
            .map(|s| ConvParams::random(cfg.channels(s), cfg.channels(s + 1) + cfg.channels(s), 3, rng))
            .collect();
        let head = ConvParams::random(cfg.num_classes, cfg.channels(0), 1, rng);
        Ok(NetParams { stem, stages, decoder, head })
    }

    pub fn zeros_like(&self) -> Self {
        NetParams {
            stem: self.stem.zeros_like(),
            stages: self
                .stages
                .iter()
                .map(|s| StageParams {
                    vp: s.vp.as_ref().map(VelocityPredictor::zeros_like),
                    blocks: s.blocks.iter().map(BlockParams::zeros_like).collect(),
                    down: s.down.as_ref().map(ConvParams::zeros_like),
                })
                .collect(),
            decoder: self.decoder.iter().map(ConvParams::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MorphCache {
    pub velocity: VelocityCache,
    pub forward: ExpTrace,
    pub inverse: ExpTrace,
}

#[derive(Clone, Debug)]
pub struct StageCache {
    pub morph: Option<MorphCache>,
    pub fields: Option<StageFields>,
    pub blocks: Vec<BlockCache>,
    /// Stage output (skip connection and input of `down`).
    pub output: Tensor,
    /// Pre-activation of the downsampling conv.
    pub down_pre: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    pub input: Tensor,
    pub pre: Tensor,
}

#[derive(Clone, Debug)]
pub struct NetCache {
    pub size: (usize, usize),
    pub padded: (usize, usize),
    pub stem_input: Tensor,
    pub stem_pre: Tensor,
    pub stages: Vec<StageCache>,
    pub decoder: Vec<DecoderCache>,
    pub head_input: Tensor,
}

impl NetCache {
    /// Smallest interior Jacobian determinant over all stage deformations
    /// (1.0 when the morph path is off).
    pub fn min_jacobian(&self) -> Result<f64> {
        let mut m = 1.0f64;
        for s in &self.stages {
            if let Some(f) = &s.fields {
                m = m.min(min_interior_jacobian(&f.forward, 1)?);
                m = m.min(min_interior_jacobian(&f.inverse, 1)?);
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MptNet {
    pub config: MptNetConfig,
    pub params: NetParams,
}

impl MptNet {
    pub fn new(config: MptNetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = NetParams::random(&config, &mut rng)?;
        Ok(MptNet { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.forward_cached(image).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, image: &Tensor) -> Result<(Tensor, NetCache)> {
        let cfg = &self.config;
        image.expect_rank(3)?;
        if image.shape()[0] != cfg.in_channels {
            return Err(shape_err!("network expects {} input channels, got {:?}", cfg.in_channels, image.shape()));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let m = cfg.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let stem_input = pad_bottom_right(image, ph, pw)?;
        let stem_pre = self.params.stem.forward(&stem_input, 1)?;
        let mut x = gelu(&stem_pre);
        let mut stages = Vec::with_capacity(cfg.stages);
        for (s, sp) in self.params.stages.iter().enumerate() {
            let (morph, fields) = match &sp.vp {
                Some(vp) => {
                    let (v, velocity) = predict_velocity_cached(&x, vp)?;
                    let (fwd, forward) = exponentiate_traced(&v, cfg.n_squaring)?;
                    let (inv, inverse) = exponentiate_traced(&v.negate(), cfg.n_squaring)?;
                    (Some(MorphCache { velocity, forward, inverse }), Some(StageFields { forward: fwd, inverse: inv }))
                }
                None => (None, None),
            };
            let mut blocks = Vec::with_capacity(sp.blocks.len());
            for (b, bp) in sp.blocks.iter().enumerate() {
                let (y, cache) = mpt_block_cached(&x, fields.as_ref(), bp, &cfg.block_options(b))?;
                blocks.push(cache);
                x = y;
            }
            let output = x;
            let down_pre = match &sp.down {
                Some(d) => Some(d.forward(&output, 2)?),
                None => None,
            };
            x = match &down_pre {
                Some(p) => gelu(p),
                None => output.clone(),
            };
            debug_assert!(s + 1 < cfg.stages || sp.down.is_none());
            stages.push(StageCache { morph, fields, blocks, output, down_pre });
        }
        let mut decoder = vec![None; cfg.stages.saturating_sub(1)];
        for s in (0..cfg.stages - 1).rev() {
            let input = concat_channels(&[&upsample_nearest2(&x)?, &stages[s].output])?;
            let pre = self.params.decoder[s].forward(&input, 1)?;
            x = gelu(&pre);
            decoder[s] = Some(DecoderCache { input, pre });
        }
        let logits = self.params.head.forward(&x, 1)?;
        let logits = crop_top_left(&logits, h, w)?;
        Ok((
            logits,
            NetCache {
                size: (h, w),
                padded: (ph, pw),
                stem_input,
                stem_pre,
                stages,
                decoder: decoder.into_iter().map(|d| d.expect("every decoder level runs")).collect(),
                head_input: x,
            },
        ))
    }
}

/// `1 - mean_k (2 sum p t + s) / (sum p + sum t + s)` over all classes,
/// with `p = softmax(logits)` over the class axis.
pub fn dice_loss(logits: &Tensor, target: &SegMask) -> Result<f64> {
    let p = class_probabilities(logits, target)?;
    let (k, n) = (p.shape()[0], target.height() * target.width());
    let mut acc = 0.0;
    for c in 0..k {
        let (inter, ps, ts) = class_sums(&p, target, c, n);
        acc += (2.0 * inter + DICE_SMOOTH) / (ps + ts + DICE_SMOOTH);
    }
    Ok(1.0 - acc / k as f64)
}

pub(crate) fn class_probabilities(logits: &Tensor, target: &SegMask) -> Result<Tensor> {
    logits.expect_shape(&[target.num_classes(), target.height(), target.width()])?;
    softmax(logits, 0)
}

/// `(sum p t, sum p, sum t)` for class `c`.
pub(crate) fn class_sums(p: &Tensor, target: &SegMask, c: usize, n: usize) -> (f64, f64, f64) {
    let pc = &p.data()[c * n..(c + 1) * n];
    let mut inter = 0.0;
    let mut ts = 0.0;
    for (pv, &l) in pc.iter().zip(target.labels()) {
        if l as usize == c {
            inter += pv;
            ts += 1.0;
        }
    }
    (inter, pc.iter().sum(), ts)
}
