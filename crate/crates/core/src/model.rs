//! The two-view masked network: Siamese encoder, decoder (CrossBlock or
//! CatBlock), pixel head, reconstruction loss and the training loop.

use serde::{Deserialize, Serialize};

use crate::blocks::{CatDecoder, CrossBlock, EncoderBlock};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::optim::{AdamWConfig, CosineSchedule, OptimState};
use crate::params::{Init, ParamId, ParamSet};
use crate::patches::{self, patchify, ImageRgb, MaskSpec, PatchSet};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderVariant {
    CrossBlock,
    CatBlock,
}

impl std::str::FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "crossblock" | "cross" => Ok(DecoderVariant::CrossBlock),
            "catblock" | "cat" => Ok(DecoderVariant::CatBlock),
            other => Err(Error::config(format!("unknown decoder variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoderVariant::CrossBlock => "crossblock",
            DecoderVariant::CatBlock => "catblock",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub decoder: DecoderVariant,
    pub mask_ratio: f64,
    pub norm_targets: bool,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// ViT-Base encoder with the 8-block, 512-wide decoder.
    pub fn base(decoder: DecoderVariant) -> Self {
        ModelConfig {
            image_size: 224,
            patch: 16,
            enc_dim: 768,
            enc_depth: 12,
            enc_heads: 12,
            dec_dim: 512,
            dec_depth: 8,
            dec_heads: 16,
            decoder,
            mask_ratio: 0.9,
            norm_targets: true,
            norm_eps: 1e-6,
        }
    }

    /// Desk-scale configuration used by the training tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            enc_dim: 64,
            enc_depth: 4,
            enc_heads: 4,
            dec_dim: 48,
            dec_depth: 2,
            dec_heads: 4,
            decoder: DecoderVariant::CrossBlock,
            mask_ratio: 0.9,
            norm_targets: true,
            norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return fail(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch
            ));
        }
        for (what, d, h) in [
            ("encoder", self.enc_dim, self.enc_heads),
            ("decoder", self.dec_dim, self.dec_heads),
        ] {
            if h == 0 || d % h != 0 {
                return fail(format!("{what} width {d} is not divisible by {h} heads"));
            }
            if d % 4 != 0 {
                return fail(format!(
                    "{what} width {d} must be a multiple of 4 for the position code"
                ));
            }
        }
        if self.enc_depth == 0 {
            return fail("encoder depth must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return fail(format!("masking ratio must lie in [0, 1], got {}", self.mask_ratio));
        }
        if self.norm_eps <= 0.0 {
            return fail("target normalization eps must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_len(&self) -> usize {
        self.patch * self.patch * 3
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Cross(Vec<CrossBlock>),
    Cat(CatDecoder),
}

impl Decoder {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, y: Var) -> Result<Var> {
        match self {
            Decoder::Cross(blocks) => {
                let mut x = x;
                for b in blocks {
                    x = b.forward(g, x, y)?;
                }
                Ok(x)
            }
            Decoder::Cat(dec) => dec.forward(g, x, y),
        }
    }
}

/// Layer structure; values live in the accompanying [`ParamSet`].
#[derive(Clone, Debug)]
pub struct CroCoNet {
    pub cfg: ModelConfig,
    pub patch_embed: Linear,
    pub enc_blocks: Vec<EncoderBlock>,
    pub enc_norm: LayerNorm,
    pub enc_to_dec: Linear,
    pub mask_token: ParamId,
    pub decoder: Decoder,
    pub dec_norm: LayerNorm,
    pub head: Linear,
}

/// Network plus its parameter values and fixed position codes.
#[derive(Clone, Debug)]
pub struct CroCo<T: Real = f32> {
    pub net: CroCoNet,
    pub params: ParamSet<T>,
    enc_pos: Tensor<T>,
    dec_pos: Tensor<T>,
}

impl<T: Real> CroCo<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut init = Init::new(seed);
        let (d, dd) = (cfg.enc_dim, cfg.dec_dim);
        let patch_embed = Linear::new(&mut ps, &mut init, "patch_embed", cfg.token_len(), d)?;
        let enc_blocks = (0..cfg.enc_depth)
            .map(|i| EncoderBlock::new(&mut ps, &mut init, &format!("enc.block{i}"), d, cfg.enc_heads))
            .collect::<Result<_>>()?;
        let enc_norm = LayerNorm::new(&mut ps, "enc.norm", d)?;
        let enc_to_dec = Linear::new(&mut ps, &mut init, "enc_to_dec", d, dd)?;
        let mask_token = ps.add("mask_token", init.trunc_normal(vec![dd]), false)?;
        let decoder = match cfg.decoder {
            DecoderVariant::CrossBlock => Decoder::Cross(
                (0..cfg.dec_depth)
                    .map(|i| CrossBlock::new(&mut ps, &mut init, &format!("dec.block{i}"), dd, cfg.dec_heads))
                    .collect::<Result<_>>()?,
            ),
            DecoderVariant::CatBlock => Decoder::Cat(CatDecoder::new(
                &mut ps,
                &mut init,
                "dec",
                dd,
                cfg.dec_heads,
                cfg.dec_depth,
            )?),
        };
        let dec_norm = LayerNorm::new(&mut ps, "dec.norm", dd)?;
        let head = Linear::new(&mut ps, &mut init, "head", dd, cfg.token_len())?;
        let enc_pos = patches::pos_embed_2d(cfg.grid(), cfg.grid(), d)?;
        let dec_pos = patches::pos_embed_2d(cfg.grid(), cfg.grid(), dd)?;
        Ok(CroCo {
            net: CroCoNet {
                cfg,
                patch_embed,
                enc_blocks,
                enc_norm,
                enc_to_dec,
                mask_token,
                decoder,
                dec_norm,
                head,
            },
            params: ps,
            enc_pos,
            dec_pos,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::with_params(&self.params)
    }

    fn check_tokens(&self, tokens: &Tensor<T>) -> Result<()> {
        let cfg = self.cfg();
        tokens.expect_shape(&[cfg.num_patches(), cfg.token_len()])
    }

    /// Embeds the tokens at `visible` (all when `None`), adds their position
    /// codes and runs the encoder. Output `[Nv, D]`.
    pub fn encode(&self, g: &mut Graph<'_, T>, tokens: &Tensor<T>, visible: Option<&[usize]>) -> Result<Var> {
        self.check_tokens(tokens)?;
        let (x, pos) = match visible {
            Some(idx) => (tokens.gather_rows(idx)?, self.enc_pos.gather_rows(idx)?),
            None => (tokens.clone(), self.enc_pos.clone()),
        };
        if x.dims2().0 == 0 {
            return Err(Error::Empty("no visible tokens to encode".into()));
        }
        let x = g.constant(x)?;
        let x = self.net.patch_embed.forward(g, x)?;
        let pos = g.constant(pos)?;
        let mut x = g.add(x, pos)?;
        for b in &self.net.enc_blocks {
            x = b.forward(g, x)?;
        }
        self.net.enc_norm.forward(g, x)
    }

    /// Pre-head decoder features `[N, D']` for the first view.
    pub fn decode_features(&self, g: &mut Graph<'_, T>, enc1: Var, mask: &MaskSpec, enc2: Var) -> Result<Var> {
        let n = self.cfg().num_patches();
        if mask.len() != n {
            return Err(Error::dim(format!("mask over {} tokens, model has {n}", mask.len())));
        }
        let nv = g.value(enc1).dims2().0;
        if nv != mask.num_visible() {
            return Err(Error::dim(format!(
                "{nv} encoded tokens for a mask with {} visible",
                mask.num_visible()
            )));
        }
        let p1 = self.net.enc_to_dec.forward(g, enc1)?;
        let p2 = self.net.enc_to_dec.forward(g, enc2)?;
        let tok = g.param(self.net.mask_token);
        let pool = g.concat_rows(&[p1, tok])?;
        let mut next = 0;
        let idx: Vec<usize> = mask
            .mask
            .iter()
            .map(|&m| {
                if m {
                    nv
                } else {
                    next += 1;
                    next - 1
                }
            })
            .collect();
        let x = g.gather_rows(pool, &idx)?;
        let pos = g.constant(self.dec_pos.clone())?;
        let x = g.add(x, pos)?;
        let y = if g.value(p2).dims2().0 == n {
            g.add(p2, pos)?
        } else {
            return Err(Error::dim(format!(
                "reference view has {} tokens, expected {n}",
                g.value(p2).dims2().0
            )));
        };
        let x = self.net.decoder.forward(g, x, y)?;
        self.net.dec_norm.forward(g, x)
    }

    /// Pixel predictions `[N, 3P²]` for every position of the first view.
    pub fn decode(&self, g: &mut Graph<'_, T>, enc1: Var, mask: &MaskSpec, enc2: Var) -> Result<Var> {
        let f = self.decode_features(g, enc1, mask, enc2)?;
        self.net.head.forward(g, f)
    }

    /// Encodes both views and decodes; returns predictions for all tokens.
    pub fn forward(&self, g: &mut Graph<'_, T>, view1: &Tensor<T>, view2: &Tensor<T>, mask: &MaskSpec) -> Result<Var> {
        let visible = mask.visible_indices();
        let e1 = self.encode(g, view1, Some(&visible))?;
        let e2 = self.encode(g, view2, None)?;
        self.decode(g, e1, mask, e2)
    }

    /// Decoder features of a single image, its encoding fed as both streams.
    pub fn forward_mono_dup(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.graph();
        let e = self.encode(&mut g, tokens, None)?;
        let f = self.decode_features(&mut g, e, &MaskSpec::none(self.cfg().num_patches()), e)?;
        Ok(g.value(f).clone())
    }

    /// Reconstruction targets: raw tokens or their per-patch normalization.
    pub fn targets(&self, tokens: &Tensor<T>) -> Tensor<T> {
        if self.cfg().norm_targets {
            patches::normalize_tokens(tokens, self.cfg().norm_eps)
        } else {
            tokens.clone()
        }
    }

    /// Differentiable masked reconstruction loss of one pair.
    pub fn pair_loss(
        &self,
        g: &mut Graph<'_, T>,
        view1: &Tensor<T>,
        view2: &Tensor<T>,
        mask: &MaskSpec,
    ) -> Result<Var> {
        let pred = self.forward(g, view1, view2, mask)?;
        pretrain_loss(g, pred, &self.targets(view1), mask)
    }

    /// Loss value without building gradients for the caller.
    pub fn eval_loss(&self, view1: &Tensor<T>, view2: &Tensor<T>, mask: &MaskSpec) -> Result<f64> {
        let mut g = self.graph();
        let l = self.pair_loss(&mut g, view1, view2, mask)?;
        Ok(g.value(l).data()[0].as_f64())
    }

    pub fn tokens(&self, img: &ImageRgb) -> Result<Tensor<T>> {
        let cfg = self.cfg();
        if img.height != cfg.image_size || img.width != cfg.image_size {
            return Err(Error::dim(format!(
                "model expects {0}x{0} images, got {1}x{2}",
                cfg.image_size, img.height, img.width
            )));
        }
        Ok(patchify(img, cfg.patch)?.tokens.cast())
    }

    /// Reference, masked input, prediction composite and target images.
    pub fn reconstruct(&self, view1: &ImageRgb, view2: &ImageRgb, mask: &MaskSpec) -> Result<Reconstruction> {
        let cfg = self.cfg();
        let (t1, t2) = (self.tokens(view1)?, self.tokens(view2)?);
        let mut g = self.graph();
        let pred = self.forward(&mut g, &t1, &t2, mask)?;
        let pred = g.value(pred).clone();
        let pred = if cfg.norm_targets {
            patches::unnormalize_tokens(&pred, &t1, cfg.norm_eps)?
        } else {
            pred
        };
        let target = patchify(view1, cfg.patch)?;
        let mut composite = target.clone();
        let mut masked = target.clone();
        for i in mask.masked_indices() {
            for (c, &p) in composite.tokens.row_mut(i).iter_mut().zip(pred.row(i)) {
                *c = p.as_f64().clamp(0.0, 1.0) as f32;
            }
            masked.tokens.row_mut(i).iter_mut().for_each(|v| *v = 0.5);
        }
        Ok(Reconstruction {
            reference: view2.clone(),
            masked_input: patches::unpatchify(&masked)?,
            composite: patches::unpatchify(&composite)?,
            target: view1.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub reference: ImageRgb,
    pub masked_input: ImageRgb,
    pub composite: ImageRgb,
    pub target: ImageRgb,
}

/// Mean over masked tokens of the per-element squared error. Only masked
/// rows of `pred` enter the graph, so visible predictions have no influence.
pub fn pretrain_loss<T: Real>(g: &mut Graph<'_, T>, pred: Var, target: &Tensor<T>, mask: &MaskSpec) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::dim(format!(
            "predictions {:?} vs targets {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    let idx = mask.masked_indices();
    if idx.is_empty() {
        return Err(Error::Empty("loss over an empty mask".into()));
    }
    let p = g.gather_rows(pred, &idx)?;
    let t = g.constant(target.gather_rows(&idx)?)?;
    let d = g.sub(p, t)?;
    let d = g.square(d)?;
    g.mean_all(d)
}

/// Plain-value form of [`pretrain_loss`] with optional target normalization.
pub fn pretrain_loss_value<T: Real>(
    pred: &Tensor<T>,
    target: &PatchSet<T>,
    mask: &MaskSpec,
    normalized: bool,
    eps: f64,
) -> Result<f64> {
    let t = if normalized {
        patches::normalize_tokens(&target.tokens, eps)
    } else {
        target.tokens.clone()
    };
    let mut g = Graph::new();
    let p = g.constant(pred.clone())?;
    let l = pretrain_loss(&mut g, p, &t, mask)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Mask seed for (root seed, step, pair slot); stateless so resumed runs
/// draw the same masks.
pub fn mask_seed(seed: u64, step: u64, slot: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ slot.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: AdamWConfig,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub seed: u64,
    /// Randomly exchange the two views of a pair per step.
    pub swap_views: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: AdamWConfig::default(),
            warmup_steps: 0,
            total_steps: 1000,
            seed: 0,
            swap_views: true,
        }
    }
}

/// A training pair as patch tokens.
#[derive(Clone, Debug)]
pub struct TokenPair<T: Real> {
    pub view1: Tensor<T>,
    pub view2: Tensor<T>,
}

pub struct Trainer<T: Real = f32> {
    pub model: CroCo<T>,
    pub optim: OptimState<T>,
    pub config: TrainConfig,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: CroCo<T>, config: TrainConfig) -> Result<Self> {
        if config.warmup_steps >= config.total_steps.max(1) && config.warmup_steps > 0 {
            return Err(Error::config("warmup must be shorter than the run"));
        }
        let optim = OptimState::new(config.optim.clone(), &model.params);
        Ok(Trainer { model, optim, config })
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.config.optim.base_lr,
            warmup_lr: crate::optim::WARMUP_LR,
            warmup_steps: self.config.warmup_steps,
            total_steps: self.config.total_steps,
        }
    }

    /// Masks (and view order) used for a batch at the current step.
    pub fn batch_masks(&self, batch: usize) -> Result<Vec<(MaskSpec, bool)>> {
        let cfg = self.model.cfg();
        (0..batch)
            .map(|i| {
                let s = mask_seed(self.config.seed, self.optim.step, i as u64);
                let mask = patches::sample_mask(cfg.num_patches(), cfg.mask_ratio, s)?;
                let swap = self.config.swap_views && (mask_seed(s, 1, 1) & 1 == 1);
                Ok((mask, swap))
            })
            .collect()
    }

    /// Mean loss of a batch at the current parameters, without updating.
    pub fn batch_loss(&self, batch: &[TokenPair<T>]) -> Result<f64> {
        let masks = self.batch_masks(batch.len())?;
        let mut total = 0.0;
        for (pair, (mask, swap)) in batch.iter().zip(&masks) {
            let (a, b) = if *swap {
                (&pair.view2, &pair.view1)
            } else {
                (&pair.view1, &pair.view2)
            };
            total += self.model.eval_loss(a, b, mask)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// One optimization step on the batch; returns `(mean loss, lr)`.
    pub fn train_step(&mut self, batch: &[TokenPair<T>]) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(Error::Empty("empty training batch".into()));
        }
        let masks = self.batch_masks(batch.len())?;
        self.model.params.zero_grads();
        let inv_b = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (pair, (mask, swap)) in batch.iter().zip(&masks) {
            let (a, b) = if *swap {
                (&pair.view2, &pair.view1)
            } else {
                (&pair.view1, &pair.view2)
            };
            let grads = {
                let mut g = self.model.graph();
                let l = self.model.pair_loss(&mut g, a, b, mask)?;
                total += g.value(l).data()[0].as_f64();
                let l = g.scale(l, inv_b)?;
                g.backward(l)?
            };
            grads.accumulate_into(&mut self.model.params)?;
        }
        let lr = self.schedule().lr(self.optim.step).max(f64::MIN_POSITIVE);
        self.optim.step(&mut self.model.params, lr)?;
        Ok((total * inv_b, lr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(decoder: DecoderVariant) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch: 4,
            enc_dim: 16,
            enc_depth: 2,
            enc_heads: 2,
            dec_dim: 12,
            dec_depth: 2,
            dec_heads: 3,
            decoder,
            mask_ratio: 0.5,
            norm_targets: true,
            norm_eps: 1e-6,
        }
    }

    fn random_tokens<T: Real>(cfg: &ModelConfig, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![cfg.num_patches(), cfg.token_len()], |_| T::lit(rng.random()))
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::base(DecoderVariant::CrossBlock).validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut c = ModelConfig::tiny();
        c.dec_heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::tiny();
        c.mask_ratio = 1.2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert_eq!("CatBlock".parse::<DecoderVariant>().unwrap(), DecoderVariant::CatBlock);
    }

    #[test]
    fn shapes_through_the_pipeline() {
        for variant in [DecoderVariant::CrossBlock, DecoderVariant::CatBlock] {
            let cfg = small_cfg(variant);
            let m = CroCo::<f32>::new(cfg.clone(), 0).unwrap();
            let (t1, t2) = (random_tokens(&cfg, 1), random_tokens(&cfg, 2));
            let mask = patches::sample_mask(16, 0.5, 3).unwrap();
            let mut g = m.graph();
            let e1 = m.encode(&mut g, &t1, Some(&mask.visible_indices())).unwrap();
            assert_eq!(g.shape(e1), &[8, 16]);
            let e2 = m.encode(&mut g, &t2, None).unwrap();
            let p = m.decode(&mut g, e1, &mask, e2).unwrap();
            assert_eq!(g.shape(p), &[16, 48]);
            assert_eq!(m.forward_mono_dup(&t1).unwrap().shape(), &[16, 12]);
        }
    }

    #[test]
    fn unmasked_encoding_equals_full_encoding() {
        let cfg = small_cfg(DecoderVariant::CrossBlock);
        let m = CroCo::<f64>::new(cfg.clone(), 0).unwrap();
        let t = random_tokens(&cfg, 1);
        let mut g = m.graph();
        let all: Vec<usize> = (0..16).collect();
        let a = m.encode(&mut g, &t, Some(&all)).unwrap();
        let b = m.encode(&mut g, &t, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn visible_subset_encoding_differs_from_full_rows() {
        let cfg = small_cfg(DecoderVariant::CrossBlock);
        let m = CroCo::<f64>::new(cfg.clone(), 0).unwrap();
        let t = random_tokens(&cfg, 1);
        let mask = patches::sample_mask(16, 0.5, 5).unwrap();
        let vis = mask.visible_indices();
        let mut g = m.graph();
        let sub = m.encode(&mut g, &t, Some(&vis)).unwrap();
        let full = m.encode(&mut g, &t, None).unwrap();
        let rows = g.value(full).gather_rows(&vis).unwrap();
        assert!(g.value(sub).max_abs_diff(&rows) > 1e-6);
    }

    #[test]
    fn empty_visible_set_rejected() {
        let cfg = small_cfg(DecoderVariant::CrossBlock);
        let m = CroCo::<f32>::new(cfg.clone(), 0).unwrap();
        let mut g = m.graph();
        let t = random_tokens(&cfg, 1);
        assert!(matches!(m.encode(&mut g, &t, Some(&[])), Err(Error::Empty(_))));
    }

    #[test]
    fn mask_length_mismatch_rejected() {
        let cfg = small_cfg(DecoderVariant::CrossBlock);
        let m = CroCo::<f32>::new(cfg.clone(), 0).unwrap();
        let t = random_tokens(&cfg, 1);
        let mask = patches::sample_mask(16, 0.5, 1).unwrap();
        let mut g = m.graph();
        let e = m.encode(&mut g, &t, None).unwrap();
        assert!(matches!(m.decode(&mut g, e, &mask, e), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_decoder_sublayers_predict_from_position_only() {
        let cfg = small_cfg(DecoderVariant::CrossBlock);
        let mut m = CroCo::<f64>::new(cfg.clone(), 0).unwrap();
        for p in m.params.iter_mut() {
            if p.name.starts_with("dec.block") && (p.name.contains("proj") || p.name.contains("fc2")) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mask = patches::sample_mask(16, 0.5, 2).unwrap();
        let run = |t1: &Tensor<f64>, t2: &Tensor<f64>| {
            let mut g = m.graph();
            let p = m.forward(&mut g, t1, t2, &mask).unwrap();
            g.value(p).clone()
        };
        let a = run(&random_tokens(&cfg, 1), &random_tokens(&cfg, 2));
        let b = run(&random_tokens(&cfg, 3), &random_tokens(&cfg, 4));
        let masked = mask.masked_indices();
        assert!(
            a.gather_rows(&masked)
                .unwrap()
                .max_abs_diff(&b.gather_rows(&masked).unwrap())
                < 1e-12
        );

        // head(LN(e_mask + pos)) computed directly
        let mut g = m.graph();
        let tok = g.param(m.net.mask_token);
        let pos = g.constant(m.dec_pos.gather_rows(&masked).unwrap()).unwrap();
        let x = g.add_row(pos, tok).unwrap();
        let x = m.net.dec_norm.forward(&mut g, x).unwrap();
        let direct = m.net.head.forward(&mut g, x).unwrap();
        assert!(g.value(direct).max_abs_diff(&a.gather_rows(&masked).unwrap()) < 1e-12);
    }

    #[test]
    fn reference_view_influences_masked_predictions() {
        let cfg = small_cfg(DecoderVariant::CrossBlock);
        let m = CroCo::<f64>::new(cfg.clone(), 0).unwrap();
        let mask = patches::sample_mask(16, 0.5, 2).unwrap();
        let t1 = random_tokens(&cfg, 1);
        let mut g = m.graph();
        let a = m.forward(&mut g, &t1, &random_tokens(&cfg, 2), &mask).unwrap();
        let b = m.forward(&mut g, &t1, &random_tokens(&cfg, 9), &mask).unwrap();
        let masked = mask.masked_indices();
        let (a, b) = (
            g.value(a).gather_rows(&masked).unwrap(),
            g.value(b).gather_rows(&masked).unwrap(),
        );
        assert!(a.max_abs_diff(&b) > 1e-8);
    }

    #[test]
    fn loss_closed_forms_and_locality() {
        let mask = MaskSpec {
            mask: vec![false, true, false],
            ratio: 1.0 / 3.0,
        };
        let target = PatchSet {
            tokens: Tensor::<f64>::from_fn(vec![3, 12], |i| (i as f64).sin()),
            rows: 1,
            cols: 3,
            patch: 2,
        };
        assert_eq!(
            pretrain_loss_value(&target.tokens, &target, &mask, false, 1e-6).unwrap(),
            0.0
        );
        let off = target.tokens.map(|v| v + 0.5);
        assert!((pretrain_loss_value(&off, &target, &mask, false, 1e-6).unwrap() - 0.25).abs() < 1e-15);
        let mut perturbed = off.clone();
        for i in [0, 2] {
            perturbed.row_mut(i).iter_mut().for_each(|v| *v = 1e3);
        }
        assert_eq!(
            pretrain_loss_value(&perturbed, &target, &mask, true, 1e-6).unwrap(),
            pretrain_loss_value(&off, &target, &mask, true, 1e-6).unwrap()
        );
        let empty = MaskSpec::none(3);
        assert!(matches!(
            pretrain_loss_value(&off, &target, &empty, false, 1e-6),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn encoder_is_shared_between_views() {
        let cfg = small_cfg(DecoderVariant::CrossBlock);
        let m = CroCo::<f64>::new(cfg.clone(), 0).unwrap();
        let enc_scalars: usize = m
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("enc."))
            .map(|(_, p)| p.value.len())
            .sum();
        assert_eq!(enc_scalars, cfg.enc_depth * EncoderBlock::num_params(16) + 2 * 16);

        let (ta, tb) = (random_tokens(&cfg, 1), random_tokens(&cfg, 2));
        let grad_of = |views: &[&Tensor<f64>]| {
            let mut g = m.graph();
            let mut total = None;
            for t in views {
                let e = m.encode(&mut g, t, None).unwrap();
                let s = g.sum_all(e).unwrap();
                total = Some(match total {
                    None => s,
                    Some(acc) => g.add(acc, s).unwrap(),
                });
            }
            let grads = g.backward(total.unwrap()).unwrap();
            let id = m.net.patch_embed.weight;
            grads.param(id).unwrap().clone()
        };
        let both = grad_of(&[&ta, &tb]);
        let mut sum = grad_of(&[&ta]);
        sum.add_assign(&grad_of(&[&tb])).unwrap();
        assert!(both.max_abs_diff(&sum) < 1e-10);
    }

    #[test]
    fn cat_mono_dup_halves_match_when_view_embeddings_match() {
        let cfg = small_cfg(DecoderVariant::CatBlock);
        let mut m = CroCo::<f64>::new(cfg.clone(), 0).unwrap();
        let Decoder::Cat(dec) = m.net.decoder.clone() else {
            unreachable!()
        };
        let v1 = m.params.value(dec.v1).clone();
        m.params.set_value(dec.v2, v1).unwrap();
        let t = random_tokens(&cfg, 1);
        let mut g = m.graph();
        let e = m.encode(&mut g, &t, None).unwrap();
        let p = m.net.enc_to_dec.forward(&mut g, e).unwrap();
        let pos = g.constant(m.dec_pos.clone()).unwrap();
        let x = g.add(p, pos).unwrap();
        let z = dec.forward_all(&mut g, x, x).unwrap();
        let z = g.value(z);
        let n = cfg.num_patches();
        let first = z.gather_rows(&(0..n).collect::<Vec<_>>()).unwrap();
        let second = z.gather_rows(&(n..2 * n).collect::<Vec<_>>()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_cfg(DecoderVariant::CrossBlock);
        let batch = vec![TokenPair {
            view1: random_tokens::<f32>(&cfg, 1),
            view2: random_tokens::<f32>(&cfg, 2),
        }];
        let run = || {
            let mut t = Trainer::new(CroCo::<f32>::new(cfg.clone(), 7).unwrap(), TrainConfig::default()).unwrap();
            (0..3).map(|_| t.train_step(&batch).unwrap().0).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mask_seeds_differ_by_step_and_slot() {
        let s: std::collections::HashSet<u64> = (0..10)
            .flat_map(|st| (0..4).map(move |i| mask_seed(3, st, i)))
            .collect();
        assert_eq!(s.len(), 40);
    }
}
