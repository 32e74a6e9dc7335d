//! Dense binocular regression head (flow, disparity) on top of the
//! pre-trained encoder/decoder, and its finetuning loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::io::RawMap;
use crate::model::{CroCo, ModelConfig};
use crate::nn::Linear;
use crate::optim::{AdamWConfig, CosineSchedule, OptimState, WARMUP_LR};
use crate::pairs::homography::ColorJitter;
use crate::params::{Init, ParamSet};
use crate::patches::{patchify_hwc, unpatchify_hwc, ImageRgb, MaskSpec};
use crate::tensor::{Real, Tensor};

pub const FLOW_HEAD: &str = "flow_head";

/// Per-token linear map `D' → P·P·C`.
#[derive(Clone, Debug)]
pub struct DenseHead {
    pub linear: Linear,
    pub patch: usize,
    pub channels: usize,
}

impl DenseHead {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        patch: usize,
        channels: usize,
    ) -> Result<Self> {
        if channels == 0 || patch == 0 {
            return Err(Error::config(
                "dense head needs a positive patch size and channel count",
            ));
        }
        Ok(DenseHead {
            linear: Linear::new(ps, init, name, dim, patch * patch * channels)?,
            patch,
            channels,
        })
    }

    /// Token predictions `[N, P·P·C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        self.linear.forward(g, features)
    }

    /// Unpatchifies token predictions into an `H × W × C` map.
    pub fn to_map<T: Real>(&self, tokens: &Tensor<T>, rows: usize, cols: usize) -> Result<RawMap> {
        let data = unpatchify_hwc(tokens, rows, cols, self.patch, self.channels)?;
        RawMap::new(
            rows * self.patch,
            cols * self.patch,
            self.channels,
            data.iter().map(|v| v.as_f64() as f32).collect(),
        )
    }
}

/// Dense head applied to decoder features: `[N, D']` → `H × W × C`.
pub fn dense_head<T: Real>(
    params: &ParamSet<T>,
    head: &DenseHead,
    features: &Tensor<T>,
    rows: usize,
    cols: usize,
) -> Result<RawMap> {
    let (n, _) = features.dims2();
    if n != rows * cols {
        return Err(Error::dim(format!("{n} feature rows for a {rows}x{cols} patch grid")));
    }
    let mut g = Graph::with_params(params);
    let f = g.constant(features.clone())?;
    let out = head.forward(&mut g, f)?;
    head.to_map(g.value(out), rows, cols)
}

/// Backbone plus dense head; the head's parameters live in the backbone's
/// parameter set under `flow_head.*`.
pub struct DenseModel<T: Real = f32> {
    pub backbone: CroCo<T>,
    pub head: DenseHead,
}

impl<T: Real> DenseModel<T> {
    pub fn new(backbone: CroCo<T>, channels: usize, seed: u64) -> Result<Self> {
        let mut backbone = backbone;
        let cfg = backbone.cfg().clone();
        let mut init = Init::new(seed);
        let head = DenseHead::new(
            &mut backbone.params,
            &mut init,
            FLOW_HEAD,
            cfg.dec_dim,
            cfg.patch,
            channels,
        )?;
        Ok(DenseModel { backbone, head })
    }

    pub fn cfg(&self) -> &ModelConfig {
        self.backbone.cfg()
    }

    /// Token predictions for an image pair given as patch tokens.
    pub fn forward(&self, g: &mut Graph<'_, T>, t1: &Tensor<T>, t2: &Tensor<T>) -> Result<Var> {
        let m = &self.backbone;
        let e1 = m.encode(g, t1, None)?;
        let e2 = m.encode(g, t2, None)?;
        let f = m.decode_features(g, e1, &MaskSpec::none(self.cfg().num_patches()), e2)?;
        self.head.forward(g, f)
    }

    /// Direct regression on one image pair of exactly the model's size.
    pub fn predict(&self, img1: &ImageRgb, img2: &ImageRgb) -> Result<RawMap> {
        let (t1, t2) = (self.backbone.tokens(img1)?, self.backbone.tokens(img2)?);
        let mut g = self.backbone.graph();
        let out = self.forward(&mut g, &t1, &t2)?;
        let grid = self.cfg().grid();
        self.head.to_map(g.value(out), grid, grid)
    }

    /// Ground-truth map as tokens `[N, P·P·C]`.
    pub fn target_tokens(&self, gt: &RawMap) -> Result<Tensor<T>> {
        if gt.channels != self.head.channels {
            return Err(Error::Format(format!(
                "ground truth has {} channel(s), head predicts {}",
                gt.channels, self.head.channels
            )));
        }
        let data: Vec<T> = gt.data.iter().map(|&v| T::lit(v as f64)).collect();
        patchify_hwc(&data, gt.height, gt.width, gt.channels, self.cfg().patch)
    }

    /// Mean squared error of the prediction over all pixels and channels.
    pub fn loss(&self, g: &mut Graph<'_, T>, t1: &Tensor<T>, t2: &Tensor<T>, target: &Tensor<T>) -> Result<Var> {
        let pred = self.forward(g, t1, t2)?;
        if g.shape(pred) != target.shape() {
            return Err(Error::dim(format!(
                "prediction {:?} vs target {:?}",
                g.shape(pred),
                target.shape()
            )));
        }
        let t = g.constant(target.clone())?;
        let d = g.sub(pred, t)?;
        let d = g.square(d)?;
        g.mean_all(d)
    }
}

/// Image pair with its ground-truth map (flow: 2 channels, disparity: 1).
#[derive(Clone, Debug)]
pub struct DenseSample {
    pub img1: ImageRgb,
    pub img2: ImageRgb,
    pub gt: RawMap,
}

fn crop_map(m: &RawMap, y0: usize, x0: usize, h: usize, w: usize) -> RawMap {
    let mut data = Vec::with_capacity(h * w * m.channels);
    for y in y0..y0 + h {
        let start = (y * m.width + x0) * m.channels;
        data.extend_from_slice(&m.data[start..start + w * m.channels]);
    }
    RawMap {
        height: h,
        width: w,
        channels: m.channels,
        data,
    }
}

impl DenseSample {
    /// Same `size × size` window of both images and the map.
    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Result<DenseSample> {
        Ok(DenseSample {
            img1: self.img1.crop(y0, x0, size, size)?,
            img2: self.img2.crop(y0, x0, size, size)?,
            gt: crop_map(&self.gt, y0, x0, size, size),
        })
    }

    pub fn check(&self) -> Result<()> {
        let (h, w) = (self.img1.height, self.img1.width);
        if self.img2.height != h || self.img2.width != w || self.gt.height != h || self.gt.width != w {
            return Err(Error::dim(format!(
                "sample sizes differ: {}x{}, {}x{}, map {}x{}",
                h, w, self.img2.height, self.img2.width, self.gt.height, self.gt.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub optim: AdamWConfig,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch: usize,
    pub seed: u64,
    /// Color jitter amount applied identically to both images; 0 disables.
    pub jitter: f32,
}

pub struct DenseTrainer<T: Real = f32> {
    pub model: DenseModel<T>,
    pub optim: OptimState<T>,
    pub config: FinetuneConfig,
    rng: ChaCha8Rng,
}

impl<T: Real> DenseTrainer<T> {
    pub fn new(model: DenseModel<T>, config: FinetuneConfig) -> Result<Self> {
        if config.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let optim = OptimState::new(config.optim.clone(), &model.backbone.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(DenseTrainer {
            model,
            optim,
            config,
            rng,
        })
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.config.optim.base_lr,
            warmup_lr: WARMUP_LR,
            warmup_steps: self.config.warmup_steps,
            total_steps: self.config.total_steps,
        }
    }

    /// Random model-sized crop of a sample (the whole sample if it already
    /// has the model's size).
    fn random_crop(&mut self, s: &DenseSample) -> Result<DenseSample> {
        let size = self.model.cfg().image_size;
        let (h, w) = (s.img1.height, s.img1.width);
        if h < size || w < size {
            return Err(Error::dim(format!(
                "sample {h}x{w} is smaller than the model input {size}"
            )));
        }
        let y0 = self.rng.random_range(0..=h - size);
        let x0 = self.rng.random_range(0..=w - size);
        let mut c = s.crop(y0, x0, size)?;
        if self.config.jitter > 0.0 {
            let j = ColorJitter::random(&mut self.rng, self.config.jitter);
            c.img1 = j.apply(&c.img1);
            c.img2 = j.apply(&c.img2);
        }
        Ok(c)
    }

    /// One step on `batch` samples drawn uniformly from `data`; returns
    /// `(mean loss, lr)`.
    pub fn train_step(&mut self, data: &[DenseSample]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Empty("no finetuning samples".into()));
        }
        self.model.backbone.params.zero_grads();
        let inv_b = 1.0 / self.config.batch as f64;
        let mut total = 0.0;
        for _ in 0..self.config.batch {
            let k = self.rng.random_range(0..data.len());
            let s = self.random_crop(&data[k])?;
            let m = &self.model;
            let (t1, t2) = (m.backbone.tokens(&s.img1)?, m.backbone.tokens(&s.img2)?);
            let target = m.target_tokens(&s.gt)?;
            let grads = {
                let mut g = m.backbone.graph();
                let l = m.loss(&mut g, &t1, &t2, &target)?;
                total += g.value(l).data()[0].as_f64();
                let l = g.scale(l, inv_b)?;
                g.backward(l)?
            };
            grads.accumulate_into(&mut self.model.backbone.params)?;
        }
        let lr = self.schedule().lr(self.optim.step).max(f64::MIN_POSITIVE);
        self.optim.step(&mut self.model.backbone.params, lr)?;
        Ok((total * inv_b, lr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, GradCheck};
    use crate::model::DecoderVariant;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch: 4,
            enc_dim: 8,
            enc_depth: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            decoder: DecoderVariant::CrossBlock,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn dimensioning() {
        let c = ModelConfig::base(DecoderVariant::CrossBlock);
        let mut ps = ParamSet::<f32>::new();
        let head = DenseHead::new(&mut ps, &mut Init::new(0), "h", c.dec_dim, c.patch, 2).unwrap();
        let f = Tensor::<f32>::zeros(vec![196, c.dec_dim]);
        let m = dense_head(&ps, &head, &f, 14, 14).unwrap();
        assert_eq!((m.height, m.width, m.channels), (224, 224, 2));
        assert!(dense_head(&ps, &head, &f, 13, 14).is_err());
    }

    #[test]
    fn zero_weights_give_zero_field() {
        let mut ps = ParamSet::<f64>::new();
        let head = DenseHead::new(&mut ps, &mut Init::new(0), "h", 6, 2, 2).unwrap();
        ps.set_value(head.linear.weight, Tensor::zeros(vec![6, 8])).unwrap();
        let f = Tensor::from_fn(vec![4, 6], |i| i as f64);
        let m = dense_head(&ps, &head, &f, 2, 2).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_layout_follows_patches() {
        let mut ps = ParamSet::<f64>::new();
        let head = DenseHead::new(&mut ps, &mut Init::new(0), "h", 1, 2, 2).unwrap();
        // weight picks out the feature for every output; bias encodes (y, x, c)
        ps.set_value(head.linear.weight, Tensor::zeros(vec![1, 8])).unwrap();
        ps.set_value(head.linear.bias, Tensor::from_fn(vec![8], |i| i as f64))
            .unwrap();
        let f = Tensor::zeros(vec![1, 1]);
        let m = dense_head(&ps, &head, &f, 1, 1).unwrap();
        // token layout y, x, c: pixel (1, 0) channel 1 is element (1·2 + 0)·2 + 1
        assert_eq!(m.at(1, 0, 1), 5.0);
        assert_eq!(m.at(0, 1, 0), 2.0);
    }

    #[test]
    fn gradients_through_head() {
        let model = DenseModel::new(CroCo::<f64>::new(cfg(), 1).unwrap(), 2, 2).unwrap();
        let t1 = Tensor::from_fn(vec![4, 48], |i| ((i * 37) % 11) as f64 / 11.0);
        let t2 = Tensor::from_fn(vec![4, 48], |i| ((i * 17) % 7) as f64 / 7.0);
        let target = Tensor::from_fn(vec![4, 32], |i| (i % 5) as f64 - 2.0);
        let mut params = model.backbone.params.clone();
        let report = check_param_gradients(
            &mut params,
            &GradCheck {
                max_entries: Some(6),
                ..Default::default()
            },
            |g| model.loss(g, &t1, &t2, &target),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn channel_mismatch_is_a_format_error() {
        let model = DenseModel::new(CroCo::<f32>::new(cfg(), 1).unwrap(), 2, 2).unwrap();
        let gt = RawMap::new(8, 8, 1, vec![0.0; 64]).unwrap();
        assert!(matches!(model.target_tokens(&gt), Err(Error::Format(_))));
    }
}
