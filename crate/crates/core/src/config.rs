//! Run configuration as a plain `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.
//! [`RunConfig::to_text`] writes every key, so a saved file fully describes
//! a run.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

pub const CONFIG_FILE: &str = "config.txt";

/// Every key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed; split per consumer (init, masks, batches, data)"),
    ("model.image_size", "square input side in pixels"),
    ("model.patch", "patch side in pixels"),
    ("model.enc_dim", "encoder width"),
    ("model.enc_depth", "encoder blocks"),
    ("model.enc_heads", "encoder attention heads"),
    ("model.dec_dim", "decoder width"),
    ("model.dec_depth", "decoder blocks"),
    ("model.dec_heads", "decoder attention heads"),
    ("model.decoder", "crossblock | catblock"),
    ("model.mask_ratio", "fraction of first-view patches masked, in [0, 1]"),
    ("model.norm_targets", "regress per-patch normalized pixels"),
    ("model.norm_eps", "eps of the target normalization"),
    ("optim.base_lr", "peak learning rate"),
    ("optim.weight_decay", "decoupled weight decay"),
    ("optim.beta1", "AdamW first-moment decay"),
    ("optim.beta2", "AdamW second-moment decay"),
    ("optim.eps", "AdamW denominator eps"),
    ("train.steps", "optimizer steps"),
    ("train.warmup_steps", "linear warmup steps"),
    ("train.batch", "pairs per step"),
    (
        "train.checkpoint_every",
        "steps between checkpoints (0: only at the end)",
    ),
    ("train.swap_views", "randomly exchange the two views of a pair per step"),
    ("train.resume", "checkpoint to resume pre-training from"),
    ("data.manifest", "pair manifest (JSON lines) for pre-training"),
    (
        "init.checkpoint",
        "checkpoint for reconstruct / backbone for finetune-flow",
    ),
    ("reconstruct.view1", "masked view (PPM)"),
    ("reconstruct.view2", "reference view (PPM)"),
    (
        "reconstruct.mask_ratio",
        "masking ratio for reconstruct; empty: the model's",
    ),
    ("covis.scene_dir", "scene folder with views.json"),
    ("covis.lo", "lower co-visibility bound"),
    ("covis.hi", "upper co-visibility bound"),
    ("covis.cap", "maximum pairs kept per scene"),
    ("covis.tau", "relative depth tolerance"),
    ("flow.data_dir", "folder of <k>_img1.ppm, <k>_img2.ppm, <k>_flow.crdp"),
    (
        "flow.stride",
        "tile stride for tiled inference (0: half the model input)",
    ),
    ("flow.jitter", "color jitter amount during finetuning (0 disables)"),
    ("eval.pred", "prediction map (CRDP)"),
    ("eval.gt", "ground-truth map (CRDP)"),
    ("eval.kind", "flow | depth | disparity"),
    ("synth.kind", "pairs | scene | flow | homography"),
    ("synth.count", "number of pairs / views to generate"),
    ("synth.size", "image side of generated data"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: AdamWConfig,
    pub steps: u64,
    pub warmup_steps: u64,
    pub batch: usize,
    pub checkpoint_every: u64,
    pub swap_views: bool,
    pub resume: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub view1: Option<PathBuf>,
    pub view2: Option<PathBuf>,
    pub reconstruct_ratio: Option<f64>,
    pub scene_dir: Option<PathBuf>,
    pub covis_lo: f64,
    pub covis_hi: f64,
    pub covis_cap: usize,
    pub covis_tau: f64,
    pub flow_dir: Option<PathBuf>,
    pub flow_stride: usize,
    pub flow_jitter: f32,
    pub eval_pred: Option<PathBuf>,
    pub eval_gt: Option<PathBuf>,
    pub eval_kind: String,
    pub synth_kind: String,
    pub synth_count: usize,
    pub synth_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::tiny(),
            optim: AdamWConfig::default(),
            steps: 500,
            warmup_steps: 0,
            batch: 4,
            checkpoint_every: 0,
            swap_views: true,
            resume: None,
            manifest: None,
            checkpoint: None,
            view1: None,
            view2: None,
            reconstruct_ratio: None,
            scene_dir: None,
            covis_lo: 0.5,
            covis_hi: 1.0,
            covis_cap: 1000,
            covis_tau: crate::pairs::DEFAULT_TAU,
            flow_dir: None,
            flow_stride: 0,
            flow_jitter: 0.0,
            eval_pred: None,
            eval_gt: None,
            eval_kind: "flow".into(),
            synth_kind: "pairs".into(),
            synth_count: 4,
            synth_size: 64,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::config(format!("{key} = {v:?}: {e}")))
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.image_size" => m.image_size = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.enc_dim" => m.enc_dim = parse(key, v)?,
            "model.enc_depth" => m.enc_depth = parse(key, v)?,
            "model.enc_heads" => m.enc_heads = parse(key, v)?,
            "model.dec_dim" => m.dec_dim = parse(key, v)?,
            "model.dec_depth" => m.dec_depth = parse(key, v)?,
            "model.dec_heads" => m.dec_heads = parse(key, v)?,
            "model.decoder" => m.decoder = parse(key, v)?,
            "model.mask_ratio" => m.mask_ratio = parse(key, v)?,
            "model.norm_targets" => m.norm_targets = parse(key, v)?,
            "model.norm_eps" => m.norm_eps = parse(key, v)?,
            "optim.base_lr" => o.base_lr = parse(key, v)?,
            "optim.weight_decay" => o.weight_decay = parse(key, v)?,
            "optim.beta1" => o.beta1 = parse(key, v)?,
            "optim.beta2" => o.beta2 = parse(key, v)?,
            "optim.eps" => o.eps = parse(key, v)?,
            "train.steps" => self.steps = parse(key, v)?,
            "train.warmup_steps" => self.warmup_steps = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "train.swap_views" => self.swap_views = parse(key, v)?,
            "train.resume" => self.resume = parse_path(v),
            "data.manifest" => self.manifest = parse_path(v),
            "init.checkpoint" => self.checkpoint = parse_path(v),
            "reconstruct.view1" => self.view1 = parse_path(v),
            "reconstruct.view2" => self.view2 = parse_path(v),
            "reconstruct.mask_ratio" => self.reconstruct_ratio = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "covis.scene_dir" => self.scene_dir = parse_path(v),
            "covis.lo" => self.covis_lo = parse(key, v)?,
            "covis.hi" => self.covis_hi = parse(key, v)?,
            "covis.cap" => self.covis_cap = parse(key, v)?,
            "covis.tau" => self.covis_tau = parse(key, v)?,
            "flow.data_dir" => self.flow_dir = parse_path(v),
            "flow.stride" => self.flow_stride = parse(key, v)?,
            "flow.jitter" => self.flow_jitter = parse(key, v)?,
            "eval.pred" => self.eval_pred = parse_path(v),
            "eval.gt" => self.eval_gt = parse_path(v),
            "eval.kind" => self.eval_kind = v.to_string(),
            "synth.kind" => self.synth_kind = v.to_string(),
            "synth.count" => self.synth_count = parse(key, v)?,
            "synth.size" => self.synth_size = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let o = &self.optim;
        Some(match key {
            "seed" => self.seed.to_string(),
            "model.image_size" => m.image_size.to_string(),
            "model.patch" => m.patch.to_string(),
            "model.enc_dim" => m.enc_dim.to_string(),
            "model.enc_depth" => m.enc_depth.to_string(),
            "model.enc_heads" => m.enc_heads.to_string(),
            "model.dec_dim" => m.dec_dim.to_string(),
            "model.dec_depth" => m.dec_depth.to_string(),
            "model.dec_heads" => m.dec_heads.to_string(),
            "model.decoder" => m.decoder.to_string(),
            "model.mask_ratio" => m.mask_ratio.to_string(),
            "model.norm_targets" => m.norm_targets.to_string(),
            "model.norm_eps" => m.norm_eps.to_string(),
            "optim.base_lr" => o.base_lr.to_string(),
            "optim.weight_decay" => o.weight_decay.to_string(),
            "optim.beta1" => o.beta1.to_string(),
            "optim.beta2" => o.beta2.to_string(),
            "optim.eps" => o.eps.to_string(),
            "train.steps" => self.steps.to_string(),
            "train.warmup_steps" => self.warmup_steps.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "train.swap_views" => self.swap_views.to_string(),
            "train.resume" => show_path(&self.resume),
            "data.manifest" => show_path(&self.manifest),
            "init.checkpoint" => show_path(&self.checkpoint),
            "reconstruct.view1" => show_path(&self.view1),
            "reconstruct.view2" => show_path(&self.view2),
            "reconstruct.mask_ratio" => self.reconstruct_ratio.map(|r| r.to_string()).unwrap_or_default(),
            "covis.scene_dir" => show_path(&self.scene_dir),
            "covis.lo" => self.covis_lo.to_string(),
            "covis.hi" => self.covis_hi.to_string(),
            "covis.cap" => self.covis_cap.to_string(),
            "covis.tau" => self.covis_tau.to_string(),
            "flow.data_dir" => show_path(&self.flow_dir),
            "flow.stride" => self.flow_stride.to_string(),
            "flow.jitter" => self.flow_jitter.to_string(),
            "eval.pred" => show_path(&self.eval_pred),
            "eval.gt" => show_path(&self.eval_gt),
            "eval.kind" => self.eval_kind.clone(),
            "synth.kind" => self.synth_kind.clone(),
            "synth.count" => self.synth_count.to_string(),
            "synth.size" => self.synth_size.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {line:?}", k + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", k + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            out.push_str(&format!(
                "# {doc}\n{key} = {}\n",
                self.get(key).expect("documented key")
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.optim.base_lr > 0.0) {
            return Err(Error::config(format!(
                "optim.base_lr must be positive, got {}",
                self.optim.base_lr
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch must be positive"));
        }
        if let Some(r) = self.reconstruct_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!(
                    "reconstruct.mask_ratio must lie in [0, 1], got {r}"
                )));
            }
        }
        if !(0.0 <= self.covis_lo && self.covis_lo < self.covis_hi && self.covis_hi <= 1.0) {
            return Err(Error::config(format!(
                "covis bounds need 0 <= lo < hi <= 1, got [{}, {}]",
                self.covis_lo, self.covis_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.flow_jitter) {
            return Err(Error::config(format!(
                "flow.jitter must lie in [0, 1], got {}",
                self.flow_jitter
            )));
        }
        if !(self.covis_tau > 0.0) {
            return Err(Error::config("covis.tau must be positive"));
        }
        if !["flow", "depth", "disparity"].contains(&self.eval_kind.as_str()) {
            return Err(Error::config(format!(
                "eval.kind must be flow, depth or disparity, got {:?}",
                self.eval_kind
            )));
        }
        if !["pairs", "scene", "flow", "homography"].contains(&self.synth_kind.as_str()) {
            return Err(Error::config(format!("unknown synth.kind {:?}", self.synth_kind)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DecoderVariant;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.model.decoder = DecoderVariant::CatBlock;
        c.optim.base_lr = 3e-4;
        c.manifest = Some("data/pairs.jsonl".into());
        c.reconstruct_ratio = Some(0.0);
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn every_key_documented_and_readable() {
        let c = RunConfig::default();
        for (k, _) in KEYS {
            let v = c.get(k).unwrap();
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn comments_and_errors() {
        let c = RunConfig::parse("# comment\n\nseed = 7\nmodel.decoder = cat\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.decoder, DecoderVariant::CatBlock);
        for bad in [
            "seed 7",
            "nope = 1",
            "seed = -1",
            "model.mask_ratio = 1.5",
            "optim.base_lr = 0",
            "covis.lo = 1",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        let err = RunConfig::parse("seed = 1\nmodel.patch = x").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
