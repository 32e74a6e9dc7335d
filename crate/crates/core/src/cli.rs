//! Command implementations behind the `croco` binary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, CONFIG_FILE};
use crate::error::{Error, Result};
use crate::flops::{count_flops, count_params};
use crate::heads::dense::{DenseModel, DenseSample, DenseTrainer, FinetuneConfig, FLOW_HEAD};
use crate::heads::metrics;
use crate::heads::tiling::flow_infer_tiled;
use crate::io::{read_crdp_channels, read_ppm, write_crdp, write_ppm, RawMap};
use crate::model::{mask_seed, CroCo, DecoderVariant, ModelConfig, TokenPair, TrainConfig, Trainer};
use crate::pairs::covisibility_ratio;
use crate::pairs::homography::{apply_homography, homography_pair_with, HomographyParams};
use crate::pairs::sample::{
    entry, load_scene_dir, read_manifest, resolve, sample_pair_indices, save_scene_dir, write_manifest,
    write_pair_stats, PairManifestEntry,
};
use crate::patches::{sample_mask, ImageRgb};
use crate::synth;

/// Independent seed streams derived from the root seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const DATA: u64 = 4;
    pub const HEAD: u64 = 5;
}

pub fn derive_seed(root: u64, stream: u64) -> u64 {
    mask_seed(root, u64::MAX - stream, stream)
}

/// Creates `out`, refusing to reuse a non-empty folder unless `force`.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(Error::config(format!(
                "output path {} is not a directory",
                out.display()
            )));
        }
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        Ok(())
    } else if force {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))
    } else {
        fs::create_dir(out).map_err(|e| Error::io(out, e))
    }
}

/// Prepares the output folder and writes the resolved configuration.
pub fn start_run(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    prepare_out(out, force)?;
    cfg.save(out.join(CONFIG_FILE))
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::config(format!("`{key}` must be set for this command")))
}

/// Center crop to `size × size`.
pub fn fit_image(img: &ImageRgb, size: usize, path: &Path) -> Result<ImageRgb> {
    if img.height < size || img.width < size {
        return Err(Error::dim(format!(
            "{}: image {}x{} is smaller than the model input {size}",
            path.display(),
            img.height,
            img.width
        )));
    }
    if img.height == size && img.width == size {
        return Ok(img.clone());
    }
    img.crop((img.height - size) / 2, (img.width - size) / 2, size, size)
}

fn csv(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn write_line(w: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

fn finite(loss: f64, step: u64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numerical(format!("loss is {loss} at step {step}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub steps: u64,
}

/// Loads the manifest's pairs as model tokens.
pub fn load_pairs(manifest: &Path, model: &CroCo<f32>) -> Result<Vec<TokenPair<f32>>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Empty(format!("{}: manifest lists no pairs", manifest.display())));
    }
    let size = model.cfg().image_size;
    entries
        .iter()
        .map(|e| {
            let load = |p: &str| -> Result<_> {
                let path = resolve(manifest, p);
                model.tokens(&fit_image(&read_ppm(&path)?, size, &path)?)
            };
            Ok(TokenPair {
                view1: load(&e.path_view1)?,
                view2: load(&e.path_view2)?,
            })
        })
        .collect()
}

/// Pair indices used at `step`: the whole set if it fits in a batch,
/// otherwise a seeded draw without replacement.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n <= batch {
        return idx;
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mask_seed(seed, step, 0)));
    idx.truncate(batch);
    idx
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, force: bool) -> Result<PretrainReport> {
    let manifest = require(&cfg.manifest, "data.manifest")?;
    let (model, optim) = match &cfg.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let model = ck.restore_model_as(&cfg.model)?;
            let optim = ck.restore_optim(&model)?.ok_or_else(|| Error::Checkpoint {
                name: "<optimizer>".into(),
                detail: format!("{} has no optimizer state to resume from", p.display()),
            })?;
            (model, Some(optim))
        }
        None => (
            CroCo::<f32>::new(cfg.model.clone(), derive_seed(cfg.seed, stream::INIT))?,
            None,
        ),
    };
    let data = load_pairs(manifest, &model)?;
    start_run(cfg, out, force)?;
    let tc = TrainConfig {
        optim: cfg.optim.clone(),
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
        seed: derive_seed(cfg.seed, stream::MASK),
        swap_views: cfg.swap_views,
    };
    let mut trainer = Trainer::new(model, tc)?;
    if let Some(o) = optim {
        trainer.optim = o;
    }
    let batch_seed = derive_seed(cfg.seed, stream::BATCH);
    let loss_path = out.join("loss.csv");
    let mut log = csv(&loss_path)?;
    write_line(&mut log, &loss_path, "step,lr,loss")?;
    let mut report = PretrainReport {
        first_loss: None,
        last_loss: None,
        steps: 0,
    };
    let every = (cfg.steps / 20).max(1);
    while trainer.step() < cfg.steps {
        let step = trainer.step();
        let batch: Vec<TokenPair<f32>> = batch_indices(data.len(), cfg.batch, batch_seed, step)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let (loss, lr) = trainer.train_step(&batch)?;
        let loss = finite(loss, step)?;
        write_line(&mut log, &loss_path, &format!("{step},{lr:e},{loss}"))?;
        report.first_loss.get_or_insert(loss);
        report.last_loss = Some(loss);
        report.steps += 1;
        let done = trainer.step();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            Checkpoint::from_model(&trainer.model, Some(&trainer.optim))
                .save(out.join(format!("checkpoint_{done:06}.ckpt")))?;
        }
        if done % every == 0 {
            eprintln!("step {done}/{} lr {lr:.3e} loss {loss:.5}", cfg.steps);
        }
    }
    log.flush().map_err(|e| Error::io(&loss_path, e))?;
    Checkpoint::from_model(&trainer.model, Some(&trainer.optim)).save(out.join("checkpoint.ckpt"))?;
    Ok(report)
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |c: &ModelConfig| ModelConfig {
        mask_ratio: 0.0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

fn load_backbone(path: &Path, expected: &ModelConfig) -> Result<CroCo<f32>> {
    let ck = Checkpoint::load(path)?;
    if !same_architecture(&ck.config, expected) {
        return Err(Error::Checkpoint {
            name: "<config>".into(),
            detail: format!(
                "{} was trained with {:?}, the run configuration asks for {:?}",
                path.display(),
                ck.config,
                expected
            ),
        });
    }
    ck.restore_model()
}

pub fn cmd_reconstruct(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let model = load_backbone(require(&cfg.checkpoint, "init.checkpoint")?, &cfg.model)?;
    let size = model.cfg().image_size;
    let read = |p: &Option<PathBuf>, key: &str| -> Result<ImageRgb> {
        let p = require(p, key)?;
        fit_image(&read_ppm(p)?, size, p)
    };
    let v1 = read(&cfg.view1, "reconstruct.view1")?;
    let v2 = read(&cfg.view2, "reconstruct.view2")?;
    let ratio = cfg.reconstruct_ratio.unwrap_or(model.cfg().mask_ratio);
    let mask = sample_mask(model.cfg().num_patches(), ratio, derive_seed(cfg.seed, stream::MASK))?;
    let r = model.reconstruct(&v1, &v2, &mask)?;
    start_run(cfg, out, force)?;
    write_ppm(out.join("reference.ppm"), &r.reference)?;
    write_ppm(out.join("masked.ppm"), &r.masked_input)?;
    write_ppm(out.join("composite.ppm"), &r.composite)?;
    write_ppm(out.join("target.ppm"), &r.target)?;
    Ok(())
}

pub fn cmd_covis(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<PairManifestEntry>> {
    let dir = require(&cfg.scene_dir, "covis.scene_dir")?;
    let views = load_scene_dir(dir)?;
    let pairs = sample_pair_indices(
        &views,
        cfg.covis_lo,
        cfg.covis_hi,
        cfg.covis_cap,
        derive_seed(cfg.seed, stream::DATA),
        cfg.covis_tau,
    )?;
    start_run(cfg, out, force)?;
    let entries: Vec<_> = pairs.iter().map(|p| entry(&views, p)).collect();
    write_manifest(out.join("pairs.jsonl"), &entries)?;
    write_pair_stats(out.join("pair_stats.csv"), &views, &pairs)?;
    Ok(entries)
}

/// Parameter and FLOP table for both decoder variants at `model`'s sizes.
pub fn flops_table(model: &ModelConfig) -> String {
    let mut s = format!(
        "{:<10} {:>12} {:>14} {:>14} {:>14} {:>14} {:>14}\n",
        "decoder", "params (M)", "enc GFLOPs", "dec GFLOPs", "linear GFLOPs", "1-enc GFLOPs", "total GFLOPs"
    );
    for variant in [DecoderVariant::CrossBlock, DecoderVariant::CatBlock] {
        let c = ModelConfig {
            decoder: variant,
            ..model.clone()
        };
        let p = count_params(&c);
        let f = count_flops(&c);
        let g = |v: u64| v as f64 / 1e9;
        s.push_str(&format!(
            "{:<10} {:>12.2} {:>14.2} {:>14.2} {:>14.2} {:>14.2} {:>14.2}\n",
            variant.to_string(),
            p.total as f64 / 1e6,
            g(f.encoder_full),
            g(f.decoder),
            g(f.linear),
            g(f.single_encoder_total),
            g(f.total)
        ));
    }
    s
}

pub fn cmd_flops(model: &ModelConfig, out: Option<&Path>, cfg: &RunConfig, force: bool) -> Result<String> {
    model.validate()?;
    let table = flops_table(model);
    if let Some(out) = out {
        start_run(cfg, out, force)?;
        let path = out.join("flops.txt");
        fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    }
    Ok(table)
}

/// Reads `<k>_img1.ppm`, `<k>_img2.ppm`, `<k>_flow.crdp` triplets.
pub fn load_flow_dir(dir: &Path) -> Result<Vec<(String, DenseSample)>> {
    let mut keys: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_img1.ppm"))
                .map(String::from)
        })
        .collect();
    keys.sort();
    if keys.is_empty() {
        return Err(Error::Empty(format!("{}: no <k>_img1.ppm files", dir.display())));
    }
    keys.into_iter()
        .map(|k| {
            let s = DenseSample {
                img1: read_ppm(dir.join(format!("{k}_img1.ppm")))?,
                img2: read_ppm(dir.join(format!("{k}_img2.ppm")))?,
                gt: read_crdp_channels(dir.join(format!("{k}_flow.crdp")), 2)?,
            };
            s.check()?;
            Ok((k, s))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowReport {
    pub first_loss: f64,
    pub last_loss: f64,
    pub aepe: f64,
}

pub fn cmd_finetune_flow(cfg: &RunConfig, out: &Path, force: bool) -> Result<FlowReport> {
    let dir = require(&cfg.flow_dir, "flow.data_dir")?;
    let data = load_flow_dir(dir)?;
    let backbone = match &cfg.checkpoint {
        Some(p) => load_backbone(p, &cfg.model)?,
        None => CroCo::<f32>::new(cfg.model.clone(), derive_seed(cfg.seed, stream::INIT))?,
    };
    let model = DenseModel::new(backbone, 2, derive_seed(cfg.seed, stream::HEAD))?;
    start_run(cfg, out, force)?;
    let ft = FinetuneConfig {
        optim: cfg.optim.clone(),
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
        batch: cfg.batch,
        seed: derive_seed(cfg.seed, stream::BATCH),
        jitter: cfg.flow_jitter,
    };
    let samples: Vec<DenseSample> = data.iter().map(|(_, s)| s.clone()).collect();
    let mut trainer = DenseTrainer::new(model, ft)?;
    let loss_path = out.join("loss.csv");
    let mut log = csv(&loss_path)?;
    write_line(&mut log, &loss_path, "step,lr,loss")?;
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    let every = (cfg.steps / 20).max(1);
    for step in 0..cfg.steps {
        let (loss, lr) = trainer.train_step(&samples)?;
        let loss = finite(loss, step)?;
        write_line(&mut log, &loss_path, &format!("{step},{lr:e},{loss}"))?;
        if step == 0 {
            first = loss;
        }
        last = loss;
        if (step + 1) % every == 0 {
            eprintln!("step {}/{} lr {lr:.3e} loss {loss:.5}", step + 1, cfg.steps);
        }
    }
    log.flush().map_err(|e| Error::io(&loss_path, e))?;
    let model = &trainer.model;
    let tile = model.cfg().image_size;
    let stride = if cfg.flow_stride == 0 {
        (tile / 2).max(1)
    } else {
        cfg.flow_stride
    };
    let mut per_sample = serde_json::Map::new();
    let mut total = 0.0;
    for (k, s) in &data {
        let pred = flow_infer_tiled(&s.img1, &s.img2, tile, stride, |a, b| model.predict(a, b))?;
        write_crdp(out.join(format!("{k}_pred.crdp")), &pred)?;
        let e = metrics::aepe(&pred, &s.gt, None)?;
        per_sample.insert(k.clone(), json!(e));
        total += e;
    }
    let aepe = total / data.len() as f64;
    let report = json!({ "aepe": aepe, "per_sample": per_sample, "final_loss": last });
    let mpath = out.join("metrics.json");
    fs::write(&mpath, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&mpath, e))?;
    let mut ck = Checkpoint::from_model(&model.backbone, None);
    ck.heads.push(FLOW_HEAD.into());
    ck.save(out.join("flow.ckpt"))?;
    Ok(FlowReport {
        first_loss: first,
        last_loss: last,
        aepe,
    })
}

/// Metrics of a prediction map against ground truth, as JSON.
pub fn evaluate(kind: &str, pred: &RawMap, gt: &RawMap) -> Result<serde_json::Value> {
    let same = |a: &RawMap, b: &RawMap| -> Result<()> {
        if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
            return Err(Error::dim(format!(
                "prediction {}x{}x{} vs ground truth {}x{}x{}",
                a.height, a.width, a.channels, b.height, b.width, b.channels
            )));
        }
        Ok(())
    };
    same(pred, gt)?;
    Ok(match kind {
        "flow" => {
            let valid: Vec<bool> = gt
                .data
                .chunks(2)
                .map(|c| c[0].is_finite() && c[1].is_finite())
                .collect();
            json!({ "aepe": metrics::aepe(pred, gt, Some(&valid))? })
        }
        "depth" => {
            let valid: Vec<bool> = gt.data.iter().map(|g| g.is_finite() && *g > 0.0).collect();
            json!({
                "delta1": metrics::delta1(&pred.data, &gt.data, metrics::DELTA1_THRESHOLD)?,
                "l1x1000": metrics::l1x1000(&pred.data, &gt.data, Some(&valid))?,
            })
        }
        "disparity" => json!({
            "bad3": metrics::bad3(&pred.data, &gt.data)?,
            "mse_log": metrics::stereo_mse_log_loss(&pred.data, &gt.data, metrics::STEREO_EPS)?,
        }),
        other => return Err(Error::config(format!("unknown eval.kind {other:?}"))),
    })
}

pub fn cmd_eval(cfg: &RunConfig, out: Option<&Path>, force: bool) -> Result<serde_json::Value> {
    let channels = if cfg.eval_kind == "flow" { 2 } else { 1 };
    let gt = read_crdp_channels(require(&cfg.eval_gt, "eval.gt")?, channels)?;
    let pred = read_crdp_channels(require(&cfg.eval_pred, "eval.pred")?, channels)?;
    let m = evaluate(&cfg.eval_kind, &pred, &gt)?;
    if let Some(out) = out {
        start_run(cfg, out, force)?;
        let path = out.join("metrics.json");
        fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(m)
}

/// Fraction of `img2` pixels whose pre-image under `h` lies in the image,
/// and the same for the inverse; the smaller of the two.
fn homography_overlap(h: &nalgebra::Matrix3<f64>, height: usize, width: usize) -> f64 {
    let inside = |m: &nalgebra::Matrix3<f64>| {
        let mut n = 0usize;
        for y in 0..height {
            for x in 0..width {
                let (u, v) = apply_homography(m, x as f64, y as f64);
                if u >= -0.5 && v >= -0.5 && u < width as f64 - 0.5 && v < height as f64 - 0.5 {
                    n += 1;
                }
            }
        }
        n as f64 / (height * width) as f64
    };
    match h.try_inverse() {
        Some(inv) => inside(&inv).min(inside(h)),
        None => 0.0,
    }
}

/// Writes synthetic data; returns the number of items written.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<usize> {
    let n = cfg.synth_count;
    let size = cfg.synth_size;
    let seed = derive_seed(cfg.seed, stream::DATA);
    if n == 0 || size == 0 {
        return Err(Error::config("synth.count and synth.size must be positive"));
    }
    start_run(cfg, out, force)?;
    match cfg.synth_kind.as_str() {
        "pairs" | "homography" => {
            let mut entries = Vec::with_capacity(n);
            for k in 0..n {
                let s = mask_seed(seed, k as u64, 0);
                let (a, b, covis) = if cfg.synth_kind == "pairs" {
                    let (a, b) = synth::toy_scene_pair(size, cfg.covis_lo, s)?;
                    let c = covisibility_ratio(&a, &b, cfg.covis_tau)?.covis;
                    (a.image, b.image, c)
                } else {
                    let img = synth::value_noise(size, size, 8, s);
                    let (a, b, h) = homography_pair_with(&img, &HomographyParams::default(), s)?;
                    (a, b, homography_overlap(&h, size, size))
                };
                let (p1, p2) = (format!("pair{k:04}_1.ppm"), format!("pair{k:04}_2.ppm"));
                write_ppm(out.join(&p1), &a)?;
                write_ppm(out.join(&p2), &b)?;
                entries.push(PairManifestEntry {
                    path_view1: p1,
                    path_view2: p2,
                    covis,
                });
            }
            write_manifest(out.join("pairs.jsonl"), &entries)?;
        }
        "scene" => save_scene_dir(out, &synth::toy_scene_views(n, size, seed)?)?,
        "flow" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for k in 0..n {
                let (dx, dy) = (rng.random_range(-4..=4), rng.random_range(-4..=4));
                let s = synth::shift_flow_sample(size, dx, dy, rng.random())?;
                write_ppm(out.join(format!("{k:04}_img1.ppm")), &s.img1)?;
                write_ppm(out.join(format!("{k:04}_img2.ppm")), &s.img2)?;
                write_crdp(out.join(format!("{k:04}_flow.crdp")), &s.gt)?;
            }
        }
        other => return Err(Error::config(format!("unknown synth.kind {other:?}"))),
    }
    Ok(n)
}
