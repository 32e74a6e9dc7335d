//! Co-visibility-binned pair sampling, pair manifests and scene folders.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::pose::Pose;
use crate::io::{read_crdp_channels, read_ppm, write_crdp, write_ppm};
use crate::pairs::camera::{relative_motion, CameraView, Intrinsics};
use crate::pairs::covis::{covisibility_ratio, Covisibility};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifestEntry {
    pub path_view1: String,
    pub path_view2: String,
    pub covis: f64,
}

/// Unordered view pair `i < j` with its co-visibility.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair {
    pub i: usize,
    pub j: usize,
    pub covis: Covisibility,
}

/// Scores every unordered pair and keeps those with `lo ≤ covis ≤ hi`,
/// choosing uniformly at random (under `seed`) when more than `cap`
/// qualify. The result is sorted by `(i, j)`.
pub fn sample_pair_indices(
    views: &[CameraView],
    lo: f64,
    hi: f64,
    cap: usize,
    seed: u64,
    tau: f64,
) -> Result<Vec<ScoredPair>> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::config(format!(
            "co-visibility bin needs 0 <= lo < hi <= 1, got [{lo}, {hi}]"
        )));
    }
    let mut kept = Vec::new();
    for i in 0..views.len() {
        for j in i + 1..views.len() {
            let c = covisibility_ratio(&views[i], &views[j], tau)?;
            if c.covis >= lo && c.covis <= hi {
                kept.push(ScoredPair { i, j, covis: c });
            }
        }
    }
    if kept.len() > cap {
        kept.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        kept.truncate(cap);
        kept.sort_by_key(|p| (p.i, p.j));
    }
    Ok(kept)
}

pub fn sample_pairs(views: &[CameraView], lo: f64, hi: f64, cap: usize, seed: u64) -> Result<Vec<PairManifestEntry>> {
    let pairs = sample_pair_indices(views, lo, hi, cap, seed, crate::pairs::covis::DEFAULT_TAU)?;
    Ok(pairs.iter().map(|p| entry(views, p)).collect())
}

pub fn entry(views: &[CameraView], p: &ScoredPair) -> PairManifestEntry {
    PairManifestEntry {
        path_view1: views[p.i].name.clone(),
        path_view2: views[p.j].name.clone(),
        covis: p.covis.covis,
    }
}

/// Writes JSON lines, sorted by path.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[PairManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| (&a.path_view1, &a.path_view2).cmp(&(&b.path_view1, &b.path_view2)));
    let mut out = Vec::new();
    for e in &sorted {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PairManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), k + 1)))
        })
        .collect()
}

/// Resolves a manifest path relative to the manifest's folder.
pub fn resolve(manifest: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// CSV of `(path_view1, path_view2, distance, angle_deg, covis)`.
pub fn write_pair_stats(path: impl AsRef<Path>, views: &[CameraView], pairs: &[ScoredPair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("path_view1,path_view2,distance,angle_deg,covis\n");
    for p in pairs {
        let (d, a) = relative_motion(&views[p.i].pose, &views[p.j].pose);
        out.push_str(&format!(
            "{},{},{d:.6},{a:.6},{:.6}\n",
            views[p.i].name, views[p.j].name, p.covis.covis
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One entry of a scene folder's `views.json`; paths are relative to the
/// folder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub image: String,
    pub depth: String,
    pub intrinsics: Intrinsics,
    /// World-from-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

pub const VIEWS_FILE: &str = "views.json";

/// Loads `views.json` plus the PPM images and CRDP depth maps it lists.
/// View names are the image paths joined onto `dir`.
pub fn load_scene_dir(dir: impl AsRef<Path>) -> Result<Vec<CameraView>> {
    // absolute names, so manifests written elsewhere still resolve
    let dir = fs::canonicalize(dir.as_ref()).map_err(|e| Error::io(dir.as_ref(), e))?;
    let dir = dir.as_path();
    let index = dir.join(VIEWS_FILE);
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let records: Vec<ViewRecord> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", index.display())))?;
    records
        .iter()
        .map(|r| {
            let img_path = dir.join(&r.image);
            let image = read_ppm(&img_path)?;
            let depth = read_crdp_channels(dir.join(&r.depth), 1)?;
            let pose = Pose {
                rotation: Matrix3::from_fn(|i, j| r.rotation[i][j]),
                translation: Vector3::from(r.translation),
            };
            CameraView::new(img_path.to_string_lossy(), image, depth, r.intrinsics, pose)
        })
        .collect()
}

/// Writes views as `view{k}.ppm` / `view{k}.crdp` plus `views.json`.
pub fn save_scene_dir(dir: impl AsRef<Path>, views: &[CameraView]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(views.len());
    for (k, v) in views.iter().enumerate() {
        let image = format!("view{k:03}.ppm");
        let depth = format!("view{k:03}.crdp");
        write_ppm(dir.join(&image), &v.image)?;
        write_crdp(dir.join(&depth), &v.depth)?;
        records.push(ViewRecord {
            image,
            depth,
            intrinsics: v.intrinsics,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| v.pose.rotation[(i, j)])),
            translation: std::array::from_fn(|i| v.pose.translation[i]),
        });
    }
    let index = dir.join(VIEWS_FILE);
    fs::write(&index, serde_json::to_vec_pretty(&records)?).map_err(|e| Error::io(&index, e))
}
