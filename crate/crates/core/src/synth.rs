//! Synthetic data: smooth noise images, translated and toy-scene view pairs,
//! constant-shift flow samples.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::dense::DenseSample;
use crate::heads::pose::Pose;
use crate::io::RawMap;
use crate::pairs::camera::{CameraView, Intrinsics};
use crate::pairs::covis::{covisibility_ratio, DEFAULT_TAU};
use crate::pairs::render::{forward_pose, random_pose, render_toy_scene, Scene, Texture};
use crate::patches::ImageRgb;

/// Random colors on a `cell`-pixel lattice, bilinearly interpolated.
pub fn value_noise(height: usize, width: usize, cell: usize, seed: u64) -> ImageRgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = cell.max(1);
    let (gh, gw) = (height / cell + 2, width / cell + 2);
    let lattice: Vec<[f32; 3]> = (0..gh * gw)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    ImageRgb::from_fn(height, width, |y, x| {
        let (fy, fx) = (y as f32 / cell as f32, x as f32 / cell as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
        let (a, b, c, d) = (at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1));
        std::array::from_fn(|k| {
            let top = a[k] + (b[k] - a[k]) * tx;
            let bot = c[k] + (d[k] - c[k]) * tx;
            top + (bot - top) * ty
        })
    })
}

/// Two renders of a textured wall from cameras translated parallel to it,
/// so that the second image is the first shifted by `shift` pixels
/// (`(dx, dy)`, content moving left/up for positive values).
pub fn translated_pair(size: usize, shift: (f64, f64), seed: u64) -> Result<(CameraView, CameraView)> {
    let depth = 2.0;
    let k = Intrinsics::centered(size, size, 60.0);
    let tex = value_noise(256, 256, 8, seed);
    let scene = Scene {
        rects: vec![Scene::wall(depth, 4.0, Texture::Image(tex))],
        ..Default::default()
    };
    let a = render_toy_scene(&scene, "view1", size, size, k, forward_pose(Vector3::zeros()))?;
    let eye = Vector3::new(shift.0 * depth / k.fx, shift.1 * depth / k.fy, 0.0);
    let b = render_toy_scene(&scene, "view2", size, size, k, forward_pose(eye))?;
    Ok((a, b))
}

/// Two views of a random toy scene with co-visibility of at least
/// `min_covis` (redrawn until found).
pub fn toy_scene_pair(size: usize, min_covis: f64, seed: u64) -> Result<(CameraView, CameraView)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(rng.random());
    let k = Intrinsics::centered(size, size, 70.0);
    for _ in 0..200 {
        let pa = random_pose(&mut rng)?;
        let pb = nudge(&pa, &mut rng);
        let a = render_toy_scene(&scene, "view1", size, size, k, pa)?;
        let b = render_toy_scene(&scene, "view2", size, size, k, pb)?;
        if a.num_finite() == 0 || b.num_finite() == 0 {
            continue;
        }
        if covisibility_ratio(&a, &b, DEFAULT_TAU)?.covis >= min_covis {
            return Ok((a, b));
        }
    }
    Err(Error::Numerical("could not draw a co-visible toy pair".into()))
}

/// Small random rigid motion of a camera.
fn nudge(p: &Pose, rng: &mut impl Rng) -> Pose {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(0.0..0.12);
    let rot = nalgebra::Rotation3::from_scaled_axis(axis.normalize() * angle);
    let t = Vector3::new(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.2..0.2),
    );
    Pose {
        rotation: p.rotation * rot.matrix(),
        translation: p.translation + t,
    }
}

/// Random views of one random scene, all looking toward its back wall.
pub fn toy_scene_views(count: usize, size: usize, seed: u64) -> Result<Vec<CameraView>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(rng.random());
    let k = Intrinsics::centered(size, size, 70.0);
    let first = random_pose(&mut rng)?;
    (0..count)
        .map(|i| {
            let pose = if i == 0 { first } else { nudge(&first, &mut rng) };
            render_toy_scene(&scene, format!("view{i:03}"), size, size, k, pose)
        })
        .collect()
}

/// Pair with constant integer flow `(dx, dy)`: `img2(p + d) = img1(p)`.
pub fn shift_flow_sample(size: usize, dx: i64, dy: i64, seed: u64) -> Result<DenseSample> {
    let margin = dx.unsigned_abs().max(dy.unsigned_abs()) as usize;
    let big = value_noise(size + 2 * margin, size + 2 * margin, 6, seed);
    let m = margin as i64;
    let img1 = big.crop(margin, margin, size, size)?;
    let img2 = big.crop((m - dy) as usize, (m - dx) as usize, size, size)?;
    let gt = RawMap::new(
        size,
        size,
        2,
        (0..size * size).flat_map(|_| [dx as f32, dy as f32]).collect(),
    )?;
    Ok(DenseSample { img1, img2, gt })
}
