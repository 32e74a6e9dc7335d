//! Toy scene rasterizer: textured axis-aligned rectangles seen through a
//! pinhole camera with a z-buffer.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::pose::Pose;
use crate::io::RawMap;
use crate::pairs::camera::{look_at, CameraView, Intrinsics};
use crate::patches::ImageRgb;

pub const NEAR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Solid([f32; 3]),
    Checker {
        cell: f64,
        a: [f32; 3],
        b: [f32; 3],
    },
    /// Blocky random colors, one per `cell × cell` square.
    Noise {
        seed: u64,
        cell: f64,
    },
    /// Stretched over the whole rectangle, nearest sampling.
    Image(ImageRgb),
}

fn hash3(seed: u64, i: i64, j: i64) -> u64 {
    let mut z = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Texture {
    /// Color at in-plane coordinates `(s, t)` measured from the rectangle's
    /// minimum corner; `(ws, wt)` is the rectangle size.
    pub fn sample(&self, s: f64, t: f64, ws: f64, wt: f64) -> [f32; 3] {
        match self {
            Texture::Solid(c) => *c,
            Texture::Checker { cell, a, b } => {
                let k = (s / cell).floor() as i64 + (t / cell).floor() as i64;
                if k.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Noise { seed, cell } => {
                let h = hash3(*seed, (s / cell).floor() as i64, (t / cell).floor() as i64);
                [0, 21, 42].map(|sh| ((h >> sh) & 0xff) as f32 / 255.0)
            }
            Texture::Image(img) => {
                let x = ((s / ws) * img.width as f64).floor().clamp(0.0, img.width as f64 - 1.0) as usize;
                let y = ((t / wt) * img.height as f64)
                    .floor()
                    .clamp(0.0, img.height as f64 - 1.0) as usize;
                img.pixel(y, x)
            }
        }
    }
}

/// Which side of a rectangle can be seen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Facing {
    Both,
    /// Visible from the half-space where the normal coordinate exceeds `coord`.
    Positive,
    Negative,
}

/// Rectangle in the plane `x[axis] = coord`, spanning `[min, max]` along the
/// other two axes (in increasing axis order).
#[derive(Clone, Debug, PartialEq)]
pub struct Rect {
    pub axis: usize,
    pub coord: f64,
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub texture: Texture,
    pub facing: Facing,
}

impl Rect {
    fn in_plane_axes(&self) -> (usize, usize) {
        match self.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    /// Ray parameter and texture color of the hit, if any.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, [f32; 3])> {
        let den = dir[self.axis];
        if den == 0.0 {
            return None;
        }
        let side = origin[self.axis] - self.coord;
        let seen = match self.facing {
            Facing::Both => true,
            Facing::Positive => side > 0.0,
            Facing::Negative => side < 0.0,
        };
        if !seen {
            return None;
        }
        let s = (self.coord - origin[self.axis]) / den;
        if !(s > 0.0) {
            return None;
        }
        let (a0, a1) = self.in_plane_axes();
        let p0 = origin[a0] + s * dir[a0];
        let p1 = origin[a1] + s * dir[a1];
        if p0 < self.min[0] || p0 > self.max[0] || p1 < self.min[1] || p1 > self.max[1] {
            return None;
        }
        let color = self.texture.sample(
            p0 - self.min[0],
            p1 - self.min[1],
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
        );
        Some((s, color))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub rects: Vec<Rect>,
    pub background: [f32; 3],
}

impl Scene {
    /// Fronto-parallel rectangle (normal along z) at depth `z`, visible from
    /// both sides.
    pub fn wall(z: f64, half: f64, texture: Texture) -> Rect {
        Rect {
            axis: 2,
            coord: z,
            min: [-half, -half],
            max: [half, half],
            texture,
            facing: Facing::Both,
        }
    }

    /// A back wall at z = 4 plus a few random rectangles in front of it.
    pub fn random(seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rects = vec![Scene::wall(
            4.0,
            6.0,
            Texture::Noise {
                seed: rng.random(),
                cell: 0.1,
            },
        )];
        let n = rng.random_range(2..6);
        for _ in 0..n {
            let axis = if rng.random_bool(0.6) {
                2
            } else {
                rng.random_range(0..2)
            };
            let coord = if axis == 2 {
                rng.random_range(1.5..3.8)
            } else {
                rng.random_range(-1.5..1.5)
            };
            let c0 = rng.random_range(-1.5..1.0);
            let c1 = if axis == 2 {
                rng.random_range(-1.5..1.0)
            } else {
                rng.random_range(1.5..3.0)
            };
            let size = [rng.random_range(0.3..1.2), rng.random_range(0.3..1.2)];
            let texture = if rng.random_bool(0.5) {
                Texture::Checker {
                    cell: rng.random_range(0.05..0.3),
                    a: [rng.random(), rng.random(), rng.random()],
                    b: [rng.random(), rng.random(), rng.random()],
                }
            } else {
                Texture::Noise {
                    seed: rng.random(),
                    cell: 0.05,
                }
            };
            rects.push(Rect {
                axis,
                coord,
                min: [c0, c1],
                max: [c0 + size[0], c1 + size[1]],
                texture,
                facing: Facing::Both,
            });
        }
        Scene {
            rects,
            background: [0.0; 3],
        }
    }
}

/// Renders `scene`; pixels whose ray hits nothing get NaN depth and the
/// background color. Hits closer than the near plane report depth `NEAR`.
pub fn render_toy_scene(
    scene: &Scene,
    name: impl Into<String>,
    width: usize,
    height: usize,
    intrinsics: Intrinsics,
    pose: Pose,
) -> Result<CameraView> {
    if width == 0 || height == 0 {
        return Err(Error::dim("render target must be non-empty"));
    }
    let origin = pose.translation;
    let mut image = ImageRgb::filled(height, width, scene.background);
    let mut depth = vec![f32::NAN; width * height];
    for y in 0..height {
        for x in 0..width {
            let dir = pose.rotation * intrinsics.ray(x as f64, y as f64);
            let mut best: Option<(f64, [f32; 3])> = None;
            for r in &scene.rects {
                if let Some(hit) = r.intersect(&origin, &dir) {
                    if best.is_none_or(|b| hit.0 < b.0) {
                        best = Some(hit);
                    }
                }
            }
            if let Some((s, color)) = best {
                // the ray has unit camera-z, so its parameter is the z-depth
                depth[y * width + x] = s.max(NEAR) as f32;
                image.set_pixel(y, x, color);
            }
        }
    }
    CameraView::new(name, image, RawMap::new(height, width, 1, depth)?, intrinsics, pose)
}

/// Camera at `eye` looking along +z (image y pointing along world +y).
pub fn forward_pose(eye: Vector3<f64>) -> Pose {
    Pose {
        rotation: nalgebra::Matrix3::identity(),
        translation: eye,
    }
}

/// Random camera in front of the back wall of [`Scene::random`], looking
/// roughly toward it.
pub fn random_pose(rng: &mut impl Rng) -> Result<Pose> {
    let eye = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    let target = Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), 4.0);
    look_at(eye, target, Vector3::new(0.0, -1.0, 0.0))
}
