//! Single-image pairs: a random homography warp plus color jitter.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patches::ImageRgb;

pub const DEFAULT_STRENGTH: f64 = 0.15;
pub const DEFAULT_JITTER: f32 = 0.2;
const MAX_RESAMPLES: usize = 100;

/// Hartley normalization: centroid to the origin, mean distance √2.
fn normalizer(pts: &[[f64; 2]; 4]) -> Matrix3<f64> {
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let mean = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / 4.0;
    let s = if mean > 0.0 {
        std::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Direct linear transform from four correspondences: `dst ~ H·src`,
/// scaled so that `H[(2, 2)] = 1`.
pub fn dlt(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<Matrix3<f64>> {
    let ts = normalizer(src);
    let td = normalizer(dst);
    let norm = |t: &Matrix3<f64>, p: &[f64; 2]| {
        let v = t * Vector3::new(p[0], p[1], 1.0);
        (v.x, v.y)
    };
    // padded to 9×9 so the SVD yields the full right null space
    let mut a = DMatrix::<f64>::zeros(9, 9);
    for k in 0..4 {
        let (x, y) = norm(&ts, &src[k]);
        let (u, v) = norm(&td, &dst[k]);
        let r1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * k, j)] = r1[j];
            a[(2 * k + 1, j)] = r2[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Numerical("DLT: SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let (smallest, second) = (order[0], order[1]);
    if svd.singular_values[second] <= 1e-10 * svd.singular_values[order[8]] {
        return Err(Error::Singular("DLT: correspondences are degenerate".into()));
    }
    let h = vt.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::Singular("DLT: degenerate target points".into()))?;
    let hm = td_inv * hn * ts;
    if hm[(2, 2)].abs() < 1e-12 * hm.abs().max() {
        return Err(Error::Singular("DLT: homography maps the origin to infinity".into()));
    }
    Ok(hm / hm[(2, 2)])
}

pub fn apply_homography(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let v = h * Vector3::new(x, y, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Bilinear sample at `(x, y)` with edge clamping.
pub fn sample_bilinear(img: &ImageRgb, x: f64, y: f64) -> [f32; 3] {
    let xm = (img.width - 1) as f64;
    let ym = (img.height - 1) as f64;
    let x = if x.is_finite() { x.clamp(0.0, xm) } else { 0.0 };
    let y = if y.is_finite() { y.clamp(0.0, ym) } else { 0.0 };
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let (a, b, c, d) = (
        img.pixel(y0, x0),
        img.pixel(y0, x1),
        img.pixel(y1, x0),
        img.pixel(y1, x1),
    );
    std::array::from_fn(|k| {
        let top = a[k] + (b[k] - a[k]) * fx;
        let bot = c[k] + (d[k] - c[k]) * fx;
        top + (bot - top) * fy
    })
}

/// `out(p) = img(H⁻¹·p)`: the image moved by `h`.
pub fn warp(img: &ImageRgb, h: &Matrix3<f64>) -> Result<ImageRgb> {
    let inv = h
        .try_inverse()
        .ok_or_else(|| Error::Singular("homography is not invertible".into()))?;
    Ok(ImageRgb::from_fn(img.height, img.width, |y, x| {
        let (sx, sy) = apply_homography(&inv, x as f64, y as f64);
        sample_bilinear(img, sx, sy)
    }))
}

/// Multiplicative brightness, contrast and saturation factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl ColorJitter {
    pub fn identity() -> Self {
        ColorJitter {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }

    /// Each factor uniform in `[1 - amount, 1 + amount]`.
    pub fn random(rng: &mut impl Rng, amount: f32) -> Self {
        let mut f = || {
            if amount > 0.0 {
                rng.random_range(1.0 - amount..=1.0 + amount)
            } else {
                1.0
            }
        };
        ColorJitter {
            brightness: f(),
            contrast: f(),
            saturation: f(),
        }
    }

    pub fn apply(&self, img: &ImageRgb) -> ImageRgb {
        if *self == Self::identity() {
            return img.clone();
        }
        let gray = |p: &[f32]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        let npix = (img.height * img.width).max(1) as f32;
        let mean = img.data.chunks(3).map(gray).sum::<f32>() * self.brightness / npix;
        let mut out = img.clone();
        for p in out.data.chunks_mut(3) {
            for v in p.iter_mut() {
                *v = ((*v * self.brightness) - mean) * self.contrast + mean;
            }
            let g = gray(p);
            for v in p.iter_mut() {
                *v = (g + (*v - g) * self.saturation).clamp(0.0, 1.0);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomographyParams {
    /// Corner displacement bound as a fraction of the image size.
    pub strength: f64,
    pub jitter: f32,
}

impl Default for HomographyParams {
    fn default() -> Self {
        HomographyParams {
            strength: DEFAULT_STRENGTH,
            jitter: DEFAULT_JITTER,
        }
    }
}

fn convex(q: &[[f64; 2]; 4]) -> bool {
    let mut sign = 0.0f64;
    for k in 0..4 {
        let (a, b, c) = (q[k], q[(k + 1) % 4], q[(k + 2) % 4]);
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross == 0.0 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
    }
    true
}

/// Random homography moving each image corner by at most
/// `strength × size`; degenerate draws are resampled.
pub fn random_homography(width: usize, height: usize, strength: f64, rng: &mut impl Rng) -> Result<Matrix3<f64>> {
    if !(0.0..0.5).contains(&strength) {
        return Err(Error::config(format!(
            "homography strength must be in [0, 0.5), got {strength}"
        )));
    }
    if strength == 0.0 {
        return Ok(Matrix3::identity());
    }
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let corners = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    for _ in 0..MAX_RESAMPLES {
        let moved = corners.map(|[x, y]| {
            [
                x + rng.random_range(-strength..=strength) * width as f64,
                y + rng.random_range(-strength..=strength) * height as f64,
            ]
        });
        if !convex(&moved) {
            continue;
        }
        match dlt(&corners, &moved) {
            Ok(hm) if hm.determinant().abs() > 1e-8 && hm.iter().all(|v| v.is_finite()) => return Ok(hm),
            _ => continue,
        }
    }
    Err(Error::Numerical("could not draw a non-degenerate homography".into()))
}

/// `(img, warped and jittered img)` plus the homography used.
pub fn homography_pair_with(
    img: &ImageRgb,
    params: &HomographyParams,
    seed: u64,
) -> Result<(ImageRgb, ImageRgb, Matrix3<f64>)> {
    if img.width < 2 || img.height < 2 {
        return Err(Error::dim("homography pair needs an image of at least 2x2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hm = random_homography(img.width, img.height, params.strength, &mut rng)?;
    let warped = if hm == Matrix3::identity() {
        img.clone()
    } else {
        warp(img, &hm)?
    };
    let jitter = ColorJitter::random(&mut rng, params.jitter);
    Ok((img.clone(), jitter.apply(&warped), hm))
}

pub fn homography_pair(img: &ImageRgb, strength: f64, seed: u64) -> Result<(ImageRgb, ImageRgb)> {
    let params = HomographyParams {
        strength,
        ..Default::default()
    };
    homography_pair_with(img, &params, seed).map(|(a, b, _)| (a, b))
}
