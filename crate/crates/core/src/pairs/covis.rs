//! Visibility and co-visibility ratios by depth reprojection.

use crate::error::{Error, Result};
use crate::pairs::camera::{nearest_pixel, CameraView};

pub const DEFAULT_TAU: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covisibility {
    pub v_ab: f64,
    pub v_ba: f64,
    pub covis: f64,
}

struct Rigid {
    r: [[f64; 3]; 3],
    t: [f64; 3],
}

impl Rigid {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.t[2],
        ]
    }
}

/// Number of finite-depth pixels of `a` that are visible in `b`, and the
/// number of finite-depth pixels of `a`.
pub fn visible_count(a: &CameraView, b: &CameraView, tau: f64) -> (usize, usize) {
    let ka = a.intrinsics;
    let kb = b.intrinsics;
    let rays_x: Vec<f64> = (0..a.width()).map(|x| (x as f64 - ka.cx) / ka.fx).collect();
    let rays_y: Vec<f64> = (0..a.height()).map(|y| (y as f64 - ka.cy) / ka.fy).collect();
    let to_world = Rigid {
        r: std::array::from_fn(|i| std::array::from_fn(|j| a.pose.rotation[(i, j)])),
        t: std::array::from_fn(|i| a.pose.translation[i]),
    };
    let rb = b.pose.rotation;
    let tb = b.pose.translation;
    let (bw, bh) = (b.width(), b.height());
    let mut visible = 0;
    let mut finite = 0;
    for (y, &ry) in rays_y.iter().enumerate() {
        for (x, &rx) in rays_x.iter().enumerate() {
            let d = a.depth_at(y, x);
            if !d.is_finite() {
                continue;
            }
            finite += 1;
            let d = d as f64;
            let w = to_world.apply([d * rx, d * ry, d]);
            let q = [w[0] - tb[0], w[1] - tb[1], w[2] - tb[2]];
            // Rᵀ q
            let z = rb[(0, 2)] * q[0] + rb[(1, 2)] * q[1] + rb[(2, 2)] * q[2];
            if z <= 0.0 {
                continue;
            }
            let px = rb[(0, 0)] * q[0] + rb[(1, 0)] * q[1] + rb[(2, 0)] * q[2];
            let py = rb[(0, 1)] * q[0] + rb[(1, 1)] * q[1] + rb[(2, 1)] * q[2];
            let u = kb.fx * px / z + kb.cx;
            let v = kb.fy * py / z + kb.cy;
            let Some((iy, ix)) = nearest_pixel(u, v, bw, bh) else {
                continue;
            };
            let db = b.depth_at(iy, ix);
            if db.is_finite() && (z - db as f64).abs() <= tau * db as f64 {
                visible += 1;
            }
        }
    }
    (visible, finite)
}

/// Fraction of the geometry-bearing pixels of `a` visible in `b`.
pub fn visibility_ratio(a: &CameraView, b: &CameraView, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("depth tolerance must be positive, got {tau}")));
    }
    let (visible, finite) = visible_count(a, b, tau);
    if finite == 0 {
        return Err(Error::Empty(format!(
            "visibility ratio undefined: view `{}` has no finite depth pixels",
            a.name
        )));
    }
    Ok(visible as f64 / finite as f64)
}

pub fn covisibility_ratio(a: &CameraView, b: &CameraView, tau: f64) -> Result<Covisibility> {
    let v_ab = visibility_ratio(a, b, tau)?;
    let v_ba = visibility_ratio(b, a, tau)?;
    Ok(Covisibility {
        v_ab,
        v_ba,
        covis: v_ab.min(v_ba),
    })
}
