//! Pinhole cameras and posed RGB-D views.
//!
//! Camera frame: x right, y down, z forward. Pixel centers sit at integer
//! coordinates, so the image spans `[-0.5, W - 0.5) × [-0.5, H - 0.5)`.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::pose::Pose;
use crate::io::RawMap;
use crate::patches::ImageRgb;

const ROTATION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Principal point at the image center with the given horizontal field
    /// of view in degrees and square pixels.
    pub fn centered(width: usize, height: usize, hfov_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    /// Camera-frame ray with unit z through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Index of the pixel whose center is nearest to `(u, v)`, if inside.
pub fn nearest_pixel(u: f64, v: f64, width: usize, height: usize) -> Option<(usize, usize)> {
    let x = (u + 0.5).floor();
    let y = (v + 0.5).floor();
    if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
        Some((y as usize, x as usize))
    } else {
        None
    }
}

/// A posed view: image, metric z-depth (non-finite where nothing was hit),
/// intrinsics and the world-from-camera pose.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub name: String,
    pub image: ImageRgb,
    pub depth: RawMap,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= ROTATION_TOL) || !((r.determinant() - 1.0).abs() <= ROTATION_TOL) {
        return Err(Error::Input(format!(
            "pose rotation is not in SO(3) (|RᵀR - I| = {err:.3e}, det = {:.6})",
            r.determinant()
        )));
    }
    Ok(())
}

impl CameraView {
    pub fn new(
        name: impl Into<String>,
        image: ImageRgb,
        depth: RawMap,
        intrinsics: Intrinsics,
        pose: Pose,
    ) -> Result<Self> {
        if depth.channels != 1 || depth.height != image.height || depth.width != image.width {
            return Err(Error::dim(format!(
                "depth map {}x{}x{} does not match image {}x{}",
                depth.height, depth.width, depth.channels, image.height, image.width
            )));
        }
        check_rotation(&pose.rotation)?;
        if let Some(d) = depth.data.iter().find(|d| d.is_finite() && **d <= 0.0) {
            return Err(Error::Input(format!("depth values must be positive, found {d}")));
        }
        Ok(CameraView {
            name: name.into(),
            image,
            depth,
            intrinsics,
            pose,
        })
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }

    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn depth_at(&self, y: usize, x: usize) -> f32 {
        self.depth.data[y * self.depth.width + x]
    }

    pub fn num_finite(&self) -> usize {
        self.depth.data.iter().filter(|d| d.is_finite()).count()
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.pose.translation)
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation * p + self.pose.translation
    }

    pub fn to_camera(&self, w: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation.transpose() * (w - self.pose.translation)
    }
}

/// Camera pose looking from `eye` toward `target`, with image-up roughly
/// along `up`.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Pose> {
    let z = (target - eye)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Input("look_at: eye and target coincide".into()))?;
    let x = (-up)
        .cross(&z)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Input("look_at: up is parallel to the viewing direction".into()))?;
    let y = z.cross(&x);
    Ok(Pose {
        rotation: Matrix3::from_columns(&[x, y, z]),
        translation: eye,
    })
}

/// Euclidean distance between camera centers and the angle in degrees of
/// the relative rotation.
pub fn relative_motion(a: &Pose, b: &Pose) -> (f64, f64) {
    let dist = (a.translation - b.translation).norm();
    let rel = a.rotation.transpose() * b.rotation;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    (dist, c.acos().to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_projects_back() {
        let k = Intrinsics::centered(32, 24, 60.0);
        let (u, v) = k.project(&(k.ray(3.25, 17.5) * 4.0));
        assert!((u - 3.25).abs() < 1e-12 && (v - 17.5).abs() < 1e-12);
        let (u, v) = k.project(&Vector3::new(0.0, 0.0, 1.0));
        assert_eq!((u, v), (15.5, 11.5));
    }

    #[test]
    fn nearest_pixel_bounds() {
        assert_eq!(nearest_pixel(-0.5, 0.0, 4, 4), Some((0, 0)));
        assert_eq!(nearest_pixel(-0.51, 0.0, 4, 4), None);
        assert_eq!(nearest_pixel(3.49, 3.49, 4, 4), Some((3, 3)));
        assert_eq!(nearest_pixel(3.5, 0.0, 4, 4), None);
        assert_eq!(nearest_pixel(1.5, 0.2, 4, 4), Some((0, 2)));
    }

    #[test]
    fn look_at_axes() {
        let p = look_at(
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        assert!((p.rotation - Matrix3::identity()).abs().max() < 1e-12);
        check_rotation(&p.rotation).unwrap();
        let p = look_at(
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, -5.0),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        check_rotation(&p.rotation).unwrap();
        assert!((relative_motion(&Pose::identity(), &p).1 - 180.0).abs() < 1e-9);
    }

    #[test]
    fn view_validation() {
        let img = ImageRgb::filled(2, 2, [0.0; 3]);
        let k = Intrinsics::centered(2, 2, 90.0);
        let ok = RawMap::new(2, 2, 1, vec![1.0, f32::NAN, 2.0, 3.0]).unwrap();
        assert!(CameraView::new("a", img.clone(), ok.clone(), k, Pose::identity()).is_ok());
        let neg = RawMap::new(2, 2, 1, vec![1.0, -1.0, 2.0, 3.0]).unwrap();
        assert!(CameraView::new("a", img.clone(), neg, k, Pose::identity()).is_err());
        let mut bad = Pose::identity();
        bad.rotation[(0, 0)] = -1.0;
        assert!(CameraView::new("a", img, ok, k, bad).is_err());
    }
}
