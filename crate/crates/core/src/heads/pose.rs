//! Relative pose: differentiable special Procrustes, the pose head and its loss.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{Init, ParamSet};
use crate::tensor::{Real, Tensor};

const SINGULAR_RTOL: f64 = 1e-12;

/// Rotation plus translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// `self ∘ other`, i.e. applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// SVD factors kept for the backward pass: `R = U·diag(1,1,d)·Vᵀ` and the
/// signed singular values `s = (σ1, σ2, d·σ3)`.
#[derive(Clone, Debug)]
pub struct ProcrustesFactors {
    pub rotation: Matrix3<f64>,
    pub v: Matrix3<f64>,
    pub s: [f64; 3],
}

pub fn special_procrustes(m: &Matrix3<f64>) -> Result<ProcrustesFactors> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("procrustes input is not finite".into()));
    }
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Singular("SVD did not converge".into())),
    };
    let mut order = [0usize, 1, 2];
    let sv = svd.singular_values;
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let v = Matrix3::from_columns(&[
        vt.row(order[0]).transpose(),
        vt.row(order[1]).transpose(),
        vt.row(order[2]).transpose(),
    ]);
    let sigma = [sv[order[0]], sv[order[1]], sv[order[2]]];

    if sigma[0] <= 0.0 || sigma[2] <= SINGULAR_RTOL * sigma[0] {
        return Err(Error::Singular(format!(
            "rank-deficient input, singular values {sigma:?}"
        )));
    }
    let d = (u * v.transpose()).determinant().signum();
    if d < 0.0 && sigma[1] - sigma[2] <= SINGULAR_RTOL * sigma[0] {
        return Err(Error::Singular(
            "reflection with repeated smallest singular values".into(),
        ));
    }
    let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v.transpose();
    Ok(ProcrustesFactors {
        rotation,
        v,
        s: [sigma[0], sigma[1], d * sigma[2]],
    })
}

/// Nearest rotation to `m` in Frobenius norm.
pub fn procrustes_orthonormalize(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    special_procrustes(m).map(|f| f.rotation)
}

/// Vector-Jacobian product of the Procrustes map: `g = dL/dR` → `dL/dM`.
pub fn procrustes_vjp(rotation: &Matrix3<f64>, v: &Matrix3<f64>, s: &[f64; 3], g: &Matrix3<f64>) -> Matrix3<f64> {
    let b = v.transpose() * (rotation.transpose() * g) * v;
    let mut c = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                c[(i, j)] = b[(i, j)] / (s[i] + s[j]);
            }
        }
    }
    let c = v * c * v.transpose();
    rotation * (c - c.transpose())
}

/// `‖R − R̂‖_F² + λ‖t − t̂‖²`.
pub fn relative_pose_loss(pred: &Pose, gt: &Pose, lambda: f64) -> f64 {
    (pred.rotation - gt.rotation).norm_squared() + lambda * (pred.translation - gt.translation).norm_squared()
}

/// Graph form of [`relative_pose_loss`] for training the head.
pub fn relative_pose_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    rotation: Var,
    translation: Var,
    gt: &Pose,
    lambda: f64,
) -> Result<Var> {
    let r_gt = g.constant(Tensor::from_fn(vec![3, 3], |i| T::lit(gt.rotation[(i / 3, i % 3)])))?;
    let t_gt = g.constant(Tensor::from_fn(vec![1, 3], |i| T::lit(gt.translation[i])))?;
    let dr = g.sub(rotation, r_gt)?;
    let dr = g.square(dr)?;
    let dr = g.sum_all(dr)?;
    let dt = g.sub(translation, t_gt)?;
    let dt = g.square(dt)?;
    let dt = g.sum_all(dt)?;
    let dt = g.scale(dt, lambda)?;
    g.add(dr, dt)
}

/// Token projection to 64 dims, flatten, one hidden ReLU layer of width 1024,
/// then 12 outputs read as a row-major 3×3 matrix and a translation.
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub tokens: usize,
}

impl PoseHead {
    pub const TOKEN_DIM: usize = 64;
    pub const HIDDEN: usize = 1024;

    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dec_dim: usize,
        tokens: usize,
    ) -> Result<Self> {
        Self::with_widths(ps, init, name, dec_dim, tokens, Self::TOKEN_DIM, Self::HIDDEN)
    }

    /// Same architecture with custom widths (small configs in tests).
    pub fn with_widths<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dec_dim: usize,
        tokens: usize,
        token_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(PoseHead {
            proj: Linear::new(ps, init, &format!("{name}.proj"), dec_dim, token_dim)?,
            fc1: Linear::new(ps, init, &format!("{name}.fc1"), tokens * token_dim, hidden)?,
            fc2: Linear::new(ps, init, &format!("{name}.fc2"), hidden, 12)?,
            tokens,
        })
    }

    /// Raw 12-vector before orthonormalization, shape `[1, 12]`.
    pub fn raw<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let (n, _) = g.value(features).dims2();
        if n != self.tokens {
            return Err(Error::dim(format!(
                "pose head built for {} tokens, got {n}",
                self.tokens
            )));
        }
        let z = self.proj.forward(g, features)?;
        let z = g.reshape(z, vec![1, n * self.proj.dout])?;
        let h = self.fc1.forward(g, z)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, h)
    }

    /// Returns `(R [3,3], t [1,3])`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<(Var, Var)> {
        let out = self.raw(g, features)?;
        let m = g.slice_cols(out, 0, 9)?;
        let m = g.reshape(m, vec![3, 3])?;
        let r = g.procrustes(m)?;
        let t = g.slice_cols(out, 9, 3)?;
        Ok((r, t))
    }

    pub fn predict<T: Real>(&self, params: &ParamSet<T>, features: &Tensor<T>) -> Result<Pose> {
        let mut g = Graph::with_params(params);
        let x = g.constant(features.clone())?;
        let (r, t) = self.forward(&mut g, x)?;
        let (r, t) = (g.value(r).data(), g.value(t).data());
        Ok(Pose {
            rotation: Matrix3::from_fn(|i, j| r[i * 3 + j].as_f64()),
            translation: Vector3::new(t[0].as_f64(), t[1].as_f64(), t[2].as_f64()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-3.1..3.1);
        Rotation3::from_scaled_axis(axis.normalize() * angle).into_inner()
    }

    #[test]
    fn identity_maps_to_identity() {
        let r = procrustes_orthonormalize(&Matrix3::identity()).unwrap();
        assert!((r - Matrix3::identity()).norm() < 1e-14);
    }

    #[test]
    fn scaled_rotation_recovers_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let r0 = random_rotation(&mut rng);
            let r = procrustes_orthonormalize(&(r0 * 5.0)).unwrap();
            assert!((r - r0).norm() < 1e-8);
        }
    }

    #[test]
    fn reflection_is_corrected() {
        let m = Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, -1.0));
        let r = procrustes_orthonormalize(&m).unwrap();
        assert!((r - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn rank_deficient_is_singular() {
        let m = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0);
        assert!(matches!(special_procrustes(&m), Err(Error::Singular(_))));
        let m = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, -1.0));
        assert!(matches!(special_procrustes(&m), Err(Error::Singular(_))));
    }

    #[test]
    fn pose_loss_closed_forms() {
        let gt = Pose::identity();
        assert_eq!(relative_pose_loss(&gt, &gt, 100.0), 0.0);
        let shifted = Pose {
            translation: Vector3::new(0.1, 0.0, 0.0),
            ..gt
        };
        assert!((relative_pose_loss(&shifted, &gt, 100.0) - 1.0).abs() < 1e-12);
        let flipped = Pose {
            rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI).into_inner(),
            ..gt
        };
        assert!((relative_pose_loss(&flipped, &gt, 100.0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn procrustes_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let m = Tensor::from_fn(vec![3, 3], |_| rng.random_range(-1.0..1.0));
            let w = Tensor::from_fn(vec![3, 3], |_| rng.random_range(-1.0..1.0));
            let report = check_gradients(&[m, w], &GradCheck::default(), |g, v| {
                let r = g.procrustes(v[0])?;
                let p = g.mul(r, v[1])?;
                g.sum_all(p)
            })
            .unwrap();
            assert!(report.max_rel_err <= 1e-6, "trial {trial}: {report:?}");
        }
    }

    #[test]
    fn pose_head_shapes_and_gradients() {
        let mut ps = ParamSet::<f64>::new();
        let mut init = Init::new(3);
        init.std = 0.3;
        let head = PoseHead::with_widths(&mut ps, &mut init, "pose", 6, 4, 5, 16).unwrap();
        let feats: Tensor<f64> = Init::new(8).uniform(vec![4, 6], -1.0, 1.0);
        let pose = head.predict(&ps, &feats).unwrap();
        let rtr = pose.rotation.transpose() * pose.rotation;
        assert!((rtr - Matrix3::identity()).norm() < 1e-10);
        assert!((pose.rotation.determinant() - 1.0).abs() < 1e-10);

        let gt = Pose {
            rotation: random_rotation(&mut ChaCha8Rng::seed_from_u64(2)),
            translation: Vector3::new(0.1, -0.2, 0.3),
        };
        let report = crate::gradcheck::check_param_gradients(&mut ps, &GradCheck::default(), |g| {
            let x = g.constant(feats.clone())?;
            let (r, t) = head.forward(g, x)?;
            relative_pose_loss_graph(g, r, t, &gt, 100.0)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = Pose {
            rotation: random_rotation(&mut rng),
            translation: Vector3::new(0.3, 0.1, -0.4),
        };
        let gt = Pose {
            rotation: random_rotation(&mut rng),
            translation: Vector3::new(0.0, 0.2, -0.1),
        };
        let mut g = Graph::<f64>::new();
        let r = g
            .input(Tensor::from_fn(vec![3, 3], |i| pred.rotation[(i / 3, i % 3)]))
            .unwrap();
        let t = g.input(Tensor::from_fn(vec![1, 3], |i| pred.translation[i])).unwrap();
        let l = relative_pose_loss_graph(&mut g, r, t, &gt, 100.0).unwrap();
        assert!((g.value(l).data()[0] - relative_pose_loss(&pred, &gt, 100.0)).abs() < 1e-12);
    }
}
