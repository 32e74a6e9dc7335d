//! Absolute pose regression loss with learned position/orientation weights
//! and log-quaternion orientation error.

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-4;
const SERIES_BELOW: f64 = 1e-8;

/// Learned balance weights `β` (position) and `γ` (orientation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AprWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for AprWeights {
    fn default() -> Self {
        AprWeights { beta: 0.0, gamma: -3.0 }
    }
}

/// Quaternion as `[w, x, y, z]`.
pub type Quat = [f64; 4];

fn check_unit(q: &Quat) -> Result<()> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((n - 1.0).abs() <= UNIT_TOL) {
        return Err(Error::Input(format!(
            "quaternion norm {n} is not 1 (tolerance {UNIT_TOL})"
        )));
    }
    Ok(())
}

/// Sign-flips `q` so its scalar part is non-negative.
pub fn hemisphere(q: &Quat) -> Quat {
    if q[0] < 0.0 {
        q.map(|v| -v)
    } else {
        *q
    }
}

/// `f(n, w) = 2·atan2(n, w)/n` and its partials in `n` and `w`; the log map
/// is `f·(x, y, z)` with `n = ‖(x, y, z)‖`.
fn log_factor(n: f64, w: f64) -> (f64, f64, f64) {
    let r2 = n * n + w * w;
    if n < SERIES_BELOW {
        // 2/w · (1 - n²/(3w²)) with w ≈ 1 near the identity
        let f = 2.0 / w - 2.0 * n * n / (3.0 * w * w * w);
        let df_dn = -4.0 * n / (3.0 * w * w * w);
        let df_dw = -2.0 / (w * w);
        return (f, df_dn, df_dw);
    }
    let a = n.atan2(w);
    let f = 2.0 * a / n;
    let df_dn = 2.0 * w / (r2 * n) - 2.0 * a / (n * n);
    let df_dw = -2.0 / r2;
    (f, df_dn, df_dw)
}

/// Rotation vector `θ·axis` of a unit quaternion, after hemisphere
/// normalization.
pub fn quat_log(q: &Quat) -> Result<[f64; 3]> {
    check_unit(q)?;
    let q = hemisphere(q);
    let n = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (f, _, _) = log_factor(n, q[0]);
    Ok([f * q[1], f * q[2], f * q[3]])
}

/// Jacobian `∂ log(q) / ∂q` (3×4, columns `w, x, y, z`) of the raw
/// quaternion, including the hemisphere flip.
fn quat_log_jacobian(q: &Quat) -> [[f64; 4]; 3] {
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    let h = hemisphere(q);
    let v = [h[1], h[2], h[3]];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let (f, df_dn, df_dw) = log_factor(n, h[0]);
    let mut j = [[0.0; 4]; 3];
    for i in 0..3 {
        j[i][0] = sign * v[i] * df_dw;
        for k in 0..3 {
            let dn_dvk = if n > 0.0 { v[k] / n } else { 0.0 };
            let eye = if i == k { f } else { 0.0 };
            j[i][k + 1] = sign * (eye + v[i] * df_dn * dn_dvk);
        }
    }
    j
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AprLoss {
    pub value: f64,
    pub d_position: [f64; 3],
    pub d_quat: Quat,
    pub d_beta: f64,
    pub d_gamma: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `e^{-β}‖p - p̂‖₁ + e^{-γ}‖log q - log q̂‖₁ + β + γ` with gradients for the
/// predicted position and quaternion and for `β`, `γ`.
pub fn apr_loss(p: &[f64; 3], q: &Quat, p_gt: &[f64; 3], q_gt: &Quat, w: &AprWeights) -> Result<AprLoss> {
    if !(w.beta.is_finite() && w.gamma.is_finite()) {
        return Err(Error::Numerical(format!("APR weights not finite: {w:?}")));
    }
    let lq = quat_log(q)?;
    let lg = quat_log(q_gt)?;
    let dp: [f64; 3] = std::array::from_fn(|i| p[i] - p_gt[i]);
    let dq: [f64; 3] = std::array::from_fn(|i| lq[i] - lg[i]);
    let l1p: f64 = dp.iter().map(|v| v.abs()).sum();
    let l1q: f64 = dq.iter().map(|v| v.abs()).sum();
    let (eb, eg) = ((-w.beta).exp(), (-w.gamma).exp());
    let jac = quat_log_jacobian(q);
    let d_quat = std::array::from_fn(|k| (0..3).map(|i| eg * sign(dq[i]) * jac[i][k]).sum());
    Ok(AprLoss {
        value: eb * l1p + eg * l1q + w.beta + w.gamma,
        d_position: dp.map(|v| eb * sign(v)),
        d_quat,
        d_beta: 1.0 - eb * l1p,
        d_gamma: 1.0 - eg * l1q,
    })
}
