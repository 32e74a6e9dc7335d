//! Central finite-difference gradient checks (float64).
//!
//! The error for each checked tensor is the norm-wise relative error
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)`; the report
//! carries the worst tensor. The floor keeps structurally zero gradients (key
//! biases under softmax shift invariance, say) from turning finite-difference
//! roundoff into a relative error of 1.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries: Option<usize>,
    /// Gradient norm below which errors are measured in absolute terms.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_entries: None,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Name (or input index) of the tensor with the largest relative error.
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, name: String, analytic: &[f64], numeric: &[f64], floor: f64) {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for (&a, &n) in analytic.iter().zip(numeric) {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            self.max_abs_err = self.max_abs_err.max((a - n).abs());
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor);
        self.checked += analytic.len();
        if rel >= self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = name;
        }
    }
}

fn entries(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let stride = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

fn scalar_of(g: &Graph<'_, f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Checks `d f / d inputs`, where `f` builds a scalar from input leaves.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: &GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = vals.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(scalar_of(&g, out))
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic_full = grads.get(*var).unwrap_or(&zero);
        let idx = entries(inputs[k].len(), cfg.max_entries);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + cfg.step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - cfg.step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * cfg.step));
            analytic.push(analytic_full.data()[i]);
        }
        report.record(format!("input{k}"), &analytic, &numeric, cfg.floor);
    }
    Ok(report)
}

/// Checks `d f / d params` for every tensor of a parameter set.
pub fn check_param_gradients<F>(params: &mut ParamSet<f64>, cfg: &GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic_all: Vec<Tensor<f64>> = {
        let mut g = Graph::with_params(params);
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        params
            .iter()
            .map(|(id, p)| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
            })
            .collect()
    };

    let eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::with_params(params);
        let out = f(&mut g)?;
        Ok(scalar_of(&g, out))
    };

    let mut report = GradReport::default();
    let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (k, (id, name)) in ids.into_iter().enumerate() {
        let idx = entries(params.value(id).len(), cfg.max_entries);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = params.value(id).data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + cfg.step;
            let plus = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig - cfg.step;
            let minus = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * cfg.step));
            analytic.push(analytic_all[k].data()[i]);
        }
        report.record(name, &analytic, &numeric, cfg.floor);
    }
    Ok(report)
}
