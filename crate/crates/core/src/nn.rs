//! Differentiable building blocks: linear projection, layer norm, MLP.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamSet`] and are bound
//! into a [`Graph`] on use, so a layer can be evaluated from several threads
//! against the same frozen parameters.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// `y = x·W + b` with `W: [din, dout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, din: usize, dout: usize) -> Result<Self> {
        let weight = ps.add(format!("{name}.weight"), init.trunc_normal(vec![din, dout]), true)?;
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(vec![dout]), false)?;
        Ok(Linear {
            weight,
            bias,
            din,
            dout,
        })
    }

    pub fn num_params(din: usize, dout: usize) -> usize {
        din * dout + dout
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        linear_forward(g, x, w, b)
    }
}

/// Functional linear layer over the trailing dimension of `x`.
pub fn linear_forward<T: Real>(g: &mut Graph<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let din = g.value(w).shape().first().copied().unwrap_or(0);
    if g.value(x).last_dim() != din {
        return Err(Error::dim(format!(
            "linear expects trailing dim {din}, got {:?}",
            g.shape(x)
        )));
    }
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = ps.add(format!("{name}.weight"), Tensor::ones(vec![dim]), false)?;
        let beta = ps.add(format!("{name}.bias"), Tensor::zeros(vec![dim]), false)?;
        Ok(LayerNorm {
            gamma,
            beta,
            eps: LN_EPS,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        layer_norm(g, x, gamma, beta, self.eps)
    }
}

pub fn layer_norm<T: Real>(g: &mut Graph<'_, T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    if eps <= 0.0 {
        return Err(Error::config("layer norm eps must be positive"));
    }
    g.layer_norm(x, gamma, beta, eps)
}

/// Two linear layers with GELU between; hidden width is `4·dim`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub const EXPANSION: usize = 4;

    pub fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        let hidden = Self::EXPANSION * dim;
        Ok(Mlp {
            fc1: Linear::new(ps, init, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(ps, init, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.dout
    }

    pub fn num_params(dim: usize) -> usize {
        let hidden = Self::EXPANSION * dim;
        Linear::num_params(dim, hidden) + Linear::num_params(hidden, dim)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}
