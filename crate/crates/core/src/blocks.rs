//! Attention and the transformer blocks: pre-norm encoder block, CrossBlock
//! (self- then cross-attention) and the CatBlock decoder (self-attention over
//! the concatenated views).

use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

/// Multi-head attention with separate query/key/value projections and an
/// output projection, all with biases.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{name}: width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            wq: Linear::new(ps, init, &format!("{name}.wq"), dim, dim)?,
            wk: Linear::new(ps, init, &format!("{name}.wk"), dim, dim)?,
            wv: Linear::new(ps, init, &format!("{name}.wv"), dim, dim)?,
            proj: Linear::new(ps, init, &format!("{name}.proj"), dim, dim)?,
            heads,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim)
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, xq: Var, xkv: Var) -> Result<Var> {
        let q = self.wq.forward(g, xq)?;
        let k = self.wk.forward(g, xkv)?;
        let v = self.wv.forward(g, xkv)?;
        scaled_attention(g, q, k, v, self.heads, &self.proj)
    }
}

/// `Proj(concat_h softmax(Q_h K_hᵀ / √(D/h)) V_h)` on already projected
/// queries, keys and values.
pub fn scaled_attention<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    proj: &Linear,
) -> Result<Var> {
    let o = g.attention(q, k, v, heads)?;
    proj.forward(g, o)
}

/// Per-head attention weights `[Nq, Nk]` (for inspection; not differentiable).
pub fn attention_probs<T: Real>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Vec<Tensor<T>>> {
    let (nq, d) = q.dims2();
    let (nk, dk) = k.dims2();
    if d != dk || heads == 0 || d % heads != 0 {
        return Err(Error::dim(format!(
            "attention_probs over {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if nk == 0 {
        return Err(Error::Empty("attention over an empty context".into()));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            let mut p = Tensor::from_fn(vec![nq, nk], |idx| {
                let (i, j) = (idx / nk, idx % nk);
                let dot: f64 = (0..dh)
                    .map(|c| q.row(i)[h * dh + c].as_f64() * k.row(j)[h * dh + c].as_f64())
                    .sum();
                T::lit(dot * scale)
            });
            for i in 0..nq {
                softmax_in_place(p.row_mut(i));
            }
            Ok(p)
        })
        .collect()
}

/// `X' = X + Attn(LN(X))`, `out = X' + MLP(LN(X'))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(EncoderBlock {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(ps, init, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(ps, init, &format!("{name}.mlp"), dim)?,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        2 * LayerNorm::num_params(dim) + Attention::num_params(dim) + Mlp::num_params(dim)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Self-attention on `X`, cross-attention from `LN(X')` to `Ȳ = LN(Y)`,
/// then the MLP. `Y` is read but never updated.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub norm_y: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(CrossBlock {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            self_attn: Attention::new(ps, init, &format!("{name}.self_attn"), dim, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            norm_y: LayerNorm::new(ps, &format!("{name}.norm_y"), dim)?,
            cross_attn: Attention::new(ps, init, &format!("{name}.cross_attn"), dim, heads)?,
            norm3: LayerNorm::new(ps, &format!("{name}.norm3"), dim)?,
            mlp: Mlp::new(ps, init, &format!("{name}.mlp"), dim)?,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        4 * LayerNorm::num_params(dim) + 2 * Attention::num_params(dim) + Mlp::num_params(dim)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, y: Var) -> Result<Var> {
        if g.value(y).dims2().0 == 0 {
            return Err(Error::Empty("cross-attention over an empty reference stream".into()));
        }
        let h = self.norm1.forward(g, x)?;
        let a = self.self_attn.forward(g, h, h)?;
        let x = g.add(x, a)?;
        let yn = self.norm_y.forward(g, y)?;
        let h = self.norm2.forward(g, x)?;
        let c = self.cross_attn.forward(g, h, yn)?;
        let x = g.add(x, c)?;
        let h = self.norm3.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// `Z = [X + v1, Y + v2]` through standard blocks; returns the first `Nx` rows.
#[derive(Clone, Debug)]
pub struct CatDecoder {
    pub v1: ParamId,
    pub v2: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl CatDecoder {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
    ) -> Result<Self> {
        let v1 = ps.add(format!("{name}.v1"), init.trunc_normal(vec![dim]), false)?;
        let v2 = ps.add(format!("{name}.v2"), init.trunc_normal(vec![dim]), false)?;
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(ps, init, &format!("{name}.block{i}"), dim, heads))
            .collect::<Result<_>>()?;
        Ok(CatDecoder { v1, v2, blocks })
    }

    pub fn num_params(dim: usize, depth: usize) -> usize {
        2 * dim + depth * EncoderBlock::num_params(dim)
    }

    /// Full `[Nx + Ny, D]` output of the last block.
    pub fn forward_all<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, y: Var) -> Result<Var> {
        let v1 = g.param(self.v1);
        let v2 = g.param(self.v2);
        let x = g.add_row(x, v1)?;
        let y = g.add_row(y, v2)?;
        let mut z = g.concat_rows(&[x, y])?;
        for b in &self.blocks {
            z = b.forward(g, z)?;
        }
        Ok(z)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, y: Var) -> Result<Var> {
        let nx = g.value(x).dims2().0;
        let z = self.forward_all(g, x, y)?;
        let idx: Vec<usize> = (0..nx).collect();
        g.gather_rows(z, &idx)
    }
}
