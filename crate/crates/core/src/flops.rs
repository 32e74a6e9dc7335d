//! Closed-form parameter and FLOP counts.
//!
//! Multiply and add are counted separately, so a `[n, a]·[a, b]` product
//! costs `2nab`. Per transformer block the six dominant terms are
//! `3ND² (qkv) + DN² (scores) + DN² (weighted sum) + ND² (out) + 4ND² + 4ND²
//! (MLP)`; norms, softmax, biases and residual adds are ignored.

use serde::Serialize;

use crate::blocks::{Attention, CatDecoder, CrossBlock, EncoderBlock};
use crate::model::{DecoderVariant, ModelConfig};
use crate::nn::{LayerNorm, Linear};
use crate::patches::masked_count;

/// One standard block over `n` tokens of width `d`.
pub fn block_flops(n: u64, d: u64) -> u64 {
    2 * (3 * n * d * d + d * n * n + d * n * n + n * d * d + 4 * n * d * d + 4 * n * d * d)
}

pub fn encoder_flops(depth: u64, n: u64, d: u64) -> u64 {
    depth * block_flops(n, d)
}

/// CrossBlock: the standard block on `nx` tokens plus cross-attention from
/// `nx` queries to `ny` keys/values.
pub fn cross_block_flops(nx: u64, ny: u64, d: u64) -> u64 {
    let cross = nx * d * d + 2 * ny * d * d + d * nx * ny + d * nx * ny + nx * d * d;
    block_flops(nx, d) + 2 * cross
}

/// CatBlock layer: a standard block over the `nx + ny` concatenated tokens.
pub fn cat_block_flops(nx: u64, ny: u64, d: u64) -> u64 {
    block_flops(nx + ny, d)
}

fn linear_flops(n: u64, din: u64, dout: u64) -> u64 {
    2 * n * din * dout
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub patch_embed: usize,
    pub encoder: usize,
    pub enc_to_dec: usize,
    pub mask_token: usize,
    pub decoder: usize,
    pub head: usize,
    pub total: usize,
}

pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let (d, dd, tl) = (cfg.enc_dim, cfg.dec_dim, cfg.token_len());
    let patch_embed = Linear::num_params(tl, d);
    let encoder = cfg.enc_depth * EncoderBlock::num_params(d) + LayerNorm::num_params(d);
    let enc_to_dec = Linear::num_params(d, dd);
    let mask_token = dd;
    let blocks = match cfg.decoder {
        DecoderVariant::CrossBlock => cfg.dec_depth * CrossBlock::num_params(dd),
        DecoderVariant::CatBlock => CatDecoder::num_params(dd, cfg.dec_depth),
    };
    let decoder = blocks + LayerNorm::num_params(dd);
    let head = Linear::num_params(dd, tl);
    debug_assert_eq!(Attention::num_params(d), 4 * (d * d + d));
    ParamCount {
        patch_embed,
        encoder,
        enc_to_dec,
        mask_token,
        decoder,
        head,
        total: patch_embed + encoder + enc_to_dec + mask_token + decoder + head,
    }
}

/// FLOPs of one pre-training forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopCount {
    /// Encoder on one full view (`N` tokens).
    pub encoder_full: u64,
    /// Encoder on the visible tokens of the masked view.
    pub encoder_masked: u64,
    pub decoder: u64,
    /// Patch embedding, encoder-to-decoder projection and pixel head.
    pub linear: u64,
    /// Full-view encoder, decoder and linear layers: the cost of one
    /// two-view inference with a single encoder pass counted.
    pub single_encoder_total: u64,
    /// Both encoder passes, decoder and linear layers.
    pub total: u64,
}

pub fn count_flops(cfg: &ModelConfig) -> FlopCount {
    let n = cfg.num_patches() as u64;
    let nv = n - masked_count(cfg.num_patches(), cfg.mask_ratio) as u64;
    let (d, dd, tl) = (cfg.enc_dim as u64, cfg.dec_dim as u64, cfg.token_len() as u64);
    let l = cfg.enc_depth as u64;
    let encoder_full = encoder_flops(l, n, d);
    let encoder_masked = encoder_flops(l, nv, d);
    let layer = match cfg.decoder {
        DecoderVariant::CrossBlock => cross_block_flops(n, n, dd),
        DecoderVariant::CatBlock => cat_block_flops(n, n, dd),
    };
    let decoder = cfg.dec_depth as u64 * layer;
    let linear = linear_flops(n + nv, tl, d) + linear_flops(n + nv, d, dd) + linear_flops(n, dd, tl);
    FlopCount {
        encoder_full,
        encoder_masked,
        decoder,
        linear,
        single_encoder_total: encoder_full + decoder + linear,
        total: encoder_full + encoder_masked + decoder + linear,
    }
}

/// `(exact parameter count, approximate pre-training forward FLOPs)`.
pub fn count_params_flops(cfg: &ModelConfig) -> (usize, u64) {
    (count_params(cfg).total, count_flops(cfg).total)
}
