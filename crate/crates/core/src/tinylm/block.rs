//! Pre-norm transformer block shared by the language model and the parrot:
//! `x + Wo·MHA(rope(norm(x)))`, then `x + W_out·gelu(W_in·norm(x))`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Matrix, NumericsError, SeqLayout, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

/// Hyperparameters a block needs at run time.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub heads: usize,
    pub causal: bool,
    pub rope_base: f64,
    pub norm_eps: f64,
}

pub(crate) const TENSORS_PER_BLOCK: usize = 8;
const BLOCK_TENSOR_NAMES: [&str; TENSORS_PER_BLOCK] =
    ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_in", "w_out"];

pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl BlockParams {
    /// GPT-2 style init: N(0, 0.02), residual projections scaled by
    /// `1/sqrt(2·depth)`.
    pub fn init(rng: &mut impl Rng, d: usize, ffn: usize, depth: usize) -> Self {
        let std = 0.02;
        let resid = std / ((2 * depth.max(1)) as f64).sqrt();
        Self {
            attn_norm: Matrix::filled(1, d, 1.0),
            wq: normal_matrix(rng, d, d, std),
            wk: normal_matrix(rng, d, d, std),
            wv: normal_matrix(rng, d, d, std),
            wo: normal_matrix(rng, d, d, resid),
            ffn_norm: Matrix::filled(1, d, 1.0),
            w_in: normal_matrix(rng, d, ffn, std),
            w_out: normal_matrix(rng, ffn, d, resid),
        }
    }

    pub fn tensors(&self) -> [&Matrix; TENSORS_PER_BLOCK] {
        [&self.attn_norm, &self.wq, &self.wk, &self.wv, &self.wo, &self.ffn_norm, &self.w_in, &self.w_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; TENSORS_PER_BLOCK] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_in,
            &mut self.w_out,
        ]
    }

    pub(crate) fn names(prefix: &str) -> [String; TENSORS_PER_BLOCK] {
        BLOCK_TENSOR_NAMES.map(|n| format!("{prefix}.{n}"))
    }

    pub(crate) fn from_tensors(mut t: Vec<Matrix>) -> Self {
        assert_eq!(t.len(), TENSORS_PER_BLOCK);
        let w_out = t.pop().unwrap();
        let w_in = t.pop().unwrap();
        let ffn_norm = t.pop().unwrap();
        let wo = t.pop().unwrap();
        let wv = t.pop().unwrap();
        let wk = t.pop().unwrap();
        let wq = t.pop().unwrap();
        let attn_norm = t.pop().unwrap();
        Self { attn_norm, wq, wk, wv, wo, ffn_norm, w_in, w_out }
    }

    pub(crate) fn expected_shapes(d: usize, ffn: usize) -> [(usize, usize); TENSORS_PER_BLOCK] {
        [(1, d), (d, d), (d, d), (d, d), (d, d), (1, d), (d, ffn), (ffn, d)]
    }
}

/// Tape handles for one block, in [`BlockParams::tensors`] order.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockVars([Var; TENSORS_PER_BLOCK]);

impl BlockVars {
    pub(crate) fn from_slice(vars: &[Var]) -> Self {
        Self(vars.try_into().expect("block var count"))
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        layout: &SeqLayout,
        spec: &BlockSpec,
    ) -> Result<Var, NumericsError> {
        let [attn_norm, wq, wk, wv, wo, ffn_norm, w_in, w_out] = self.0;
        let a = tape.rms_norm(x, attn_norm, spec.norm_eps)?;
        let q = tape.matmul(a, wq)?;
        let q = tape.rope(q, spec.heads, layout, spec.rope_base)?;
        let k = tape.matmul(a, wk)?;
        let k = tape.rope(k, spec.heads, layout, spec.rope_base)?;
        let v = tape.matmul(a, wv)?;
        let att = tape.attention(q, k, v, spec.heads, layout, spec.causal)?;
        let att = tape.matmul(att, wo)?;
        let x = tape.add(x, att)?;
        let f = tape.rms_norm(x, ffn_norm, spec.norm_eps)?;
        let f = tape.matmul(f, w_in)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w_out)?;
        tape.add(x, f)
    }
}
