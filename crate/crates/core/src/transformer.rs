//! A small reference decoder used to check that watermarked checkpoints
//! compute the same function as their originals.
//!
//! Pre-norm residual blocks, causal multi-head attention scaled by
//! `1/sqrt(d_k)`, interleaved rotary embeddings by absolute position.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{Activation, ModelArch, NormKind, Positional, Role};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Checkpoint;

/// Variance floor inside both norm kinds.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct Norm<T> {
    gain: Vec<T>,
    bias: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
struct Block<T> {
    ln_att: Norm<T>,
    wq: Matrix<T>,
    wk: Matrix<T>,
    wv: Matrix<T>,
    wo: Matrix<T>,
    ln_ffn: Norm<T>,
    w1: Matrix<T>,
    w3: Option<Matrix<T>>,
    w2: Matrix<T>,
    b1: Option<Vec<T>>,
    b2: Option<Vec<T>>,
}

/// Weights of a checkpoint loaded into compute precision `T`.
#[derive(Debug, Clone)]
pub struct Model<T> {
    arch: ModelArch,
    embed: Matrix<T>,
    blocks: Vec<Block<T>>,
    ln_out: Norm<T>,
    w_out: Matrix<T>,
}

impl<T: Scalar> Model<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint, arch: &ModelArch) -> Result<Self> {
        arch.validate_checkpoint(ckpt)?;
        let matrix = |role, layer| -> Result<Matrix<T>> {
            Ok(ckpt.tensor(&arch.tensor_name(role, layer)?)?.to_matrix())
        };
        let vector = |role, layer| -> Result<Vec<T>> { Ok(matrix(role, layer)?.into_vec()) };
        let norm = |gain, bias, layer| -> Result<Norm<T>> {
            Ok(Norm {
                gain: vector(gain, layer)?,
                bias: if arch.has_norm_bias() { Some(vector(bias, layer)?) } else { None },
            })
        };
        let mut blocks = Vec::with_capacity(arch.layers);
        for l in (0..arch.layers).map(Some) {
            blocks.push(Block {
                ln_att: norm(Role::Ln_att, Role::Ln_att_bias, l)?,
                wq: matrix(Role::Wq, l)?,
                wk: matrix(Role::Wk, l)?,
                wv: matrix(Role::Wv, l)?,
                wo: matrix(Role::Wo, l)?,
                ln_ffn: norm(Role::Ln_ffn, Role::Ln_ffn_bias, l)?,
                w1: matrix(Role::W1, l)?,
                w3: match arch.activation {
                    Activation::Swiglu => Some(matrix(Role::W3, l)?),
                    Activation::Relu => None,
                },
                w2: matrix(Role::W2, l)?,
                b1: if arch.has_biases { Some(vector(Role::b1, l)?) } else { None },
                b2: if arch.has_biases { Some(vector(Role::b2, l)?) } else { None },
            });
        }
        Ok(Self {
            arch: arch.clone(),
            embed: matrix(Role::E, None)?,
            blocks,
            ln_out: norm(Role::Ln_out, Role::Ln_out_bias, None)?,
            w_out: matrix(Role::W_out, None)?,
        })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    /// Next-token logits for every position, shape `[tokens.len(), vocab]`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        if tokens.is_empty() {
            return Err(Error::Input("token sequence is empty".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.arch.vocab) {
            return Err(Error::Input(format!(
                "token {t} out of range for vocabulary of {}",
                self.arch.vocab
            )));
        }
        let d = self.arch.d;
        let mut x = Matrix::from_fn(tokens.len(), d, |i, j| self.embed.get(tokens[i] as usize, j));
        let rotary = match self.arch.positional {
            Positional::Rotary => Some(RotaryTable::new(tokens.len(), self.arch.d_k, self.arch.rotary_base)),
            Positional::None => None,
        };
        for block in &self.blocks {
            let z = self.normalize(&x, &block.ln_att);
            let attn = self.attention(&z, block, rotary.as_ref());
            add_assign(&mut x, &attn);
            let z = self.normalize(&x, &block.ln_ffn);
            let ffn = self.feed_forward(&z, block);
            add_assign(&mut x, &ffn);
        }
        Ok(self.normalize(&x, &self.ln_out).matmul(&self.w_out))
    }

    /// Greedy prediction at every position. Ties go to the lowest token id.
    pub fn greedy_next_tokens(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        let logits = self.forward(tokens)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i)) as u32).collect())
    }

    fn normalize(&self, x: &Matrix<T>, norm: &Norm<T>) -> Matrix<T> {
        let mut out = x.clone();
        for i in 0..out.rows() {
            normalize_row(out.row_mut(i), norm, self.arch.norm_kind);
        }
        out
    }

    fn attention(&self, z: &Matrix<T>, block: &Block<T>, rotary: Option<&RotaryTable<T>>) -> Matrix<T> {
        let (h, dk, dv) = (self.arch.h, self.arch.d_k, self.arch.d_v);
        let mut q = z.matmul(&block.wq);
        let mut k = z.matmul(&block.wk);
        let v = z.matmul(&block.wv);
        if let Some(table) = rotary {
            for pos in 0..z.rows() {
                for head in 0..h {
                    table.rotate(&mut q.row_mut(pos)[head * dk..(head + 1) * dk], pos);
                    table.rotate(&mut k.row_mut(pos)[head * dk..(head + 1) * dk], pos);
                }
            }
        }
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let n = z.rows();
        let mut out = Matrix::zeros(n, h * dv);
        let mut weights = vec![T::zero(); n];
        for head in 0..h {
            let (qs, vs) = (head * dk..(head + 1) * dk, head * dv..(head + 1) * dv);
            for m in 0..n {
                let w = &mut weights[..=m];
                for (j, slot) in w.iter_mut().enumerate() {
                    *slot = dot(&q.row(m)[qs.clone()], &k.row(j)[qs.clone()]) * scale;
                }
                softmax_in_place(w);
                let row = &mut out.row_mut(m)[vs.clone()];
                for (j, &a) in w.iter().enumerate() {
                    for (o, &val) in row.iter_mut().zip(&v.row(j)[vs.clone()]) {
                        *o = *o + a * val;
                    }
                }
            }
        }
        out.matmul(&block.wo)
    }

    fn feed_forward(&self, z: &Matrix<T>, block: &Block<T>) -> Matrix<T> {
        let mut hidden = z.matmul(&block.w1);
        if let Some(b1) = &block.b1 {
            add_row_bias(&mut hidden, b1);
        }
        match &block.w3 {
            Some(w3) => {
                let gate = z.matmul(w3);
                for (a, &g) in hidden.as_mut_slice().iter_mut().zip(gate.as_slice()) {
                    *a = silu(*a) * g;
                }
            }
            None => hidden.as_mut_slice().iter_mut().for_each(|a| *a = a.max(T::zero())),
        }
        let mut out = hidden.matmul(&block.w2);
        if let Some(b2) = &block.b2 {
            add_row_bias(&mut out, b2);
        }
        out
    }
}

fn add_assign<T: Scalar>(x: &mut Matrix<T>, y: &Matrix<T>) {
    for (a, &b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *a = *a + b;
    }
}

fn add_row_bias<T: Scalar>(x: &mut Matrix<T>, bias: &[T]) {
    for i in 0..x.rows() {
        for (a, &b) in x.row_mut(i).iter_mut().zip(bias) {
            *a = *a + b;
        }
    }
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn normalize_row<T: Scalar>(row: &mut [T], norm: &Norm<T>, kind: NormKind) {
    let n = T::from_usize(row.len()).unwrap();
    let eps = T::from_f64_rounded(NORM_EPS);
    let mean = match kind {
        NormKind::Layernorm => row.iter().fold(T::zero(), |a, &x| a + x) / n,
        NormKind::Rmsnorm => T::zero(),
    };
    let var = row.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
    let inv = T::one() / (var + eps).sqrt();
    for (j, x) in row.iter_mut().enumerate() {
        *x = (*x - mean) * inv * norm.gain[j];
        if let Some(bias) = &norm.bias {
            *x = *x + bias[j];
        }
    }
}

/// Numerically stable softmax.
pub fn softmax_in_place<T: Scalar>(values: &mut [T]) {
    let max = values.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    values.iter_mut().for_each(|v| *v = *v / sum);
}

/// Index of the largest value, the first one on ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-position cos/sin of `pos · base^(-2i/d_k)` for each pair `i`.
pub struct RotaryTable<T> {
    pairs: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RotaryTable<T> {
    pub fn new(positions: usize, d_k: usize, base: f64) -> Self {
        let pairs = d_k / 2;
        let mut cos = Vec::with_capacity(positions * pairs);
        let mut sin = Vec::with_capacity(positions * pairs);
        for pos in 0..positions {
            for i in 0..pairs {
                let freq = libm::pow(base, -2.0 * i as f64 / d_k as f64);
                let phi = pos as f64 * freq;
                cos.push(T::from_f64_rounded(libm::cos(phi)));
                sin.push(T::from_f64_rounded(libm::sin(phi)));
            }
        }
        Self { pairs, cos, sin }
    }

    /// Rotates the interleaved pairs `(x[2i], x[2i+1])` of one head in place.
    pub fn rotate(&self, head: &mut [T], pos: usize) {
        for i in 0..self.pairs {
            let (c, s) = (self.cos[pos * self.pairs + i], self.sin[pos * self.pairs + i]);
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

/// `count` sequences of `len` tokens drawn uniformly from the vocabulary.
pub fn random_sequences(count: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = SplitMix64::new(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.next_index(vocab) as u32).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub sequences: usize,
    pub positions: usize,
    pub mismatches: usize,
    /// Pooled fraction of positions whose greedy token differs.
    pub fraction: f64,
    /// Mismatch fraction at each position index across sequences.
    pub per_position: Vec<f64>,
}

/// Compares greedy next-token predictions of two models over `sequences`.
pub fn distortion<T: Scalar>(
    original: &Model<T>,
    marked: &Model<T>,
    sequences: &[Vec<u32>],
) -> Result<DistortionReport> {
    if sequences.is_empty() {
        return Err(Error::Input("distortion needs at least one sequence".into()));
    }
    let diffs = sequences
        .par_iter()
        .map(|seq| {
            let a = original.greedy_next_tokens(seq)?;
            let b = marked.greedy_next_tokens(seq)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x != y).collect::<Vec<bool>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let longest = diffs.iter().map(Vec::len).max().unwrap_or(0);
    let mut hits = vec![0usize; longest];
    let mut counts = vec![0usize; longest];
    for row in &diffs {
        for (i, &d) in row.iter().enumerate() {
            counts[i] += 1;
            hits[i] += d as usize;
        }
    }
    let positions: usize = counts.iter().sum();
    let mismatches: usize = hits.iter().sum();
    Ok(DistortionReport {
        sequences: sequences.len(),
        positions,
        mismatches,
        fraction: mismatches as f64 / positions as f64,
        per_position: hits.iter().zip(&counts).map(|(&h, &c)| h as f64 / c as f64).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub max_abs_logit: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Passes when every logit differs by at most `tol · (1 + max |logit|)`.
pub fn equivalence_check<T: Scalar>(
    original: &Model<T>,
    marked: &Model<T>,
    sequences: &[Vec<u32>],
    tol: f64,
) -> Result<EquivalenceReport> {
    let per_seq = sequences
        .par_iter()
        .map(|seq| {
            let a = original.forward(seq)?;
            let b = marked.forward(seq)?;
            let diff = a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .fold(0.0f64, |m, (&x, &y)| m.max((x.to_f64_lossless() - y.to_f64_lossless()).abs()));
            Ok((diff, a.max_abs().to_f64_lossless()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (max_abs_diff, max_abs_logit) =
        per_seq.iter().fold((0.0f64, 0.0f64), |(d, l), &(x, y)| (d.max(x), l.max(y)));
    Ok(EquivalenceReport {
        max_abs_diff,
        max_abs_logit,
        tol,
        passed: max_abs_diff <= tol * (1.0 + max_abs_logit),
    })
}
