//! Weight-processing attacks used to measure watermark robustness.
//!
//! Fine-tuning is not simulated; additive noise stands in for it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{slice_stats, Checkpoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    /// `N(0, sigma²)` added to every tensor.
    Noise { sigma: f64, seed: u64 },
    /// Noise whose standard deviation is `factor` times each tensor's own std.
    RelativeNoise { factor: f64, seed: u64 },
    /// Uniform `bits`-bit quantization between each tensor's min and max.
    Quantize { bits: u32 },
    /// Global magnitude pruning of the weight matrices.
    Prune { sparsity: f64 },
}

impl AttackSpec {
    pub fn apply(&self, ckpt: &Checkpoint) -> Result<Checkpoint> {
        match *self {
            AttackSpec::Noise { sigma, seed } => add_noise(ckpt, sigma, seed),
            AttackSpec::RelativeNoise { factor, seed } => add_relative_noise(ckpt, factor, seed),
            AttackSpec::Quantize { bits } => quantize(ckpt, bits),
            AttackSpec::Prune { sparsity } => prune(ckpt, sparsity),
        }
    }
}

fn noise_with(ckpt: &Checkpoint, seed: u64, sigma_of: impl Fn(&Tensor) -> Result<f64>) -> Result<Checkpoint> {
    let mut out = ckpt.clone();
    for (ordinal, (_, t)) in out.iter_mut().enumerate() {
        let sigma = sigma_of(t)?;
        if sigma == 0.0 {
            continue;
        }
        let mut rng = SplitMix64::new(derive_seed(seed, ordinal as u64, 0));
        let mut noise = vec![0.0; t.numel()];
        rng.fill_gaussian(&mut noise, sigma);
        t.map_in_place(|i, x| x + noise[i]);
    }
    Ok(out)
}

/// Adds i.i.d. Gaussian noise to every tensor, norm gains included. Tensor
/// `i` draws from a stream keyed by `(seed, i)`.
pub fn add_noise(ckpt: &Checkpoint, sigma: f64, seed: u64) -> Result<Checkpoint> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("noise sigma must be ≥ 0, got {sigma}")));
    }
    noise_with(ckpt, seed, |_| Ok(sigma))
}

/// Like [`add_noise`] with `sigma = factor · std(tensor)` per tensor.
pub fn add_relative_noise(ckpt: &Checkpoint, factor: f64, seed: u64) -> Result<Checkpoint> {
    if !(factor >= 0.0 && factor.is_finite()) {
        return Err(Error::Domain(format!("noise factor must be ≥ 0, got {factor}")));
    }
    noise_with(ckpt, seed, |t| Ok(factor * slice_stats(&t.values_f64())?.std))
}

/// Level `j` of `levels` evenly spaced values spanning `[min, max]`.
#[inline]
fn level(j: usize, levels: usize, min: f64, step: f64, max: f64) -> f64 {
    if j + 1 == levels {
        max
    } else {
        min + j as f64 * step
    }
}

/// Nearest level (ties go to the lower one) of a single value.
fn quantize_value(x: f64, levels: usize, min: f64, max: f64) -> f64 {
    let step = (max - min) / (levels - 1) as f64;
    let guess = ((x - min) / step).floor();
    let guess = if guess.is_finite() { guess.clamp(0.0, (levels - 1) as f64) as usize } else { 0 };
    let lo = guess.saturating_sub(1);
    let hi = (guess + 1).min(levels - 1);
    let mut best = lo;
    let mut best_err = (x - level(lo, levels, min, step, max)).abs();
    for j in lo + 1..=hi {
        let err = (x - level(j, levels, min, step, max)).abs();
        if err < best_err {
            best = j;
            best_err = err;
        }
    }
    level(best, levels, min, step, max)
}

/// Uniform quantization of every tensor onto `2^bits` levels between its
/// minimum and maximum. Constant tensors are left unchanged.
pub fn quantize(ckpt: &Checkpoint, bits: u32) -> Result<Checkpoint> {
    if !(1..=32).contains(&bits) {
        return Err(Error::Domain(format!("quantization needs 1..=32 bits, got {bits}")));
    }
    let levels = 1usize << bits;
    let mut out = ckpt.clone();
    for (_, t) in out.iter_mut() {
        let stats = slice_stats(&t.values_f64())?;
        if stats.min == stats.max {
            continue;
        }
        t.map_in_place(|_, x| quantize_value(x, levels, stats.min, stats.max));
    }
    Ok(out)
}

/// Zeroes the `⌊sparsity·n⌋` smallest-magnitude entries across all weight
/// matrices (vectors such as norm gains and biases are left alone). Ties are
/// broken by tensor order, then by flat index.
pub fn prune(ckpt: &Checkpoint, sparsity: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Domain(format!("sparsity must lie in [0, 1], got {sparsity}")));
    }
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (ordinal, (_, t)) in ckpt.iter().enumerate() {
        if t.is_vector() {
            continue;
        }
        entries.extend(t.values_f64().into_iter().enumerate().map(|(i, x)| (x.abs(), ordinal, i)));
    }
    let count = (sparsity * entries.len() as f64).floor() as usize;
    let mut out = ckpt.clone();
    if count == 0 {
        return Ok(out);
    }
    let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    if count < entries.len() {
        entries.select_nth_unstable_by(count - 1, order);
    }
    let mut doomed: Vec<Vec<usize>> = vec![Vec::new(); ckpt.len()];
    for &(_, ordinal, i) in &entries[..count] {
        doomed[ordinal].push(i);
    }
    for (ordinal, (_, t)) in out.iter_mut().enumerate() {
        let idx = &mut doomed[ordinal];
        if idx.is_empty() {
            continue;
        }
        idx.sort_unstable();
        let mut it = idx.iter().peekable();
        t.map_in_place(|i, x| {
            if it.peek() == Some(&&i) {
                it.next();
                0.0
            } else {
                x
            }
        });
    }
    Ok(out)
}
