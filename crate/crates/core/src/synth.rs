//! Randomly initialised transformer checkpoints for tests and benchmarks.

use crate::arch::{default_name_map, Activation, ModelArch, NormKind, Positional, Role};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Checkpoint, Dtype, Tensor};

/// Standard deviation of synthetic weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyPreset {
    /// RMSNorm, SwiGLU, rotary, no biases.
    LlamaLike,
    /// LayerNorm, ReLU, no positional encoding, with FFN biases.
    Classic,
}

impl std::str::FromStr for ToyPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llama" | "llama-like" => Ok(ToyPreset::LlamaLike),
            "classic" => Ok(ToyPreset::Classic),
            other => Err(format!("unknown preset `{other}` (expected llama or classic)")),
        }
    }
}

/// L=4, d=64, h=4, d_k=d_v=16, d_ff=128, vocab=256.
pub fn toy_arch(preset: ToyPreset) -> ModelArch {
    let (norm_kind, activation, positional, has_biases) = match preset {
        ToyPreset::LlamaLike => (NormKind::Rmsnorm, Activation::Swiglu, Positional::Rotary, false),
        ToyPreset::Classic => (NormKind::Layernorm, Activation::Relu, Positional::None, true),
    };
    ModelArch {
        d: 64,
        layers: 4,
        h: 4,
        d_k: 16,
        d_v: 16,
        d_ff: 128,
        vocab: 256,
        norm_kind,
        activation,
        positional,
        has_biases,
        rotary_base: 10_000.0,
        name_map: default_name_map(),
    }
}

/// LLaMA-like architecture of the given depth and width (heads of 64, or a
/// single head when `d < 64`; `d_ff = 2d`).
pub fn scaled_arch(layers: usize, d: usize) -> ModelArch {
    let d_k = d.min(64);
    ModelArch {
        d,
        layers,
        h: d / d_k,
        d_k,
        d_v: d_k,
        d_ff: 2 * d,
        vocab: 256,
        ..toy_arch(ToyPreset::LlamaLike)
    }
}

/// Weights ~ N(0, 0.02²), norm gains ~ 1 + N(0, 0.02²). Each tensor draws
/// from its own stream keyed by `seed` and its position.
pub fn synthetic_checkpoint(arch: &ModelArch, dtype: Dtype, seed: u64) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    for (ordinal, (role, layer)) in arch.required_tensors().into_iter().enumerate() {
        let shape = arch.expected_shape(role);
        let n: usize = shape.iter().product();
        let mut values = vec![0.0; n];
        let mut rng = SplitMix64::new(derive_seed(seed, ordinal as u64, 0));
        rng.fill_gaussian(&mut values, INIT_STD);
        if matches!(role, Role::Ln_att | Role::Ln_ffn | Role::Ln_out) {
            values.iter_mut().for_each(|v| *v += 1.0);
        }
        let name = arch.tensor_name(role, layer).expect("default roles are mapped");
        let tensor = Tensor::from_f64(dtype, shape, &values).expect("shape matches buffer");
        ckpt.insert(name, tensor).expect("unique names");
    }
    ckpt
}
