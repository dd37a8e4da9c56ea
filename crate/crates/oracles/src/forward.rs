//! Straight-line decoder forward pass over nested vectors.

use invmark::arch::{Activation, NormKind, Positional, Role};
use invmark::{Checkpoint, ModelArch};

const EPS: f64 = 1e-5;

type Mat = Vec<Vec<f64>>;

fn load(ckpt: &Checkpoint, arch: &ModelArch, role: Role, layer: Option<usize>) -> Mat {
    let name = arch.tensor_name(role, layer).expect("mapped role");
    let t = ckpt.get(&name).unwrap_or_else(|| panic!("missing {name}"));
    let values = t.values_f64();
    let cols = *t.shape().last().unwrap();
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vector(ckpt: &Checkpoint, arch: &ModelArch, role: Role, layer: Option<usize>) -> Vec<f64> {
    load(ckpt, arch, role, layer).concat()
}

/// `x · W` for a row vector `x`.
pub fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

fn norm(x: &[f64], gain: &[f64], bias: Option<&[f64]>, kind: NormKind) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = match kind {
        NormKind::Layernorm => x.iter().sum::<f64>() / n,
        NormKind::Rmsnorm => 0.0,
    };
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + EPS).sqrt();
    (0..x.len())
        .map(|j| (x[j] - mean) / denom * gain[j] + bias.map_or(0.0, |b| b[j]))
        .collect()
}

/// Rotates interleaved pairs of one head's slice by `pos · base^(-2i/d_k)`.
pub fn rotate(x: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let dk = x.len();
    let mut out = x.to_vec();
    for i in 0..dk / 2 {
        let angle = pos as f64 * base.powf(-2.0 * i as f64 / dk as f64);
        let (s, c) = angle.sin_cos();
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    out
}

/// Block-diagonal `R_{Θ,φ}` acting on row vectors: block `i` is
/// `[[cos φθ_i, -sin φθ_i], [sin φθ_i, cos φθ_i]]`.
pub fn rotary_matrix(dk: usize, offset: f64, base: f64) -> Mat {
    let mut r = vec![vec![0.0; dk]; dk];
    for i in 0..dk / 2 {
        let angle = offset * base.powf(-2.0 * i as f64 / dk as f64);
        let (s, c) = angle.sin_cos();
        r[2 * i][2 * i] = c;
        r[2 * i][2 * i + 1] = -s;
        r[2 * i + 1][2 * i] = s;
        r[2 * i + 1][2 * i + 1] = c;
    }
    r
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Logits for every position of `tokens`, shape `[len][vocab]`.
pub fn logits(ckpt: &Checkpoint, arch: &ModelArch, tokens: &[u32]) -> Mat {
    let (h, dk, dv) = (arch.h, arch.d_k, arch.d_v);
    let layernorm = arch.norm_kind == NormKind::Layernorm;
    let embed = load(ckpt, arch, Role::E, None);
    let mut x: Mat = tokens.iter().map(|&t| embed[t as usize].clone()).collect();
    let n = tokens.len();

    for l in (0..arch.layers).map(Some) {
        let g = vector(ckpt, arch, Role::Ln_att, l);
        let b = layernorm.then(|| vector(ckpt, arch, Role::Ln_att_bias, l));
        let (wq, wk, wv, wo) = (
            load(ckpt, arch, Role::Wq, l),
            load(ckpt, arch, Role::Wk, l),
            load(ckpt, arch, Role::Wv, l),
            load(ckpt, arch, Role::Wo, l),
        );
        let z: Mat = x.iter().map(|r| norm(r, &g, b.as_deref(), arch.norm_kind)).collect();
        let q: Mat = z.iter().map(|r| vec_mat(r, &wq)).collect();
        let k: Mat = z.iter().map(|r| vec_mat(r, &wk)).collect();
        let v: Mat = z.iter().map(|r| vec_mat(r, &wv)).collect();
        for m in 0..n {
            let mut concat = vec![0.0; h * dv];
            for head in 0..h {
                let slice = |row: &[f64], pos: usize| {
                    let s = &row[head * dk..(head + 1) * dk];
                    match arch.positional {
                        Positional::Rotary => rotate(s, pos, arch.rotary_base),
                        Positional::None => s.to_vec(),
                    }
                };
                let qm = slice(&q[m], m);
                let scores: Vec<f64> = (0..=m)
                    .map(|j| {
                        let kj = slice(&k[j], j);
                        qm.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for c in 0..dv {
                        concat[head * dv + c] += e / total * v[j][head * dv + c];
                    }
                }
            }
            let out = vec_mat(&concat, &wo);
            for (a, o) in x[m].iter_mut().zip(out) {
                *a += o;
            }
        }

        let g = vector(ckpt, arch, Role::Ln_ffn, l);
        let b = layernorm.then(|| vector(ckpt, arch, Role::Ln_ffn_bias, l));
        let w1 = load(ckpt, arch, Role::W1, l);
        let w2 = load(ckpt, arch, Role::W2, l);
        let w3 = (arch.activation == Activation::Swiglu).then(|| load(ckpt, arch, Role::W3, l));
        let b1 = arch.has_biases.then(|| vector(ckpt, arch, Role::b1, l));
        let b2 = arch.has_biases.then(|| vector(ckpt, arch, Role::b2, l));
        for row in x.iter_mut() {
            let z = norm(row, &g, b.as_deref(), arch.norm_kind);
            let mut hidden = vec_mat(&z, &w1);
            if let Some(b1) = &b1 {
                hidden.iter_mut().zip(b1).for_each(|(a, b)| *a += b);
            }
            let act: Vec<f64> = match &w3 {
                Some(w3) => hidden.iter().zip(vec_mat(&z, w3)).map(|(a, g)| silu(*a) * g).collect(),
                None => hidden.iter().map(|a| a.max(0.0)).collect(),
            };
            let mut out = vec_mat(&act, &w2);
            if let Some(b2) = &b2 {
                out.iter_mut().zip(b2).for_each(|(a, b)| *a += b);
            }
            row.iter_mut().zip(out).for_each(|(a, o)| *a += o);
        }
    }

    let g = vector(ckpt, arch, Role::Ln_out, None);
    let b = layernorm.then(|| vector(ckpt, arch, Role::Ln_out_bias, None));
    let w_out = load(ckpt, arch, Role::W_out, None);
    x.iter()
        .map(|r| vec_mat(&norm(r, &g, b.as_deref(), arch.norm_kind), &w_out))
        .collect()
}
