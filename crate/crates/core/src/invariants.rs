//! Function-preserving weight transforms.
//!
//! Each family is a right or left multiplication of the site's tensors by a
//! permutation, diagonal or 2×2 block-rotation matrix, compensated elsewhere
//! so the network computes the same function:
//!
//! * permutations reorder columns of one tensor and the matching rows of the
//!   next (`W' = W[:, π]`, i.e. new column `j` is old column `π[j]`);
//! * scaling multiplies a norm gain (and bias) by `α` and divides the rows of
//!   the linear layers that read the normalized activations by `α`;
//! * QK products right-multiply `Wq` by `P = diag(λ_i R(θ_i))` and `Wk` by
//!   `(Pᵀ)⁻¹ = diag(λ_i⁻¹ R(θ_i))`, with `R(θ) = [[cos θ, -sin θ], [sin θ, cos θ]]`
//!   acting on interleaved column pairs. Block rotations commute with the
//!   rotary position rotation, so this also holds under rotary embeddings.
//!
//! All arithmetic is done in `f64`; results are rounded to the tensor dtype
//! on store.

use serde::{Deserialize, Serialize};

use crate::arch::{acted_size, tensors_for_site, AxisAction, Family, ModelArch, Site, SiteTensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Permutation(Vec<usize>),
    Scaling(Vec<f64>),
    Rotation {
        angles: Vec<f64>,
        /// Per-pair scale; `None` means all ones.
        lambdas: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformCandidate {
    pub family: Family,
    pub payload: Payload,
}

impl TransformCandidate {
    pub fn permutation(family: Family, perm: Vec<usize>) -> Self {
        Self { family, payload: Payload::Permutation(perm) }
    }

    pub fn scaling(family: Family, alpha: Vec<f64>) -> Self {
        Self { family, payload: Payload::Scaling(alpha) }
    }

    pub fn rotation(angles: Vec<f64>, lambdas: Option<Vec<f64>>) -> Self {
        Self {
            family: Family::QkProduct,
            payload: Payload::Rotation { angles, lambdas },
        }
    }

    /// Checks the payload kind and size against the site family and architecture.
    pub fn validate(&self, arch: &ModelArch) -> Result<()> {
        let n = acted_size(self.family, arch);
        match (&self.payload, self.family) {
            (Payload::Permutation(p), f) if f.is_permutation() => {
                if p.len() != n || !is_bijection(p) {
                    return Err(Error::Engine(format!(
                        "{f} candidate must be a permutation of 0..{n}"
                    )));
                }
            }
            (Payload::Scaling(a), f) if f.is_scaling() => {
                if a.len() != n || a.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                    return Err(Error::Engine(format!(
                        "{f} candidate must hold {n} positive finite factors"
                    )));
                }
            }
            (Payload::Rotation { angles, lambdas }, Family::QkProduct) => {
                if angles.len() != n || angles.iter().any(|a| !a.is_finite()) {
                    return Err(Error::Engine(format!("qk_product candidate needs {n} angles")));
                }
                if let Some(l) = lambdas {
                    if l.len() != n || l.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                        return Err(Error::Engine(format!(
                            "qk_product candidate needs {n} positive scales"
                        )));
                    }
                }
            }
            (_, f) => {
                return Err(Error::Engine(format!("payload kind does not match family {f}")));
            }
        }
        Ok(())
    }
}

fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &x in p {
        if x >= p.len() || seen[x] {
            return false;
        }
        seen[x] = true;
    }
    true
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &x) in p.iter().enumerate() {
        inv[x] = i;
    }
    inv
}

/// The candidate undoing `cand`.
pub fn invert_candidate(cand: &TransformCandidate) -> TransformCandidate {
    let payload = match &cand.payload {
        Payload::Permutation(p) => Payload::Permutation(invert_permutation(p)),
        Payload::Scaling(a) => Payload::Scaling(a.iter().map(|x| 1.0 / x).collect()),
        Payload::Rotation { angles, lambdas } => Payload::Rotation {
            angles: angles.iter().map(|t| -t).collect(),
            lambdas: lambdas.as_ref().map(|l| l.iter().map(|x| 1.0 / x).collect()),
        },
    };
    TransformCandidate { family: cand.family, payload }
}

/// A candidate with its trigonometry evaluated once.
pub(crate) enum Prepared<'a> {
    Permutation(&'a [usize]),
    Scaling(&'a [f64]),
    Rotation {
        cos: Vec<f64>,
        sin: Vec<f64>,
        lambdas: Option<&'a [f64]>,
    },
}

impl<'a> Prepared<'a> {
    pub(crate) fn new(cand: &'a TransformCandidate) -> Self {
        match &cand.payload {
            Payload::Permutation(p) => Prepared::Permutation(p),
            Payload::Scaling(a) => Prepared::Scaling(a),
            Payload::Rotation { angles, lambdas } => Prepared::Rotation {
                cos: angles.iter().map(|&t| libm::cos(t)).collect(),
                sin: angles.iter().map(|&t| libm::sin(t)).collect(),
                lambdas: lambdas.as_deref(),
            },
        }
    }

    /// Verifies that `action` can be applied to a `rows × cols` view.
    pub(crate) fn check(&self, action: AxisAction, rows: usize, cols: usize) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::Engine(format!(
                "{what} does not fit a {rows}x{cols} tensor under {action:?}"
            )))
        };
        match (self, action) {
            (Prepared::Permutation(p), AxisAction::ColumnBlocks(b)) => {
                if !cols.is_multiple_of(b) || cols / b != p.len() {
                    return bad("permutation");
                }
            }
            (Prepared::Permutation(p), AxisAction::Elements) => {
                if rows != 1 || cols != p.len() {
                    return bad("permutation");
                }
            }
            (Prepared::Permutation(p), AxisAction::RowBlocks(b)) => {
                if !rows.is_multiple_of(b) || rows / b != p.len() {
                    return bad("permutation");
                }
            }
            (Prepared::Permutation(p), AxisAction::WithinColumnBlocks(b)) => {
                if !cols.is_multiple_of(b) || b != p.len() {
                    return bad("permutation");
                }
            }
            (Prepared::Scaling(a), AxisAction::ScaledElements) => {
                if rows != 1 || cols > a.len() {
                    return bad("scaling vector");
                }
            }
            (Prepared::Scaling(a), AxisAction::UnscaledRows) => {
                if rows > a.len() {
                    return bad("scaling vector");
                }
            }
            (Prepared::Rotation { cos, .. }, AxisAction::QueryPairs | AxisAction::KeyPairs) => {
                if cols != 2 * cos.len() {
                    return bad("rotation angles");
                }
            }
            _ => return bad("candidate kind"),
        }
        Ok(())
    }

    /// Writes row `i` of the transformed `src` into `out`. Assumes `check` passed.
    #[inline]
    pub(crate) fn row_into(&self, action: AxisAction, src: &Matrix<f64>, i: usize, out: &mut [f64]) {
        match (self, action) {
            (Prepared::Permutation(p), AxisAction::ColumnBlocks(b)) => {
                let row = src.row(i);
                for (j, &from) in p.iter().enumerate() {
                    out[j * b..(j + 1) * b].copy_from_slice(&row[from * b..(from + 1) * b]);
                }
            }
            (Prepared::Permutation(p), AxisAction::Elements) => {
                let row = src.row(i);
                for (o, &from) in out.iter_mut().zip(p.iter()) {
                    *o = row[from];
                }
            }
            (Prepared::Permutation(p), AxisAction::RowBlocks(b)) => {
                let from = p[i / b] * b + i % b;
                out.copy_from_slice(src.row(from));
            }
            (Prepared::Permutation(p), AxisAction::WithinColumnBlocks(b)) => {
                let row = src.row(i);
                for (dst, blk) in out.chunks_exact_mut(b).zip(row.chunks_exact(b)) {
                    for (o, &from) in dst.iter_mut().zip(p.iter()) {
                        *o = blk[from];
                    }
                }
            }
            (Prepared::Scaling(a), AxisAction::ScaledElements) => {
                for ((o, &x), &s) in out.iter_mut().zip(src.row(i)).zip(a.iter()) {
                    *o = x * s;
                }
            }
            (Prepared::Scaling(a), AxisAction::UnscaledRows) => {
                let s = a[i];
                for (o, &x) in out.iter_mut().zip(src.row(i)) {
                    *o = x / s;
                }
            }
            (Prepared::Rotation { cos, sin, lambdas }, AxisAction::QueryPairs | AxisAction::KeyPairs) => {
                let key = action == AxisAction::KeyPairs;
                let row = src.row(i);
                for (p, (dst, pair)) in out.chunks_exact_mut(2).zip(row.chunks_exact(2)).enumerate() {
                    let (c, s) = (cos[p], sin[p]);
                    let (x0, x1) = (pair[0], pair[1]);
                    let mut y0 = x0 * c + x1 * s;
                    let mut y1 = x1 * c - x0 * s;
                    if let Some(l) = lambdas {
                        let g = if key { 1.0 / l[p] } else { l[p] };
                        y0 *= g;
                        y1 *= g;
                    }
                    dst[0] = y0;
                    dst[1] = y1;
                }
            }
            _ => unreachable!("action checked before use"),
        }
    }

    pub(crate) fn apply(&self, action: AxisAction, src: &Matrix<f64>) -> Result<Matrix<f64>> {
        self.check(action, src.rows(), src.cols())?;
        let mut out = Matrix::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            self.row_into(action, src, i, out.row_mut(i));
        }
        Ok(out)
    }

    /// Squared distance between `observed_row` and row `i` of the transformed
    /// `src`, without materialising the transformed row.
    #[inline]
    pub(crate) fn row_distance_sq(&self, action: AxisAction, observed_row: &[f64], src: &Matrix<f64>, i: usize) -> f64 {
        #[inline(always)]
        fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        }
        let row = src.row(i);
        match (self, action) {
            (Prepared::Permutation(p), AxisAction::ColumnBlocks(1) | AxisAction::Elements) => observed_row
                .iter()
                .zip(p.iter())
                .map(|(o, &from)| (o - row[from]) * (o - row[from]))
                .sum(),
            (Prepared::Permutation(p), AxisAction::ColumnBlocks(b)) => p
                .iter()
                .enumerate()
                .map(|(j, &from)| sq_diff(&observed_row[j * b..(j + 1) * b], &row[from * b..(from + 1) * b]))
                .sum(),
            (Prepared::Permutation(p), AxisAction::RowBlocks(b)) => {
                sq_diff(observed_row, src.row(p[i / b] * b + i % b))
            }
            (Prepared::Permutation(p), AxisAction::WithinColumnBlocks(b)) => observed_row
                .chunks_exact(b)
                .zip(row.chunks_exact(b))
                .map(|(o, blk)| o.iter().zip(p.iter()).map(|(o, &from)| (o - blk[from]) * (o - blk[from])).sum::<f64>())
                .sum(),
            (Prepared::Scaling(a), AxisAction::ScaledElements) => observed_row
                .iter()
                .zip(row)
                .zip(a.iter())
                .map(|((o, x), s)| (o - x * s) * (o - x * s))
                .sum(),
            (Prepared::Scaling(a), AxisAction::UnscaledRows) => {
                let s = a[i];
                observed_row.iter().zip(row).map(|(o, x)| (o - x / s) * (o - x / s)).sum()
            }
            (Prepared::Rotation { cos, sin, lambdas }, AxisAction::QueryPairs | AxisAction::KeyPairs) => {
                let key = action == AxisAction::KeyPairs;
                let mut acc = 0.0;
                for (p, (o, pair)) in observed_row.chunks_exact(2).zip(row.chunks_exact(2)).enumerate() {
                    let (c, s) = (cos[p], sin[p]);
                    let (x0, x1) = (pair[0], pair[1]);
                    let mut y0 = x0 * c + x1 * s;
                    let mut y1 = x1 * c - x0 * s;
                    if let Some(l) = lambdas {
                        let g = if key { 1.0 / l[p] } else { l[p] };
                        y0 *= g;
                        y1 *= g;
                    }
                    acc += (o[0] - y0) * (o[0] - y0) + (o[1] - y1) * (o[1] - y1);
                }
                acc
            }
            _ => unreachable!("action checked before use"),
        }
    }
}

fn check_site(site: &Site, cand: &TransformCandidate, arch: &ModelArch) -> Result<Vec<SiteTensor>> {
    if cand.family != site.family {
        return Err(Error::Engine(format!(
            "candidate family {} applied at a {} site",
            cand.family, site.family
        )));
    }
    cand.validate(arch)?;
    tensors_for_site(site, arch)
}

/// Applies one candidate at one site, in place.
pub fn apply_transform_in_place(
    ckpt: &mut Checkpoint,
    site: &Site,
    cand: &TransformCandidate,
    arch: &ModelArch,
) -> Result<()> {
    let targets = check_site(site, cand, arch)?;
    let prepared = Prepared::new(cand);
    for t in &targets {
        let tensor = ckpt.tensor_mut(&t.name)?;
        let m = tensor.to_matrix::<f64>();
        let transformed = prepared.apply(t.action, &m)?;
        tensor.assign_matrix(&transformed)?;
    }
    Ok(())
}

pub fn apply_transform(
    ckpt: &Checkpoint,
    site: &Site,
    cand: &TransformCandidate,
    arch: &ModelArch,
) -> Result<Checkpoint> {
    let mut out = ckpt.clone();
    apply_transform_in_place(&mut out, site, cand, arch)?;
    Ok(out)
}

/// Rotates (and optionally scales) the interleaved column pairs of the query
/// and key projections of one layer.
pub fn apply_qk_product(
    ckpt: &Checkpoint,
    layer: usize,
    angles: &[f64],
    lambdas: Option<&[f64]>,
    arch: &ModelArch,
) -> Result<Checkpoint> {
    if !arch.d_k.is_multiple_of(2) {
        return Err(Error::Config(format!("qk_product needs an even d_k, got {}", arch.d_k)));
    }
    let site = Site { family: Family::QkProduct, layer: Some(layer), ordinal: 0 };
    let cand = TransformCandidate::rotation(angles.to_vec(), lambdas.map(<[f64]>::to_vec));
    apply_transform(ckpt, &site, &cand, arch)
}

/// Left fold of [`apply_transform`] over the list.
pub fn compose_pipeline(
    ckpt: &Checkpoint,
    steps: &[(Site, TransformCandidate)],
    arch: &ModelArch,
) -> Result<Checkpoint> {
    let mut out = ckpt.clone();
    for (site, cand) in steps {
        apply_transform_in_place(&mut out, site, cand, arch)?;
    }
    Ok(out)
}
