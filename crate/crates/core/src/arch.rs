//! Transformer architecture descriptions and watermark sites.
//!
//! Weights follow the `x · W` convention: `Wq`, `Wk` are `[d, h·d_k]`, `Wv` is
//! `[d, h·d_v]`, `Wo` is `[h·d_v, d]`, `W1`/`W3` are `[d, d_ff]`, `W2` is
//! `[d_ff, d]`, `E` is `[vocab, d]` and `W_out` is `[d, vocab]`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Layernorm,
    Rmsnorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Swiglu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    None,
    Rotary,
}

/// Role of a tensor inside the network. Norm roles name the gain; the
/// `*_bias` roles only exist for layernorm.
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    E,
    W_out,
    Ln_out,
    Ln_out_bias,
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
    W3,
    Ln_att,
    Ln_att_bias,
    Ln_ffn,
    Ln_ffn_bias,
    b1,
    b2,
}

impl Role {
    pub fn is_per_layer(self) -> bool {
        !matches!(self, Role::E | Role::W_out | Role::Ln_out | Role::Ln_out_bias)
    }

    pub fn is_norm(self) -> bool {
        matches!(
            self,
            Role::Ln_out
                | Role::Ln_out_bias
                | Role::Ln_att
                | Role::Ln_att_bias
                | Role::Ln_ffn
                | Role::Ln_ffn_bias
        )
    }
}

fn default_rotary_base() -> f64 {
    10_000.0
}

/// LLaMA-style tensor names.
pub fn default_name_map() -> BTreeMap<Role, String> {
    use Role::*;
    [
        (E, "tok_embeddings.weight"),
        (W_out, "output.weight"),
        (Ln_out, "norm.weight"),
        (Ln_out_bias, "norm.bias"),
        (Wq, "layers.{layer}.attention.wq.weight"),
        (Wk, "layers.{layer}.attention.wk.weight"),
        (Wv, "layers.{layer}.attention.wv.weight"),
        (Wo, "layers.{layer}.attention.wo.weight"),
        (W1, "layers.{layer}.feed_forward.w1.weight"),
        (W2, "layers.{layer}.feed_forward.w2.weight"),
        (W3, "layers.{layer}.feed_forward.w3.weight"),
        (Ln_att, "layers.{layer}.attention_norm.weight"),
        (Ln_att_bias, "layers.{layer}.attention_norm.bias"),
        (Ln_ffn, "layers.{layer}.ffn_norm.weight"),
        (Ln_ffn_bias, "layers.{layer}.ffn_norm.bias"),
        (b1, "layers.{layer}.feed_forward.w1.bias"),
        (b2, "layers.{layer}.feed_forward.w2.bias"),
    ]
    .into_iter()
    .map(|(r, s)| (r, s.to_string()))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub d: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub h: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub norm_kind: NormKind,
    pub activation: Activation,
    pub positional: Positional,
    pub has_biases: bool,
    #[serde(default = "default_rotary_base")]
    pub rotary_base: f64,
    #[serde(default = "default_name_map")]
    pub name_map: BTreeMap<Role, String>,
}

impl ModelArch {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let arch: Self = serde_json::from_str(s).map_err(|e| Error::json("architecture", e))?;
        arch.check()?;
        Ok(arch)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture json")
    }

    /// Internal consistency of the dimensions.
    pub fn check(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("L", self.layers),
            ("h", self.h),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("dimension `{name}` must be positive")));
        }
        if self.positional == Positional::Rotary && !self.d_k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary embeddings need an even d_k, got {}",
                self.d_k
            )));
        }
        if !(self.rotary_base.is_finite() && self.rotary_base > 0.0) {
            return Err(Error::Config("rotary_base must be positive".into()));
        }
        Ok(())
    }

    pub fn has_norm_bias(&self) -> bool {
        self.norm_kind == NormKind::Layernorm
    }

    pub fn tensor_name(&self, role: Role, layer: Option<usize>) -> Result<String> {
        let template = self
            .name_map
            .get(&role)
            .ok_or_else(|| Error::Config(format!("name_map has no entry for role {role:?}")))?;
        match (role.is_per_layer(), layer) {
            (true, Some(l)) => Ok(template.replace("{layer}", &l.to_string())),
            (false, _) => Ok(template.clone()),
            (true, None) => Err(Error::Config(format!("role {role:?} needs a layer index"))),
        }
    }

    pub fn expected_shape(&self, role: Role) -> Vec<usize> {
        let (d, hk, hv) = (self.d, self.h * self.d_k, self.h * self.d_v);
        match role {
            Role::E => vec![self.vocab, d],
            Role::W_out => vec![d, self.vocab],
            Role::Wq | Role::Wk => vec![d, hk],
            Role::Wv => vec![d, hv],
            Role::Wo => vec![hv, d],
            Role::W1 | Role::W3 => vec![d, self.d_ff],
            Role::W2 => vec![self.d_ff, d],
            Role::b1 => vec![self.d_ff],
            Role::b2 => vec![d],
            Role::Ln_out
            | Role::Ln_out_bias
            | Role::Ln_att
            | Role::Ln_att_bias
            | Role::Ln_ffn
            | Role::Ln_ffn_bias => vec![d],
        }
    }

    /// Every (role, layer) the architecture needs, in canonical order.
    pub fn required_tensors(&self) -> Vec<(Role, Option<usize>)> {
        let mut out = vec![(Role::E, None)];
        for l in 0..self.layers {
            let mut roles = vec![Role::Ln_att];
            if self.has_norm_bias() {
                roles.push(Role::Ln_att_bias);
            }
            roles.extend([Role::Wq, Role::Wk, Role::Wv, Role::Wo, Role::Ln_ffn]);
            if self.has_norm_bias() {
                roles.push(Role::Ln_ffn_bias);
            }
            roles.push(Role::W1);
            if self.activation == Activation::Swiglu {
                roles.push(Role::W3);
            }
            roles.push(Role::W2);
            if self.has_biases {
                roles.extend([Role::b1, Role::b2]);
            }
            out.extend(roles.into_iter().map(|r| (r, Some(l))));
        }
        out.push((Role::Ln_out, None));
        if self.has_norm_bias() {
            out.push((Role::Ln_out_bias, None));
        }
        out.push((Role::W_out, None));
        out
    }

    /// Checks presence and shape of every required tensor.
    pub fn validate_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        self.check()?;
        for (role, layer) in self.required_tensors() {
            let name = self.tensor_name(role, layer)?;
            let t = ckpt.get(&name).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing `{name}` ({role:?})"))
            })?;
            let expected = self.expected_shape(role);
            if t.shape() != expected.as_slice() {
                return Err(Error::Config(format!(
                    "`{name}` has shape {:?}, architecture expects {expected:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PermHeads,
    PermFfn,
    PermEmbed,
    PermInsideHead,
    QkProduct,
    ScalingAtt,
    ScalingFfn,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::PermHeads,
        Family::PermFfn,
        Family::PermEmbed,
        Family::PermInsideHead,
        Family::QkProduct,
        Family::ScalingAtt,
        Family::ScalingFfn,
    ];

    /// Permutations first, then QK products, then scaling.
    pub fn defaults() -> Vec<Family> {
        vec![
            Family::PermHeads,
            Family::PermFfn,
            Family::QkProduct,
            Family::ScalingAtt,
            Family::ScalingFfn,
        ]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::PermHeads => "perm_heads",
            Family::PermFfn => "perm_ffn",
            Family::PermEmbed => "perm_embed",
            Family::PermInsideHead => "perm_inside_head",
            Family::QkProduct => "qk_product",
            Family::ScalingAtt => "scaling_att",
            Family::ScalingFfn => "scaling_ffn",
        }
    }

    pub fn is_permutation(self) -> bool {
        matches!(
            self,
            Family::PermHeads | Family::PermFfn | Family::PermEmbed | Family::PermInsideHead
        )
    }

    pub fn is_scaling(self) -> bool {
        matches!(self, Family::ScalingAtt | Family::ScalingFfn)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown invariant family `{s}`")))
    }
}

/// One chunk-carrying location: a family at a layer (or global).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Site {
    pub family: Family,
    /// `None` for the global embedding-dimension site.
    pub layer: Option<usize>,
    pub ordinal: usize,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{}@{}", self.family, l),
            None => write!(f, "{}@global", self.family),
        }
    }
}

pub fn check_families(arch: &ModelArch, families: &[Family]) -> Result<()> {
    for (i, f) in families.iter().enumerate() {
        if families[..i].contains(f) {
            return Err(Error::Config(format!("family `{f}` listed twice")));
        }
        match f {
            Family::PermInsideHead if arch.positional == Positional::Rotary => {
                return Err(Error::Config(
                    "perm_inside_head is not an invariant under rotary embeddings".into(),
                ));
            }
            Family::QkProduct if !arch.d_k.is_multiple_of(2) => {
                return Err(Error::Config(format!(
                    "qk_product needs an even d_k, got {}",
                    arch.d_k
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Sites in family order, layers ascending within a family.
pub fn resolve_sites(arch: &ModelArch, families: &[Family]) -> Result<Vec<Site>> {
    arch.check()?;
    check_families(arch, families)?;
    let mut sites = Vec::new();
    for &family in families {
        if family == Family::PermEmbed {
            sites.push(Site { family, layer: None, ordinal: sites.len() });
        } else {
            for l in 0..arch.layers {
                sites.push(Site { family, layer: Some(l), ordinal: sites.len() });
            }
        }
    }
    Ok(sites)
}

/// How a transform acts on one tensor, in terms of its matrix view
/// (vectors are a single row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisAction {
    /// Column blocks of the given width are permuted.
    ColumnBlocks(usize),
    /// Row blocks of the given height are permuted.
    RowBlocks(usize),
    /// Columns are permuted identically inside each block of the given width.
    WithinColumnBlocks(usize),
    /// Vector elements are permuted.
    Elements,
    /// Vector elements are multiplied by the scaling vector.
    ScaledElements,
    /// Rows are divided by the scaling vector.
    UnscaledRows,
    /// Column pairs `(2i, 2i+1)` are multiplied by `λ_i R(θ_i)`.
    QueryPairs,
    /// Column pairs `(2i, 2i+1)` are multiplied by `λ_i⁻¹ R(θ_i)`.
    KeyPairs,
}

impl AxisAction {
    /// True for actions on the row axis. Actions on different axes of the
    /// same tensor commute.
    pub fn acts_on_rows(self) -> bool {
        matches!(self, AxisAction::RowBlocks(_) | AxisAction::UnscaledRows)
    }

    /// True when the action mixes or reorders whole rows, so no row may be dropped.
    pub fn needs_all_rows(self) -> bool {
        matches!(self, AxisAction::RowBlocks(_))
    }

    /// True when the action mixes or reorders columns, so no column may be dropped.
    pub fn needs_all_cols(self) -> bool {
        matches!(
            self,
            AxisAction::ColumnBlocks(_)
                | AxisAction::WithinColumnBlocks(_)
                | AxisAction::Elements
                | AxisAction::QueryPairs
                | AxisAction::KeyPairs
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteTensor {
    pub name: String,
    pub role: Role,
    pub action: AxisAction,
}

/// Every tensor a site's transform touches, with how it is touched.
pub fn tensors_for_site(site: &Site, arch: &ModelArch) -> Result<Vec<SiteTensor>> {
    use AxisAction::*;
    let mut out: Vec<(Role, Option<usize>, AxisAction)> = Vec::new();
    let swiglu = arch.activation == Activation::Swiglu;
    let norm_bias = arch.has_norm_bias();
    let layer = match (site.family, site.layer) {
        (Family::PermEmbed, _) => None,
        (_, Some(l)) if l < arch.layers => Some(l),
        (f, l) => {
            return Err(Error::Config(format!(
                "site {f} at layer {l:?} is outside a {}-layer model",
                arch.layers
            )))
        }
    };
    match site.family {
        Family::PermHeads => {
            out.push((Role::Wq, layer, ColumnBlocks(arch.d_k)));
            out.push((Role::Wk, layer, ColumnBlocks(arch.d_k)));
            out.push((Role::Wv, layer, ColumnBlocks(arch.d_v)));
            out.push((Role::Wo, layer, RowBlocks(arch.d_v)));
        }
        Family::PermFfn => {
            out.push((Role::W1, layer, ColumnBlocks(1)));
            if swiglu {
                out.push((Role::W3, layer, ColumnBlocks(1)));
            }
            out.push((Role::W2, layer, RowBlocks(1)));
            if arch.has_biases {
                out.push((Role::b1, layer, Elements));
            }
        }
        Family::PermInsideHead => {
            out.push((Role::Wq, layer, WithinColumnBlocks(arch.d_k)));
            out.push((Role::Wk, layer, WithinColumnBlocks(arch.d_k)));
        }
        Family::QkProduct => {
            out.push((Role::Wq, layer, QueryPairs));
            out.push((Role::Wk, layer, KeyPairs));
        }
        Family::ScalingAtt => {
            out.push((Role::Ln_att, layer, ScaledElements));
            if norm_bias {
                out.push((Role::Ln_att_bias, layer, ScaledElements));
            }
            out.push((Role::Wq, layer, UnscaledRows));
            out.push((Role::Wk, layer, UnscaledRows));
            out.push((Role::Wv, layer, UnscaledRows));
        }
        Family::ScalingFfn => {
            out.push((Role::Ln_ffn, layer, ScaledElements));
            if norm_bias {
                out.push((Role::Ln_ffn_bias, layer, ScaledElements));
            }
            out.push((Role::W1, layer, UnscaledRows));
            if swiglu {
                out.push((Role::W3, layer, UnscaledRows));
            }
        }
        Family::PermEmbed => {
            out.push((Role::E, None, ColumnBlocks(1)));
            for l in 0..arch.layers {
                let l = Some(l);
                out.push((Role::Ln_att, l, Elements));
                if norm_bias {
                    out.push((Role::Ln_att_bias, l, Elements));
                }
                out.push((Role::Wq, l, RowBlocks(1)));
                out.push((Role::Wk, l, RowBlocks(1)));
                out.push((Role::Wv, l, RowBlocks(1)));
                out.push((Role::Wo, l, ColumnBlocks(1)));
                out.push((Role::Ln_ffn, l, Elements));
                if norm_bias {
                    out.push((Role::Ln_ffn_bias, l, Elements));
                }
                out.push((Role::W1, l, RowBlocks(1)));
                if swiglu {
                    out.push((Role::W3, l, RowBlocks(1)));
                }
                out.push((Role::W2, l, ColumnBlocks(1)));
                if arch.has_biases {
                    out.push((Role::b2, l, Elements));
                }
            }
            out.push((Role::Ln_out, None, Elements));
            if norm_bias {
                out.push((Role::Ln_out_bias, None, Elements));
            }
            out.push((Role::W_out, None, RowBlocks(1)));
        }
    }
    out.into_iter()
        .map(|(role, l, action)| {
            Ok(SiteTensor {
                name: arch.tensor_name(role, l)?,
                role,
                action,
            })
        })
        .collect()
}

/// Length of the dimension a site's candidate acts on.
pub fn acted_size(family: Family, arch: &ModelArch) -> usize {
    match family {
        Family::PermHeads => arch.h,
        Family::PermFfn => arch.d_ff,
        Family::PermEmbed => arch.d,
        Family::PermInsideHead => arch.d_k,
        Family::QkProduct => arch.h * arch.d_k / 2,
        Family::ScalingAtt | Family::ScalingFfn => arch.d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn arch(layers: usize) -> ModelArch {
        ModelArch {
            d: 8,
            layers,
            h: 2,
            d_k: 4,
            d_v: 4,
            d_ff: 16,
            vocab: 10,
            norm_kind: NormKind::Rmsnorm,
            activation: Activation::Swiglu,
            positional: Positional::Rotary,
            has_biases: false,
            rotary_base: 10_000.0,
            name_map: default_name_map(),
        }
    }

    #[test]
    fn llama_7b_site_counts() {
        let a = arch(32);
        assert_eq!(resolve_sites(&a, &Family::defaults()).unwrap().len(), 160);
        assert_eq!(resolve_sites(&a, &[Family::QkProduct]).unwrap().len(), 32);
        let embed = resolve_sites(&arch(2), &[Family::PermEmbed]).unwrap();
        assert_eq!(embed, vec![Site { family: Family::PermEmbed, layer: None, ordinal: 0 }]);
    }

    #[test]
    fn ordinals_follow_family_order() {
        let sites = resolve_sites(&arch(3), &[Family::ScalingFfn, Family::PermHeads]).unwrap();
        let seen: Vec<_> = sites.iter().map(|s| (s.family, s.layer, s.ordinal)).collect();
        assert_eq!(seen[0], (Family::ScalingFfn, Some(0), 0));
        assert_eq!(seen[3], (Family::PermHeads, Some(0), 3));
        assert_eq!(seen[5], (Family::PermHeads, Some(2), 5));
    }

    #[test]
    fn rejects_bad_family_combinations() {
        let a = arch(2);
        assert!(resolve_sites(&a, &[Family::PermInsideHead]).is_err());
        assert!(resolve_sites(&a, &[Family::PermHeads, Family::PermHeads]).is_err());
        let mut odd = a.clone();
        odd.positional = Positional::None;
        odd.d_k = 3;
        assert!(resolve_sites(&odd, &[Family::QkProduct]).is_err());
        assert!(resolve_sites(&odd, &[Family::PermInsideHead]).is_ok());
    }

    #[test]
    fn ffn_site_tensors() {
        let mut a = arch(4);
        a.has_biases = true;
        let site = Site { family: Family::PermFfn, layer: Some(3), ordinal: 0 };
        let got: Vec<_> = tensors_for_site(&site, &a)
            .unwrap()
            .into_iter()
            .map(|t| (t.name, t.action))
            .collect();
        assert_eq!(
            got,
            vec![
                ("layers.3.feed_forward.w1.weight".to_string(), AxisAction::ColumnBlocks(1)),
                ("layers.3.feed_forward.w3.weight".to_string(), AxisAction::ColumnBlocks(1)),
                ("layers.3.feed_forward.w2.weight".to_string(), AxisAction::RowBlocks(1)),
                ("layers.3.feed_forward.w1.bias".to_string(), AxisAction::Elements),
            ]
        );
    }

    #[test]
    fn head_site_tensors() {
        let a = arch(1);
        let site = Site { family: Family::PermHeads, layer: Some(0), ordinal: 0 };
        let got: Vec<_> =
            tensors_for_site(&site, &a).unwrap().into_iter().map(|t| (t.role, t.action)).collect();
        assert_eq!(
            got,
            vec![
                (Role::Wq, AxisAction::ColumnBlocks(4)),
                (Role::Wk, AxisAction::ColumnBlocks(4)),
                (Role::Wv, AxisAction::ColumnBlocks(4)),
                (Role::Wo, AxisAction::RowBlocks(4)),
            ]
        );
    }

    #[test]
    fn rmsnorm_scaling_has_no_bias() {
        let a = arch(2);
        let site = Site { family: Family::ScalingAtt, layer: Some(1), ordinal: 0 };
        let got: Vec<_> =
            tensors_for_site(&site, &a).unwrap().into_iter().map(|t| (t.role, t.action)).collect();
        assert_eq!(
            got,
            vec![
                (Role::Ln_att, AxisAction::ScaledElements),
                (Role::Wq, AxisAction::UnscaledRows),
                (Role::Wk, AxisAction::UnscaledRows),
                (Role::Wv, AxisAction::UnscaledRows),
            ]
        );
        let mut ln = a;
        ln.norm_kind = NormKind::Layernorm;
        let roles: Vec<_> = tensors_for_site(&site, &ln).unwrap().into_iter().map(|t| t.role).collect();
        assert!(roles.contains(&Role::Ln_att_bias));
    }

    #[test]
    fn missing_name_map_entry() {
        let mut a = arch(1);
        a.name_map.remove(&Role::W3);
        let site = Site { family: Family::PermFfn, layer: Some(0), ordinal: 0 };
        assert!(matches!(tensors_for_site(&site, &a), Err(Error::Config(_))));
    }

    #[test]
    fn arch_json_field_names() {
        let a = arch(2);
        let json = a.to_json_pretty();
        assert!(json.contains("\"L\": 2"));
        assert!(json.contains("\"norm_kind\": \"rmsnorm\""));
        assert_eq!(ModelArch::from_json_str(&json).unwrap(), a);
        let minimal = r#"{"d":8,"L":1,"h":2,"d_k":4,"d_v":4,"d_ff":16,"vocab":10,
            "norm_kind":"layernorm","activation":"relu","positional":"none","has_biases":true}"#;
        let m = ModelArch::from_json_str(minimal).unwrap();
        assert_eq!(m.rotary_base, 10_000.0);
        assert_eq!(m.name_map, default_name_map());
    }
}
