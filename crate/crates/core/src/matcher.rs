//! Matching extracted identifiers against a registry of distributed copies.
//!
//! For a random model, each extracted chunk agrees with a given identifier
//! with probability `p = 2^-k`, so the number of agreeing chunks is
//! `Bin(m, p)`. Seeing at most `s` errors has probability
//! `I_p(m−s, s+1) = P(Bin(m, p) ≥ m−s)`, the regularized incomplete beta
//! function evaluated here as an exact binomial tail in the log domain.
//! Accounting for `N` registered identifiers gives
//! `p-value = 1 − (1 − I_p(m−s, s+1))^N`.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Message, MAX_K};
use crate::error::{Error, Result};

/// Default significance threshold for declaring a match.
pub const DEFAULT_P_THRESHOLD: f64 = 1e-6;

/// Number of differing chunks.
pub fn chunk_errors(extracted: &Message, identifier: &Message) -> Result<usize> {
    if extracted.len() != identifier.len() {
        return Err(Error::Input(format!(
            "messages have {} and {} chunks",
            extracted.len(),
            identifier.len()
        )));
    }
    Ok(extracted
        .chunks
        .iter()
        .zip(&identifier.chunks)
        .filter(|(a, b)| a != b)
        .count())
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|&t| (t - max).exp()).sum::<f64>().ln()
}

/// `ln P(Bin(m, p) = j)` for `j = 0..=m`.
fn ln_binomial_pmf(m: usize, ln_p: f64, ln_q: f64) -> Vec<f64> {
    let mut ln_fact = Vec::with_capacity(m + 1);
    ln_fact.push(0.0);
    for i in 1..=m {
        ln_fact.push(ln_fact[i - 1] + (i as f64).ln());
    }
    (0..=m)
        .map(|j| ln_fact[m] - ln_fact[j] - ln_fact[m - j] + j as f64 * ln_p + (m - j) as f64 * ln_q)
        .collect()
}

/// Natural logs of the upper tail `P(Bin(m,p) ≥ t)` and the lower tail
/// `P(Bin(m,p) < t)`.
fn ln_tails(m: usize, t: usize, k: u32) -> (f64, f64) {
    let p = (-(k as f64)).exp2();
    let pmf = ln_binomial_pmf(m, p.ln(), (-p).ln_1p());
    (log_sum_exp(&pmf[t..]), log_sum_exp(&pmf[..t]))
}

/// `log10` of the probability that a random identifier among `n_models`
/// shows at most `s` chunk errors out of `m`, for `k`-bit chunks.
pub fn pvalue(s: usize, m: usize, k: u32, n_models: u64) -> Result<f64> {
    if s > m {
        return Err(Error::Domain(format!("{s} errors out of {m} chunks")));
    }
    if !(1..=MAX_K).contains(&k) {
        return Err(Error::Domain(format!("k must lie in 1..={MAX_K}, got {k}")));
    }
    if n_models == 0 {
        return Err(Error::Domain("the registry size N must be at least 1".into()));
    }
    let n = n_models as f64;
    // x = I_p(m−s, s+1); I_p(0, ·) = 1.
    let (ln_x, ln_one_minus_x) = ln_tails(m, m - s, k);
    if ln_one_minus_x == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let x = ln_x.exp();
    let ln_p = if x < 1e-12 {
        // 1 − (1−x)^N = N·x·(1 − (N−1)·x/2 + …)
        n.ln() + ln_x + (-(n - 1.0) * x / 2.0).ln_1p()
    } else {
        let ln_q = if x < 0.5 { (-x).ln_1p() } else { ln_one_minus_x };
        let t = n * ln_q;
        if t > -std::f64::consts::LN_2 {
            (-t.exp_m1()).ln()
        } else {
            (-t.exp()).ln_1p()
        }
    };
    Ok((ln_p / std::f64::consts::LN_10).min(0.0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub model_id: String,
    pub identifier: Message,
}

#[derive(Serialize, Deserialize)]
struct RegistryLine {
    model_id: String,
    identifier: String,
    #[serde(default = "default_line_k")]
    k: u32,
}

fn default_line_k() -> u32 {
    8
}

impl RegistryEntry {
    pub fn to_json_line(&self) -> String {
        let line = RegistryLine {
            model_id: self.model_id.clone(),
            identifier: self.identifier.to_string(),
            k: self.identifier.k,
        };
        serde_json::to_string(&line).expect("registry line")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let raw: RegistryLine =
            serde_json::from_str(line).map_err(|e| Error::json("registry line", e))?;
        Ok(Self {
            identifier: Message::parse(&raw.identifier, raw.k)?,
            model_id: raw.model_id,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    pub entries: Vec<RegistryEntry>,
}

impl Registry {
    pub fn new(entries: Vec<RegistryEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads a JSON-lines registry; blank lines are skipped.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                entries.push(RegistryEntry::from_json_line(&line)?);
            }
        }
        Ok(Self { entries })
    }

    /// Appends one line; the file is created if needed.
    pub fn append_jsonl(path: impl AsRef<Path>, entry: &RegistryEntry) -> Result<()> {
        let path = path.as_ref();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", entry.to_json_line()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub best_model_id: String,
    pub s: usize,
    pub m: usize,
    pub k: u32,
    pub n_models: usize,
    pub log10_pvalue: f64,
    pub p_threshold: f64,
    pub matched: bool,
}

/// Best registry entry for `extracted` and whether it is significant.
pub fn match_registry(extracted: &Message, registry: &Registry, p_threshold: f64) -> Result<MatchReport> {
    let first = registry
        .entries
        .first()
        .ok_or_else(|| Error::Input("registry is empty".into()))?;
    let (m, k) = (first.identifier.len(), first.identifier.k);
    if registry
        .entries
        .iter()
        .any(|e| e.identifier.len() != m || e.identifier.k != k)
    {
        return Err(Error::Input("registry mixes identifier lengths or chunk widths".into()));
    }
    if extracted.k != k {
        return Err(Error::Input(format!(
            "extracted message uses k={}, registry uses k={k}",
            extracted.k
        )));
    }
    if !(p_threshold > 0.0 && p_threshold <= 1.0) {
        return Err(Error::Domain(format!("p threshold {p_threshold} outside (0, 1]")));
    }
    let mut best: Option<(usize, &RegistryEntry)> = None;
    for entry in &registry.entries {
        let s = chunk_errors(extracted, &entry.identifier)?;
        if best.is_none_or(|(b, _)| s < b) {
            best = Some((s, entry));
        }
    }
    let (s, entry) = best.expect("registry is nonempty");
    let log10_pvalue = pvalue(s, m, k, registry.len() as u64)?;
    Ok(MatchReport {
        best_model_id: entry.model_id.clone(),
        s,
        m,
        k,
        n_models: registry.len(),
        log10_pvalue,
        p_threshold,
        matched: log10_pvalue <= p_threshold.log10(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn msg(chunks: &[u32]) -> Message {
        Message::new(8, chunks.to_vec()).unwrap()
    }

    #[test]
    fn chunk_error_counts() {
        assert_eq!(chunk_errors(&msg(&[1, 2, 3]), &msg(&[1, 2, 3])).unwrap(), 0);
        assert_eq!(chunk_errors(&msg(&[1, 2]), &msg(&[3, 4])).unwrap(), 2);
        assert_eq!(chunk_errors(&msg(&[1, 2, 3, 4]), &msg(&[1, 0, 3, 0])).unwrap(), 2);
        assert!(chunk_errors(&msg(&[1]), &msg(&[1, 2])).is_err());
    }

    #[test]
    fn pvalue_edges() {
        assert_eq!(pvalue(64, 64, 8, 1).unwrap(), 0.0);
        // P(Bin(2, 1/2) ≥ 2) = 1/4
        assert!((pvalue(0, 2, 1, 1).unwrap() - 0.25f64.log10()).abs() < 1e-14);
        assert!(pvalue(65, 64, 8, 1).is_err());
        assert!(pvalue(0, 64, 8, 0).is_err());
    }

    #[test]
    fn perfect_match_does_not_underflow() {
        let expected = 64.0 * (1.0f64 / 256.0).log10();
        let got = pvalue(0, 64, 8, 1).unwrap();
        assert!((got - expected).abs() <= 1e-10 * expected.abs(), "{got}");
        assert!(pvalue(0, 256, 16, 1).unwrap() < -1000.0);
    }

    #[test]
    fn eight_of_sixty_four_bytes() {
        let p = 10f64.powf(pvalue(56, 64, 8, 100).unwrap());
        assert!((1e-8..=3e-8).contains(&p), "{p}");
    }

    #[test]
    fn monotone_in_errors_and_models() {
        for k in [1, 4, 8] {
            let mut prev = f64::NEG_INFINITY;
            for s in 0..=64 {
                let v = pvalue(s, 64, k, 10).unwrap();
                assert!(v >= prev, "k={k} s={s}");
                assert!(pvalue(s, 64, k, 11).unwrap() >= v);
                prev = v;
            }
        }
    }

    #[test]
    fn match_picks_first_minimum() {
        let reg = Registry::new(vec![
            RegistryEntry { model_id: "a".into(), identifier: msg(&[1, 2, 3, 4]) },
            RegistryEntry { model_id: "b".into(), identifier: msg(&[1, 2, 0, 0]) },
            RegistryEntry { model_id: "c".into(), identifier: msg(&[0, 0, 3, 4]) },
        ]);
        let r = match_registry(&msg(&[1, 2, 3, 4]), &reg, 0.5).unwrap();
        assert_eq!((r.best_model_id.as_str(), r.s), ("a", 0));
        let tie = match_registry(&msg(&[1, 2, 3, 9]), &reg, 0.5).unwrap();
        assert_eq!((tie.best_model_id.as_str(), tie.s), ("a", 1));
    }

    #[test]
    fn single_entry_all_wrong_is_no_match() {
        let reg = Registry::new(vec![RegistryEntry { model_id: "x".into(), identifier: msg(&[1, 1]) }]);
        let r = match_registry(&msg(&[2, 2]), &reg, DEFAULT_P_THRESHOLD).unwrap();
        assert_eq!(r.s, 2);
        assert_eq!(r.log10_pvalue, 0.0);
        assert!(!r.matched);
    }

    #[test]
    fn clean_match_is_significant() {
        let mut rng = SplitMix64::new(1);
        let entries: Vec<_> = (0..10)
            .map(|i| RegistryEntry { model_id: format!("m{i}"), identifier: Message::random(8, 64, &mut rng) })
            .collect();
        let target = entries[7].identifier.clone();
        let r = match_registry(&target, &Registry::new(entries), DEFAULT_P_THRESHOLD).unwrap();
        assert_eq!((r.best_model_id.as_str(), r.s, r.matched), ("m7", 0, true));
    }

    #[test]
    fn mixed_registry_rejected() {
        let reg = Registry::new(vec![
            RegistryEntry { model_id: "a".into(), identifier: msg(&[1, 2]) },
            RegistryEntry { model_id: "b".into(), identifier: msg(&[1, 2, 3]) },
        ]);
        assert!(match_registry(&msg(&[1, 2]), &reg, 1e-6).is_err());
        assert!(match_registry(&msg(&[1]), &Registry::default(), 1e-6).is_err());
    }

    #[test]
    fn registry_lines_round_trip() {
        let e = RegistryEntry { model_id: "copy-7".into(), identifier: msg(&[0xab, 0x01]) };
        let line = e.to_json_line();
        assert_eq!(line, r#"{"model_id":"copy-7","identifier":"ab01","k":8}"#);
        assert_eq!(RegistryEntry::from_json_line(&line).unwrap(), e);
        let bare = RegistryEntry::from_json_line(r#"{"model_id":"copy-7","identifier":"ab01"}"#).unwrap();
        assert_eq!(bare, e);
    }
}
