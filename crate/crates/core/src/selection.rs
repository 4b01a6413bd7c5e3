//! Cross-domain expert statistics and common-expert selection.
//!
//! Per layer, `P[i, m]` is the share of routing slots on domain `m` that went
//! to expert `i`. An expert's score is its mean activation `A_i` minus its
//! mean absolute deviation across domains `C_i`; the `n` best scores win,
//! with ties going to the lower expert index. Shared experts, when present,
//! are taken first without scoring.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moe::ActivationLogRecord;
use crate::tensor::Matrix;

pub const DEFAULT_N_SELECTED: usize = 8;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("domain {domain} has no tokens at layer {layer}")]
    EmptyDomain { layer: usize, domain: usize },
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("record routes {got} experts, expected top_k = {expected}")]
    WrongRouteCount { got: usize, expected: usize },
    #[error("cannot select {n} experts: {shared} shared experts must all be included")]
    TooManyShared { n: usize, shared: usize },
    #[error("invalid selection request: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed selection report: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-layer activation counts and probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    pub n_layers: usize,
    pub n_experts: usize,
    pub n_domains: usize,
    pub top_k: usize,
    /// Per layer, `n_experts × n_domains` probabilities.
    pub p: Vec<Matrix<f64>>,
    /// Per layer, row-major `n_experts × n_domains` raw counts.
    pub counts: Vec<Vec<u64>>,
    /// Per layer, tokens seen per domain.
    pub tokens: Vec<Vec<u64>>,
}

impl ActivationProfile {
    /// Tokens per domain at layer 0 (every layer sees the same tokens for a
    /// log produced by [`crate::moe::run_profiling`]).
    pub fn tokens_per_domain(&self) -> &[u64] {
        &self.tokens[0]
    }

    pub fn count(&self, layer: usize, expert: usize, domain: usize) -> u64 {
        self.counts[layer][expert * self.n_domains + domain]
    }
}

/// Tallies a routing log into per-layer probabilities `P = counts / (K · tokens)`.
pub fn build_profile(
    log: &[ActivationLogRecord],
    n_layers: usize,
    n_experts: usize,
    n_domains: usize,
    top_k: usize,
) -> Result<ActivationProfile, SelectionError> {
    if n_layers == 0 || n_experts == 0 || n_domains == 0 || top_k == 0 || top_k > n_experts {
        return Err(SelectionError::Invalid(format!(
            "dims N={n_experts} M={n_domains} L={n_layers} K={top_k}"
        )));
    }
    let mut counts = vec![vec![0u64; n_experts * n_domains]; n_layers];
    let mut tokens = vec![vec![0u64; n_domains]; n_layers];
    for rec in log {
        let check = |what, index, limit| {
            if index < limit {
                Ok(())
            } else {
                Err(SelectionError::IndexOutOfRange { what, index, limit })
            }
        };
        check("layer", rec.layer, n_layers)?;
        check("domain", rec.domain, n_domains)?;
        if rec.expert_ids.len() != top_k {
            return Err(SelectionError::WrongRouteCount {
                got: rec.expert_ids.len(),
                expected: top_k,
            });
        }
        for &e in &rec.expert_ids {
            check("expert", e, n_experts)?;
            counts[rec.layer][e * n_domains + rec.domain] += 1;
        }
        tokens[rec.layer][rec.domain] += 1;
    }
    let mut p = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        if let Some(domain) = tokens[layer].iter().position(|&t| t == 0) {
            return Err(SelectionError::EmptyDomain { layer, domain });
        }
        let c = &counts[layer];
        let t = &tokens[layer];
        p.push(Matrix::from_fn(n_experts, n_domains, |i, m| {
            c[i * n_domains + m] as f64 / (top_k as f64 * t[m] as f64)
        }));
    }
    Ok(ActivationProfile {
        n_layers,
        n_experts,
        n_domains,
        top_k,
        p,
        counts,
        tokens,
    })
}

/// `A_i = (1/M) Σ_m P[i, m]`.
pub fn average_activation(p: &Matrix<f64>) -> Vec<f64> {
    let m = p.cols() as f64;
    (0..p.rows())
        .map(|i| p.row(i).iter().sum::<f64>() / m)
        .collect()
}

/// `C_i = (1/M) Σ_m |P[i, m] − A_i|`.
pub fn consistency_score(p: &Matrix<f64>, a: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), p.rows(), "one mean per expert");
    let m = p.cols() as f64;
    (0..p.rows())
        .map(|i| p.row(i).iter().map(|&x| (x - a[i]).abs()).sum::<f64>() / m)
        .collect()
}

/// Selection outcome for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    /// `a − c`; recomputed on load.
    #[serde(skip)]
    pub score: Vec<f64>,
    /// Routed experts chosen by score, ascending.
    pub selected: Vec<usize>,
    /// Shared experts included unconditionally, ascending.
    pub shared_included: Vec<usize>,
}

impl LayerSelection {
    pub fn total_selected(&self) -> usize {
        self.selected.len() + self.shared_included.len()
    }
}

/// Indices of the `n` largest scores (ties to the lower index), ascending.
pub fn top_n_by_score(score: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(n).collect();
    picked.sort_unstable();
    picked
}

/// Picks `n` common experts for one layer: every shared id first, then the
/// best `n − |shared|` routed experts by `A − C`.
pub fn select_common_experts(
    profile: &ActivationProfile,
    layer: usize,
    n: usize,
    shared_ids: &[usize],
) -> Result<LayerSelection, SelectionError> {
    if layer >= profile.n_layers {
        return Err(SelectionError::IndexOutOfRange {
            what: "layer",
            index: layer,
            limit: profile.n_layers,
        });
    }
    if n == 0 || n > profile.n_experts {
        return Err(SelectionError::Invalid(format!(
            "n must be in 1..={}, got {n}",
            profile.n_experts
        )));
    }
    let mut shared = shared_ids.to_vec();
    shared.sort_unstable();
    shared.dedup();
    if shared.len() > n {
        return Err(SelectionError::TooManyShared {
            n,
            shared: shared.len(),
        });
    }
    let p = &profile.p[layer];
    let a = average_activation(p);
    let c = consistency_score(p, &a);
    let score: Vec<f64> = a.iter().zip(&c).map(|(a, c)| a - c).collect();
    let selected = top_n_by_score(&score, n - shared.len());
    Ok(LayerSelection {
        layer,
        a,
        c,
        score,
        selected,
        shared_included: shared,
    })
}

/// Selections for every layer, serialized as
/// `{"layers": [{"layer", "a", "c", "selected", "shared_included"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub layers: Vec<LayerSelection>,
}

impl SelectionReport {
    pub fn build(profile: &ActivationProfile, n: usize, shared_ids: &[usize]) -> Result<Self, SelectionError> {
        let layers = (0..profile.n_layers)
            .map(|l| select_common_experts(profile, l, n, shared_ids))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerSelection> {
        self.layers.iter().find(|s| s.layer == layer)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SelectionError> {
        let mut report: Self = serde_json::from_str(text)?;
        for l in &mut report.layers {
            if l.a.len() != l.c.len() {
                return Err(SelectionError::Invalid(format!(
                    "layer {} has {} averages but {} consistency scores",
                    l.layer,
                    l.a.len(),
                    l.c.len()
                )));
            }
            l.score = l.a.iter().zip(&l.c).map(|(a, c)| a - c).collect();
        }
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SelectionError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SelectionError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
