//! Desk-scale mixture-of-experts engine.
//!
//! A block is `x ← x + moe(rmsnorm(x))` with no attention; the router is a
//! linear map followed by softmax and top-K selection, optional shared
//! experts bypass the router. Profiling runs every token through every block
//! and records which routed experts fired.

mod log;
mod persist;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::log::{load_activation_log, parse_activation_log, save_activation_log, write_activation_log, ActivationLogRecord};
pub use self::persist::{load_datasets, load_moe_model, save_datasets, save_moe_model, datasets_to_tensors, moe_model_from_tensors, moe_model_to_tensors};

use crate::checkpoint::CheckpointError;
use crate::scalar::{gelu, Scalar};
use crate::tensor::Matrix;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("invalid MoE configuration: {0}")]
    InvalidConfig(String),
    #[error("token {token} at domain {domain}, sequence {sequence}, position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfVocabulary {
        domain: usize,
        sequence: usize,
        position: usize,
        token: u32,
        vocab: usize,
    },
    #[error("activation log line {line}: {message}")]
    MalformedLog { line: usize, message: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    #[serde(default)]
    pub n_shared: usize,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<(), MoeError> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(MoeError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(MoeError::InvalidConfig(format!(
                "top_k must be in 1..={}, got {}",
                self.n_experts, self.top_k
            )));
        }
        Ok(())
    }

    /// Total parameter count of a model with this configuration.
    pub fn param_count(&self) -> usize {
        let expert = 2 * self.d_model * self.d_ff;
        let layer = self.n_experts * self.d_model
            + (self.n_experts + self.n_shared) * expert
            + self.d_model;
        self.vocab_size * self.d_model + self.n_layers * layer
    }
}

/// Two-projection FFN: `w_out · gelu(w_in · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T> {
    /// `d_ff × d_model`.
    pub w_in: Matrix<T>,
    /// `d_model × d_ff`.
    pub w_out: Matrix<T>,
}

impl<T: Scalar> Expert<T> {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self.w_in.matvec(x).into_iter().map(gelu).collect();
        self.w_out.matvec(&hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer<T> {
    /// `n_experts × d_model` gating weights.
    pub router_w: Matrix<T>,
    pub experts: Vec<Expert<T>>,
    pub shared_experts: Vec<Expert<T>>,
    /// RMSNorm gains, length `d_model`.
    pub norm: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel<T> {
    pub config: MoeConfig,
    /// `vocab × d_model`; the output head is tied to it.
    pub embedding: Matrix<T>,
    pub layers: Vec<MoeLayer<T>>,
}

impl<T: Scalar> MoeModel<T> {
    /// Checks every shape against the configuration.
    pub fn validate(&self) -> Result<(), MoeError> {
        let c = &self.config;
        c.validate()?;
        let bad = |what: String| Err(MoeError::InvalidModel(what));
        if self.embedding.shape() != (c.vocab_size, c.d_model) {
            return bad(format!("embedding is {:?}", self.embedding.shape()));
        }
        if self.layers.len() != c.n_layers {
            return bad(format!("{} layers, config says {}", self.layers.len(), c.n_layers));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.router_w.shape() != (c.n_experts, c.d_model) {
                return bad(format!("block {l} router is {:?}", layer.router_w.shape()));
            }
            if layer.norm.len() != c.d_model {
                return bad(format!("block {l} norm has length {}", layer.norm.len()));
            }
            if layer.experts.len() != c.n_experts || layer.shared_experts.len() != c.n_shared {
                return bad(format!("block {l} has the wrong number of experts"));
            }
            for e in layer.experts.iter().chain(&layer.shared_experts) {
                if e.w_in.shape() != (c.d_ff, c.d_model) || e.w_out.shape() != (c.d_model, c.d_ff) {
                    return bad(format!("block {l} has a mis-shaped expert"));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MoeModel<U> {
        let cast_expert = |e: &Expert<T>| Expert {
            w_in: e.w_in.cast(),
            w_out: e.w_out.cast(),
        };
        MoeModel {
            config: self.config,
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| MoeLayer {
                    router_w: l.router_w.cast(),
                    experts: l.experts.iter().map(cast_expert).collect(),
                    shared_experts: l.shared_experts.iter().map(cast_expert).collect(),
                    norm: l.norm.iter().map(|&g| U::from_f64_lossy(g.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Residual stream after every block for one token, with each block's routed ids.
    pub fn forward_token(&self, token: usize) -> (Vec<f64>, Vec<Vec<usize>>) {
        let mut x: Vec<f64> = self.embedding.row(token).iter().map(|v| v.as_f64()).collect();
        let mut routed = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = rms_norm(&x, &layer.norm);
            let (y, ids) = moe_layer_forward(layer, &h, self.config.top_k);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
            routed.push(ids);
        }
        (x, routed)
    }
}

/// `x / sqrt(mean(x²) + ε) ⊙ gain`.
pub fn rms_norm<T: Scalar>(x: &[f64], gain: &[T]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g.as_f64()).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Top-`k` softmax gating. Returns `(expert_id, g_i)` sorted by id; ties at
/// the selection boundary go to the lower id.
pub fn gate<T: Scalar>(router_w: &Matrix<T>, x: &[f64], k: usize) -> Vec<(usize, f64)> {
    let probs = softmax(&router_w.matvec(x));
    let k = k.clamp(1, probs.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut chosen: Vec<(usize, f64)> = order[..k].iter().map(|&i| (i, probs[i])).collect();
    chosen.sort_by_key(|&(i, _)| i);
    chosen
}

/// `y = Σ_{i∈topK} g_i·E_i(x) + Σ_s E_s(x)` and the routed ids.
pub fn moe_layer_forward<T: Scalar>(layer: &MoeLayer<T>, x: &[f64], top_k: usize) -> (Vec<f64>, Vec<usize>) {
    let routes = gate(&layer.router_w, x, top_k);
    let mut y = vec![0.0; x.len()];
    for &(id, g) in &routes {
        for (acc, v) in y.iter_mut().zip(layer.experts[id].forward(x)) {
            *acc += g * v;
        }
    }
    for shared in &layer.shared_experts {
        for (acc, v) in y.iter_mut().zip(shared.forward(x)) {
            *acc += v;
        }
    }
    (y, routes.into_iter().map(|(id, _)| id).collect())
}

/// Pre-tokenized sequences from one knowledge domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain: usize,
    pub sequences: Vec<Vec<u32>>,
}

impl DomainDataset {
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Routes every token of every dataset through all blocks.
///
/// Records come out in (dataset, sequence, position, layer) order regardless
/// of how the work is scheduled.
pub fn run_profiling<T: Scalar>(
    model: &MoeModel<T>,
    datasets: &[DomainDataset],
) -> Result<Vec<ActivationLogRecord>, MoeError> {
    let vocab = model.config.vocab_size;
    for ds in datasets {
        for (s, seq) in ds.sequences.iter().enumerate() {
            if let Some((p, &tok)) = seq.iter().enumerate().find(|(_, &t)| t as usize >= vocab) {
                return Err(MoeError::TokenOutOfVocabulary {
                    domain: ds.domain,
                    sequence: s,
                    position: p,
                    token: tok,
                    vocab,
                });
            }
        }
    }
    let jobs: Vec<(usize, &[u32])> = datasets
        .iter()
        .flat_map(|ds| ds.sequences.iter().map(move |s| (ds.domain, s.as_slice())))
        .collect();
    let per_sequence: Vec<Vec<ActivationLogRecord>> = jobs
        .par_iter()
        .map(|&(domain, seq)| {
            let mut out = Vec::with_capacity(seq.len() * model.layers.len());
            for &tok in seq {
                let (_, routed) = model.forward_token(tok as usize);
                for (layer, expert_ids) in routed.into_iter().enumerate() {
                    out.push(ActivationLogRecord {
                        layer,
                        domain,
                        expert_ids,
                    });
                }
            }
            out
        })
        .collect();
    Ok(per_sequence.into_iter().flatten().collect())
}
