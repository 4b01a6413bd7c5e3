//! MoE models and domain datasets in the checkpoint container.
//!
//! Model tensors: `embedding`, `config.top_k` (one element), and per block
//! `block.<l>.norm`, `block.<l>.router`, `block.<l>.expert.<e>.{w_in,w_out}`,
//! `block.<l>.shared.<s>.{w_in,w_out}`. Datasets: `domain.<m>.tokens` with
//! shape `(num_sequences, seq_len)`, token ids stored exactly as f32.

use std::path::Path;

use super::{DomainDataset, Expert, MoeConfig, MoeError, MoeLayer, MoeModel};
use crate::checkpoint::{read_checkpoint, take_matrix, take_tensor, take_vector, write_checkpoint, TensorMap};
use crate::tensor::Tensor;

/// Largest integer every f32 represents exactly.
const MAX_EXACT_TOKEN: u32 = 1 << 24;

pub fn moe_model_to_tensors(model: &MoeModel<f32>) -> TensorMap {
    let mut map = TensorMap::new();
    map.insert("embedding".into(), model.embedding.clone().into_tensor());
    map.insert(
        "config.top_k".into(),
        Tensor::from_raw(vec![1], vec![model.config.top_k as f32]),
    );
    for (l, layer) in model.layers.iter().enumerate() {
        map.insert(
            format!("block.{l}.norm"),
            Tensor::from_raw(vec![layer.norm.len()], layer.norm.clone()),
        );
        map.insert(format!("block.{l}.router"), layer.router_w.clone().into_tensor());
        for (kind, experts) in [("expert", &layer.experts), ("shared", &layer.shared_experts)] {
            for (e, ex) in experts.iter().enumerate() {
                map.insert(format!("block.{l}.{kind}.{e}.w_in"), ex.w_in.clone().into_tensor());
                map.insert(format!("block.{l}.{kind}.{e}.w_out"), ex.w_out.clone().into_tensor());
            }
        }
    }
    map
}

fn count_indexed(map: &TensorMap, prefix: &str, suffix: &str) -> usize {
    (0..).take_while(|i| map.contains_key(&format!("{prefix}{i}{suffix}"))).count()
}

/// Rebuilds a model, inferring the configuration from tensor shapes.
pub fn moe_model_from_tensors(map: &TensorMap) -> Result<MoeModel<f32>, MoeError> {
    let embedding = take_matrix(map, "embedding")?;
    let top_k = take_tensor(map, "config.top_k")?;
    let top_k = match top_k.data() {
        [k] if *k >= 1.0 && k.fract() == 0.0 => *k as usize,
        other => return Err(MoeError::InvalidModel(format!("config.top_k holds {other:?}"))),
    };
    let n_layers = count_indexed(map, "block.", ".router");
    if n_layers == 0 {
        return Err(MoeError::InvalidModel("no blocks found".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let router_w = take_matrix(map, &format!("block.{l}.router"))?;
        let norm = take_vector(map, &format!("block.{l}.norm"))?;
        let load = |kind: &str| -> Result<Vec<Expert<f32>>, MoeError> {
            let n = count_indexed(map, &format!("block.{l}.{kind}."), ".w_in");
            (0..n)
                .map(|e| {
                    Ok(Expert {
                        w_in: take_matrix(map, &format!("block.{l}.{kind}.{e}.w_in"))?,
                        w_out: take_matrix(map, &format!("block.{l}.{kind}.{e}.w_out"))?,
                    })
                })
                .collect()
        };
        let experts = load("expert")?;
        let shared_experts = load("shared")?;
        layers.push(MoeLayer {
            router_w,
            experts,
            shared_experts,
            norm,
        });
    }
    let first = &layers[0];
    let d_ff = first
        .experts
        .first()
        .map(|e| e.w_in.rows())
        .ok_or_else(|| MoeError::InvalidModel("block 0 has no routed experts".into()))?;
    let config = MoeConfig {
        vocab_size: embedding.rows(),
        d_model: embedding.cols(),
        d_ff,
        n_layers,
        n_experts: first.router_w.rows(),
        top_k,
        n_shared: first.shared_experts.len(),
    };
    let model = MoeModel {
        config,
        embedding,
        layers,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_moe_model(model: &MoeModel<f32>, path: impl AsRef<Path>) -> Result<(), MoeError> {
    model.validate()?;
    write_checkpoint(&moe_model_to_tensors(model), path)?;
    Ok(())
}

pub fn load_moe_model(path: impl AsRef<Path>) -> Result<MoeModel<f32>, MoeError> {
    moe_model_from_tensors(&read_checkpoint(path)?)
}

pub fn datasets_to_tensors(datasets: &[DomainDataset]) -> Result<TensorMap, MoeError> {
    let mut map = TensorMap::new();
    for ds in datasets {
        let n = ds.sequences.len();
        let len = ds.sequences.first().map_or(0, Vec::len);
        if n == 0 || len == 0 || ds.sequences.iter().any(|s| s.len() != len) {
            return Err(MoeError::InvalidDataset(format!(
                "domain {} must hold non-empty sequences of equal length",
                ds.domain
            )));
        }
        if ds.sequences.iter().flatten().any(|&t| t > MAX_EXACT_TOKEN) {
            return Err(MoeError::InvalidDataset("token id too large for f32 storage".into()));
        }
        let data = ds.sequences.iter().flatten().map(|&t| t as f32).collect();
        let name = format!("domain.{}.tokens", ds.domain);
        if map.insert(name, Tensor::from_raw(vec![n, len], data)).is_some() {
            return Err(MoeError::InvalidDataset(format!("domain {} appears twice", ds.domain)));
        }
    }
    Ok(map)
}

pub fn save_datasets(datasets: &[DomainDataset], path: impl AsRef<Path>) -> Result<(), MoeError> {
    write_checkpoint(&datasets_to_tensors(datasets)?, path)?;
    Ok(())
}

/// Reads every `domain.<m>.tokens` tensor, ordered by domain index.
pub fn load_datasets(path: impl AsRef<Path>) -> Result<Vec<DomainDataset>, MoeError> {
    let map = read_checkpoint(path)?;
    let mut out = Vec::new();
    for (name, t) in &map {
        let parts: Vec<&str> = name.split('.').collect();
        let domain = match parts.as_slice() {
            ["domain", m, "tokens"] => m
                .parse::<usize>()
                .map_err(|_| MoeError::InvalidDataset(format!("bad domain index in {name:?}")))?,
            _ => continue,
        };
        if t.rank() != 2 {
            return Err(MoeError::InvalidDataset(format!("{name} must be rank 2")));
        }
        let len = t.shape()[1];
        let mut sequences = Vec::with_capacity(t.shape()[0]);
        for row in t.data().chunks(len) {
            let seq = row
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v <= MAX_EXACT_TOKEN as f32 {
                        Ok(v as u32)
                    } else {
                        Err(MoeError::InvalidDataset(format!("{name} holds non-token value {v}")))
                    }
                })
                .collect::<Result<Vec<u32>, _>>()?;
            sequences.push(seq);
        }
        out.push(DomainDataset { domain, sequences });
    }
    if out.is_empty() {
        return Err(MoeError::InvalidDataset("no domain.<m>.tokens tensors".into()));
    }
    out.sort_by_key(|d| d.domain);
    Ok(out)
}
