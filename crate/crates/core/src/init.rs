//! Dense target-model initialization: FFN weights from adapted packs, every
//! other parameter drawn from a generator keyed by `(seed, parameter name)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adaptation::{adapt, reconstruct_gamma, AdaptationError, AdaptationSpec, AdaptedMatrix, SvdRank};
use crate::checkpoint::{read_checkpoint, take_matrix, take_vector, write_checkpoint, CheckpointError, TensorMap};
use crate::consolidation::{ConsolidatedKnowledge, ConsolidationError, ProjectionId};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor};

#[derive(Debug, Error)]
pub enum InitError {
    #[error("target has {target} layers but the source only {source_layers}")]
    TooDeep { source_layers: usize, target: usize },
    #[error("invalid dense config: {0}")]
    InvalidConfig(String),
    #[error("invalid dense model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Consolidation(#[from] ConsolidationError),
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DenseConfig {
    pub fn validate(&self) -> Result<(), InitError> {
        if self.n_layers == 0 {
            return Err(InitError::InvalidConfig("n_layers must be at least 1".into()));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(InitError::InvalidConfig("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// `(d_in, d_out)` of a projection in (input, output) orientation.
    pub fn projection_dims(&self, projection: ProjectionId) -> (usize, usize) {
        match projection {
            ProjectionId::WIn => (self.d_model, self.d_ff),
            ProjectionId::WOut => (self.d_ff, self.d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    /// `d_ff × d_model`.
    pub w_in: Matrix<T>,
    /// `d_model × d_ff`.
    pub w_out: Matrix<T>,
    pub norm: Vec<T>,
}

/// Embedding, FFN-only residual blocks, output head tied to the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel<T> {
    pub embedding: Matrix<T>,
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> DenseModel<T> {
    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn d_model(&self) -> usize {
        self.embedding.cols()
    }

    pub fn d_ff(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w_in.rows())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<(), InitError> {
        let (d, f) = (self.d_model(), self.d_ff());
        if self.layers.is_empty() || d == 0 || self.vocab_size() == 0 {
            return Err(InitError::InvalidModel("empty model".into()));
        }
        for (t, l) in self.layers.iter().enumerate() {
            if l.w_in.shape() != (f, d) || l.w_out.shape() != (d, f) || l.norm.len() != d {
                return Err(InitError::InvalidModel(format!("block {t} has inconsistent shapes")));
            }
            if !l.w_in.all_finite() || !l.w_out.all_finite() || l.norm.iter().any(|v| !v.is_finite()) {
                return Err(InitError::InvalidModel(format!("block {t} holds non-finite values")));
            }
        }
        if !self.embedding.all_finite() {
            return Err(InitError::InvalidModel("embedding holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DenseModel<U> {
        DenseModel {
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    w_in: l.w_in.cast(),
                    w_out: l.w_out.cast(),
                    norm: l.norm.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.embedding.data().len()
            + self
                .layers
                .iter()
                .map(|l| l.w_in.data().len() + l.w_out.data().len() + l.norm.len())
                .sum::<usize>()
    }
}

/// Source layer feeding each target layer: the first `n_target` in order.
pub fn map_layers(n_source: usize, n_target: usize) -> Result<Vec<usize>, InitError> {
    if n_target == 0 {
        return Err(InitError::InvalidConfig("n_layers must be at least 1".into()));
    }
    if n_target > n_source {
        return Err(InitError::TooDeep {
            source_layers: n_source,
            target: n_target,
        });
    }
    Ok((0..n_target).collect())
}

/// ChaCha8 stream seeded with `SHA-256(seed as LE bytes ‖ name)`.
pub fn keyed_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `rows × cols` uniform on `(−b, b)`, `b = √(6/(rows+cols))`.
pub fn xavier_uniform<T: Scalar>(seed: u64, name: &str, rows: usize, cols: usize) -> Matrix<T> {
    let b = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = keyed_rng(seed, name);
    Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.random_range(-b..b)))
}

fn embedding_name() -> &'static str {
    "embedding"
}

pub fn ffn_name(layer: usize, projection: ProjectionId) -> String {
    format!("block.{layer}.ffn.{projection}")
}

fn norm_name(layer: usize) -> String {
    format!("block.{layer}.norm")
}

/// Every parameter random; norms are 1.
pub fn random_init<T: Scalar>(cfg: &DenseConfig) -> Result<DenseModel<T>, InitError> {
    cfg.validate()?;
    let layers = (0..cfg.n_layers)
        .map(|t| DenseLayer {
            w_in: xavier_uniform(cfg.seed, &ffn_name(t, ProjectionId::WIn), cfg.d_ff, cfg.d_model),
            w_out: xavier_uniform(cfg.seed, &ffn_name(t, ProjectionId::WOut), cfg.d_model, cfg.d_ff),
            norm: vec![T::one(); cfg.d_model],
        })
        .collect();
    Ok(DenseModel {
        embedding: xavier_uniform(cfg.seed, embedding_name(), cfg.vocab_size, cfg.d_model),
        layers,
    })
}

/// Adapted `(input, output)` matrix built from one source layer's pack.
pub fn adapted_projection<T: Scalar>(
    ck: &ConsolidatedKnowledge<T>,
    source_layer: usize,
    projection: ProjectionId,
    cfg: &DenseConfig,
    svd_rank: SvdRank,
) -> Result<AdaptedMatrix<T>, InitError> {
    let entry = ck.get(source_layer, projection)?;
    let gamma = reconstruct_gamma(&entry.pack);
    let (d_in, d_out) = cfg.projection_dims(projection);
    let mut adapted = adapt(&gamma, &AdaptationSpec::new(d_in, d_out, svd_rank))?;
    adapted.provenance.layer = Some(source_layer);
    adapted.provenance.projection = Some(projection);
    Ok(adapted)
}

/// FFN weights from the packs of the mapped source layers, the rest as in
/// [`random_init`] with the same seed.
pub fn emit_initialization<T: Scalar>(
    ck: &ConsolidatedKnowledge<T>,
    cfg: &DenseConfig,
    svd_rank: SvdRank,
) -> Result<DenseModel<T>, InitError> {
    let mapping = map_layers(ck.n_layers(), cfg.n_layers)?;
    let mut model = random_init::<T>(cfg)?;
    for (t, &src) in mapping.iter().enumerate() {
        let layer = &mut model.layers[t];
        layer.w_in = adapted_projection(ck, src, ProjectionId::WIn, cfg, svd_rank)?.m_hat.transpose();
        layer.w_out = adapted_projection(ck, src, ProjectionId::WOut, cfg, svd_rank)?.m_hat.transpose();
    }
    model.validate()?;
    Ok(model)
}

pub fn dense_model_to_tensors(model: &DenseModel<f32>) -> TensorMap {
    let mut map = TensorMap::new();
    map.insert(embedding_name().into(), model.embedding.clone().into_tensor());
    for (t, l) in model.layers.iter().enumerate() {
        map.insert(ffn_name(t, ProjectionId::WIn), l.w_in.clone().into_tensor());
        map.insert(ffn_name(t, ProjectionId::WOut), l.w_out.clone().into_tensor());
        map.insert(norm_name(t), Tensor::from_raw(vec![l.norm.len()], l.norm.clone()));
    }
    map
}

pub fn dense_model_from_tensors(map: &TensorMap) -> Result<DenseModel<f32>, InitError> {
    let embedding = take_matrix(map, embedding_name())?;
    let n = (0..).take_while(|t| map.contains_key(&norm_name(*t))).count();
    let layers = (0..n)
        .map(|t| {
            Ok(DenseLayer {
                w_in: take_matrix(map, &ffn_name(t, ProjectionId::WIn))?,
                w_out: take_matrix(map, &ffn_name(t, ProjectionId::WOut))?,
                norm: take_vector(map, &norm_name(t))?,
            })
        })
        .collect::<Result<Vec<_>, InitError>>()?;
    let model = DenseModel { embedding, layers };
    model.validate()?;
    Ok(model)
}

pub fn save_dense_model(model: &DenseModel<f32>, path: impl AsRef<Path>) -> Result<(), InitError> {
    model.validate()?;
    write_checkpoint(&dense_model_to_tensors(model), path)?;
    Ok(())
}

pub fn load_dense_model(path: impl AsRef<Path>) -> Result<DenseModel<f32>, InitError> {
    dense_model_from_tensors(&read_checkpoint(path)?)
}
