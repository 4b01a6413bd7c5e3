//! Stacks selected experts' projection matrices into `Z ∈ R^{d_i×d_o×n}` and
//! compresses each `(layer, projection)` tensor into a Tucker pack.
//!
//! Matrices are oriented `(input-dim, output-dim)` at stacking time: both
//! projections are stored as `(out, in)`, so every slice is the transposed
//! storage matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{read_checkpoint, take_matrix, take_tensor, write_checkpoint, CheckpointError, TensorMap};
use crate::moe::{MoeConfig, MoeModel};
use crate::scalar::Scalar;
use crate::selection::{LayerSelection, SelectionReport};
use crate::tensor::{Tensor, TensorError};
use crate::tucker::{pack_param_count, tucker_hooi, tucker_hosvd, TuckerPack, TuckerRanks, DEFAULT_MAX_ITERS, DEFAULT_TOL};

#[derive(Debug, Error)]
pub enum ConsolidationError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0} is not an expert of layer {1}")]
    UnknownExpert(ExpertRef, usize),
    #[error("layer {0} out of range")]
    LayerOutOfRange(usize),
    #[error("no experts selected for layer {0}")]
    EmptySelection(usize),
    #[error("no packs to report on")]
    Empty,
    #[error("missing pack for layer {layer}, projection {projection}")]
    MissingPack { layer: usize, projection: ProjectionId },
    #[error("unknown projection {0:?}")]
    UnknownProjection(String),
    #[error("inconsistent pack metadata: {0}")]
    Metadata(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed sidecar: {0}")]
    Json(#[from] serde_json::Error),
}

/// FFN projection of the desk-scale engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProjectionId {
    #[serde(rename = "w_in")]
    WIn,
    #[serde(rename = "w_out")]
    WOut,
}

impl ProjectionId {
    pub const ALL: [ProjectionId; 2] = [ProjectionId::WIn, ProjectionId::WOut];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProjectionId::WIn => "w_in",
            ProjectionId::WOut => "w_out",
        }
    }
}

impl fmt::Display for ProjectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectionId {
    type Err = ConsolidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "w_in" => Ok(ProjectionId::WIn),
            "w_out" => Ok(ProjectionId::WOut),
            other => Err(ConsolidationError::UnknownProjection(other.to_owned())),
        }
    }
}

/// An expert slot within one layer. Orders shared experts before routed ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRef {
    Shared(usize),
    Routed(usize),
}

impl fmt::Display for ExpertRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertRef::Shared(i) => write!(f, "shared expert {i}"),
            ExpertRef::Routed(i) => write!(f, "expert {i}"),
        }
    }
}

/// Canonical stacking order: shared ids ascending, then routed ids ascending.
pub fn selection_refs(sel: &LayerSelection) -> Vec<ExpertRef> {
    let mut refs: Vec<ExpertRef> = sel
        .shared_included
        .iter()
        .map(|&i| ExpertRef::Shared(i))
        .chain(sel.selected.iter().map(|&i| ExpertRef::Routed(i)))
        .collect();
    refs.sort_unstable();
    refs
}

/// `Z[:, :, s]` is the `s`-th listed expert's projection in `(input, output)`
/// orientation; slices follow the order of `selected`.
pub fn stack_experts<T: Scalar>(
    model: &MoeModel<T>,
    layer: usize,
    proj: ProjectionId,
    selected: &[ExpertRef],
) -> Result<Tensor<T>, ConsolidationError> {
    let block = model
        .layers
        .get(layer)
        .ok_or(ConsolidationError::LayerOutOfRange(layer))?;
    if selected.is_empty() {
        return Err(ConsolidationError::EmptySelection(layer));
    }
    let slices = selected
        .iter()
        .map(|&r| {
            let expert = match r {
                ExpertRef::Routed(i) => block.experts.get(i),
                ExpertRef::Shared(i) => block.shared_experts.get(i),
            }
            .ok_or(ConsolidationError::UnknownExpert(r, layer))?;
            Ok(match proj {
                ProjectionId::WIn => expert.w_in.transpose(),
                ProjectionId::WOut => expert.w_out.transpose(),
            })
        })
        .collect::<Result<Vec<_>, ConsolidationError>>()?;
    Ok(Tensor::stack_slices(&slices)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum TuckerMethod {
    Hosvd,
    Hooi { max_iters: usize, tol: f64 },
}

impl Default for TuckerMethod {
    fn default() -> Self {
        TuckerMethod::Hooi {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsolidationOptions {
    /// Requested ranks; clamped to the tensor extents.
    #[serde(default)]
    pub ranks: TuckerRanks,
    #[serde(default)]
    pub method: TuckerMethod,
}

/// Tucker-compresses one stacked tensor, clamping oversize ranks with a warning.
pub fn consolidate<T: Scalar>(z: &Tensor<T>, options: &ConsolidationOptions) -> Result<TuckerPack<T>, ConsolidationError> {
    let extents: [usize; 3] = z.shape().try_into().map_err(|_| {
        TensorError::DimensionMismatch(format!("expected a rank-3 tensor, got {:?}", z.shape()))
    })?;
    let ranks = options.ranks.clamped_to(extents);
    if ranks != options.ranks {
        log::warn!(
            "Tucker ranks ({}) clamped to ({}) for a {:?} tensor",
            options.ranks,
            ranks,
            extents
        );
    }
    let pack = match options.method {
        TuckerMethod::Hosvd => tucker_hosvd(z, ranks)?,
        TuckerMethod::Hooi { max_iters, tol } => tucker_hooi(z, ranks, max_iters, tol)?,
    };
    Ok(pack)
}

/// Provenance of one pack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackMeta {
    pub layer: usize,
    pub projection: ProjectionId,
    pub d_in: usize,
    pub d_out: usize,
    pub n: usize,
    pub ranks: TuckerRanks,
    #[serde(default)]
    pub selected: Vec<ExpertRef>,
}

impl PackMeta {
    pub fn param_count(&self) -> usize {
        pack_param_count([self.d_in, self.d_out, self.n], self.ranks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsolidatedEntry<T> {
    pub pack: TuckerPack<T>,
    pub meta: PackMeta,
}

/// One pack per `(layer, projection)`, layers `0..n_layers` without gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsolidatedKnowledge<T> {
    pub source: Option<MoeConfig>,
    pub entries: BTreeMap<(usize, ProjectionId), ConsolidatedEntry<T>>,
}

impl<T: Scalar> ConsolidatedKnowledge<T> {
    pub fn n_layers(&self) -> usize {
        self.entries.keys().map(|(l, _)| l + 1).max().unwrap_or(0)
    }

    pub fn get(&self, layer: usize, projection: ProjectionId) -> Result<&ConsolidatedEntry<T>, ConsolidationError> {
        self.entries
            .get(&(layer, projection))
            .ok_or(ConsolidationError::MissingPack { layer, projection })
    }

    pub fn metas(&self) -> Vec<PackMeta> {
        self.entries.values().map(|e| e.meta.clone()).collect()
    }

    fn check_complete(&self) -> Result<(), ConsolidationError> {
        for layer in 0..self.n_layers() {
            for projection in ProjectionId::ALL {
                self.get(layer, projection)?;
            }
        }
        Ok(())
    }
}

/// Consolidates every `(layer, projection)` of `model` using the report's selections.
pub fn consolidate_model<T: Scalar>(
    model: &MoeModel<T>,
    report: &SelectionReport,
    options: &ConsolidationOptions,
) -> Result<ConsolidatedKnowledge<T>, ConsolidationError> {
    let mut jobs = Vec::new();
    for layer in 0..model.config.n_layers {
        let sel = report
            .layer(layer)
            .ok_or(ConsolidationError::EmptySelection(layer))?;
        let refs = selection_refs(sel);
        for projection in ProjectionId::ALL {
            jobs.push((layer, projection, refs.clone()));
        }
    }
    let done: Vec<ConsolidatedEntry<T>> = jobs
        .into_par_iter()
        .map(|(layer, projection, refs)| {
            let z = stack_experts(model, layer, projection, &refs)?;
            let pack = consolidate(&z, options)?;
            let [d_in, d_out, n] = pack.extents();
            let meta = PackMeta {
                layer,
                projection,
                d_in,
                d_out,
                n,
                ranks: pack.ranks,
                selected: refs,
            };
            Ok(ConsolidatedEntry { pack, meta })
        })
        .collect::<Result<_, ConsolidationError>>()?;
    Ok(ConsolidatedKnowledge {
        source: Some(model.config),
        entries: done
            .into_iter()
            .map(|e| ((e.meta.layer, e.meta.projection), e))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub pack_params: usize,
    pub source_params: usize,
    pub ratio: f64,
    pub per_pack: Vec<(usize, ProjectionId, usize)>,
}

impl CompressionStats {
    /// `pack_params = Σ (R₁R₂R₃ + d_iR₁ + d_oR₂ + nR₃)`, `ratio = pack_params / source_params`.
    pub fn from_meta(metas: &[PackMeta], source: &MoeConfig) -> Result<Self, ConsolidationError> {
        if metas.is_empty() || source.n_layers == 0 {
            return Err(ConsolidationError::Empty);
        }
        let per_pack: Vec<_> = metas
            .iter()
            .map(|m| (m.layer, m.projection, m.param_count()))
            .collect();
        let pack_params = per_pack.iter().map(|p| p.2).sum();
        let source_params = source.param_count();
        Ok(Self {
            pack_params,
            source_params,
            ratio: pack_params as f64 / source_params as f64,
            per_pack,
        })
    }
}

impl fmt::Display for CompressionStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "packs: {} params over {} matrices; source: {} params; ratio {:.4}%",
            self.pack_params,
            self.per_pack.len(),
            self.source_params,
            100.0 * self.ratio
        )
    }
}

pub fn compression_report<T: Scalar>(
    ck: &ConsolidatedKnowledge<T>,
    source: &MoeConfig,
) -> Result<CompressionStats, ConsolidationError> {
    CompressionStats::from_meta(&ck.metas(), source)
}

fn pack_prefix(layer: usize, projection: ProjectionId) -> String {
    format!("block.{layer}.proj.{projection}.pack")
}

/// Metadata file written next to a pack checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    source: Option<MoeConfig>,
    packs: Vec<PackMeta>,
}

pub fn knowledge_to_tensors(ck: &ConsolidatedKnowledge<f32>) -> TensorMap {
    let mut map = TensorMap::new();
    for ((layer, projection), e) in &ck.entries {
        let p = pack_prefix(*layer, *projection);
        map.insert(format!("{p}.core"), e.pack.core.clone());
        map.insert(format!("{p}.u1"), e.pack.u1.clone().into_tensor());
        map.insert(format!("{p}.u2"), e.pack.u2.clone().into_tensor());
        map.insert(format!("{p}.u3"), e.pack.u3.clone().into_tensor());
    }
    map
}

/// Writes the packs plus a `.meta.json` sidecar.
pub fn save_knowledge(ck: &ConsolidatedKnowledge<f32>, path: impl AsRef<Path>) -> Result<(), ConsolidationError> {
    let path = path.as_ref();
    write_checkpoint(&knowledge_to_tensors(ck), path)?;
    let sidecar = Sidecar {
        source: ck.source,
        packs: ck.metas(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Rebuilds packs from tensors; `metas`, when given, supplies selection provenance.
pub fn knowledge_from_tensors(
    map: &TensorMap,
    source: Option<MoeConfig>,
    metas: Option<Vec<PackMeta>>,
) -> Result<ConsolidatedKnowledge<f32>, ConsolidationError> {
    let mut known: BTreeMap<(usize, ProjectionId), PackMeta> = metas
        .unwrap_or_default()
        .into_iter()
        .map(|m| ((m.layer, m.projection), m))
        .collect();
    let mut entries = BTreeMap::new();
    for name in map.keys() {
        let parts: Vec<&str> = name.split('.').collect();
        let (layer, projection) = match parts.as_slice() {
            ["block", l, "proj", j, "pack", "core"] => (
                l.parse::<usize>()
                    .map_err(|_| ConsolidationError::Metadata(format!("bad layer in {name}")))?,
                j.parse::<ProjectionId>()?,
            ),
            _ => continue,
        };
        let p = pack_prefix(layer, projection);
        let pack = TuckerPack::new(
            take_tensor(map, &format!("{p}.core"))?,
            take_matrix(map, &format!("{p}.u1"))?,
            take_matrix(map, &format!("{p}.u2"))?,
            take_matrix(map, &format!("{p}.u3"))?,
        )?;
        let [d_in, d_out, n] = pack.extents();
        let meta = match known.remove(&(layer, projection)) {
            Some(m) => {
                if (m.d_in, m.d_out, m.n, m.ranks) != (d_in, d_out, n, pack.ranks) {
                    return Err(ConsolidationError::Metadata(format!(
                        "sidecar disagrees with tensors for {p}"
                    )));
                }
                m
            }
            None => PackMeta {
                layer,
                projection,
                d_in,
                d_out,
                n,
                ranks: pack.ranks,
                selected: Vec::new(),
            },
        };
        entries.insert((layer, projection), ConsolidatedEntry { pack, meta });
    }
    if entries.is_empty() {
        return Err(ConsolidationError::Empty);
    }
    let ck = ConsolidatedKnowledge { source, entries };
    ck.check_complete()?;
    Ok(ck)
}

/// Reads packs and, when present, the metadata sidecar.
pub fn load_knowledge(path: impl AsRef<Path>) -> Result<ConsolidatedKnowledge<f32>, ConsolidationError> {
    let path = path.as_ref();
    let map = read_checkpoint(path)?;
    let side = sidecar_path(path);
    let (source, metas) = if side.exists() {
        let s: Sidecar = serde_json::from_str(&fs::read_to_string(side)?)?;
        (s.source, Some(s.packs))
    } else {
        (None, None)
    };
    knowledge_from_tensors(&map, source, metas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{Expert, MoeLayer};
    use crate::tensor::Matrix;
    use crate::tucker::reconstruct;

    fn tiny_model(n_experts: usize, n_shared: usize) -> MoeModel<f64> {
        let (d_model, d_ff) = (3, 4);
        let expert = |seed: usize| Expert {
            w_in: Matrix::from_fn(d_ff, d_model, |i, j| ((seed * 31 + i * 7 + j * 3) % 11) as f64 - 5.0),
            w_out: Matrix::from_fn(d_model, d_ff, |i, j| ((seed * 17 + i * 5 + j * 2) % 13) as f64 - 6.0),
        };
        MoeModel {
            config: MoeConfig {
                vocab_size: 5,
                d_model,
                d_ff,
                n_layers: 1,
                n_experts,
                top_k: 1,
                n_shared,
            },
            embedding: Matrix::zeros(5, d_model),
            layers: vec![MoeLayer {
                router_w: Matrix::zeros(n_experts, d_model),
                experts: (0..n_experts).map(expert).collect(),
                shared_experts: (0..n_shared).map(|s| expert(100 + s)).collect(),
                norm: vec![1.0; d_model],
            }],
        }
    }

    #[test]
    fn single_expert_slice_is_transposed_weight() {
        let model = tiny_model(2, 0);
        let z = stack_experts(&model, 0, ProjectionId::WIn, &[ExpertRef::Routed(1)]).unwrap();
        assert_eq!(z.shape(), &[3, 4, 1]);
        assert_eq!(z.frontal_slice(0), model.layers[0].experts[1].w_in.transpose());
        let z = stack_experts(&model, 0, ProjectionId::WOut, &[ExpertRef::Routed(0)]).unwrap();
        assert_eq!(z.shape(), &[4, 3, 1]);
        assert_eq!(z.frontal_slice(0), model.layers[0].experts[0].w_out.transpose());
    }

    #[test]
    fn identical_experts_give_identical_slices() {
        let mut model = tiny_model(2, 0);
        model.layers[0].experts[1] = model.layers[0].experts[0].clone();
        let z = stack_experts(&model, 0, ProjectionId::WIn, &[ExpertRef::Routed(0), ExpertRef::Routed(1)]).unwrap();
        assert_eq!(z.frontal_slice(0), z.frontal_slice(1));
    }

    #[test]
    fn three_slices_match_direct_reads_and_shared_sort_first() {
        let model = tiny_model(3, 1);
        let sel = LayerSelection {
            layer: 0,
            a: vec![],
            c: vec![],
            score: vec![],
            selected: vec![2, 0],
            shared_included: vec![0],
        };
        let refs = selection_refs(&sel);
        assert_eq!(refs, vec![ExpertRef::Shared(0), ExpertRef::Routed(0), ExpertRef::Routed(2)]);
        let z = stack_experts(&model, 0, ProjectionId::WOut, &refs).unwrap();
        let l = &model.layers[0];
        assert_eq!(z.frontal_slice(0), l.shared_experts[0].w_out.transpose());
        assert_eq!(z.frontal_slice(1), l.experts[0].w_out.transpose());
        assert_eq!(z.frontal_slice(2), l.experts[2].w_out.transpose());
    }

    #[test]
    fn invalid_expert_is_rejected() {
        let model = tiny_model(2, 0);
        assert!(matches!(
            stack_experts(&model, 0, ProjectionId::WIn, &[ExpertRef::Routed(5)]),
            Err(ConsolidationError::UnknownExpert(..))
        ));
        assert!(matches!(
            stack_experts(&model, 0, ProjectionId::WIn, &[ExpertRef::Shared(0)]),
            Err(ConsolidationError::UnknownExpert(..))
        ));
        assert!(stack_experts(&model, 1, ProjectionId::WIn, &[ExpertRef::Routed(0)]).is_err());
    }

    #[test]
    fn default_ranks_clamp_and_are_lossless() {
        let model = tiny_model(3, 0);
        let refs = [ExpertRef::Routed(0), ExpertRef::Routed(1), ExpertRef::Routed(2)];
        let z = stack_experts(&model, 0, ProjectionId::WIn, &refs).unwrap();
        let pack = consolidate(&z, &ConsolidationOptions::default()).unwrap();
        assert_eq!(pack.ranks, TuckerRanks::new(3, 4, 3));
        assert!(reconstruct(&pack).relative_error(&z) < 1e-10);
    }

    #[test]
    fn compression_needs_packs_and_layers() {
        let cfg = tiny_model(2, 0).config;
        assert!(matches!(CompressionStats::from_meta(&[], &cfg), Err(ConsolidationError::Empty)));
        let meta = PackMeta {
            layer: 0,
            projection: ProjectionId::WIn,
            d_in: 3,
            d_out: 4,
            n: 2,
            ranks: TuckerRanks::new(3, 4, 2),
            selected: vec![],
        };
        let zero = MoeConfig { n_layers: 0, ..cfg };
        assert!(CompressionStats::from_meta(&[meta.clone()], &zero).is_err());
        let stats = CompressionStats::from_meta(&[meta], &cfg).unwrap();
        assert_eq!(stats.pack_params, 3 * 4 * 2 + 9 + 16 + 4);
    }
}
