//! Turns a Tucker pack into a single consolidated matrix Γ and resizes it to
//! arbitrary target dimensions by importance-guided row resampling of its
//! singular vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::checkpoint::{read_checkpoint, take_matrix, write_checkpoint, CheckpointError, TensorMap};
use crate::consolidation::ProjectionId;
use crate::scalar::Scalar;
use crate::svd::truncated_svd;
use crate::tensor::{mode_product, Matrix, TensorError};
use crate::tucker::TuckerPack;

/// Scores closer than this fraction of the largest score compare equal.
pub const SCORE_RESOLUTION: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AdaptationError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("target dimensions must be at least 1, got {0}x{1}")]
    EmptyTarget(usize, usize),
    #[error("SVD rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("invalid svd rank {0:?}: expected \"full\" or a positive integer")]
    BadRank(String),
    #[error("no adapted matrices found")]
    Empty,
}

/// Number of retained singular triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SvdRank {
    /// `min(d_in, d_out)` of the matrix being adapted.
    #[default]
    Full,
    Fixed(usize),
}

impl SvdRank {
    pub fn resolve(&self, d_in: usize, d_out: usize) -> Result<usize, AdaptationError> {
        let max = d_in.min(d_out);
        match *self {
            SvdRank::Full => Ok(max),
            SvdRank::Fixed(r) if (1..=max).contains(&r) => Ok(r),
            SvdRank::Fixed(rank) => Err(AdaptationError::RankOutOfRange { rank, max }),
        }
    }
}

impl fmt::Display for SvdRank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SvdRank::Full => f.write_str("full"),
            SvdRank::Fixed(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for SvdRank {
    type Err = AdaptationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "full" => Ok(SvdRank::Full),
            other => match other.parse::<usize>() {
                Ok(r) if r >= 1 => Ok(SvdRank::Fixed(r)),
                _ => Err(AdaptationError::BadRank(s.to_owned())),
            },
        }
    }
}

impl Serialize for SvdRank {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        match self {
            SvdRank::Full => ser.serialize_str("full"),
            SvdRank::Fixed(r) => ser.serialize_u64(*r as u64),
        }
    }
}

impl<'de> Deserialize<'de> for SvdRank {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u64),
            Text(String),
        }
        match Repr::deserialize(de)? {
            Repr::Num(0) => Err(serde::de::Error::custom("svd rank must be at least 1")),
            Repr::Num(n) => Ok(SvdRank::Fixed(n as usize)),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationSpec {
    pub target_d_in: usize,
    pub target_d_out: usize,
    #[serde(default)]
    pub svd_rank: SvdRank,
}

impl AdaptationSpec {
    pub fn new(target_d_in: usize, target_d_out: usize, svd_rank: SvdRank) -> Self {
        Self {
            target_d_in,
            target_d_out,
            svd_rank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub layer: Option<usize>,
    pub projection: Option<ProjectionId>,
    pub source_d_in: usize,
    pub source_d_out: usize,
    pub spec: AdaptationSpec,
    /// Resolved SVD rank.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedMatrix<T> {
    /// `target_d_in × target_d_out`, (input, output) orientation.
    pub m_hat: Matrix<T>,
    pub provenance: Provenance,
}

/// `Γ = 𝒢 ×₁ U₁ ×₂ U₂ ×₃ ū₃ᵀ`, with `ū₃` the mean of the rows of `U₃`.
pub fn reconstruct_gamma<T: Scalar>(pack: &TuckerPack<T>) -> Matrix<T> {
    let [d_in, d_out, n] = pack.extents();
    let r3 = pack.ranks.r3;
    let mean = Matrix::from_fn(1, r3, |_, k| {
        let s: f64 = (0..n).map(|i| pack.u3.get(i, k).as_f64()).sum();
        T::from_f64_lossy(s / n as f64)
    });
    let t = mode_product(&pack.core, &pack.u1, 0).expect("pack shapes validated");
    let t = mode_product(&t, &pack.u2, 1).expect("pack shapes validated");
    let t = mode_product(&t, &mean, 2).expect("pack shapes validated");
    Matrix::from_raw(d_in, d_out, t.into_data())
}

/// Euclidean norm of each row.
pub fn importance_scores<T: Scalar>(u: &Matrix<T>) -> Vec<f64> {
    (0..u.rows())
        .map(|i| u.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Row indices from most to least important; near-equal scores rank by index.
pub fn score_ranking(scores: &[f64]) -> Vec<usize> {
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    let key: Vec<i64> = if max > 0.0 {
        scores
            .iter()
            .map(|s| (s / max / SCORE_RESOLUTION).round() as i64)
            .collect()
    } else {
        vec![0; scores.len()]
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key[b].cmp(&key[a]).then(a.cmp(&b)));
    order
}

/// Source row indices a resample to `target` rows would read, in output order.
pub fn resample_indices(scores: &[f64], target: usize) -> Vec<usize> {
    let d = scores.len();
    let ranking = score_ranking(scores);
    if target <= d {
        let mut keep = ranking[..target].to_vec();
        keep.sort_unstable();
        keep
    } else {
        (0..d).chain(ranking.iter().copied().cycle().take(target - d)).collect()
    }
}

/// Contracts by keeping the highest-scoring rows in index order, or expands by
/// appending copies of the highest-scoring rows in descending score order.
pub fn resample<T: Scalar>(u: &Matrix<T>, scores: &[f64], target: usize) -> Result<Matrix<T>, AdaptationError> {
    if target == 0 {
        return Err(AdaptationError::EmptyTarget(target, u.cols()));
    }
    if scores.len() != u.rows() {
        return Err(TensorError::DimensionMismatch(format!(
            "{} scores for {} rows",
            scores.len(),
            u.rows()
        ))
        .into());
    }
    Ok(u.select_rows(&resample_indices(scores, target)))
}

/// `Ĥ = U′·diag(s)·V′ᵀ` from a rank-`r` SVD of Γ.
pub fn adapt<T: Scalar>(gamma: &Matrix<T>, spec: &AdaptationSpec) -> Result<AdaptedMatrix<T>, AdaptationError> {
    if spec.target_d_in == 0 || spec.target_d_out == 0 {
        return Err(AdaptationError::EmptyTarget(spec.target_d_in, spec.target_d_out));
    }
    let (d_in, d_out) = gamma.shape();
    let r = spec.svd_rank.resolve(d_in, d_out)?;
    let svd = truncated_svd(&gamma.cast::<f64>(), r)?;
    let u = resample(&svd.u, &importance_scores(&svd.u), spec.target_d_in)?;
    let v = resample(&svd.v, &importance_scores(&svd.v), spec.target_d_out)?;
    let m_hat = Matrix::from_fn(spec.target_d_in, spec.target_d_out, |i, j| {
        let acc: f64 = (0..r).map(|k| u.get(i, k) * svd.s[k] * v.get(j, k)).sum();
        T::from_f64_lossy(acc)
    });
    Ok(AdaptedMatrix {
        m_hat,
        provenance: Provenance {
            layer: None,
            projection: None,
            source_d_in: d_in,
            source_d_out: d_out,
            spec: *spec,
            rank: r,
        },
    })
}

pub fn adapted_name(layer: usize, projection: ProjectionId) -> String {
    format!("block.{layer}.proj.{projection}.adapted")
}

/// Writes each matrix as `block.<l>.proj.<j>.adapted`.
pub fn save_adapted(
    adapted: &BTreeMap<(usize, ProjectionId), Matrix<f32>>,
    path: impl AsRef<Path>,
) -> Result<(), AdaptationError> {
    let map: TensorMap = adapted
        .iter()
        .map(|(&(l, j), m)| (adapted_name(l, j), m.clone().into_tensor()))
        .collect();
    write_checkpoint(&map, path)?;
    Ok(())
}

pub fn load_adapted(path: impl AsRef<Path>) -> Result<BTreeMap<(usize, ProjectionId), Matrix<f32>>, AdaptationError> {
    let map = read_checkpoint(path)?;
    let mut out = BTreeMap::new();
    for name in map.keys() {
        let parts: Vec<&str> = name.split('.').collect();
        if let ["block", l, "proj", j, "adapted"] = parts.as_slice() {
            if let (Ok(l), Ok(j)) = (l.parse::<usize>(), j.parse::<ProjectionId>()) {
                out.insert((l, j), take_matrix(&map, name)?);
            }
        }
    }
    if out.is_empty() {
        return Err(AdaptationError::Empty);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::tucker::{tucker_hosvd, TuckerRanks};

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn resample_examples() {
        let u = m(&[&[1.0, 0.0], &[2.0, 0.0], &[3.0, 0.0]]);
        assert_eq!(resample(&u, &[1.0, 3.0, 2.0], 2).unwrap(), m(&[&[2.0, 0.0], &[3.0, 0.0]]));
        let u = m(&[&[1.0], &[2.0]]);
        assert_eq!(resample(&u, &[5.0, 1.0], 3).unwrap(), m(&[&[1.0], &[2.0], &[1.0]]));
        assert_eq!(resample(&u, &[5.0, 1.0], 2).unwrap(), u);
        assert_eq!(resample_indices(&[5.0, 1.0], 7), vec![0, 1, 0, 1, 0, 1, 0]);
        assert!(resample(&u, &[5.0, 1.0], 0).is_err());
    }

    #[test]
    fn near_equal_scores_prefer_lower_index() {
        assert_eq!(resample_indices(&[1.0, 1.0 + 1e-14, 1.0 - 1e-14], 1), vec![0]);
        assert_eq!(score_ranking(&[0.0, 0.0]), vec![0, 1]);
    }

    #[test]
    fn importance_examples() {
        assert_eq!(importance_scores(&Matrix::<f64>::identity(3)), vec![1.0; 3]);
        let s = importance_scores(&m(&[&[3.0, 4.0], &[0.0, 0.0]]));
        assert_eq!(s, vec![5.0, 0.0]);
    }

    #[test]
    fn gamma_of_single_expert_and_zero_core() {
        let x = Matrix::from_fn(3, 2, |i, j| (i as f64) - 2.0 * j as f64 + 0.5);
        let z = Tensor::stack_slices(&[x.clone()]).unwrap();
        let pack = tucker_hosvd(&z, TuckerRanks::new(3, 2, 1)).unwrap();
        assert!(reconstruct_gamma(&pack).relative_error(&x) < 1e-12);
        let zero = TuckerPack::new(Tensor::zeros(&[3, 2, 1]), pack.u1.clone(), pack.u2.clone(), pack.u3.clone()).unwrap();
        assert_eq!(reconstruct_gamma(&zero), Matrix::zeros(3, 2));
    }

    #[test]
    fn identity_adaptation_round_trips() {
        let g = Matrix::from_fn(4, 3, |i, j| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        let out = adapt(&g, &AdaptationSpec::new(4, 3, SvdRank::Full)).unwrap();
        assert!(out.m_hat.relative_error(&g) < 1e-10);
        assert_eq!(out.provenance.rank, 3);
    }

    #[test]
    fn expansion_preserves_leading_rows() {
        let g = Matrix::from_fn(4, 3, |i, j| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        let base = adapt(&g, &AdaptationSpec::new(4, 3, SvdRank::Fixed(2))).unwrap().m_hat;
        let wide = adapt(&g, &AdaptationSpec::new(5, 3, SvdRank::Fixed(2))).unwrap().m_hat;
        for i in 0..4 {
            assert_eq!(base.row(i), wide.row(i));
        }
    }

    #[test]
    fn rank_is_validated() {
        let g = Matrix::<f64>::identity(3);
        assert!(matches!(
            adapt(&g, &AdaptationSpec::new(3, 3, SvdRank::Fixed(4))),
            Err(AdaptationError::RankOutOfRange { rank: 4, max: 3 })
        ));
        assert!(adapt(&g, &AdaptationSpec::new(0, 3, SvdRank::Full)).is_err());
    }

    #[test]
    fn svd_rank_serde() {
        assert_eq!(serde_json::to_string(&SvdRank::Full).unwrap(), "\"full\"");
        assert_eq!(serde_json::from_str::<SvdRank>("3").unwrap(), SvdRank::Fixed(3));
        assert_eq!(serde_json::from_str::<SvdRank>("\"full\"").unwrap(), SvdRank::Full);
        assert!(serde_json::from_str::<SvdRank>("0").is_err());
        assert!(serde_json::from_str::<SvdRank>("\"most\"").is_err());
        assert_eq!("7".parse::<SvdRank>().unwrap(), SvdRank::Fixed(7));
    }
}
