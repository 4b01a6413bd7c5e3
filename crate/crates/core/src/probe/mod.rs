//! End-to-end harness: synthetic teacher → profile → select → consolidate →
//! adapt → emit, then two training runs of a small dense model from the
//! emitted and from a random initialization on identical data.
//!
//! Training data comes from a dense "generator" that shares the target's
//! keyed embedding and uses the teacher's shared FFN component `C`, so an
//! initialization that recovers `C` starts at the data distribution.

mod markov;
mod teacher;
mod train;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use markov::{generate_markov_data, MarkovChain};
pub use teacher::{build_synthetic_teacher, SyntheticTeacher, SyntheticTeacherSpec};
pub use train::{batch_loss, loss_and_grads, next_token_probs, sgd_step, train_dense, DenseGrads, LayerGrads};

use crate::adaptation::{AdaptationError, SvdRank};
use crate::consolidation::{consolidate_model, ConsolidatedKnowledge, ConsolidationError, ConsolidationOptions, TuckerMethod};
use crate::init::{emit_initialization, random_init, DenseConfig, DenseLayer, DenseModel, InitError};
use crate::moe::{run_profiling, DomainDataset, MoeConfig, MoeError};
use crate::selection::{build_profile, ActivationProfile, SelectionError, SelectionReport};
use crate::tensor::Matrix;
use crate::tucker::TuckerRanks;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid Markov chain: {0}")]
    InvalidChain(String),
    #[error("invalid training data: {0}")]
    InvalidData(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Consolidation(#[from] ConsolidationError),
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed probe JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_sequences: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub data: CorpusSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// `seed` is replaced by each probe seed.
    pub teacher: SyntheticTeacherSpec,
    /// `seed` is replaced by each probe seed.
    pub target: DenseConfig,
    pub n_selected: usize,
    #[serde(default)]
    pub ranks: TuckerRanks,
    #[serde(default)]
    pub svd_rank: SvdRank,
    /// Sequences per domain used for routing statistics.
    pub profile: CorpusSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            teacher: SyntheticTeacherSpec {
                config: MoeConfig {
                    vocab_size: 32,
                    d_model: 16,
                    d_ff: 32,
                    n_layers: 1,
                    n_experts: 16,
                    top_k: 4,
                    n_shared: 0,
                },
                n_domains: 4,
                noise_sigma: 0.0,
                common_fraction: 0.25,
                seed: 0,
                weight_scale: 0.6,
                router_strength: 1.5,
                dormant_stride: 4,
            },
            target: DenseConfig {
                vocab_size: 32,
                d_model: 16,
                d_ff: 24,
                n_layers: 1,
                seed: 0,
            },
            n_selected: 4,
            ranks: TuckerRanks::default(),
            svd_rank: SvdRank::Full,
            profile: CorpusSpec {
                n_sequences: 16,
                seq_len: 32,
            },
            train: TrainConfig {
                steps: 200,
                lr: 0.1,
                data: CorpusSpec {
                    n_sequences: 512,
                    seq_len: 32,
                },
            },
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        self.teacher.validate()?;
        self.target.validate()?;
        let t = &self.teacher.config;
        let bad = |m: String| Err(ProbeError::InvalidConfig(m));
        if self.target.vocab_size != t.vocab_size || self.target.d_model != t.d_model {
            return bad("target vocab_size and d_model must match the teacher".into());
        }
        if self.target.n_layers > t.n_layers {
            return bad(format!("target has {} layers, teacher {}", self.target.n_layers, t.n_layers));
        }
        if self.n_selected == 0 || self.n_selected > t.n_experts {
            return bad(format!("n_selected must be in 1..={}", t.n_experts));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        for (what, c) in [("profile", &self.profile), ("train.data", &self.train.data)] {
            if c.n_sequences == 0 || c.seq_len < 2 {
                return bad(format!("{what} needs sequences of at least 2 tokens"));
            }
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProbeError> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn for_seed(&self, seed: u64) -> (SyntheticTeacherSpec, DenseConfig) {
        (
            SyntheticTeacherSpec { seed, ..self.teacher },
            DenseConfig { seed, ..self.target },
        )
    }
}

/// Dense model whose FFN blocks are the teacher's shared components and whose
/// embedding is the target's keyed random embedding.
pub fn generator_model(teacher: &SyntheticTeacher, target: &DenseConfig) -> Result<DenseModel<f64>, ProbeError> {
    let base = random_init::<f64>(target)?;
    if target.n_layers > teacher.common.len() || target.d_model != teacher.model.config.d_model {
        return Err(ProbeError::InvalidConfig("generator must fit inside the teacher".into()));
    }
    let layers = teacher.common[..target.n_layers]
        .iter()
        .map(|c| DenseLayer {
            w_in: c.w_in.clone(),
            w_out: c.w_out.clone(),
            norm: vec![1.0; target.d_model],
        })
        .collect();
    Ok(DenseModel {
        embedding: base.embedding,
        layers,
    })
}

/// `T[a, b] = p(b | a)` under `model`.
pub fn transition_matrix(model: &DenseModel<f64>) -> Matrix<f64> {
    let v = model.vocab_size();
    let rows: Vec<Vec<f64>> = (0..v).map(|a| next_token_probs(model, a)).collect();
    Matrix::from_rows(&rows).expect("rows share a length")
}

/// Per-domain corpora: the chain restricted to the domain's token subrange
/// and renormalized, started uniformly inside that subrange.
pub fn domain_datasets(
    spec: &SyntheticTeacherSpec,
    transition: &Matrix<f64>,
    corpus: &CorpusSpec,
    seed: u64,
) -> Result<Vec<DomainDataset>, ProbeError> {
    let v = transition.rows();
    (0..spec.n_domains)
        .map(|m| {
            let range = spec.domain_tokens(m);
            let restricted = Matrix::from_fn(v, v, |a, b| {
                if !range.contains(&b) {
                    return 0.0;
                }
                let mass: f64 = range.clone().map(|c| transition.get(a, c)).sum();
                transition.get(a, b) / mass
            });
            let initial = (0..v)
                .map(|t| if range.contains(&t) { 1.0 / range.len() as f64 } else { 0.0 })
                .collect();
            let chain = MarkovChain::new(restricted, initial)?;
            Ok(DomainDataset {
                domain: m,
                sequences: chain.sample(corpus.n_sequences, corpus.seq_len, seed, &format!("probe.domain.{m}")),
            })
        })
        .collect()
}

/// Routing statistics of `teacher` on `datasets`.
pub fn profile_teacher(teacher: &SyntheticTeacher, datasets: &[DomainDataset]) -> Result<ActivationProfile, ProbeError> {
    let log = run_profiling(&teacher.model, datasets)?;
    let c = &teacher.model.config;
    Ok(build_profile(&log, c.n_layers, c.n_experts, teacher.spec.n_domains, c.top_k)?)
}

/// Everything an initializer may draw on for one probe seed.
pub struct ProbeContext<'a> {
    pub config: &'a ProbeConfig,
    pub seed: u64,
    pub teacher: SyntheticTeacher,
    pub profile: ActivationProfile,
    /// Score-based selection.
    pub report: SelectionReport,
    pub target: DenseConfig,
}

impl ProbeContext<'_> {
    pub fn consolidation_options(&self) -> ConsolidationOptions {
        ConsolidationOptions {
            ranks: self.config.ranks,
            method: TuckerMethod::default(),
        }
    }

    pub fn consolidate(&self, report: &SelectionReport) -> Result<ConsolidatedKnowledge<f64>, ProbeError> {
        Ok(consolidate_model(&self.teacher.model, report, &self.consolidation_options())?)
    }

    /// The standard pipeline on the score-based selection.
    pub fn xpert_init(&self) -> Result<DenseModel<f64>, ProbeError> {
        let ck = self.consolidate(&self.report)?;
        Ok(emit_initialization(&ck, &self.target, self.config.svd_rank)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Per seed; entry `s` is the loss after `s` updates.
    pub loss_curve_xpert: Vec<Vec<f64>>,
    pub loss_curve_random: Vec<Vec<f64>>,
    pub median_final_xpert: f64,
    pub median_final_random: f64,
    /// Per seed, the teacher's common expert ids.
    pub common_ids: Vec<Vec<usize>>,
    /// Per seed, the routed experts selected in block 0.
    pub selected: Vec<Vec<usize>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl ProbeResult {
    /// Curve index reached after `fraction` of the step budget.
    pub fn step_at(&self, fraction: f64) -> usize {
        ((fraction * self.steps as f64).round() as usize).min(self.steps)
    }

    pub fn median_xpert_at(&self, step: usize) -> f64 {
        median(&self.loss_curve_xpert.iter().map(|c| c[step]).collect::<Vec<_>>())
    }

    pub fn median_random_at(&self, step: usize) -> f64 {
        median(&self.loss_curve_random.iter().map(|c| c[step]).collect::<Vec<_>>())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result always serializes")
    }
}

struct SeedRun {
    xpert: Vec<f64>,
    random: Vec<f64>,
    common_ids: Vec<usize>,
    selected: Vec<usize>,
}

fn run_seed<F>(cfg: &ProbeConfig, seed: u64, init: &F) -> Result<SeedRun, ProbeError>
where
    F: Fn(&ProbeContext) -> Result<DenseModel<f64>, ProbeError>,
{
    let (teacher_spec, target) = cfg.for_seed(seed);
    let teacher = build_synthetic_teacher(&teacher_spec)?;
    let transition = transition_matrix(&generator_model(&teacher, &target)?);
    let datasets = domain_datasets(&teacher_spec, &transition, &cfg.profile, seed)?;
    let profile = profile_teacher(&teacher, &datasets)?;
    let report = SelectionReport::build(&profile, cfg.n_selected, &[])?;
    let ctx = ProbeContext {
        config: cfg,
        seed,
        teacher,
        profile,
        report,
        target,
    };
    let mut xpert = init(&ctx)?;
    if (xpert.vocab_size(), xpert.d_model(), xpert.d_ff(), xpert.n_layers())
        != (target.vocab_size, target.d_model, target.d_ff, target.n_layers)
    {
        return Err(ProbeError::InvalidConfig("initializer returned a mis-shaped model".into()));
    }
    let mut random = random_init::<f64>(&target)?;
    let data = MarkovChain::with_uniform_start(transition)?.sample(
        cfg.train.data.n_sequences,
        cfg.train.data.seq_len,
        seed,
        "probe.train",
    );
    let xpert_curve = train_dense(&mut xpert, &data, cfg.train.steps, cfg.train.lr)?;
    let random_curve = train_dense(&mut random, &data, cfg.train.steps, cfg.train.lr)?;
    Ok(SeedRun {
        xpert: xpert_curve,
        random: random_curve,
        common_ids: ctx.teacher.common_ids.clone(),
        selected: ctx.report.layers[0].selected.clone(),
    })
}

/// Runs every seed with a caller-supplied initializer in place of the
/// standard pipeline; the random baseline is unchanged.
pub fn run_probe_with<F>(cfg: &ProbeConfig, init: F) -> Result<ProbeResult, ProbeError>
where
    F: Fn(&ProbeContext) -> Result<DenseModel<f64>, ProbeError> + Sync,
{
    cfg.validate()?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, s, &init))
        .collect::<Result<Vec<_>, _>>()?;
    let finals = |f: fn(&SeedRun) -> &Vec<f64>| runs.iter().map(|r| *f(r).last().expect("non-empty curve")).collect::<Vec<_>>();
    Ok(ProbeResult {
        seeds: cfg.seeds.clone(),
        steps: cfg.train.steps,
        median_final_xpert: median(&finals(|r| &r.xpert)),
        median_final_random: median(&finals(|r| &r.random)),
        loss_curve_xpert: runs.iter().map(|r| r.xpert.clone()).collect(),
        loss_curve_random: runs.iter().map(|r| r.random.clone()).collect(),
        common_ids: runs.iter().map(|r| r.common_ids.clone()).collect(),
        selected: runs.iter().map(|r| r.selected.clone()).collect(),
    })
}

pub fn run_probe(cfg: &ProbeConfig) -> Result<ProbeResult, ProbeError> {
    run_probe_with(cfg, |ctx| ctx.xpert_init())
}
