//! Synthetic MoE teacher whose common experts are noisy copies `C + θ_i` of a
//! shared FFN and whose remaining experts each serve one domain.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::init::keyed_rng;
use crate::moe::{Expert, MoeConfig, MoeLayer, MoeModel};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTeacherSpec {
    pub config: MoeConfig,
    pub n_domains: usize,
    /// Absolute standard deviation of the per-expert perturbation θ.
    pub noise_sigma: f64,
    /// Share of routed experts built as `C + θ_i`.
    pub common_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of the entries of `C` and of domain-expert weights.
    #[serde(default = "default_weight_scale")]
    pub weight_scale: f64,
    /// Router logit gain toward an expert's traffic direction.
    #[serde(default = "default_router_strength")]
    pub router_strength: f64,
    /// Every `dormant_stride`-th hidden unit of `C` is zero; 0 keeps all units live.
    #[serde(default = "default_dormant_stride")]
    pub dormant_stride: usize,
}

fn default_weight_scale() -> f64 {
    0.6
}

fn default_router_strength() -> f64 {
    1.5
}

fn default_dormant_stride() -> usize {
    4
}

const ROUTER_NOISE: f64 = 0.1;
const EMBEDDING_NOISE: f64 = 0.3;

impl SyntheticTeacherSpec {
    pub fn n_common(&self) -> usize {
        ((self.common_fraction * self.config.n_experts as f64).round() as usize).clamp(1, self.config.n_experts)
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        let c = &self.config;
        c.validate().map_err(|e| ProbeError::InvalidConfig(e.to_string()))?;
        let bad = |m: &str| Err(ProbeError::InvalidConfig(m.to_owned()));
        if c.n_shared != 0 {
            return bad("the synthetic teacher has no shared experts");
        }
        if self.n_domains == 0 || self.n_domains > c.vocab_size {
            return bad("n_domains must be in 1..=vocab_size");
        }
        if c.d_model < 1 + self.n_domains {
            return bad("d_model must exceed n_domains");
        }
        if !(self.common_fraction > 0.0 && self.common_fraction <= 1.0) {
            return bad("common_fraction must lie in (0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(self.weight_scale > 0.0 && self.weight_scale.is_finite()) {
            return bad("weight_scale must be positive");
        }
        if !self.router_strength.is_finite() {
            return bad("router_strength must be finite");
        }
        Ok(())
    }

    /// Domain whose token subrange contains `token`.
    pub fn domain_of(&self, token: usize) -> usize {
        token * self.n_domains / self.config.vocab_size
    }

    /// Token ids `[start, end)` belonging to `domain`.
    pub fn domain_tokens(&self, domain: usize) -> std::ops::Range<usize> {
        let v = self.config.vocab_size;
        let start = (0..v).find(|&t| self.domain_of(t) == domain).unwrap_or(v);
        let end = (start..v).find(|&t| self.domain_of(t) != domain).unwrap_or(v);
        start..end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTeacher {
    pub spec: SyntheticTeacherSpec,
    pub model: MoeModel<f64>,
    /// Ascending ids of the `C + θ_i` experts.
    pub common_ids: Vec<usize>,
    /// Home domain of each routed expert; `None` for common experts.
    pub home_domain: Vec<Option<usize>>,
    /// Ground-truth shared component per layer.
    pub common: Vec<Expert<f64>>,
}

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64, name: &str) -> Matrix<f64> {
    let mut rng = keyed_rng(seed, name);
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        std * z
    })
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn perturb(base: &Matrix<f64>, sigma: f64, seed: u64, name: &str) -> Matrix<f64> {
    if sigma == 0.0 {
        return base.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = keyed_rng(seed, name);
    Matrix::from_fn(base.rows(), base.cols(), |i, j| base.get(i, j) + noise.sample(&mut rng))
}

/// Deterministic in `spec.seed`.
pub fn build_synthetic_teacher(spec: &SyntheticTeacherSpec) -> Result<SyntheticTeacher, ProbeError> {
    spec.validate()?;
    let c = spec.config;
    let seed = spec.seed;
    let n_common = spec.n_common();

    let mut ids: Vec<usize> = (0..c.n_experts).collect();
    ids.shuffle(&mut keyed_rng(seed, "teacher.common_ids"));
    let mut common_ids = ids[..n_common].to_vec();
    common_ids.sort_unstable();
    let mut home_domain = vec![None; c.n_experts];
    let mut next_domain = 0;
    for (e, home) in home_domain.iter_mut().enumerate() {
        if common_ids.binary_search(&e).is_err() {
            *home = Some(next_domain % spec.n_domains);
            next_domain += 1;
        }
    }

    let mut emb_rng = keyed_rng(seed, "teacher.embedding");
    let embedding = Matrix::from_fn(c.vocab_size, c.d_model, |t, j| {
        let structured = if j == 0 || j == 1 + spec.domain_of(t) { 1.0 } else { 0.0 };
        let z: f64 = StandardNormal.sample(&mut emb_rng);
        structured + EMBEDDING_NOISE * z
    });

    let mut common = Vec::with_capacity(c.n_layers);
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let live = |h: usize| spec.dormant_stride == 0 || !h.is_multiple_of(spec.dormant_stride);
        let w_in = gaussian(c.d_ff, c.d_model, spec.weight_scale, seed, &format!("teacher.block.{l}.common.w_in"));
        let w_in = Matrix::from_fn(c.d_ff, c.d_model, |h, j| if live(h) { w_in.get(h, j) } else { 0.0 });
        let w_out = gaussian(c.d_model, c.d_ff, spec.weight_scale, seed, &format!("teacher.block.{l}.common.w_out"));
        let w_out = Matrix::from_fn(c.d_model, c.d_ff, |j, h| if live(h) { w_out.get(j, h) } else { 0.0 });
        let shared_c = Expert { w_in, w_out };

        let mut router_rng = keyed_rng(seed, &format!("teacher.block.{l}.router"));
        let mut router = Vec::with_capacity(c.n_experts);
        let mut experts = Vec::with_capacity(c.n_experts);
        for (e, home) in home_domain.iter().enumerate() {
            let direction = unit(c.d_model, home.map_or(0, |m| 1 + m));
            router.push(
                direction
                    .iter()
                    .map(|d| spec.router_strength * d + ROUTER_NOISE * router_rng.sample::<f64, _>(StandardNormal))
                    .collect::<Vec<f64>>(),
            );
            let name = format!("teacher.block.{l}.expert.{e}");
            experts.push(match home {
                None => Expert {
                    w_in: perturb(&shared_c.w_in, spec.noise_sigma, seed, &format!("{name}.theta_in")),
                    w_out: perturb(&shared_c.w_out, spec.noise_sigma, seed, &format!("{name}.theta_out")),
                },
                Some(_) => Expert {
                    w_in: gaussian(c.d_ff, c.d_model, spec.weight_scale, seed, &format!("{name}.w_in")),
                    w_out: gaussian(c.d_model, c.d_ff, spec.weight_scale, seed, &format!("{name}.w_out")),
                },
            });
        }
        layers.push(MoeLayer {
            router_w: Matrix::from_rows(&router).expect("rows share a length"),
            experts,
            shared_experts: Vec::new(),
            norm: vec![1.0; c.d_model],
        });
        common.push(shared_c);
    }
    let model = MoeModel {
        config: c,
        embedding,
        layers,
    };
    model
        .validate()
        .map_err(|e| ProbeError::InvalidConfig(e.to_string()))?;
    Ok(SyntheticTeacher {
        spec: *spec,
        model,
        common_ids,
        home_domain,
        common,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec() -> SyntheticTeacherSpec {
        SyntheticTeacherSpec {
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
            seed: 5,
            weight_scale: 0.6,
            router_strength: 1.5,
            dormant_stride: 4,
        }
    }

    #[test]
    fn zero_noise_common_experts_equal_c() {
        let t = build_synthetic_teacher(&spec()).unwrap();
        assert_eq!(t.common_ids.len(), 4);
        for &e in &t.common_ids {
            assert_eq!(t.model.layers[0].experts[e], t.common[0]);
        }
        assert_eq!(t.home_domain.iter().filter(|h| h.is_none()).count(), 4);
    }

    #[test]
    fn dormant_units_are_zero() {
        let t = build_synthetic_teacher(&spec()).unwrap();
        let c = &t.common[0];
        for h in (0..32).step_by(4) {
            assert!(c.w_in.row(h).iter().all(|&v| v == 0.0));
            assert!(c.w_out.column(h).iter().all(|&v| v == 0.0));
        }
        assert!(c.w_in.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn deterministic_by_seed() {
        let a = build_synthetic_teacher(&spec()).unwrap();
        assert_eq!(a, build_synthetic_teacher(&spec()).unwrap());
        let b = build_synthetic_teacher(&SyntheticTeacherSpec { seed: 6, ..spec() }).unwrap();
        assert_ne!(a.model, b.model);
    }

    #[test]
    fn domain_ranges_partition_vocab() {
        let s = spec();
        assert_eq!(s.domain_tokens(0), 0..8);
        assert_eq!(s.domain_tokens(3), 24..32);
        assert_eq!(s.domain_of(17), 2);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(build_synthetic_teacher(&SyntheticTeacherSpec { common_fraction: 0.0, ..spec() }).is_err());
        assert!(build_synthetic_teacher(&SyntheticTeacherSpec { noise_sigma: -1.0, ..spec() }).is_err());
        assert!(build_synthetic_teacher(&SyntheticTeacherSpec { n_domains: 16, ..spec() }).is_err());
    }
}
