//! Order-1 Markov token sources.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use super::ProbeError;
use crate::init::keyed_rng;
use crate::tensor::Matrix;

const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic transition matrix plus an initial-state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    transition: Matrix<f64>,
    initial: Vec<f64>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<(), ProbeError> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ProbeError::InvalidChain(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_SUM_TOL {
        return Err(ProbeError::InvalidChain(format!("{what} sums to {total}")));
    }
    Ok(())
}

impl MarkovChain {
    pub fn new(transition: Matrix<f64>, initial: Vec<f64>) -> Result<Self, ProbeError> {
        if transition.rows() != transition.cols() || transition.rows() == 0 {
            return Err(ProbeError::InvalidChain(format!(
                "transition matrix must be square, got {:?}",
                transition.shape()
            )));
        }
        if initial.len() != transition.rows() {
            return Err(ProbeError::InvalidChain("initial distribution has the wrong length".into()));
        }
        for a in 0..transition.rows() {
            check_distribution(transition.row(a), &format!("transition row {a}"))?;
        }
        check_distribution(&initial, "initial distribution")?;
        Ok(Self { transition, initial })
    }

    /// Uniform initial state.
    pub fn with_uniform_start(transition: Matrix<f64>) -> Result<Self, ProbeError> {
        let v = transition.rows().max(1);
        Self::new(transition, vec![1.0 / v as f64; v])
    }

    pub fn vocab_size(&self) -> usize {
        self.transition.rows()
    }

    pub fn transition(&self) -> &Matrix<f64> {
        &self.transition
    }

    /// `n_sequences` chains of `length` tokens drawn from the stream keyed by `(seed, name)`.
    pub fn sample(&self, n_sequences: usize, length: usize, seed: u64, name: &str) -> Vec<Vec<u32>> {
        let mut rng = keyed_rng(seed, name);
        let start = WeightedIndex::new(&self.initial).expect("validated distribution");
        let rows: Vec<WeightedIndex<f64>> = (0..self.vocab_size())
            .map(|a| WeightedIndex::new(self.transition.row(a)).expect("validated distribution"))
            .collect();
        (0..n_sequences)
            .map(|_| {
                let mut seq = Vec::with_capacity(length);
                if length > 0 {
                    let mut state = start.sample(&mut rng);
                    seq.push(state as u32);
                    while seq.len() < length {
                        state = rows[state].sample(&mut rng);
                        seq.push(state as u32);
                    }
                }
                seq
            })
            .collect()
    }
}

/// Samples `n_sequences` chains of `length` tokens with a uniform start.
pub fn generate_markov_data(
    transition: &Matrix<f64>,
    n_sequences: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>, ProbeError> {
    let chain = MarkovChain::with_uniform_start(transition.clone())?;
    Ok(chain.sample(n_sequences, length, seed, "markov"))
}
