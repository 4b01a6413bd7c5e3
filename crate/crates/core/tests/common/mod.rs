//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use xpert_core::adaptation::SCORE_RESOLUTION;
use xpert_core::init::{keyed_rng, random_init, DenseConfig, DenseModel};
use xpert_core::probe::{batch_loss, loss_and_grads};
use xpert_core::{Matrix, Tensor};

pub fn rng(seed: u64, name: &str) -> ChaCha8Rng {
    keyed_rng(seed, name)
}

pub fn normal(rng: &mut impl RngCore) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_matrix(rng: &mut impl RngCore, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| normal(rng))
}

pub fn random_tensor(rng: &mut impl RngCore, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| normal(rng))
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix: eigenvalues
/// descending, eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix<f64>) -> (Vec<f64>, Matrix<f64>) {
    let n = a.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[r][order[c]]);
    (values, vectors)
}

/// Rank-`r` SVD through the eigen-decomposition of the smaller Gram matrix.
pub fn gram_svd(m: &Matrix<f64>, r: usize) -> (Matrix<f64>, Vec<f64>, Matrix<f64>) {
    let tall = m.rows() >= m.cols();
    let gram = if tall {
        m.transpose().matmul(m).unwrap()
    } else {
        m.matmul(&m.transpose()).unwrap()
    };
    let (values, vectors) = symmetric_eigen(&gram);
    let s: Vec<f64> = values[..r].iter().map(|l| l.max(0.0).sqrt()).collect();
    let basis = Matrix::from_fn(vectors.rows(), r, |i, k| vectors.get(i, k));
    let other = if tall { m.matmul(&basis).unwrap() } else { m.transpose().matmul(&basis).unwrap() };
    let other = Matrix::from_fn(other.rows(), r, |i, k| other.get(i, k) / s[k]);
    if tall {
        (other, s, basis)
    } else {
        (basis, s, other)
    }
}

/// Direct implementation of the resizing rule: rank by row norm, keep the
/// top rows in index order or append copies in rank order, then multiply out.
pub fn adapt_oracle(gamma: &Matrix<f64>, target_in: usize, target_out: usize, r: usize) -> Matrix<f64> {
    let (u, s, v) = gram_svd(gamma, r);
    let pick = |q: &Matrix<f64>, target: usize| -> Vec<usize> {
        let norms: Vec<f64> = (0..q.rows()).map(|i| q.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let key = |i: usize| if max > 0.0 { (norms[i] / max / SCORE_RESOLUTION).round() } else { 0.0 };
        let mut ranking: Vec<usize> = (0..norms.len()).collect();
        ranking.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
        let d = q.rows();
        if target <= d {
            let mut keep: Vec<usize> = ranking.into_iter().take(target).collect();
            keep.sort_unstable();
            keep
        } else {
            let mut idx: Vec<usize> = (0..d).collect();
            let mut k = 0;
            while idx.len() < target {
                idx.push(ranking[k % d]);
                k += 1;
            }
            idx
        }
    };
    let rows = pick(&u, target_in);
    let cols = pick(&v, target_out);
    Matrix::from_fn(target_in, target_out, |i, j| {
        (0..r).map(|k| u.get(rows[i], k) * s[k] * v.get(cols[j], k)).sum()
    })
}

/// Tiny dense probe model with non-trivial norm gains.
pub fn tiny_dense(seed: u64) -> (DenseModel<f64>, Vec<Vec<u32>>) {
    let cfg = DenseConfig { vocab_size: 7, d_model: 5, d_ff: 6, n_layers: 2, seed };
    let mut model = random_init::<f64>(&cfg).unwrap();
    let mut r = rng(seed, "tiny.norm");
    for layer in &mut model.layers {
        for g in &mut layer.norm {
            *g = r.random_range(0.5..1.5);
        }
    }
    let data = (0..4)
        .map(|_| (0..9).map(|_| r.random_range(0..cfg.vocab_size as u32)).collect())
        .collect();
    (model, data)
}

/// Mutable views of every parameter tensor, labelled, in a fixed order.
pub fn param_slices(model: &mut DenseModel<f64>) -> Vec<(String, &mut [f64])> {
    let mut out: Vec<(String, &mut [f64])> = vec![("embedding".into(), model.embedding.data_mut())];
    for (l, layer) in model.layers.iter_mut().enumerate() {
        out.push((format!("layer{l}.w_in"), layer.w_in.data_mut()));
        out.push((format!("layer{l}.w_out"), layer.w_out.data_mut()));
        out.push((format!("layer{l}.norm"), layer.norm.as_mut_slice()));
    }
    out
}

/// Per tensor, `‖analytic − central difference‖ / ‖central difference‖`.
pub fn gradient_check(model: &DenseModel<f64>, data: &[Vec<u32>], eps: f64) -> Vec<(String, f64)> {
    let (_, grads) = loss_and_grads(model, data).unwrap();
    let mut analytic: Vec<Vec<f64>> = vec![grads.embedding.clone()];
    for g in &grads.layers {
        analytic.push(g.w_in.clone());
        analytic.push(g.w_out.clone());
        analytic.push(g.norm.clone());
    }
    let mut probe = model.clone();
    let n_tensors = analytic.len();
    let mut out = Vec::with_capacity(n_tensors);
    for (t, analytic) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = param_slices(&mut probe)[t].1[i];
            param_slices(&mut probe)[t].1[i] = orig + eps;
            let plus = batch_loss(&probe, data).unwrap();
            param_slices(&mut probe)[t].1[i] = orig - eps;
            let minus = batch_loss(&probe, data).unwrap();
            param_slices(&mut probe)[t].1[i] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        let name = param_slices(&mut probe)[t].0.clone();
        out.push((name, diff / norm.max(f64::MIN_POSITIVE)));
    }
    out
}
