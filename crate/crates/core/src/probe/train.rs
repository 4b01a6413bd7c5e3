//! Hand-derived forward and backward passes for the dense probe model and a
//! plain full-batch SGD loop.
//!
//! Graph per token `a → b`: `x = E[a]`, then per block
//! `x ← x + W_out·gelu(W_in·(rmsnorm(x)⊙g))`, logits `E·x`, loss `−log softmax(logits)[b]`.

use crate::init::DenseModel;
use crate::moe::RMS_EPS;
use crate::scalar::{gelu, gelu_grad, Scalar};

use super::ProbeError;

/// Gradients laid out like the parameters they belong to (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub embedding: Vec<f64>,
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w_in: Vec<f64>,
    pub w_out: Vec<f64>,
    pub norm: Vec<f64>,
}

impl DenseGrads {
    fn zeros<T: Scalar>(model: &DenseModel<T>) -> Self {
        Self {
            embedding: vec![0.0; model.embedding.data().len()],
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    w_in: vec![0.0; l.w_in.data().len()],
                    w_out: vec![0.0; l.w_out.data().len()],
                    norm: vec![0.0; l.norm.len()],
                })
                .collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        let all = std::iter::once(&mut self.embedding).chain(
            self.layers
                .iter_mut()
                .flat_map(|l| [&mut l.w_in, &mut l.w_out, &mut l.norm]),
        );
        for v in all {
            v.iter_mut().for_each(|g| *g *= s);
        }
    }
}

struct BlockCache {
    inv_rms: f64,
    normed: Vec<f64>,
    gated: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct Forward {
    caches: Vec<BlockCache>,
    out: Vec<f64>,
    probs: Vec<f64>,
}

fn matvec<T: Scalar>(w: &[T], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| w[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a.as_f64() * b).sum())
        .collect()
}

fn forward<T: Scalar>(model: &DenseModel<T>, token: usize) -> Forward {
    let (v, d, f) = (model.vocab_size(), model.d_model(), model.d_ff());
    let emb = model.embedding.data();
    let mut x: Vec<f64> = emb[token * d..(token + 1) * d].iter().map(|e| e.as_f64()).collect();
    let mut caches = Vec::with_capacity(model.n_layers());
    for layer in &model.layers {
        let ms = x.iter().map(|a| a * a).sum::<f64>() / d as f64;
        let inv_rms = 1.0 / (ms + RMS_EPS).sqrt();
        let normed: Vec<f64> = x.iter().map(|a| a * inv_rms).collect();
        let gated: Vec<f64> = normed.iter().zip(&layer.norm).map(|(n, g)| n * g.as_f64()).collect();
        let pre = matvec(layer.w_in.data(), f, d, &gated);
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let y = matvec(layer.w_out.data(), d, f, &act);
        x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        caches.push(BlockCache {
            inv_rms,
            normed,
            gated,
            pre,
            act,
        });
    }
    let logits = matvec(emb, v, d, &x);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Forward {
        caches,
        out: x,
        probs: exps.into_iter().map(|e| e / total).collect(),
    }
}

/// Softmax over the vocabulary for the token following `token`.
pub fn next_token_probs<T: Scalar>(model: &DenseModel<T>, token: usize) -> Vec<f64> {
    forward(model, token).probs
}

fn transitions(data: &[Vec<u32>]) -> impl Iterator<Item = (usize, usize)> + '_ {
    data.iter()
        .flat_map(|s| s.windows(2).map(|w| (w[0] as usize, w[1] as usize)))
}

/// `counts[a][b]` = occurrences of `a → b`, after validating token ids.
fn bigram_counts<T: Scalar>(model: &DenseModel<T>, data: &[Vec<u32>]) -> Result<(Vec<Vec<f64>>, usize), ProbeError> {
    let v = model.vocab_size();
    if let Some(t) = data.iter().flatten().find(|&&t| t as usize >= v) {
        return Err(ProbeError::InvalidData(format!("token {t} outside vocabulary of {v}")));
    }
    let mut counts = vec![vec![0.0; v]; v];
    let mut n = 0;
    for (a, b) in transitions(data) {
        counts[a][b] += 1.0;
        n += 1;
    }
    if n == 0 {
        return Err(ProbeError::InvalidData("no next-token pairs in data".into()));
    }
    Ok((counts, n))
}

/// Mean next-token cross-entropy over every adjacent pair in `data`.
pub fn batch_loss<T: Scalar>(model: &DenseModel<T>, data: &[Vec<u32>]) -> Result<f64, ProbeError> {
    let (counts, n) = bigram_counts(model, data)?;
    let mut total = 0.0;
    for (a, row) in counts.iter().enumerate() {
        if row.iter().any(|&c| c > 0.0) {
            let probs = forward(model, a).probs;
            total -= row.iter().zip(&probs).filter(|(c, _)| **c > 0.0).map(|(c, p)| c * p.ln()).sum::<f64>();
        }
    }
    Ok(total / n as f64)
}

/// Mean loss and its exact gradient with respect to every parameter.
///
/// The graph has no context beyond the current token, so the pass runs once
/// per distinct source token with the logit gradient weighted by bigram counts.
pub fn loss_and_grads<T: Scalar>(model: &DenseModel<T>, data: &[Vec<u32>]) -> Result<(f64, DenseGrads), ProbeError> {
    let (counts, n) = bigram_counts(model, data)?;
    let (v, d, f) = (model.vocab_size(), model.d_model(), model.d_ff());
    let emb = model.embedding.data();
    let mut grads = DenseGrads::zeros(model);
    let mut total = 0.0;
    for (a, row) in counts.iter().enumerate() {
        let n_a: f64 = row.iter().sum();
        if n_a == 0.0 {
            continue;
        }
        let fw = forward(model, a);
        total -= row.iter().zip(&fw.probs).filter(|(c, _)| **c > 0.0).map(|(c, p)| c * p.ln()).sum::<f64>();
        let dlogits: Vec<f64> = fw.probs.iter().zip(row).map(|(p, c)| n_a * p - c).collect();
        let mut dx = vec![0.0; d];
        for (tok, &g) in dlogits.iter().enumerate().take(v) {
            let e_row = &emb[tok * d..(tok + 1) * d];
            let grow = &mut grads.embedding[tok * d..(tok + 1) * d];
            for j in 0..d {
                grow[j] += g * fw.out[j];
                dx[j] += g * e_row[j].as_f64();
            }
        }
        for (layer, (cache, lg)) in model
            .layers
            .iter()
            .zip(fw.caches.iter().zip(grads.layers.iter_mut()))
            .rev()
        {
            let w_out = layer.w_out.data();
            let w_in = layer.w_in.data();
            let mut dz = vec![0.0; f];
            for j in 0..d {
                for h in 0..f {
                    lg.w_out[j * f + h] += dx[j] * cache.act[h];
                    dz[h] += w_out[j * f + h].as_f64() * dx[j];
                }
            }
            for (h, z) in dz.iter_mut().enumerate() {
                *z *= gelu_grad(cache.pre[h]);
            }
            let mut dgated = vec![0.0; d];
            for h in 0..f {
                for j in 0..d {
                    lg.w_in[h * d + j] += dz[h] * cache.gated[j];
                    dgated[j] += w_in[h * d + j].as_f64() * dz[h];
                }
            }
            let mut dnormed = vec![0.0; d];
            for j in 0..d {
                lg.norm[j] += dgated[j] * cache.normed[j];
                dnormed[j] = dgated[j] * layer.norm[j].as_f64();
            }
            let proj = dnormed.iter().zip(&cache.normed).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                dx[j] += (dnormed[j] - cache.normed[j] * proj) * cache.inv_rms;
            }
        }
        let grow = &mut grads.embedding[a * d..(a + 1) * d];
        grow.iter_mut().zip(&dx).for_each(|(g, v)| *g += v);
    }
    grads.scale(1.0 / n as f64);
    Ok((total / n as f64, grads))
}

fn apply<T: Scalar>(params: &mut [T], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p = T::from_f64_lossy(p.as_f64() - lr * g);
    }
}

/// `θ ← θ − lr·∇θ`.
pub fn sgd_step<T: Scalar>(model: &mut DenseModel<T>, grads: &DenseGrads, lr: f64) {
    apply(model.embedding.data_mut(), &grads.embedding, lr);
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        apply(layer.w_in.data_mut(), &g.w_in, lr);
        apply(layer.w_out.data_mut(), &g.w_out, lr);
        apply(&mut layer.norm, &g.norm, lr);
    }
}

/// Full-batch SGD for `steps` updates. Entry `s` of the returned curve is the
/// loss after `s` updates, so the curve has `steps + 1` entries.
pub fn train_dense<T: Scalar>(
    model: &mut DenseModel<T>,
    data: &[Vec<u32>],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>, ProbeError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(ProbeError::InvalidConfig(format!("learning rate must be non-negative, got {lr}")));
    }
    let mut curve = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grads) = loss_and_grads(model, data)?;
        if !loss.is_finite() {
            return Err(ProbeError::Diverged { step });
        }
        curve.push(loss);
        if step < steps {
            sgd_step(model, &grads, lr);
        }
    }
    Ok(curve)
}
