//! Three-layer MLP projection head trained with symmetric InfoNCE against
//! fixed image embeddings. Only the text side is ever updated.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::optim::{epoch_batches, AdamW};
use super::{HeadsError, TrainConfig};
use crate::embedstore::EmbeddingMatrix;

/// Symmetric InfoNCE over a B x B similarity matrix (row-major) whose
/// diagonal holds the matched pairs: the mean over both softmax directions
/// of the cross-entropy against the diagonal.
///
/// A uniform matrix scores exactly ln B; a strongly dominant diagonal drives
/// the loss to zero.
pub fn infonce_loss(sim: &[f64], b: usize, temperature: f64) -> Result<f64, HeadsError> {
    if b < 2 {
        return Err(HeadsError::BatchTooSmall(b));
    }
    if sim.len() != b * b {
        return Err(HeadsError::NonSquare { len: sim.len(), b });
    }
    if !(temperature > 0.0) {
        return Err(HeadsError::InvalidTemperature(temperature));
    }
    let at = |i: usize, j: usize| sim[i * b + j] / temperature;
    let mut row_total = 0.0;
    let mut col_total = 0.0;
    for i in 0..b {
        row_total += log_sum_exp((0..b).map(|j| at(i, j))) - at(i, i);
        col_total += log_sum_exp((0..b).map(|j| at(j, i))) - at(i, i);
    }
    Ok(0.5 * (row_total + col_total) / b as f64)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    /// out_dim x in_dim, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineLayer {
    fn forward(&self, v: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                super::dot(row, v) + self.bias[o]
            })
            .collect()
    }
}

/// Three affine layers chaining in -> hidden -> hidden -> out with a
/// rectifier between layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub dims: (usize, usize, usize),
    pub layers: [AffineLayer; 3],
    pub config: TrainConfig,
}

impl ProjectionHead {
    /// Seeded Xavier-uniform weights, zero biases.
    pub fn initialize(dims: (usize, usize, usize), cfg: &TrainConfig) -> Result<Self, HeadsError> {
        cfg.validate()?;
        let (d_in, d_hidden, d_out) = dims;
        if d_in == 0 || d_hidden == 0 || d_out == 0 {
            return Err(HeadsError::InvalidConfig(format!(
                "projection dims must be positive, got {dims:?}"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut layer = |in_dim: usize, out_dim: usize| {
            let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
            AffineLayer {
                weights: (0..out_dim * in_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
                bias: vec![0.0; out_dim],
                in_dim,
                out_dim,
            }
        };
        Ok(Self {
            dims,
            layers: [
                layer(d_in, d_hidden),
                layer(d_hidden, d_hidden),
                layer(d_hidden, d_out),
            ],
            config: cfg.clone(),
        })
    }

    /// Maps a text embedding into the image embedding space.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, HeadsError> {
        if v.len() != self.dims.0 {
            return Err(HeadsError::DimMismatch {
                expected: self.dims.0,
                got: v.len(),
            });
        }
        let mut h = self.layers[0].forward(v);
        h.iter_mut().for_each(|x| *x = x.max(0.0));
        let mut h = self.layers[1].forward(&h);
        h.iter_mut().for_each(|x| *x = x.max(0.0));
        Ok(self.layers[2].forward(&h))
    }
}

/// Trains the head to align projected text embeddings with their paired
/// image embeddings under symmetric InfoNCE on cosine similarities.
///
/// Image embeddings are inputs only and never change. Deterministic for a
/// fixed seed: init and epoch shuffles come from one seeded stream.
pub fn train_projection_head(
    text: &EmbeddingMatrix,
    images: &EmbeddingMatrix,
    dims: (usize, usize, usize),
    cfg: &TrainConfig,
) -> Result<ProjectionHead, HeadsError> {
    if text.rows() != images.rows() {
        return Err(HeadsError::LabelAlignment {
            labels: images.rows(),
            rows: text.rows(),
        });
    }
    if text.rows() < 2 {
        return Err(HeadsError::BatchTooSmall(text.rows()));
    }
    if text.dim() != dims.0 {
        return Err(HeadsError::DimMismatch {
            expected: dims.0,
            got: text.dim(),
        });
    }
    if images.dim() != dims.2 {
        return Err(HeadsError::DimMismatch {
            expected: dims.2,
            got: images.dim(),
        });
    }
    if cfg.batch_size == Some(1) {
        return Err(HeadsError::BatchTooSmall(1));
    }
    let mut head = ProjectionHead::initialize(dims, cfg)?;

    // Unit image embeddings, fixed for the whole run.
    let mut image_hat = Vec::with_capacity(images.rows());
    for row in images.iter_rows() {
        image_hat.push(super::normalize(row.to_vec())?);
    }

    let n_params: usize = head
        .layers
        .iter()
        .map(|l| l.weights.len() + l.bias.len())
        .sum();
    let mut decay_mask = Vec::with_capacity(n_params);
    for l in &head.layers {
        decay_mask.extend(std::iter::repeat_n(true, l.weights.len()));
        decay_mask.extend(std::iter::repeat_n(false, l.bias.len()));
    }
    let mut opt = AdamW::new(n_params, cfg.learning_rate, cfg.weight_decay, decay_mask);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..text.rows()).collect();
    let (d_in, d_hidden, d_out) = dims;
    let tau = cfg.temperature;

    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&mut order, &mut rng, cfg.batch_size) {
            let b = batch.len();
            // Forward pass, keeping intermediates for backprop.
            let mut pre1 = Vec::with_capacity(b);
            let mut h1 = Vec::with_capacity(b);
            let mut pre2 = Vec::with_capacity(b);
            let mut h2 = Vec::with_capacity(b);
            let mut proj = Vec::with_capacity(b);
            let mut proj_hat = Vec::with_capacity(b);
            let mut proj_norm = Vec::with_capacity(b);
            for &i in &batch {
                let t = text.row(i);
                let p1 = head.layers[0].forward(t);
                let a1: Vec<f64> = p1.iter().map(|x| x.max(0.0)).collect();
                let p2 = head.layers[1].forward(&a1);
                let a2: Vec<f64> = p2.iter().map(|x| x.max(0.0)).collect();
                let p = head.layers[2].forward(&a2);
                let n = super::norm(&p).max(1e-300);
                proj_hat.push(p.iter().map(|x| x / n).collect::<Vec<f64>>());
                proj_norm.push(n);
                pre1.push(p1);
                h1.push(a1);
                pre2.push(p2);
                h2.push(a2);
                proj.push(p);
            }
            let mut sim = vec![0.0; b * b];
            for r in 0..b {
                for c in 0..b {
                    sim[r * b + c] = super::dot(&proj_hat[r], &image_hat[batch[c]]);
                }
            }
            let loss = infonce_loss(&sim, b, tau)?;
            if !loss.is_finite() {
                return Err(HeadsError::Divergence { epoch });
            }

            // dL/dsim via row and column softmaxes of sim/tau.
            let scaled: Vec<f64> = sim.iter().map(|s| s / tau).collect();
            let mut d_sim = vec![0.0; b * b];
            let inv = 1.0 / (2.0 * b as f64 * tau);
            for r in 0..b {
                let lse = log_sum_exp((0..b).map(|c| scaled[r * b + c]));
                for c in 0..b {
                    let p = (scaled[r * b + c] - lse).exp();
                    d_sim[r * b + c] += (p - if r == c { 1.0 } else { 0.0 }) * inv;
                }
            }
            for c in 0..b {
                let lse = log_sum_exp((0..b).map(|r| scaled[r * b + c]));
                for r in 0..b {
                    let p = (scaled[r * b + c] - lse).exp();
                    d_sim[r * b + c] += (p - if r == c { 1.0 } else { 0.0 }) * inv;
                }
            }

            let mut g1w = vec![0.0; d_hidden * d_in];
            let mut g1b = vec![0.0; d_hidden];
            let mut g2w = vec![0.0; d_hidden * d_hidden];
            let mut g2b = vec![0.0; d_hidden];
            let mut g3w = vec![0.0; d_out * d_hidden];
            let mut g3b = vec![0.0; d_out];

            for r in 0..b {
                // dL/dproj_hat[r], then through the normalization.
                let mut d_hat = vec![0.0; d_out];
                for c in 0..b {
                    let w = d_sim[r * b + c];
                    if w != 0.0 {
                        for (dh, x) in d_hat.iter_mut().zip(&image_hat[batch[c]]) {
                            *dh += w * x;
                        }
                    }
                }
                let radial = super::dot(&d_hat, &proj_hat[r]);
                let d_proj: Vec<f64> = d_hat
                    .iter()
                    .zip(&proj_hat[r])
                    .map(|(g, ph)| (g - radial * ph) / proj_norm[r])
                    .collect();

                for o in 0..d_out {
                    let g = d_proj[o];
                    if g != 0.0 {
                        for (slot, h) in g3w[o * d_hidden..(o + 1) * d_hidden].iter_mut().zip(&h2[r])
                        {
                            *slot += g * h;
                        }
                        g3b[o] += g;
                    }
                }
                let mut d_h2 = vec![0.0; d_hidden];
                for o in 0..d_out {
                    let g = d_proj[o];
                    if g != 0.0 {
                        let row = &head.layers[2].weights[o * d_hidden..(o + 1) * d_hidden];
                        for (dh, w) in d_h2.iter_mut().zip(row) {
                            *dh += g * w;
                        }
                    }
                }
                let d_pre2: Vec<f64> = d_h2
                    .iter()
                    .zip(&pre2[r])
                    .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                    .collect();
                for o in 0..d_hidden {
                    let g = d_pre2[o];
                    if g != 0.0 {
                        for (slot, h) in g2w[o * d_hidden..(o + 1) * d_hidden].iter_mut().zip(&h1[r])
                        {
                            *slot += g * h;
                        }
                        g2b[o] += g;
                    }
                }
                let mut d_h1 = vec![0.0; d_hidden];
                for o in 0..d_hidden {
                    let g = d_pre2[o];
                    if g != 0.0 {
                        let row = &head.layers[1].weights[o * d_hidden..(o + 1) * d_hidden];
                        for (dh, w) in d_h1.iter_mut().zip(row) {
                            *dh += g * w;
                        }
                    }
                }
                let d_pre1: Vec<f64> = d_h1
                    .iter()
                    .zip(&pre1[r])
                    .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                    .collect();
                let t = text.row(batch[r]);
                for o in 0..d_hidden {
                    let g = d_pre1[o];
                    if g != 0.0 {
                        for (slot, x) in g1w[o * d_in..(o + 1) * d_in].iter_mut().zip(t) {
                            *slot += g * x;
                        }
                        g1b[o] += g;
                    }
                }
            }

            let mut params = Vec::with_capacity(n_params);
            let mut grads = Vec::with_capacity(n_params);
            for (layer, (gw, gb)) in head
                .layers
                .iter()
                .zip([(&g1w, &g1b), (&g2w, &g2b), (&g3w, &g3b)])
            {
                params.extend_from_slice(&layer.weights);
                params.extend_from_slice(&layer.bias);
                grads.extend_from_slice(gw);
                grads.extend_from_slice(gb);
            }
            opt.step(&mut params, &grads);
            let mut offset = 0;
            for layer in &mut head.layers {
                let w_len = layer.weights.len();
                layer.weights.copy_from_slice(&params[offset..offset + w_len]);
                offset += w_len;
                let b_len = layer.bias.len();
                layer.bias.copy_from_slice(&params[offset..offset + b_len]);
                offset += b_len;
            }
        }
    }
    Ok(head)
}
