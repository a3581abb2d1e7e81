//! Residual bottleneck adapter: down-project, rectify, up-project, add,
//! then classify with a linear probe on the adapted embedding.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::optim::{epoch_batches, AdamW};
use super::probe::sigmoid;
use super::{HeadsError, LinearProbe, TrainConfig};
use crate::embedstore::{ClassLabel, EmbeddingMatrix};

/// Low-rank residual transform plus terminal probe.
///
/// The up-projection starts at zero, so an untrained adapter is exactly the
/// identity map and its scores match a bare probe on raw embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckAdapter {
    pub rank: usize,
    pub dim: usize,
    /// rank x dim, row-major.
    pub down_weights: Vec<f64>,
    pub down_bias: Vec<f64>,
    /// dim x rank, row-major.
    pub up_weights: Vec<f64>,
    pub up_bias: Vec<f64>,
    pub probe: LinearProbe,
    pub config: TrainConfig,
}

impl BottleneckAdapter {
    /// Fresh adapter: seeded uniform down-projection, zero up-projection and
    /// probe. Identity on embeddings until trained.
    pub fn initialize(rank: usize, dim: usize, cfg: &TrainConfig) -> Result<Self, HeadsError> {
        cfg.validate()?;
        if rank == 0 || rank > dim {
            return Err(HeadsError::InvalidRank { rank, dim });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let down_weights = (0..rank * dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Self {
            rank,
            dim,
            down_weights,
            down_bias: vec![0.0; rank],
            up_weights: vec![0.0; dim * rank],
            up_bias: vec![0.0; dim],
            probe: LinearProbe::zeros(dim, cfg.clone()),
            config: cfg.clone(),
        })
    }

    /// v + Up(relu(Down(v))).
    pub fn adapt(&self, v: &[f64]) -> Result<Vec<f64>, HeadsError> {
        if v.len() != self.dim {
            return Err(HeadsError::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let hidden = self.hidden(v);
        let mut out = v.to_vec();
        for d in 0..self.dim {
            let row = &self.up_weights[d * self.rank..(d + 1) * self.rank];
            out[d] += super::dot(row, &hidden) + self.up_bias[d];
        }
        Ok(out)
    }

    /// Tumor probability from the terminal probe on the adapted embedding.
    pub fn predict(&self, v: &[f64]) -> Result<f64, HeadsError> {
        let adapted = self.adapt(v)?;
        super::predict_probe(&self.probe, &adapted)
    }

    fn hidden(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rank)
            .map(|r| {
                let row = &self.down_weights[r * self.dim..(r + 1) * self.dim];
                (super::dot(row, v) + self.down_bias[r]).max(0.0)
            })
            .collect()
    }
}

// Flat parameter layout for the optimizer.
struct Layout {
    rank: usize,
    dim: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.rank * self.dim + self.rank + self.dim * self.rank + self.dim + self.dim + 1
    }
    fn down_w(&self) -> std::ops::Range<usize> {
        0..self.rank * self.dim
    }
    fn down_b(&self) -> std::ops::Range<usize> {
        let s = self.rank * self.dim;
        s..s + self.rank
    }
    fn up_w(&self) -> std::ops::Range<usize> {
        let s = self.rank * self.dim + self.rank;
        s..s + self.dim * self.rank
    }
    fn up_b(&self) -> std::ops::Range<usize> {
        let s = self.rank * self.dim + self.rank + self.dim * self.rank;
        s..s + self.dim
    }
    fn probe_w(&self) -> std::ops::Range<usize> {
        let s = self.rank * self.dim + self.rank + self.dim * self.rank + self.dim;
        s..s + self.dim
    }
    fn probe_b(&self) -> usize {
        self.len() - 1
    }
    fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        mask[self.down_w()].fill(true);
        mask[self.up_w()].fill(true);
        mask[self.probe_w()].fill(true);
        mask
    }
}

/// Trains adapter and terminal probe jointly with the probe recipe: BCE,
/// Adam, decoupled weight decay on weight matrices, seeded epoch shuffles.
pub fn train_adapter(
    m: &EmbeddingMatrix,
    labels: &[ClassLabel],
    rank: usize,
    cfg: &TrainConfig,
) -> Result<BottleneckAdapter, HeadsError> {
    let init = BottleneckAdapter::initialize(rank, m.dim(), cfg)?;
    if m.rows() == 0 {
        return Err(HeadsError::EmptyTrainingSet);
    }
    if labels.len() != m.rows() {
        return Err(HeadsError::LabelAlignment {
            labels: labels.len(),
            rows: m.rows(),
        });
    }
    let tumors = labels.iter().filter(|&&l| l == ClassLabel::Tumor).count();
    if tumors == 0 || tumors == labels.len() {
        return Err(HeadsError::SingleClass);
    }

    let layout = Layout { rank, dim: m.dim() };
    let mut params = vec![0.0; layout.len()];
    params[layout.down_w()].copy_from_slice(&init.down_weights);

    let mut opt = AdamW::new(
        layout.len(),
        cfg.learning_rate,
        cfg.weight_decay,
        layout.decay_mask(),
    );
    // Distinct stream from the init draw so adding epochs never replays it.
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..m.rows()).collect();
    let mut grads = vec![0.0; layout.len()];
    let (rank_n, dim) = (rank, m.dim());

    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&mut order, &mut rng, cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            let inv = 1.0 / batch.len() as f64;
            for &i in &batch {
                let v = m.row(i);
                // Forward.
                let pre: Vec<f64> = (0..rank_n)
                    .map(|r| {
                        let row = &params[layout.down_w()][r * dim..(r + 1) * dim];
                        super::dot(row, v) + params[layout.down_b()][r]
                    })
                    .collect();
                let hidden: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
                let adapted: Vec<f64> = (0..dim)
                    .map(|d| {
                        let row = &params[layout.up_w()][d * rank_n..(d + 1) * rank_n];
                        v[d] + super::dot(row, &hidden) + params[layout.up_b()][d]
                    })
                    .collect();
                let z = super::dot(&params[layout.probe_w()], &adapted) + params[layout.probe_b()];
                let y = labels[i].target();
                loss += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) * inv;

                // Backward.
                let dz = (sigmoid(z) - y) * inv;
                let probe_w_range = layout.probe_w();
                for d in 0..dim {
                    grads[probe_w_range.start + d] += dz * adapted[d];
                }
                grads[layout.probe_b()] += dz;
                let d_adapted: Vec<f64> =
                    (0..dim).map(|d| dz * params[probe_w_range.clone()][d]).collect();
                let up_w_range = layout.up_w();
                let mut d_hidden = vec![0.0; rank_n];
                for d in 0..dim {
                    for r in 0..rank_n {
                        grads[up_w_range.start + d * rank_n + r] += d_adapted[d] * hidden[r];
                        d_hidden[r] += d_adapted[d] * params[up_w_range.clone()][d * rank_n + r];
                    }
                    grads[layout.up_b().start + d] += d_adapted[d];
                }
                let down_w_range = layout.down_w();
                for r in 0..rank_n {
                    if pre[r] > 0.0 {
                        let d_pre = d_hidden[r];
                        for d in 0..dim {
                            grads[down_w_range.start + r * dim + d] += d_pre * v[d];
                        }
                        grads[layout.down_b().start + r] += d_pre;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(HeadsError::Divergence { epoch });
            }
            opt.step(&mut params, &grads);
        }
    }

    Ok(BottleneckAdapter {
        rank,
        dim,
        down_weights: params[layout.down_w()].to_vec(),
        down_bias: params[layout.down_b()].to_vec(),
        up_weights: params[layout.up_w()].to_vec(),
        up_bias: params[layout.up_b()].to_vec(),
        probe: LinearProbe {
            weights: params[layout.probe_w()].to_vec(),
            bias: params[layout.probe_b()],
            config: cfg.clone(),
        },
        config: cfg.clone(),
    })
}
