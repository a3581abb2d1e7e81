//! Linear probe: affine-plus-sigmoid classifier trained with BCE and Adam.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::optim::{epoch_batches, AdamW};
use super::{HeadsError, TrainConfig};
use crate::embedstore::{ClassLabel, EmbeddingMatrix};

/// Trained probe parameters plus the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: TrainConfig,
}

impl LinearProbe {
    /// Zero-initialized probe of the given dimension; predicts 0.5 everywhere.
    pub fn zeros(dim: usize, config: TrainConfig) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
            config,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, v: &[f64]) -> f64 {
        super::dot(&self.weights, v) + self.bias
    }
}

/// sigmoid(w . v + b), strictly monotone in the logit.
pub fn predict_probe(probe: &LinearProbe, v: &[f64]) -> Result<f64, HeadsError> {
    if v.len() != probe.dim() {
        return Err(HeadsError::DimMismatch {
            expected: probe.dim(),
            got: v.len(),
        });
    }
    Ok(sigmoid(probe.logit(v)))
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of sigmoid(w . v + b) against tumor=1/normal=0
/// targets, computed from logits for numerical stability.
pub fn bce_loss(
    weights: &[f64],
    bias: f64,
    m: &EmbeddingMatrix,
    labels: &[ClassLabel],
) -> f64 {
    let mut total = 0.0;
    for (row, &label) in m.iter_rows().zip(labels) {
        let z = super::dot(weights, row) + bias;
        let y = label.target();
        // max(z,0) - z*y + ln(1 + exp(-|z|))
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    total / m.rows() as f64
}

fn check_training_inputs(
    m: &EmbeddingMatrix,
    labels: &[ClassLabel],
    cfg: &TrainConfig,
) -> Result<(), HeadsError> {
    cfg.validate()?;
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
    Ok(())
}

/// Trains a probe with Adam and decoupled weight decay on the weights.
///
/// Weights and bias start at zero. The per-epoch visit order is a seeded
/// shuffle, so a fixed seed reproduces parameters bit for bit.
pub fn train_linear_probe(
    m: &EmbeddingMatrix,
    labels: &[ClassLabel],
    cfg: &TrainConfig,
) -> Result<LinearProbe, HeadsError> {
    check_training_inputs(m, labels, cfg)?;
    let dim = m.dim();
    // params = [weights..., bias]; decay spares the bias.
    let mut params = vec![0.0; dim + 1];
    let mut mask = vec![true; dim + 1];
    mask[dim] = false;
    let mut opt = AdamW::new(dim + 1, cfg.learning_rate, cfg.weight_decay, mask);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..m.rows()).collect();
    let mut grads = vec![0.0; dim + 1];

    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&mut order, &mut rng, cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            let inv = 1.0 / batch.len() as f64;
            for &i in &batch {
                let row = m.row(i);
                let z = super::dot(&params[..dim], row) + params[dim];
                let y = labels[i].target();
                loss += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) * inv;
                let delta = (sigmoid(z) - y) * inv;
                for (g, v) in grads[..dim].iter_mut().zip(row) {
                    *g += delta * v;
                }
                grads[dim] += delta;
            }
            if !loss.is_finite() {
                return Err(HeadsError::Divergence { epoch });
            }
            opt.step(&mut params, &grads);
        }
    }

    let bias = params[dim];
    params.truncate(dim);
    Ok(LinearProbe {
        weights: params,
        bias,
        config: cfg.clone(),
    })
}

/// Analytic gradient of [`bce_loss`] with respect to (weights, bias).
pub fn bce_gradient(
    weights: &[f64],
    bias: f64,
    m: &EmbeddingMatrix,
    labels: &[ClassLabel],
) -> (Vec<f64>, f64) {
    let dim = m.dim();
    let mut grad_w = vec![0.0; dim];
    let mut grad_b = 0.0;
    let inv = 1.0 / m.rows() as f64;
    for (row, &label) in m.iter_rows().zip(labels) {
        let z = super::dot(weights, row) + bias;
        let delta = (sigmoid(z) - label.target()) * inv;
        for (g, v) in grad_w.iter_mut().zip(row) {
            *g += delta * v;
        }
        grad_b += delta;
    }
    (grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::{Normal, Tumor};

    fn toy_data() -> (EmbeddingMatrix, Vec<ClassLabel>) {
        let m = EmbeddingMatrix::from_rows(&[
            vec![1.0, 0.2],
            vec![0.8, -0.1],
            vec![-0.9, 0.3],
            vec![-1.1, -0.2],
        ])
        .unwrap();
        (m, vec![Tumor, Tumor, Normal, Normal])
    }

    #[test]
    fn predict_zero_probe_is_half() {
        let probe = LinearProbe::zeros(3, TrainConfig::default());
        assert_eq!(predict_probe(&probe, &[4.0, -2.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn predict_saturates_with_large_bias() {
        let mut probe = LinearProbe::zeros(2, TrainConfig::default());
        probe.bias = 20.0;
        assert!(predict_probe(&probe, &[0.0, 0.0]).unwrap() >= 0.999999);
    }

    #[test]
    fn predict_known_sigmoid_value() {
        let probe = LinearProbe {
            weights: vec![1.0, 0.0],
            bias: 0.0,
            config: TrainConfig::default(),
        };
        let p = predict_probe(&probe, &[3.0_f64.ln(), 9.0]).unwrap();
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn predict_rejects_dim_mismatch() {
        let probe = LinearProbe::zeros(2, TrainConfig::default());
        assert!(matches!(
            predict_probe(&probe, &[1.0]),
            Err(HeadsError::DimMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let (m, labels) = toy_data();
        let cfg = TrainConfig::with_seed(3);
        let a = train_linear_probe(&m, &labels, &cfg).unwrap();
        let b = train_linear_probe(&m, &labels, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
    }

    #[test]
    fn zero_learning_rate_leaves_init() {
        let (m, labels) = toy_data();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let probe = train_linear_probe(&m, &labels, &cfg).unwrap();
        assert_eq!(probe.weights, vec![0.0, 0.0]);
        assert_eq!(probe.bias, 0.0);
    }

    #[test]
    fn training_rejects_single_class() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            train_linear_probe(&m, &[Tumor, Tumor], &TrainConfig::default()),
            Err(HeadsError::SingleClass)
        ));
    }

    #[test]
    fn minibatch_training_runs() {
        let (m, labels) = toy_data();
        let cfg = TrainConfig {
            batch_size: Some(2),
            ..TrainConfig::with_seed(1)
        };
        let probe = train_linear_probe(&m, &labels, &cfg).unwrap();
        assert!(probe.weights.iter().any(|w| *w != 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (m, labels) = toy_data();
        let weights = vec![0.3, -0.7];
        let bias = 0.11;
        let (grad_w, grad_b) = bce_gradient(&weights, bias, &m, &labels);
        let h = 1e-6;
        for d in 0..2 {
            let mut plus = weights.clone();
            let mut minus = weights.clone();
            plus[d] += h;
            minus[d] -= h;
            let numeric =
                (bce_loss(&plus, bias, &m, &labels) - bce_loss(&minus, bias, &m, &labels)) / (2.0 * h);
            let rel = (grad_w[d] - numeric).abs() / (grad_w[d].abs() + numeric.abs() + 1e-12);
            assert!(rel < 1e-4, "dim {d}: analytic {} vs numeric {numeric}", grad_w[d]);
        }
        let numeric = (bce_loss(&weights, bias + h, &m, &labels)
            - bce_loss(&weights, bias - h, &m, &labels))
            / (2.0 * h);
        let rel = (grad_b - numeric).abs() / (grad_b.abs() + numeric.abs() + 1e-12);
        assert!(rel < 1e-4);
    }
}
