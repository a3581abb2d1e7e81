//! Adam with decoupled weight decay over a flat parameter vector.

pub(crate) const BETA1: f64 = 0.9;
pub(crate) const BETA2: f64 = 0.999;
pub(crate) const EPS: f64 = 1e-8;

/// Decay is applied only where the mask is set (weights, not biases), so the
/// loss gradient stays exactly the data-term gradient.
pub(crate) struct AdamW {
    learning_rate: f64,
    weight_decay: f64,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(n: usize, learning_rate: f64, weight_decay: f64, decay_mask: Vec<bool>) -> Self {
        assert_eq!(decay_mask.len(), n);
        Self {
            learning_rate,
            weight_decay,
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            decay_mask,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = BETA1 * self.first_moment[i] + (1.0 - BETA1) * g;
            self.second_moment[i] = BETA2 * self.second_moment[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.first_moment[i] / bias1;
            let v_hat = self.second_moment[i] / bias2;
            let mut update = m_hat / (v_hat.sqrt() + EPS);
            if self.decay_mask[i] {
                update += self.weight_decay * params[i];
            }
            params[i] -= self.learning_rate * update;
        }
    }
}

/// Epoch-wise batch schedule: a seeded shuffle of `0..n` chunked by
/// `batch_size` (`None` = one full batch). A trailing single-element chunk is
/// merged into its predecessor so every batch has at least two rows whenever
/// `n >= 2`.
pub(crate) fn epoch_batches(
    order: &mut [usize],
    rng: &mut rand_chacha::ChaCha12Rng,
    batch_size: Option<usize>,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
    let n = order.len();
    let size = batch_size.unwrap_or(n).max(1);
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().map(|b| b.len()) == Some(1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}
