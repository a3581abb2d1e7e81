//! Otsu's method: the gray threshold maximizing between-class variance.

use super::PreprocessError;

/// 256-bin intensity histogram over 0..=255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayHistogram {
    bins: [u64; 256],
}

impl GrayHistogram {
    pub fn from_counts(bins: [u64; 256]) -> Self {
        Self { bins }
    }

    pub fn from_gray_pixels(pixels: &[u8]) -> Self {
        let mut bins = [0u64; 256];
        for &p in pixels {
            bins[p as usize] += 1;
        }
        Self { bins }
    }

    pub fn bins(&self) -> &[u64; 256] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    /// Scales every bin count, e.g. for invariance checks.
    pub fn scaled(&self, factor: u64) -> Self {
        let mut bins = self.bins;
        bins.iter_mut().for_each(|b| *b *= factor);
        Self { bins }
    }
}

/// Returns the threshold `t` in 0..=255 maximizing between-class variance,
/// where the split is `<= t` versus `> t`. Ties break toward the smallest
/// `t`. Class sums are carried as exact integers; only the final variance is
/// evaluated in floating point.
pub fn otsu_threshold(h: &GrayHistogram) -> Result<u8, PreprocessError> {
    let total: u128 = h.bins.iter().map(|&b| b as u128).sum();
    if total == 0 {
        return Err(PreprocessError::EmptyHistogram);
    }
    if h.bins.iter().filter(|&&b| b > 0).count() < 2 {
        return Err(PreprocessError::DegenerateHistogram);
    }
    let weighted_total: u128 = h
        .bins
        .iter()
        .enumerate()
        .map(|(i, &b)| i as u128 * b as u128)
        .sum();

    let mut w0: u128 = 0;
    let mut s0: u128 = 0;
    let mut best_t = 0u8;
    let mut best = f64::NEG_INFINITY;
    for t in 0..=255u16 {
        w0 += h.bins[t as usize] as u128;
        s0 += t as u128 * h.bins[t as usize] as u128;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = s0 as f64 / w0 as f64;
        let mu1 = (weighted_total - s0) as f64 / w1 as f64;
        let variance = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if variance > best {
            best = variance;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}
