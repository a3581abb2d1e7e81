//! Anti-aliased bilinear downscaling.
//!
//! The bilinear (tent) kernel is widened by the scale factor so source
//! detail is low-passed before resampling, then normalized per output pixel;
//! each kernel row sums to one, so constant images stay constant.

use super::{PreprocessError, RGBPatch};

struct Kernel {
    start: usize,
    weights: Vec<f64>,
}

/// Per-output-index tent kernels for one axis. `in_len >= out_len`.
fn tent_kernels(in_len: usize, out_len: usize) -> Vec<Kernel> {
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    (0..out_len)
        .map(|j| {
            let center = (j as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).ceil().max(0.0) as usize;
            let hi = (center + support).floor().min((in_len - 1) as f64) as usize;
            let mut weights: Vec<f64> = (lo..=hi)
                .map(|i| 1.0 - (i as f64 - center).abs() / support)
                .collect();
            // Window clipping at the borders makes raw weights sum below one.
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            Kernel { start: lo, weights }
        })
        .collect()
}

/// Downscales with an anti-aliased bilinear filter. Requests to upscale on
/// either axis are rejected.
pub fn resize_bilinear_aa(
    p: &RGBPatch,
    out_w: usize,
    out_h: usize,
) -> Result<RGBPatch, PreprocessError> {
    if out_w == 0 || out_h == 0 {
        return Err(PreprocessError::EmptyOutput);
    }
    if out_w > p.width() || out_h > p.height() {
        return Err(PreprocessError::Upscale {
            in_w: p.width(),
            in_h: p.height(),
            out_w,
            out_h,
        });
    }
    let horizontal = tent_kernels(p.width(), out_w);
    let vertical = tent_kernels(p.height(), out_h);

    // Horizontal pass into f64, then vertical pass, then quantize.
    let mut mid = vec![0.0f64; p.height() * out_w * 3];
    let data = p.data();
    for y in 0..p.height() {
        let row = &data[y * p.width() * 3..(y + 1) * p.width() * 3];
        for (ox, kernel) in horizontal.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for (k, &w) in kernel.weights.iter().enumerate() {
                let i = (kernel.start + k) * 3;
                acc[0] += w * row[i] as f64;
                acc[1] += w * row[i + 1] as f64;
                acc[2] += w * row[i + 2] as f64;
            }
            let o = (y * out_w + ox) * 3;
            mid[o] = acc[0];
            mid[o + 1] = acc[1];
            mid[o + 2] = acc[2];
        }
    }

    let mut out = Vec::with_capacity(out_w * out_h * 3);
    for kernel in &vertical {
        for ox in 0..out_w {
            let mut acc = [0.0f64; 3];
            for (k, &w) in kernel.weights.iter().enumerate() {
                let i = ((kernel.start + k) * out_w + ox) * 3;
                acc[0] += w * mid[i];
                acc[1] += w * mid[i + 1];
                acc[2] += w * mid[i + 2];
            }
            for c in acc {
                out.push(c.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RGBPatch::new(out_w, out_h, out)
}
