//! Optical-density conversion and Macenko stain estimation/normalization.
//!
//! Pixels are mapped to Beer-Lambert absorbance (base-10 optical density),
//! the two dominant stain directions are estimated from the top-2
//! right-singular plane of the OD cloud via angle percentiles, and images
//! are re-rendered through a reference basis after per-stain concentration
//! rescaling.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{PreprocessError, RGBPatch};

/// Estimation parameters. Defaults follow the common Macenko conventions:
/// transparent pixels are rejected below an OD-norm floor of 0.15, stain
/// directions sit at the 1st/99th angle percentiles, and per-stain maximum
/// concentrations at the 99th percentile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacenkoParams {
    pub alpha_percentile: f64,
    pub od_floor: f64,
    pub max_concentration_percentile: f64,
    /// White reference intensity.
    pub i0: f64,
    /// Intensity floor as a fraction of `i0`; keeps log finite on black.
    pub eps: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self {
            alpha_percentile: 1.0,
            od_floor: 0.15,
            max_concentration_percentile: 99.0,
            i0: 255.0,
            eps: 1.0 / 255.0,
        }
    }
}

/// OD = -log10(max(I, eps*i0) / i0). White maps to exactly 0.
pub fn od_value(intensity: f64, i0: f64, eps: f64) -> f64 {
    let floored = intensity.max(eps * i0);
    -(floored / i0).log10()
}

/// Per-pixel optical-density triples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ODImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ODImage {
    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }
}

/// Converts 8-bit RGB to optical density per channel.
pub fn rgb_to_od(p: &RGBPatch, i0: f64, eps: f64) -> ODImage {
    let data = p
        .data()
        .chunks_exact(3)
        .map(|px| {
            [
                od_value(px[0] as f64, i0, eps),
                od_value(px[1] as f64, i0, eps),
                od_value(px[2] as f64, i0, eps),
            ]
        })
        .collect();
    ODImage {
        width: p.width(),
        height: p.height(),
        data,
    }
}

/// Unit hematoxylin and eosin directions in OD space, H before E.
///
/// Hematoxylin is disambiguated as the column with the larger blue-channel
/// OD component; all components are non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainMatrix {
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
}

/// A fitted stain basis plus per-stain maximum (99th percentile)
/// concentrations, the pair needed to normalize against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainFit {
    pub stains: StainMatrix,
    pub max_concentrations: [f64; 2],
}

/// JSON-configurable reference basis: `{"h":[r,g,b],"e":[r,g,b],"max_c":[cH,cE]}`
/// in OD units. Columns are normalized on conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStain {
    pub h: [f64; 3],
    pub e: [f64; 3],
    pub max_c: [f64; 2],
}

impl ReferenceStain {
    pub fn to_fit(self) -> Result<StainFit, PreprocessError> {
        let normalize = |v: [f64; 3]| -> Result<[f64; 3], PreprocessError> {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(PreprocessError::DegenerateStain(
                    "reference stain vector has zero norm".into(),
                ));
            }
            Ok([v[0] / n, v[1] / n, v[2] / n])
        };
        Ok(StainFit {
            stains: StainMatrix {
                hematoxylin: normalize(self.h)?,
                eosin: normalize(self.e)?,
            },
            max_concentrations: self.max_c,
        })
    }
}

/// Conventional H&E reference basis used when no reference file is given.
pub fn default_reference() -> StainFit {
    ReferenceStain {
        h: [0.65, 0.70, 0.29],
        e: [0.07, 0.99, 0.11],
        max_c: [1.9705, 1.0308],
    }
    .to_fit()
    .expect("built-in reference is valid")
}

/// Linear-interpolation percentile of a sorted slice.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Least-squares concentrations of a single OD pixel against the stain
/// basis, with negative coordinates clipped at zero (physical
/// concentrations cannot be negative).
pub fn stain_concentrations(od: [f64; 3], stains: &StainMatrix) -> [f64; 2] {
    let h = stains.hematoxylin;
    let e = stains.eosin;
    let hh: f64 = h.iter().map(|v| v * v).sum();
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let he: f64 = h.iter().zip(&e).map(|(a, b)| a * b).sum();
    let oh: f64 = od.iter().zip(&h).map(|(a, b)| a * b).sum();
    let oe: f64 = od.iter().zip(&e).map(|(a, b)| a * b).sum();
    let det = hh * ee - he * he;
    if det.abs() < 1e-12 {
        return [0.0, 0.0];
    }
    let ch = (oh * ee - oe * he) / det;
    let ce = (oe * hh - oh * he) / det;
    [ch.max(0.0), ce.max(0.0)]
}

/// Per-stain rescale toward a reference: c * (reference_max / fitted_max).
pub fn rescale_concentrations(
    c: [f64; 2],
    fitted_max: [f64; 2],
    reference_max: [f64; 2],
) -> [f64; 2] {
    [
        c[0] * (reference_max[0] / fitted_max[0].max(1e-8)),
        c[1] * (reference_max[1] / fitted_max[1].max(1e-8)),
    ]
}

/// Estimates the H&E stain basis of an OD image.
///
/// Steps: reject transparent pixels below the OD-norm floor, take the top-2
/// eigenplane of the second-moment matrix, pick the `alpha` and
/// `100 - alpha` angle percentiles in that plane as the extreme stain
/// directions, force non-negative components, and order columns by
/// blue-channel magnitude (hematoxylin first). Maximum concentrations come
/// from the requested percentile over all pixels.
pub fn macenko_fit(od: &ODImage, params: &MacenkoParams) -> Result<StainFit, PreprocessError> {
    let kept: Vec<Vector3<f64>> = od
        .data
        .iter()
        .filter(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() > params.od_floor)
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect();
    if kept.len() < 2 {
        return Err(PreprocessError::DegenerateStain(format!(
            "only {} OD pixels above the floor {}",
            kept.len(),
            params.od_floor
        )));
    }

    let mut moment = Matrix3::zeros();
    for p in &kept {
        moment += p * p.transpose();
    }
    let eigen = moment.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let lambda0 = eigen.eigenvalues[order[0]].max(0.0);
    let lambda1 = eigen.eigenvalues[order[1]].max(0.0);
    if lambda0 <= 0.0 || lambda1 <= lambda0 * 1e-9 {
        return Err(PreprocessError::DegenerateStain(
            "OD cloud is rank-deficient (single stain or grayscale input)".into(),
        ));
    }
    let mut e1: Vector3<f64> = eigen.eigenvectors.column(order[0]).into();
    let mut e2: Vector3<f64> = eigen.eigenvectors.column(order[1]).into();
    // Orient the plane axes toward the data so angles stay unwrapped.
    let mean: Vector3<f64> = kept.iter().sum::<Vector3<f64>>() / kept.len() as f64;
    if mean.dot(&e1) < 0.0 {
        e1 = -e1;
    }
    if mean.dot(&e2) < 0.0 {
        e2 = -e2;
    }

    let mut angles: Vec<f64> = kept.iter().map(|p| p.dot(&e2).atan2(p.dot(&e1))).collect();
    angles.sort_by(f64::total_cmp);
    let phi_lo = percentile_sorted(&angles, params.alpha_percentile);
    let phi_hi = percentile_sorted(&angles, 100.0 - params.alpha_percentile);

    let direction = |phi: f64| -> Result<[f64; 3], PreprocessError> {
        let v = e1 * phi.cos() + e2 * phi.sin();
        let v = if v.sum() < 0.0 { -v } else { v };
        let clipped = Vector3::new(v[0].max(0.0), v[1].max(0.0), v[2].max(0.0));
        let n = clipped.norm();
        if n == 0.0 {
            return Err(PreprocessError::DegenerateStain(
                "stain direction collapsed to zero after sign correction".into(),
            ));
        }
        Ok([clipped[0] / n, clipped[1] / n, clipped[2] / n])
    };
    let v_lo = direction(phi_lo)?;
    let v_hi = direction(phi_hi)?;

    // Hematoxylin = larger blue-channel OD component.
    let (hematoxylin, eosin) = if v_lo[2] >= v_hi[2] {
        (v_lo, v_hi)
    } else {
        (v_hi, v_lo)
    };
    let cos_he: f64 = hematoxylin.iter().zip(&eosin).map(|(a, b)| a * b).sum();
    if 1.0 - cos_he * cos_he < 1e-9 {
        return Err(PreprocessError::DegenerateStain(
            "estimated stain vectors are nearly parallel".into(),
        ));
    }
    let stains = StainMatrix { hematoxylin, eosin };

    let mut ch_all = Vec::with_capacity(od.data.len());
    let mut ce_all = Vec::with_capacity(od.data.len());
    for p in &od.data {
        let [ch, ce] = stain_concentrations(*p, &stains);
        ch_all.push(ch);
        ce_all.push(ce);
    }
    ch_all.sort_by(f64::total_cmp);
    ce_all.sort_by(f64::total_cmp);
    let q = params.max_concentration_percentile;
    Ok(StainFit {
        stains,
        max_concentrations: [
            percentile_sorted(&ch_all, q),
            percentile_sorted(&ce_all, q),
        ],
    })
}

/// Re-renders a patch in the reference stain space.
///
/// Concentrations are solved per pixel against the fitted basis, rescaled by
/// `reference_max / fitted_max` per stain, pushed through the reference
/// basis, and converted back to clipped 8-bit intensities.
pub fn macenko_apply(
    p: &RGBPatch,
    fitted: &StainFit,
    reference: &StainFit,
    params: &MacenkoParams,
) -> Result<RGBPatch, PreprocessError> {
    let od = rgb_to_od(p, params.i0, params.eps);
    let mut out = Vec::with_capacity(p.data().len());
    for px in &od.data {
        let c = stain_concentrations(*px, &fitted.stains);
        let c = rescale_concentrations(c, fitted.max_concentrations, reference.max_concentrations);
        for ch in 0..3 {
            let od_new = reference.stains.hematoxylin[ch] * c[0] + reference.stains.eosin[ch] * c[1];
            let intensity = params.i0 * 10f64.powf(-od_new);
            out.push(intensity.round().clamp(0.0, 255.0) as u8);
        }
    }
    RGBPatch::new(p.width(), p.height(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn od_white_is_zero() {
        assert_eq!(od_value(255.0, 255.0, 1.0 / 255.0), 0.0);
    }

    #[test]
    fn od_tenth_intensity_is_one() {
        assert!((od_value(25.5, 255.0, 1.0 / 255.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn od_black_hits_the_floor() {
        let expected = -(1.0f64 / 255.0).log10();
        assert!((od_value(0.0, 255.0, 1.0 / 255.0) - expected).abs() < 1e-12);
        assert!((expected - 2.4065).abs() < 1e-4);
    }

    #[test]
    fn od_is_monotone_decreasing() {
        let mut last = f64::INFINITY;
        for i in 0..=255 {
            let od = od_value(i as f64, 255.0, 1.0 / 255.0);
            assert!(od <= last);
            last = od;
        }
    }

    /// Renders a synthetic two-stain image with known unit basis vectors and
    /// uniformly random concentrations.
    fn synthetic_stain_image(
        h: [f64; 3],
        e: [f64; 3],
        side: usize,
        seed: u64,
    ) -> RGBPatch {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(side * side * 3);
        for _ in 0..side * side {
            let ch: f64 = rng.random_range(0.0..2.0);
            let ce: f64 = rng.random_range(0.0..2.0);
            for k in 0..3 {
                let od = h[k] * ch + e[k] * ce;
                let i = (255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0);
                data.push(i as u8);
            }
        }
        RGBPatch::new(side, side, data).unwrap()
    }

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }

    fn cos3(a: [f64; 3], b: [f64; 3]) -> f64 {
        a.iter().zip(&b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn fit_recovers_known_basis() {
        let h = unit([0.65, 0.70, 0.29]);
        let e = unit([0.07, 0.99, 0.11]);
        let patch = synthetic_stain_image(h, e, 64, 17);
        let params = MacenkoParams::default();
        let fit = macenko_fit(&rgb_to_od(&patch, params.i0, params.eps), &params).unwrap();
        assert!(
            cos3(fit.stains.hematoxylin, h) >= 0.999,
            "H cosine {}",
            cos3(fit.stains.hematoxylin, h)
        );
        assert!(
            cos3(fit.stains.eosin, e) >= 0.999,
            "E cosine {}",
            cos3(fit.stains.eosin, e)
        );
    }

    #[test]
    fn grayscale_ramp_is_degenerate() {
        let mut data = Vec::new();
        for y in 0..32u32 {
            for _ in 0..32u32 {
                let v = (40 + y * 5) as u8;
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let patch = RGBPatch::new(32, 32, data).unwrap();
        let params = MacenkoParams::default();
        let od = rgb_to_od(&patch, params.i0, params.eps);
        assert!(matches!(
            macenko_fit(&od, &params),
            Err(PreprocessError::DegenerateStain(_))
        ));
    }

    #[test]
    fn pure_white_is_degenerate() {
        let patch = RGBPatch::filled(16, 16, [255, 255, 255]).unwrap();
        let params = MacenkoParams::default();
        let od = rgb_to_od(&patch, params.i0, params.eps);
        match macenko_fit(&od, &params) {
            Err(PreprocessError::DegenerateStain(msg)) => {
                assert!(msg.contains("above the floor"), "{msg}")
            }
            other => panic!("expected degenerate stain, got {other:?}"),
        }
    }

    #[test]
    fn self_normalization_round_trip() {
        let h = unit([0.65, 0.70, 0.29]);
        let e = unit([0.07, 0.99, 0.11]);
        let patch = synthetic_stain_image(h, e, 64, 3);
        let params = MacenkoParams::default();
        let fit = macenko_fit(&rgb_to_od(&patch, params.i0, params.eps), &params).unwrap();
        let out = macenko_apply(&patch, &fit, &fit, &params).unwrap();
        let mae: f64 = patch
            .data()
            .iter()
            .zip(out.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / patch.data().len() as f64;
        assert!(mae <= 2.0, "mean absolute error {mae}");
    }

    #[test]
    fn white_stays_white() {
        let fit = default_reference();
        let params = MacenkoParams::default();
        let patch = RGBPatch::filled(4, 4, [255, 255, 255]).unwrap();
        let out = macenko_apply(&patch, &fit, &fit, &params).unwrap();
        assert!(out.data().iter().all(|&v| v == 255));
    }

    #[test]
    fn doubling_reference_max_doubles_scaled_concentrations() {
        let c = [0.8, 0.3];
        let fitted_max = [1.5, 0.9];
        let reference_max = [1.2, 1.1];
        let doubled = [2.4, 2.2];
        let once = rescale_concentrations(c, fitted_max, reference_max);
        let twice = rescale_concentrations(c, fitted_max, doubled);
        assert_eq!(twice[0], 2.0 * once[0]);
        assert_eq!(twice[1], 2.0 * once[1]);
    }

    #[test]
    fn concentrations_recover_exact_mixture() {
        let h = unit([0.65, 0.70, 0.29]);
        let e = unit([0.07, 0.99, 0.11]);
        let stains = StainMatrix {
            hematoxylin: h,
            eosin: e,
        };
        let od = [
            h[0] * 0.7 + e[0] * 0.4,
            h[1] * 0.7 + e[1] * 0.4,
            h[2] * 0.7 + e[2] * 0.4,
        ];
        let [ch, ce] = stain_concentrations(od, &stains);
        assert!((ch - 0.7).abs() < 1e-10);
        assert!((ce - 0.4).abs() < 1e-10);
    }

    #[test]
    fn negative_projection_is_clipped() {
        let stains = StainMatrix {
            hematoxylin: [1.0, 0.0, 0.0],
            eosin: [0.0, 1.0, 0.0],
        };
        let [ch, ce] = stain_concentrations([-0.5, 0.25, 0.0], &stains);
        assert_eq!(ch, 0.0);
        assert_eq!(ce, 0.25);
    }

    #[test]
    fn reference_stain_json_round_trip() {
        let json = r#"{"h":[0.65,0.70,0.29],"e":[0.07,0.99,0.11],"max_c":[1.97,1.03]}"#;
        let parsed: ReferenceStain = serde_json::from_str(json).unwrap();
        let fit = parsed.to_fit().unwrap();
        let norm: f64 = fit.stains.hematoxylin.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(fit.max_concentrations, [1.97, 1.03]);
    }
}
