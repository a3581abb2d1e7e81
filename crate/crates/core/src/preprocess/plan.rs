//! Strided patch planning over a thumbnail-scale tissue mask.

use serde::{Deserialize, Serialize};

use super::{BinaryMask, PreprocessError};

/// A single planned patch location at level-0 coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlanEntry {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub patch_size: u32,
    pub stride: u32,
    pub magnification: String,
}

/// Grid positions whose mask region carries enough tissue, in (x, y)
/// lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    pub patch_size: u32,
    pub stride: u32,
    pub magnification: String,
    pub coords: Vec<(u32, u32)>,
}

impl PatchPlan {
    /// One JSON object per line, matching the planned-patch schema.
    pub fn to_jsonl(&self, slide_id: &str) -> String {
        let mut out = String::new();
        for &(x, y) in &self.coords {
            let entry = PatchPlanEntry {
                slide_id: slide_id.to_string(),
                x,
                y,
                patch_size: self.patch_size,
                stride: self.stride,
                magnification: self.magnification.clone(),
            };
            out.push_str(&serde_json::to_string(&entry).expect("plan entries serialize"));
            out.push('\n');
        }
        out
    }
}

fn div_ceil_u32(a: u32, b: u32) -> usize {
    (a as usize).div_ceil(b as usize)
}

/// Enumerates the stride grid and keeps every position whose mapped mask
/// region has tissue fraction >= `min_tissue_fraction`.
///
/// The mask must be the slide downsampled by `downsample`
/// (ceil on both axes). A patch larger than the slide yields an empty plan.
pub fn plan_patches(
    mask: &BinaryMask,
    slide_dims: (u32, u32),
    downsample: u32,
    patch_size: u32,
    stride: u32,
    min_tissue_fraction: f64,
) -> Result<PatchPlan, PreprocessError> {
    if downsample == 0 || patch_size == 0 || stride == 0 {
        return Err(PreprocessError::BadPlanParams);
    }
    if !(0.0..=1.0).contains(&min_tissue_fraction) {
        return Err(PreprocessError::BadTissueFraction(min_tissue_fraction));
    }
    let (slide_w, slide_h) = slide_dims;
    let expect_w = div_ceil_u32(slide_w, downsample);
    let expect_h = div_ceil_u32(slide_h, downsample);
    if mask.width() != expect_w || mask.height() != expect_h {
        return Err(PreprocessError::MaskScaleMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            slide_w,
            slide_h,
            downsample,
            expect_w,
            expect_h,
        });
    }

    let mut coords = Vec::new();
    let ds = downsample as usize;
    let mut x = 0u32;
    while x.checked_add(patch_size).map(|e| e <= slide_w) == Some(true) {
        let mut y = 0u32;
        while y.checked_add(patch_size).map(|e| e <= slide_h) == Some(true) {
            let mx0 = x as usize / ds;
            let my0 = y as usize / ds;
            let mx1 = ((x + patch_size) as usize).div_ceil(ds).min(mask.width());
            let my1 = ((y + patch_size) as usize).div_ceil(ds).min(mask.height());
            let mut tissue = 0usize;
            let mut area = 0usize;
            for my in my0..my1 {
                for mx in mx0..mx1 {
                    area += 1;
                    if mask.get(mx, my) {
                        tissue += 1;
                    }
                }
            }
            if area > 0 && tissue as f64 / area as f64 >= min_tissue_fraction {
                coords.push((x, y));
            }
            y += stride;
        }
        x += stride;
    }

    Ok(PatchPlan {
        patch_size,
        stride,
        magnification: "40x".to_string(),
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_tissue_grid_geometry() {
        let mask = BinaryMask::filled(256, 256, true).unwrap();
        let plan = plan_patches(&mask, (4096, 4096), 16, 1024, 2048, 0.5).unwrap();
        assert_eq!(
            plan.coords,
            vec![(0, 0), (0, 2048), (2048, 0), (2048, 2048)]
        );
    }

    #[test]
    fn all_background_plan_is_empty() {
        let mask = BinaryMask::filled(256, 256, false).unwrap();
        let plan = plan_patches(&mask, (4096, 4096), 16, 1024, 2048, 0.5).unwrap();
        assert!(plan.coords.is_empty());
    }

    #[test]
    fn half_tissue_keeps_left_column_only() {
        // Left half of the mask is tissue.
        let (w, h) = (256usize, 256usize);
        let data: Vec<bool> = (0..w * h).map(|i| (i % w) < w / 2).collect();
        let mask = BinaryMask::new(w, h, data).unwrap();
        let plan = plan_patches(&mask, (4096, 4096), 16, 1024, 2048, 0.9).unwrap();
        assert_eq!(plan.coords, vec![(0, 0), (0, 2048)]);

        // Reference count by direct overlap enumeration.
        let mut expected = Vec::new();
        for x in (0..=4096 - 1024).step_by(2048) {
            for y in (0..=4096 - 1024).step_by(2048) {
                let mut tissue = 0usize;
                let mut area = 0usize;
                for mx in x / 16..(x + 1024) / 16 {
                    for _my in y / 16..(y + 1024) / 16 {
                        area += 1;
                        if mx < 128 {
                            tissue += 1;
                        }
                    }
                }
                if tissue as f64 / area as f64 >= 0.9 {
                    expected.push((x as u32, y as u32));
                }
            }
        }
        expected.sort_unstable();
        assert_eq!(plan.coords, expected);
    }

    #[test]
    fn patch_larger_than_slide_gives_empty_plan() {
        let mask = BinaryMask::filled(32, 32, true).unwrap();
        let plan = plan_patches(&mask, (512, 512), 16, 1024, 2048, 0.5).unwrap();
        assert!(plan.coords.is_empty());
    }

    #[test]
    fn inconsistent_mask_scale_is_rejected() {
        let mask = BinaryMask::filled(100, 256, true).unwrap();
        assert!(matches!(
            plan_patches(&mask, (4096, 4096), 16, 1024, 2048, 0.5),
            Err(PreprocessError::MaskScaleMismatch { .. })
        ));
    }

    #[test]
    fn jsonl_emission_has_one_object_per_patch() {
        let mask = BinaryMask::filled(256, 256, true).unwrap();
        let plan = plan_patches(&mask, (4096, 4096), 16, 1024, 2048, 0.5).unwrap();
        let jsonl = plan.to_jsonl("slide_7");
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 4);
        let first: PatchPlanEntry = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first.slide_id, "slide_7");
        assert_eq!(first.patch_size, 1024);
        assert_eq!(first.stride, 2048);
        assert_eq!(first.magnification, "40x");
    }
}
