//! Pixel-level preprocessing math: Otsu tissue masking, strided patch
//! planning, optical-density conversion, Macenko stain estimation and
//! normalization, and anti-aliased bilinear downscaling.
//!
//! Everything here is a pure function on value inputs; callers supply
//! decoded pixel arrays (no slide-format readers in this crate).

mod otsu;
mod plan;
mod resize;
mod stain;

use thiserror::Error;

pub use otsu::{otsu_threshold, GrayHistogram};
pub use plan::{plan_patches, PatchPlan, PatchPlanEntry};
pub use resize::resize_bilinear_aa;
pub use stain::{
    default_reference,
    macenko_apply, macenko_fit, od_value, rescale_concentrations, rgb_to_od,
    stain_concentrations, MacenkoParams, ODImage, ReferenceStain, StainFit, StainMatrix,
};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("histogram has no mass")]
    EmptyHistogram,
    #[error("histogram mass sits in a single bin; no threshold separates it")]
    DegenerateHistogram,
    #[error("patch buffer of {got} bytes does not match {width}x{height}x3")]
    BadPatchBuffer {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("patch dimensions must be positive")]
    EmptyPatch,
    #[error(
        "mask of {mask_w}x{mask_h} is inconsistent with slide {slide_w}x{slide_h} at downsample {downsample} (expected {expect_w}x{expect_h})"
    )]
    MaskScaleMismatch {
        mask_w: usize,
        mask_h: usize,
        slide_w: u32,
        slide_h: u32,
        downsample: u32,
        expect_w: usize,
        expect_h: usize,
    },
    #[error("min_tissue_fraction must lie in [0, 1], got {0}")]
    BadTissueFraction(f64),
    #[error("downsample, patch size, and stride must be positive")]
    BadPlanParams,
    #[error("degenerate stain estimation: {0}")]
    DegenerateStain(String),
    #[error("upscaling {in_w}x{in_h} -> {out_w}x{out_h} is unsupported; this resampler only downscales")]
    Upscale {
        in_w: usize,
        in_h: usize,
        out_w: usize,
        out_h: usize,
    },
    #[error("output dimensions must be positive")]
    EmptyOutput,
}

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RGBPatch {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RGBPatch {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, PreprocessError> {
        if width == 0 || height == 0 {
            return Err(PreprocessError::EmptyPatch);
        }
        if data.len() != width * height * 3 {
            return Err(PreprocessError::BadPatchBuffer {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Constant-color patch.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, PreprocessError> {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Binary tissue mask at thumbnail scale; `true` marks tissue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, PreprocessError> {
        if width == 0 || height == 0 {
            return Err(PreprocessError::EmptyPatch);
        }
        if data.len() != width * height {
            return Err(PreprocessError::BadPatchBuffer {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Result<Self, PreprocessError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }
}
