//! Counterfactual image generation.

mod fourier;
mod perturb;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use fourier::{
    counterfactual_raw, crop_window, forward_fft, inverse_fft, inverse_fft_raw,
    make_counterfactual, mix_central_amplitude, Amplitude, CropWindow, MixParams, Phase,
    SpectralGrid, Spectrum,
};
pub use perturb::{
    gaussian_blur, gaussian_kernel, grayscale, patch_shuffle, random_mask, shuffle_permutation,
    LUMA,
};

use crate::error::{IntentError, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionOp {
    FftMix,
    RandomMask,
    PatchShuffle,
    GaussianBlur,
    Grayscale,
    None,
}

impl InterventionOp {
    pub const ALL: [InterventionOp; 6] = [
        InterventionOp::FftMix,
        InterventionOp::RandomMask,
        InterventionOp::PatchShuffle,
        InterventionOp::GaussianBlur,
        InterventionOp::Grayscale,
        InterventionOp::None,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            InterventionOp::FftMix => "fft_mix",
            InterventionOp::RandomMask => "random_mask",
            InterventionOp::PatchShuffle => "patch_shuffle",
            InterventionOp::GaussianBlur => "gaussian_blur",
            InterventionOp::Grayscale => "grayscale",
            InterventionOp::None => "none",
        }
    }
}

impl fmt::Display for InterventionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterventionOp {
    type Err = IntentError;

    fn from_str(s: &str) -> Result<Self> {
        InterventionOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| IntentError::InvalidArgument(format!("unknown intervention {s:?}")))
    }
}

/// Knobs for every intervention; only the fields of the selected op are read.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionSettings {
    /// Upper bound of the uniform mix-ratio draw.
    pub lambda_max: f64,
    pub crop_ratio: f64,
    pub mask_patch: usize,
    pub mask_fraction: f64,
    pub shuffle_grid: usize,
    pub blur_sigma: f64,
    pub blur_radius: usize,
}

impl Default for InterventionSettings {
    fn default() -> Self {
        InterventionSettings {
            lambda_max: 1.0,
            crop_ratio: 0.25,
            mask_patch: 8,
            mask_fraction: 0.25,
            shuffle_grid: 2,
            blur_sigma: 1.5,
            blur_radius: 3,
        }
    }
}

/// Applies `op` to `x_ref`. `x_dist` is only read by [`InterventionOp::FftMix`].
/// The seed drives the mix ratio, mask placement and patch permutation.
pub fn apply_intervention(
    op: InterventionOp,
    settings: &InterventionSettings,
    x_ref: &Image,
    x_dist: &Image,
    seed: u64,
) -> Result<Image> {
    match op {
        InterventionOp::FftMix => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = MixParams {
                lambda: rng.gen::<f64>() * settings.lambda_max,
                crop_ratio: settings.crop_ratio,
                rng_seed: seed,
            };
            make_counterfactual(x_ref, x_dist, &params)
        }
        InterventionOp::RandomMask => {
            random_mask(x_ref, settings.mask_patch, settings.mask_fraction, seed)
        }
        InterventionOp::PatchShuffle => patch_shuffle(x_ref, settings.shuffle_grid, seed),
        InterventionOp::GaussianBlur => {
            gaussian_blur(x_ref, settings.blur_sigma, settings.blur_radius)
        }
        InterventionOp::Grayscale => grayscale(x_ref),
        InterventionOp::None => Ok(x_ref.clone()),
    }
}
