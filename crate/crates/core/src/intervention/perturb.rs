//! Pixel-space perturbations used as alternative counterfactual generators.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{IntentError, Result};
use crate::image::Image;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Zeroes `round(mask_fraction * num_patches)` distinct square patches.
pub fn random_mask(image: &Image, patch_size: usize, mask_fraction: f64, seed: u64) -> Result<Image> {
    let (h, w, c) = image.shape();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(IntentError::InvalidArgument(format!(
            "patch size {patch_size} does not tile a {h}x{w} image"
        )));
    }
    if !(0.0..=1.0).contains(&mask_fraction) {
        return Err(IntentError::InvalidArgument(format!(
            "mask fraction {mask_fraction} outside [0, 1]"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let total = rows * cols;
    let count = ((mask_fraction * total as f64).round() as usize).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = image.pixels().to_vec();
    for patch in sample(&mut rng, total, count).into_iter() {
        let (py, px) = (patch / cols, patch % cols);
        for y in py * patch_size..(py + 1) * patch_size {
            let start = (y * w + px * patch_size) * c;
            pixels[start..start + patch_size * c].fill(0.0);
        }
    }
    Ok(Image::from_parts_unchecked(h, w, c, pixels))
}

/// Seeded permutation of `grid * grid` patches; `perm[k]` is the source
/// patch placed at position `k` (row-major).
pub fn shuffle_permutation(grid: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..grid * grid).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    perm
}

pub fn patch_shuffle(image: &Image, grid: usize, seed: u64) -> Result<Image> {
    let (h, w, _) = image.shape();
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(IntentError::InvalidArgument(format!(
            "grid {grid} does not tile a {h}x{w} image"
        )));
    }
    let perm = shuffle_permutation(grid, seed);
    Ok(apply_patch_permutation(image, grid, &perm))
}

pub(crate) fn apply_patch_permutation(image: &Image, grid: usize, perm: &[usize]) -> Image {
    let (h, w, c) = image.shape();
    let (ph, pw) = (h / grid, w / grid);
    let src = image.pixels();
    let mut out = vec![0.0; src.len()];
    for (dst_patch, &src_patch) in perm.iter().enumerate() {
        let (dy, dx) = (dst_patch / grid, dst_patch % grid);
        let (sy, sx) = (src_patch / grid, src_patch % grid);
        for row in 0..ph {
            let d = ((dy * ph + row) * w + dx * pw) * c;
            let s = ((sy * ph + row) * w + sx * pw) * c;
            out[d..d + pw * c].copy_from_slice(&src[s..s + pw * c]);
        }
    }
    Image::from_parts_unchecked(h, w, c, out)
}

/// Normalized Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric extension: `... b a | a b c d | d c ...`.
#[inline]
fn mirror(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with symmetric boundary extension.
///
/// The symmetric extension gives every source pixel a total weight of one,
/// so per-channel means are preserved up to rounding.
pub fn gaussian_blur(image: &Image, sigma: f64, kernel_radius: usize) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(IntentError::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if kernel_radius == 0 {
        return Err(IntentError::InvalidArgument("kernel radius must be positive".into()));
    }
    let (h, w, c) = image.shape();
    let kernel = gaussian_kernel(sigma, kernel_radius);
    let r = kernel_radius as i64;
    let src = image.pixels();

    let mut horizontal = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, tap) in kernel.iter().enumerate() {
                    let xx = mirror(x as i64 + k as i64 - r, w);
                    acc += tap * src[(y * w + xx) * c + ch];
                }
                horizontal[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, tap) in kernel.iter().enumerate() {
                    let yy = mirror(y as i64 + k as i64 - r, h);
                    acc += tap * horizontal[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Image::from_clamped(h, w, c, out)
}

/// Replaces every channel by BT.601 luminance.
pub fn grayscale(image: &Image) -> Result<Image> {
    let (h, w, c) = image.shape();
    if c != 3 {
        return Err(IntentError::InvalidArgument(format!(
            "grayscale needs 3 channels, image has {c}"
        )));
    }
    let mut pixels = Vec::with_capacity(h * w * 3);
    for px in image.pixels().chunks_exact(3) {
        let y = (LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]).clamp(0.0, 1.0);
        pixels.extend([y, y, y]);
    }
    Ok(Image::from_parts_unchecked(h, w, 3, pixels))
}
