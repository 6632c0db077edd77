//! Amplitude/phase decomposition and central-amplitude mixing.
//!
//! Spectra are stored with the zero frequency moved to the grid center
//! (index `n / 2` along each axis), so "the central window" of a spectrum is
//! a literal centered rectangle. The shift is undone before inversion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use std::cell::RefCell;

use rustfft::{FftDirection, FftPlanner};

use crate::error::{IntentError, Result};
use crate::image::Image;

/// Per-channel real grid in centered-frequency layout, channel-major planes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

pub type Amplitude = SpectralGrid;
pub type Phase = SpectralGrid;

impl SpectralGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(IntentError::Shape(format!(
                "grid data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(SpectralGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        SpectralGrid {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub amplitude: Amplitude,
    pub phase: Phase,
}

/// Settings for one amplitude mix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixParams {
    /// Weight given to the distractor amplitude inside the window.
    pub lambda: f64,
    /// Window side as a fraction of `min(H, W)`.
    pub crop_ratio: f64,
    /// Seed the mix ratio was drawn from, kept for provenance.
    pub rng_seed: u64,
}

impl MixParams {
    pub fn new(lambda: f64, crop_ratio: f64) -> Self {
        MixParams {
            lambda,
            crop_ratio,
            rng_seed: 0,
        }
    }

    /// Draws `lambda ~ U(0, lambda_max)` from a generator seeded with `seed`.
    pub fn sampled(lambda_max: f64, crop_ratio: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MixParams {
            lambda: rng.gen::<f64>() * lambda_max,
            crop_ratio,
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(IntentError::InvalidArgument(format!(
                "mix ratio lambda = {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(IntentError::InvalidArgument(format!(
                "crop ratio = {} outside (0, 1]",
                self.crop_ratio
            )));
        }
        Ok(())
    }
}

/// Half-open centered window `[start, start + side)` along both axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub row_start: usize,
    pub col_start: usize,
    pub side: usize,
}

impl CropWindow {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.row_start
            && y < self.row_start + self.side
            && x >= self.col_start
            && x < self.col_start + self.side
    }
}

/// Window of side `round(crop_ratio * min(H, W))`, anchored so that the
/// zero-frequency bin `(H/2, W/2)` lies inside it.
pub fn crop_window(height: usize, width: usize, crop_ratio: f64) -> Result<CropWindow> {
    let side = (crop_ratio * height.min(width) as f64).round() as usize;
    if side < 1 {
        return Err(IntentError::InvalidArgument(format!(
            "crop ratio {crop_ratio} gives an empty window on {height}x{width}"
        )));
    }
    let side = side.min(height.min(width));
    Ok(CropWindow {
        row_start: height / 2 - side / 2,
        col_start: width / 2 - side / 2,
        side,
    })
}

pub fn forward_fft(image: &Image) -> Spectrum {
    let (h, w, channels) = image.shape();
    let mut amplitude = SpectralGrid::zeros(h, w, channels);
    let mut phase = SpectralGrid::zeros(h, w, channels);
    for c in 0..channels {
        let mut buf = complex_plane(image, c);
        fft_2d(h, w, &mut buf, FftDirection::Forward);
        for y in 0..h {
            for x in 0..w {
                let z = buf[y * w + x];
                let (sy, sx) = ((y + h / 2) % h, (x + w / 2) % w);
                amplitude.set(c, sy, sx, z.norm());
                phase.set(c, sy, sx, canonical_phase(z.arg()));
            }
        }
    }
    Spectrum { amplitude, phase }
}

/// Replaces the centered window of `a_ref` by `lambda * a_dist + (1 - lambda) * a_ref`.
pub fn mix_central_amplitude(
    a_ref: &Amplitude,
    a_dist: &Amplitude,
    params: &MixParams,
) -> Result<Amplitude> {
    if a_ref.shape() != a_dist.shape() {
        return Err(IntentError::Shape(format!(
            "amplitude grids differ: {:?} vs {:?}",
            a_ref.shape(),
            a_dist.shape()
        )));
    }
    params.validate()?;
    let window = crop_window(a_ref.height, a_ref.width, params.crop_ratio)?;
    let lambda = params.lambda;
    let mut out = a_ref.clone();
    for c in 0..a_ref.channels {
        for y in window.row_start..window.row_start + window.side {
            for x in window.col_start..window.col_start + window.side {
                let mixed = lambda * a_dist.get(c, y, x) + (1.0 - lambda) * a_ref.get(c, y, x);
                out.set(c, y, x, mixed.max(0.0));
            }
        }
    }
    Ok(out)
}

/// Inverse transform without clamping: interleaved `H x W x C` real parts.
pub fn inverse_fft_raw(amplitude: &Amplitude, phase: &Phase) -> Result<Vec<f64>> {
    if amplitude.shape() != phase.shape() {
        return Err(IntentError::Shape(format!(
            "amplitude {:?} and phase {:?} differ",
            amplitude.shape(),
            phase.shape()
        )));
    }
    let (h, w, channels) = amplitude.shape();
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; h * w * channels];
    for c in 0..channels {
        let (amp, ph) = (amplitude.plane(c), phase.plane(c));
        let mut buf = vec![Complex::new(0.0, 0.0); h * w];
        for sy in 0..h {
            for sx in 0..w {
                let (y, x) = ((sy + h - h / 2) % h, (sx + w - w / 2) % w);
                buf[y * w + x] = Complex::from_polar(amp[sy * w + sx], ph[sy * w + sx]);
            }
        }
        fft_2d(h, w, &mut buf, FftDirection::Inverse);
        for (i, z) in buf.iter().enumerate() {
            out[i * channels + c] = z.re * scale;
        }
    }
    Ok(out)
}

pub fn inverse_fft(amplitude: &Amplitude, phase: &Phase) -> Result<Image> {
    let raw = inverse_fft_raw(amplitude, phase)?;
    let (h, w, c) = amplitude.shape();
    Image::from_clamped(h, w, c, raw)
}

/// Counterfactual of `x_ref`: its phase with a centrally mixed amplitude.
pub fn make_counterfactual(x_ref: &Image, x_dist: &Image, params: &MixParams) -> Result<Image> {
    let (raw, (h, w, c)) = counterfactual_raw(x_ref, x_dist, params)?;
    Image::from_clamped(h, w, c, raw)
}

/// Like [`make_counterfactual`] but returns the pre-clamp reconstruction.
pub fn counterfactual_raw(
    x_ref: &Image,
    x_dist: &Image,
    params: &MixParams,
) -> Result<(Vec<f64>, (usize, usize, usize))> {
    if !x_ref.same_shape(x_dist) {
        return Err(IntentError::Shape(format!(
            "reference {:?} and distractor {:?} differ",
            x_ref.shape(),
            x_dist.shape()
        )));
    }
    params.validate()?;
    let (h, w, channels) = x_ref.shape();
    let window = crop_window(h, w, params.crop_ratio)?;
    let lambda = params.lambda;
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; h * w * channels];
    // Bins outside the window keep their coefficient, so only window bins
    // are rescaled to the mixed amplitude; the phase is untouched.
    for c in 0..channels {
        let mut z_ref = complex_plane(x_ref, c);
        let mut z_dist = complex_plane(x_dist, c);
        fft_2d(h, w, &mut z_ref, FftDirection::Forward);
        fft_2d(h, w, &mut z_dist, FftDirection::Forward);
        for sy in window.row_start..window.row_start + window.side {
            for sx in window.col_start..window.col_start + window.side {
                let i = ((sy + h - h / 2) % h) * w + (sx + w - w / 2) % w;
                let (a_ref, a_dist) = (z_ref[i].norm(), z_dist[i].norm());
                let mixed = (lambda * a_dist + (1.0 - lambda) * a_ref).max(0.0);
                z_ref[i] = if a_ref > 0.0 {
                    z_ref[i] * (mixed / a_ref)
                } else {
                    Complex::from_polar(mixed, canonical_phase(z_ref[i].arg()))
                };
            }
        }
        fft_2d(h, w, &mut z_ref, FftDirection::Inverse);
        for (i, z) in z_ref.iter().enumerate() {
            out[i * channels + c] = z.re * scale;
        }
    }
    Ok((out, (h, w, channels)))
}

fn complex_plane(image: &Image, c: usize) -> Vec<Complex<f64>> {
    image.channel_plane(c).into_iter().map(|v| Complex::new(v, 0.0)).collect()
}

fn canonical_phase(theta: f64) -> f64 {
    if theta <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        theta
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Unnormalized 2-D transform of a row-major `h x w` buffer, in place.
fn fft_2d(h: usize, w: usize, buf: &mut [Complex<f64>], direction: FftDirection) {
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        (planner.plan_fft(w, direction), planner.plan_fft(h, direction))
    });
    row_fft.process(buf);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Direct O(N^2) DFT, shifted to the centered layout. Test oracle only.
    fn naive_amplitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for ky in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0 * PI * (ky * y) as f64 / h as f64
                            - 2.0 * PI * (kx * x) as f64 / w as f64;
                        re += plane[y * w + x] * ang.cos();
                        im += plane[y * w + x] * ang.sin();
                    }
                }
                let (sy, sx) = ((ky + h / 2) % h, (kx + w / 2) % w);
                out[sy * w + sx] = (re * re + im * im).sqrt();
            }
        }
        out
    }

    /// Direct inverse DFT of a centered-layout spectrum, real part.
    fn naive_inverse(amp: &[f64], ph: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for sy in 0..h {
                    for sx in 0..w {
                        let ky = (sy + h - h / 2) % h;
                        let kx = (sx + w - w / 2) % w;
                        let ang = 2.0 * PI * (ky * y) as f64 / h as f64
                            + 2.0 * PI * (kx * x) as f64 / w as f64
                            + ph[sy * w + sx];
                        acc += amp[sy * w + sx] * ang.cos();
                    }
                }
                out[y * w + x] = acc / (h * w) as f64;
            }
        }
        out
    }

    fn seeded_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_image_has_only_dc() {
        let img = Image::filled(8, 8, 1, 0.5).unwrap();
        let spec = forward_fft(&img);
        for y in 0..8 {
            for x in 0..8 {
                let a = spec.amplitude.get(0, y, x);
                if (y, x) == (4, 4) {
                    assert!((a - 32.0).abs() < 1e-9);
                } else {
                    assert!(a.abs() < 1e-9, "bin ({y},{x}) = {a}");
                }
            }
        }
    }

    #[test]
    fn two_pixel_period_cosine_matches_direct_dft() {
        let pixels: Vec<f64> = (0..64)
            .map(|i| 0.5 + 0.5 * (PI * (i % 8) as f64).cos())
            .collect();
        let img = Image::new(8, 8, 1, pixels.clone()).unwrap();
        let spec = forward_fft(&img);
        let oracle = naive_amplitude(&pixels, 8, 8);
        for (a, b) in spec.amplitude.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        let nonzero: Vec<(usize, usize)> = (0..64)
            .filter(|i| oracle[*i] > 1e-9)
            .map(|i| (i / 8, i % 8))
            .collect();
        // DC and the horizontal Nyquist bin, which is its own mirror image
        assert_eq!(nonzero, vec![(4, 0), (4, 4)]);
        assert!((oracle[4 * 8] - 32.0).abs() < 1e-9);
    }

    #[test]
    fn random_image_amplitude_matches_direct_dft() {
        let img = seeded_image(8, 12, 1, 3);
        let spec = forward_fft(&img);
        let oracle = naive_amplitude(img.pixels(), 8, 12);
        for (a, b) in spec.amplitude.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip_recovers_image() {
        for (h, w, c, seed) in [(8, 8, 1, 0), (16, 16, 3, 1), (9, 13, 3, 2)] {
            let img = seeded_image(h, w, c, seed);
            let spec = forward_fft(&img);
            let back = inverse_fft(&spec.amplitude, &spec.phase).unwrap();
            assert!(back.max_abs_diff(&img) < 1e-4);
        }
    }

    #[test]
    fn zero_amplitude_gives_black_image() {
        let amp = SpectralGrid::zeros(8, 8, 3);
        let mut ph = SpectralGrid::zeros(8, 8, 3);
        for (i, v) in ph.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin() * 3.0;
        }
        let img = inverse_fft(&amp, &ph).unwrap();
        assert!(img.pixels().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mix_on_constant_grids() {
        let a_ref = SpectralGrid::new(8, 8, 1, vec![2.0; 64]).unwrap();
        let a_dist = SpectralGrid::new(8, 8, 1, vec![4.0; 64]).unwrap();
        let out = mix_central_amplitude(&a_ref, &a_dist, &MixParams::new(0.5, 0.5)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = if (2..6).contains(&y) && (2..6).contains(&x) { 3.0 } else { 2.0 };
                assert_eq!(out.get(0, y, x), expected);
            }
        }
    }

    #[test]
    fn mix_degenerate_cases() {
        let a_ref = forward_fft(&seeded_image(8, 8, 3, 5)).amplitude;
        let a_dist = forward_fft(&seeded_image(8, 8, 3, 6)).amplitude;
        for beta in [0.1, 0.25, 0.5, 1.0] {
            let out = mix_central_amplitude(&a_ref, &a_dist, &MixParams::new(0.0, beta)).unwrap();
            assert_eq!(out, a_ref);
        }
        let same = mix_central_amplitude(&a_ref, &a_ref, &MixParams::new(1.0, 1.0)).unwrap();
        assert_eq!(same, a_ref);
    }

    #[test]
    fn mix_rejects_mismatch_and_bad_params() {
        let a = SpectralGrid::zeros(8, 8, 1);
        let b = SpectralGrid::zeros(8, 9, 1);
        assert!(matches!(
            mix_central_amplitude(&a, &b, &MixParams::new(0.5, 0.5)),
            Err(IntentError::Shape(_))
        ));
        assert!(mix_central_amplitude(&a, &a, &MixParams::new(1.5, 0.5)).is_err());
        assert!(mix_central_amplitude(&a, &a, &MixParams::new(0.5, 0.0)).is_err());
        assert!(mix_central_amplitude(&a, &a, &MixParams::new(0.5, 0.01)).is_err());
    }

    #[test]
    fn mixed_window_is_affine_in_lambda() {
        let a_ref = SpectralGrid::new(8, 8, 1, vec![2.0; 64]).unwrap();
        let a_dist = SpectralGrid::new(8, 8, 1, vec![4.0; 64]).unwrap();
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let out = mix_central_amplitude(&a_ref, &a_dist, &MixParams::new(lambda, 0.5)).unwrap();
            assert!((out.get(0, 4, 4) - (2.0 + 2.0 * lambda)).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_constant_dc_reconstructs_constant() {
        // constants c and d: only DC is nonzero, so the mix moves the mean affinely
        let (c, d, lambda) = (0.3, 0.8, 0.4);
        let x_ref = Image::filled(8, 8, 1, c).unwrap();
        let x_dist = Image::filled(8, 8, 1, d).unwrap();
        let out = make_counterfactual(&x_ref, &x_dist, &MixParams::new(lambda, 0.5)).unwrap();
        let expected = lambda * d + (1.0 - lambda) * c;
        assert!(out.pixels().iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn mixed_constant_grid_inverts_like_direct_idft() {
        let a_ref = SpectralGrid::new(8, 8, 1, vec![2.0; 64]).unwrap();
        let a_dist = SpectralGrid::new(8, 8, 1, vec![4.0; 64]).unwrap();
        let mixed = mix_central_amplitude(&a_ref, &a_dist, &MixParams::new(0.5, 0.5)).unwrap();
        // a constant image's phase is identically zero
        let phase = SpectralGrid::zeros(8, 8, 1);
        let raw = inverse_fft_raw(&mixed, &phase).unwrap();
        let oracle = naive_inverse(mixed.data(), phase.data(), 8, 8);
        for (a, b) in raw.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // pixel (0,0) sums every bin: (48 * 2 + 16 * 3) / 64
        assert!((raw[0] - 2.25).abs() < 1e-12);
    }

    #[test]
    fn counterfactual_identities() {
        let x_ref = seeded_image(16, 16, 3, 11);
        let x_dist = seeded_image(16, 16, 3, 12);
        let same = make_counterfactual(&x_ref, &x_dist, &MixParams::new(0.0, 0.25)).unwrap();
        assert!(same.max_abs_diff(&x_ref) < 1e-4);
        for (lambda, beta) in [(0.3, 0.25), (1.0, 1.0), (0.7, 0.6)] {
            let self_mix = make_counterfactual(&x_ref, &x_ref, &MixParams::new(lambda, beta)).unwrap();
            assert!(self_mix.max_abs_diff(&x_ref) < 1e-4);
        }
        assert!(make_counterfactual(&x_ref, &seeded_image(8, 8, 3, 1), &MixParams::new(0.5, 0.5))
            .is_err());
    }

    #[test]
    fn counterfactual_matches_straight_line_pipeline() {
        let x_ref = seeded_image(16, 16, 3, 21);
        let x_dist = seeded_image(16, 16, 3, 22);
        let params = MixParams::new(0.5, 0.25);
        let got = make_counterfactual(&x_ref, &x_dist, &params).unwrap();

        // direct DFT sums, window rows/cols 6..10 around DC at (8, 8)
        let (h, w) = (16usize, 16usize);
        let mut expected = vec![0.0; h * w * 3];
        for c in 0..3 {
            let spectrum = |img: &Image| {
                let plane = img.channel_plane(c);
                let mut bins = vec![(0.0f64, 0.0f64); h * w];
                for ky in 0..h {
                    for kx in 0..w {
                        let (mut re, mut im) = (0.0, 0.0);
                        for y in 0..h {
                            for x in 0..w {
                                let ang = -2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                                re += plane[y * w + x] * ang.cos();
                                im += plane[y * w + x] * ang.sin();
                            }
                        }
                        bins[ky * w + kx] = (re, im);
                    }
                }
                bins
            };
            let fr = spectrum(&x_ref);
            let fd = spectrum(&x_dist);
            let mut mixed = vec![(0.0, 0.0); h * w];
            for ky in 0..h {
                for kx in 0..w {
                    let (re, im) = fr[ky * w + kx];
                    let (amp_r, theta) = ((re * re + im * im).sqrt(), im.atan2(re));
                    let (dre, dim) = fd[ky * w + kx];
                    let amp_d = (dre * dre + dim * dim).sqrt();
                    // centered coordinate of this bin
                    let (sy, sx) = ((ky + h / 2) % h, (kx + w / 2) % w);
                    let inside = (6..10).contains(&sy) && (6..10).contains(&sx);
                    let amp = if inside { 0.5 * amp_d + 0.5 * amp_r } else { amp_r };
                    mixed[ky * w + kx] = (amp * theta.cos(), amp * theta.sin());
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..h {
                        for kx in 0..w {
                            let ang = 2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                            let (re, im) = mixed[ky * w + kx];
                            acc += re * ang.cos() - im * ang.sin();
                        }
                    }
                    expected[(y * w + x) * 3 + c] = (acc / (h * w) as f64).clamp(0.0, 1.0);
                }
            }
        }
        for (a, b) in got.pixels().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn counterfactual_agrees_with_polar_decomposition() {
        let x_ref = seeded_image(32, 24, 3, 31);
        let x_dist = seeded_image(32, 24, 3, 32);
        for (lambda, beta) in [(0.0, 0.25), (0.4, 0.5), (1.0, 1.0), (0.8, 0.1)] {
            let params = MixParams::new(lambda, beta);
            let (raw, _) = counterfactual_raw(&x_ref, &x_dist, &params).unwrap();
            let (a, b) = (forward_fft(&x_ref), forward_fft(&x_dist));
            let mixed = mix_central_amplitude(&a.amplitude, &b.amplitude, &params).unwrap();
            let expected = inverse_fft_raw(&mixed, &a.phase).unwrap();
            for (u, v) in raw.iter().zip(&expected) {
                assert!((u - v).abs() < 1e-10, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn window_geometry() {
        assert_eq!(
            crop_window(8, 8, 0.5).unwrap(),
            CropWindow { row_start: 2, col_start: 2, side: 4 }
        );
        assert_eq!(crop_window(32, 32, 0.25).unwrap().side, 8);
        let odd = crop_window(9, 9, 1.0 / 3.0).unwrap();
        assert!(odd.contains(4, 4));
        assert_eq!(odd.side, 3);
        let rect = crop_window(8, 16, 0.5).unwrap();
        assert_eq!((rect.row_start, rect.col_start, rect.side), (2, 6, 4));
    }

    #[test]
    fn sampled_lambda_is_seeded_and_bounded() {
        let a = MixParams::sampled(0.6, 0.25, 9);
        let b = MixParams::sampled(0.6, 0.25, 9);
        assert_eq!(a, b);
        assert!((0.0..0.6).contains(&a.lambda));
    }
}
