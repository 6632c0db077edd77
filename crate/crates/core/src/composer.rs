//! A small attention composer mapping `(image, tokens)` to a `Q x D` feature.
//!
//! Forward pass for one input:
//!
//! ```text
//! X_img = tanh(patches · W_patch + b_patch + P_pos)   (N_p x D)
//! X_txt = E[tokens]                                   (T x D)
//! X     = [X_img; X_txt]                              (M x D)
//! A     = softmax_rows(Q_emb · Xᵀ / sqrt(D))          (Q x M)
//! Z     = A · X                                       (Q x D)
//! H     = tanh(Z · W1 + b1)                           (Q x hidden)
//! F     = H · W2 + b2                                 (Q x D)
//! ```
//!
//! Targets go through the same network with an empty token sequence.
//! Gradients are computed by hand in [`backward`].

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ModificationText;
use crate::error::{IntentError, Result};
use crate::image::Image;

pub type FeatureMatrix = Array2<f64>;

/// Subtracted from every pixel before the patch projection.
pub const PIXEL_CENTER: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Mean over query rows.
    #[default]
    Mean,
    /// Elementwise maximum over query rows.
    MaxQuery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComposerConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub queries: usize,
    pub dim: usize,
    pub hidden: usize,
    pub pool: PoolMode,
    pub seed: u64,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        ComposerConfig {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch_size: 8,
            vocab_size: 17,
            queries: 4,
            dim: 32,
            hidden: 32,
            pool: PoolMode::Mean,
            seed: 0,
        }
    }
}

impl ComposerConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(IntentError::InvalidArgument(format!(
                "patch size {p} does not tile {}x{} images",
                self.image_height, self.image_width
            )));
        }
        if self.queries == 0 || self.dim == 0 || self.hidden == 0 || self.vocab_size == 0 {
            return Err(IntentError::InvalidArgument(
                "queries, dim, hidden and vocab_size must be positive".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(IntentError::InvalidArgument(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Learnable tensors. Also used as the gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposerParams {
    pub config: ComposerConfig,
    pub patch_proj: Array2<f64>,
    pub patch_bias: Array1<f64>,
    pub pos_embed: Array2<f64>,
    pub token_embed: Array2<f64>,
    pub query_embed: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 9] = [
    "patch_proj",
    "patch_bias",
    "pos_embed",
    "token_embed",
    "query_embed",
    "w1",
    "b1",
    "w2",
    "b2",
];

impl ComposerParams {
    pub fn zeros(config: &ComposerConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.dim, config.hidden);
        Ok(ComposerParams {
            config: config.clone(),
            patch_proj: Array2::zeros((config.patch_dim(), d)),
            patch_bias: Array1::zeros(d),
            pos_embed: Array2::zeros((config.num_patches(), d)),
            token_embed: Array2::zeros((config.vocab_size, d)),
            query_embed: Array2::zeros((config.queries, d)),
            w1: Array2::zeros((d, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, d)),
            b2: Array1::zeros(d),
        })
    }

    /// Weights uniform in `[-1/sqrt(D), 1/sqrt(D)]`, biases zero.
    pub fn init(config: &ComposerConfig) -> Result<Self> {
        let mut params = ComposerParams::zeros(config)?;
        let bound = 1.0 / (config.dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (name, values) in params.tensors_mut() {
            if name.contains("bias") || name.starts_with('b') {
                continue;
            }
            for v in values.iter_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        ComposerParams::zeros(&self.config).expect("config was validated at construction")
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let slices: [&[f64]; 9] = [
            self.patch_proj.as_slice().unwrap(),
            self.patch_bias.as_slice().unwrap(),
            self.pos_embed.as_slice().unwrap(),
            self.token_embed.as_slice().unwrap(),
            self.query_embed.as_slice().unwrap(),
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ];
        TENSOR_NAMES.into_iter().zip(slices).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let slices: [&mut [f64]; 9] = [
            self.patch_proj.as_slice_mut().unwrap(),
            self.patch_bias.as_slice_mut().unwrap(),
            self.pos_embed.as_slice_mut().unwrap(),
            self.token_embed.as_slice_mut().unwrap(),
            self.query_embed.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ];
        TENSOR_NAMES.into_iter().zip(slices).collect()
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        vec![
            self.patch_proj.shape().to_vec(),
            self.patch_bias.shape().to_vec(),
            self.pos_embed.shape().to_vec(),
            self.token_embed.shape().to_vec(),
            self.query_embed.shape().to_vec(),
            self.w1.shape().to_vec(),
            self.b1.shape().to_vec(),
            self.w2.shape().to_vec(),
            self.b2.shape().to_vec(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Flattened copy in tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(IntentError::Shape(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        for (_, t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ComposerParams, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`, making checkpoints lossless.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| IntentError::io(path, e))?;
        file.write_all(&self.to_checkpoint_bytes())
            .map_err(|e| IntentError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| IntentError::io(path, e))?;
        ComposerParams::from_checkpoint_bytes(&bytes).map_err(|msg| IntentError::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    /// JSON header line followed by little-endian `f32` values in tensor order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            seed: self.config.seed,
            config: self.config.clone(),
            tensors: TENSOR_NAMES
                .iter()
                .zip(self.shapes())
                .map(|(name, shape)| TensorEntry {
                    name: name.to_string(),
                    shape,
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (_, t) in self.tensors() {
            for v in t {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let newline = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or("checkpoint has no header line")?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| format!("bad header: {e}"))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(format!("unsupported checkpoint format {:?}", header.format));
        }
        let mut params = ComposerParams::zeros(&header.config).map_err(|e| e.to_string())?;
        let expected: Vec<(String, Vec<usize>)> = TENSOR_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(params.shapes())
            .collect();
        let found: Vec<(String, Vec<usize>)> =
            header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
        if expected != found {
            return Err("tensor table does not match the model configuration".into());
        }
        let body = &bytes[newline + 1..];
        if body.len() != params.num_params() * 4 {
            return Err(format!(
                "expected {} bytes of weights, found {}",
                params.num_params() * 4,
                body.len()
            ));
        }
        let flat: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.set_flat(&flat).map_err(|e| e.to_string())?;
        Ok(params)
    }
}

const CHECKPOINT_FORMAT: &str = "intent-composer/1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    seed: u64,
    config: ComposerConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    patches: Array2<f64>,
    tokens: Vec<usize>,
    x: Array2<f64>,
    attn: Array2<f64>,
    z: Array2<f64>,
    h: Array2<f64>,
    pub output: FeatureMatrix,
}

fn patchify(config: &ComposerConfig, image: &Image) -> Result<Array2<f64>> {
    let (h, w, c) = image.shape();
    if (h, w, c) != (config.image_height, config.image_width, config.channels) {
        return Err(IntentError::Shape(format!(
            "composer expects {}x{}x{} images, got {h}x{w}x{c}",
            config.image_height, config.image_width, config.channels
        )));
    }
    let p = config.patch_size;
    let cols = w / p;
    let mut out = Array2::zeros((config.num_patches(), config.patch_dim()));
    let px = image.pixels();
    for (n, mut row) in out.outer_iter_mut().enumerate() {
        let (py, pxx) = (n / cols, n % cols);
        let mut k = 0;
        for y in py * p..(py + 1) * p {
            let start = (y * w + pxx * p) * c;
            for v in &px[start..start + p * c] {
                row[k] = *v - PIXEL_CENTER;
                k += 1;
            }
        }
    }
    Ok(out)
}

fn softmax_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    m
}

pub fn forward(
    params: &ComposerParams,
    image: &Image,
    modification: &ModificationText,
) -> Result<ForwardCache> {
    let config = &params.config;
    let patches = patchify(config, image)?;
    let tokens = modification
        .tokens
        .iter()
        .map(|t| {
            let t = *t as usize;
            if t < config.vocab_size {
                Ok(t)
            } else {
                Err(IntentError::InvalidArgument(format!(
                    "token {t} outside vocabulary of size {}",
                    config.vocab_size
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let n_p = config.num_patches();
    let d = config.dim;
    let mut x = Array2::zeros((n_p + tokens.len(), d));
    {
        let mut img_rows = x.slice_mut(s![..n_p, ..]);
        img_rows.assign(&patches.dot(&params.patch_proj));
        img_rows += &params.patch_bias;
        img_rows += &params.pos_embed;
        img_rows.mapv_inplace(f64::tanh);
    }
    for (i, t) in tokens.iter().enumerate() {
        x.row_mut(n_p + i).assign(&params.token_embed.row(*t));
    }

    let scale = 1.0 / (d as f64).sqrt();
    let attn = softmax_rows(params.query_embed.dot(&x.t()) * scale);
    let z = attn.dot(&x);
    let mut h = z.dot(&params.w1);
    h += &params.b1;
    h.mapv_inplace(f64::tanh);
    let mut output = h.dot(&params.w2);
    output += &params.b2;

    Ok(ForwardCache {
        patches,
        tokens,
        x,
        attn,
        z,
        h,
        output,
    })
}

pub fn compose(
    params: &ComposerParams,
    image: &Image,
    modification: &ModificationText,
) -> Result<FeatureMatrix> {
    Ok(forward(params, image, modification)?.output)
}

pub fn encode_target(params: &ComposerParams, image: &Image) -> Result<FeatureMatrix> {
    compose(params, image, &ModificationText::empty())
}

/// Accumulates `d(output_grad · F)/d(params)` into `grads`.
pub fn backward(
    params: &ComposerParams,
    cache: &ForwardCache,
    output_grad: ArrayView2<f64>,
    grads: &mut ComposerParams,
) {
    let d = params.config.dim;
    let n_p = params.config.num_patches();
    let scale = 1.0 / (d as f64).sqrt();

    // F = H W2 + b2
    grads.w2 += &cache.h.t().dot(&output_grad);
    grads.b2 += &output_grad.sum_axis(Axis(0));
    let d_h = output_grad.dot(&params.w2.t());

    // H = tanh(Z W1 + b1)
    let d_pre = d_h * cache.h.mapv(|v| 1.0 - v * v);
    grads.w1 += &cache.z.t().dot(&d_pre);
    grads.b1 += &d_pre.sum_axis(Axis(0));
    let d_z = d_pre.dot(&params.w1.t());

    // Z = A X
    let d_attn = d_z.dot(&cache.x.t());
    let mut d_x = cache.attn.t().dot(&d_z);

    // A = softmax(S), S = Q Xᵀ * scale
    let mut d_scores = d_attn;
    for (mut g, a) in d_scores.outer_iter_mut().zip(cache.attn.outer_iter()) {
        let dot: f64 = g.iter().zip(a.iter()).map(|(gi, ai)| gi * ai).sum();
        g.zip_mut_with(&a, |gi, ai| *gi = ai * (*gi - dot));
    }
    d_scores *= scale;
    grads.query_embed += &d_scores.dot(&cache.x);
    d_x += &d_scores.t().dot(&params.query_embed);

    // X_img = tanh(P W_patch + b + pos), X_txt = E[tokens]
    let d_img = &d_x.slice(s![..n_p, ..]) * &cache.x.slice(s![..n_p, ..]).mapv(|v| 1.0 - v * v);
    grads.patch_proj += &cache.patches.t().dot(&d_img);
    grads.patch_bias += &d_img.sum_axis(Axis(0));
    grads.pos_embed += &d_img;
    for (i, t) in cache.tokens.iter().enumerate() {
        let mut row = grads.token_embed.row_mut(*t);
        row += &d_x.row(n_p + i);
    }
}

/// Pools a `Q x D` feature into a unit vector.
pub fn pool(feature: &FeatureMatrix, mode: PoolMode) -> Result<Array1<f64>> {
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(IntentError::NonFinite("feature matrix has NaN/Inf".into()));
    }
    let raw = pool_raw(feature, mode);
    let norm = raw.dot(&raw).sqrt();
    if norm == 0.0 {
        return Err(IntentError::Degenerate(
            "pooled feature is zero; direction undefined".into(),
        ));
    }
    Ok(raw / norm)
}

fn pool_raw(feature: &FeatureMatrix, mode: PoolMode) -> Array1<f64> {
    match mode {
        PoolMode::Mean => feature.mean_axis(Axis(0)).expect("feature has rows"),
        PoolMode::MaxQuery => feature.fold_axis(Axis(0), f64::NEG_INFINITY, |a, b| a.max(*b)),
    }
}

/// Gradient of `grad · pool(feature)` with respect to `feature`.
pub fn pool_backward(feature: &FeatureMatrix, mode: PoolMode, grad: &Array1<f64>) -> FeatureMatrix {
    let raw = pool_raw(feature, mode);
    let norm = raw.dot(&raw).sqrt();
    let unit = &raw / norm;
    let d_raw = (grad - &(&unit * unit.dot(grad))) / norm;
    let q = feature.nrows();
    let mut out = Array2::zeros(feature.raw_dim());
    match mode {
        PoolMode::Mean => {
            for mut row in out.outer_iter_mut() {
                row.assign(&(&d_raw / q as f64));
            }
        }
        PoolMode::MaxQuery => {
            for (j, g) in d_raw.iter().enumerate() {
                let col = feature.column(j);
                // first maximal row wins ties
                let mut best = 0;
                for i in 1..q {
                    if col[i] > col[best] {
                        best = i;
                    }
                }
                out[[best, j]] = *g;
            }
        }
    }
    out
}
