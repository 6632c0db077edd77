//! Linear CKA between Gram matrices of paired features, and the simpler
//! distance metrics used in the consistency ablations.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::composer::FeatureMatrix;
use crate::error::{IntentError, Result};

pub const CKA_EPS: f64 = 1e-8;

/// Centered Grams with a norm below this (relative to the raw Gram) count as zero.
const DEGENERATE_REL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacoMetric {
    #[default]
    Cka,
    Mse,
    L1,
    L2,
}

impl CacoMetric {
    pub const ALL: [CacoMetric; 4] = [CacoMetric::Cka, CacoMetric::Mse, CacoMetric::L1, CacoMetric::L2];

    pub fn name(self) -> &'static str {
        match self {
            CacoMetric::Cka => "cka",
            CacoMetric::Mse => "mse",
            CacoMetric::L1 => "l1",
            CacoMetric::L2 => "l2",
        }
    }
}

impl std::str::FromStr for CacoMetric {
    type Err = IntentError;

    fn from_str(s: &str) -> Result<Self> {
        CacoMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| IntentError::InvalidArgument(format!("unknown consistency metric {s:?}")))
    }
}

/// Loss over paired feature batches with gradients for both sides.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub value: f64,
    pub grad_f: Vec<FeatureMatrix>,
    pub grad_fhat: Vec<FeatureMatrix>,
    /// Samples whose centered Gram vanished on either side (CKA only).
    pub degenerate: Vec<usize>,
}

pub fn gram(feature: &FeatureMatrix) -> Array2<f64> {
    feature.dot(&feature.t())
}

/// `H K H` with `H = I - ee^T / Q`.
pub fn center_gram(k: &Array2<f64>) -> Array2<f64> {
    let row_means = k.mean_axis(ndarray::Axis(1)).unwrap();
    let col_means = k.mean_axis(ndarray::Axis(0)).unwrap();
    let grand = k.mean().unwrap();
    Array2::from_shape_fn(k.raw_dim(), |(i, j)| k[[i, j]] - row_means[i] - col_means[j] + grand)
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_pairs(f: &[FeatureMatrix], fhat: &[FeatureMatrix]) -> Result<()> {
    if f.is_empty() || f.len() != fhat.len() {
        return Err(IntentError::Shape(format!(
            "paired batches must be non-empty and equal length, got {} and {}",
            f.len(),
            fhat.len()
        )));
    }
    for (i, (a, b)) in f.iter().zip(fhat).enumerate() {
        if a.shape() != b.shape() {
            return Err(IntentError::Shape(format!(
                "sample {i}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(IntentError::NonFinite(format!("sample {i} has NaN/Inf features")));
        }
    }
    Ok(())
}

/// Mean over samples of `1 - CKA(F_i, F̂_i)`.
pub fn cka_loss(f: &[FeatureMatrix], fhat: &[FeatureMatrix]) -> Result<PairLoss> {
    check_pairs(f, fhat)?;
    let b = f.len() as f64;
    let mut value = 0.0;
    let mut grad_f = Vec::with_capacity(f.len());
    let mut grad_fhat = Vec::with_capacity(f.len());
    let mut degenerate = Vec::new();

    for (i, (x, y)) in f.iter().zip(fhat).enumerate() {
        let (k, l) = (gram(x), gram(y));
        let (kc, lc) = (center_gram(&k), center_gram(&l));
        let (nk, nl) = (frobenius(&kc), frobenius(&lc));
        if nk <= DEGENERATE_REL * (1.0 + frobenius(&k)) || nl <= DEGENERATE_REL * (1.0 + frobenius(&l)) {
            value += 1.0;
            degenerate.push(i);
            grad_f.push(Array2::zeros(x.raw_dim()));
            grad_fhat.push(Array2::zeros(y.raw_dim()));
            continue;
        }
        let a: f64 = kc.iter().zip(lc.iter()).map(|(p, q)| p * q).sum();
        // floor rather than offset, so scaling F leaves the value unchanged
        let floored = nk * nl < CKA_EPS;
        let den = if floored { CKA_EPS } else { nk * nl };
        value += 1.0 - a / den;

        // d(1 - a/den)/dK̄, scaled by 1/B
        let g = if floored { 0.0 } else { a / (den * den) };
        let d_kc = (&lc / den - &kc * (g * nl / nk)) * (-1.0 / b);
        let d_lc = (&kc / den - &lc * (g * nk / nl)) * (-1.0 / b);
        grad_f.push(gram_backward(&center_gram(&d_kc), x));
        grad_fhat.push(gram_backward(&center_gram(&d_lc), y));
    }
    Ok(PairLoss {
        value: value / b,
        grad_f,
        grad_fhat,
        degenerate,
    })
}

/// Gradient of `<dK, F F^T>` with respect to `F`.
fn gram_backward(d_k: &Array2<f64>, f: &FeatureMatrix) -> FeatureMatrix {
    (d_k + &d_k.t()).dot(f)
}

pub fn caco_variant(f: &[FeatureMatrix], fhat: &[FeatureMatrix], metric: CacoMetric) -> Result<PairLoss> {
    if metric == CacoMetric::Cka {
        return cka_loss(f, fhat);
    }
    check_pairs(f, fhat)?;
    let b = f.len() as f64;
    let count: f64 = f.iter().map(|x| x.len() as f64).sum();
    let mut value = 0.0;
    let mut grad_f = Vec::with_capacity(f.len());
    for (x, y) in f.iter().zip(fhat) {
        let diff = x - y;
        let g = match metric {
            CacoMetric::Mse => {
                value += diff.iter().map(|d| d * d).sum::<f64>() / count;
                &diff * (2.0 / count)
            }
            CacoMetric::L1 => {
                value += diff.iter().map(|d| d.abs()).sum::<f64>() / count;
                diff.mapv(|d| if d == 0.0 { 0.0 } else { d.signum() / count })
            }
            CacoMetric::L2 => {
                let norm = frobenius(&diff);
                value += norm / b;
                if norm == 0.0 {
                    Array2::zeros(diff.raw_dim())
                } else {
                    &diff / (norm * b)
                }
            }
            CacoMetric::Cka => unreachable!(),
        };
        grad_f.push(g);
    }
    let grad_fhat = grad_f.iter().map(|g| -g).collect();
    Ok(PairLoss {
        value,
        grad_f,
        grad_fhat,
        degenerate: Vec::new(),
    })
}
