//! Cosine similarity, the softmax similarity matrix and the robust
//! contrastive loss over pooled composed/target vectors.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{IntentError, Result};

pub const LOG_EPS: f64 = 1e-8;

/// Row-stochastic `B x B` matrix `softmax_j(cos(c_i, t_j) / tau)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub entries: Array2<f64>,
    pub tau: f64,
}

impl SimilarityMatrix {
    pub fn batch_size(&self) -> usize {
        self.entries.nrows()
    }
}

/// Gradients of a scalar with respect to the composed and target vectors.
#[derive(Clone, Debug)]
pub struct VectorGrads {
    pub composed: Array2<f64>,
    pub targets: Array2<f64>,
}

fn check_pair(composed: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<()> {
    if composed.shape() != targets.shape() {
        return Err(IntentError::Shape(format!(
            "composed {:?} vs targets {:?}",
            composed.shape(),
            targets.shape()
        )));
    }
    if composed.nrows() < 2 {
        return Err(IntentError::InvalidArgument(
            "contrastive terms need a batch of at least 2".into(),
        ));
    }
    if composed.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
        return Err(IntentError::NonFinite("pooled vectors contain NaN/Inf".into()));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(IntentError::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

fn normalize_rows(m: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = Array1::from_iter(m.outer_iter().map(|r| r.dot(&r).sqrt()));
    if norms.iter().any(|n| *n == 0.0) {
        return Err(IntentError::Degenerate("zero vector has no direction".into()));
    }
    let mut out = m.to_owned();
    for (mut row, n) in out.outer_iter_mut().zip(norms.iter()) {
        row /= *n;
    }
    Ok((out, norms))
}

/// `cos(c_i, t_j)` for all pairs.
pub fn cosine_matrix(composed: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (c, _) = normalize_rows(composed)?;
    let (t, _) = normalize_rows(targets)?;
    Ok(c.dot(&t.t()))
}

/// Pulls a gradient on the cosine matrix back to the raw vectors.
pub fn cosine_backward(
    composed: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    d_cos: &Array2<f64>,
) -> Result<VectorGrads> {
    let (c, nc) = normalize_rows(composed)?;
    let (t, nt) = normalize_rows(targets)?;
    let project = |unit: &Array2<f64>, norms: &Array1<f64>, d_unit: Array2<f64>| {
        let mut out = d_unit;
        for ((mut g, u), n) in out.outer_iter_mut().zip(unit.outer_iter()).zip(norms.iter()) {
            let along = u.dot(&g);
            g.scaled_add(-along, &u);
            g /= *n;
        }
        out
    };
    Ok(VectorGrads {
        composed: project(&c, &nc, d_cos.dot(&t)),
        targets: project(&t, &nt, d_cos.t().dot(&c)),
    })
}

pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

/// Gradient on the logits given a gradient on `softmax_rows(logits)`.
pub(crate) fn softmax_rows_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = d_probs.clone();
    for (mut g, p) in out.outer_iter_mut().zip(probs.outer_iter()) {
        let dot = g.dot(&p);
        g.zip_mut_with(&p, |gi, pi| *gi = pi * (*gi - dot));
    }
    out
}

pub fn similarity_matrix(
    composed: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    tau: f64,
) -> Result<SimilarityMatrix> {
    check_tau(tau)?;
    check_pair(composed, targets)?;
    let cos = cosine_matrix(composed, targets)?;
    Ok(SimilarityMatrix {
        entries: softmax_rows(&(cos / tau)),
        tau,
    })
}

/// Gradient of a scalar through `similarity_matrix`, given its gradient on `S`.
pub fn similarity_backward(
    composed: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    s: &SimilarityMatrix,
    d_s: &Array2<f64>,
) -> Result<VectorGrads> {
    let d_cos = softmax_rows_backward(&s.entries, d_s) / s.tau;
    cosine_backward(composed, targets, &d_cos)
}

/// Which probabilities enter the `-log(1 - p)` sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RobustTerms {
    /// Negatives only, `j != i`.
    #[default]
    Negatives,
    /// Every entry including the positive.
    All,
    /// The positive probability once per negative, `(B - 1) log(1 - p_ii)`.
    LiteralPositive,
}

impl RobustTerms {
    pub fn from_mask(mask_diagonal: bool) -> Self {
        if mask_diagonal {
            RobustTerms::Negatives
        } else {
            RobustTerms::All
        }
    }

    fn weight(self, b: usize, i: usize, j: usize) -> f64 {
        match self {
            RobustTerms::Negatives => (i != j) as u8 as f64,
            RobustTerms::All => 1.0,
            RobustTerms::LiteralPositive => {
                if i == j {
                    (b - 1) as f64
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RobustLoss {
    pub value: f64,
    pub probs: Array2<f64>,
    pub grads: VectorGrads,
}

/// `-(1/B) Σ_i Σ_j w_ij log(max(1 - p_ij, eps))` with `p = softmax(cos / tau)`.
pub fn robust_contrastive_loss(
    composed: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    tau: f64,
    terms: RobustTerms,
) -> Result<RobustLoss> {
    let s = similarity_matrix(composed, targets, tau)?;
    let b = s.batch_size();
    let p = &s.entries;
    let mut value = 0.0;
    let mut d_p = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            let w = terms.weight(b, i, j);
            if w == 0.0 {
                continue;
            }
            let arg = 1.0 - p[[i, j]];
            if arg > LOG_EPS {
                value -= w * arg.ln();
                d_p[[i, j]] = w / (arg * b as f64);
            } else {
                value -= w * LOG_EPS.ln();
            }
        }
    }
    let grads = similarity_backward(composed, targets, &s, &d_p)?;
    Ok(RobustLoss {
        value: value / b as f64,
        probs: s.entries,
        grads,
    })
}
