//! Training objectives and their composition into the total loss.

pub mod cka;
pub mod contrastive;
pub mod loyalty;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use cka::{caco_variant, center_gram, cka_loss, gram, CacoMetric, PairLoss};
pub use contrastive::{
    cosine_matrix, robust_contrastive_loss, similarity_backward, similarity_matrix, RobustLoss,
    RobustTerms, SimilarityMatrix, VectorGrads,
};
pub use loyalty::{
    diagonal_labels, loyalty_matrix, matching_likelihoods, reward_matrices, soft_discriminative_loss,
    sod_loss, LoyaltyMatrix, MatchingLikelihoods, RewardMatrices, RewardOptions, SodLoss,
};

use crate::composer::{backward, forward, pool, pool_backward, ComposerParams, FeatureMatrix};
use crate::data::ModificationText;
use crate::error::{IntentError, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mu: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mu: 0.2, alpha: 0.6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu", self.mu), ("alpha", self.alpha)] {
            if !v.is_finite() || v < 0.0 {
                return Err(IntentError::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationToggles {
    pub enable_vic: bool,
    pub enable_pwr: bool,
    pub enable_nwr: bool,
    pub enable_robust: bool,
    pub mask_diagonal: bool,
    pub enable_sod: bool,
    pub caco_metric: CacoMetric,
    /// Stop gradients through the weight rewards.
    pub detach_rewards: bool,
    /// Use the positive-probability summand in the robust loss.
    pub literal_robust: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            enable_vic: true,
            enable_pwr: true,
            enable_nwr: true,
            enable_robust: true,
            mask_diagonal: true,
            enable_sod: true,
            caco_metric: CacoMetric::Cka,
            detach_rewards: false,
            literal_robust: false,
        }
    }
}

impl AblationToggles {
    pub fn reward_options(&self) -> RewardOptions {
        RewardOptions {
            enable_pwr: self.enable_pwr,
            enable_nwr: self.enable_nwr,
            detach: self.detach_rewards,
        }
    }

    pub fn robust_terms(&self) -> RobustTerms {
        if self.literal_robust {
            RobustTerms::LiteralPositive
        } else {
            RobustTerms::from_mask(self.mask_diagonal)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// Temperature of the robust contrastive softmax.
    pub tau: f64,
    /// Temperature of the similarity matrix feeding the loyalty estimate.
    pub similarity_tau: f64,
    pub weights: LossWeights,
    pub toggles: AblationToggles,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            tau: 0.07,
            similarity_tau: 0.07,
            weights: LossWeights::default(),
            toggles: AblationToggles::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, t) in [("tau", self.tau), ("similarity_tau", self.similarity_tau)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(IntentError::InvalidArgument(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// One training batch. `counterfactuals` is required when the consistency term is on.
#[derive(Clone, Copy, Debug)]
pub struct LossBatch<'a> {
    pub references: &'a [Image],
    pub modifications: &'a [ModificationText],
    pub targets: &'a [Image],
    pub counterfactuals: Option<&'a [Image]>,
}

impl LossBatch<'_> {
    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let b = self.references.len();
        if b < 2 {
            return Err(IntentError::InvalidArgument(format!("batch size {b} < 2")));
        }
        let cf = self.counterfactuals.map_or(b, |c| c.len());
        if self.modifications.len() != b || self.targets.len() != b || cf != b {
            return Err(IntentError::Shape("batch components differ in length".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: f64,
    /// Unweighted component values; zero when the term is disabled.
    pub robust: f64,
    pub sod: f64,
    pub caco: f64,
    pub mean_p_plus: f64,
    pub mean_p_minus: f64,
    /// Samples whose CKA term was degenerate.
    pub caco_degenerate: usize,
    pub grads: ComposerParams,
}

/// Value and parameter gradient of
/// `[robust]·L_robust + μ·[sod]·L_sod + α·[vic]·L_caco`.
pub fn total_loss(params: &ComposerParams, batch: &LossBatch, config: &ObjectiveConfig) -> Result<TotalLoss> {
    config.validate()?;
    batch.validate()?;
    let t = &config.toggles;
    let b = batch.len();
    let mode = params.config.pool;

    let mut composed_caches = Vec::with_capacity(b);
    let mut target_caches = Vec::with_capacity(b);
    let empty = ModificationText::empty();
    for i in 0..b {
        composed_caches.push(forward(params, &batch.references[i], &batch.modifications[i])?);
        target_caches.push(forward(params, &batch.targets[i], &empty)?);
    }
    let d = params.config.dim;
    let pool_all = |caches: &[crate::composer::ForwardCache]| -> Result<Array2<f64>> {
        let mut out = Array2::zeros((caches.len(), d));
        for (mut row, c) in out.outer_iter_mut().zip(caches) {
            row.assign(&pool(&c.output, mode)?);
        }
        Ok(out)
    };
    let composed = pool_all(&composed_caches)?;
    let targets = pool_all(&target_caches)?;

    let mut d_composed = Array2::zeros((b, d));
    let mut d_targets = Array2::zeros((b, d));
    let mut out = TotalLoss {
        total: 0.0,
        robust: 0.0,
        sod: 0.0,
        caco: 0.0,
        mean_p_plus: 0.0,
        mean_p_minus: 0.0,
        caco_degenerate: 0,
        grads: params.zeros_like(),
    };

    if t.enable_robust {
        let r = robust_contrastive_loss(composed.view(), targets.view(), config.tau, t.robust_terms())?;
        out.robust = r.value;
        d_composed += &r.grads.composed;
        d_targets += &r.grads.targets;
    }

    // likelihood diagnostics are reported even when the term is off
    let s = similarity_matrix(composed.view(), targets.view(), config.similarity_tau)?;
    let y = diagonal_labels(b);
    let sod = sod_loss(&s, &y, t.reward_options())?;
    out.mean_p_plus = sod.loyalty.rewards.likelihoods.p_plus.mean().unwrap();
    out.mean_p_minus = sod.loyalty.rewards.likelihoods.p_minus.mean().unwrap();
    let mu = config.weights.mu;
    if t.enable_sod {
        out.sod = sod.value;
        if mu != 0.0 {
            let g = similarity_backward(composed.view(), targets.view(), &s, &sod.grad_s)?;
            d_composed.scaled_add(mu, &g.composed);
            d_targets.scaled_add(mu, &g.targets);
        }
    }

    let mut d_features: Vec<FeatureMatrix> = composed_caches
        .iter()
        .zip(d_composed.outer_iter())
        .map(|(c, g)| pool_backward(&c.output, mode, &g.to_owned()))
        .collect();

    let alpha = config.weights.alpha;
    if t.enable_vic {
        let cfs = batch.counterfactuals.ok_or_else(|| {
            IntentError::InvalidArgument("consistency term enabled but no counterfactual references given".into())
        })?;
        let mut cf_caches = Vec::with_capacity(b);
        for i in 0..b {
            cf_caches.push(forward(params, &cfs[i], &batch.modifications[i])?);
        }
        let f: Vec<FeatureMatrix> = composed_caches.iter().map(|c| c.output.clone()).collect();
        let fhat: Vec<FeatureMatrix> = cf_caches.iter().map(|c| c.output.clone()).collect();
        let caco = caco_variant(&f, &fhat, t.caco_metric)?;
        out.caco = caco.value;
        out.caco_degenerate = caco.degenerate.len();
        if alpha != 0.0 {
            for (df, g) in d_features.iter_mut().zip(&caco.grad_f) {
                df.scaled_add(alpha, g);
            }
            for (cache, g) in cf_caches.iter().zip(&caco.grad_fhat) {
                backward(params, cache, (g * alpha).view(), &mut out.grads);
            }
        }
    }

    for (cache, g) in composed_caches.iter().zip(&d_features) {
        backward(params, cache, g.view(), &mut out.grads);
    }
    for (cache, g) in target_caches.iter().zip(d_targets.outer_iter()) {
        let g: Array1<f64> = g.to_owned();
        backward(params, cache, pool_backward(&cache.output, mode, &g).view(), &mut out.grads);
    }

    out.total = out.robust + mu * out.sod + alpha * out.caco;
    if !out.total.is_finite() {
        return Err(IntentError::NonFinite(format!(
            "total loss is {} (robust {}, sod {}, caco {})",
            out.total, out.robust, out.sod, out.caco
        )));
    }
    Ok(out)
}
