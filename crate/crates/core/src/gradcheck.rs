//! Central finite-difference checks of every loss through the composer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composer::{ComposerConfig, ComposerParams};
use crate::data::ModificationText;
use crate::error::{IntentError, Result};
use crate::image::Image;
use crate::objectives::{total_loss, AblationToggles, LossBatch, ObjectiveConfig};

/// Which part of the objective is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Caco,
    Robust,
    Sod,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Caco, LossTerm::Robust, LossTerm::Sod, LossTerm::Total];

    pub fn name(&self) -> &'static str {
        match self {
            LossTerm::Caco => "caco",
            LossTerm::Robust => "robust",
            LossTerm::Sod => "sod",
            LossTerm::Total => "total",
        }
    }

    fn toggles(&self, base: AblationToggles) -> AblationToggles {
        let only = |robust, sod, vic| AblationToggles {
            enable_robust: robust,
            enable_sod: sod,
            enable_vic: vic,
            ..base
        };
        match self {
            LossTerm::Caco => only(false, false, true),
            LossTerm::Robust => only(true, false, false),
            LossTerm::Sod => only(false, true, false),
            LossTerm::Total => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub batch_sizes: Vec<usize>,
    pub queries: usize,
    pub dim: usize,
    pub hidden: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub objective: ObjectiveConfig,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            batch_sizes: vec![2, 3, 4],
            queries: 3,
            dim: 4,
            hidden: 4,
            image_size: 16,
            patch_size: 8,
            step: 1e-5,
            rel_tol: 1e-3,
            abs_floor: 1e-7,
            objective: ObjectiveConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub term: LossTerm,
    pub batch_size: usize,
    pub parameters: usize,
    pub max_abs_error: f64,
    /// Largest relative error among entries above the absolute floor.
    pub max_rel_error: f64,
    pub failures: usize,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Instance {
    params: ComposerParams,
    references: Vec<Image>,
    modifications: Vec<ModificationText>,
    targets: Vec<Image>,
    counterfactuals: Vec<Image>,
}

fn instance(config: &GradcheckConfig, b: usize, seed: u64) -> Result<Instance> {
    let composer = ComposerConfig {
        image_height: config.image_size,
        image_width: config.image_size,
        patch_size: config.patch_size,
        queries: config.queries,
        dim: config.dim,
        hidden: config.hidden,
        seed,
        ..Default::default()
    };
    let params = ComposerParams::init(&composer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let side = config.image_size;
    let mut image = || Image::new(side, side, 3, (0..side * side * 3).map(|_| rng.gen::<f64>()).collect());
    let references = (0..b).map(|_| image()).collect::<Result<Vec<_>>>()?;
    let targets = (0..b).map(|_| image()).collect::<Result<Vec<_>>>()?;
    let counterfactuals = (0..b).map(|_| image()).collect::<Result<Vec<_>>>()?;
    let vocab = composer.vocab_size as u32;
    let modifications = (0..b)
        .map(|i| ModificationText { tokens: vec![i as u32 % vocab, (7 + 3 * i as u32) % vocab] })
        .collect();
    Ok(Instance { params, references, modifications, targets, counterfactuals })
}

/// Checks one term at one batch size.
pub fn check_term(config: &GradcheckConfig, term: LossTerm, b: usize) -> Result<GradcheckResult> {
    if b < 2 {
        return Err(IntentError::InvalidArgument(format!("batch size {b} < 2")));
    }
    if !(config.step > 0.0) {
        return Err(IntentError::InvalidArgument("finite-difference step must be positive".into()));
    }
    let inst = instance(config, b, config.seed.wrapping_add(b as u64))?;
    let batch = LossBatch {
        references: &inst.references,
        modifications: &inst.modifications,
        targets: &inst.targets,
        counterfactuals: Some(&inst.counterfactuals),
    };
    let objective = ObjectiveConfig { toggles: term.toggles(config.objective.toggles), ..config.objective };
    let analytic = total_loss(&inst.params, &batch, &objective)?.grads.to_flat();
    let flat = inst.params.to_flat();
    let mut probe = inst.params.clone();
    let mut values = flat.clone();
    let mut result = GradcheckResult {
        term,
        batch_size: b,
        parameters: flat.len(),
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        failures: 0,
    };
    let h = config.step;
    for i in 0..flat.len() {
        values[i] = flat[i] + h;
        probe.set_flat(&values)?;
        let plus = total_loss(&probe, &batch, &objective)?.total;
        values[i] = flat[i] - h;
        probe.set_flat(&values)?;
        let minus = total_loss(&probe, &batch, &objective)?.total;
        values[i] = flat[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = (numeric - analytic[i]).abs();
        result.max_abs_error = result.max_abs_error.max(err);
        if err >= config.abs_floor {
            let rel = err / numeric.abs().max(analytic[i].abs());
            result.max_rel_error = result.max_rel_error.max(rel);
            if !(rel < config.rel_tol) {
                result.failures += 1;
            }
        }
    }
    Ok(result)
}

/// Every term at every configured batch size.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    for &b in &config.batch_sizes {
        for term in LossTerm::ALL {
            out.push(check_term(config, term, b)?);
        }
    }
    Ok(out)
}
