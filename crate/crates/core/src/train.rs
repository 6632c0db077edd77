//! The training loop and its optimizers.
//!
//! Each epoch shuffles the training triplets with a seeded generator and
//! walks them in full batches; the trailing partial batch is dropped. Batch
//! order and counterfactual sampling use separate ChaCha streams, so the
//! choice of intervention never changes which triplets are seen.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composer::{ComposerConfig, ComposerParams};
use crate::data::{DatasetConfig, ModificationText, TripletDataset};
use crate::error::{IntentError, Result};
use crate::eval::{evaluate, RetrievalMetrics};
use crate::image::Image;
use crate::intervention::{apply_intervention, InterventionOp, InterventionSettings};
use crate::objectives::{total_loss, LossBatch, ObjectiveConfig, TotalLoss};

pub use crate::objectives::{AblationToggles, LossWeights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub objective: ObjectiveConfig,
    pub intervention: InterventionOp,
    pub intervention_settings: InterventionSettings,
    pub composer: ComposerConfig,
    /// Compute validation metrics after every epoch rather than only the last.
    pub evaluate_each_epoch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            learning_rate: 0.5,
            optimizer: OptimizerKind::Sgd,
            objective: ObjectiveConfig::default(),
            intervention: InterventionOp::FftMix,
            intervention_settings: InterventionSettings::default(),
            composer: ComposerConfig::default(),
            evaluate_each_epoch: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(IntentError::InvalidArgument(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(IntentError::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        self.objective.validate()?;
        self.composer.validate()
    }

    /// Composer configuration with image shape and vocabulary taken from the data.
    pub fn composer_for(&self, data: &DatasetConfig) -> ComposerConfig {
        ComposerConfig {
            image_height: data.image_size,
            image_width: data.image_size,
            channels: 3,
            vocab_size: data.space.vocab_size(),
            seed: self.seed,
            ..self.composer.clone()
        }
    }
}

/// `p <- p - lr * g`.
pub fn sgd_step(params: &mut ComposerParams, grads: &ComposerParams, learning_rate: f64) -> Result<()> {
    if !grads.all_finite() {
        return Err(IntentError::NonFinite("gradient contains NaN/Inf".into()));
    }
    params.add_scaled(grads, -learning_rate);
    Ok(())
}

/// Adaptive-moment optimizer over flat parameter vectors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, size: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(IntentError::Shape(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(IntentError::NonFinite("gradient contains NaN/Inf".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut ComposerParams, grads: &ComposerParams) -> Result<()> {
        let mut flat = params.to_flat();
        self.step_slice(&mut flat, &grads.to_flat())?;
        params.set_flat(&flat)
    }
}

enum Optimizer {
    Sgd(f64),
    Adam(Box<Adam>),
}

impl Optimizer {
    fn step(&mut self, params: &mut ComposerParams, grads: &ComposerParams) -> Result<()> {
        match self {
            Optimizer::Sgd(lr) => sgd_step(params, grads, *lr),
            Optimizer::Adam(adam) => adam.step(params, grads),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub robust: f64,
    pub sod: f64,
    pub caco: f64,
    pub total: f64,
    pub mean_p_plus: f64,
    pub mean_p_minus: f64,
}

impl StepRecord {
    fn from_loss(step: usize, epoch: usize, loss: &TotalLoss) -> Self {
        StepRecord {
            step,
            epoch,
            robust: loss.robust,
            sod: loss.sod,
            caco: loss.caco,
            total: loss.total,
            mean_p_plus: loss.mean_p_plus,
            mean_p_minus: loss.mean_p_minus,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub robust: f64,
    pub sod: f64,
    pub caco: f64,
    pub total: f64,
    /// `None` when the epoch was not evaluated.
    pub metrics: Option<RetrievalMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ComposerParams,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Validation metrics of the returned parameters.
    pub metrics: RetrievalMetrics,
}

pub const STEP_CSV_HEADER: &str = "step,epoch,l_robust,l_sod,l_caco,total,mean_p_plus,mean_p_minus";
pub const EPOCH_CSV_HEADER: &str = "epoch,steps,l_robust,l_sod,l_caco,total,r1,r5,r10,subset_r1,subset_r2,subset_r3";

pub fn steps_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from(STEP_CSV_HEADER);
    out.push('\n');
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.step, s.epoch, s.robust, s.sod, s.caco, s.total, s.mean_p_plus, s.mean_p_minus
        );
    }
    out
}

pub fn epochs_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for e in epochs {
        let _ = write!(out, "{},{},{},{},{},{}", e.epoch, e.steps, e.robust, e.sod, e.caco, e.total);
        match &e.metrics {
            Some(m) => {
                let _ = writeln!(
                    out,
                    ",{},{},{},{},{},{}",
                    m.r1, m.r5, m.r10, m.subset_r1, m.subset_r2, m.subset_r3
                );
            }
            None => out.push_str(",,,,,,\n"),
        }
    }
    out
}

fn counterfactuals(
    config: &TrainConfig,
    references: &[Image],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Image>> {
    let b = references.len();
    (0..b)
        .map(|i| {
            // distractor drawn from the other references in the batch
            let mut j = rng.gen_range(0..b - 1);
            if j >= i {
                j += 1;
            }
            let seed = rng.gen::<u64>();
            apply_intervention(
                config.intervention,
                &config.intervention_settings,
                &references[i],
                &references[j],
                seed,
            )
        })
        .collect()
}

/// Trains a freshly initialized composer on `dataset`.
pub fn train(dataset: &TripletDataset, config: &TrainConfig) -> Result<TrainOutput> {
    train_with_observer(dataset, config, |_| {})
}

/// As [`train`], calling `observe` after every optimizer step.
pub fn train_with_observer(
    dataset: &TripletDataset,
    config: &TrainConfig,
    mut observe: impl FnMut(&StepRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    let n = dataset.triplets.len();
    let b = config.batch_size;
    if n < b {
        return Err(IntentError::InvalidArgument(format!(
            "dataset has {n} triplets, fewer than the batch size {b}"
        )));
    }
    let mut params = ComposerParams::init(&config.composer_for(&dataset.config))?;
    params.round_to_f32();
    let mut optimizer = match config.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(config.learning_rate),
        OptimizerKind::Adam => Optimizer::Adam(Box::new(Adam::new(config.learning_rate, params.num_params()))),
    };

    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cf_rng = ChaCha8Rng::seed_from_u64(config.seed);
    cf_rng.set_stream(1);

    let use_cf = config.objective.toggles.enable_vic;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut batch_rng);
        let first = steps.len();
        for chunk in order.chunks_exact(b) {
            let refs: Vec<Image> = chunk.iter().map(|i| dataset.triplets[*i].reference.clone()).collect();
            let mods: Vec<ModificationText> =
                chunk.iter().map(|i| dataset.triplets[*i].modification.clone()).collect();
            let tgts: Vec<Image> = chunk.iter().map(|i| dataset.triplets[*i].target.clone()).collect();
            let cfs = if use_cf {
                Some(counterfactuals(config, &refs, &mut cf_rng)?)
            } else {
                None
            };
            let batch = LossBatch {
                references: &refs,
                modifications: &mods,
                targets: &tgts,
                counterfactuals: cfs.as_deref(),
            };
            let step = steps.len();
            let loss = total_loss(&params, &batch, &config.objective).map_err(|e| match e {
                IntentError::NonFinite(msg) => IntentError::NonFinite(format!(
                    "epoch {epoch} step {step}: {msg}; parameters finite: {}",
                    params.all_finite()
                )),
                other => other,
            })?;
            let record = StepRecord::from_loss(step, epoch, &loss);
            optimizer.step(&mut params, &loss.grads).map_err(|e| {
                IntentError::NonFinite(format!("epoch {epoch} step {step}: {e} (loss {})", loss.total))
            })?;
            params.round_to_f32();
            observe(&record);
            steps.push(record);
        }
        let done = &steps[first..];
        let mean = |f: fn(&StepRecord) -> f64| done.iter().map(f).sum::<f64>() / done.len().max(1) as f64;
        let last = epoch + 1 == config.epochs;
        epochs.push(EpochRecord {
            epoch,
            steps: done.len(),
            robust: mean(|s| s.robust),
            sod: mean(|s| s.sod),
            caco: mean(|s| s.caco),
            total: mean(|s| s.total),
            metrics: if config.evaluate_each_epoch || last {
                Some(evaluate(&params, dataset)?)
            } else {
                None
            },
        });
    }
    let metrics = match epochs.last().and_then(|e| e.metrics) {
        Some(m) => m,
        None => evaluate(&params, dataset)?,
    };
    Ok(TrainOutput {
        params,
        steps,
        epochs,
        metrics,
    })
}
