//! Experiment grid: dataset generation, training of every (σ, variant, seed)
//! cell, and aggregation into a results table.
//!
//! ```text
//! <out>/grid.json                                   every cell ever requested
//! <out>/data/sigma=<σ>/seed=<s>/                    dataset (see data::manifest)
//! <out>/runs/sigma=<σ>/variant=<v>/seed=<s>/
//!     checkpoint.bin  steps.csv  epochs.csv  loyalty_ranks.csv
//!     similarity_heat.csv  similarity_heat.pgm  summary.json  runtime.txt
//! <out>/results.csv
//! ```
//!
//! Everything except `runtime.txt` and the runtime column of `results.csv`
//! is a pure function of the `ExperimentSpec`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, load_dataset, write_dataset, DatasetConfig, TripletDataset};
use crate::error::{IntentError, Result};
use crate::eval::{cosine_heat, export_similarity_heat, mean_ranks, validation_truth_ranks, RetrievalMetrics};
use crate::intervention::InterventionOp;
use crate::objectives::CacoMetric;
use crate::train::{epochs_csv, steps_csv, train, TrainConfig};

/// A named ablation cell, applied on top of the base training config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Full,
    WoVic,
    WoPwr,
    WoNwr,
    WoBothReward,
    WoRobust,
    WoMask,
    WoSod,
    CacoMse,
    CacoL1,
    CacoL2,
    IntRandomMask,
    IntPatchShuffle,
    IntGaussianBlur,
    IntGrayscale,
}

impl Variant {
    pub const ALL: [Variant; 15] = [
        Variant::Full,
        Variant::WoVic,
        Variant::WoPwr,
        Variant::WoNwr,
        Variant::WoBothReward,
        Variant::WoRobust,
        Variant::WoMask,
        Variant::WoSod,
        Variant::CacoMse,
        Variant::CacoL1,
        Variant::CacoL2,
        Variant::IntRandomMask,
        Variant::IntPatchShuffle,
        Variant::IntGaussianBlur,
        Variant::IntGrayscale,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoVic => "wo_vic",
            Variant::WoPwr => "wo_pwr",
            Variant::WoNwr => "wo_nwr",
            Variant::WoBothReward => "wo_both_reward",
            Variant::WoRobust => "wo_robust",
            Variant::WoMask => "wo_mask",
            Variant::WoSod => "wo_sod",
            Variant::CacoMse => "caco_mse",
            Variant::CacoL1 => "caco_l1",
            Variant::CacoL2 => "caco_l2",
            Variant::IntRandomMask => "int_random_mask",
            Variant::IntPatchShuffle => "int_patch_shuffle",
            Variant::IntGaussianBlur => "int_gaussian_blur",
            Variant::IntGrayscale => "int_grayscale",
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let t = &mut c.objective.toggles;
        match self {
            Variant::Full => {}
            Variant::WoVic => t.enable_vic = false,
            Variant::WoPwr => t.enable_pwr = false,
            Variant::WoNwr => t.enable_nwr = false,
            Variant::WoBothReward => {
                t.enable_pwr = false;
                t.enable_nwr = false;
            }
            Variant::WoRobust => t.enable_robust = false,
            Variant::WoMask => t.mask_diagonal = false,
            Variant::WoSod => t.enable_sod = false,
            Variant::CacoMse => t.caco_metric = CacoMetric::Mse,
            Variant::CacoL1 => t.caco_metric = CacoMetric::L1,
            Variant::CacoL2 => t.caco_metric = CacoMetric::L2,
            Variant::IntRandomMask => c.intervention = InterventionOp::RandomMask,
            Variant::IntPatchShuffle => c.intervention = InterventionOp::PatchShuffle,
            Variant::IntGaussianBlur => c.intervention = InterventionOp::GaussianBlur,
            Variant::IntGrayscale => c.intervention = InterventionOp::Grayscale,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = IntentError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| IntentError::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The full experiment grid. `dataset.noise_ratio` and both seeds are
/// overwritten per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub output_dir: PathBuf,
    pub noise_sweep: Vec<f64>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            output_dir: PathBuf::from("intent-output"),
            noise_sweep: vec![0.0, 0.2, 0.5, 0.8],
            seeds: vec![0, 1, 2],
            variants: vec![Variant::Full],
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| IntentError::InvalidArgument(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| IntentError::io(path, e))?;
        toml::from_str(&text).map_err(|e| IntentError::Format {
            path: path.to_path_buf(),
            msg: e.message().to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sweep.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return Err(IntentError::InvalidArgument(
                "noise sweep, seeds and variants must all be non-empty".into(),
            ));
        }
        for &sigma in &self.noise_sweep {
            self.dataset_config(sigma, 0).validate()?;
        }
        self.train.validate()
    }

    pub fn dataset_config(&self, sigma: f64, seed: u64) -> DatasetConfig {
        DatasetConfig { noise_ratio: sigma, seed, ..self.dataset.clone() }
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        let mut c = variant.apply(&self.train);
        c.seed = seed;
        c.composer = c.composer_for(&self.dataset);
        c
    }
}

pub fn data_dir(output_dir: &Path, sigma: f64, seed: u64) -> PathBuf {
    output_dir.join("data").join(format!("sigma={sigma}")).join(format!("seed={seed}"))
}

pub fn run_dir(output_dir: &Path, sigma: f64, variant: Variant, seed: u64) -> PathBuf {
    output_dir
        .join("runs")
        .join(format!("sigma={sigma}"))
        .join(format!("variant={variant}"))
        .join(format!("seed={seed}"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| IntentError::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| IntentError::io(path, e))
}

/// Writes one dataset per (σ, seed). Returns the dataset directories.
pub fn cmd_generate(spec: &ExperimentSpec) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let mut dirs = Vec::new();
    for &sigma in &spec.noise_sweep {
        for &seed in &spec.seeds {
            let dataset = generate_dataset(&spec.dataset_config(sigma, seed))?;
            let dir = data_dir(&spec.output_dir, sigma, seed);
            create_dir(&dir)?;
            write_dataset(&dataset, &dir)?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub sigma: f64,
    pub variant: Variant,
    pub seed: u64,
    pub metrics: RetrievalMetrics,
    /// Mean validation rank of the true target under raw similarity.
    pub mean_similarity_rank: f64,
    /// Mean validation rank of the true target under the loyalty degree.
    pub mean_loyalty_rank: f64,
    pub steps: usize,
    pub final_total_loss: Option<f64>,
}

fn load_cell_dataset(spec: &ExperimentSpec, sigma: f64, seed: u64) -> Result<TripletDataset> {
    let dir = data_dir(&spec.output_dir, sigma, seed);
    if !dir.join("dataset.json").is_file() {
        return Err(IntentError::Missing(format!(
            "no dataset for sigma={sigma} seed={seed} at {}; run `generate` first",
            dir.display()
        )));
    }
    let dataset = load_dataset(&dir)?;
    let expected = spec.dataset_config(sigma, seed);
    if dataset.config != expected {
        return Err(IntentError::InvalidArgument(format!(
            "dataset at {} was generated with a different config; regenerate it",
            dir.display()
        )));
    }
    Ok(dataset)
}

/// Trains one cell and writes its artifacts.
pub fn train_cell(spec: &ExperimentSpec, sigma: f64, variant: Variant, seed: u64) -> Result<RunSummary> {
    let dataset = load_cell_dataset(spec, sigma, seed)?;
    let config = spec.train_config(variant, seed);
    let started = Instant::now();
    let out = train(&dataset, &config)?;
    let runtime = started.elapsed().as_secs_f64();

    let dir = run_dir(&spec.output_dir, sigma, variant, seed);
    create_dir(&dir)?;
    // a stale summary must not survive a failed rerun
    let _ = fs::remove_file(dir.join("summary.json"));
    write(&dir.join("checkpoint.bin"), out.params.to_checkpoint_bytes())?;
    write(&dir.join("steps.csv"), steps_csv(&out.steps))?;
    write(&dir.join("epochs.csv"), epochs_csv(&out.epochs))?;

    let ranks = validation_truth_ranks(
        &out.params,
        &dataset,
        config.objective.similarity_tau,
        config.objective.toggles.reward_options(),
    )?;
    let mut csv = String::from("query,similarity_rank,loyalty_rank\n");
    for (i, r) in ranks.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{}", r.similarity, r.loyalty);
    }
    write(&dir.join("loyalty_ranks.csv"), csv)?;
    let heat = cosine_heat(
        &out.params,
        dataset.validation.iter().map(|q| (&q.reference, &q.modification)),
        dataset.validation.iter().map(|q| &dataset.gallery[q.truth].image),
    )?;
    export_similarity_heat(&heat, &dir.join("similarity_heat"))?;

    let (mean_similarity_rank, mean_loyalty_rank) = mean_ranks(&ranks);
    let summary = RunSummary {
        sigma,
        variant,
        seed,
        metrics: out.metrics,
        mean_similarity_rank,
        mean_loyalty_rank,
        steps: out.steps.len(),
        final_total_loss: out.steps.last().map(|s| s.total),
    };
    write(&dir.join("runtime.txt"), format!("{runtime:.3}\n"))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Grid {
    sigmas: Vec<f64>,
    variants: Vec<Variant>,
    seeds: Vec<u64>,
}

impl Grid {
    fn merge(&mut self, sigmas: &[f64], variants: &[Variant], seeds: &[u64]) {
        self.sigmas.extend_from_slice(sigmas);
        self.sigmas.sort_by(f64::total_cmp);
        self.sigmas.dedup();
        self.variants.extend_from_slice(variants);
        self.variants.sort_by_key(|v| v.name());
        self.variants.dedup();
        self.seeds.extend_from_slice(seeds);
        self.seeds.sort_unstable();
        self.seeds.dedup();
    }
}

fn read_grid(output_dir: &Path) -> Result<Grid> {
    let path = output_dir.join("grid.json");
    if !path.is_file() {
        return Ok(Grid::default());
    }
    let text = fs::read_to_string(&path).map_err(|e| IntentError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| IntentError::Format { path, msg: e.to_string() })
}

fn record_grid(spec: &ExperimentSpec) -> Result<()> {
    create_dir(&spec.output_dir)?;
    let mut grid = read_grid(&spec.output_dir)?;
    grid.merge(&spec.noise_sweep, &spec.variants, &spec.seeds);
    let json = serde_json::to_string_pretty(&grid).expect("grid serializes");
    write(&spec.output_dir.join("grid.json"), json + "\n")
}

/// Trains every (σ, variant, seed) cell, calling `done` after each one.
pub fn cmd_train_with(spec: &ExperimentSpec, mut done: impl FnMut(&RunSummary)) -> Result<Vec<RunSummary>> {
    spec.validate()?;
    // fail before any training if a dataset is missing
    for &sigma in &spec.noise_sweep {
        for &seed in &spec.seeds {
            load_cell_dataset(spec, sigma, seed)?;
        }
    }
    record_grid(spec)?;
    let mut out = Vec::new();
    for &sigma in &spec.noise_sweep {
        for &variant in &spec.variants {
            for &seed in &spec.seeds {
                let summary = train_cell(spec, sigma, variant, seed)?;
                done(&summary);
                out.push(summary);
            }
        }
    }
    Ok(out)
}

pub fn cmd_train(spec: &ExperimentSpec) -> Result<Vec<RunSummary>> {
    cmd_train_with(spec, |_| {})
}

/// Sample mean and standard deviation (n − 1 denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub sigma: f64,
    pub variant: Variant,
    pub summaries: Vec<RunSummary>,
    pub runtimes: Vec<f64>,
    /// Seeds of the grid with no finished run in this cell.
    pub missing_seeds: Vec<u64>,
}

impl ReportRow {
    pub fn is_missing(&self) -> bool {
        self.summaries.is_empty()
    }

    pub fn stat(&self, metric: impl Fn(&RunSummary) -> f64) -> (f64, f64) {
        mean_std(&self.summaries.iter().map(metric).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Run directories holding artifacts but no summary.
    pub incomplete: Vec<PathBuf>,
}

impl Report {
    pub fn row(&self, sigma: f64, variant: Variant) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.sigma == sigma && r.variant == variant)
    }
}

pub const RESULTS_CSV_HEADER: &str =
    "sigma,variant,runs,r1_mean,r1_std,r5_mean,r5_std,subset_r1_mean,subset_r1_std,runtime_s,missing_seeds";

/// Parses `<key>=<value>` directory names.
fn keyed<T: FromStr>(path: &Path, key: &str) -> Option<T> {
    path.file_name()?.to_str()?.strip_prefix(key)?.strip_prefix('=')?.parse().ok()
}

fn subdirs(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| IntentError::io(path, e))? {
        let p = entry.map_err(|e| IntentError::io(path, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

type CellKey = (u64, Variant, u64);

fn scan_runs(output_dir: &Path) -> Result<(BTreeMap<CellKey, (RunSummary, Option<f64>)>, Vec<PathBuf>, Grid)> {
    let mut found = BTreeMap::new();
    let mut incomplete = Vec::new();
    let mut grid = Grid::default();
    for sdir in subdirs(&output_dir.join("runs"))? {
        let Some(sigma) = keyed::<f64>(&sdir, "sigma") else { continue };
        for vdir in subdirs(&sdir)? {
            let Some(variant) = keyed::<Variant>(&vdir, "variant") else { continue };
            for rdir in subdirs(&vdir)? {
                let Some(seed) = keyed::<u64>(&rdir, "seed") else { continue };
                grid.merge(&[sigma], &[variant], &[seed]);
                let path = rdir.join("summary.json");
                if !path.is_file() {
                    incomplete.push(rdir);
                    continue;
                }
                let text = fs::read_to_string(&path).map_err(|e| IntentError::io(&path, e))?;
                let summary: RunSummary = serde_json::from_str(&text)
                    .map_err(|e| IntentError::Format { path: path.clone(), msg: e.to_string() })?;
                let runtime = fs::read_to_string(rdir.join("runtime.txt"))
                    .ok()
                    .and_then(|t| t.trim().parse().ok());
                found.insert((sigma.to_bits(), variant, seed), (summary, runtime));
            }
        }
    }
    Ok((found, incomplete, grid))
}

/// Aggregates every run under `output_dir` over seeds and writes
/// `results.csv`. Cells of the recorded grid without runs are kept as
/// MISSING rows.
pub fn cmd_report(output_dir: &Path) -> Result<Report> {
    let (found, incomplete, seen) = scan_runs(output_dir)?;
    let mut grid = read_grid(output_dir)?;
    grid.merge(&seen.sigmas, &seen.variants, &seen.seeds);
    if grid.sigmas.is_empty() {
        return Err(IntentError::Missing(format!("no runs under {}", output_dir.join("runs").display())));
    }
    let mut rows = Vec::new();
    for &sigma in &grid.sigmas {
        for &variant in &grid.variants {
            let mut row = ReportRow { sigma, variant, summaries: vec![], runtimes: vec![], missing_seeds: vec![] };
            for &seed in &grid.seeds {
                match found.get(&(sigma.to_bits(), variant, seed)) {
                    Some((s, rt)) => {
                        row.summaries.push(s.clone());
                        row.runtimes.extend(rt);
                    }
                    None => row.missing_seeds.push(seed),
                }
            }
            rows.push(row);
        }
    }
    let report = Report { rows, incomplete };
    let path = output_dir.join("results.csv");
    write(&path, results_csv(&report))?;
    Ok(report)
}

pub fn results_csv(report: &Report) -> String {
    let mut out = String::from(
        "# mean and std over seeds; std is the sample standard deviation (n-1 denominator), 0 for a single run\n",
    );
    out.push_str(RESULTS_CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        let missing = row.missing_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        let _ = write!(out, "{},{},{}", row.sigma, row.variant, row.summaries.len());
        if row.is_missing() {
            out.push_str(&",MISSING".repeat(7));
        } else {
            for metric in [
                (|s: &RunSummary| s.metrics.r1) as fn(&RunSummary) -> f64,
                |s| s.metrics.r5,
                |s| s.metrics.subset_r1,
            ] {
                let (m, sd) = row.stat(metric);
                let _ = write!(out, ",{m:.6},{sd:.6}");
            }
            if row.runtimes.is_empty() {
                out.push(',');
            } else {
                let _ = write!(out, ",{:.3}", mean_std(&row.runtimes).0);
            }
        }
        let _ = writeln!(out, ",{missing}");
    }
    out
}
