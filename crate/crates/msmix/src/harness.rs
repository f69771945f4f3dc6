//! Training loop, multi-seed comparison runner, and report emission.
//!
//! A [`ExperimentConfig`] (TOML on disk) names one or more datasets, the
//! model dimensions, the optimizer settings, a base [`MixConfig`], a seed
//! list, and optionally a set of named variants. [`train`] runs one seeded
//! experiment; [`compare`] runs the full variant × dataset × seed grid and
//! aggregates mean ± std test accuracy into a [`ComparisonReport`] that
//! renders as a markdown pipe table or csv.
//!
//! Everything is single-threaded and seeded, so repeated invocations of the
//! same config produce byte-identical reports. Wall-clock time is recorded
//! per run but never written into reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    self, draw_plan, mix_hidden, mix_labels, pair_partners, AugmentError, LabelMode, MixConfig,
    MixStrategy, RowScope,
};
use crate::data::{
    self, encode, DataError, DataFormat, EncodedDataset, ShortClass, SynthSpec, TokenMode, Vocab,
};
use crate::model::{
    backward, backward_mixed, cross_entropy, forward, forward_from, forward_to, init_params,
    ModelError, ModelParams,
};
use crate::tensor::Rng;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("run diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("report has no rows or no columns")]
    EmptyReport,
    #[error("cannot infer report format from `{0}`; use a .md or .csv path")]
    UnknownReportFormat(String),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width d.
    #[serde(default = "default_width")]
    pub d: usize,
    /// Number of blocks m.
    #[serde(default = "default_depth")]
    pub m: usize,
    /// Token positions I; longer texts are truncated.
    #[serde(default = "default_max_len", alias = "i")]
    pub max_len: usize,
    #[serde(default = "default_residual")]
    pub residual: bool,
    #[serde(default)]
    pub tokenizer: TokenMode,
}

fn default_width() -> usize {
    32
}
fn default_depth() -> usize {
    4
}
fn default_max_len() -> usize {
    32
}
fn default_residual() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: default_width(),
            m: default_depth(),
            max_len: default_max_len(),
            residual: default_residual(),
            tokenizer: TokenMode::Char,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_learning_rate() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    16
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
        }
    }
}

/// Where a dataset comes from: a jsonl/csv pair on disk or the seeded
/// synthetic generator. The corpus seed is independent of the run seeds so
/// every run of a comparison sees the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default)]
        name: Option<String>,
        classes: usize,
        per_class_train: usize,
        per_class_test: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_corpus_seed")]
        corpus_seed: u64,
    },
    Files {
        #[serde(default)]
        name: Option<String>,
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        format: DataFormat,
    },
}

fn default_corpus_seed() -> u64 {
    7
}

impl DatasetSpec {
    pub fn display_name(&self) -> String {
        match self {
            DatasetSpec::Synthetic { name: Some(n), .. } | DatasetSpec::Files { name: Some(n), .. } => {
                n.clone()
            }
            DatasetSpec::Synthetic { classes, per_class_train, .. } => {
                format!("synthetic-{classes}x{per_class_train}")
            }
            DatasetSpec::Files { train, .. } => train
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
        }
    }
}

/// Partial [`MixConfig`] override defining one comparison row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub strategy: Option<MixStrategy>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub layer_set: Option<Vec<usize>>,
    #[serde(default)]
    pub q_ratio: Option<f64>,
    #[serde(default)]
    pub label_mode: Option<LabelMode>,
    #[serde(default)]
    pub row_scope: Option<RowScope>,
    #[serde(default)]
    pub signed_rank: Option<bool>,
}

impl VariantSpec {
    pub fn apply(&self, base: &MixConfig) -> MixConfig {
        let mut mix = base.clone();
        if let Some(s) = self.strategy {
            mix.strategy = s;
        }
        if let Some(a) = self.alpha {
            mix.alpha = a;
        }
        if let Some(l) = &self.layer_set {
            mix.layer_set = l.clone();
        }
        if let Some(q) = self.q_ratio {
            mix.q_ratio = q;
        }
        if let Some(m) = self.label_mode {
            mix.label_mode = m;
        }
        if let Some(r) = self.row_scope {
            mix.row_scope = r;
        }
        if let Some(s) = self.signed_rank {
            mix.signed_rank = s;
        }
        mix
    }

    pub fn display_name(&self, base: &MixConfig) -> String {
        self.name.clone().unwrap_or_else(|| self.apply(base).strategy.name().to_string())
    }
}

/// Full experiment description; the TOML schema of config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub mix: MixConfig,
    pub seeds: Vec<u64>,
    /// Per-class few-shot subsampling of the train split, applied before
    /// vocabulary construction.
    #[serde(default)]
    pub fewshot: Option<usize>,
    #[serde(default = "default_fewshot_seed")]
    pub fewshot_seed: u64,
    /// Adds the plain (unmixed) batch loss next to the mixed loss.
    #[serde(default)]
    pub include_clean: bool,
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub variants: Vec<VariantSpec>,
    /// Appends the fixed-last-layer vs random-middle-layer row pair for each
    /// swap strategy to the comparison.
    #[serde(default)]
    pub layer_policy: bool,
}

fn default_fewshot_seed() -> u64 {
    1009
}

impl ExperimentConfig {
    pub fn from_toml_str(raw: &str) -> Result<Self, HarnessError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(raw).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_toml_str(&raw)
    }

    /// Fills derived defaults: an empty layer set becomes the middle layers
    /// of the configured model.
    pub fn normalize(&mut self) {
        if self.mix.layer_set.is_empty() {
            self.mix.layer_set = MixConfig::middle_layers(self.model.m);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("`seeds` must be non-empty".into()));
        }
        if self.optimizer.epochs == 0 {
            return Err(HarnessError::Config("`optimizer.epochs` must be at least 1".into()));
        }
        if self.optimizer.batch_size < 2 {
            return Err(HarnessError::Config(
                "`optimizer.batch_size` must be at least 2 (pairing needs two samples)".into(),
            ));
        }
        if self.datasets.is_empty() {
            return Err(HarnessError::Config("at least one [[datasets]] entry required".into()));
        }
        if self.model.d == 0 || self.model.m == 0 || self.model.max_len == 0 {
            return Err(HarnessError::Config("model dims must be positive".into()));
        }
        self.mix
            .validate(self.model.m)
            .map_err(|e| HarnessError::Config(format!("mix config: {e}")))?;
        for variant in &self.variants {
            variant
                .apply(&self.mix)
                .validate(self.model.m)
                .map_err(|e| HarnessError::Config(format!("variant config: {e}")))?;
        }
        Ok(())
    }

    /// The comparison rows: configured variants (or the base mix when none
    /// are given), plus the layer-policy pairs when enabled.
    pub fn comparison_rows(&self) -> Vec<(String, MixConfig)> {
        let mut rows: Vec<(String, MixConfig)> = if self.variants.is_empty() {
            vec![(self.mix.strategy.name().to_string(), self.mix.clone())]
        } else {
            self.variants
                .iter()
                .map(|v| (v.display_name(&self.mix), v.apply(&self.mix)))
                .collect()
        };
        if self.layer_policy {
            rows.extend(layer_policy_rows(&self.mix, self.model.m));
        }
        rows
    }
}

/// The fixed-last-layer vs random-middle-layer pair for each swap strategy,
/// mirroring the layer-selection study.
pub fn layer_policy_rows(base: &MixConfig, depth: usize) -> Vec<(String, MixConfig)> {
    let mut rows = Vec::new();
    for strategy in [MixStrategy::Base, MixStrategy::A, MixStrategy::B] {
        let mut fixed = base.clone();
        fixed.strategy = strategy;
        fixed.layer_set = vec![depth];
        rows.push((format!("{}(k={})", strategy.name(), depth), fixed));
        let mut random_middle = base.clone();
        random_middle.strategy = strategy;
        random_middle.layer_set = MixConfig::middle_layers(depth);
        rows.push((format!("{}(random k)", strategy.name()), random_middle));
    }
    rows
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

/// Encoded train/test splits plus the vocabulary they were encoded with.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub name: String,
    pub vocab: Vocab,
    pub train: EncodedDataset,
    pub test: EncodedDataset,
    /// Classes that fell short during few-shot sampling.
    pub short_classes: Vec<ShortClass>,
}

/// Loads or generates the dataset, applies few-shot subsampling, builds the
/// vocabulary from the (possibly subsampled) train split, and encodes both
/// splits against it.
pub fn prepare_dataset(
    spec: &DatasetSpec,
    fewshot: Option<usize>,
    fewshot_seed: u64,
    model: &ModelConfig,
) -> Result<PreparedDataset, HarnessError> {
    let (train_raw, test_raw) = match spec {
        DatasetSpec::Synthetic { classes, per_class_train, per_class_test, noise, corpus_seed, .. } => {
            let synth = SynthSpec {
                classes: *classes,
                per_class_train: *per_class_train,
                per_class_test: *per_class_test,
                noise: *noise,
            };
            data::generate_synthetic(synth, &mut Rng::new(*corpus_seed))?
        }
        DatasetSpec::Files { train, test, format, .. } => (
            data::load_dataset(train, *format)?,
            data::load_dataset(test, *format)?,
        ),
    };
    let (train_raw, short_classes) = match fewshot {
        Some(n) => {
            let outcome = data::fewshot_sample(&train_raw, n, &mut Rng::new(fewshot_seed));
            (outcome.dataset, outcome.short_classes)
        }
        None => (train_raw, Vec::new()),
    };
    let vocab = data::build_vocab(&train_raw, model.tokenizer);
    let train = encode(&train_raw, &vocab, model.max_len, &train_raw);
    let test = encode(&test_raw, &vocab, model.max_len, &train_raw);
    Ok(PreparedDataset { name: spec.display_name(), vocab, train, test, short_classes })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Everything one training run needs besides the data and the seed.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub mix: MixConfig,
    pub include_clean: bool,
}

impl TrainSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        TrainSettings {
            model: cfg.model.clone(),
            optimizer: cfg.optimizer.clone(),
            mix: cfg.mix.clone(),
            include_clean: cfg.include_clean,
        }
    }
}

/// One seeded run's outcome.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub accuracy: f64,
    pub epoch_losses: Vec<f64>,
    pub seconds: f64,
}

// Plain supervised gradient for one sample.
fn clean_sample_grads(
    data: &EncodedDataset,
    index: usize,
    params: &ModelParams,
    grads: &mut ModelParams,
) -> Result<f64, HarnessError> {
    let (prediction, trace, tail) =
        forward(&data.tokens[index], data.lengths[index], params)?;
    let target = data.one_hot(index);
    let loss = cross_entropy(&target, &prediction)?;
    grads.accumulate(&backward(&trace, &tail, &target, params)?);
    Ok(loss)
}

// Mixed gradient for one pair under the given plan configuration.
fn mixed_pair_grads(
    data: &EncodedDataset,
    pair: (usize, usize),
    mix: &MixConfig,
    params: &ModelParams,
    rng: &mut Rng,
    grads: &mut ModelParams,
) -> Result<f64, HarnessError> {
    let (i, j) = pair;
    let mut plan = draw_plan(mix, params.width(), data.max_len, (i, j), rng)?;
    let (h_i, trace_i) = forward_to(&data.tokens[i], data.lengths[i], plan.layer, params)?;
    let (h_j, trace_j) = forward_to(&data.tokens[j], data.lengths[j], plan.layer, params)?;
    let mixed = mix_hidden(&h_i, &h_j, &mut plan, mix)?;
    let (prediction, tail) = forward_from(&mixed, plan.layer, params)?;
    let target = mix_labels(&data.one_hot(i), &data.one_hot(j), &plan)?;
    let loss = cross_entropy(&target, &prediction)?;
    grads.accumulate(&backward_mixed(&trace_i, &trace_j, &plan, &tail, &target, params)?);
    Ok(loss)
}

// One gradient batch: the summed loss, the number of loss terms, and the
// accumulated (unscaled) gradients.
fn run_batch(
    data: &PreparedDataset,
    settings: &TrainSettings,
    batch: &[usize],
    params: &ModelParams,
    rng: &mut Rng,
) -> Result<(f64, usize, ModelParams), HarnessError> {
    let mut grads = params.zeros_like();
    let mut batch_loss = 0.0;
    let mut terms = 0usize;
    let augmenting = settings.mix.strategy != MixStrategy::None;
    if augmenting && batch.len() >= 2 {
        let partners = pair_partners(batch.len(), rng);
        for (slot, &i) in batch.iter().enumerate() {
            let j = batch[partners[slot]];
            batch_loss +=
                mixed_pair_grads(&data.train, (i, j), &settings.mix, params, rng, &mut grads)?;
            terms += 1;
        }
        if settings.include_clean {
            for &i in batch {
                batch_loss += clean_sample_grads(&data.train, i, params, &mut grads)?;
                terms += 1;
            }
        }
    } else {
        // Strategy `none`, or a trailing batch of one that cannot be paired.
        for &i in batch {
            batch_loss += clean_sample_grads(&data.train, i, params, &mut grads)?;
            terms += 1;
        }
    }
    Ok((batch_loss, terms, grads))
}

// NaN predictions surface as off-simplex errors from the loss; during
// training that means the parameters blew up.
fn is_divergence_signal(err: &HarnessError) -> bool {
    matches!(err, HarnessError::Model(ModelError::OffSimplex(_)))
}

fn run_training(
    data: &PreparedDataset,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>), HarnessError> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(HarnessError::Config("train and test splits must be non-empty".into()));
    }
    settings
        .mix
        .validate(settings.model.m)
        .map_err(|e| HarnessError::Config(format!("mix config: {e}")))?;
    let mut rng = Rng::new(seed);
    let mut params = init_params(
        data.vocab.size(),
        settings.model.d,
        settings.model.m,
        data.train.classes,
        settings.model.residual,
        &mut rng,
    );
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(settings.optimizer.epochs);
    for epoch in 0..settings.optimizer.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_terms = 0usize;
        for batch in order.chunks(settings.optimizer.batch_size) {
            let (batch_loss, terms, mut grads) =
                match run_batch(data, settings, batch, &params, &mut rng) {
                    Ok(step) => step,
                    Err(err) if is_divergence_signal(&err) => {
                        return Err(HarnessError::Diverged { epoch })
                    }
                    Err(err) => return Err(err),
                };
            if !batch_loss.is_finite() {
                return Err(HarnessError::Diverged { epoch });
            }
            grads.scale(1.0 / terms as f64);
            params.sgd_step(&grads, settings.optimizer.learning_rate);
            epoch_loss += batch_loss;
            epoch_terms += terms;
        }
        epoch_losses.push(epoch_loss / epoch_terms as f64);
    }
    Ok((params, epoch_losses))
}

/// Trains one model: per epoch the train set is shuffled and walked in
/// batches; an active strategy pairs every batch member with a distinct
/// partner, draws a fresh plan per pair, and trains only on the mixed
/// samples (plus the clean ones when `include_clean` is set). Strategy
/// `none` trains unpaired, as does a trailing batch of one. Inference never
/// mixes. A non-finite loss or a NaN prediction aborts the run as diverged.
pub fn train(
    data: &PreparedDataset,
    settings: &TrainSettings,
    seed: u64,
) -> Result<RunResult, HarnessError> {
    let started = Instant::now();
    let (params, epoch_losses) = run_training(data, settings, seed)?;
    let accuracy = evaluate(&params, &data.test)?;
    Ok(RunResult { seed, accuracy, epoch_losses, seconds: started.elapsed().as_secs_f64() })
}

/// Like [`train`], but also returns the final parameters (for checkpointing).
pub fn train_returning_params(
    data: &PreparedDataset,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(RunResult, ModelParams), HarnessError> {
    let started = Instant::now();
    let (params, epoch_losses) = run_training(data, settings, seed)?;
    let accuracy = evaluate(&params, &data.test)?;
    let result =
        RunResult { seed, accuracy, epoch_losses, seconds: started.elapsed().as_secs_f64() };
    Ok((result, params))
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (idx, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = idx;
        }
    }
    best
}

/// Test accuracy: fraction of samples whose predicted class (argmax, ties to
/// the lowest id) matches the label. No mixing is involved.
pub fn evaluate(params: &ModelParams, data: &EncodedDataset) -> Result<f64, HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::Config("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for idx in 0..data.len() {
        let (prediction, _, _) = forward(&data.tokens[idx], data.lengths[idx], params)?;
        if argmax_lowest(&prediction) == data.labels[idx] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

/// Accuracies (and failures) of the runs behind one report cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub accuracies: Vec<f64>,
    pub failures: Vec<(u64, String)>,
}

impl CellStats {
    pub fn runs(&self) -> usize {
        self.accuracies.len() + self.failures.len()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.accuracies.is_empty() {
            return None;
        }
        Some(self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64)
    }

    /// Population standard deviation over the successful runs; a single run
    /// reports zero spread.
    pub fn std(&self) -> Option<f64> {
        let mean = self.mean()?;
        let n = self.accuracies.len() as f64;
        Some((self.accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt())
    }
}

/// Variant × dataset accuracy table over a common seed list.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub variant_names: Vec<String>,
    pub dataset_names: Vec<String>,
    pub seeds: Vec<u64>,
    /// `cells[variant][dataset]`.
    pub cells: Vec<Vec<CellStats>>,
}

impl ComparisonReport {
    pub fn cell(&self, variant: &str, dataset: &str) -> Option<&CellStats> {
        let v = self.variant_names.iter().position(|n| n == variant)?;
        let d = self.dataset_names.iter().position(|n| n == dataset)?;
        Some(&self.cells[v][d])
    }
}

/// Runs every comparison row on every dataset for every seed. Diverged runs
/// are recorded in their cell (never retried, never dropped); any other
/// failure aborts the comparison.
pub fn compare(cfg: &ExperimentConfig) -> Result<ComparisonReport, HarnessError> {
    cfg.validate()?;
    let rows = cfg.comparison_rows();
    let prepared: Vec<PreparedDataset> = cfg
        .datasets
        .iter()
        .map(|spec| prepare_dataset(spec, cfg.fewshot, cfg.fewshot_seed, &cfg.model))
        .collect::<Result<_, _>>()?;
    let mut cells = Vec::with_capacity(rows.len());
    for (_, mix) in &rows {
        let mut row_cells = Vec::with_capacity(prepared.len());
        for dataset in &prepared {
            let settings = TrainSettings {
                model: cfg.model.clone(),
                optimizer: cfg.optimizer.clone(),
                mix: mix.clone(),
                include_clean: cfg.include_clean,
            };
            let mut stats = CellStats { accuracies: Vec::new(), failures: Vec::new() };
            for &seed in &cfg.seeds {
                match train(dataset, &settings, seed) {
                    Ok(result) => stats.accuracies.push(result.accuracy),
                    Err(err @ HarnessError::Diverged { .. }) => {
                        stats.failures.push((seed, err.to_string()));
                    }
                    Err(other) => return Err(other),
                }
            }
            row_cells.push(stats);
        }
        cells.push(row_cells);
    }
    Ok(ComparisonReport {
        variant_names: rows.into_iter().map(|(name, _)| name).collect(),
        dataset_names: prepared.iter().map(|p| p.name.clone()).collect(),
        seeds: cfg.seeds.clone(),
        cells,
    })
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

fn cell_text(stats: &CellStats) -> String {
    match (stats.mean(), stats.std()) {
        (Some(mean), Some(std)) => {
            let mut text = format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0);
            if !stats.failures.is_empty() {
                text.push_str(&format!(" [{} failed]", stats.failures.len()));
            }
            text
        }
        _ => "failed".to_string(),
    }
}

/// Markdown pipe table, accuracies as `mean ± std` percentages with two
/// decimals.
pub fn render_markdown(report: &ComparisonReport) -> String {
    let mut out = String::from("| Models |");
    for name in &report.dataset_names {
        out.push_str(&format!(" {name} |"));
    }
    out.push('\n');
    out.push_str("| --- |");
    for _ in &report.dataset_names {
        out.push_str(" --- |");
    }
    out.push('\n');
    for (variant, row) in report.variant_names.iter().zip(&report.cells) {
        out.push_str(&format!("| {variant} |"));
        for stats in row {
            out.push_str(&format!(" {} |", cell_text(stats)));
        }
        out.push('\n');
    }
    out
}

/// Long-format csv: one row per (variant, dataset) cell with the percentage
/// mean/std at two decimals and the run counts.
pub fn render_csv(report: &ComparisonReport) -> String {
    let mut out = String::from("variant,dataset,mean_pct,std_pct,runs_ok,runs_failed\n");
    for (variant, row) in report.variant_names.iter().zip(&report.cells) {
        for (dataset, stats) in report.dataset_names.iter().zip(row) {
            let (mean, std) = match (stats.mean(), stats.std()) {
                (Some(m), Some(s)) => (format!("{:.2}", m * 100.0), format!("{:.2}", s * 100.0)),
                _ => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                variant,
                dataset,
                mean,
                std,
                stats.accuracies.len(),
                stats.failures.len()
            ));
        }
    }
    out
}

/// Writes the report; the format follows the extension (`.md`/`.markdown`
/// or `.csv`).
pub fn write_report(report: &ComparisonReport, path: &Path) -> Result<(), HarnessError> {
    if report.variant_names.is_empty() || report.dataset_names.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let rendered = match path.extension().and_then(|e| e.to_str()) {
        Some("md") | Some("markdown") => render_markdown(report),
        Some("csv") => render_csv(report),
        _ => return Err(HarnessError::UnknownReportFormat(path.display().to_string())),
    };
    std::fs::write(path, rendered)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Outcome of the finite-difference sweep for one strategy.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub strategy: MixStrategy,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_relative_error <= self.tolerance)
    }
}

/// Checks the analytic gradients of every strategy against central finite
/// differences on a pinned tiny model (V=20, d=8, m=3, C=4, I=6). Masks and
/// coefficients are frozen before differentiation, matching their
/// stop-gradient treatment in the backward pass. Tolerance: max relative
/// error 1e-4.
pub fn grad_check(eps: f64) -> Result<GradCheckReport, HarnessError> {
    const VOCAB: usize = 20;
    const WIDTH: usize = 8;
    const DEPTH: usize = 3;
    const CLASSES: usize = 4;
    const ROWS: usize = 6;
    let tolerance = 1e-4;
    let mut entries = Vec::new();
    for strategy in MixStrategy::ALL {
        let mut worst: f64 = 0.0;
        for (case, &residual) in [false, true].iter().enumerate() {
            let mut rng = Rng::new(0xC0FFEE + case as u64);
            let mut params = init_params(VOCAB, WIDTH, DEPTH, CLASSES, residual, &mut rng);
            // A zero head would zero every gradient below it; give the check
            // a live head.
            for idx in 0..params.param_count() {
                let v = params.param(idx) + 0.3 * (rng.next_f64() - 0.5);
                params.set_param(idx, v);
            }
            let len_i = 2 + rng.below(ROWS - 1);
            let len_j = 2 + rng.below(ROWS - 1);
            let token = |rng: &mut Rng| 2 + rng.below(VOCAB - 2);
            let tok_i: Vec<usize> =
                (0..ROWS).map(|r| if r < len_i { token(&mut rng) } else { 0 }).collect();
            let tok_j: Vec<usize> =
                (0..ROWS).map(|r| if r < len_j { token(&mut rng) } else { 0 }).collect();
            let layer = rng.below(DEPTH + 1);
            let lambda = 0.25 + 0.5 * rng.next_f64();
            let p = augment::swap_count(lambda, WIDTH);
            let q = augment::pool_count(p, 2.0, WIDTH);
            let mut target = vec![0.0; CLASSES];
            target[rng.below(CLASSES)] = 0.6;
            target[0] += 0.4;

            let mix = MixConfig {
                strategy,
                layer_set: vec![layer],
                ..MixConfig::default()
            };
            let mut plan = draw_plan(&mix, WIDTH, ROWS, (0, 1), &mut rng)?;
            plan.layer = layer;
            plan.lambda = lambda;
            plan.swap_count = p;
            plan.pool_count = q;
            let (h_i, trace_i) = forward_to(&tok_i, len_i, layer, &params)?;
            let (h_j, trace_j) = forward_to(&tok_j, len_j, layer, &params)?;
            if strategy == MixStrategy::Base {
                plan.mask = Some(augment::random_mask(ROWS, WIDTH, p, &mut rng)?);
            }
            let mixed = mix_hidden(&h_i, &h_j, &mut plan, &mix)?;
            let (_, tail) = forward_from(&mixed, layer, &params)?;
            let analytic = backward_mixed(&trace_i, &trace_j, &plan, &tail, &target, &params)?;

            // Forward-only loss with the plan (mask, lambda, layer) frozen.
            let frozen = plan.clone();
            let loss = |p: &ModelParams| -> Result<f64, HarnessError> {
                let (hi, _) = forward_to(&tok_i, len_i, layer, p)?;
                let (hj, _) = forward_to(&tok_j, len_j, layer, p)?;
                let mixed = match strategy {
                    MixStrategy::None => hi,
                    MixStrategy::Linear => augment::linear_mix(&hi, &hj, frozen.lambda)?,
                    _ => augment::apply_mask(&hi, &hj, frozen.mask.as_ref().expect("mask"))?,
                };
                let (prediction, _) = forward_from(&mixed, layer, p)?;
                Ok(cross_entropy(&target, &prediction)?)
            };

            let mut work = params.clone();
            let mut analytic_reader = analytic.clone();
            for idx in 0..params.param_count() {
                let origin = work.param(idx);
                work.set_param(idx, origin + eps);
                let plus = loss(&work)?;
                work.set_param(idx, origin - eps);
                let minus = loss(&work)?;
                work.set_param(idx, origin);
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic_reader.param(idx);
                let denom = a.abs().max(numeric.abs());
                if denom >= 1e-7 {
                    worst = worst.max((a - numeric).abs() / denom);
                }
            }
        }
        entries.push(GradCheckEntry { strategy, max_relative_error: worst });
    }
    Ok(GradCheckReport { eps, tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_config(strategy: MixStrategy) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            model: ModelConfig { d: 16, m: 2, max_len: 16, residual: true, tokenizer: TokenMode::Char },
            optimizer: OptimizerConfig { learning_rate: 0.1, epochs: 2, batch_size: 8 },
            mix: MixConfig { strategy, ..MixConfig::default() },
            seeds: vec![1],
            fewshot: None,
            fewshot_seed: default_fewshot_seed(),
            include_clean: false,
            datasets: vec![DatasetSpec::Synthetic {
                name: Some("tiny".into()),
                classes: 3,
                per_class_train: 8,
                per_class_test: 6,
                noise: 0.1,
                corpus_seed: 7,
            }],
            variants: Vec::new(),
            layer_policy: false,
        };
        cfg.normalize();
        cfg
    }

    fn prepared(cfg: &ExperimentConfig) -> PreparedDataset {
        prepare_dataset(&cfg.datasets[0], cfg.fewshot, cfg.fewshot_seed, &cfg.model).unwrap()
    }

    #[test]
    fn toml_roundtrip_with_defaults() {
        let raw = r#"
            seeds = [1, 2]

            [mix]
            strategy = "base"
            alpha = 0.4

            [[datasets]]
            kind = "synthetic"
            classes = 4
            per_class_train = 5
            per_class_test = 5
            noise = 0.1
        "#;
        let cfg = ExperimentConfig::from_toml_str(raw).unwrap();
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.optimizer.batch_size, 16);
        assert_eq!(cfg.mix.strategy, MixStrategy::Base);
        assert_eq!(cfg.mix.alpha, 0.4);
        // layer_set filled with the middle layers of the default 4-block model
        assert_eq!(cfg.mix.layer_set, vec![1, 2, 3]);
        assert_eq!(cfg.datasets[0].display_name(), "synthetic-4x5");
    }

    #[test]
    fn config_validation_errors() {
        let mut cfg = synth_config(MixStrategy::None);
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        let mut cfg = synth_config(MixStrategy::None);
        cfg.optimizer.batch_size = 1;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        let mut cfg = synth_config(MixStrategy::Base);
        cfg.mix.layer_set = vec![99];
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        // `paper` label-mode alias parses
        let raw = r#"
            seeds = [1]
            [mix]
            label_mode = "paper"
            [[datasets]]
            kind = "synthetic"
            classes = 2
            per_class_train = 3
            per_class_test = 3
        "#;
        let cfg = ExperimentConfig::from_toml_str(raw).unwrap();
        assert_eq!(cfg.mix.label_mode, LabelMode::Lambda);
    }

    #[test]
    fn lr_zero_predicts_class_zero() {
        let mut cfg = synth_config(MixStrategy::None);
        cfg.optimizer.learning_rate = 0.0;
        cfg.optimizer.epochs = 3;
        let data = prepared(&cfg);
        let result = train(&data, &TrainSettings::from_config(&cfg), 11).unwrap();
        let class_zero_share = data.test.labels.iter().filter(|&&l| l == 0).count() as f64
            / data.test.len() as f64;
        assert_eq!(result.accuracy, class_zero_share);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        for strategy in [MixStrategy::None, MixStrategy::Base, MixStrategy::A] {
            let cfg = synth_config(strategy);
            let data = prepared(&cfg);
            let settings = TrainSettings::from_config(&cfg);
            let a = train(&data, &settings, 33).unwrap();
            let b = train(&data, &settings, 33).unwrap();
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
            assert_eq!(a.epoch_losses.len(), b.epoch_losses.len());
            for (x, y) in a.epoch_losses.iter().zip(&b.epoch_losses) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn loss_decreases_on_reference_run() {
        // Seeded reference: 8 classes × 20 few-shot style corpus, plain
        // training; the first three epochs descend strictly.
        let mut cfg = synth_config(MixStrategy::None);
        cfg.datasets = vec![DatasetSpec::Synthetic {
            name: None,
            classes: 8,
            per_class_train: 20,
            per_class_test: 10,
            noise: 0.15,
            corpus_seed: 7,
        }];
        cfg.model = ModelConfig::default();
        cfg.optimizer = OptimizerConfig { learning_rate: 0.1, epochs: 3, batch_size: 16 };
        cfg.normalize();
        let data = prepared(&cfg);
        let result = train(&data, &TrainSettings::from_config(&cfg), 1).unwrap();
        assert!(
            result.epoch_losses[0] > result.epoch_losses[1]
                && result.epoch_losses[1] > result.epoch_losses[2],
            "losses {:?}",
            result.epoch_losses
        );
    }

    #[test]
    fn divergence_is_reported_not_swallowed() {
        let mut cfg = synth_config(MixStrategy::None);
        cfg.optimizer.learning_rate = 1e200;
        cfg.optimizer.epochs = 10;
        let data = prepared(&cfg);
        match train(&data, &TrainSettings::from_config(&cfg), 5) {
            Err(HarnessError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn all_strategies_complete_a_short_run() {
        for strategy in MixStrategy::ALL {
            let cfg = synth_config(strategy);
            let data = prepared(&cfg);
            let result = train(&data, &TrainSettings::from_config(&cfg), 3).unwrap();
            assert!(result.accuracy >= 0.0 && result.accuracy <= 1.0);
            assert!(result.epoch_losses.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn include_clean_changes_the_run() {
        let mut cfg = synth_config(MixStrategy::Base);
        let data = prepared(&cfg);
        let plain = train(&data, &TrainSettings::from_config(&cfg), 9).unwrap();
        cfg.include_clean = true;
        let with_clean = train(&data, &TrainSettings::from_config(&cfg), 9).unwrap();
        assert_ne!(plain.epoch_losses, with_clean.epoch_losses);
    }

    #[test]
    fn evaluate_is_pure_and_mix_free() {
        let cfg = synth_config(MixStrategy::Base);
        let data = prepared(&cfg);
        let (_, params) =
            train_returning_params(&data, &TrainSettings::from_config(&cfg), 21).unwrap();
        let a = evaluate(&params, &data.test).unwrap();
        let b = evaluate(&params, &data.test).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn train_returning_params_matches_train() {
        let cfg = synth_config(MixStrategy::B);
        let data = prepared(&cfg);
        let settings = TrainSettings::from_config(&cfg);
        let plain = train(&data, &settings, 17).unwrap();
        let (result, params) = train_returning_params(&data, &settings, 17).unwrap();
        assert_eq!(plain.accuracy.to_bits(), result.accuracy.to_bits());
        let eval = evaluate(&params, &data.test).unwrap();
        assert_eq!(eval.to_bits(), result.accuracy.to_bits());
    }

    #[test]
    fn comparison_counts_and_order() {
        let mut cfg = synth_config(MixStrategy::None);
        cfg.seeds = vec![1, 2];
        cfg.variants = vec![
            VariantSpec { strategy: Some(MixStrategy::None), ..VariantSpec::default() },
            VariantSpec { strategy: Some(MixStrategy::Base), ..VariantSpec::default() },
            VariantSpec {
                name: Some("custom".into()),
                strategy: Some(MixStrategy::Linear),
                ..VariantSpec::default()
            },
        ];
        let report = compare(&cfg).unwrap();
        assert_eq!(report.variant_names, vec!["None", "MSMix-base", "custom"]);
        assert_eq!(report.dataset_names, vec!["tiny"]);
        for row in &report.cells {
            for cell in row {
                assert_eq!(cell.runs(), 2);
                let mean = cell.mean().unwrap();
                let lo = cell.accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = cell.accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(mean >= lo && mean <= hi);
            }
        }
    }

    #[test]
    fn single_seed_cell_has_zero_std() {
        let cfg = synth_config(MixStrategy::None);
        let report = compare(&cfg).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert_eq!(report.cells[0][0].std(), Some(0.0));
    }

    #[test]
    fn layer_policy_rows_shape() {
        let rows = layer_policy_rows(&MixConfig { layer_set: vec![1], ..MixConfig::default() }, 4);
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "MSMix-base(k=4)",
                "MSMix-base(random k)",
                "MSMix-A(k=4)",
                "MSMix-A(random k)",
                "MSMix-B(k=4)",
                "MSMix-B(random k)",
            ]
        );
        assert_eq!(rows[0].1.layer_set, vec![4]);
        assert_eq!(rows[1].1.layer_set, vec![1, 2, 3]);
    }

    #[test]
    fn markdown_is_a_valid_pipe_table() {
        let mut cfg = synth_config(MixStrategy::None);
        cfg.variants = vec![
            VariantSpec { strategy: Some(MixStrategy::None), ..VariantSpec::default() },
            VariantSpec { strategy: Some(MixStrategy::Base), ..VariantSpec::default() },
        ];
        let report = compare(&cfg).unwrap();
        let markdown = render_markdown(&report);
        let columns: Vec<usize> =
            markdown.lines().map(|l| l.matches('|').count()).collect();
        assert!(columns.windows(2).all(|w| w[0] == w[1]), "{markdown}");
        assert!(markdown.starts_with("| Models |"));
    }

    #[test]
    fn percentages_render_with_two_decimals() {
        let report = ComparisonReport {
            variant_names: vec!["MSMix-base".into()],
            dataset_names: vec!["ds".into()],
            seeds: vec![1],
            cells: vec![vec![CellStats { accuracies: vec![0.9409], failures: vec![] }]],
        };
        assert!(render_markdown(&report).contains("94.09 ± 0.00"));
        assert!(render_csv(&report).contains("MSMix-base,ds,94.09,0.00,1,0"));
    }

    #[test]
    fn csv_parses_back_at_two_decimals() {
        let mut cfg = synth_config(MixStrategy::None);
        cfg.seeds = vec![1, 2];
        cfg.variants = vec![
            VariantSpec { strategy: Some(MixStrategy::None), ..VariantSpec::default() },
            VariantSpec { strategy: Some(MixStrategy::Base), ..VariantSpec::default() },
        ];
        let report = compare(&cfg).unwrap();
        let rendered = render_csv(&report);
        let mut reader = csv::Reader::from_reader(rendered.as_bytes());
        let mut rows = 0;
        for record in reader.records() {
            let record = record.unwrap();
            let variant = record.get(0).unwrap();
            let dataset = record.get(1).unwrap();
            let mean: f64 = record.get(2).unwrap().parse().unwrap();
            let cell = report.cell(variant, dataset).unwrap();
            let expected = (cell.mean().unwrap() * 100.0 * 100.0).round() / 100.0;
            assert!((mean - expected).abs() < 1e-9);
            rows += 1;
        }
        assert_eq!(rows, 2);
    }

    #[test]
    fn failed_runs_mark_cells() {
        let mut cfg = synth_config(MixStrategy::None);
        cfg.optimizer.learning_rate = 1e200;
        cfg.optimizer.epochs = 5;
        cfg.seeds = vec![1, 2];
        let report = compare(&cfg).unwrap();
        let cell = &report.cells[0][0];
        assert_eq!(cell.failures.len(), 2);
        assert_eq!(cell.mean(), None);
        assert!(render_markdown(&report).contains("failed"));
        assert!(render_csv(&report).contains(",,,0,2"));
    }

    #[test]
    fn write_report_dispatches_on_extension() {
        let cfg = synth_config(MixStrategy::None);
        let report = compare(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let md = dir.path().join("out.md");
        let csv_path = dir.path().join("out.csv");
        write_report(&report, &md).unwrap();
        write_report(&report, &csv_path).unwrap();
        assert!(std::fs::read_to_string(&md).unwrap().starts_with("| Models |"));
        assert!(std::fs::read_to_string(&csv_path).unwrap().starts_with("variant,"));
        assert!(matches!(
            write_report(&report, &dir.path().join("out.txt")),
            Err(HarnessError::UnknownReportFormat(_))
        ));
    }

    #[test]
    fn grad_check_passes_at_default_eps() {
        let report = grad_check(1e-4).unwrap();
        assert_eq!(report.entries.len(), 5);
        for entry in &report.entries {
            assert!(
                entry.max_relative_error <= report.tolerance,
                "{:?}: {}",
                entry.strategy,
                entry.max_relative_error
            );
        }
        assert!(report.passed());
    }

    #[test]
    fn fewshot_flows_through_preparation() {
        let mut cfg = synth_config(MixStrategy::None);
        cfg.datasets = vec![DatasetSpec::Synthetic {
            name: None,
            classes: 4,
            per_class_train: 12,
            per_class_test: 4,
            noise: 0.0,
            corpus_seed: 3,
        }];
        cfg.fewshot = Some(5);
        let data = prepared(&cfg);
        assert_eq!(data.train.len(), 20);
        assert_eq!(data.test.len(), 16);
        assert!(data.short_classes.is_empty());
    }
}
