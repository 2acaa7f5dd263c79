//! The two-stage pipeline: diffusion pretraining, parameter transfer and
//! supervised fine-tuning, plus experiment suites over seeds.

mod sampler;
mod suite;

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::corruption::{CorruptionOptions, LabelMode};
use crate::data::{batch_iter, Dataset, DatasetSchema, Split};
use crate::error::{Error, NumericError};
use crate::evaluation::{evaluate, scored_examples, MetricReport};
use crate::model::{save_checkpoint, target_table, Checkpoint, LoadMode, Model, ModelConfig};
use crate::numeric::rng::hash3;
use crate::numeric::{AdamConfig, Graph, StreamRng};
use crate::objectives::{pretrain_loss, sft_loss, Negatives, NoiseSource, PretrainLossConfig};
use crate::schedule::{LambdaRange, NoiseSchedule, ScheduleKind, LAMBDA_CAP};

pub use sampler::{sample_reverse, sample_reverse_batch};
pub use suite::{
    run_experiment_suite, suite_configs, ExperimentCache, RunFailure, Significance, Suite, SuiteReport,
    SWEEP_EPOCHS, SWEEP_HORIZONS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stage {
    Pretrain,
    Finetune,
    #[default]
    Both,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(Stage::Pretrain),
            "finetune" => Some(Stage::Finetune),
            "both" => Some(Stage::Both),
            _ => None,
        }
    }
}

/// Which pretrained parameters seed fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransferMode {
    /// Fine-tune from a fresh initialization.
    None,
    #[default]
    Full,
    EmbeddingsOnly,
    ScoringNetworkOnly,
}

impl TransferMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransferMode::None => "none",
            TransferMode::Full => "full",
            TransferMode::EmbeddingsOnly => "embeddings-only",
            TransferMode::ScoringNetworkOnly => "scoring-network-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(TransferMode::None),
            other => LoadMode::parse(other).map(|m| match m {
                LoadMode::Full => TransferMode::Full,
                LoadMode::EmbeddingsOnly => TransferMode::EmbeddingsOnly,
                LoadMode::ScoringNetworkOnly => TransferMode::ScoringNetworkOnly,
            }),
        }
    }

    pub fn load_mode(&self) -> Option<LoadMode> {
        match self {
            TransferMode::None => None,
            TransferMode::Full => Some(LoadMode::Full),
            TransferMode::EmbeddingsOnly => Some(LoadMode::EmbeddingsOnly),
            TransferMode::ScoringNetworkOnly => Some(LoadMode::ScoringNetworkOnly),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub stage: Stage,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub pretrain_batch: usize,
    pub finetune_batch: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub transfer: TransferMode,
    /// Early-stopping patience in epochs without validation AUC gain.
    pub patience: usize,
    /// Pretrain without the label field.
    pub no_label: bool,
    /// Pretrain with fixed-rate random masking instead of diffusion noise.
    pub no_diff: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            stage: Stage::Both,
            seed: 1,
            pretrain_epochs: 3,
            finetune_epochs: 12,
            pretrain_batch: 128,
            finetune_batch: 256,
            pretrain_lr: 5e-3,
            finetune_lr: 7e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            transfer: TransferMode::Full,
            patience: 2,
            no_label: false,
            no_diff: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub temperature: f64,
    pub tied_embeddings: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            dim: 16,
            blocks: 1,
            heads: 2,
            ff_width: 32,
            temperature: 0.1,
            tied_embeddings: false,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, schema: &DatasetSchema, seed: u64) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            blocks: self.blocks,
            heads: self.heads,
            ff_width: self.ff_width,
            temperature: self.temperature,
            tied_embeddings: self.tied_embeddings,
            seed,
            ..ModelConfig::for_schema(schema)
        }
    }
}

/// Noise-schedule settings. By default feature fields and the label follow
/// different `λ` ranges; `shared` puts every field on `[lambda_min, lambda_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSettings {
    pub kind: ScheduleKind,
    pub horizon: u32,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub feature_lambda_max: f64,
    pub label_lambda_min: f64,
    pub shared: bool,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearLambda,
            horizon: 500,
            lambda_min: 0.0,
            lambda_max: LAMBDA_CAP,
            feature_lambda_max: 0.6,
            label_lambda_min: 0.5,
            shared: false,
        }
    }
}

impl ScheduleSettings {
    pub fn build(&self, num_fields: usize) -> Result<NoiseSchedule, Error> {
        let full = LambdaRange::new(self.lambda_min, self.lambda_max)?;
        if self.shared {
            return Ok(NoiseSchedule::uniform(self.kind, self.horizon, num_fields, full)?);
        }
        let features = LambdaRange::new(self.lambda_min, self.feature_lambda_max)?;
        let label = LambdaRange::new(self.label_lambda_min, self.lambda_max)?;
        let mut ranges = vec![features; num_fields - 1];
        ranges.push(label);
        Ok(NoiseSchedule::per_field(self.kind, self.horizon, ranges)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub lambda_weight: bool,
    pub lambda_clip: f64,
    pub max_negatives: usize,
    pub negatives: Negatives,
    /// Mask rate of the fixed-rate masking used when `no_diff` is set.
    pub bert_mask_rate: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda_weight: true,
            lambda_clip: 0.01,
            max_negatives: 1023,
            negatives: Negatives::InBatch,
            bert_mask_rate: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub run: RunSettings,
    pub model: ModelSettings,
    pub schedule: ScheduleSettings,
    pub loss: LossSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let r = &self.run;
        if r.pretrain_batch == 0 || r.finetune_batch == 0 {
            return Err(Error::Usage("batch sizes must be positive".into()));
        }
        for (name, lr) in [("pretrain_lr", r.pretrain_lr), ("finetune_lr", r.finetune_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Usage(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&r.beta1) || !(0.0..1.0).contains(&r.beta2) || !(r.eps > 0.0) {
            return Err(Error::Usage("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.loss.bert_mask_rate) {
            return Err(Error::Usage("bert_mask_rate must lie in [0, 1)".into()));
        }
        self.schedule.build(2)?;
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.run.beta1,
            beta2: self.run.beta2,
            eps: self.run.eps,
        }
    }

    /// Pretraining loss configuration implied by the run and ablation flags.
    pub fn pretrain_loss_config(&self, schema: &DatasetSchema) -> Result<PretrainLossConfig, Error> {
        let schedule = self.schedule.build(schema.num_fields())?;
        let (noise, lambda_weight) = if self.run.no_diff {
            (NoiseSource::Constant(self.loss.bert_mask_rate), false)
        } else {
            (NoiseSource::Schedule(schedule), self.loss.lambda_weight)
        };
        let cfg = PretrainLossConfig {
            noise,
            negatives: self.loss.negatives,
            max_negatives: self.loss.max_negatives,
            lambda_weight,
            lambda_clip: self.loss.lambda_clip,
            corruption: CorruptionOptions {
                label_mode: if self.run.no_label {
                    LabelMode::Drop
                } else {
                    LabelMode::Diffuse
                },
                frozen: Vec::new(),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean per-field loss of each epoch.
    pub epoch_field_losses: Vec<Vec<f64>>,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// `None` for the evaluation of the initial parameters.
    pub train_loss: Option<f64>,
    pub validation: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub epochs: Vec<EpochLog>,
    /// Index into `epochs` of the returned parameters.
    pub best: usize,
}

impl FinetuneReport {
    pub fn best_validation(&self) -> &MetricReport {
        &self.epochs[self.best].validation
    }
}

fn step_rng(seed: u64, epoch: usize, step: usize) -> StreamRng {
    StreamRng::new(seed, hash3(0x9E7A_17, epoch as u64, step as u64))
}

fn diverged(e: Error, epoch: usize, step: usize, last_good: Option<PathBuf>) -> Error {
    match e {
        Error::Numeric(NumericError::NonFinite { op }) => Error::Diverged {
            epoch,
            step,
            reason: format!("non-finite value in `{op}`"),
            last_good,
        },
        other => other,
    }
}

/// Callback for per-epoch progress lines.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

/// Diffusion pretraining on the train split. Checkpoints are written after
/// every epoch when `checkpoint_dir` is given. `on_epoch` receives the
/// epoch number, the steps taken so far and the model after each epoch.
pub fn pretrain_with(
    cfg: &RunConfig,
    train: &Dataset,
    checkpoint_dir: Option<&Path>,
    progress: Progress<'_>,
    on_epoch: &mut dyn FnMut(usize, usize, &Model),
) -> Result<(Model, PretrainReport), Error> {
    cfg.validate()?;
    let schema = train.schema();
    let mut model = Model::new(cfg.model.model_config(schema, cfg.run.seed))?;
    let loss_cfg = cfg.pretrain_loss_config(schema)?;
    let adam = cfg.adam(cfg.run.pretrain_lr);
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        epoch_field_losses: Vec::new(),
        steps: 0,
        checkpoints: Vec::new(),
    };
    let data_seed = hash3(cfg.run.seed, 0xDA7A, 0);
    let noise_seed = hash3(cfg.run.seed, 0x0015E, 0);
    for epoch in 0..cfg.run.pretrain_epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        let mut fields = vec![0.0; schema.num_fields()];
        for (step, batch) in batch_iter(train, cfg.run.pretrain_batch, data_seed, epoch).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let last_good = report.checkpoints.last().cloned();
            let rng = step_rng(noise_seed, epoch, step);
            let (value, grads, per_field) = {
                let mut g = Graph::new(&model.params);
                let l = pretrain_loss(&mut g, &model.config, schema, &loss_cfg, &batch, &rng)
                    .map_err(|e| diverged(e, epoch, step, last_good.clone()))?;
                let grads = g
                    .backward(l.loss)
                    .map_err(|e| diverged(e.into(), epoch, step, last_good.clone()))?;
                (g.value(l.loss).item(), grads, l.per_field)
            };
            model.params.adam_step(&grads, &adam)?;
            sum += value;
            count += 1;
            for (f, v) in fields.iter_mut().zip(per_field) {
                *f += v;
            }
            report.steps += 1;
        }
        let mean = sum / count.max(1) as f64;
        report.epoch_losses.push(mean);
        report
            .epoch_field_losses
            .push(fields.iter().map(|f| f / count.max(1) as f64).collect());
        progress(&format!("pretrain epoch {} loss {mean:.6}", epoch + 1));
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("pretrain-epoch{}.ckpt", epoch + 1));
            save_checkpoint(&model, report.steps as u64, &path)?;
            report.checkpoints.push(path);
        }
        on_epoch(epoch + 1, report.steps, &model);
    }
    Ok((model, report))
}

pub fn pretrain(
    cfg: &RunConfig,
    train: &Dataset,
    checkpoint_dir: Option<&Path>,
    progress: Progress<'_>,
) -> Result<(Model, PretrainReport), Error> {
    pretrain_with(cfg, train, checkpoint_dir, progress, &mut |_, _, _| {})
}

/// CTR scores of every record, in order.
pub fn predict(model: &Model, dataset: &Dataset) -> Result<Vec<f64>, Error> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples().chunks(1024) {
        let recs: Vec<&[usize]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        out.extend(model.ctr_scores(&recs)?);
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model, dataset: &Dataset) -> Result<MetricReport, Error> {
    let scores = predict(model, dataset)?;
    evaluate(&scored_examples(&scores, dataset))
}

/// Model that fine-tuning starts from: a fresh one, or the checkpoint
/// restored under the run's transfer mode.
pub fn finetune_init(cfg: &RunConfig, schema: &DatasetSchema, init: Option<&Checkpoint>) -> Result<Model, Error> {
    // partial modes fill the unloaded part from a stream distinct from pretraining's
    let fresh_seed = hash3(cfg.run.seed, 0xF1E7, 0);
    let model_cfg = cfg.model.model_config(schema, cfg.run.seed);
    let mut model = match (cfg.run.transfer.load_mode(), init) {
        (None, _) => Model::new(model_cfg)?,
        (Some(mode), Some(ck)) => {
            let mut partial = ck.restore(&ModelConfig { seed: fresh_seed, ..model_cfg.clone() }, mode)?;
            partial.config.seed = model_cfg.seed;
            partial
        }
        (Some(_), None) => {
            return Err(Error::Usage(format!(
                "transfer mode `{}` needs a pretrained checkpoint",
                cfg.run.transfer.as_str()
            )))
        }
    };
    if cfg.run.no_label && cfg.run.transfer != TransferMode::None {
        // the label head was never trained; start it fresh
        let name = target_table(schema.label_index());
        if model.params.contains(&name) {
            crate::model::reinit_param(&mut model.params, &name, fresh_seed)?;
        }
    }
    Ok(model)
}

/// Supervised fine-tuning with early stopping on validation AUC. Returns
/// the parameters of the best validation epoch.
pub fn finetune(
    cfg: &RunConfig,
    train: &Dataset,
    validation: &Dataset,
    init: Option<&Checkpoint>,
    progress: Progress<'_>,
) -> Result<(Model, FinetuneReport), Error> {
    cfg.validate()?;
    let mut model = finetune_init(cfg, train.schema(), init)?;
    let adam = cfg.adam(cfg.run.finetune_lr);
    let data_seed = hash3(cfg.run.seed, 0x5F7, 0);
    let mut epochs = Vec::new();
    if cfg.run.finetune_epochs == 0 {
        let validation = evaluate_model(&model, validation)?;
        epochs.push(EpochLog {
            epoch: 0,
            train_loss: None,
            validation,
        });
        return Ok((model, FinetuneReport { epochs, best: 0 }));
    }
    let mut best: Option<(usize, Model)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.run.finetune_epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for (step, batch) in batch_iter(train, cfg.run.finetune_batch, data_seed, epoch).enumerate() {
            let (value, grads) = {
                let mut g = Graph::new(&model.params);
                let l = sft_loss(&mut g, &model.config, &batch)
                    .map_err(|e| diverged(e.into(), epoch, step, None))?;
                let grads = g.backward(l).map_err(|e| diverged(e.into(), epoch, step, None))?;
                (g.value(l).item(), grads)
            };
            model.params.adam_step(&grads, &adam)?;
            sum += value;
            count += 1;
        }
        let train_loss = sum / count.max(1) as f64;
        let val = evaluate_model(&model, validation)?;
        progress(&format!(
            "finetune epoch {} loss {train_loss:.6} val auc {:.6} logloss {:.6}",
            epoch + 1,
            val.auc,
            val.logloss
        ));
        let improved = best
            .as_ref()
            .is_none_or(|(b, _)| val.auc > epochs.get(*b).map_or(f64::NEG_INFINITY, |e: &EpochLog| e.validation.auc));
        epochs.push(EpochLog {
            epoch: epoch + 1,
            train_loss: Some(train_loss),
            validation: val,
        });
        if improved {
            best = Some((epochs.len() - 1, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.run.patience {
                break;
            }
        }
    }
    let (best_idx, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, FinetuneReport { epochs, best: best_idx }))
}

/// Everything one run logs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config_id: String,
    pub seed: u64,
    pub pretrain: Option<PretrainReport>,
    pub finetune: Option<FinetuneReport>,
    /// Metrics of the returned model per split.
    pub metrics: Vec<(Split, MetricReport)>,
    pub wall_clock_secs: f64,
    pub config_echo: String,
    pub build: String,
}

impl RunReport {
    pub fn metric(&self, split: Split) -> Option<&MetricReport> {
        self.metrics.iter().find(|(s, _)| *s == split).map(|(_, m)| m)
    }

    /// Every logged loss and metric in a fixed order, for exact comparison.
    pub fn logged_values(&self) -> Vec<f64> {
        let mut v = Vec::new();
        if let Some(p) = &self.pretrain {
            v.extend(&p.epoch_losses);
            p.epoch_field_losses.iter().for_each(|f| v.extend(f));
        }
        if let Some(f) = &self.finetune {
            for e in &f.epochs {
                v.extend(e.train_loss);
                v.extend([e.validation.auc, e.validation.logloss]);
                v.extend(e.validation.gauc_pv);
            }
        }
        for (_, m) in &self.metrics {
            v.extend([m.auc, m.logloss]);
            v.extend(m.gauc_pv);
        }
        v
    }
}

pub fn build_fingerprint() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Train/validation/test splits of one dataset.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub test: &'a Dataset,
}

/// Runs the configured stages and evaluates the final model on every split.
/// A supplied checkpoint replaces the pretraining stage.
pub fn run_pipeline(
    config_id: &str,
    cfg: &RunConfig,
    data: Splits<'_>,
    pretrained: Option<&Checkpoint>,
    progress: Progress<'_>,
) -> Result<(Model, RunReport), Error> {
    let start = Instant::now();
    let mut pre_report = None;
    let mut own_ck = None;
    let needs_pretrain = cfg.run.stage != Stage::Finetune && cfg.run.transfer != TransferMode::None;
    if needs_pretrain && pretrained.is_none() || cfg.run.stage == Stage::Pretrain {
        let (m, r) = pretrain(cfg, data.train, None, progress)?;
        own_ck = Some(Checkpoint::from_model(&m, r.steps as u64));
        pre_report = Some(r);
    }
    let ck = pretrained.or(own_ck.as_ref());
    let (model, ft_report) = if cfg.run.stage == Stage::Pretrain {
        let ck = ck.expect("pretraining ran");
        (ck.restore(&cfg.model.model_config(data.train.schema(), cfg.run.seed), LoadMode::Full)?, None)
    } else {
        let (m, r) = finetune(cfg, data.train, data.validation, ck, progress)?;
        (m, Some(r))
    };
    let mut metrics = Vec::new();
    for (split, ds) in [(Split::Validation, data.validation), (Split::Test, data.test)] {
        metrics.push((split, evaluate_model(&model, ds)?));
    }
    Ok((
        model,
        RunReport {
            config_id: config_id.to_string(),
            seed: cfg.run.seed,
            pretrain: pre_report,
            finetune: ft_report,
            metrics,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            config_echo: crate::config::render_run_config(cfg),
            build: build_fingerprint(),
        },
    ))
}
