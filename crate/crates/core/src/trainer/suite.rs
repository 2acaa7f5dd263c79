//! Named configuration sets run over several seeds, with shared
//! pretraining and per-config summaries.

use std::collections::HashMap;

use super::{pretrain_with, run_pipeline, PretrainReport, RunConfig, RunReport, Splits, Stage, TransferMode};
use crate::error::Error;
use crate::evaluation::{mann_whitney_u, summarize, ReportRow, SummaryRow};
use crate::model::{Checkpoint, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Transfer,
    Ablation,
    Sweep,
}

impl Suite {
    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::Transfer => "transfer",
            Suite::Ablation => "ablation",
            Suite::Sweep => "sweep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "transfer" => Some(Suite::Transfer),
            "ablation" => Some(Suite::Ablation),
            "sweep" => Some(Suite::Sweep),
            _ => None,
        }
    }
}

/// Horizons and pretraining epoch counts covered by the sweep suite.
pub const SWEEP_HORIZONS: [u32; 4] = [10, 100, 500, 1000];
pub const SWEEP_EPOCHS: [usize; 5] = [1, 2, 3, 4, 5];

/// The named configurations of a suite, derived from `base`. The first
/// entry is the reference the others are tested against.
pub fn suite_configs(suite: Suite, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut full = base.clone();
    full.run.stage = Stage::Both;
    full.run.transfer = TransferMode::Full;
    full.run.no_label = false;
    full.run.no_diff = false;
    full.schedule.shared = false;
    let variant = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c
    };
    match suite {
        Suite::Transfer => vec![
            ("full".to_string(), full.clone()),
            (
                "embeddings-only".to_string(),
                variant(&|c| c.run.transfer = TransferMode::EmbeddingsOnly),
            ),
            (
                "scoring-network-only".to_string(),
                variant(&|c| c.run.transfer = TransferMode::ScoringNetworkOnly),
            ),
        ],
        Suite::Ablation => vec![
            ("full".to_string(), full.clone()),
            ("w/o-label".to_string(), variant(&|c| c.run.no_label = true)),
            ("w/o-diff".to_string(), variant(&|c| c.run.no_diff = true)),
            ("w/o-fea".to_string(), variant(&|c| c.schedule.shared = true)),
        ],
        Suite::Sweep => {
            let mut out = Vec::new();
            for t in SWEEP_HORIZONS {
                out.push((format!("T={t}"), variant(&|c| c.schedule.horizon = t)));
            }
            for e in SWEEP_EPOCHS {
                out.push((format!("epochs={e}"), variant(&|c| c.run.pretrain_epochs = e)));
            }
            out
        }
    }
}

/// The same configuration with everything that does not affect
/// pretraining reset, so runs that differ only downstream share a key.
fn pretrain_key(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    let d = RunConfig::default();
    c.run.stage = d.run.stage;
    c.run.pretrain_epochs = 0;
    c.run.finetune_epochs = d.run.finetune_epochs;
    c.run.finetune_batch = d.run.finetune_batch;
    c.run.finetune_lr = d.run.finetune_lr;
    c.run.transfer = d.run.transfer;
    c.run.patience = d.run.patience;
    format!("{c:?}")
}

struct Pretrained {
    /// Snapshot after each epoch, with the cumulative step count.
    snapshots: Vec<(Checkpoint, usize)>,
    report: PretrainReport,
}

/// Pretrained checkpoints and finished runs, reused across suites that
/// share configurations and seeds.
#[derive(Default)]
pub struct ExperimentCache {
    pretrained: HashMap<String, Pretrained>,
    runs: HashMap<String, RunReport>,
    /// Pretraining runs actually executed.
    pub pretrain_runs: usize,
}

impl ExperimentCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checkpoint and report after `epochs` pretraining epochs, training at
    /// least `train_epochs` epochs when nothing long enough is cached.
    fn pretrained(
        &mut self,
        cfg: &RunConfig,
        data: Splits<'_>,
        epochs: usize,
        train_epochs: usize,
        progress: &mut dyn FnMut(&str),
    ) -> Result<(Checkpoint, PretrainReport), Error> {
        if epochs == 0 {
            let model = Model::new(cfg.model.model_config(data.train.schema(), cfg.run.seed))?;
            let report = PretrainReport {
                epoch_losses: Vec::new(),
                epoch_field_losses: Vec::new(),
                steps: 0,
                checkpoints: Vec::new(),
            };
            return Ok((Checkpoint::from_model(&model, 0), report));
        }
        let key = pretrain_key(cfg);
        if self.pretrained.get(&key).is_none_or(|p| p.snapshots.len() < epochs) {
            let mut c = cfg.clone();
            c.run.pretrain_epochs = train_epochs.max(epochs);
            let mut snapshots = Vec::new();
            let (_, report) = pretrain_with(&c, data.train, None, progress, &mut |_, steps, m| {
                snapshots.push((Checkpoint::from_model(m, steps as u64), steps));
            })?;
            self.pretrain_runs += 1;
            self.pretrained.insert(key.clone(), Pretrained { snapshots, report });
        }
        let p = &self.pretrained[&key];
        let (ck, steps) = p.snapshots[epochs - 1].clone();
        let report = PretrainReport {
            epoch_losses: p.report.epoch_losses[..epochs].to_vec(),
            epoch_field_losses: p.report.epoch_field_losses[..epochs].to_vec(),
            steps,
            checkpoints: Vec::new(),
        };
        Ok((ck, report))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Significance {
    pub reference: String,
    pub variant: String,
    pub split: String,
    pub metric: String,
    pub u: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub config_id: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub runs: Vec<RunReport>,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    pub significance: Vec<Significance>,
    pub failures: Vec<RunFailure>,
}

impl SuiteReport {
    /// Per-seed values of one metric for one config, in seed order.
    pub fn values(&self, config_id: &str, split: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.config_id == config_id && r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn mean(&self, config_id: &str, split: &str, metric: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.config_id == config_id && r.split == split && r.metric == metric)
            .map(|r| r.mean)
    }
}

fn report_rows(run: &RunReport) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (split, m) in &run.metrics {
        let mut push = |metric: &str, value: f64| {
            rows.push(ReportRow {
                config_id: run.config_id.clone(),
                seed: run.seed,
                split: split.as_str().to_string(),
                metric: metric.to_string(),
                value,
            })
        };
        push("auc", m.auc);
        push("logloss", m.logloss);
        if let Some(g) = m.gauc_pv {
            push("gauc_pv", g);
        }
    }
    rows
}

/// Runs every config for every seed. A failing run is recorded and the
/// suite carries on. Significance compares the first config with each
/// other one on every test metric.
pub fn run_experiment_suite(
    configs: &[(String, RunConfig)],
    seeds: &[u64],
    data: Splits<'_>,
    cache: &mut ExperimentCache,
    progress: &mut dyn FnMut(&str),
) -> SuiteReport {
    let mut max_epochs: HashMap<String, usize> = HashMap::new();
    for (_, cfg) in configs {
        let e = max_epochs.entry(pretrain_key(cfg)).or_default();
        *e = (*e).max(cfg.run.pretrain_epochs);
    }
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        for (id, base) in configs {
            let mut cfg = base.clone();
            cfg.run.seed = seed;
            progress(&format!("run {id} seed {seed}"));
            match run_one(id, &cfg, data, cache, max_epochs[&pretrain_key(base)], progress) {
                Ok(r) => runs.push(r),
                Err(e) => {
                    progress(&format!("run {id} seed {seed} failed: {e}"));
                    failures.push(RunFailure {
                        config_id: id.clone(),
                        seed,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    // rows grouped by config, then seed
    let mut rows = Vec::new();
    for (id, _) in configs {
        for r in runs.iter().filter(|r| &r.config_id == id) {
            rows.extend(report_rows(r));
        }
    }
    let summary = summarize(&rows);
    let mut significance = Vec::new();
    if let Some((reference, _)) = configs.first() {
        for (variant, _) in &configs[1..] {
            for metric in ["auc", "logloss", "gauc_pv"] {
                let a: Vec<f64> = rows
                    .iter()
                    .filter(|r| &r.config_id == reference && r.split == "test" && r.metric == metric)
                    .map(|r| r.value)
                    .collect();
                let b: Vec<f64> = rows
                    .iter()
                    .filter(|r| &r.config_id == variant && r.split == "test" && r.metric == metric)
                    .map(|r| r.value)
                    .collect();
                if let Ok(mw) = mann_whitney_u(&a, &b) {
                    significance.push(Significance {
                        reference: reference.clone(),
                        variant: variant.clone(),
                        split: "test".to_string(),
                        metric: metric.to_string(),
                        u: mw.u,
                        p_value: mw.p_value,
                    });
                }
            }
        }
    }
    SuiteReport {
        runs,
        rows,
        summary,
        significance,
        failures,
    }
}

fn run_one(
    id: &str,
    cfg: &RunConfig,
    data: Splits<'_>,
    cache: &mut ExperimentCache,
    train_epochs: usize,
    progress: &mut dyn FnMut(&str),
) -> Result<RunReport, Error> {
    let run_key = format!("{cfg:?}");
    if let Some(r) = cache.runs.get(&run_key) {
        let mut r = r.clone();
        r.config_id = id.to_string();
        return Ok(r);
    }
    let pretrained = if cfg.run.transfer != TransferMode::None && cfg.run.stage != Stage::Finetune {
        Some(cache.pretrained(cfg, data, cfg.run.pretrain_epochs, train_epochs, progress)?)
    } else {
        None
    };
    let original = cfg;
    let mut cfg = cfg.clone();
    cfg.run.stage = Stage::Finetune;
    let (_, mut report) = run_pipeline(id, &cfg, data, pretrained.as_ref().map(|p| &p.0), progress)?;
    report.pretrain = pretrained.map(|p| p.1);
    report.config_echo = crate::config::render_run_config(&original);
    cache.runs.insert(run_key, report.clone());
    Ok(report)
}
