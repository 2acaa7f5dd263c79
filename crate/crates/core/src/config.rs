//! Plain-text configuration: `[section]` headers followed by `key = value`
//! lines. `#` starts a comment. Unknown sections and keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::SyntheticParams;
use crate::error::{ConfigError, Error};
use crate::objectives::Negatives;
use crate::schedule::ScheduleKind;
use crate::trainer::{RunConfig, Stage, TransferMode};

/// Where delimited data lives relative to the `--data` directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub train_file: String,
    pub validation_file: String,
    pub test_file: String,
    /// Feature columns in field order; empty means all non-label columns.
    pub features: Vec<String>,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            train_file: "train.csv".into(),
            validation_file: "validation.csv".into(),
            test_file: "test.csv".into(),
            features: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub run: RunConfig,
    pub data: DataSettings,
    pub synthetic: SyntheticParams,
}

/// One documented key.
pub struct KeyDoc {
    pub section: &'static str,
    pub key: &'static str,
    pub doc: &'static str,
}

const fn k(section: &'static str, key: &'static str, doc: &'static str) -> KeyDoc {
    KeyDoc { section, key, doc }
}

pub const KEYS: &[KeyDoc] = &[
    k("run", "stage", "pretrain | finetune | both"),
    k("run", "seed", "seed for initialization, shuffling and noise"),
    k("run", "pretrain_epochs", "diffusion pretraining epochs"),
    k("run", "finetune_epochs", "maximum fine-tuning epochs"),
    k("run", "pretrain_batch", "pretraining batch size"),
    k("run", "finetune_batch", "fine-tuning batch size"),
    k("run", "pretrain_lr", "Adam learning rate for pretraining"),
    k("run", "finetune_lr", "Adam learning rate for fine-tuning"),
    k("run", "beta1", "Adam first-moment decay"),
    k("run", "beta2", "Adam second-moment decay"),
    k("run", "eps", "Adam epsilon"),
    k("run", "transfer", "none | full | embeddings-only | scoring-network-only"),
    k("run", "patience", "epochs without validation AUC gain before stopping"),
    k("run", "no_label", "pretrain without the label field"),
    k("run", "no_diff", "pretrain with fixed-rate masking instead of diffusion noise"),
    k("model", "dim", "embedding width"),
    k("model", "blocks", "attention blocks in the scoring network"),
    k("model", "heads", "attention heads"),
    k("model", "ff_width", "feed-forward hidden width"),
    k("model", "temperature", "cosine-logit temperature"),
    k("model", "tied_embeddings", "share input and target embedding tables"),
    k("schedule", "kind", "linear_lambda | log_linear"),
    k("schedule", "T", "number of diffusion steps"),
    k("schedule", "lambda_min", "mask probability at t = 0"),
    k("schedule", "lambda_max", "mask probability of the label (and of every field when shared) at t = T"),
    k("schedule", "feature_lambda_max", "mask probability of feature fields at t = T"),
    k("schedule", "label_lambda_min", "mask probability of the label at t = 0"),
    k("schedule", "shared", "one schedule for every field on [lambda_min, lambda_max]"),
    k("loss", "lambda_weight", "weight masked terms by 1/lambda"),
    k("loss", "lambda_clip", "lower clip of lambda inside the weight"),
    k("loss", "max_negatives", "cap on negatives per masked field"),
    k("loss", "negatives", "in_batch | full_vocabulary"),
    k("loss", "bert_mask_rate", "mask rate used when run.no_diff is set"),
    k("data", "train_file", "training file inside the data directory"),
    k("data", "validation_file", "validation file inside the data directory"),
    k("data", "test_file", "test file inside the data directory"),
    k("data", "features", "comma-separated feature columns; empty for all"),
    k("synthetic", "num_fields", "feature fields"),
    k("synthetic", "vocab_size", "tokens per feature field"),
    k("synthetic", "clusters", "latent clusters"),
    k("synthetic", "num_samples", "records generated"),
    k("synthetic", "seed", "generator and split seed"),
    k("synthetic", "cluster_sharpness", "log-odds boost of a token in its home cluster"),
    k("synthetic", "zipf", "Zipf exponent of token popularity"),
    k("synthetic", "main_scale", "scale of cluster-level main effects"),
    k("synthetic", "cross_scale", "scale of cluster-level cross effects"),
    k("synthetic", "token_noise", "scale of token-level noise on main and cross effects"),
    k("synthetic", "affinity", "extra cross weight for tokens sharing a home cluster"),
    k("synthetic", "intercept", "base log-odds of a click"),
];

fn bool_str(b: bool) -> String {
    if b { "true" } else { "false" }.to_string()
}

fn negatives_str(n: Negatives) -> &'static str {
    match n {
        Negatives::InBatch => "in_batch",
        Negatives::FullVocabulary => "full_vocabulary",
    }
}

/// Current value of a key, rendered.
fn get(c: &Config, section: &str, key: &str) -> Option<String> {
    let r = &c.run.run;
    let m = &c.run.model;
    let s = &c.run.schedule;
    let l = &c.run.loss;
    let d = &c.data;
    let y = &c.synthetic;
    Some(match (section, key) {
        ("run", "stage") => r.stage.as_str().into(),
        ("run", "seed") => r.seed.to_string(),
        ("run", "pretrain_epochs") => r.pretrain_epochs.to_string(),
        ("run", "finetune_epochs") => r.finetune_epochs.to_string(),
        ("run", "pretrain_batch") => r.pretrain_batch.to_string(),
        ("run", "finetune_batch") => r.finetune_batch.to_string(),
        ("run", "pretrain_lr") => r.pretrain_lr.to_string(),
        ("run", "finetune_lr") => r.finetune_lr.to_string(),
        ("run", "beta1") => r.beta1.to_string(),
        ("run", "beta2") => r.beta2.to_string(),
        ("run", "eps") => r.eps.to_string(),
        ("run", "transfer") => r.transfer.as_str().into(),
        ("run", "patience") => r.patience.to_string(),
        ("run", "no_label") => bool_str(r.no_label),
        ("run", "no_diff") => bool_str(r.no_diff),
        ("model", "dim") => m.dim.to_string(),
        ("model", "blocks") => m.blocks.to_string(),
        ("model", "heads") => m.heads.to_string(),
        ("model", "ff_width") => m.ff_width.to_string(),
        ("model", "temperature") => m.temperature.to_string(),
        ("model", "tied_embeddings") => bool_str(m.tied_embeddings),
        ("schedule", "kind") => s.kind.as_str().into(),
        ("schedule", "T") => s.horizon.to_string(),
        ("schedule", "lambda_min") => s.lambda_min.to_string(),
        ("schedule", "lambda_max") => s.lambda_max.to_string(),
        ("schedule", "feature_lambda_max") => s.feature_lambda_max.to_string(),
        ("schedule", "label_lambda_min") => s.label_lambda_min.to_string(),
        ("schedule", "shared") => bool_str(s.shared),
        ("loss", "lambda_weight") => bool_str(l.lambda_weight),
        ("loss", "lambda_clip") => l.lambda_clip.to_string(),
        ("loss", "max_negatives") => l.max_negatives.to_string(),
        ("loss", "negatives") => negatives_str(l.negatives).into(),
        ("loss", "bert_mask_rate") => l.bert_mask_rate.to_string(),
        ("data", "train_file") => d.train_file.clone(),
        ("data", "validation_file") => d.validation_file.clone(),
        ("data", "test_file") => d.test_file.clone(),
        ("data", "features") => d.features.join(","),
        ("synthetic", "num_fields") => y.num_fields.to_string(),
        ("synthetic", "vocab_size") => y.vocab_size.to_string(),
        ("synthetic", "clusters") => y.clusters.to_string(),
        ("synthetic", "num_samples") => y.num_samples.to_string(),
        ("synthetic", "seed") => y.seed.to_string(),
        ("synthetic", "cluster_sharpness") => y.cluster_sharpness.to_string(),
        ("synthetic", "zipf") => y.zipf.to_string(),
        ("synthetic", "main_scale") => y.main_scale.to_string(),
        ("synthetic", "cross_scale") => y.cross_scale.to_string(),
        ("synthetic", "token_noise") => y.token_noise.to_string(),
        ("synthetic", "affinity") => y.affinity.to_string(),
        ("synthetic", "intercept") => y.intercept.to_string(),
        _ => return None,
    })
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_enum<T>(key: &str, value: &str, parsed: Option<T>, allowed: &str) -> Result<T, ConfigError> {
    parsed.ok_or_else(|| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: format!("expected one of {allowed}"),
    })
}

fn set(c: &mut Config, section: &str, key: &str, v: &str) -> Result<(), ConfigError> {
    let full = format!("{section}.{key}");
    let f = full.as_str();
    let r = &mut c.run.run;
    let m = &mut c.run.model;
    let s = &mut c.run.schedule;
    let l = &mut c.run.loss;
    let d = &mut c.data;
    let y = &mut c.synthetic;
    match (section, key) {
        ("run", "stage") => r.stage = parse_enum(f, v, Stage::parse(v), "pretrain, finetune, both")?,
        ("run", "seed") => r.seed = parse_num(f, v)?,
        ("run", "pretrain_epochs") => r.pretrain_epochs = parse_num(f, v)?,
        ("run", "finetune_epochs") => r.finetune_epochs = parse_num(f, v)?,
        ("run", "pretrain_batch") => r.pretrain_batch = parse_num(f, v)?,
        ("run", "finetune_batch") => r.finetune_batch = parse_num(f, v)?,
        ("run", "pretrain_lr") => r.pretrain_lr = parse_num(f, v)?,
        ("run", "finetune_lr") => r.finetune_lr = parse_num(f, v)?,
        ("run", "beta1") => r.beta1 = parse_num(f, v)?,
        ("run", "beta2") => r.beta2 = parse_num(f, v)?,
        ("run", "eps") => r.eps = parse_num(f, v)?,
        ("run", "transfer") => {
            r.transfer = parse_enum(
                f,
                v,
                TransferMode::parse(v),
                "none, full, embeddings-only, scoring-network-only",
            )?
        }
        ("run", "patience") => r.patience = parse_num(f, v)?,
        ("run", "no_label") => r.no_label = parse_num(f, v)?,
        ("run", "no_diff") => r.no_diff = parse_num(f, v)?,
        ("model", "dim") => m.dim = parse_num(f, v)?,
        ("model", "blocks") => m.blocks = parse_num(f, v)?,
        ("model", "heads") => m.heads = parse_num(f, v)?,
        ("model", "ff_width") => m.ff_width = parse_num(f, v)?,
        ("model", "temperature") => m.temperature = parse_num(f, v)?,
        ("model", "tied_embeddings") => m.tied_embeddings = parse_num(f, v)?,
        ("schedule", "kind") => {
            s.kind = parse_enum(f, v, ScheduleKind::parse(v), "linear_lambda, log_linear")?
        }
        ("schedule", "T") => s.horizon = parse_num(f, v)?,
        ("schedule", "lambda_min") => s.lambda_min = parse_num(f, v)?,
        ("schedule", "lambda_max") => s.lambda_max = parse_num(f, v)?,
        ("schedule", "feature_lambda_max") => s.feature_lambda_max = parse_num(f, v)?,
        ("schedule", "label_lambda_min") => s.label_lambda_min = parse_num(f, v)?,
        ("schedule", "shared") => s.shared = parse_num(f, v)?,
        ("loss", "lambda_weight") => l.lambda_weight = parse_num(f, v)?,
        ("loss", "lambda_clip") => l.lambda_clip = parse_num(f, v)?,
        ("loss", "max_negatives") => l.max_negatives = parse_num(f, v)?,
        ("loss", "negatives") => {
            l.negatives = parse_enum(
                f,
                v,
                match v {
                    "in_batch" => Some(Negatives::InBatch),
                    "full_vocabulary" => Some(Negatives::FullVocabulary),
                    _ => None,
                },
                "in_batch, full_vocabulary",
            )?
        }
        ("loss", "bert_mask_rate") => l.bert_mask_rate = parse_num(f, v)?,
        ("data", "train_file") => d.train_file = v.into(),
        ("data", "validation_file") => d.validation_file = v.into(),
        ("data", "test_file") => d.test_file = v.into(),
        ("data", "features") => {
            d.features = v
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(String::from)
                .collect()
        }
        ("synthetic", "num_fields") => y.num_fields = parse_num(f, v)?,
        ("synthetic", "vocab_size") => y.vocab_size = parse_num(f, v)?,
        ("synthetic", "clusters") => y.clusters = parse_num(f, v)?,
        ("synthetic", "num_samples") => y.num_samples = parse_num(f, v)?,
        ("synthetic", "seed") => y.seed = parse_num(f, v)?,
        ("synthetic", "cluster_sharpness") => y.cluster_sharpness = parse_num(f, v)?,
        ("synthetic", "zipf") => y.zipf = parse_num(f, v)?,
        ("synthetic", "main_scale") => y.main_scale = parse_num(f, v)?,
        ("synthetic", "cross_scale") => y.cross_scale = parse_num(f, v)?,
        ("synthetic", "token_noise") => y.token_noise = parse_num(f, v)?,
        ("synthetic", "affinity") => y.affinity = parse_num(f, v)?,
        ("synthetic", "intercept") => y.intercept = parse_num(f, v)?,
        _ => {
            return Err(ConfigError::UnknownKey {
                section: section.into(),
                key: key.into(),
            })
        }
    }
    Ok(())
}

impl Config {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: i + 1,
                    reason: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if !KEYS.iter().any(|d| d.section == name) {
                    return Err(ConfigError::Syntax {
                        line: i + 1,
                        reason: format!("unknown section `{name}`"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            let sec = section.as_deref().ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: "key outside any section".into(),
            })?;
            set(&mut cfg, sec, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        Config::parse(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }

    /// Every key with its current value, grouped by section.
    pub fn render(&self) -> String {
        render_sections(self, &["run", "model", "schedule", "loss", "data", "synthetic"])
    }
}

fn render_sections(cfg: &Config, sections: &[&str]) -> String {
    let mut out = String::new();
    for (n, sec) in sections.iter().enumerate() {
        if n > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "[{sec}]");
        for d in KEYS.iter().filter(|d| d.section == *sec) {
            let v = get(cfg, d.section, d.key).expect("documented key has a value");
            let _ = writeln!(out, "{} = {v}", d.key);
        }
    }
    out
}

/// The training-relevant sections of a run configuration.
pub fn render_run_config(run: &RunConfig) -> String {
    let cfg = Config {
        run: run.clone(),
        ..Config::default()
    };
    render_sections(&cfg, &["run", "model", "schedule", "loss"])
}

/// `section.key = default  doc` lines for help output.
pub fn describe_keys() -> String {
    let defaults = Config::default();
    let mut out = String::new();
    for d in KEYS {
        let v = get(&defaults, d.section, d.key).expect("documented key has a value");
        let name = format!("{}.{}", d.section, d.key);
        let _ = writeln!(out, "  {name:<28} {:<14} {}", if v.is_empty() { "\"\"" } else { &v }, d.doc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_documented_key_is_settable() {
        let mut cfg = Config::default();
        for d in KEYS {
            let v = get(&cfg, d.section, d.key).unwrap();
            set(&mut cfg, d.section, d.key, &v).unwrap();
        }
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn unknown_key_and_section() {
        let e = Config::parse("[run]\nepochs = 3\n").unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { .. }));
        let e = Config::parse("[optimizer]\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 1, .. }));
        let e = Config::parse("seed = 1\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { .. }));
    }

    #[test]
    fn bad_value_names_the_key() {
        let e = Config::parse("[model]\ndim = wide\n").unwrap_err();
        match e {
            ConfigError::BadValue { key, .. } => assert_eq!(key, "model.dim"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
