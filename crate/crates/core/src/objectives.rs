//! Training losses.
//!
//! The pretraining loss is a Monte Carlo estimate of the λ-denoising
//! cross-entropy: one noise draw per record, masked fields scored by a
//! cosine softmax over candidate tokens, each term weighted by `1/λ`. The
//! supervised loss is the pairwise-logit logloss on the label position.

use crate::corruption::{corrupt, CorruptedSample, CorruptionOptions, LabelMode};
use crate::data::{DatasetSchema, Sample};
use crate::error::{Error, NumericError};
use crate::model::{context_rows, encode, field_logits, label_margin, Model, ModelConfig};
use crate::numeric::{log_sum_exp, softplus, Graph, StreamRng, Tensor, Var};
use crate::schedule::{sigma_bar_to_lambda, NoiseSchedule};

/// Where per-record mask probabilities come from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    /// Draw a step uniformly and read every field's `λ` off the schedule.
    Schedule(NoiseSchedule),
    /// Same mask probability for every field and record.
    Constant(f64),
}

/// Candidate set of the softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Negatives {
    /// Distinct ground-truth tokens of the field within the batch.
    #[default]
    InBatch,
    FullVocabulary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLossConfig {
    pub noise: NoiseSource,
    pub negatives: Negatives,
    /// Cap on negatives per masked field; extra ones are subsampled per row.
    pub max_negatives: usize,
    /// Weight each masked-field term by `1/max(λ, lambda_clip)`.
    pub lambda_weight: bool,
    pub lambda_clip: f64,
    pub corruption: CorruptionOptions,
}

impl PretrainLossConfig {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self {
            noise: NoiseSource::Schedule(schedule),
            negatives: Negatives::InBatch,
            max_negatives: 1023,
            lambda_weight: true,
            lambda_clip: 0.01,
            corruption: CorruptionOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.max_negatives == 0 {
            return Err(Error::Objective("max_negatives must be at least 1".into()));
        }
        if !(self.lambda_clip > 0.0 && self.lambda_clip <= 1.0) {
            return Err(Error::Objective(format!("lambda_clip {} outside (0, 1]", self.lambda_clip)));
        }
        if let NoiseSource::Constant(p) = self.noise {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Objective(format!("constant mask rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Draws one corruption per record. Record `i` uses the stream
/// `rng.fork(i)`, so draws do not depend on batch composition order.
pub fn draw_corruptions<'a>(
    batch: &[&'a Sample],
    schema: &DatasetSchema,
    cfg: &PretrainLossConfig,
    rng: &StreamRng,
) -> Vec<CorruptedSample<'a>> {
    let n = schema.num_fields();
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng.fork(i as u64);
            let lambdas = match &cfg.noise {
                NoiseSource::Schedule(sched) => sched.sample_lambda(&mut r),
                NoiseSource::Constant(p) => vec![*p; n],
            };
            corrupt(s, schema, &lambdas, &mut r, &cfg.corruption)
        })
        .collect()
}

/// A differentiable pretraining loss with its breakdown.
#[derive(Debug, Clone)]
pub struct PretrainLoss {
    pub loss: Var,
    /// Weighted loss contributed by each field, divided by batch size.
    pub per_field: Vec<f64>,
    /// Weighted loss of each record (sum over its masked fields).
    pub per_record: Vec<f64>,
    pub masked_terms: usize,
}

fn term_weight(cfg: &PretrainLossConfig, lambda: f64) -> f64 {
    if cfg.lambda_weight {
        1.0 / lambda.max(cfg.lambda_clip)
    } else {
        1.0
    }
}

/// Distinct ground-truth tokens of field `k` in the batch, ascending.
fn in_batch_candidates(corrupted: &[CorruptedSample<'_>], k: usize) -> Vec<usize> {
    let mut c: Vec<usize> = corrupted.iter().map(|c| c.origin.tokens[k]).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Pretraining loss over already-corrupted records.
///
/// `rng` only drives negative subsampling when a field has more than
/// `max_negatives` negatives.
pub fn pretrain_loss_from(
    g: &mut Graph<'_>,
    model: &ModelConfig,
    cfg: &PretrainLossConfig,
    corrupted: &[CorruptedSample<'_>],
    rng: &StreamRng,
) -> Result<PretrainLoss, Error> {
    cfg.validate()?;
    let b = corrupted.len();
    if b == 0 {
        return Err(Error::Objective("empty batch".into()));
    }
    let label = model.label_index();
    let needs_batch = cfg.negatives == Negatives::InBatch
        && corrupted.iter().any(|c| c.masked.iter().any(|&k| k != label));
    if needs_batch && b < 2 {
        return Err(Error::Objective(
            "in-batch negatives need at least two records".into(),
        ));
    }
    let tokens: Vec<&[usize]> = corrupted.iter().map(|c| c.tokens.as_slice()).collect();
    let enc = encode(g, model, &tokens)?;
    let mut per_field = vec![0.0; model.num_fields()];
    let mut per_record = vec![0.0; b];
    let mut masked_terms = 0;
    let mut total: Option<Var> = None;
    for k in 0..model.num_fields() {
        let rows: Vec<usize> = (0..b).filter(|&i| corrupted[i].is_masked(k)).collect();
        if rows.is_empty() {
            continue;
        }
        let candidates: Vec<usize> = if k == label || cfg.negatives == Negatives::FullVocabulary {
            (0..model.vocab_sizes[k]).collect()
        } else {
            in_batch_candidates(corrupted, k)
        };
        let c = candidates.len();
        let positives: Vec<usize> = rows
            .iter()
            .map(|&i| {
                candidates
                    .binary_search(&corrupted[i].origin.tokens[k])
                    .expect("positive is a candidate")
            })
            .collect();
        let mask = if c - 1 > cfg.max_negatives && k != label {
            let mut m = Vec::with_capacity(rows.len() * c);
            for (&i, &pos) in rows.iter().zip(&positives) {
                let mut r = rng.fork(((i as u64) << 16) | k as u64);
                let mut negs: Vec<usize> = (0..c).filter(|&j| j != pos).collect();
                r.shuffle(&mut negs);
                let mut keep = vec![false; c];
                keep[pos] = true;
                for &j in &negs[..cfg.max_negatives] {
                    keep[j] = true;
                }
                m.extend(keep);
            }
            Some(m)
        } else {
            None
        };
        let index: Vec<(usize, usize)> = rows.iter().map(|&i| (i, k)).collect();
        let ctx = context_rows(g, model, enc, &index)?;
        let logits = field_logits(g, model, ctx, k, &candidates)?;
        let lse = g.log_sum_exp_rows(logits, mask)?;
        let pick = g.pick_rows(logits, &positives)?;
        let nll = g.sub(lse, pick)?;
        let weights: Vec<f64> = rows
            .iter()
            .map(|&i| term_weight(cfg, corrupted[i].lambdas[k]))
            .collect();
        let values: Vec<f64> = g.value(nll).data().to_vec();
        for ((&i, &w), v) in rows.iter().zip(&weights).zip(values) {
            per_record[i] += w * v;
            per_field[k] += w * v / b as f64;
        }
        let w = g.constant(Tensor::vector(weights))?;
        let weighted = g.mul(nll, w)?;
        let s = g.sum(weighted)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
        masked_terms += rows.len();
    }
    let total = total.ok_or_else(|| Error::Objective("no masked field in batch".into()))?;
    let loss = g.scale(total, 1.0 / b as f64)?;
    Ok(PretrainLoss {
        loss,
        per_field,
        per_record,
        masked_terms,
    })
}

/// Corrupts the batch and builds its pretraining loss.
pub fn pretrain_loss(
    g: &mut Graph<'_>,
    model: &ModelConfig,
    schema: &DatasetSchema,
    cfg: &PretrainLossConfig,
    batch: &[&Sample],
    rng: &StreamRng,
) -> Result<PretrainLoss, Error> {
    let corrupted = draw_corruptions(batch, schema, cfg, &rng.fork(0));
    pretrain_loss_from(g, model, cfg, &corrupted, &rng.fork(1))
}

/// Mean `−log p̂(y|F)` with `p̂(y=1|F) = sigmoid(F(y=1) − F(y=0))`.
pub fn sft_loss(g: &mut Graph<'_>, model: &ModelConfig, batch: &[&Sample]) -> Result<Var, NumericError> {
    let records: Vec<&[usize]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
    let margin = label_margin(g, model, &records)?;
    // −log sigmoid(s·m) = softplus(−s·m) with s = ±1
    let signs: Vec<f64> = batch
        .iter()
        .map(|s| if s.label() == 1 { -1.0 } else { 1.0 })
        .collect();
    let signs = g.constant(Tensor::vector(signs))?;
    let z = g.mul(margin, signs)?;
    let nll = g.softplus(z)?;
    g.mean(nll)
}

/// Per-record SFT loss values (no graph kept).
pub fn sft_losses(model: &Model, batch: &[&Sample]) -> Result<Vec<f64>, Error> {
    let records: Vec<&[usize]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
    let mut g = Graph::new(&model.params);
    let m = label_margin(&mut g, &model.config, &records)?;
    Ok(g.value(m)
        .data()
        .iter()
        .zip(batch)
        .map(|(&m, s)| softplus(if s.label() == 1 { -m } else { m }))
        .collect())
}

/// Largest per-record gap between the label-only pretraining loss (2-way
/// softmax, unit weight) and the SFT loss.
pub fn verify_label_equivalence(model: &Model, schema: &DatasetSchema, batch: &[&Sample]) -> Result<f64, Error> {
    let label = schema.label_index();
    let cfg = PretrainLossConfig {
        noise: NoiseSource::Constant(0.0),
        negatives: Negatives::InBatch,
        max_negatives: 1,
        lambda_weight: false,
        lambda_clip: 1.0,
        corruption: CorruptionOptions {
            label_mode: LabelMode::AlwaysMask,
            frozen: (0..label).collect(),
        },
    };
    let corrupted = draw_corruptions(batch, schema, &cfg, &StreamRng::new(0, 0));
    let mut g = Graph::new(&model.params);
    let pre = pretrain_loss_from(&mut g, &model.config, &cfg, &corrupted, &StreamRng::new(0, 1))?;
    let sft = sft_losses(model, batch)?;
    Ok(pre
        .per_record
        .iter()
        .zip(&sft)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// The score-entropy integrand at one point, for one record and mask pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntropyPoint {
    /// `Σ_k −σᵏ·H₃ᵏ·log(H₃ᵏ·q(xᵏ|X^UM))`.
    pub total: f64,
    /// `−log q(xᵏ|X^UM)` per masked field, full-vocabulary softmax.
    pub cross_entropy: Vec<f64>,
    /// `H₃ᵏ = σᵏ e^{−σ̄ᵏ}/(1 − e^{−σ̄ᵏ})` per masked field.
    pub h3: Vec<f64>,
    pub masked: Vec<usize>,
}

/// Largest vocabulary the exact integrand accepts.
pub const SCORE_ENTROPY_MAX_VOCAB: usize = 64;

/// Evaluates the score-entropy integrand with weights exactly as written:
/// the rate `σᵏ` appears once inside `H₃` and once as the outer factor.
pub fn score_entropy_oracle(
    model: &Model,
    sample: &Sample,
    sigma_bars: &[f64],
    sigma_rates: &[f64],
    masked: &[usize],
) -> Result<ScoreEntropyPoint, Error> {
    let cfg = &model.config;
    let n = cfg.num_fields();
    if sigma_bars.len() != n || sigma_rates.len() != n {
        return Err(Error::Objective(format!("need {n} noise levels and rates")));
    }
    if let Some(k) = masked.iter().find(|&&k| cfg.vocab_sizes[k] > SCORE_ENTROPY_MAX_VOCAB) {
        return Err(Error::Objective(format!(
            "field {k} vocabulary {} exceeds {SCORE_ENTROPY_MAX_VOCAB}",
            cfg.vocab_sizes[*k]
        )));
    }
    let mut tokens = sample.tokens.clone();
    for &k in masked {
        tokens[k] = cfg.vocab_sizes[k];
    }
    let mut g = Graph::new(&model.params);
    let enc = encode(&mut g, cfg, &[&tokens])?;
    let mut total = 0.0;
    let mut cross_entropy = Vec::new();
    let mut h3s = Vec::new();
    for &k in masked {
        let ctx = context_rows(&mut g, cfg, enc, &[(0, k)])?;
        let all: Vec<usize> = (0..cfg.vocab_sizes[k]).collect();
        let logits = field_logits(&mut g, cfg, ctx, k, &all)?;
        let row = g.value(logits).data();
        let ce = log_sum_exp(row) - row[sample.tokens[k]];
        let keep = (-sigma_bars[k]).exp();
        let h3 = sigma_rates[k] * keep / sigma_bar_to_lambda(sigma_bars[k]);
        total += -sigma_rates[k] * h3 * (h3.ln() - ce);
        cross_entropy.push(ce);
        h3s.push(h3);
    }
    Ok(ScoreEntropyPoint {
        total,
        cross_entropy,
        h3: h3s,
        masked: masked.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::forward_value;

    fn setup() -> (DatasetSchema, Model) {
        let schema = DatasetSchema::uniform(3, 5).unwrap();
        let cfg = ModelConfig {
            dim: 8,
            blocks: 1,
            heads: 2,
            ff_width: 8,
            seed: 4,
            ..ModelConfig::for_schema(&schema)
        };
        (schema, Model::new(cfg).unwrap())
    }

    #[test]
    fn single_record_in_batch_errors() {
        let (schema, model) = setup();
        let s = Sample::new(vec![1, 2, 3, 0]);
        let cfg = PretrainLossConfig {
            noise: NoiseSource::Constant(0.9),
            ..PretrainLossConfig::new(crate::schedule::NoiseSchedule::uniform(
                Default::default(),
                10,
                4,
                crate::schedule::LambdaRange::full(),
            )
            .unwrap())
        };
        let mut g = Graph::new(&model.params);
        let r = pretrain_loss(&mut g, &model.config, &schema, &cfg, &[&s], &StreamRng::new(1, 1));
        assert!(matches!(r, Err(Error::Objective(_))));
    }

    #[test]
    fn shared_token_gives_zero_term() {
        let (schema, model) = setup();
        let a = Sample::new(vec![1, 2, 3, 0]);
        let b = Sample::new(vec![1, 4, 0, 1]);
        let cfg = PretrainLossConfig {
            noise: NoiseSource::Constant(0.0),
            lambda_weight: false,
            corruption: CorruptionOptions {
                label_mode: LabelMode::NeverMask,
                frozen: vec![1, 2],
            },
            ..PretrainLossConfig::new(
                crate::schedule::NoiseSchedule::uniform(Default::default(), 10, 4, crate::schedule::LambdaRange::full())
                    .unwrap(),
            )
        };
        // only field 0 can be masked and both records hold token 1
        let mut g = Graph::new(&model.params);
        let l = pretrain_loss(&mut g, &model.config, &schema, &cfg, &[&a, &b], &StreamRng::new(0, 0)).unwrap();
        assert_eq!(g.value(l.loss).item(), 0.0);
    }

    #[test]
    fn sft_equal_logits_is_ln2() {
        let (_, mut model) = setup();
        // identical label target rows make the two logits equal
        let t = model.params.value("embed.target.3").unwrap().clone();
        let row = t.row(0).to_vec();
        let mut data = row.clone();
        data.extend(&row);
        model.params.insert("embed.target.3", Tensor::new(t.shape().to_vec(), data).unwrap());
        let s = Sample::new(vec![1, 2, 3, 1]);
        let v = forward_value(&model.params, |g| sft_loss(g, &model.config, &[&s])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn equivalence_holds_on_random_model() {
        let (schema, model) = setup();
        let samples: Vec<Sample> = (0..6).map(|i| Sample::new(vec![i % 5, (i * 2) % 5, 4, i % 2])).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        assert!(verify_label_equivalence(&model, &schema, &refs).unwrap() < 1e-12);
    }
}
