//! Absorbing forward corruption.
//!
//! Training draws `X_λ` from the clean record in one shot: every field keeps
//! its token with probability `1 − λᵏ` and otherwise jumps to its mask token.
//! The [`oracle`] submodule holds exact small-scale references for the
//! underlying continuous-time chain.

pub mod oracle;

use crate::data::{DatasetSchema, Sample};
use crate::numeric::StreamRng;

pub use oracle::{
    chain_path_oracle, exact_kernel, joint_marginal_oracle, score_ratio_oracle, simulate_chain,
    AbsorbingKernel, JointDist, ScoreRatio, StateDist,
};

/// How the label field takes part in corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelMode {
    /// The label is corrupted like any feature.
    #[default]
    Diffuse,
    AlwaysMask,
    NeverMask,
    /// The label is hidden from the input and contributes no loss term.
    Drop,
}

impl LabelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelMode::Diffuse => "diffuse",
            LabelMode::AlwaysMask => "always_mask",
            LabelMode::NeverMask => "never_mask",
            LabelMode::Drop => "drop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "diffuse" => Some(LabelMode::Diffuse),
            "always_mask" => Some(LabelMode::AlwaysMask),
            "never_mask" => Some(LabelMode::NeverMask),
            "drop" => Some(LabelMode::Drop),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorruptionOptions {
    pub label_mode: LabelMode,
    /// Fields that are never masked, not even by the force-mask rule.
    pub frozen: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSample<'a> {
    /// Token per field; the field's mask id where masked or dropped.
    pub tokens: Vec<usize>,
    /// Masked fields in ascending order. These carry loss terms.
    pub masked: Vec<usize>,
    /// Field hidden by [`LabelMode::Drop`]; masked in the input but not in `masked`.
    pub dropped: Option<usize>,
    pub lambdas: Vec<f64>,
    pub origin: &'a Sample,
}

impl CorruptedSample<'_> {
    pub fn is_masked(&self, k: usize) -> bool {
        self.masked.binary_search(&k).is_ok()
    }
}

/// One-shot corruption of a clean record.
///
/// Each field consumes exactly one uniform draw from `rng` whatever its
/// mode, so changing how the label is handled leaves every feature field's
/// outcome unchanged. If no eligible field ends up masked, the eligible
/// field with the largest `λ` (lowest index on ties) is masked.
pub fn corrupt<'a>(
    sample: &'a Sample,
    schema: &DatasetSchema,
    lambdas: &[f64],
    rng: &mut StreamRng,
    opts: &CorruptionOptions,
) -> CorruptedSample<'a> {
    let n = schema.num_fields();
    debug_assert_eq!(lambdas.len(), n);
    let label = schema.label_index();
    let mut tokens = sample.tokens.clone();
    let mut masked = Vec::new();
    let mut dropped = None;
    let mut best: Option<usize> = None;
    for k in 0..n {
        let u = rng.next_f64();
        let frozen = opts.frozen.contains(&k);
        let (eligible, hit) = if k == label {
            match opts.label_mode {
                LabelMode::Diffuse => (true, u < lambdas[k]),
                LabelMode::AlwaysMask => (true, true),
                LabelMode::NeverMask => (false, false),
                LabelMode::Drop => {
                    dropped = Some(k);
                    tokens[k] = schema.mask_id(k);
                    (false, false)
                }
            }
        } else {
            (true, u < lambdas[k])
        };
        if frozen || !eligible {
            continue;
        }
        if hit {
            tokens[k] = schema.mask_id(k);
            masked.push(k);
        }
        if best.is_none_or(|b| lambdas[k] > lambdas[b]) {
            best = Some(k);
        }
    }
    if masked.is_empty() {
        if let Some(k) = best {
            tokens[k] = schema.mask_id(k);
            masked.push(k);
        }
    }
    CorruptedSample {
        tokens,
        masked,
        dropped,
        lambdas: lambdas.to_vec(),
        origin: sample,
    }
}

/// Corrupts a record with an explicit mask pattern.
pub fn mask_fields<'a>(
    sample: &'a Sample,
    schema: &DatasetSchema,
    fields: &[usize],
    lambdas: &[f64],
) -> CorruptedSample<'a> {
    let mut tokens = sample.tokens.clone();
    let mut masked = fields.to_vec();
    masked.sort_unstable();
    masked.dedup();
    for &k in &masked {
        tokens[k] = schema.mask_id(k);
    }
    CorruptedSample {
        tokens,
        masked,
        dropped: None,
        lambdas: lambdas.to_vec(),
        origin: sample,
    }
}
