//! Self-checks of the math against exact oracles, runnable by name.

use crate::corruption::{
    chain_path_oracle, exact_kernel, joint_marginal_oracle, score_ratio_oracle, AbsorbingKernel, JointDist,
};
use crate::data::{DatasetSchema, Sample};
use crate::error::Error;
use crate::evaluation::{auc, auc_brute_force, gauc_pv, gauc_pv_brute_force, ScoredExample};
use crate::model::{Model, ModelConfig};
use crate::numeric::{grad_check, Graph, ParamStore, StreamRng, Tensor};
use crate::objectives::{pretrain_loss, sft_loss, verify_label_equivalence, PretrainLossConfig};
use crate::schedule::{LambdaRange, NoiseSchedule, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifySuite {
    Kernel,
    Marginal,
    ScoreRatio,
    Equivalence,
    GradCheck,
    Metrics,
}

impl VerifySuite {
    pub const ALL: [VerifySuite; 6] = [
        VerifySuite::Kernel,
        VerifySuite::Marginal,
        VerifySuite::ScoreRatio,
        VerifySuite::Equivalence,
        VerifySuite::GradCheck,
        VerifySuite::Metrics,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VerifySuite::Kernel => "kernel",
            VerifySuite::Marginal => "marginal",
            VerifySuite::ScoreRatio => "score-ratio",
            VerifySuite::Equivalence => "equivalence",
            VerifySuite::GradCheck => "gradcheck",
            VerifySuite::Metrics => "metrics",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    /// Worst observed error.
    pub error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: VerifySuite, name: impl Into<String>, error: f64, tol: f64) -> Self {
        Self {
            suite: suite.as_str(),
            name: name.into(),
            error,
            tol,
            passed: error <= tol,
        }
    }

    fn failed(suite: VerifySuite, name: impl Into<String>, e: &Error) -> Self {
        Self {
            suite: suite.as_str(),
            name: format!("{}: {e}", name.into()),
            error: f64::INFINITY,
            tol: 0.0,
            passed: false,
        }
    }
}

/// Runs one suite. `tamper` swaps a deliberately wrong adjoint into the
/// gradient-check fixture so that suite must fail.
pub fn run_suite(suite: VerifySuite, tamper: bool) -> Vec<Check> {
    match suite {
        VerifySuite::Kernel => kernel_checks(),
        VerifySuite::Marginal => marginal_checks(),
        VerifySuite::ScoreRatio => score_ratio_checks(),
        VerifySuite::Equivalence => vec![equivalence_check(1000)],
        VerifySuite::GradCheck => gradcheck_checks(tamper),
        VerifySuite::Metrics => metric_checks(100),
    }
}

pub const KERNEL_SIGMAS: [f64; 5] = [0.0, 0.1, std::f64::consts::LN_2, 2.3, 10.0];

fn kernel_checks() -> Vec<Check> {
    let mut worst = 0.0f64;
    for v in 1..=16 {
        for s in KERNEL_SIGMAS {
            worst = worst.max(exact_kernel(v, s).max_abs_diff(&AbsorbingKernel::closed_form(v, s)));
        }
    }
    vec![Check::new(
        VerifySuite::Kernel,
        "matrix exponential vs closed form, V=1..16",
        worst,
        1e-10,
    )]
}

/// Random tiny joint: 1 to 3 fields of 1 to 3 tokens each.
fn tiny_joint(rng: &mut StreamRng) -> Result<JointDist, Error> {
    let fields = 1 + rng.below(3);
    let sizes = (0..fields).map(|_| 1 + rng.below(3)).collect();
    JointDist::random(sizes, rng)
}

fn marginal_checks() -> Vec<Check> {
    let suite = VerifySuite::Marginal;
    let mut rng = StreamRng::new(0x3A5, 0);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let result = (|| {
            let p0 = tiny_joint(&mut rng)?;
            let f = p0.num_fields();
            // cumulative noise after each of three steps, nondecreasing per field
            let mut path: Vec<Vec<f64>> = Vec::new();
            let mut acc = vec![0.0; f];
            for _ in 0..3 {
                for a in acc.iter_mut() {
                    *a += 0.8 * rng.next_f64();
                }
                path.push(acc.clone());
            }
            let total = acc;
            let a = joint_marginal_oracle(&p0, &total)?;
            let b = chain_path_oracle(&p0, &path)?;
            Ok::<f64, Error>(a.total_variation(&b))
        })();
        match result {
            Ok(tv) => worst = worst.max(tv),
            Err(e) => return vec![Check::failed(suite, format!("case {case}"), &e)],
        }
    }
    vec![Check::new(suite, "factorized marginal vs chain paths, 20 joints", worst, 1e-9)]
}

fn score_ratio_checks() -> Vec<Check> {
    let suite = VerifySuite::ScoreRatio;
    let mut rng = StreamRng::new(0x5C0, 0);
    let mut ratio_err = 0.0f64;
    let mut cond_err = 0.0f64;
    for case in 0..20 {
        let result = (|| {
            let p0 = tiny_joint(&mut rng)?;
            let vocab = p0.vocab_sizes().to_vec();
            let f = vocab.len();
            // mask a nonempty subset, then unmask a nonempty subset of it
            let (clean, _) = p0.iter().nth(rng.below(p0.iter().count())).expect("nonempty joint");
            let mut state = clean.clone();
            let masked: Vec<usize> = (0..f).filter(|_| rng.next_f64() < 0.7).collect();
            let masked = if masked.is_empty() { vec![rng.below(f)] } else { masked };
            for &k in &masked {
                state[k] = vocab[k];
            }
            let mut proposal = state.clone();
            let chosen: Vec<usize> = masked.iter().copied().filter(|_| rng.next_f64() < 0.6).collect();
            let chosen = if chosen.is_empty() { vec![masked[0]] } else { chosen };
            for &k in &chosen {
                proposal[k] = rng.below(vocab[k]);
            }
            let mut conds = Vec::new();
            let mut worst = 0.0f64;
            for _ in 0..3 {
                let sig: Vec<f64> = (0..f).map(|_| 0.05 + 3.0 * rng.next_f64()).collect();
                let r = score_ratio_oracle(&p0, &sig, &state, &proposal)?;
                worst = worst.max((r.direct - r.product_form).abs() / r.direct.abs().max(1e-300));
                conds.push(r.conditional);
            }
            let spread = conds.iter().map(|c| (c - conds[0]).abs()).fold(0.0, f64::max);
            Ok::<(f64, f64), Error>((worst, spread))
        })();
        match result {
            Ok((r, c)) => {
                ratio_err = ratio_err.max(r);
                cond_err = cond_err.max(c);
            }
            Err(e) => return vec![Check::failed(suite, format!("case {case}"), &e)],
        }
    }
    vec![
        Check::new(suite, "direct ratio vs prefactor times conditional (relative)", ratio_err, 1e-9),
        Check::new(suite, "conditional identical across 3 noise levels", cond_err, 1e-9),
    ]
}

fn tiny_model(schema: &DatasetSchema, seed: u64, blocks: usize) -> Result<Model, Error> {
    Model::new(ModelConfig {
        dim: 8,
        blocks,
        heads: 2,
        ff_width: 12,
        seed,
        ..ModelConfig::for_schema(schema)
    })
}

fn random_batch(schema: &DatasetSchema, n: usize, rng: &mut StreamRng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            Sample::new(
                schema
                    .fields()
                    .iter()
                    .map(|f| rng.below(f.vocab_size))
                    .collect(),
            )
        })
        .collect()
}

/// Largest gap between label-only pretraining loss and SFT loss over
/// `draws` random models and records.
pub fn equivalence_check(draws: usize) -> Check {
    let suite = VerifySuite::Equivalence;
    let mut rng = StreamRng::new(0xE9, 0);
    let mut worst = 0.0f64;
    for d in 0..draws {
        let result = (|| {
            let fields = 1 + rng.below(4);
            let schema = DatasetSchema::uniform(fields, 2 + rng.below(6))?;
            let model = tiny_model(&schema, d as u64 + 1, rng.below(3))?;
            let batch = random_batch(&schema, 2 + rng.below(4), &mut rng);
            let refs: Vec<&Sample> = batch.iter().collect();
            verify_label_equivalence(&model, &schema, &refs)
        })();
        match result {
            Ok(gap) => worst = worst.max(gap),
            Err(e) => return Check::failed(suite, format!("draw {d}"), &e),
        }
    }
    Check::new(
        suite,
        format!("label-only pretraining loss vs SFT logloss, {draws} draws"),
        worst,
        1e-9,
    )
}

fn worst_report(reports: &[crate::numeric::GradCheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

fn gradcheck_checks(tamper: bool) -> Vec<Check> {
    let suite = VerifySuite::GradCheck;
    let mut out = Vec::new();
    let result = (|| {
        let schema = DatasetSchema::uniform(3, 5)?;
        let model = tiny_model(&schema, 7, 1)?;
        let mut rng = StreamRng::new(0x6C, 0);
        let batch = random_batch(&schema, 6, &mut rng);
        let refs: Vec<&Sample> = batch.iter().collect();
        let schedule = NoiseSchedule::uniform(ScheduleKind::LinearLambda, 50, 4, LambdaRange::new(0.2, 0.9)?)?;
        let cfg = PretrainLossConfig::new(schedule);
        let noise = StreamRng::new(0x6C, 1);
        let pre = grad_check(
            &model.params,
            |g| {
                pretrain_loss(g, &model.config, &schema, &cfg, &refs, &noise)
                    .map(|l| l.loss)
                    .map_err(|e| match e {
                        Error::Numeric(n) => n,
                        other => crate::error::NumericError::Invalid(other.to_string()),
                    })
            },
            1e-5,
            1e-5,
            Some(24),
        );
        let sft = grad_check(&model.params, |g| sft_loss(g, &model.config, &refs), 1e-5, 1e-5, Some(24));
        Ok::<_, Error>((pre, sft))
    })();
    match result {
        Ok((pre, sft)) => {
            out.push(Check::new(suite, "pretraining loss, every parameter", worst_report(&pre), 1e-5));
            out.push(Check::new(suite, "SFT loss, every parameter", worst_report(&sft), 1e-5));
        }
        Err(e) => out.push(Check::failed(suite, "model fixture", &e)),
    }
    out.push(Check::new(
        suite,
        if tamper {
            "adjoint fixture (tampered)"
        } else {
            "adjoint fixture"
        },
        adjoint_fixture_error(tamper),
        1e-5,
    ));
    out
}

/// A two-layer ReLU network with inputs kept away from the kink.
fn adjoint_fixture_error(tamper: bool) -> f64 {
    let mut params = ParamStore::new();
    let mut rng = StreamRng::new(0xAD, 0);
    let mut t = |r: usize, c: usize| {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).expect("shape matches data")
    };
    params.insert("w1", t(3, 4));
    params.insert("w2", t(4, 1));
    let x = t(5, 3);
    let build = |g: &mut Graph<'_>| {
        let xv = g.constant(x.clone())?;
        let w1 = g.param("w1")?;
        let w2 = g.param("w2")?;
        let h = g.matmul(xv, w1)?;
        let a = if tamper { g.tampered_relu(h)? } else { g.relu(h)? };
        let o = g.matmul(a, w2)?;
        let o2 = g.mul(o, o)?;
        g.sum(o2)
    };
    worst_report(&grad_check(&params, build, 1e-6, 1e-5, None))
}

fn random_examples(rng: &mut StreamRng, n: usize, sessions: usize, levels: usize) -> Vec<ScoredExample> {
    let mut ex: Vec<ScoredExample> = (0..n)
        .map(|_| {
            // coarse score levels produce ties
            let score = rng.below(levels) as f64 / levels as f64;
            let mut e = ScoredExample::new(score, usize::from(rng.next_f64() < 0.4));
            e.session_id = Some(format!("s{}", rng.below(sessions)));
            e
        })
        .collect();
    ex[0].label = 0;
    ex[1].label = 1;
    ex
}

fn metric_checks(fixtures: usize) -> Vec<Check> {
    let suite = VerifySuite::Metrics;
    let mut rng = StreamRng::new(0x3E7, 0);
    let (mut auc_err, mut gauc_err) = (0.0f64, 0.0f64);
    for i in 0..fixtures {
        let n = 2 + rng.below(if i % 10 == 0 { 1999 } else { 300 });
        let levels = if i % 2 == 0 { 5 } else { 100_000 };
        let sessions = 1 + rng.below(12);
        let ex = random_examples(&mut rng, n, sessions, levels);
        let r = (|| {
            let a = (auc(&ex)? - auc_brute_force(&ex)?).abs();
            let g = match (gauc_pv(&ex), gauc_pv_brute_force(&ex)) {
                (Ok(x), Ok(y)) => (x - y).abs(),
                (Err(_), Err(_)) => 0.0,
                _ => f64::INFINITY,
            };
            Ok::<_, Error>((a, g))
        })();
        match r {
            Ok((a, g)) => {
                auc_err = auc_err.max(a);
                gauc_err = gauc_err.max(g);
            }
            Err(e) => return vec![Check::failed(suite, format!("fixture {i}"), &e)],
        }
    }
    vec![
        Check::new(suite, format!("rank AUC vs pairwise, {fixtures} fixtures"), auc_err, 1e-12),
        Check::new(suite, format!("GAUC vs pairwise, {fixtures} fixtures"), gauc_err, 1e-12),
    ]
}
