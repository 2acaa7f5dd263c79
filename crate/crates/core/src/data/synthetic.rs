//! Latent-cluster CTR data with a known posterior.
//!
//! Each record draws a latent cluster, then one token per field from that
//! cluster's distribution. The click logit is an intercept plus per-token
//! main effects plus pairwise cross effects between fields. Both kinds of
//! effect are shared by tokens with the same home cluster, up to a small
//! token-specific perturbation. The exact
//! `P(y = 1 | features)` is available for every record.

use super::schema::{Dataset, DatasetSchema, Sample, Split};
use crate::error::DataError;
use crate::numeric::rng::{hash3, StreamRng};
use crate::numeric::tensor::sigmoid;

/// Pairwise effect table between fields `a < b`, row-major `[vocab_a, vocab_b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossTable {
    pub field_a: usize,
    pub field_b: usize,
    pub weights: Vec<f64>,
}

/// Fully explicit generator tables.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_sizes: Vec<usize>,
    pub cluster_prior: Vec<f64>,
    /// `[field][cluster][token]`.
    pub token_dists: Vec<Vec<Vec<f64>>>,
    /// `[field][token]`.
    pub main_effects: Vec<Vec<f64>>,
    pub cross: Vec<CrossTable>,
    pub intercept: f64,
    pub seed: u64,
    pub num_samples: usize,
}

/// Knobs from which [`SyntheticSpec`] tables are derived deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub num_fields: usize,
    pub vocab_size: usize,
    pub clusters: usize,
    pub num_samples: usize,
    pub seed: u64,
    /// Log-odds boost of a token inside its home cluster.
    pub cluster_sharpness: f64,
    /// Zipf exponent of base token popularity.
    pub zipf: f64,
    /// Scale of cluster-level main effects.
    pub main_scale: f64,
    /// Scale of cluster-level cross effects.
    pub cross_scale: f64,
    /// Scale of token-specific noise on top of the cluster-level main and
    /// cross effects.
    pub token_noise: f64,
    /// Extra cross weight for token pairs sharing a home cluster.
    pub affinity: f64,
    pub intercept: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            num_fields: 8,
            vocab_size: 50,
            clusters: 10,
            num_samples: 60_000,
            seed: 20_240_601,
            cluster_sharpness: 3.0,
            zipf: 0.8,
            main_scale: 0.5,
            cross_scale: 0.02,
            token_noise: 0.01,
            affinity: 0.07,
            intercept: -0.5,
        }
    }
}

const PROB_TOL: f64 = 1e-9;

impl SyntheticSpec {
    pub fn from_params(p: &SyntheticParams) -> Result<Self, DataError> {
        if p.num_fields == 0 || p.vocab_size == 0 || p.clusters == 0 || p.num_samples == 0 {
            return Err(DataError::Synthetic(
                "fields, vocab size, clusters and samples must be positive".into(),
            ));
        }
        let (n, v, c) = (p.num_fields, p.vocab_size, p.clusters);
        let table_rng = |label: u64| StreamRng::new(p.seed, hash3(0x7AB1E, label, 0));

        // home cluster of each token: balanced assignment under a random permutation
        let mut home = vec![vec![0usize; v]; n];
        let mut popularity = vec![vec![0.0; v]; n];
        for f in 0..n {
            let mut order: Vec<usize> = (0..v).collect();
            table_rng(1000 + f as u64).shuffle(&mut order);
            for (rank, &tok) in order.iter().enumerate() {
                home[f][tok] = rank % c;
                popularity[f][tok] = 1.0 / ((rank / c) as f64 + 1.0).powf(p.zipf);
            }
        }
        let boost = p.cluster_sharpness.exp();
        let token_dists = (0..n)
            .map(|f| {
                (0..c)
                    .map(|cl| {
                        let w: Vec<f64> = (0..v)
                            .map(|t| popularity[f][t] * if home[f][t] == cl { boost } else { 1.0 })
                            .collect();
                        let z: f64 = w.iter().sum();
                        w.into_iter().map(|x| x / z).collect()
                    })
                    .collect()
            })
            .collect();
        let main_effects = (0..n)
            .map(|f| {
                let mut r = table_rng(2000 + f as u64);
                let block: Vec<f64> = (0..c).map(|_| p.main_scale * r.normal()).collect();
                (0..v).map(|t| block[home[f][t]] + p.token_noise * r.normal()).collect()
            })
            .collect();
        let mut cross = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let mut r = table_rng(3000 + (a * n + b) as u64);
                let block: Vec<f64> = (0..c * c)
                    .map(|ij| p.cross_scale * r.normal() + if ij / c == ij % c { p.affinity } else { 0.0 })
                    .collect();
                let weights = (0..v * v)
                    .map(|ij| {
                        let (ta, tb) = (ij / v, ij % v);
                        block[home[a][ta] * c + home[b][tb]] + p.token_noise * r.normal()
                    })
                    .collect();
                cross.push(CrossTable {
                    field_a: a,
                    field_b: b,
                    weights,
                });
            }
        }
        let spec = Self {
            vocab_sizes: vec![v; n],
            cluster_prior: vec![1.0 / c as f64; c],
            token_dists,
            main_effects,
            cross,
            intercept: p.intercept,
            seed: p.seed,
            num_samples: p.num_samples,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with no effects at all: uniform tokens, single cluster, logit = intercept.
    pub fn flat(num_fields: usize, vocab: usize, intercept: f64, seed: u64, num_samples: usize) -> Self {
        Self {
            vocab_sizes: vec![vocab; num_fields],
            cluster_prior: vec![1.0],
            token_dists: vec![vec![vec![1.0 / vocab as f64; vocab]]; num_fields],
            main_effects: vec![vec![0.0; vocab]; num_fields],
            cross: Vec::new(),
            intercept,
            seed,
            num_samples,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.vocab_sizes.len();
        let c = self.cluster_prior.len();
        let bad = |m: String| Err(DataError::Synthetic(m));
        if n == 0 || c == 0 || self.num_samples == 0 {
            return bad("empty spec".into());
        }
        check_dist(&self.cluster_prior, "cluster prior")?;
        if self.token_dists.len() != n || self.main_effects.len() != n {
            return bad("per-field tables do not match field count".into());
        }
        for (f, dists) in self.token_dists.iter().enumerate() {
            if dists.len() != c {
                return bad(format!("field {f}: {} cluster rows, expected {c}", dists.len()));
            }
            for (cl, d) in dists.iter().enumerate() {
                if d.len() != self.vocab_sizes[f] {
                    return bad(format!("field {f} cluster {cl}: wrong vocabulary length"));
                }
                check_dist(d, &format!("field {f} cluster {cl}"))?;
            }
            if self.main_effects[f].len() != self.vocab_sizes[f] {
                return bad(format!("field {f}: main effect length mismatch"));
            }
        }
        for t in &self.cross {
            if t.field_a >= t.field_b || t.field_b >= n {
                return bad(format!("cross table ({}, {}) invalid", t.field_a, t.field_b));
            }
            if t.weights.len() != self.vocab_sizes[t.field_a] * self.vocab_sizes[t.field_b] {
                return bad(format!("cross table ({}, {}) wrong size", t.field_a, t.field_b));
            }
        }
        let finite = self.main_effects.iter().flatten().all(|x| x.is_finite())
            && self.cross.iter().flat_map(|t| &t.weights).all(|x| x.is_finite())
            && self.intercept.is_finite();
        if !finite {
            return bad("non-finite effect".into());
        }
        Ok(())
    }

    /// Generating logit of a feature vector.
    pub fn logit(&self, features: &[usize]) -> f64 {
        let mut z = self.intercept;
        for (f, &t) in features.iter().enumerate() {
            z += self.main_effects[f][t];
        }
        for t in &self.cross {
            let vb = self.vocab_sizes[t.field_b];
            z += t.weights[features[t.field_a] * vb + features[t.field_b]];
        }
        z
    }

    pub fn posterior(&self, features: &[usize]) -> f64 {
        sigmoid(self.logit(features))
    }

    pub fn schema(&self) -> Result<DatasetSchema, DataError> {
        DatasetSchema::new(
            self.vocab_sizes
                .iter()
                .enumerate()
                .map(|(i, &v)| (format!("f{i}"), v)),
        )
    }
}

fn check_dist(d: &[f64], what: &str) -> Result<(), DataError> {
    if d.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(DataError::Synthetic(format!("{what}: negative or non-finite probability")));
    }
    let s: f64 = d.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(DataError::Synthetic(format!("{what}: sums to {s}, not 1")));
    }
    Ok(())
}

/// Draws the dataset (split tag `Train`) and each record's exact click posterior.
/// Session ids are the first field's token, so every record carries one.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Vec<f64>), DataError> {
    spec.validate()?;
    let schema = spec.schema()?;
    let mut samples = Vec::with_capacity(spec.num_samples);
    let mut bayes = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let mut rng = StreamRng::new(spec.seed, hash3(0x5A4D_91E5, i as u64, 1));
        let cluster = rng.categorical(&spec.cluster_prior);
        let mut tokens: Vec<usize> = spec
            .token_dists
            .iter()
            .map(|d| rng.categorical(&d[cluster]))
            .collect();
        let p = spec.posterior(&tokens);
        let label = usize::from(rng.next_f64() < p);
        tokens.push(label);
        let session = format!("s{}", tokens[0]);
        samples.push(Sample::new(tokens).with_session(session));
        bayes.push(p);
    }
    Ok((Dataset::new(schema, samples, Split::Train)?, bayes))
}

/// Deterministic 80/10/10 partition: records are ordered by a keyed hash of
/// their index and cut at exact counts; each split keeps original order.
pub fn split_indices(n: usize, seed: u64) -> [Vec<usize>; 3] {
    let mut order: Vec<(u64, usize)> = (0..n).map(|i| (hash3(seed, 0x5B11_7, i as u64), i)).collect();
    order.sort_unstable();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for (rank, &(_, i)) in order.iter().enumerate() {
        let part = if rank < n_train {
            0
        } else if rank < n_train + n_valid {
            1
        } else {
            2
        };
        parts[part].push(i);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

/// Train/validation/test datasets plus their posteriors.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub bayes_train: Vec<f64>,
    pub bayes_validation: Vec<f64>,
    pub bayes_test: Vec<f64>,
}

pub fn split_synthetic(dataset: &Dataset, bayes: &[f64], seed: u64) -> Result<SplitData, DataError> {
    let [tr, va, te] = split_indices(dataset.len(), seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| bayes[i]).collect::<Vec<_>>();
    Ok(SplitData {
        train: dataset.subset(&tr, Split::Train)?,
        validation: dataset.subset(&va, Split::Validation)?,
        test: dataset.subset(&te, Split::Test)?,
        bayes_train: pick(&tr),
        bayes_validation: pick(&va),
        bayes_test: pick(&te),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_spec_is_a_fair_coin() {
        let spec = SyntheticSpec::flat(3, 5, 0.0, 9, 20_000);
        let (ds, bayes) = generate_synthetic(&spec).unwrap();
        assert!(bayes.iter().all(|&b| b == 0.5));
        let n = ds.len() as f64;
        let rate = ds.positive_rate();
        assert!((rate - 0.5).abs() < 3.0 * (0.25 / n).sqrt(), "rate {rate}");
    }

    #[test]
    fn dominant_cross_term_saturates_posterior() {
        let mut spec = SyntheticSpec::flat(2, 3, 0.0, 4, 2_000);
        let mut w = vec![0.0; 9];
        w[1 * 3 + 2] = 10.0;
        spec.cross.push(CrossTable {
            field_a: 0,
            field_b: 1,
            weights: w,
        });
        let (ds, bayes) = generate_synthetic(&spec).unwrap();
        let mut hits = 0;
        for (s, &b) in ds.samples().iter().zip(&bayes) {
            if s.tokens[0] == 1 && s.tokens[1] == 2 {
                hits += 1;
                assert!(b > 0.999);
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn rejects_unnormalized_tables() {
        let mut spec = SyntheticSpec::flat(2, 3, 0.0, 1, 10);
        spec.token_dists[1][0][0] += 0.1;
        assert!(matches!(generate_synthetic(&spec), Err(DataError::Synthetic(_))));
        let mut spec = SyntheticSpec::flat(2, 3, 0.0, 1, 10);
        spec.cluster_prior = vec![0.5, 0.6];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_posterior_is_a_function_of_tokens() {
        let params = SyntheticParams {
            num_samples: 3_000,
            ..SyntheticParams::default()
        };
        let spec = SyntheticSpec::from_params(&params).unwrap();
        let (a, ba) = generate_synthetic(&spec).unwrap();
        let (b, bb) = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ba, bb);
        let mut seen = std::collections::HashMap::new();
        for (s, &p) in a.samples().iter().zip(&ba) {
            let prev = seen.insert(s.features().to_vec(), p);
            if let Some(prev) = prev {
                assert_eq!(prev, p);
            }
        }
    }

    #[test]
    fn split_counts_are_exact() {
        let [tr, va, te] = split_indices(60_000, 3);
        assert_eq!((tr.len(), va.len(), te.len()), (48_000, 6_000, 6_000));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60_000).collect::<Vec<_>>());
        assert_eq!(split_indices(60_000, 3)[1], va);
    }
}
