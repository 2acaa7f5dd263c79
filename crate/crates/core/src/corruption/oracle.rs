//! Exact references for the absorbing chain on tiny state spaces.
//!
//! States of a field with vocabulary `V` are `0..V` plus the mask `V`. Joint
//! states over several fields are stored row-major with the last field
//! varying fastest.

use crate::error::Error;
use crate::numeric::StreamRng;
use crate::schedule::sigma_bar_to_lambda;

fn oracle_err(msg: impl Into<String>) -> Error {
    Error::Oracle(msg.into())
}

/// Transition matrix `exp(σ̄·Q_absorb)` for one field, `(V+1) × (V+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorbingKernel {
    vocab_size: usize,
    matrix: Vec<f64>,
}

impl AbsorbingKernel {
    /// The analytic form: keep with `e^{−σ̄}`, jump to mask with `1 − e^{−σ̄}`.
    pub fn closed_form(vocab_size: usize, sigma_bar: f64) -> Self {
        let n = vocab_size + 1;
        let keep = (-sigma_bar).exp();
        let jump = sigma_bar_to_lambda(sigma_bar);
        let mut matrix = vec![0.0; n * n];
        for i in 0..vocab_size {
            matrix[i * n + i] = keep;
            matrix[i * n + vocab_size] = jump;
        }
        matrix[n * n - 1] = 1.0;
        Self { vocab_size, matrix }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.matrix[from * self.dim() + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        let n = self.dim();
        &self.matrix[from * n..(from + 1) * n]
    }

    pub fn max_abs_diff(&self, other: &AbsorbingKernel) -> f64 {
        self.matrix
            .iter()
            .zip(&other.matrix)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Rate matrix of the absorbing process: `−1` on real-token diagonals,
/// `+1` into the mask column, mask row zero.
pub fn absorbing_rate_matrix(vocab_size: usize) -> Vec<f64> {
    let n = vocab_size + 1;
    let mut q = vec![0.0; n * n];
    for i in 0..vocab_size {
        q[i * n + i] = -1.0;
        q[i * n + vocab_size] = 1.0;
    }
    q
}

fn square_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Matrix exponential of `σ̄·Q_absorb` by scaling and squaring a truncated
/// Taylor series. Independent of the closed form.
pub fn exact_kernel(vocab_size: usize, sigma_bar: f64) -> AbsorbingKernel {
    let n = vocab_size + 1;
    let q = absorbing_rate_matrix(vocab_size);
    // ‖σ̄Q‖∞ = 2σ̄; scale until the series argument has norm ≤ 1/2
    let mut squarings = 0u32;
    while 2.0 * sigma_bar / f64::from(1u32 << squarings) > 0.5 {
        squarings += 1;
    }
    let scale = sigma_bar / f64::from(1u32 << squarings);
    let a: Vec<f64> = q.iter().map(|x| x * scale).collect();
    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=30 {
        term = square_matmul(&term, &a, n);
        let inv_k = 1.0 / k as f64;
        for x in term.iter_mut() {
            *x *= inv_k;
        }
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..squarings {
        result = square_matmul(&result, &result, n);
    }
    AbsorbingKernel {
        vocab_size,
        matrix: result,
    }
}

fn num_states(sizes: &[usize]) -> usize {
    sizes.iter().product()
}

fn decode(mut index: usize, sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for (o, &s) in out.iter_mut().zip(sizes).rev() {
        *o = index % s;
        index /= s;
    }
    out
}

fn encode(state: &[usize], sizes: &[usize]) -> usize {
    state.iter().zip(sizes).fold(0, |acc, (&x, &s)| acc * s + x)
}

/// An explicit clean joint distribution over a few small fields.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDist {
    vocab_sizes: Vec<usize>,
    probs: Vec<f64>,
}

impl JointDist {
    pub const MAX_FIELDS: usize = 3;
    pub const MAX_VOCAB: usize = 4;

    pub fn new(vocab_sizes: Vec<usize>, probs: Vec<f64>) -> Result<Self, Error> {
        if vocab_sizes.is_empty() || vocab_sizes.len() > Self::MAX_FIELDS {
            return Err(oracle_err(format!(
                "joint needs 1..={} fields, got {}",
                Self::MAX_FIELDS,
                vocab_sizes.len()
            )));
        }
        if vocab_sizes.iter().any(|&v| v == 0 || v > Self::MAX_VOCAB) {
            return Err(oracle_err(format!("vocab sizes {vocab_sizes:?} outside 1..=4")));
        }
        if probs.len() != num_states(&vocab_sizes) {
            return Err(oracle_err(format!(
                "expected {} probabilities, got {}",
                num_states(&vocab_sizes),
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(oracle_err("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(oracle_err(format!("joint sums to {total}, not 1")));
        }
        Ok(Self { vocab_sizes, probs })
    }

    /// Random joint with strictly positive entries.
    pub fn random(vocab_sizes: Vec<usize>, rng: &mut StreamRng) -> Result<Self, Error> {
        let n = num_states(&vocab_sizes);
        let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.next_f64()).collect();
        let total: f64 = raw.iter().sum();
        let mut probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // absorb the rounding residue so the sum check holds tightly
        let residue = 1.0 - probs.iter().sum::<f64>();
        probs[0] += residue;
        Self::new(vocab_sizes, probs)
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn num_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn prob(&self, tokens: &[usize]) -> f64 {
        self.probs[encode(tokens, &self.vocab_sizes)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (decode(i, &self.vocab_sizes), p))
    }

    /// Marginal probability that the fields with `Some(token)` take those tokens.
    pub fn marginal(&self, pattern: &[Option<usize>]) -> f64 {
        self.iter()
            .filter(|(x, _)| pattern.iter().zip(x).all(|(p, &t)| p.is_none_or(|v| v == t)))
            .map(|(_, p)| p)
            .sum()
    }
}

/// A distribution over corrupted joint states (token or mask per field).
#[derive(Debug, Clone, PartialEq)]
pub struct StateDist {
    vocab_sizes: Vec<usize>,
    probs: Vec<f64>,
}

impl StateDist {
    fn state_sizes(vocab_sizes: &[usize]) -> Vec<usize> {
        vocab_sizes.iter().map(|v| v + 1).collect()
    }

    pub fn prob(&self, state: &[usize]) -> f64 {
        self.probs[encode(state, &Self::state_sizes(&self.vocab_sizes))]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        let sizes = Self::state_sizes(&self.vocab_sizes);
        self.probs
            .iter()
            .enumerate()
            .map(move |(i, &p)| (decode(i, &sizes), p))
    }

    pub fn total_variation(&self, other: &StateDist) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// Probability that field `k` is masked.
    pub fn mask_rate(&self, k: usize) -> f64 {
        let mask = self.vocab_sizes[k];
        self.iter().filter(|(s, _)| s[k] == mask).map(|(_, p)| p).sum()
    }
}

fn check_sigmas(p0: &JointDist, sigma_bars: &[f64]) -> Result<(), Error> {
    if sigma_bars.len() != p0.num_fields() {
        return Err(oracle_err(format!(
            "{} noise levels for {} fields",
            sigma_bars.len(),
            p0.num_fields()
        )));
    }
    if sigma_bars.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(oracle_err("noise levels must be finite and nonnegative"));
    }
    Ok(())
}

fn unmasked_pattern(state: &[usize], vocab_sizes: &[usize]) -> Vec<Option<usize>> {
    state
        .iter()
        .zip(vocab_sizes)
        .map(|(&s, &v)| (s < v).then_some(s))
        .collect()
}

/// Corrupted-state distribution in product form: masked fields contribute
/// `1 − e^{−σ̄ⁱ}`, unmasked ones `e^{−σ̄ʲ}`, times the clean marginal of the
/// unmasked coordinates.
pub fn joint_marginal_oracle(p0: &JointDist, sigma_bars: &[f64]) -> Result<StateDist, Error> {
    check_sigmas(p0, sigma_bars)?;
    let sizes = StateDist::state_sizes(p0.vocab_sizes());
    let probs = (0..num_states(&sizes))
        .map(|i| {
            let state = decode(i, &sizes);
            let pattern = unmasked_pattern(&state, p0.vocab_sizes());
            let mut weight = 1.0;
            for (k, u) in pattern.iter().enumerate() {
                weight *= match u {
                    None => sigma_bar_to_lambda(sigma_bars[k]),
                    Some(_) => (-sigma_bars[k]).exp(),
                };
            }
            weight * p0.marginal(&pattern)
        })
        .collect();
    Ok(StateDist {
        vocab_sizes: p0.vocab_sizes().to_vec(),
        probs,
    })
}

/// Propagates `p0` through a discretized chain by summing over every path.
///
/// `sigma_path[s][k]` is the cumulative noise of field `k` at the end of step
/// `s`; the chain starts at zero noise. Each step applies the matrix
/// exponential of the noise increment.
pub fn chain_path_oracle(p0: &JointDist, sigma_path: &[Vec<f64>]) -> Result<StateDist, Error> {
    if sigma_path.is_empty() {
        return Err(oracle_err("chain needs at least one step"));
    }
    let vocab = p0.vocab_sizes();
    let sizes = StateDist::state_sizes(vocab);
    let n_states = num_states(&sizes);
    let mut prev = vec![0.0; vocab.len()];
    let mut dist = vec![0.0; n_states];
    for (tokens, p) in p0.iter() {
        dist[encode(&tokens, &sizes)] = p;
    }
    for step in sigma_path {
        check_sigmas(p0, step)?;
        let kernels: Vec<AbsorbingKernel> = vocab
            .iter()
            .zip(step.iter().zip(&prev))
            .map(|(&v, (&now, &before))| {
                if now < before {
                    Err(oracle_err("cumulative noise must be nondecreasing"))
                } else {
                    Ok(exact_kernel(v, now - before))
                }
            })
            .collect::<Result<_, _>>()?;
        let mut next = vec![0.0; n_states];
        for (from, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let a = decode(from, &sizes);
            for (to, slot) in next.iter_mut().enumerate() {
                let b = decode(to, &sizes);
                let w: f64 = kernels
                    .iter()
                    .enumerate()
                    .map(|(k, kern)| kern.get(a[k], b[k]))
                    .product();
                *slot += p * w;
            }
        }
        dist = next;
        prev = step.clone();
    }
    Ok(StateDist {
        vocab_sizes: vocab.to_vec(),
        probs: dist,
    })
}

/// Samples one forward trajectory of a clean record through the discretized
/// chain. Returns the state after each step.
pub fn simulate_chain(
    tokens: &[usize],
    vocab_sizes: &[usize],
    sigma_path: &[Vec<f64>],
    rng: &mut StreamRng,
) -> Vec<Vec<usize>> {
    let mut state = tokens.to_vec();
    let mut prev = vec![0.0; tokens.len()];
    let mut out = Vec::with_capacity(sigma_path.len());
    for step in sigma_path {
        for k in 0..state.len() {
            let kern = AbsorbingKernel::closed_form(vocab_sizes[k], step[k] - prev[k]);
            state[k] = rng.categorical(kern.row(state[k]));
        }
        prev = step.clone();
        out.push(state.clone());
    }
    out
}

/// Both sides of the score-ratio identity for one unmasking proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRatio {
    /// `p_t(X̂)/p_t(X)` from the corrupted-state distribution.
    pub direct: f64,
    /// `∏ e^{−σ̄ᵏ}/(1 − e^{−σ̄ᵏ})` times the joint clean conditional of the
    /// unmasked tokens given the observed context.
    pub product_form: f64,
    /// The same prefactor times the product of single-field conditionals.
    /// Equal to `product_form` when one field is unmasked or the proposed
    /// fields are conditionally independent given the context.
    pub factorized_form: f64,
    /// Joint clean conditional recovered from `direct` by dividing out the
    /// noise prefactor.
    pub conditional: f64,
    /// Fields that change from mask to a token.
    pub unmasked: Vec<usize>,
}

/// Evaluates the score ratio between a corrupted state and a proposal that
/// unmasks some of its masked fields.
pub fn score_ratio_oracle(
    p0: &JointDist,
    sigma_bars: &[f64],
    state: &[usize],
    proposal: &[usize],
) -> Result<ScoreRatio, Error> {
    check_sigmas(p0, sigma_bars)?;
    let vocab = p0.vocab_sizes();
    if state.len() != vocab.len() || proposal.len() != vocab.len() {
        return Err(oracle_err("state length differs from field count"));
    }
    let mut unmasked = Vec::new();
    for k in 0..vocab.len() {
        if state[k] > vocab[k] || proposal[k] > vocab[k] {
            return Err(oracle_err(format!("field {k} token outside its state space")));
        }
        if state[k] != proposal[k] {
            if state[k] != vocab[k] || proposal[k] == vocab[k] {
                return Err(oracle_err(format!(
                    "field {k}: proposal must only unmask, got {} -> {}",
                    state[k], proposal[k]
                )));
            }
            unmasked.push(k);
        }
    }
    let dist = joint_marginal_oracle(p0, sigma_bars)?;
    let denom = dist.prob(state);
    if denom <= 0.0 {
        return Err(oracle_err("state has zero probability"));
    }
    let direct = dist.prob(proposal) / denom;
    let prefactor: f64 = unmasked
        .iter()
        .map(|&k| (-sigma_bars[k]).exp() / sigma_bar_to_lambda(sigma_bars[k]))
        .product();
    let context = unmasked_pattern(state, vocab);
    let context_mass = p0.marginal(&context);
    let joint_cond = p0.marginal(&unmasked_pattern(proposal, vocab)) / context_mass;
    let per_field: f64 = unmasked
        .iter()
        .map(|&k| {
            let mut with_k = context.clone();
            with_k[k] = Some(proposal[k]);
            p0.marginal(&with_k) / context_mass
        })
        .product();
    Ok(ScoreRatio {
        direct,
        product_form: prefactor * joint_cond,
        factorized_form: prefactor * per_field,
        conditional: direct / prefactor,
        unmasked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_is_identity() {
        let k = exact_kernel(4, 0.0);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(k.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn ln2_kernel_halves() {
        let k = exact_kernel(3, std::f64::consts::LN_2);
        for i in 0..3 {
            assert!((k.get(i, i) - 0.5).abs() < 1e-12);
            assert!((k.get(i, 3) - 0.5).abs() < 1e-12);
        }
        assert_eq!(k.row(3), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn series_matches_closed_form() {
        let a = exact_kernel(8, 2.3);
        let b = AbsorbingKernel::closed_form(8, 2.3);
        assert!(a.max_abs_diff(&b) < 1e-10);
        for i in 0..9 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unnormalized_joint_rejected() {
        assert!(JointDist::new(vec![2], vec![0.5, 0.6]).is_err());
        assert!(JointDist::new(vec![2, 2, 2, 2], vec![1.0 / 16.0; 16]).is_err());
    }

    #[test]
    fn fully_masked_state_ignores_p0() {
        let mut rng = StreamRng::new(5, 0);
        let p0 = JointDist::random(vec![2, 3], &mut rng).unwrap();
        let d = joint_marginal_oracle(&p0, &[0.4, 1.7]).unwrap();
        let expect = sigma_bar_to_lambda(0.4) * sigma_bar_to_lambda(1.7);
        assert!((d.prob(&[2, 3]) - expect).abs() < 1e-15);
    }

    #[test]
    fn correlated_binary_conditional() {
        let p0 = JointDist::new(vec![2, 2], vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        let r = score_ratio_oracle(&p0, &[0.3, 0.9], &[0, 2], &[0, 0]).unwrap();
        assert!((r.conditional - 0.8).abs() < 1e-12);
        assert!((r.direct - r.product_form).abs() < 1e-12);
    }

    #[test]
    fn non_unmasking_proposal_rejected() {
        let p0 = JointDist::new(vec![2, 2], vec![0.25; 4]).unwrap();
        assert!(score_ratio_oracle(&p0, &[0.3, 0.3], &[0, 1], &[1, 1]).is_err());
        assert!(score_ratio_oracle(&p0, &[0.3, 0.3], &[0, 1], &[0, 2]).is_err());
    }
}
