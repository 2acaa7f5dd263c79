//! Per-field noise schedules.
//!
//! Each field `k` has a cumulative noise `σ̄ᵏ(t)` and a mask probability
//! `λᵏ(t) = 1 − exp(−σ̄ᵏ(t))` on the horizon `t ∈ [0, T]`. The default
//! schedule is linear in `λ`; a log-linear `σ̄` alternative is available.

use crate::error::ScheduleError;
use crate::numeric::rng::StreamRng;

/// Largest admissible mask probability, keeping `1/(1 − λ)` finite.
pub const LAMBDA_CAP: f64 = 1.0 - 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    /// `λ(t) = λ_min + (λ_max − λ_min)·t/T`.
    #[default]
    LinearLambda,
    /// `σ̄(t)` linear between `−ln(1 − λ_min)` and `−ln(1 − λ_max)`.
    LogLinear,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::LinearLambda => "linear_lambda",
            ScheduleKind::LogLinear => "log_linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear_lambda" => Some(ScheduleKind::LinearLambda),
            "log_linear" => Some(ScheduleKind::LogLinear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaRange {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl LambdaRange {
    pub fn new(lambda_min: f64, lambda_max: f64) -> Result<Self, ScheduleError> {
        if !(0.0..LAMBDA_CAP).contains(&lambda_min)
            || !(lambda_min < lambda_max && lambda_max <= LAMBDA_CAP)
        {
            return Err(ScheduleError::Invalid(format!(
                "need 0 <= lambda_min < lambda_max <= 1 - 1e-4, got [{lambda_min}, {lambda_max}]"
            )));
        }
        Ok(Self {
            lambda_min,
            lambda_max,
        })
    }

    pub fn full() -> Self {
        Self {
            lambda_min: 0.0,
            lambda_max: LAMBDA_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    horizon: u32,
    fields: Vec<LambdaRange>,
    shared: Option<LambdaRange>,
}

impl NoiseSchedule {
    /// One range per field (features then label).
    pub fn per_field(kind: ScheduleKind, horizon: u32, fields: Vec<LambdaRange>) -> Result<Self, ScheduleError> {
        if horizon == 0 {
            return Err(ScheduleError::Invalid("horizon T must be positive".into()));
        }
        if fields.is_empty() {
            return Err(ScheduleError::Invalid("no fields".into()));
        }
        for r in &fields {
            LambdaRange::new(r.lambda_min, r.lambda_max)?;
        }
        Ok(Self {
            kind,
            horizon,
            fields,
            shared: None,
        })
    }

    /// Every field follows the same range.
    pub fn uniform(kind: ScheduleKind, horizon: u32, num_fields: usize, range: LambdaRange) -> Result<Self, ScheduleError> {
        Self::per_field(kind, horizon, vec![range; num_fields])
    }

    /// Replaces every per-field schedule with one unified schedule.
    pub fn into_shared(mut self, range: LambdaRange) -> Result<Self, ScheduleError> {
        LambdaRange::new(range.lambda_min, range.lambda_max)?;
        self.shared = Some(range);
        Ok(self)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn is_shared(&self) -> bool {
        self.shared.is_some()
    }

    pub fn range(&self, k: usize) -> Result<LambdaRange, ScheduleError> {
        match self.shared {
            Some(r) if k < self.fields.len() => Ok(r),
            _ => self.fields.get(k).copied().ok_or(ScheduleError::UnknownField(k)),
        }
    }

    fn check_t(&self, t: f64) -> Result<f64, ScheduleError> {
        if !(0.0..=self.horizon as f64).contains(&t) {
            return Err(ScheduleError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(t / self.horizon as f64)
    }

    /// `λᵏ(t)`.
    pub fn mask_prob(&self, k: usize, t: f64) -> Result<f64, ScheduleError> {
        let s = self.check_t(t)?;
        let r = self.range(k)?;
        Ok(match self.kind {
            ScheduleKind::LinearLambda => r.lambda_min + (r.lambda_max - r.lambda_min) * s,
            ScheduleKind::LogLinear => {
                let lo = -(-r.lambda_min).ln_1p();
                let hi = -(-r.lambda_max).ln_1p();
                -(-(lo + (hi - lo) * s)).exp_m1()
            }
        })
    }

    /// `σ̄ᵏ(t) = −ln(1 − λᵏ(t))`.
    pub fn cumulative_sigma(&self, k: usize, t: f64) -> Result<f64, ScheduleError> {
        let s = self.check_t(t)?;
        let r = self.range(k)?;
        Ok(match self.kind {
            ScheduleKind::LinearLambda => {
                lambda_to_sigma_bar(r.lambda_min + (r.lambda_max - r.lambda_min) * s)
            }
            ScheduleKind::LogLinear => {
                let lo = lambda_to_sigma_bar(r.lambda_min);
                let hi = lambda_to_sigma_bar(r.lambda_max);
                lo + (hi - lo) * s
            }
        })
    }

    /// Instantaneous rate `σᵏ(t) = dσ̄ᵏ/dt`.
    pub fn sigma(&self, k: usize, t: f64) -> Result<f64, ScheduleError> {
        let lambda = self.mask_prob(k, t)?;
        let r = self.range(k)?;
        let horizon = self.horizon as f64;
        Ok(match self.kind {
            ScheduleKind::LinearLambda => (r.lambda_max - r.lambda_min) / horizon / (1.0 - lambda),
            ScheduleKind::LogLinear => {
                (lambda_to_sigma_bar(r.lambda_max) - lambda_to_sigma_bar(r.lambda_min)) / horizon
            }
        })
    }

    /// Draws a step `t ∈ {1, …, T}` uniformly.
    pub fn sample_step(&self, rng: &mut StreamRng) -> u32 {
        1 + rng.below(self.horizon as usize) as u32
    }

    /// Mask probability of every field at one shared random step.
    pub fn sample_lambda(&self, rng: &mut StreamRng) -> Vec<f64> {
        let t = self.sample_step(rng) as f64;
        (0..self.fields.len())
            .map(|k| self.mask_prob(k, t).expect("t in range"))
            .collect()
    }
}

pub fn lambda_to_sigma_bar(lambda: f64) -> f64 {
    -(-lambda).ln_1p()
}

pub fn sigma_bar_to_lambda(sigma_bar: f64) -> f64 {
    -(-sigma_bar).exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(lo: f64, hi: f64) -> NoiseSchedule {
        NoiseSchedule::uniform(ScheduleKind::LinearLambda, 500, 3, LambdaRange::new(lo, hi).unwrap()).unwrap()
    }

    #[test]
    fn zero_time_zero_noise() {
        let s = linear(0.0, 0.99);
        assert_eq!(s.cumulative_sigma(0, 0.0).unwrap(), 0.0);
        assert_eq!(s.mask_prob(0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn half_mask_is_ln2() {
        assert!((lambda_to_sigma_bar(0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((sigma_bar_to_lambda(std::f64::consts::LN_2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn boundary_values() {
        let s = linear(0.0, 0.99);
        assert!((s.cumulative_sigma(1, 500.0).unwrap() - 4.605_170_185_988_091).abs() < 1e-12);
        assert_eq!(s.mask_prob(2, 500.0).unwrap(), 0.99);
        assert!((s.mask_prob(2, 250.0).unwrap() - 0.495).abs() < 1e-15);
        assert!(s.mask_prob(0, 500.5).is_err());
        assert!(s.mask_prob(0, -1.0).is_err());
        assert!(s.mask_prob(3, 1.0).is_err());
    }

    #[test]
    fn rate_integrates_to_cumulative() {
        for kind in [ScheduleKind::LinearLambda, ScheduleKind::LogLinear] {
            let s = NoiseSchedule::uniform(kind, 100, 1, LambdaRange::new(0.05, 0.95).unwrap()).unwrap();
            // Simpson's rule on [0, 60]
            let n = 600;
            let h = 60.0 / n as f64;
            let mut acc = s.sigma(0, 0.0).unwrap() + s.sigma(0, 60.0).unwrap();
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * s.sigma(0, i as f64 * h).unwrap();
            }
            let integral = acc * h / 3.0;
            let delta = s.cumulative_sigma(0, 60.0).unwrap() - s.cumulative_sigma(0, 0.0).unwrap();
            assert!((integral - delta).abs() < 1e-9, "{kind:?}: {integral} vs {delta}");
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(LambdaRange::new(0.5, 0.5).is_err());
        assert!(LambdaRange::new(0.0, 1.0).is_err());
        assert!(LambdaRange::new(-0.1, 0.5).is_err());
        assert!(NoiseSchedule::uniform(ScheduleKind::LinearLambda, 0, 1, LambdaRange::full()).is_err());
    }

    #[test]
    fn shared_schedule_gives_equal_entries() {
        let ranges = vec![
            LambdaRange::new(0.0, 0.5).unwrap(),
            LambdaRange::new(0.0, 0.9).unwrap(),
            LambdaRange::new(0.1, 0.7).unwrap(),
        ];
        let per_field = NoiseSchedule::per_field(ScheduleKind::LinearLambda, 50, ranges).unwrap();
        let mut rng = StreamRng::new(1, 2);
        let l = per_field.sample_lambda(&mut rng);
        assert!(l[0] != l[1] || l[1] != l[2]);
        let shared = per_field.into_shared(LambdaRange::full()).unwrap();
        let l = shared.sample_lambda(&mut rng);
        assert!(l.iter().all(|&x| x == l[0]));
    }
}
