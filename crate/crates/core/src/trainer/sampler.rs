//! Diagnostic ancestral sampler running the masking process backwards.

use crate::data::Sample;
use crate::error::Error;
use crate::model::Model;
use crate::numeric::StreamRng;
use crate::schedule::NoiseSchedule;

/// Draws one record. Fields fixed in `conditioning` stay as given; the
/// rest start masked and are unmasked over `steps` steps so that the
/// expected masked fraction retraces the forward schedule. Whatever is
/// still masked at the last step is drawn then.
pub fn sample_reverse(
    model: &Model,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &StreamRng,
    conditioning: &[Option<usize>],
) -> Result<Sample, Error> {
    Ok(sample_reverse_batch(model, schedule, steps, rng, conditioning, 1)?.remove(0))
}

/// `n` independent draws; draw `i` uses `rng.fork(i)`, so results do not
/// depend on `n`.
pub fn sample_reverse_batch(
    model: &Model,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &StreamRng,
    conditioning: &[Option<usize>],
    n: usize,
) -> Result<Vec<Sample>, Error> {
    let cfg = &model.config;
    let f = cfg.num_fields();
    if steps == 0 {
        return Err(Error::Usage("sample_reverse needs at least one step".into()));
    }
    if conditioning.len() != f || schedule.num_fields() != f {
        return Err(Error::Usage(format!(
            "conditioning and schedule must cover {f} fields"
        )));
    }
    let mut rngs: Vec<StreamRng> = (0..n).map(|i| rng.fork(i as u64)).collect();
    let mut states: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            conditioning
                .iter()
                .enumerate()
                .map(|(k, c)| c.unwrap_or(cfg.vocab_sizes[k]))
                .collect()
        })
        .collect();
    let horizon = f64::from(schedule.horizon());
    for step in 0..steps {
        let t_hi = horizon * (steps - step) as f64 / steps as f64;
        let t_lo = horizon * (steps - step - 1) as f64 / steps as f64;
        let last = step + 1 == steps;
        // decide every reveal of this step before any token is drawn
        let mut reveal: Vec<Vec<usize>> = vec![Vec::new(); f];
        for (i, state) in states.iter().enumerate() {
            for k in 0..f {
                if state[k] != cfg.vocab_sizes[k] {
                    continue;
                }
                let p = if last {
                    1.0
                } else {
                    let hi = schedule.mask_prob(k, t_hi)?;
                    let lo = schedule.mask_prob(k, t_lo)?;
                    if hi > 0.0 {
                        (hi - lo) / hi
                    } else {
                        1.0
                    }
                };
                if rngs[i].next_f64() < p {
                    reveal[k].push(i);
                }
            }
        }
        let snapshot = states.clone();
        for (k, rows) in reveal.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let ctx: Vec<&[usize]> = rows.iter().map(|&i| snapshot[i].as_slice()).collect();
            let dists = model.field_distribution(&ctx, k)?;
            for (&i, d) in rows.iter().zip(dists) {
                states[i][k] = rngs[i].categorical(&d);
            }
        }
    }
    Ok(states.into_iter().map(Sample::new).collect())
}
