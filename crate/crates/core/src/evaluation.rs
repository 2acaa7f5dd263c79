//! Ranking and calibration metrics, their quadratic-time references, the
//! Mann-Whitney U test, and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::Error;

/// Scores are clipped to `[LOGLOSS_CLIP, 1 − LOGLOSS_CLIP]` before the log.
pub const LOGLOSS_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    pub score: f64,
    pub label: usize,
    pub session_id: Option<String>,
    pub weight: f64,
}

impl ScoredExample {
    pub fn new(score: f64, label: usize) -> Self {
        Self {
            score,
            label,
            session_id: None,
            weight: 1.0,
        }
    }
}

/// Pairs scores with a dataset's labels, weights and sessions.
pub fn scored_examples(scores: &[f64], dataset: &Dataset) -> Vec<ScoredExample> {
    scores
        .iter()
        .zip(dataset.samples())
        .map(|(&score, s)| ScoredExample {
            score,
            label: s.label(),
            session_id: s.session_id.clone(),
            weight: s.weight,
        })
        .collect()
}

fn check(examples: &[ScoredExample]) -> Result<(), Error> {
    for e in examples {
        if !e.score.is_finite() {
            return Err(Error::Metric(format!("non-finite score {}", e.score)));
        }
        if !(e.weight > 0.0 && e.weight.is_finite()) {
            return Err(Error::Metric(format!("weight {} must be positive", e.weight)));
        }
        if e.label > 1 {
            return Err(Error::Metric(format!("label {} not binary", e.label)));
        }
    }
    Ok(())
}

/// Weighted, tie-aware AUC: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` over
/// weight-product pairs. Sorting makes it `O(n log n)`.
pub fn auc(examples: &[ScoredExample]) -> Result<f64, Error> {
    check(examples)?;
    let mut order: Vec<&ScoredExample> = examples.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    let (mut neg_below, mut num) = (0.0, 0.0);
    let (mut pos_total, mut neg_total) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0.0, 0.0);
        while j < order.len() && order[j].score == order[i].score {
            if order[j].label == 1 {
                pos += order[j].weight;
            } else {
                neg += order[j].weight;
            }
            j += 1;
        }
        num += pos * (neg_below + 0.5 * neg);
        neg_below += neg;
        pos_total += pos;
        neg_total += neg;
        i = j;
    }
    if pos_total == 0.0 || neg_total == 0.0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    Ok(num / (pos_total * neg_total))
}

/// Pairwise reference for [`auc`].
pub fn auc_brute_force(examples: &[ScoredExample]) -> Result<f64, Error> {
    check(examples)?;
    let (mut num, mut den) = (0.0, 0.0);
    for p in examples.iter().filter(|e| e.label == 1) {
        for n in examples.iter().filter(|e| e.label == 0) {
            let w = p.weight * n.weight;
            den += w;
            if p.score > n.score {
                num += w;
            } else if p.score == n.score {
                num += 0.5 * w;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    Ok(num / den)
}

/// Weighted mean binary cross-entropy with clipped scores.
pub fn logloss(examples: &[ScoredExample]) -> Result<f64, Error> {
    check(examples)?;
    if examples.is_empty() {
        return Err(Error::Metric("logloss of no examples".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for e in examples {
        let s = e.score.clamp(LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP);
        let l = if e.label == 1 { -s.ln() } else { -(1.0 - s).ln() };
        num += e.weight * l;
        den += e.weight;
    }
    Ok(num / den)
}

fn sessions(examples: &[ScoredExample]) -> Result<BTreeMap<&str, Vec<ScoredExample>>, Error> {
    let mut out: BTreeMap<&str, Vec<ScoredExample>> = BTreeMap::new();
    for e in examples {
        let id = e
            .session_id
            .as_deref()
            .ok_or_else(|| Error::Metric("GAUC needs a session id on every example".into()))?;
        out.entry(id).or_default().push(e.clone());
    }
    Ok(out)
}

fn gauc_with(examples: &[ScoredExample], f: fn(&[ScoredExample]) -> Result<f64, Error>) -> Result<f64, Error> {
    check(examples)?;
    let (mut num, mut den) = (0.0, 0.0);
    for group in sessions(examples)?.values() {
        let has_both = group.iter().any(|e| e.label == 1) && group.iter().any(|e| e.label == 0);
        if !has_both {
            continue;
        }
        let impressions = group.len() as f64;
        num += impressions * f(group)?;
        den += impressions;
    }
    if den == 0.0 {
        return Err(Error::Metric("no session contains both classes".into()));
    }
    Ok(num / den)
}

/// Impression-weighted mean of per-session AUCs. Sessions with a single
/// class are left out of numerator and denominator.
pub fn gauc_pv(examples: &[ScoredExample]) -> Result<f64, Error> {
    gauc_with(examples, auc)
}

/// [`gauc_pv`] with pairwise per-session AUCs.
pub fn gauc_pv_brute_force(examples: &[ScoredExample]) -> Result<f64, Error> {
    gauc_with(examples, auc_brute_force)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub auc: f64,
    pub logloss: f64,
    pub gauc_pv: Option<f64>,
    pub count: usize,
}

/// AUC, logloss, and GAUC when every example has a session.
pub fn evaluate(examples: &[ScoredExample]) -> Result<MetricReport, Error> {
    let gauc = if examples.iter().all(|e| e.session_id.is_some()) {
        gauc_pv(examples).ok()
    } else {
        None
    };
    Ok(MetricReport {
        auc: auc(examples)?,
        logloss: logloss(examples)?,
        gauc_pv: gauc,
        count: examples.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks of the pooled sample, 1-based.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Largest pooled size for which the permutation distribution of U is enumerated.
pub const MANN_WHITNEY_EXACT_MAX: usize = 20;

/// Two-sided Mann-Whitney U test. Small samples use the exact permutation
/// distribution over midranks (valid with ties); larger ones the normal
/// approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, Error> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::Metric("Mann-Whitney needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Metric("Mann-Whitney samples must be finite".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let u = r1 - offset;
    let mean = (n1 * n2) as f64 / 2.0;
    let dev = (u - mean).abs();
    let n = n1 + n2;
    if n <= MANN_WHITNEY_EXACT_MAX {
        // enumerate all n1-subsets of the pooled ranks
        let (mut hits, mut total) = (0u64, 0u64);
        let mut chosen = Vec::with_capacity(n1);
        fn walk(
            start: usize,
            need: usize,
            ranks: &[f64],
            chosen: &mut Vec<usize>,
            f: &mut dyn FnMut(&[usize]),
        ) {
            if need == 0 {
                f(chosen);
                return;
            }
            for i in start..=ranks.len() - need {
                chosen.push(i);
                walk(i + 1, need - 1, ranks, chosen, f);
                chosen.pop();
            }
        }
        walk(0, n1, &ranks, &mut chosen, &mut |c| {
            let s: f64 = c.iter().map(|&i| ranks[i]).sum();
            total += 1;
            if (s - offset - mean).abs() >= dev - 1e-9 {
                hits += 1;
            }
        });
        return Ok(MannWhitney {
            u,
            p_value: hits as f64 / total as f64,
            exact: true,
        });
    }
    let mut tie_term = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let nf = n as f64;
    let var = (n1 * n2) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney {
            u,
            p_value: 1.0,
            exact: false,
        });
    }
    let z = ((dev - 0.5).max(0.0)) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(MannWhitney {
        u,
        p_value: (2.0 * normal.sf(z)).min(1.0),
        exact: false,
    })
}

/// One metric value of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub config_id: String,
    pub seed: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub config_id: String,
    pub split: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (zero for a single run).
    pub std: f64,
    pub runs: usize,
}

/// Mean and standard deviation per `(config, split, metric)`, in first-seen order.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    let mut values: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.config_id.clone(), r.split.clone(), r.metric.clone());
        if !values.contains_key(&key) {
            keys.push(key.clone());
        }
        values.entry(key).or_default().push(r.value);
    }
    keys.into_iter()
        .map(|key| {
            let v = &values[&key];
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                config_id: key.0,
                split: key.1,
                metric: key.2,
                mean,
                std,
                runs: v.len(),
            }
        })
        .collect()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Metric(format!("{}: {e}", path.display()))
}

/// Writes `config_id,seed,split,metric,value` rows.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["config_id", "seed", "split", "metric", "value"])
        .map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([
            r.config_id.clone(),
            r.seed.to_string(),
            r.split.clone(),
            r.metric.clone(),
            format!("{:?}", r.value),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads rows written by [`write_report`].
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        if rec.len() != 5 {
            return Err(io_err(path, format!("expected 5 columns, found {}", rec.len())));
        }
        out.push(ReportRow {
            config_id: rec[0].to_string(),
            seed: rec[1].parse().map_err(|e| io_err(path, e))?,
            split: rec[2].to_string(),
            metric: rec[3].to_string(),
            value: rec[4].parse().map_err(|e| io_err(path, e))?,
        });
    }
    Ok(out)
}

/// Writes `config_id,split,metric,mean,std,runs` summary rows.
pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["config_id", "split", "metric", "mean", "std", "runs"])
        .map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([
            r.config_id.clone(),
            r.split.clone(),
            r.metric.clone(),
            format!("{:?}", r.mean),
            format!("{:?}", r.std),
            r.runs.to_string(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Fixed-width `mean ± std` table for terminals.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.config_id.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:<10}  {:<8}  {:>20}  runs", "config", "split", "metric", "mean ± std");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:<10}  {:<8}  {:>9.5} ± {:<8.5}  {}",
            r.config_id, r.split, r.metric, r.mean, r.std, r.runs
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(scores: &[f64], labels: &[usize]) -> Vec<ScoredExample> {
        scores.iter().zip(labels).map(|(&s, &l)| ScoredExample::new(s, l)).collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&ex(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auc(&ex(&[0.3; 4], &[0, 1, 0, 1])).unwrap(), 0.5);
        assert_eq!(auc(&ex(&[0.1, 0.4, 0.4, 0.8], &[0, 0, 1, 1])).unwrap(), 0.875);
        assert!(auc(&ex(&[0.1, 0.4], &[1, 1])).is_err());
    }

    #[test]
    fn logloss_examples() {
        let l = logloss(&ex(&[0.5, 0.5], &[0, 1])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = logloss(&ex(&[0.9, 0.2], &[1, 0])).unwrap();
        assert!((l - (-(0.9f64).ln() - (0.8f64).ln()) / 2.0).abs() < 1e-15);
        assert!(logloss(&ex(&[1.0, 0.0], &[1, 0])).unwrap() < 1e-6);
    }

    #[test]
    fn gauc_examples() {
        let mut e = ex(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]);
        e.extend(ex(&[0.5; 4], &[0, 1, 0, 1]));
        e.extend(ex(&[0.5, 0.7], &[1, 1]));
        for (i, x) in e.iter_mut().enumerate() {
            x.session_id = Some(["a", "b", "c"][(i / 4).min(2)].into());
        }
        assert_eq!(gauc_pv(&e).unwrap(), 0.75);
        assert!(gauc_pv(&e[8..]).is_err());
    }

    #[test]
    fn mann_whitney_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [6.0, 7.0, 8.0, 9.0, 10.0];
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p_value - 2.0 / 252.0).abs() < 1e-15);
        let same = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn mann_whitney_normal_branch() {
        let a: Vec<f64> = (0..15).map(f64::from).collect();
        let b: Vec<f64> = (10..25).map(f64::from).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value < 0.01);
    }

    #[test]
    fn summary_mean_std() {
        let rows: Vec<ReportRow> = [1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| ReportRow {
                config_id: "full".into(),
                seed: i as u64,
                split: "test".into(),
                metric: "auc".into(),
                value: v,
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean, 2.0);
        assert_eq!(s[0].std, 1.0);
    }
}
