use dgenctr::data::{generate_synthetic, split_synthetic, SyntheticParams, SyntheticSpec};
use dgenctr::evaluation::{auc, ScoredExample};

#[test]
fn default_generator_has_learnable_but_noisy_signal() {
    let params = SyntheticParams::default();
    let spec = SyntheticSpec::from_params(&params).unwrap();
    let (ds, bayes) = generate_synthetic(&spec).unwrap();
    assert_eq!(ds.len(), params.num_samples);
    let split = split_synthetic(&ds, &bayes, params.seed).unwrap();
    let ex: Vec<ScoredExample> = split
        .test
        .samples()
        .iter()
        .zip(&split.bayes_test)
        .map(|(s, &p)| ScoredExample::new(p, s.label()))
        .collect();
    let a = auc(&ex).unwrap();
    // regression value for the pinned defaults
    assert!((a - 0.7914).abs() < 5e-4, "bayes auc {a}");
    let rate = ds.positive_rate();
    assert!((0.3..0.6).contains(&rate), "positive rate {rate}");
}
