use dgenctr::corruption::{
    chain_path_oracle, corrupt, exact_kernel, joint_marginal_oracle, score_ratio_oracle, simulate_chain,
    AbsorbingKernel, CorruptionOptions, JointDist,
};
use dgenctr::data::{DatasetSchema, Sample};
use dgenctr::numeric::StreamRng;
use dgenctr::schedule::{lambda_to_sigma_bar, sigma_bar_to_lambda};
use proptest::prelude::*;

/// Transition matrix of the absorbing chain after cumulative noise `s`,
/// by RK4 integration of dP/ds = P·Q from the identity.
fn kernel_by_ode(v: usize, s: f64) -> Vec<Vec<f64>> {
    let n = v + 1;
    let mut q = vec![vec![0.0; n]; n];
    for (i, row) in q.iter_mut().enumerate().take(v) {
        row[i] = -1.0;
        row[v] = 1.0;
    }
    let deriv = |p: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    out[i][j] += p[i][k] * q[k][j];
                }
            }
        }
        out
    };
    let axpy = |p: &Vec<Vec<f64>>, d: &Vec<Vec<f64>>, h: f64| -> Vec<Vec<f64>> {
        p.iter()
            .zip(d)
            .map(|(r, dr)| r.iter().zip(dr).map(|(a, b)| a + h * b).collect())
            .collect()
    };
    let mut p: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    if s == 0.0 {
        return p;
    }
    let steps = (s / 1e-3).ceil() as usize;
    let h = s / steps as f64;
    for _ in 0..steps {
        let k1 = deriv(&p);
        let k2 = deriv(&axpy(&p, &k1, h / 2.0));
        let k3 = deriv(&axpy(&p, &k2, h / 2.0));
        let k4 = deriv(&axpy(&p, &k3, h));
        for i in 0..n {
            for j in 0..n {
                p[i][j] += h / 6.0 * (k1[i][j] + 2.0 * k2[i][j] + 2.0 * k3[i][j] + k4[i][j]);
            }
        }
    }
    p
}

#[test]
fn closed_form_kernel_matches_ode_integration() {
    for v in [1, 2, 5, 16] {
        for s in [0.0, 0.1, std::f64::consts::LN_2, 2.3, 10.0] {
            let oracle = kernel_by_ode(v, s);
            let closed = AbsorbingKernel::closed_form(v, s);
            for (i, row) in oracle.iter().enumerate() {
                for (j, &want) in row.iter().enumerate() {
                    let got = closed.get(i, j);
                    assert!((got - want).abs() < 1e-10, "V={v} s={s} ({i},{j}): {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn matrix_exponential_kernel_matches_ode_integration() {
    for v in [3, 9] {
        for s in [0.4, 4.0] {
            let oracle = kernel_by_ode(v, s);
            let k = exact_kernel(v, s);
            for (i, row) in oracle.iter().enumerate() {
                for (j, &want) in row.iter().enumerate() {
                    assert!((k.get(i, j) - want).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn half_mask_at_ln2() {
    let k = AbsorbingKernel::closed_form(4, std::f64::consts::LN_2);
    assert!((k.get(2, 2) - 0.5).abs() < 1e-15);
    assert!((k.get(2, 4) - 0.5).abs() < 1e-15);
    assert!((lambda_to_sigma_bar(0.5) - std::f64::consts::LN_2).abs() < 1e-15);
}

proptest! {
    #[test]
    fn lambda_sigma_round_trip(l in 0.0f64..0.9999) {
        prop_assert!((sigma_bar_to_lambda(lambda_to_sigma_bar(l)) - l).abs() < 1e-12);
    }

    #[test]
    fn kernel_rows_are_distributions(v in 1usize..20, s in 0.0f64..20.0) {
        let k = AbsorbingKernel::closed_form(v, s);
        for i in 0..=v {
            let row = k.row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // the mask state is absorbing
        prop_assert_eq!(k.get(v, v), 1.0);
    }
}

#[test]
fn one_shot_mask_rate_matches_lambda() {
    let schema = DatasetSchema::uniform(9, 7).unwrap();
    let sample = Sample::new(vec![3, 1, 4, 1, 5, 2, 6, 0, 2, 1]);
    let lambdas = vec![0.5; 10];
    let n = 100_000;
    let mut counts = [0usize; 10];
    let root = StreamRng::new(11, 0);
    for i in 0..n {
        let c = corrupt(&sample, &schema, &lambdas, &mut root.fork(i), &CorruptionOptions::default());
        for &k in &c.masked {
            counts[k] += 1;
            assert_eq!(c.tokens[k], schema.mask_id(k));
        }
        for k in 0..10 {
            if !c.is_masked(k) {
                assert_eq!(c.tokens[k], sample.tokens[k]);
            }
        }
    }
    let sd = (0.25 / n as f64).sqrt();
    for (k, &c) in counts.iter().enumerate() {
        let rate = c as f64 / n as f64;
        assert!((rate - 0.5).abs() <= 4.0 * sd, "field {k}: {rate}");
    }
}

#[test]
fn chain_simulation_never_unmasks() {
    let vocab = vec![3, 5, 2];
    let path: Vec<Vec<f64>> = (1..=30).map(|i| vec![0.05 * i as f64, 0.1 * i as f64, 0.02 * i as f64]).collect();
    let mut rng = StreamRng::new(5, 5);
    for _ in 0..2000 {
        let start = vec![rng.below(3), rng.below(5), rng.below(2)];
        let traj = simulate_chain(&start, &vocab, &path, &mut rng);
        let mut prev = start.clone();
        for state in traj {
            for k in 0..3 {
                if prev[k] == vocab[k] {
                    assert_eq!(state[k], vocab[k]);
                } else {
                    assert!(state[k] == prev[k] || state[k] == vocab[k]);
                }
            }
            prev = state;
        }
    }
}

/// Brute force: each field independently stays with prob e^{-s} or masks.
fn brute_marginal(p0: &JointDist, sig: &[f64], state: &[usize]) -> f64 {
    let vocab = p0.vocab_sizes();
    p0.iter()
        .map(|(x, p)| {
            let mut w = p;
            for k in 0..x.len() {
                let keep = (-sig[k]).exp();
                w *= if state[k] == vocab[k] {
                    1.0 - keep
                } else if state[k] == x[k] {
                    keep
                } else {
                    0.0
                };
            }
            w
        })
        .sum()
}

fn all_states(vocab: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &v in vocab {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..=v).map(move |t| {
                    let mut s = s.clone();
                    s.push(t);
                    s
                })
            })
            .collect();
    }
    out
}

#[test]
fn factorized_marginal_matches_brute_force_and_chain() {
    let mut rng = StreamRng::new(77, 0);
    for _ in 0..25 {
        let vocab: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(3)).collect();
        let p0 = JointDist::random(vocab.clone(), &mut rng).unwrap();
        let sig: Vec<f64> = vocab.iter().map(|_| 2.0 * rng.next_f64()).collect();
        let m = joint_marginal_oracle(&p0, &sig).unwrap();
        for s in all_states(&vocab) {
            assert!((m.prob(&s) - brute_marginal(&p0, &sig, &s)).abs() < 1e-12);
        }
        let path = vec![sig.iter().map(|s| s / 3.0).collect(), sig.iter().map(|s| s * 0.5).collect(), sig.clone()];
        let chain = chain_path_oracle(&p0, &path).unwrap();
        assert!(m.total_variation(&chain) < 1e-9);
    }
}

#[test]
fn score_ratio_on_correlated_pair() {
    // p(0,0)=0.4, p(0,1)=0.1, p(1,0)=0.2, p(1,1)=0.3
    let p0 = JointDist::new(vec![2, 2], vec![0.4, 0.1, 0.2, 0.3]).unwrap();
    let sig = [0.7, 1.3];
    // both masked -> unmask both to (1,1)
    let r = score_ratio_oracle(&p0, &sig, &[2, 2], &[1, 1]).unwrap();
    let pre: f64 = sig.iter().map(|s| (-s).exp() / (1.0 - (-s).exp())).product();
    assert!((r.product_form - pre * 0.3).abs() < 1e-12);
    assert!((r.direct - r.product_form).abs() / r.direct < 1e-9);
    // per-field product uses marginals 0.5 and 0.4, which differ from the joint
    assert!((r.factorized_form - pre * 0.5 * 0.4).abs() < 1e-12);
    // field 0 observed as 1, unmask field 1 to 0: conditional 0.2/0.5
    let r = score_ratio_oracle(&p0, &sig, &[1, 2], &[1, 0]).unwrap();
    assert!((r.conditional - 0.4).abs() < 1e-12);
}
