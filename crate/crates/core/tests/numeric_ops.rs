use dgenctr::numeric::{
    forward_backward, grad_check, xavier_init, Graph, ParamStore, StreamRng, Tensor, Var,
};
use dgenctr::error::NumericError;
use proptest::prelude::*;

fn random_tensor(shape: &[usize], seed: u64, stream: u64, shift: f64) -> Tensor {
    let mut rng = StreamRng::new(seed, stream);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.normal() * 0.7 + shift).collect(),
    )
    .unwrap()
}

fn assert_all_pass(reports: &[dgenctr::numeric::GradCheckReport]) {
    for r in reports {
        assert!(
            r.passed,
            "{} failed: rel err {:.3e} at {}",
            r.param, r.max_rel_error, r.worst_index
        );
    }
}

#[test]
fn quadratic_gradient() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::vector(vec![3.0, 4.0]));
    let (loss, grads) = forward_backward(&p, |g| {
        let w = g.param("w")?;
        let sq = g.mul(w, w)?;
        g.sum(sq)
    })
    .unwrap();
    assert_eq!(loss, 25.0);
    assert_eq!(grads.get("w").unwrap().data(), &[6.0, 8.0]);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::vector(vec![1.0, 2.0]));
    p.insert("unused", Tensor::vector(vec![5.0; 3]));
    let (_, grads) = forward_backward(&p, |g| {
        let w = g.param("w")?;
        g.sum(w)
    })
    .unwrap();
    assert!(grads.get("unused").unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn shape_mismatch_names_both_operands() {
    let mut p = ParamStore::new();
    p.insert("a", Tensor::zeros(&[2, 3]));
    p.insert("b", Tensor::zeros(&[2, 3]));
    let err = forward_backward(&p, |g| {
        let a = g.param("a")?;
        let b = g.param("b")?;
        g.matmul(a, b)
    })
    .unwrap_err();
    match err {
        NumericError::ShapeMismatch {
            op,
            lhs_name,
            rhs_name,
            ..
        } => {
            assert_eq!(op, "matmul");
            assert!(lhs_name.contains("`a`") && rhs_name.contains("`b`"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_loss_names_op() {
    let mut p = ParamStore::new();
    p.insert("a", Tensor::vector(vec![0.0, 1.0]));
    let err = forward_backward(&p, |g| {
        let a = g.param("a")?;
        let l = g.ln(a)?;
        g.sum(l)
    })
    .unwrap_err();
    assert_eq!(err, NumericError::NonFinite { op: "log" });
}

/// Three dense layers with every elementwise op, reductions and row ops.
fn composite(g: &mut Graph<'_>, x: &Tensor) -> Result<Var, NumericError> {
    let x = g.constant(x.clone())?;
    let w1 = g.param("w1")?;
    let b1 = g.param("b1")?;
    let w2 = g.param("w2")?;
    let w3 = g.param("w3")?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, w2)?;
    let s = g.sigmoid(h)?;
    let e = g.exp(s)?;
    let l = g.ln(e)?; // round trip keeps values positive-friendly
    let sp = g.softplus(h)?;
    let mixed = g.mul(l, sp)?;
    let mixed = g.sub(mixed, h)?;
    let z = g.matmul(mixed, w3)?;
    let lse = g.log_sum_exp_rows(z, None)?;
    let n = g.l2_normalize_rows(mixed)?;
    let c = g.row_dot(n, n)?;
    let t = g.add(lse, c)?;
    let t = g.scale(t, 0.7)?;
    g.mean(t)
}

#[test]
fn composite_matches_finite_differences() {
    let mut p = ParamStore::new();
    p.insert("w1", xavier_init(&[5, 6], 1, 0).unwrap());
    // positive bias keeps ReLU inputs away from the kink
    p.insert("b1", Tensor::vector(vec![0.5; 6]));
    p.insert("w2", xavier_init(&[6, 4], 1, 1).unwrap());
    p.insert("w3", xavier_init(&[4, 3], 1, 2).unwrap());
    let x = random_tensor(&[7, 5], 3, 0, 0.5);
    let reports = grad_check(&p, |g| composite(g, &x), 1e-5, 1e-5, None);
    assert_all_pass(&reports);
}

#[test]
fn attention_and_norm_ops_match_finite_differences() {
    let (groups, seq, d, heads) = (3, 4, 6, 2);
    let mut p = ParamStore::new();
    p.insert("x", random_tensor(&[groups * seq, d], 8, 0, 0.0));
    p.insert("wq", xavier_init(&[d, d], 2, 0).unwrap());
    p.insert("wk", xavier_init(&[d, d], 2, 1).unwrap());
    p.insert("gain", random_tensor(&[d], 9, 1, 1.0));
    p.insert("table", random_tensor(&[5, d], 9, 2, 0.0));
    let target = random_tensor(&[groups * seq, d], 4, 4, 0.0);
    let build = |g: &mut Graph<'_>| {
        let x = g.param("x")?;
        let n = g.layer_norm_rows(x)?;
        let gain = g.param("gain")?;
        let n = g.mul_row(n, gain)?;
        let wq = g.param("wq")?;
        let wk = g.param("wk")?;
        let q = g.matmul(n, wq)?;
        let k = g.matmul(n, wk)?;
        let s = g.attn_scores(q, k, heads, seq)?;
        let pr = g.softmax_rows(s)?;
        let o = g.attn_apply(pr, n, heads, seq)?;
        let table = g.param("table")?;
        let idx: Vec<(usize, usize)> = (0..groups * seq).map(|r| (0, (r * 3) % 5)).collect();
        let emb = g.gather(&[table], &idx)?;
        let o = g.add(o, emb)?;
        let t = g.constant(target.clone())?;
        let logits = g.matmul_nt(o, t)?;
        let mask: Vec<bool> = (0..groups * seq * groups * seq).map(|i| i % 3 != 1).collect();
        let lse = g.log_sum_exp_rows(logits, Some(mask))?;
        let picks: Vec<usize> = (0..groups * seq).map(|r| (r / 3) * 3).collect();
        let pick = g.pick_rows(logits, &picks)?;
        let nll = g.sub(lse, pick)?;
        let w = g.constant(Tensor::vector((0..groups * seq).map(|i| 1.0 + i as f64 * 0.1).collect()))?;
        let col = g.mul(nll, w)?;
        g.sum(col)
    };
    let reports = grad_check(&p, build, 1e-5, 1e-5, None);
    assert_all_pass(&reports);
}

#[test]
fn mul_col_and_cosine_match_finite_differences() {
    let mut p = ParamStore::new();
    p.insert("a", random_tensor(&[4, 3], 1, 0, 0.0));
    p.insert("b", random_tensor(&[4, 3], 1, 1, 0.0));
    p.insert("w", random_tensor(&[4], 1, 2, 0.0));
    let reports = grad_check(
        &p,
        |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            let w = g.param("w")?;
            let scaled = g.mul_col(a, w)?;
            // cosine is scale-free per row, so mix in `b` before normalizing
            let mixed = g.add(scaled, b)?;
            let cos = g.cosine_rows(mixed, b)?;
            g.sum(cos)
        },
        1e-5,
        1e-5,
        None,
    );
    assert_all_pass(&reports);
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let mut p = ParamStore::new();
    p.insert("w1", xavier_init(&[5, 6], 4, 0).unwrap());
    p.insert("b1", Tensor::vector(vec![0.1; 6]));
    p.insert("w2", xavier_init(&[6, 4], 4, 1).unwrap());
    p.insert("w3", xavier_init(&[4, 3], 4, 2).unwrap());
    let x = random_tensor(&[7, 5], 6, 0, 0.0);
    let (l1, g1) = forward_backward(&p, |g| composite(g, &x)).unwrap();
    let (l2, g2) = forward_backward(&p, |g| composite(g, &x)).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #[test]
    fn log_sum_exp_shift(xs in prop::collection::vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0) {
        let p = ParamStore::new();
        let n = xs.len();
        let eval = |shift: f64| {
            let data: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            dgenctr::numeric::forward_value(&p, |g| {
                let t = g.constant(Tensor::matrix(1, n, data.clone()).unwrap())?;
                let l = g.log_sum_exp_rows(t, None)?;
                g.sum(l)
            }).unwrap()
        };
        prop_assert!((eval(c) - eval(0.0) - c).abs() < 1e-12);
    }

    #[test]
    fn cosine_in_unit_interval(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        let p = ParamStore::new();
        let c = dgenctr::numeric::forward_value(&p, |g| {
            let x = g.constant(Tensor::matrix(1, 4, a.clone()).unwrap())?;
            let y = g.constant(Tensor::matrix(1, 4, b.clone()).unwrap())?;
            let c = g.cosine_rows(x, y)?;
            g.sum(c)
        }).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}
