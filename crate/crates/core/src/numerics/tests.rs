use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::*;
use crate::error::{Error, Result};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(rng: &mut Xoshiro256StarStar, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    t(shape, &data)
}

/// Central finite differences over every element of every input, compared
/// against the analytic gradient from `backward`.
fn check_gradients<B>(inputs: &[Tensor<f64>], build: B)
where
    B: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    const EPS: f64 = 1e-5;
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.leaf_tracked(v, false)).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.leaf_tracked(v, true)).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[which]).unwrap().to_vec();
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += EPS;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel <= 1e-4,
                "input {which} element {i}: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    }
}

/// Reduces a non-scalar output to a scalar with fixed random weights so
/// every output element influences the loss differently.
fn weighted_sum<'g>(g: &mut Graph<'g, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let w = random(&mut rng, &shape, -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let col = g.input(t(&[2, 1], &[5.0, 6.0]));
    let id = g.matmul(eye, col).unwrap();
    assert_eq!(g.value(id).data(), &[5.0, 6.0]);

    let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(a, col).unwrap();
    assert_eq!(g.value(p).data(), &[17.0, 39.0]);

    let z = g.input(Tensor::zeros([2, 3]));
    let mut rng = Xoshiro256StarStar::seed_from_u64(1);
    let any = g.input(random(&mut rng, &[3, 4], -5.0, 5.0));
    let zp = g.matmul(z, any).unwrap();
    assert_eq!(g.value(zp).shape(), &[2, 4]);
    assert!(g.value(zp).data().iter().all(|&x| x == 0.0));

    assert!(matches!(g.matmul(a, any), Err(Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[0.0, 0.0]));
    let s = g.softmax(x, None).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.input(t(&[4], &[0.0; 4]));
    let s = g.softmax(x, Some(&[true, true, false, false])).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.0, 0.0]);

    let x = g.input(t(&[2], &[1.0, 0.0]));
    let s = g.softmax(x, None).unwrap();
    let e = std::f64::consts::E;
    let expect = [e / (e + 1.0), 1.0 / (e + 1.0)];
    for (a, b) in g.value(s).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((g.value(s).data()[0] - 0.7311).abs() < 1e-4);

    let x = g.input(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(g.softmax(x, Some(&[false; 3])), Err(Error::InvalidMask)));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.input(Tensor::zeros([1, 256]));
    let ce = g.cross_entropy(logits, &[17], None).unwrap();
    assert!((g.value(ce).item().unwrap() - 256f64.ln()).abs() < 1e-12);
    assert!((g.value(ce).item().unwrap() - 5.5452).abs() < 1e-4);

    let mut sharp = vec![0.0; 8];
    sharp[3] = 50.0;
    let logits = g.input(t(&[1, 8], &sharp));
    let ce = g.cross_entropy(logits, &[3], None).unwrap();
    assert!(g.value(ce).item().unwrap() < 1e-15);

    let logits = g.input(Tensor::zeros([4, 2]));
    let ce = g.cross_entropy(logits, &[0, 1, 1, 0], None).unwrap();
    assert!((g.value(ce).item().unwrap() - 2f64.ln()).abs() < 1e-12);

    let mask = [true, false];
    assert!(matches!(
        g.cross_entropy(logits, &[0, 1, 0, 0], Some(&mask)),
        Err(Error::Target { position: 1, reason: "masked", .. })
    ));
    assert!(matches!(
        g.cross_entropy(logits, &[0, 2, 0, 0], None),
        Err(Error::Target { reason: "out of range", .. })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = t(&[2, 3], &[0.1, -0.4, 1.2, 0.0, 0.3, -0.2]);
    let mut g = Graph::new();
    let l = g.leaf_tracked(&logits, true);
    let ce = g.cross_entropy(l, &[2, 0], None).unwrap();
    g.backward(ce).unwrap();
    let grad = g.grad(l).unwrap().to_vec();
    for r in 0..2 {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        let target = [2, 0][r];
        for c in 0..3 {
            let expect = (row[c].exp() / z - if c == target { 1.0 } else { 0.0 }) / 2.0;
            assert!((grad[r * 3 + c] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_examples() {
    // loss = sum(x · W) has dW[i][j] = Σ_rows x[r][i].
    let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let w = t(&[3, 2], &[0.5; 6]).with_grad();
    let mut g = Graph::new();
    let xv = g.input(x);
    let wv = g.leaf(&w);
    let y = g.matmul(xv, wv).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(wv).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);

    // A loss that ignores W leaves dW at zero.
    let mut g = Graph::new();
    let wv = g.leaf(&w);
    let c = g.input(t(&[2], &[1.0, 2.0]).with_grad());
    let loss = g.sum(c).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(wv).unwrap(), &[0.0; 6]);
}

#[test]
fn second_backward_is_stale() {
    let w = t(&[2], &[1.0, 2.0]).with_grad();
    let mut g = Graph::new();
    let wv = g.leaf(&w);
    let loss = g.sum(wv).unwrap();
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(Error::StaleGraph)));
}

#[test]
fn backward_needs_a_scalar() {
    let w = t(&[2], &[1.0, 2.0]).with_grad();
    let mut g = Graph::new();
    let wv = g.leaf(&w);
    assert!(matches!(g.backward(wv), Err(Error::NotScalar(_))));
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut g = Graph::new();
    let x = g.input(t(&[1], &[800.0]));
    assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn layer_norm_of_constant_row_is_bias() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([1, 4]));
    let gain = g.input(t(&[4], &[2.0; 4]));
    let bias = g.input(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn wkv_with_vanishing_decay_is_memoryless() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(4);
    let (r, k, v) = (
        random(&mut rng, &[3, 2], -1.0, 1.0),
        random(&mut rng, &[3, 2], -1.0, 1.0),
        random(&mut rng, &[3, 2], -1.0, 1.0),
    );
    let mut g = Graph::new();
    let (rv, kv, vv) = (g.input(r.clone()), g.input(k.clone()), g.input(v.clone()));
    let decay = g.input(t(&[2], &[-800.0, -800.0]));
    let o = g.wkv(rv, kv, vv, decay, &[3]).unwrap();
    // With sigmoid(decay) == 0 the state is v_t k_tᵀ, so o_t = v_t (k_t · r_t).
    for step in 0..3 {
        let kr: f64 = k.row(step).iter().zip(r.row(step)).map(|(a, b)| a * b).sum();
        for i in 0..2 {
            assert!((g.value(o).row(step)[i] - v.row(step)[i] * kr).abs() < 1e-15);
        }
    }
}

#[test]
fn wkv_matches_the_plain_recurrence() {
    let (d, segments) = (3, [70usize, 1, 33]);
    let rows: usize = segments.iter().sum();
    let mut rng = Xoshiro256StarStar::seed_from_u64(5);
    let (r, k, v) = (
        random(&mut rng, &[rows, d], -1.0, 1.0),
        random(&mut rng, &[rows, d], -1.0, 1.0),
        random(&mut rng, &[rows, d], -1.0, 1.0),
    );
    let w = random(&mut rng, &[d], -1.0, 3.0);
    let mut g = Graph::new();
    let (rv, kv, vv, wv) = (g.input(r.clone()), g.input(k.clone()), g.input(v.clone()), g.input(w.clone()));
    let o = g.wkv(rv, kv, vv, wv, &segments).unwrap();
    let mut start = 0;
    for len in segments {
        let mut s = vec![vec![0.0; d]; d];
        for t in start..start + len {
            for i in 0..d {
                let decay = 1.0 / (1.0 + (-w.data()[i]).exp());
                let mut out = 0.0;
                for j in 0..d {
                    s[i][j] = decay * s[i][j] + v.row(t)[i] * k.row(t)[j];
                    out += s[i][j] * r.row(t)[j];
                }
                assert!((g.value(o).row(t)[i] - out).abs() < 1e-12, "row {t} column {i}");
            }
        }
        start += len;
    }
}

#[test]
fn topk_renorm_example() {
    let mut g = Graph::new();
    let s = g.input(t(&[1, 3], &[0.5, 0.3, 0.2]));
    let w = g.topk_renorm(s, &[true, true, false]).unwrap();
    let got = g.value(w).data();
    assert!((got[0] - 0.625).abs() < 1e-12 && (got[1] - 0.375).abs() < 1e-12 && got[2] == 0.0);
}

#[test]
fn cv_squared_examples() {
    assert_eq!(cv_squared(&[3.0f64, 3.0, 3.0]), Some(0.0));
    assert!((cv_squared(&[2.0f64, 1.0, 1.0]).unwrap() - 0.125).abs() < 1e-15);
    assert!((cv_squared(&[5.0f64, 5.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(cv_squared(&[0.0f64, 0.0]), None);
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = Xoshiro256StarStar::seed_from_u64(9);
        let a = random(&mut rng, &[5, 7], -1.0, 1.0);
        let b = random(&mut rng, &[7, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let (av, bv) = (g.input(a), g.input(b));
        let p = g.matmul(av, bv).unwrap();
        let s = g.softmax(p, None).unwrap();
        g.value(s).data().to_vec()
    };
    let (x, y) = (run(), run());
    assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
}

// Finite-difference checks, one per differentiable op.

#[test]
fn grad_matmul() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(10);
    let ins = [random(&mut rng, &[3, 4], -1.0, 1.0), random(&mut rng, &[4, 2], -1.0, 1.0)];
    check_gradients(&ins, |g, v| {
        let p = g.matmul(v[0], v[1])?;
        weighted_sum(g, p, 1)
    });
}

#[test]
fn grad_elementwise() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(11);
    let ins = [random(&mut rng, &[2, 3], -1.0, 1.0), random(&mut rng, &[2, 3], -1.0, 1.0)];
    check_gradients(&ins, |g, v| {
        let s = g.add(v[0], v[1])?;
        let m = g.mul(s, v[1])?;
        let e = g.exp(m)?;
        let sg = g.sigmoid(e)?;
        let th = g.tanh(v[0])?;
        let th = g.scale(th, -1.7)?;
        let out = g.add(sg, th)?;
        weighted_sum(g, out, 2)
    });
}

#[test]
fn grad_squared_relu() {
    // Inputs kept away from the kink at zero.
    let ins = [t(&[2, 3], &[0.5, -0.7, 1.3, -0.2, 0.9, 2.1])];
    check_gradients(&ins, |g, v| {
        let y = g.squared_relu(v[0])?;
        weighted_sum(g, y, 3)
    });
}

#[test]
fn grad_row_broadcasts() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(12);
    let ins = [
        random(&mut rng, &[3, 4], -1.0, 1.0),
        random(&mut rng, &[4], -1.0, 1.0),
        random(&mut rng, &[4], -1.0, 1.0),
    ];
    check_gradients(&ins, |g, v| {
        let a = g.add_row(v[0], v[1])?;
        let m = g.mul_row(a, v[2])?;
        weighted_sum(g, m, 4)
    });
}

#[test]
fn grad_layer_norm() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(13);
    let ins = [
        random(&mut rng, &[3, 5], -2.0, 2.0),
        random(&mut rng, &[5], 0.5, 1.5),
        random(&mut rng, &[5], -0.5, 0.5),
    ];
    check_gradients(&ins, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(g, y, 5)
    });
}

#[test]
fn grad_softmax_masked() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(14);
    let ins = [random(&mut rng, &[3, 4], -2.0, 2.0)];
    check_gradients(&ins, |g, v| {
        let s = g.softmax(v[0], Some(&[true, false, true, true]))?;
        weighted_sum(g, s, 6)
    });
}

#[test]
fn grad_cross_entropy() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(15);
    let ins = [random(&mut rng, &[4, 5], -2.0, 2.0)];
    check_gradients(&ins, |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2], None));
    check_gradients(&ins, |g, v| {
        g.cross_entropy(v[0], &[0, 4, 2, 2], Some(&[true, false, true, false, true]))
    });
}

#[test]
fn grad_embedding() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(16);
    let ins = [random(&mut rng, &[5, 3], -1.0, 1.0)];
    check_gradients(&ins, |g, v| {
        let e = g.embedding(v[0], &[4, 0, 4, 2])?;
        weighted_sum(g, e, 7)
    });
}

#[test]
fn grad_token_shift() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(17);
    let ins = [random(&mut rng, &[5, 3], -1.0, 1.0), random(&mut rng, &[3], 0.0, 1.0)];
    check_gradients(&ins, |g, v| {
        let s = g.token_shift(v[0], v[1], &[2, 3])?;
        weighted_sum(g, s, 8)
    });
}

#[test]
fn grad_wkv() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(18);
    let ins = [
        random(&mut rng, &[5, 3], -1.0, 1.0),
        random(&mut rng, &[5, 3], -1.0, 1.0),
        random(&mut rng, &[5, 3], -1.0, 1.0),
        random(&mut rng, &[3], -2.0, 2.0),
    ];
    check_gradients(&ins, |g, v| {
        let o = g.wkv(v[0], v[1], v[2], v[3], &[3, 2])?;
        weighted_sum(g, o, 9)
    });
}

#[test]
fn grad_wkv_across_saved_states() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(22);
    let ins = [
        random(&mut rng, &[75, 2], -1.0, 1.0),
        random(&mut rng, &[75, 2], -1.0, 1.0),
        random(&mut rng, &[75, 2], -1.0, 1.0),
        random(&mut rng, &[2], 1.0, 3.0),
    ];
    check_gradients(&ins, |g, v| {
        let o = g.wkv(v[0], v[1], v[2], v[3], &[64, 11])?;
        weighted_sum(g, o, 23)
    });
}

#[test]
fn grad_slice_and_concat() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(19);
    let ins = [random(&mut rng, &[4, 2], -1.0, 1.0), random(&mut rng, &[2, 2], -1.0, 1.0)];
    check_gradients(&ins, |g, v| {
        let a = g.slice_rows(v[0], 1, 3)?;
        let b = g.slice_rows(v[0], 0, 1)?;
        let c = g.concat_rows(&[a, v[1], b])?;
        weighted_sum(g, c, 10)
    });
}

#[test]
fn grad_routing_ops() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(20);
    let ins = [
        random(&mut rng, &[3, 3], -1.0, 1.0),
        random(&mut rng, &[3, 2], -1.0, 1.0),
        random(&mut rng, &[3, 2], -1.0, 1.0),
        random(&mut rng, &[3, 2], -1.0, 1.0),
    ];
    let selected = [true, true, false, false, true, true, true, false, true];
    check_gradients(&ins, |g, v| {
        let scores = g.softmax(v[0], None)?;
        let w = g.topk_renorm(scores, &selected)?;
        let out = g.moe_combine(w, &[v[1], v[2], v[3]])?;
        weighted_sum(g, out, 11)
    });
}

#[test]
fn grad_cv_squared_of_column_sums() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(21);
    let ins = [random(&mut rng, &[4, 3], 0.1, 1.0)];
    check_gradients(&ins, |g, v| {
        let s = g.column_sum(v[0])?;
        g.cv_squared(s)
    });
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        values in prop::collection::vec(-30.0f64..30.0, 12),
        mask_bits in prop::collection::vec(any::<bool>(), 4),
    ) {
        let mut mask = mask_bits.clone();
        mask[0] = true;
        let mut g = Graph::new();
        let x = g.input(t(&[3, 4], &values));
        let s = g.softmax(x, Some(&mask)).unwrap();
        for r in 0..3 {
            let row = g.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (j, &allowed) in mask.iter().enumerate() {
                if !allowed {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn matmul_is_associative(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 12),
        c in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let mut g = Graph::new();
        let (a, b, c) = (g.input(t(&[2, 3], &a)), g.input(t(&[3, 4], &b)), g.input(t(&[4, 2], &c)));
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        for (x, y) in g.value(left).data().iter().zip(g.value(right).data()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }
}
