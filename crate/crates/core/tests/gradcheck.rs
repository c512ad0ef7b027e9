//! Finite-difference verification of every tape primitive, plus the
//! per-operation hand cases.

mod common;

use common::*;
use guidecode::tensor::{Elem, Param, Tape, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, err) in primitive_gradcheck_suite(11) {
        assert!(err < 1e-4, "{name}: max relative error {err:e} >= 1e-4");
    }
}

#[test]
fn composed_mlp_matches_finite_differences() {
    let err = mlp_gradcheck(17);
    assert!(err < 1e-4, "mlp: max relative error {err:e}");
}

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.constant(Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap());
    let m = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap());
    let prod = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(prod).data(), &[1.0, 2.0, 3.0, 4.0]);

    let proj = tape.constant(Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap());
    let m2 = tape.constant(Tensor::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap());
    let out = tape.matmul(proj, m2).unwrap();
    assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_random_gradient_tight() {
    let mut rng = guidecode::util::seeded_rng(3);
    let a = randn_param("a", &[3, 4], &mut rng);
    let b = randn_param("b", &[4, 2], &mut rng);
    let err = gradcheck(&[a, b], &|t, p| {
        let (a, b) = (t.param(&p[0]), t.param(&p[1]));
        let c = t.matmul(a, b).unwrap();
        t.sum_all(c)
    }, 1e-5);
    assert!(err < 1e-6, "matmul grad err {err:e}");
}

#[test]
fn matmul_rejects_shape_mismatch_naming_both() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn cross_entropy_uniform_logits_is_ln_c() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(&[3, 4]));
    let loss = tape.softmax_cross_entropy(logits, &[0, 1, 3]).unwrap();
    let v = tape.value(loss).scalar_value().unwrap();
    assert!((v - 4.0f64.ln()).abs() < 1e-12, "{v}");
}

#[test]
fn cross_entropy_one_hot_limit_decreases_to_zero() {
    let mut last = f64::INFINITY;
    for mag in [1.0, 4.0, 16.0, 64.0] {
        let mut tape = Tape::<f64>::new();
        let mut data = vec![0.0; 4];
        data[2] = mag;
        let logits = tape.constant(Tensor::from_vec(data, &[1, 4]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        let v = tape.value(loss).scalar_value().unwrap();
        assert!(v < last, "loss must decrease monotonically with margin");
        last = v;
    }
    assert!(last < 1e-25);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.softmax_cross_entropy(logits, &[0, 3]).is_err());
}

#[test]
fn cross_entropy_matches_direct_formula() {
    // Brute-force evaluation of the definition on a random 2x3 case.
    let mut rng = guidecode::util::seeded_rng(5);
    let logits = randn_param("logits", &[2, 3], &mut rng);
    let targets = [2usize, 0];

    let mut direct = 0.0;
    for (row, &t) in logits.value.data().chunks_exact(3).zip(&targets) {
        let denom: f64 = row.iter().map(|&x| x.exp()).sum();
        direct -= (row[t].exp() / denom).ln();
    }
    direct /= 2.0;

    let mut tape = Tape::<f64>::new();
    let l = tape.param(&logits);
    let loss = tape.softmax_cross_entropy(l, &targets).unwrap();
    let got = tape.value(loss).scalar_value().unwrap();
    assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");

    let err = gradcheck(&[logits], &|t, p| {
        let l = t.param(&p[0]);
        t.softmax_cross_entropy(l, &[2, 0]).unwrap()
    }, 1e-5);
    assert!(err < 1e-6, "ce grad err {err:e}");
}

#[test]
fn layer_norm_constant_vector_is_zeros() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 4], 3.25));
    let gain = tape.constant(Tensor::full(&[4], 1.0));
    let bias = tape.constant(Tensor::zeros(&[4]));
    let out = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_already_normalized_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![1.0, -1.0], &[1, 2]).unwrap());
    let gain = tape.constant(Tensor::full(&[2], 1.0));
    let bias = tape.constant(Tensor::zeros(&[2]));
    let out = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
    let expect = 1.0 / (1.0 + 1e-6f64).sqrt();
    let got = tape.value(out).data().to_vec();
    assert!((got[0] - expect).abs() < 1e-12 && (got[1] + expect).abs() < 1e-12);
}

#[test]
fn layer_norm_gradient_tight() {
    let mut rng = guidecode::util::seeded_rng(9);
    let x = randn_param("x", &[2, 5], &mut rng);
    let gain = randn_param("gain", &[5], &mut rng);
    let bias = randn_param("bias", &[5], &mut rng);
    let err = gradcheck(&[x, gain, bias], &|t, p| {
        let (x, g, b) = (t.param(&p[0]), t.param(&p[1]), t.param(&p[2]));
        let y = t.layer_norm(x, g, b, 1e-6).unwrap();
        let y2 = t.mul(y, y).unwrap();
        t.sum_all(y2)
    }, 1e-5);
    assert!(err < 1e-5, "layer_norm grad err {err:e}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut rng = guidecode::util::seeded_rng(4);
    let x = randn_param("x", &[3, 2], &mut rng);
    let grads = analytic_grads(&[x.clone()], &|t, p| {
        let v = t.param(&p[0]);
        t.sum_all(v)
    });
    assert_eq!(grads.get(&x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let mut rng = guidecode::util::seeded_rng(4);
    let x = randn_param("x", &[2, 3], &mut rng);
    let grads = analytic_grads(&[x.clone()], &|t, p| {
        let v = t.param(&p[0]);
        let sq = t.mul(v, v).unwrap();
        t.sum_all(sq)
    });
    let expect: Vec<f64> = x.value.data().iter().map(|v| 2.0 * v).collect();
    for (g, e) in grads.get(&x).unwrap().data().iter().zip(&expect) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut rng = guidecode::util::seeded_rng(4);
    let x = randn_param("x", &[2, 2], &mut rng);
    let mut tape = Tape::new();
    let v = tape.param(&x);
    assert!(tape.backward(v).is_err());
}

#[test]
fn backward_is_linear_over_losses() {
    let mut rng = guidecode::util::seeded_rng(8);
    let x = randn_param("x", &[3, 3], &mut rng);
    let loss_a: &LossFn = &|t, p| {
        let v = t.param(&p[0]);
        let sq = t.mul(v, v).unwrap();
        t.sum_all(sq)
    };
    let loss_b: &LossFn = &|t, p| {
        let v = t.param(&p[0]);
        let g = t.gelu(v);
        t.mean_all(g)
    };
    let ga = analytic_grads(&[x.clone()], loss_a);
    let gb = analytic_grads(&[x.clone()], loss_b);
    let gsum = analytic_grads(&[x.clone()], &|t, p| {
        let v = t.param(&p[0]);
        let sq = t.mul(v, v).unwrap();
        let a = t.sum_all(sq);
        let g = t.gelu(v);
        let b = t.mean_all(g);
        t.add(a, b).unwrap()
    });
    let (a, b, s) = (
        ga.get(&x).unwrap().data(),
        gb.get(&x).unwrap().data(),
        gsum.get(&x).unwrap().data(),
    );
    for i in 0..9 {
        assert!((a[i] + b[i] - s[i]).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic_bitwise() {
    let run = || {
        let mut rng = guidecode::util::seeded_rng(21);
        let x = Param::new("x", Tensor::<f32>::randn(&[4, 6], 1.0, &mut rng));
        let w = Param::new("w", Tensor::<f32>::randn(&[6, 6], 1.0, &mut rng));
        let mut tape = Tape::new();
        let (xv, wv) = (tape.param(&x), tape.param(&w));
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.gelu(h);
        let s = tape.softmax(h, 1).unwrap();
        tape.value(s).data().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn straight_through_copies_gradients_bitwise() {
    let mut rng = guidecode::util::seeded_rng(30);
    let x = randn_param("x", &[2, 3], &mut rng);
    let replacement = Tensor::randn(&[2, 3], 1.0, &mut rng);

    // Gradient of L(straight_through(x, r)) w.r.t. x must equal the gradient
    // of L(r) w.r.t. r, bit for bit.
    let r_param = Param::new("r", replacement.clone());
    let g_direct = analytic_grads(&[r_param.clone()], &|t, p| {
        let r = t.param(&p[0]);
        let sq = t.mul(r, r).unwrap();
        t.sum_all(sq)
    });
    let g_st = {
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let st = tape.straight_through(xv, replacement.clone()).unwrap();
        let sq = tape.mul(st, st).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap()
    };
    let a = g_direct.get(&r_param).unwrap().data();
    let b = g_st.get(&x).unwrap().data();
    assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
