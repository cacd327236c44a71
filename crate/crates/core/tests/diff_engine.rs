use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bott::autodiff::{grad_check, Tape, Tensor, Var};
use bott::BottError;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries pushed at least `gap` away from zero, keeping their sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape);
    for v in &mut t.data {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

#[test]
fn linear_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ins = [rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[2])];
    let r = grad_check(|t, v| t.linear(v[0], v[1], v[2]), &ins, 1e-6, 1e-2).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    assert_eq!(r.checked, 12 + 6 + 2);
}

#[test]
fn sum_gradient_is_exactly_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let s = tape.sum(v);
    let g = tape.backward(s).unwrap();
    assert!(g.get(v).unwrap().data.iter().all(|d| *d == 1.0));
}

#[test]
fn relu_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = away_from_zero(&mut rng, &[5, 4], 0.05);
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let r = t.relu(v[0]);
        Ok(t.sum(r))
    };
    let r = grad_check(f, &[x], 1e-6, 1e-2).unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn layer_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ins = [rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6])];
    let r = grad_check(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), &ins, 1e-6, 1e-2).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ins = [rand_tensor(&mut rng, &[4, 8]), rand_tensor(&mut rng, &[4, 8]), rand_tensor(&mut rng, &[4, 8])];
    let f = |t: &mut Tape<f64>, v: &[Var]| t.attention(v[0], v[1], v[2], 2, &[false; 4]);
    let r = grad_check(f, &ins, 1e-6, 1e-2).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn l2_normalize_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = away_from_zero(&mut rng, &[5, 3], 0.2);
    let r = grad_check(|t, v| t.l2_normalize_rows(v[0]), &[x], 1e-6, 1e-2).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn masked_key_does_not_reach_other_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[5, 8]);
    let masked = 3;
    let mut pad = [false; 5];
    pad[masked] = true;
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let o = tape.attention(v, v, v, 2, &pad).unwrap();
        tape.value(o).clone()
    };
    let base = run(&x);
    let mut y = x.clone();
    for c in 0..8 {
        y.data[masked * 8 + c] += rng.random_range(-5.0..5.0);
    }
    let moved = run(&y);
    for r in (0..5).filter(|r| *r != masked) {
        for (a, b) in base.row(r).iter().zip(moved.row(r)) {
            assert!((a - b).abs() < 1e-7, "row {r}: {a} vs {b}");
        }
    }
}

#[test]
fn closed_forms() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 0.6, 0.8]).unwrap());
    let n = tape.l2_normalize_rows(x).unwrap();
    let v = tape.value(n);
    assert!((v.at(0, 0) - 0.6).abs() < 1e-15 && (v.at(0, 1) - 0.8).abs() < 1e-15);
    assert!((v.at(1, 0) - 0.6).abs() < 1e-12 && (v.at(1, 1) - 0.8).abs() < 1e-12);

    let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap());
    let g = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
    let b = tape.leaf(Tensor::zeros(&[2]));
    let ln = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    let v = tape.value(ln);
    assert!((v.at(0, 0) - expect).abs() < 1e-12 && (v.at(0, 1) + expect).abs() < 1e-12);
    assert!((v.at(0, 0) - 1.0).abs() < 1e-3);

    let zero = tape.leaf(Tensor::zeros(&[1, 3]));
    assert!(matches!(tape.l2_normalize_rows(zero), Err(BottError::Domain(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitives_agree_with_finite_differences(seed in any::<u64>(), n in 2usize..6, heads in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4 * heads;
        let mut pad = vec![false; n];
        pad[n - 1] = rng.random_bool(0.5);
        let x = rand_tensor(&mut rng, &[n, d]);
        let y = rand_tensor(&mut rng, &[n, d]);
        let z = rand_tensor(&mut rng, &[n, d]);
        let w = rand_tensor(&mut rng, &[d, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let gain = rand_tensor(&mut rng, &[d]);
        let shift = rand_tensor(&mut rng, &[d]);
        let h = 1e-6;
        let checks = [
            grad_check(|t, v| t.linear(v[0], v[1], v[2]), &[x.clone(), w, b], h, 1e-2),
            grad_check(|t, v| t.matmul_nt(v[0], v[1]), &[x.clone(), y.clone()], h, 1e-2),
            grad_check(|t, v| t.add(v[0], v[1]), &[x.clone(), y.clone()], h, 1e-2),
            grad_check(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), &[x.clone(), gain, shift], h, 1e-2),
            grad_check(|t, v| t.attention(v[0], v[1], v[2], heads, &pad), &[x.clone(), y, z], h, 1e-2),
            grad_check(|t, v| Ok(t.affine(v[0], -0.7, 0.2)), std::slice::from_ref(&x), h, 1e-2),
            grad_check(|t, v| t.take_rows(v[0], 1), &[x], h, 1e-2),
        ];
        for r in checks {
            let r = r.unwrap();
            prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
        }
        let kinked = away_from_zero(&mut rng, &[n, d], 2.0 * h);
        let r = grad_check(|t, v| Ok(t.relu(v[0])), std::slice::from_ref(&kinked), h, 1e-2).unwrap();
        prop_assert!(r.max_rel_error < 1e-4);
        let r = grad_check(|t, v| t.l2_normalize_rows(v[0]), &[kinked], h, 1e-2).unwrap();
        prop_assert!(r.max_rel_error < 1e-4);
    }

    #[test]
    fn attention_rows_are_convex_weights(seed in any::<u64>(), n in 1usize..7, heads in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * heads;
        let pad: Vec<bool> = (0..n).map(|i| i > 0 && rng.random_bool(0.3)).collect();
        let mut tape = Tape::new();
        let q = tape.leaf(rand_tensor(&mut rng, &[n, d]));
        let k = tape.leaf(rand_tensor(&mut rng, &[n, d]));
        let v = tape.leaf(rand_tensor(&mut rng, &[n, d]));
        let o = tape.attention(q, k, v, heads, &pad).unwrap();
        let (h, rows, w) = tape.attention_weights(o).unwrap();
        prop_assert_eq!((h, rows), (heads, n));
        for row in w.chunks(n) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            for (j, p) in row.iter().enumerate() {
                if pad[j] {
                    prop_assert!(*p == 0.0);
                }
            }
        }
    }

    #[test]
    fn tape_is_single_use(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&mut rng, &[2, 3]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        prop_assert!(matches!(tape.backward(s), Err(BottError::TapeConsumed)));
    }
}
