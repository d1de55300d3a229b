use lore_tensor::{grad_check, op_cases, Rng, Tape, Tensor};
use proptest::prelude::*;

const TOL: f32 = 1e-4;

#[test]
fn every_op_matches_finite_differences_over_100_seeds() {
    let mut worst = std::collections::BTreeMap::<&str, f32>::new();
    for seed in 0..100 {
        for case in op_cases(seed) {
            let e = case.check(1e-4).unwrap();
            let w = worst.entry(case.name).or_insert(0.0);
            *w = w.max(e);
        }
    }
    for (name, e) in &worst {
        assert!(*e <= TOL, "{name}: max rel err {e}");
    }
}

#[test]
fn composite_graph_matmul_softmax_mask_max() {
    let mut rng = Rng::new(11);
    let w: Tensor<f64> = rng.normal_tensor(vec![4, 6], 1.0);
    let keep: Tensor<f64> = Tensor::new(vec![6], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
    for seed in 0..20 {
        let x: Tensor = Rng::new(seed).normal_tensor(vec![3, 4], 1.0);
        let e = grad_check(
            |t, x| {
                let s = x.matmul(t.constant(w.clone())?)?.softmax_lastdim()?;
                s.mul(t.constant(keep.clone())?)?.max()
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(e <= TOL, "seed {seed}: {e}");
    }
}

#[test]
fn softmax_jacobian_on_random_six_vector() {
    let x: Tensor = Rng::new(3).normal_tensor(vec![6], 1.0);
    for j in 0..6 {
        let e = grad_check(|_, x| Ok(x.softmax_lastdim()?.gather(&[j])?), &x, 1e-3).unwrap();
        assert!(e <= TOL, "row {j}: {e}");
    }
}

#[test]
fn op_sequence_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::new(99);
        let tape = Tape::<f32>::new();
        let x = tape.param(rng.normal_tensor(vec![4, 8], 1.0)).unwrap();
        let w = tape.constant(rng.normal_tensor(vec![8, 8], 0.5)).unwrap();
        let y = x.matmul(w).unwrap().layer_norm(None, None, 1e-5).unwrap().gelu().unwrap();
        let out = y.value();
        tape.backward(y.softmax_lastdim().unwrap().max().unwrap()).unwrap();
        (out, x.grad().unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b));
    assert!(ga.bit_eq(&gb));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..30.0) {
        let x: Tensor = Rng::new(seed).normal_tensor(vec![rows, cols], scale);
        let tape = Tape::<f32>::new();
        let y = tape.constant(x).unwrap().softmax_lastdim().unwrap().value();
        for r in y.data().chunks(cols) {
            prop_assert!(r.iter().all(|v| v.is_finite()));
            let s: f32 = r.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised(rows in 1usize..4, seed in any::<u64>()) {
        let x: Tensor<f64> = Rng::new(seed).normal_tensor(vec![rows, 16], 3.0);
        let tape = Tape::<f64>::new();
        let y = tape.constant(x).unwrap().layer_norm(None, None, 1e-9).unwrap().value();
        for r in y.data().chunks(16) {
            let m: f64 = r.iter().sum::<f64>() / 16.0;
            let v: f64 = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
