use std::collections::BTreeMap;

use glcon_core::numeric::checkpoint::{self, Precision};
use glcon_core::numeric::gradcheck::DEFAULT_STEP;
use glcon_core::numeric::{check_gradient, cosine, cosine_similarity, ParamStore, Tape, Tensor};
use glcon_core::verify::{op_cases, GRADIENT_TOLERANCE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn every_op_passes_gradient_check_over_100_seeds() {
    for op in op_cases() {
        for seed in 0..100 {
            let err = (op.check)(seed).unwrap();
            assert!(err < GRADIENT_TOLERANCE, "{} seed {seed}: {err:e}", op.name);
        }
    }
}

#[test]
fn cosine_worked_value() {
    assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
}

#[test]
fn cosine_gradient_against_fixed_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let b = random(&mut rng, &[1, 6]);
        let x = random(&mut rng, &[1, 6]);
        let err = check_gradient(
            |x| {
                let b = x.tape().constant(b.clone());
                cosine_similarity(&x, &b)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err:e}");
    }
}

#[test]
fn sum_of_squares_gradient_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[3, 5]);
    let err = check_gradient(|x| Ok(x.mul(&x)?.sum()), &x, DEFAULT_STEP).unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn detached_branch_gets_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(&[1.0, -2.0, 3.0]));
    let y = tape.leaf(Tensor::row(&[0.5, 0.5, 0.5]));
    let out = x.detach().mul(&y).unwrap().sum();
    assert_eq!(*out.value(), Tensor::scalar(x.value().data().iter().map(|v| v * 0.5).sum()));
    let g = tape.backward(out).unwrap();
    assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.wrt(y).data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.register("a.weight", random(&mut rng, &[4, 3])).unwrap();
    store.register("a.bias", random(&mut rng, &[1, 3])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &store, Precision::F64, &BTreeMap::new()).unwrap();
    let loaded = checkpoint::load(dir.path()).unwrap();
    for p in store.iter() {
        let q = loaded.params.by_name(&p.name).unwrap();
        assert_eq!(q.tensor, p.tensor);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4], values).unwrap());
        let s = x.softmax_rows().unwrap().value();
        for i in 0..3 {
            let row = s.row_slice(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn log_inverts_exp(values in prop::collection::vec(-30.0f64..30.0, 8)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row(&values));
        let y = x.exp().log().unwrap().value();
        for (a, b) in values.iter().zip(y.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
        if let Ok(c) = cosine(&a, &b) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        }
    }
}
