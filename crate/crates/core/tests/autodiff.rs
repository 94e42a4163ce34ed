mod common;

use common::*;
use dmo_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    for (i, op) in FD_OPS.iter().enumerate() {
        let err = check_op(op, CASES_PER_OP, 1000 + i as u64);
        assert!(err < FD_TOL, "{op}: relative error {err:e}");
    }
}

#[test]
fn composed_networks_match_finite_differences() {
    for (i, net) in NETWORKS.iter().enumerate() {
        let err = check_network(net, 25, 2000 + i as u64);
        assert!(err < FD_TOL, "{net}: relative error {err:e}");
    }
}

#[test]
fn grad_swap_contract_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        grad_swap_case(&mut rng).unwrap();
    }
}

#[test]
fn two_step_swap_chain_matches_hand_chain_rule() {
    // s1 = swap(f(s0, a0), r1), s2 = swap(f(s1, a1), r2), f(s, a) = k s + a,
    // L = s2^2. Each backward step multiplies by the model slope k taken at
    // the real states, so dL/dk = 2 r2 (s1 + k s0) with s1 = r1.
    let (k, s0, a0, a1, r1, r2) = (0.7, 1.3, -0.4, 0.25, 0.9, -1.1);
    let mut tape = Tape::new();
    let kk = tape.leaf(Tensor::scalar(k));
    let s0n = tape.constant(Tensor::scalar(s0));
    let a0n = tape.leaf(Tensor::scalar(a0));
    let a1n = tape.leaf(Tensor::scalar(a1));
    let f = |t: &mut Tape, s, a| {
        let ks = t.mul(kk, s).unwrap();
        t.add(ks, a).unwrap()
    };
    let p1 = f(&mut tape, s0n, a0n);
    let s1 = tape.grad_swap(p1, Tensor::scalar(r1)).unwrap();
    let p2 = f(&mut tape, s1, a1n);
    let s2 = tape.grad_swap(p2, Tensor::scalar(r2)).unwrap();
    let loss = tape.square(s2).unwrap();
    let loss = tape.sum(loss).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(tape.value(loss).item(), r2 * r2);
    let dl_ds2 = 2.0 * r2;
    assert!((g.get(kk).unwrap().item() - dl_ds2 * (r1 + k * s0)).abs() < 1e-15);
    assert!((g.get(a1n).unwrap().item() - dl_ds2).abs() < 1e-15);
    assert!((g.get(a0n).unwrap().item() - dl_ds2 * k).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grad_swap_holds_for_any_seed(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(grad_swap_case(&mut rng).is_ok());
    }

    #[test]
    fn backward_ids_follow_inputs(values in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(values.clone()));
        let y = tape.tanh(x).unwrap();
        let z = tape.mul(y, x).unwrap();
        prop_assert!(z.index() > y.index() && y.index() > x.index());
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        for (gi, v) in g.get(x).unwrap().data().iter().zip(&values) {
            let want = v.tanh() + v * (1.0 - v.tanh().powi(2));
            prop_assert!((gi - want).abs() < 1e-12);
        }
    }
}
