//! Randomized invariants over scoring and mixture arithmetic.

use proptest::prelude::*;

use qamix::eval::{exact_match, token_f1};
use qamix::transfer::mixture_weights;

fn token() -> impl Strategy<Value = String> {
    prop_oneof![Just("a"), Just("b"), Just("c"), Just("v7"), Just("K9")]
        .prop_map(|s| s.to_string())
}

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(token(), 0..6).prop_map(|ts| ts.join(" "))
}

proptest! {
    #[test]
    fn f1_is_bounded_and_em_implies_full_f1(pred in phrase(), golds in prop::collection::vec(phrase(), 1..4)) {
        let f1 = token_f1(&pred, &golds);
        prop_assert!((0.0..=1.0).contains(&f1));
        let em = exact_match(&pred, &golds);
        prop_assert!(em == 0.0 || em == 1.0);
        if em == 1.0 {
            prop_assert!((f1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_against_self_is_one(pred in phrase()) {
        prop_assert!((token_f1(&pred, &[pred.clone()]) - 1.0).abs() < 1e-12);
        prop_assert_eq!(exact_match(&pred, &[pred.clone()]), 1.0);
    }

    #[test]
    fn mixture_weights_form_a_simplex(losses in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let w = mixture_weights(&losses).unwrap();
        prop_assert_eq!(w.alpha.len(), losses.len());
        prop_assert!(w.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
        prop_assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mixture_weights_order_matches_losses(losses in prop::collection::vec(-5.0f64..5.0, 2..6)) {
        let w = mixture_weights(&losses).unwrap();
        for i in 0..losses.len() {
            for j in 0..losses.len() {
                if losses[i] < losses[j] {
                    prop_assert!(w.alpha[i] >= w.alpha[j]);
                }
            }
        }
    }
}
