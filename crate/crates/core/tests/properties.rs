use faithful_core::autodiff::{Graph, Tensor};
use faithful_core::metrics::{ece, ks_test, ks_test_one_sided, paired_t_test_one_sided, g_test};
use proptest::prelude::*;

fn column(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stop_gradient_is_forward_identity_and_backward_zero(x in prop::collection::vec(-3.0f64..3.0, 1..20)) {
        let n = x.len();
        let mut g = Graph::new();
        let p = g.parameter(&[n, 1]);
        let s = g.stop_gradient(p).unwrap();
        let sq = g.square(s).unwrap();
        let prod = g.mul(p, sq).unwrap();
        let loss = g.reduce_sum(prod).unwrap();
        g.bind(p, Tensor::column(&x)).unwrap();
        g.forward().unwrap();
        prop_assert!(g.value(s).unwrap().bitwise_eq(&Tensor::column(&x)));
        // d/dx sum(x * stop(x)^2) = x^2 exactly: the barrier contributes nothing.
        let grads = g.backward(loss).unwrap();
        for (gi, xi) in grads.get(p).unwrap().data().iter().zip(&x) {
            prop_assert_eq!(gi.to_bits(), (xi * xi).to_bits());
        }

        let mut g = Graph::new();
        let p = g.parameter(&[n, 1]);
        let s = g.stop_gradient(p).unwrap();
        let loss = g.reduce_sum(s).unwrap();
        g.bind(p, Tensor::column(&x)).unwrap();
        g.forward().unwrap();
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.get(p).is_none_or(|t| t.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn ece_is_permutation_invariant(mut u in prop::collection::vec(0.0f64..1.0, 1..200), seed in any::<u64>()) {
        let before = ece(&u, 10).unwrap();
        let k = (seed as usize) % u.len();
        u.rotate_left(k);
        u.reverse();
        prop_assert_eq!(before.to_bits(), ece(&u, 10).unwrap().to_bits());
    }

    #[test]
    fn p_values_lie_in_the_unit_interval(a in column(40), b in column(40)) {
        let p = paired_t_test_one_sided(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let p = ks_test_one_sided(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let p = ks_test(&a, &b).unwrap().p_value;
        prop_assert!((0.0..=1.0).contains(&p));
        let hist = |v: &[f64]| {
            let mut h = [0u64; 5];
            for x in v {
                h[(((x + 5.0) / 2.0) as usize).min(4)] += 1;
            }
            h
        };
        let p = g_test(&hist(&a), &hist(&b)).unwrap().p_value;
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn inflating_differences_never_raises_the_t_p_value(a in column(30), b in column(30), c in 0.0f64..3.0) {
        let p = paired_t_test_one_sided(&a, &b).unwrap();
        let worse: Vec<f64> = a.iter().map(|v| v + c).collect();
        let q = paired_t_test_one_sided(&worse, &b).unwrap();
        prop_assert!(q <= p + 1e-12, "p {} -> {}", p, q);
    }
}
