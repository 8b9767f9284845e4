use proptest::prelude::*;

use retrain_audit::metrics::{Metric, Undefined};
use retrain_audit::report::{aggregate, phase_average};

fn metric() -> impl Strategy<Value = Metric> {
    prop_oneof![
        4 => (-10.0f64..10.0).prop_map(Metric::Value),
        1 => Just(Metric::Undefined(Undefined::NoData)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn aggregate_counts_and_brackets(values in prop::collection::vec(metric(), 0..40)) {
        let a = aggregate(&values);
        let defined: Vec<f64> = values.iter().filter_map(|m| m.value()).collect();
        prop_assert_eq!(a.n, defined.len());
        prop_assert_eq!(a.n + a.excluded, values.len());
        prop_assert_eq!(a.degenerate, defined.len() == 1);
        match a.mean.value() {
            None => prop_assert!(defined.is_empty()),
            Some(m) => {
                let naive = defined.iter().sum::<f64>() / defined.len() as f64;
                prop_assert!((m - naive).abs() < 1e-12);
                let (lo, hi) = (a.ci_lo.value().unwrap(), a.ci_hi.value().unwrap());
                prop_assert!(lo <= m && m <= hi);
                prop_assert!(((m - lo) - (hi - m)).abs() < 1e-9);
                if a.degenerate {
                    prop_assert_eq!(lo, hi);
                }
            }
        }
        prop_assert_eq!(phase_average(&values).value(), a.mean.value());
    }

    #[test]
    fn aggregate_shift_equivariant(values in prop::collection::vec(-10.0f64..10.0, 2..30), c in -5.0f64..5.0) {
        let base = aggregate(&values.iter().map(|&v| Metric::Value(v)).collect::<Vec<_>>());
        let moved = aggregate(&values.iter().map(|&v| Metric::Value(v + c)).collect::<Vec<_>>());
        for (x, y) in [(base.mean, moved.mean), (base.ci_lo, moved.ci_lo), (base.ci_hi, moved.ci_hi)] {
            prop_assert!((x.value().unwrap() + c - y.value().unwrap()).abs() < 1e-9);
        }
    }
}
