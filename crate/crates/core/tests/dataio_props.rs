use std::collections::BTreeSet;

use proptest::prelude::*;

use retrain_audit::dataio::{load_weekly_csv, make_batches, make_holdout, write_weekly_csv, ColumnMapping, ProtectedAttr};
use retrain_audit::metrics::auc;
use retrain_audit::synthgen::{gen_cohort, CohortSpec};

fn spec(n_patients: usize, seed: u64) -> CohortSpec {
    CohortSpec {
        n_patients,
        weeks_max: 16,
        seed,
        ..CohortSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batches_partition_patients(seed in any::<u64>(), n_batches in 2usize..8, frac in 0.05f64..0.5) {
        let cohort = gen_cohort(&spec(60, seed)).unwrap();
        let (held, rest) = make_holdout(&cohort.table, frac, seed, Some(&ProtectedAttr::sex())).unwrap();
        let plan = make_batches(&rest, n_batches).unwrap();
        prop_assert_eq!(plan.n_batches, n_batches);
        let mut seen = BTreeSet::new();
        for k in 0..n_batches {
            for p in plan.batch_patients(k) {
                prop_assert!(seen.insert(p.to_string()), "{p} in two batches");
                prop_assert!(!held.contains(p));
            }
        }
        prop_assert_eq!(seen, rest.patient_ids());
        let rows: usize = (0..n_batches).map(|k| plan.batch_rows(&rest, k).len()).sum();
        prop_assert_eq!(rows, rest.len());
        prop_assert_eq!(held.len(), (frac * 60.0).round() as usize);
        for w in plan.boundaries.windows(2) {
            prop_assert!(w[0].end <= w[1].start);
        }
    }

    #[test]
    fn weekly_csv_round_trips(seed in any::<u64>()) {
        let cohort = gen_cohort(&spec(12, seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weekly.csv");
        write_weekly_csv(&path, &cohort.table).unwrap();
        let (back, report) = load_weekly_csv(&path, &ColumnMapping::default()).unwrap();
        prop_assert!(report.rejects.is_empty());
        prop_assert_eq!(report.accepted, cohort.table.len());
        prop_assert_eq!(back.observations, cohort.table.observations.clone());
    }
}

#[test]
fn holdouts_differ_across_seeds() {
    let cohort = gen_cohort(&spec(80, 1)).unwrap();
    let sets: Vec<BTreeSet<String>> = (0..5)
        .map(|s| make_holdout(&cohort.table, 0.2, s, Some(&ProtectedAttr::sex())).unwrap().0)
        .collect();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let inter = sets[i].intersection(&sets[j]).count() as f64;
            let union = sets[i].union(&sets[j]).count() as f64;
            assert!(inter / union < 1.0, "seeds {i} and {j} share a holdout");
        }
    }
}

#[test]
fn synthetic_labels_are_recoverable_from_true_coefficients() {
    for seed in 0..3 {
        let cohort = gen_cohort(&CohortSpec { n_patients: 300, seed, ..CohortSpec::default() }).unwrap();
        let t = &cohort.truth;
        let scores: Vec<f64> = (0..cohort.table.len())
            .map(|i| {
                let x = cohort.table.feature_row(i);
                t.intercept
                    + (0..t.coefficients.len())
                        .map(|j| t.coefficients[j] * (x[j] - t.centers[j]) / t.scales[j])
                        .sum::<f64>()
            })
            .collect();
        let labels: Vec<u8> = cohort.table.observations.iter().map(|o| o.label).collect();
        let a = auc(&scores, &labels).unwrap().value().unwrap();
        assert!(a >= t.recoverability_auc_floor, "seed {seed}: {a}");
    }
}
