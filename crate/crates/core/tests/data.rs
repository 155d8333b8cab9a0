mod common;

use common::trial;
use covadj::data::*;
use covadj::Error;
use proptest::prelude::*;

fn schema() -> CsvSchema {
    CsvSchema::new()
        .column("z", ColumnSpec::Treatment)
        .column("y", ColumnSpec::Outcome)
        .column("x", ColumnSpec::Continuous)
        .column("b", ColumnSpec::Binary)
}

#[test]
fn empty_cells_are_missing() {
    let text = "z,y,x,b\n1,2.5,1,0\n0,,,1\n1,3,3,NA\n";
    let ds = read_csv(text.as_bytes(), &schema()).unwrap();
    let x = ds.covariate("x").unwrap();
    assert_eq!(x.value(0), Some(1.0));
    assert_eq!(x.value(1), None);
    assert_eq!(x.value(2), Some(3.0));
    assert_eq!(x.observed(), &[true, false, true]);
    assert_eq!(ds.outcome_observed(), &[true, false, true]);
    assert_eq!(ds.covariate("b").unwrap().observed(), &[true, true, false]);
}

#[test]
fn bad_treatment_names_row_and_column() {
    let text = "z,y,x,b\n1,2,1,0\n2,1,1,1\n";
    match read_csv(text.as_bytes(), &schema()) {
        Err(Error::Parse { row, column, .. }) => {
            assert_eq!(row, 3);
            assert_eq!(column, "z");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn unparsable_cell_is_reported() {
    let text = "z,y,x,b\n1,2,abc,0\n0,1,1,1\n";
    let err = read_csv(text.as_bytes(), &schema()).unwrap_err();
    assert!(err.to_string().contains("row 2, column 'x'"), "{err}");
}

#[test]
fn csv_round_trip_preserves_values_and_mask() {
    let text = "z,y,x,b\n1,2.5,1.125,0\n0,,,1\n1,-3e-7,3,\n0,4,0.1,1\n";
    let ds = read_csv(text.as_bytes(), &schema()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    write_csv(&ds, &path).unwrap();
    let back = load_csv(&path, &schema_for(&ds)).unwrap();
    assert_eq!(back.treatment(), ds.treatment());
    assert_eq!(back.outcome_observed(), ds.outcome_observed());
    for i in 0..ds.n() {
        if ds.outcome_observed()[i] {
            assert_eq!(back.outcome()[i].to_bits(), ds.outcome()[i].to_bits());
        }
    }
    for c in ds.covariates() {
        let b = back.covariate(&c.name).unwrap();
        assert_eq!(b.kind, c.kind);
        for i in 0..ds.n() {
            assert_eq!(b.value(i).map(f64::to_bits), c.value(i).map(f64::to_bits));
        }
    }
}

#[test]
fn centering_examples() {
    let ds = trial(&[1, 0, 1], &[0.0; 3], &[("x", vec![Some(1.0), None, Some(3.0)])]);
    let c = center_observed(&ds, &["x".into()]).unwrap();
    let x = c.covariate("x").unwrap();
    assert_eq!((x.value(0), x.value(1), x.value(2)), (Some(-1.0), None, Some(1.0)));
    assert_eq!(c.centering()[0].constant, 2.0);

    let again = center_observed(&c, &["x".into()]).unwrap();
    for i in 0..3 {
        let (a, b) = (again.covariate("x").unwrap().value(i), x.value(i));
        assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    let k = trial(&[1, 0, 1], &[0.0; 3], &[("x", vec![Some(7.0), Some(7.0), None])]);
    let k = center_observed(&k, &["x".into()]).unwrap();
    assert_eq!(k.covariate("x").unwrap().value(0), Some(0.0));
    assert_eq!(k.covariate("x").unwrap().value(1), Some(0.0));
}

#[test]
fn asd_examples() {
    // equal arm means
    let ds = trial(&[1, 1, 0, 0], &[0.0; 4], &[("x", vec![Some(1.0), Some(3.0), Some(3.0), Some(1.0)])]);
    assert_eq!(asd(&ds, "x", None).unwrap(), 0.0);

    // prevalences 0.9 and 0.5 on ten units per arm
    let mut z = vec![1u8; 10];
    z.extend(vec![0u8; 10]);
    let mut b: Vec<f64> = (0..10).map(|i| if i < 9 { 1.0 } else { 0.0 }).collect();
    b.extend((0..10).map(|i| if i < 5 { 1.0 } else { 0.0 }));
    let bin = Covariate::complete("b", CovariateKind::Binary, b).unwrap();
    let ds = TrialDataset::new(z, OutcomeKind::Continuous, vec![Some(0.0); 20], vec![bin]).unwrap();
    let want = 0.4 / ((0.09f64 + 0.25) / 2.0).sqrt();
    assert!((asd(&ds, "b", None).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.9701).abs() < 1e-4);

    // means 1 and 0 with unit sample variance in both arms
    let a = 0.5f64.sqrt();
    let x = vec![1.0 - a, 1.0 + a, 1.0 - a, 1.0 + a, -a, a, -a, a];
    let ds = trial(&[1, 1, 1, 1, 0, 0, 0, 0], &[0.0; 8], &[("x", x.into_iter().map(Some).collect())]);
    // sample variance: 4 * 0.5 / 3
    let s2 = 4.0 * 0.5 / 3.0;
    assert!((asd(&ds, "x", None).unwrap() - 1.0 / f64::sqrt(s2)).abs() < 1e-12);
    let x = vec![1.0 - a, 1.0 + a, -a, a];
    let ds = trial(&[1, 1, 0, 0], &[0.0; 4], &[("x", x.into_iter().map(Some).collect())]);
    assert!((asd(&ds, "x", None).unwrap() - 1.0).abs() < 1e-12);
}

fn cell_strategy() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![3 => (-1e3f64..1e3).prop_map(Some), 1 => Just(None)]
}

fn dataset_strategy() -> impl Strategy<Value = TrialDataset> {
    (6usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(cell_strategy(), n),
            prop::collection::vec(cell_strategy(), n),
        )
            .prop_filter_map("both arms", |(mut z, y, x)| {
                z[0] = 1;
                z[1] = 0;
                let mut x = x;
                x[0] = Some(x[0].unwrap_or(1.0));
                x[1] = Some(x[1].unwrap_or(-1.0));
                let cov = Covariate::new("x", CovariateKind::Continuous, x).ok()?;
                TrialDataset::new(z, OutcomeKind::Continuous, y, vec![cov]).ok()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loaded_values_are_finite_where_observed(ds in dataset_strategy()) {
        let mut buf = Vec::new();
        write_csv_to(&ds, &mut buf, ',').unwrap();
        let back = read_csv(buf.as_slice(), &schema_for(&ds)).unwrap();
        for i in 0..back.n() {
            prop_assert_eq!(back.outcome()[i].is_nan(), !back.outcome_observed()[i]);
            let x = back.covariate("x").unwrap();
            prop_assert_eq!(x.values()[i].is_nan(), !x.observed()[i]);
        }
    }

    #[test]
    fn centering_commutes_with_permutation_and_is_idempotent(ds in dataset_strategy(), shift in 1usize..5) {
        let cols = vec!["x".to_string()];
        let n = ds.n();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let a = center_observed(&ds, &cols).unwrap().select_rows(&perm);
        let b = center_observed(&ds.select_rows(&perm).unwrap(), &cols);
        if let (Ok(a), Ok(b)) = (a, b) {
            let twice = center_observed(&b, &cols).unwrap();
            for i in 0..n {
                let (u, v, w) = (a.covariate("x").unwrap().value(i), b.covariate("x").unwrap().value(i), twice.covariate("x").unwrap().value(i));
                prop_assert_eq!(u.is_some(), v.is_some());
                if let (Some(u), Some(v), Some(w)) = (u, v, w) {
                    prop_assert!((u - v).abs() < 1e-9);
                    prop_assert!((w - v).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn asd_invariant_to_label_swap_and_shift(ds in dataset_strategy(), shift in -50.0f64..50.0) {
        if let Ok(base) = asd(&ds, "x", None) {
            let swapped = asd(&ds.swap_arms(), "x", None).unwrap();
            prop_assert!((base - swapped).abs() < 1e-12 * (1.0 + base));
            let x = ds.covariate("x").unwrap();
            let shifted: Vec<Option<f64>> = (0..ds.n()).map(|i| x.value(i).map(|v| v + shift)).collect();
            let moved = TrialDataset::new(
                ds.treatment().to_vec(),
                OutcomeKind::Continuous,
                (0..ds.n()).map(|i| ds.outcome_observed()[i].then_some(ds.outcome()[i])).collect(),
                vec![Covariate::new("x", CovariateKind::Continuous, shifted).unwrap()],
            ).unwrap();
            let m = asd(&moved, "x", None).unwrap();
            prop_assert!((base - m).abs() < 1e-8 * (1.0 + base));
        }
    }
}
