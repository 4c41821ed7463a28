use std::fs;

use proptest::prelude::*;
use wishart_vi::data::{load_prices, make_splits, split_data, to_log_returns, PriceSchema, ReturnOptions, ReturnsDataset};
use wishart_vi::Error;

const PRICES: &str = "\
date,AAA,BBB,CCC
2024-01-02,100.0,20.0,5.0
2024-01-03,101.5,19.5,5.1
2024-01-04,,19.8,5.05
2024-01-05,102.0,20.4,5.2
2024-01-08,99.0,20.1,5.3
2024-01-09,100.5,20.0,5.25
";

#[test]
fn prices_file_to_returns_and_back_through_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prices.csv");
    fs::write(&path, PRICES).unwrap();
    let table = load_prices(&path, &PriceSchema::default()).unwrap();
    assert_eq!(table.labels, ["AAA", "BBB", "CCC"]);
    // the blank cell is forward filled
    assert_eq!(table.values[(2, 0)], 101.5);

    let raw = to_log_returns(
        &table,
        &ReturnOptions {
            demean: false,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(raw.len(), 5);
    for i in 0..5 {
        for j in 0..3 {
            let want = (table.values[(i + 1, j)] / table.values[(i, j)]).ln();
            assert!((raw.y[(i, j)] - want).abs() < 1e-15);
        }
    }
    assert_eq!(raw.x, vec![0.2, 0.4, 0.6, 0.8, 1.0]);

    let demeaned = to_log_returns(&table, &ReturnOptions::default()).unwrap();
    for j in 0..3 {
        assert!(demeaned.y.column(j).mean().abs() < 1e-12);
    }

    let cache = dir.path().join("returns.csv");
    demeaned.write_cache(&cache).unwrap();
    let back = ReturnsDataset::read_cache(&cache).unwrap();
    assert_eq!(back.x, demeaned.x);
    assert_eq!(back.y, demeaned.y);
    assert_eq!(back.labels, demeaned.labels);
}

#[test]
fn calendar_spacing_follows_timestamp_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prices.csv");
    fs::write(&path, PRICES).unwrap();
    let table = load_prices(&path, &PriceSchema::default()).unwrap();
    let ds = to_log_returns(
        &table,
        &ReturnOptions {
            calendar_spacing: true,
            ..Default::default()
        },
    )
    .unwrap();
    // Friday to Monday is three days, the other gaps one day
    let gaps: Vec<f64> = ds.x.windows(2).map(|w| w[1] - w[0]).collect();
    assert!((gaps[2] / gaps[1] - 3.0).abs() < 1e-12, "{gaps:?}");
    assert_eq!(*ds.x.last().unwrap(), 1.0);
}

#[test]
fn selected_columns_and_missing_column_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prices.csv");
    fs::write(&path, PRICES).unwrap();
    let schema = PriceSchema {
        columns: Some(vec!["CCC".into(), "AAA".into()]),
        ..Default::default()
    };
    let table = load_prices(&path, &schema).unwrap();
    assert_eq!(table.labels, ["CCC", "AAA"]);
    assert_eq!(table.values[(0, 0)], 5.0);

    let schema = PriceSchema {
        columns: Some(vec!["ZZZ".into()]),
        ..Default::default()
    };
    let err = load_prices(&path, &schema).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert!(err.to_string().contains("ZZZ"));
}

#[test]
fn split_data_maps_each_training_window_into_the_unit_interval() {
    let ds = ReturnsDataset::new(
        (1..=60).map(|i| i as f64 / 60.0).collect(),
        nalgebra::DMatrix::from_fn(60, 2, |i, j| ((i * 3 + j) as f64).sin()),
        vec!["a".into(), "b".into()],
        wishart_vi::data::Provenance {
            source: "test".into(),
            transform: "none".into(),
            column_means: vec![0.0, 0.0],
        },
    )
    .unwrap();
    let plan = make_splits(60, 3, 5, 0.1, 10).unwrap();
    for split in &plan.splits {
        let sd = split_data(&ds, split).unwrap();
        assert_eq!(*sd.x_train.last().unwrap(), 1.0);
        assert!(sd.x_train[0] > 0.0);
        let step = sd.x_train[1] - sd.x_train[0];
        let mut all = sd.x_train.clone();
        all.extend(&sd.x_val);
        all.extend(&sd.x_test);
        for w in all.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-12);
        }
        assert_eq!(sd.y_test.row(0), ds.y.row(split.test.start));
    }
}

proptest! {
    #[test]
    fn plans_tile_the_tail_without_overlap(
        n_splits in 1usize..12,
        horizon in 1usize..15,
        extra in 0usize..200,
        val_pct in 0usize..20,
    ) {
        let min_train = 10;
        let n = n_splits * horizon + min_train + extra;
        let val_fraction = val_pct as f64 / 100.0;
        let plan = match make_splits(n, n_splits, horizon, val_fraction, min_train) {
            Ok(p) => p,
            Err(e) => {
                // only an unusable validation fraction may be rejected here
                prop_assert!(e.to_string().contains("val_fraction"), "{}", e);
                return Ok(());
            }
        };
        prop_assert_eq!(plan.splits.len(), n_splits);
        prop_assert_eq!(plan.splits.last().unwrap().test.end, n);
        prop_assert_eq!(plan.splits[0].test.start, n - n_splits * horizon);
        for (i, s) in plan.splits.iter().enumerate() {
            prop_assert_eq!(s.test.len(), horizon);
            let end = s.validation.as_ref().map_or(s.train.end, |v| v.end);
            prop_assert_eq!(end, s.test.start);
            if let Some(v) = &s.validation {
                prop_assert_eq!(i, plan.tuning_split);
                prop_assert_eq!(v.start, s.train.end);
            }
            prop_assert!(s.train.len() >= min_train);
        }
        for w in plan.splits.windows(2) {
            prop_assert_eq!(w[0].test.end, w[1].test.start);
        }
    }

    #[test]
    fn infeasible_sizes_are_rejected(n_splits in 1usize..12, horizon in 1usize..15, short in 1usize..10) {
        let min_train = 10;
        let n = n_splits * horizon + min_train - short;
        let err = make_splits(n, n_splits, horizon, 0.0, min_train).unwrap_err();
        let is_config = matches!(err, Error::Config { .. });
        prop_assert!(is_config, "{}", err);
    }
}
