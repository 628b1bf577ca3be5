use std::collections::BTreeSet;

use stfuse::dataset::{
    assemble_window, generate_synthetic, parse_csv, split_ood_regions, split_temporal, target_counts, FeatureSchema,
    NormStats, ShiftSpec, SyntheticSpec,
};

fn spec(seed: u64, missing_rate: f64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        missing_rate,
        ..Default::default()
    }
}

#[test]
fn same_seed_same_csv() {
    let a = generate_synthetic(&spec(3, 0.2)).unwrap().to_csv_string();
    let b = generate_synthetic(&spec(3, 0.2)).unwrap().to_csv_string();
    let c = generate_synthetic(&spec(4, 0.2)).unwrap().to_csv_string();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn csv_output_parses_back() {
    let ds = generate_synthetic(&SyntheticSpec {
        total_days: 400,
        n_regions: 2,
        ..spec(5, 0.3)
    })
    .unwrap();
    let back = parse_csv(&ds.to_csv_string(), &FeatureSchema::hydrology()).unwrap();
    assert_eq!(back.records(), ds.records());
}

#[test]
fn zero_missing_rate_keeps_everything() {
    let ds = generate_synthetic(&spec(1, 0.0)).unwrap();
    assert!(ds.records().iter().all(|r| r.present.iter().all(|p| *p) && r.target.is_some()));
}

#[test]
fn missing_fraction_tracks_rate() {
    let ds = generate_synthetic(&spec(2, 0.5)).unwrap();
    let (mut hidden, mut cells) = (0usize, 0usize);
    for r in ds.records() {
        // day of the year is never hidden
        assert!(r.present[0]);
        for p in &r.present[1..] {
            cells += 1;
            hidden += usize::from(!p);
        }
    }
    assert!(cells >= 10_000);
    let frac = hidden as f64 / cells as f64;
    assert!((frac - 0.5).abs() < 0.02, "missing fraction {frac}");
}

#[test]
fn masks_do_not_change_underlying_values() {
    let a = generate_synthetic(&spec(9, 0.0)).unwrap();
    let b = generate_synthetic(&spec(9, 0.4)).unwrap();
    for (ra, rb) in a.records().iter().zip(b.records()) {
        assert_eq!(ra.target, rb.target);
        for k in 0..ra.features.len() {
            if rb.present[k] {
                assert_eq!(ra.features[k], rb.features[k]);
            }
        }
    }
}

#[test]
fn shift_applies_after_day_only() {
    let base = generate_synthetic(&spec(6, 0.0)).unwrap();
    let shifted = generate_synthetic(&SyntheticSpec {
        shift: Some(ShiftSpec {
            features: vec![2],
            level: 5.0,
            after_day: 600,
        }),
        ..spec(6, 0.0)
    })
    .unwrap();
    for (a, b) in base.records().iter().zip(shifted.records()) {
        if a.day < 600 {
            assert_eq!(a, b);
        } else {
            assert!((b.features[2] - a.features[2] - 5.0).abs() < 1e-9);
            assert_eq!(a.features[3], b.features[3]);
            // the target follows the shifted driver
            let dy = b.target.unwrap() - a.target.unwrap();
            assert!((dy - 0.55 * 5.0).abs() < 1e-9);
        }
    }
    let bad = SyntheticSpec {
        shift: Some(ShiftSpec {
            features: vec![99],
            level: 1.0,
            after_day: 0,
        }),
        ..spec(6, 0.0)
    };
    assert!(generate_synthetic(&bad).is_err());
}

#[test]
fn invalid_parameters_are_rejected() {
    assert!(generate_synthetic(&spec(1, 1.0)).is_err());
    assert!(generate_synthetic(&SyntheticSpec {
        total_days: 100,
        ..Default::default()
    })
    .is_err());
    assert!(generate_synthetic(&SyntheticSpec {
        n_regions: 0,
        ..Default::default()
    })
    .is_err());
}

#[test]
fn ood_split_is_region_disjoint() {
    let ds = generate_synthetic(&SyntheticSpec {
        target_rate: 0.3,
        ..spec(8, 0.2)
    })
    .unwrap();
    let n = ds.regions().len();
    let (train, test) = split_ood_regions(&ds, n - 1).unwrap();
    assert_eq!(test.regions().len(), 1);
    let a: BTreeSet<_> = train.regions().iter().collect();
    let b: BTreeSet<_> = test.regions().iter().collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(a.len() + b.len(), n);
    // training regions are the ones with most targets
    let counts = target_counts(&ds);
    let min_train = train.regions().iter().map(|r| counts[r]).min().unwrap();
    assert!(test.regions().iter().all(|r| counts[r] <= min_train));
    assert_eq!(test.norm_stats(), train.norm_stats());
    assert!(split_ood_regions(&ds, n).is_err());
    assert!(split_ood_regions(&ds, 0).is_err());
}

#[test]
fn windows_reach_back_a_year_and_pad() {
    let ds = generate_synthetic(&spec(1, 0.2)).unwrap();
    let w = assemble_window(&ds, "r02", 400, 30).unwrap();
    let yearly: Vec<i64> = w.yearly.iter().map(|r| r.day).collect();
    assert_eq!(yearly.first(), Some(&370));
    assert_eq!(yearly.last(), Some(&40));
    let weekly: Vec<i64> = w.weekly.iter().map(|r| r.day).collect();
    assert_eq!(weekly, (393..400).rev().collect::<Vec<_>>());
    assert_eq!(w.image_window.first().map(|r| r.day), Some(399));
    assert_eq!(w.image_window.last().map(|r| r.day), Some(370));

    let w = assemble_window(&ds, "r02", 3, 30).unwrap();
    assert_eq!(w.weekly.iter().filter(|r| r.day < 0).count(), 4);
    assert_eq!(w.yearly.iter().filter(|r| r.day < 0).count(), 12);
    assert!(w.yearly.iter().all(|r| r.target.is_none() && r.present.iter().all(|p| !p)));
}

#[test]
fn statistics_come_from_training_days_only() {
    let ds = generate_synthetic(&spec(4, 0.2)).unwrap();
    let (train, test) = split_temporal(&ds, 0.5).unwrap();
    let early: Vec<_> = ds.records().iter().filter(|r| r.day < 400).cloned().collect();
    let expected = NormStats::compute(&early, ds.schema().k());
    assert_eq!(train.norm_stats(), Some(&expected));
    assert_eq!(test.norm_stats(), Some(&expected));
    assert_eq!(test.sample_days(), (400, 800));
    assert!(train.records().iter().all(|r| r.day < 400));

    let inflated = ds.map_records(|r| {
        if r.day >= 400 {
            r.target = r.target.map(|t| t + 1e6);
        }
    });
    let (train2, _) = split_temporal(&inflated, 0.5).unwrap();
    assert_eq!(train2.norm_stats(), Some(&expected));
}
