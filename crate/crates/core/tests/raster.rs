use stfuse::dataset::{assemble_window, generate_synthetic, split_temporal, NormStats, Record, SyntheticSpec, VarStats, WindowBundle};
use stfuse::raster::{rasterize, read_pgm, write_pgm, RasterConfig, RasterError, TrendImage};

/// Two features; feature 0 follows `values` (oldest first), the rest is constant zero.
fn bundle(values: &[f64]) -> WindowBundle {
    let rec = |day: i64, v: f64| Record {
        region: "r00".into(),
        day,
        features: vec![v, 0.0],
        present: vec![true, true],
        target: Some(0.0),
    };
    let n = values.len() as i64;
    WindowBundle {
        current: rec(n, 0.0),
        weekly: Vec::new(),
        yearly: Vec::new(),
        // newest first
        image_window: values.iter().enumerate().rev().map(|(j, &v)| rec(j as i64, v)).collect(),
    }
}

fn unit_stats(mean: f64, std: f64) -> NormStats {
    NormStats {
        features: vec![VarStats { mean, std }; 2],
        target: VarStats { mean: 0.0, std: 1.0 },
    }
}

fn lit_rows(cell: &[f64], w: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = cell.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(i, _)| i / w).collect();
    rows.dedup();
    rows
}

#[test]
fn constant_series_draw_horizontal_lines() {
    let cfg = RasterConfig::with_cell(65);
    for (raw, row) in [(0.0, 32), (3.0, 0), (-3.0, 64), (7.5, 0)] {
        let img = rasterize(&bundle(&[raw; 30]), &unit_stats(0.0, 1.0), &cfg).unwrap();
        let cell = img.cell(0);
        assert_eq!(lit_rows(&cell, 65), vec![row], "value {raw}");
        assert_eq!(cell.iter().filter(|p| **p > 0.0).count(), 65);
    }
}

#[test]
fn level_shift_translates_the_stroke() {
    // 60 pixel rows span 6σ, so a half-σ shift moves the stroke 5 rows up
    let cfg = RasterConfig::with_cell(61);
    let values: Vec<f64> = (1..=20).map(|j| 0.137 * j as f64 - 1.0).collect();
    let stats = unit_stats(0.0, 1.0);
    let base = rasterize(&bundle(&values), &stats, &cfg).unwrap().cell(0);
    let shifted_vals: Vec<f64> = values.iter().map(|v| v + 0.5).collect();
    let shifted = rasterize(&bundle(&shifted_vals), &stats, &cfg).unwrap().cell(0);
    let w = 61;
    for y in 0..61 {
        for x in 0..w {
            let expect = if y + 5 < 61 { base[(y + 5) * w + x] } else { 0.0 };
            assert_eq!(shifted[y * w + x], expect, "pixel ({x}, {y})");
        }
    }
    // the same shift expressed through the statistics gives the same image
    let via_stats = rasterize(&bundle(&values), &unit_stats(-0.5, 1.0), &cfg).unwrap().cell(0);
    assert_eq!(via_stats, shifted);
}

#[test]
fn every_subimage_has_a_connected_stroke() {
    let ds = generate_synthetic(&SyntheticSpec {
        missing_rate: 0.3,
        ..Default::default()
    })
    .unwrap();
    let (train, _) = split_temporal(&ds, 0.5).unwrap();
    let b = assemble_window(&ds, "r01", 450, 30).unwrap();
    let cfg = RasterConfig::with_cell(32);
    let img = rasterize(&b, train.norm_stats().unwrap(), &cfg).unwrap();
    assert_eq!((img.width, img.height), (96, 96));
    for v in 0..9 {
        let cell = img.cell(v);
        for x in 0..32 {
            assert!((0..32).any(|y| cell[y * 32 + x] > 0.0), "subimage {v} column {x} empty");
        }
    }
}

#[test]
fn absent_history_sits_on_the_mean_line() {
    let mut b = bundle(&[1.0; 30]);
    for r in &mut b.image_window {
        r.present = vec![false, false];
        r.target = None;
    }
    let img = rasterize(&b, &unit_stats(5.0, 2.0), &RasterConfig::with_cell(65)).unwrap();
    for v in 0..3 {
        assert_eq!(lit_rows(&img.cell(v), 65), vec![32]);
    }
    // the unused fourth cell of the 2x2 grid stays dark
    assert!(img.cell(3).iter().all(|p| *p == 0.0));
}

#[test]
fn mismatched_statistics_are_rejected() {
    let stats = NormStats {
        features: vec![VarStats { mean: 0.0, std: 1.0 }],
        target: VarStats { mean: 0.0, std: 1.0 },
    };
    assert!(matches!(
        rasterize(&bundle(&[0.0; 5]), &stats, &RasterConfig::with_cell(8)),
        Err(RasterError::Config(_))
    ));
    assert!(rasterize(&bundle(&[0.0; 5]), &unit_stats(0.0, 1.0), &RasterConfig::with_cell(1)).is_err());
}

#[test]
fn pgm_round_trip_and_header_checks() {
    let img = rasterize(&bundle(&[0.1, 0.9, -0.4, 1.2]), &unit_stats(0.0, 1.0), &RasterConfig::with_cell(16)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgm");
    write_pgm(&img, &path).unwrap();
    let back = read_pgm(&path).unwrap();
    assert_eq!((back.width, back.height), (img.width, img.height));
    assert_eq!(back.pixels, img.pixels);
    assert_eq!(back.to_pgm(), img.to_pgm());

    let mut wide = b"P5\n2 2\n65535\n".to_vec();
    wide.extend([0u8; 8]);
    assert!(matches!(TrendImage::from_pgm(&wide), Err(RasterError::Malformed(_))));
    assert!(TrendImage::from_pgm(b"P2\n1 1\n255\n0").is_err());
    assert!(TrendImage::from_pgm(b"P5\n2 2\n255\n\x00\x00").is_err());
    let commented = b"P5\n# note\n1 1\n255\n\xff";
    assert_eq!(TrendImage::from_pgm(commented).unwrap().pixels, vec![1.0]);
}
