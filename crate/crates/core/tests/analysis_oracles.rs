use std::collections::BTreeMap;

use perfquant::analysis::{
    assign_segments, bounding_box_temporal_variance, classify, concordance, display_angle, mean_of_lowest,
    per_vessel_from_means, roc_analysis, Layer, Polarity, Segment, SegmentConfig, SliceLevel, Territory, BBOX_MARGIN,
    BBOX_QUANTILE, PATIENT_THRESHOLD,
};
use perfquant::image::{ImageSeries, Mask};
use perfquant::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 80;
const C: f64 = 40.0;
const R_IN: f64 = 18.0;
const R_OUT: f64 = 30.0;

fn annulus() -> Mask {
    Mask::from_fn(N, N, |y, x| {
        let r = (y as f64 - C).hypot(x as f64 - C);
        (R_IN..=R_OUT).contains(&r)
    })
}

fn rv_at(deg: f64) -> [(f64, f64); 2] {
    let p = |d: f64| {
        let a = d.to_radians();
        (C - R_OUT * a.sin(), C + R_OUT * a.cos())
    };
    [p(deg), p(deg + 100.0)]
}

#[test]
fn basal_sectors_have_equal_area() {
    // Large enough that lattice pixels lying exactly on sector boundaries
    // are a negligible fraction.
    let (n, c) = (200usize, 100.0);
    let mask = Mask::from_fn(n, n, |y, x| (50.0..=90.0).contains(&(y as f64 - c).hypot(x as f64 - c)));
    let rv = [(c, c + 90.0), (c - 90.0, c)];
    let seg = assign_segments(&mask, rv, SliceLevel::Basal, Some((c, c)), &SegmentConfig::default()).unwrap();
    let mut counts = [0usize; 6];
    for &l in &seg.labels {
        if l > 0 {
            counts[(Segment::from_label(l).unwrap().aha - 1) as usize] += 1;
        }
    }
    let mean = counts.iter().sum::<usize>() as f64 / 6.0;
    for c in counts {
        assert!((c as f64 - mean).abs() <= 0.02 * mean, "{counts:?}");
    }
}

#[test]
fn segments_partition_the_mask() {
    let mask = annulus();
    for level in [SliceLevel::Basal, SliceLevel::Mid, SliceLevel::Apical] {
        let seg = assign_segments(&mask, rv_at(37.0), level, None, &SegmentConfig::default()).unwrap();
        for (i, &l) in seg.labels.iter().enumerate() {
            assert_eq!(l > 0, mask.data()[i]);
            if l > 0 {
                assert_eq!(Segment::from_label(l).unwrap().level(), level);
            }
        }
        assert_eq!(seg.labels_present().len(), 2 * level.sectors());
    }
}

#[test]
fn rotating_rv_points_shifts_labels_by_one_sector() {
    let mask = annulus();
    let cfg = SegmentConfig::default();
    let a = assign_segments(&mask, rv_at(10.0), SliceLevel::Mid, Some((C, C)), &cfg).unwrap();
    let b = assign_segments(&mask, rv_at(70.0), SliceLevel::Mid, Some((C, C)), &cfg).unwrap();
    let mut checked = 0;
    for i in mask.indices() {
        let (y, x) = ((i / N) as f64, (i % N) as f64);
        // Skip pixels on a sector boundary, where rounding may differ.
        let rel = (display_angle(y, x, C, C).to_degrees() - 10.0).rem_euclid(60.0);
        if rel.min(60.0 - rel) < 1e-6 {
            continue;
        }
        let sa = Segment::from_label(a.labels[i]).unwrap();
        let sb = Segment::from_label(b.labels[i]).unwrap();
        assert_eq!(sa.layer, sb.layer);
        let expect = 7 + ((sa.aha - 7) + 5) % 6;
        assert_eq!(sb.aha, expect);
        checked += 1;
    }
    assert!(checked > 1000);
}

#[test]
fn inner_half_of_every_ray_is_endocardial() {
    let mask = annulus();
    let seg = assign_segments(
        &mask,
        rv_at(0.0),
        SliceLevel::Mid,
        Some((C, C)),
        &SegmentConfig::default(),
    )
    .unwrap();
    for k in 0..360 {
        let a = (k as f64).to_radians();
        let mut run: Vec<(f64, usize)> = Vec::new();
        let mut r = 0.0;
        while r < 39.0 {
            let y = (C - r * a.sin()).round() as usize;
            let x = (C + r * a.cos()).round() as usize;
            if mask.get(y, x) {
                run.push((r, y * N + x));
            }
            r += 0.05;
        }
        let (r0, r1) = (run.first().unwrap().0, run.last().unwrap().0);
        for &(_, i) in &run {
            let (py, px) = ((i / N) as f64, (i % N) as f64);
            let rp = (py - C).hypot(px - C);
            let layer = Segment::from_label(seg.labels[i]).unwrap().layer;
            // The ray oracle uses the annulus extent seen along this ray.
            let mid = 0.5 * (r0 + r1);
            if (rp - mid).abs() > 0.75 {
                assert_eq!(layer == Layer::Endo, rp < mid, "ray {k} pixel r={rp} mid={mid}");
            }
        }
    }
}

#[test]
fn segment_input_errors() {
    let empty = Mask::from_fn(8, 8, |_, _| false);
    assert!(matches!(
        assign_segments(&empty, rv_at(0.0), SliceLevel::Mid, None, &SegmentConfig::default()),
        Err(Error::EmptyMask)
    ));
    let p = (1.0, 2.0);
    assert!(matches!(
        assign_segments(&annulus(), [p, p], SliceLevel::Mid, None, &SegmentConfig::default()),
        Err(Error::CoincidentRvPoints)
    ));
}

fn means(mut f: impl FnMut(u8) -> f64) -> BTreeMap<u8, f64> {
    (7..=12u8).flat_map(|a| [a, a + 16]).map(|l| (l, f(l))).collect()
}

#[test]
fn equal_segments_give_that_value() {
    for s in per_vessel_from_means(&means(|_| 1.7)).unwrap() {
        assert_eq!(s.statistic, 1.7);
    }
}

#[test]
fn per_vessel_statistic_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let base = means(|_| rng.random_range(0.5..3.0));
        let before = per_vessel_from_means(&base).unwrap();
        let mut lowered = base.clone();
        let key = *base.keys().nth(rng.random_range(0..base.len())).unwrap();
        *lowered.get_mut(&key).unwrap() -= rng.random_range(0.0..1.0);
        let after = per_vessel_from_means(&lowered).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!(b.statistic <= a.statistic);
        }
    }
}

#[test]
fn too_few_segments_is_an_error() {
    let mut m = means(|_| 1.0);
    m.remove(&7);
    assert!(matches!(
        per_vessel_from_means(&m),
        Err(Error::InsufficientSegments { found: 3, .. })
    ));
}

#[test]
fn classification_is_threshold_monotone() {
    let stats = per_vessel_from_means(&means(|l| 0.8 + 0.1 * (l % 16) as f64)).unwrap();
    let mut prev: Option<Vec<bool>> = None;
    for k in 0..60 {
        let thr = 0.5 + 0.05 * k as f64;
        let pos: Vec<bool> = classify(&stats, thr)
            .unwrap()
            .vessels
            .iter()
            .map(|v| v.positive)
            .collect();
        if let Some(p) = &prev {
            for (a, b) in p.iter().zip(&pos) {
                assert!(!a || *b);
            }
        }
        prev = Some(pos);
    }
    assert!(classify(&stats, 0.0).is_err());
    let d = classify(&stats, PATIENT_THRESHOLD).unwrap();
    assert_eq!(d.patient_positive, d.vessels.iter().any(|v| v.positive));
}

#[test]
fn auc_equals_pairwise_concordance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut done = 0;
    while done < 25 {
        let n = rng.random_range(6..40);
        // Coarse scores so that ties occur.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 * 0.25).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        for pol in [Polarity::Higher, Polarity::Lower] {
            let r = roc_analysis(&scores, &labels, pol).unwrap();
            assert_eq!(r.auc, concordance(&scores, &labels, pol));
        }
        done += 1;
    }
}

#[test]
fn roc_curve_is_monotone_and_youden_is_maximal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scores: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<bool> = scores.iter().map(|&s| s + rng.random_range(-0.3..0.3) > 0.5).collect();
    let r = roc_analysis(&scores, &labels, Polarity::Higher).unwrap();
    for w in r.points.windows(2) {
        assert!(w[1].sensitivity >= w[0].sensitivity && w[1].specificity <= w[0].specificity);
    }
    let (first, last) = (r.points[0], *r.points.last().unwrap());
    assert_eq!((first.sensitivity, first.specificity), (0.0, 1.0));
    assert_eq!((last.sensitivity, last.specificity), (1.0, 0.0));
    let best = r
        .points
        .iter()
        .map(|p| p.sensitivity + p.specificity - 1.0)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.youden, best);
}

#[test]
fn four_lowest_on_fixed_vectors() {
    assert_eq!(
        mean_of_lowest(&[2.0, 1.0, 1.5, 1.2, 3.0, 0.8, 2.2, 1.9], 4).unwrap(),
        1.125
    );
    assert_eq!(mean_of_lowest(&[1.0, 1.0, 1.0, 1.0], 4).unwrap(), 1.0);
    assert_eq!(mean_of_lowest(&[4.0, 3.0, 2.0, 1.0, 0.0], 4).unwrap(), 1.5);
}

fn disk_series(disks: &[((f64, f64), f64)]) -> ImageSeries {
    let (nt, n) = (20, 96);
    let mut data = Vec::with_capacity(nt * n * n);
    for t in 0..nt {
        let amp = (t as f64 * 0.5).sin().abs() * 100.0;
        for y in 0..n {
            for x in 0..n {
                let inside = disks
                    .iter()
                    .any(|&((cy, cx), r)| (y as f64 - cy).hypot(x as f64 - cx) <= r);
                data.push(if inside { 50.0 + amp } else { 50.0 });
            }
        }
    }
    ImageSeries::new(nt, n, n, (1.0, 1.0), data).unwrap()
}

#[test]
fn bounding_box_covers_both_pools() {
    let s = disk_series(&[((40.0, 30.0), 6.0), ((48.0, 58.0), 8.0)]);
    let b = bounding_box_temporal_variance(&s, BBOX_QUANTILE, BBOX_MARGIN).unwrap();
    assert_eq!((b.y0, b.y1, b.x0, b.x1), (34 - 16, 56 + 1 + 16, 24 - 16, 66 + 1 + 16));
}

#[test]
fn merged_or_absent_pools_are_rejected() {
    let merged = disk_series(&[((40.0, 40.0), 8.0), ((40.0, 52.0), 8.0)]);
    assert!(matches!(
        bounding_box_temporal_variance(&merged, BBOX_QUANTILE, BBOX_MARGIN),
        Err(Error::ComponentCount { found: 1 })
    ));
    let flat = ImageSeries::new(12, 16, 16, (1.0, 1.0), vec![3.0; 12 * 256]).unwrap();
    assert!(matches!(
        bounding_box_temporal_variance(&flat, BBOX_QUANTILE, BBOX_MARGIN),
        Err(Error::ComponentCount { found: 0 })
    ));
    assert!(bounding_box_temporal_variance(&ImageSeries::zeros(5, 16, 16).unwrap(), 0.95, 16).is_err());
}

#[test]
fn territory_of_every_layered_segment() {
    for l in 1..=32u8 {
        let s = Segment::from_label(l).unwrap();
        assert!(Territory::ALL.contains(&s.territory()));
    }
}
