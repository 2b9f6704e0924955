use perfquant::model::{forward_model, GammaVariate, KineticParams};
use perfquant::signal::{
    build_dual_bolus_aif, calibrate, concentration_from_signal, estimate_psi, gd_from_t1, relative_enhancement,
    signal_from_concentration, t1_from_gd, t1_from_signal, SequenceParams, DUAL_BOLUS_SCALE,
};
use perfquant::{CurveKind, SampledCurve};

// Signal equation bracket at default sequence constants (n = 40), from
// 40-digit evaluation (mpmath).
const F_T1_1S: f64 = 0.088_406_332_562_884_573_932_464_018_898_55;
const F_T1_1_2S: f64 = 0.074_706_412_042_582_538_201_986_627_394_94;

#[test]
fn signal_matches_extended_precision() {
    let seq = SequenceParams::default();
    assert!((seq.signal_from_t1(1.0) - F_T1_1S).abs() < 1e-12 * F_T1_1S);
}

#[test]
fn psi_from_baseline() {
    let seq = SequenceParams::default().with_t10(1.2);
    let psi = estimate_psi(&seq, &[490.0, 500.0, 510.0]).unwrap();
    let expect = 500.0 / F_T1_1_2S;
    assert!((psi - expect).abs() < 1e-9 * expect);
}

#[test]
fn signal_is_strictly_decreasing_in_t1() {
    let seq = SequenceParams::default();
    let grid: Vec<f64> = (0..1000).map(|i| 1e-3 + i as f64 * (10.0 - 1e-3) / 999.0).collect();
    for w in grid.windows(2) {
        assert!(seq.signal_from_t1(w[1]) < seq.signal_from_t1(w[0]), "at T1 = {}", w[1]);
    }
}

#[test]
fn t1_round_trip_log_sweep() {
    let seq = SequenceParams::default();
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let t1 = 0.05 * (100.0f64).powf(i as f64 / 49.0);
        let back = t1_from_signal(&seq, seq.signal_from_t1(t1)).unwrap();
        worst = worst.max((back - t1).abs());
    }
    assert!(worst < 1e-5, "max |dT1| = {worst}");
}

#[test]
fn concentration_round_trip() {
    let seq = SequenceParams::default();
    let mut worst: f64 = 0.0;
    for i in 0..=500 {
        let c = 5.0 * i as f64 / 500.0;
        let s = seq.signal_from_t1(t1_from_gd(&seq, c));
        let back = gd_from_t1(&seq, t1_from_signal(&seq, s).unwrap());
        worst = worst.max((back - c).abs());
    }
    assert!(worst < 1e-5, "max |dc| = {worst}");
}

#[test]
fn bolus_round_trip_through_curves() {
    let seq = SequenceParams::default().with_t10(1.8);
    let bolus = GammaVariate::default().sample(0.5, 181).unwrap();
    let sig = signal_from_concentration(&seq, &bolus).unwrap();
    let cal = calibrate(&seq, &sig, 3).unwrap();
    assert!((cal.psi - 1.0).abs() < 1e-12);
    let back = concentration_from_signal(&cal, &sig, CurveKind::Aif).unwrap();
    let worst = back
        .curve
        .values()
        .iter()
        .zip(bolus.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "max |dc| = {worst}");
    assert_eq!(back.curve.kind(), CurveKind::Aif);
}

/// Signal-equation slope ratio `R10 f'(R1) / f` at R1 = R10 by central
/// differences in R1. This is the small-concentration limit of
/// relative-enhancement / true concentration.
fn re_limit_ratio(seq: &SequenceParams) -> f64 {
    let r10 = 1.0 / seq.t10;
    let h = 1e-6;
    let f = |r: f64| seq.signal_from_t1(1.0 / r);
    r10 * (f(r10 + h) - f(r10 - h)) / (2.0 * h) / f(r10)
}

fn re_vs_full(seq: &SequenceParams, c: f64) -> (f64, f64) {
    let mut v = vec![0.0; 3];
    v.extend(std::iter::repeat(c).take(3));
    let conc = SampledCurve::uniform(0.0, 1.0, v, CurveKind::Tissue).unwrap();
    let sig = signal_from_concentration(seq, &conc).unwrap();
    let re = relative_enhancement(&sig, seq, 3).unwrap().values()[4];
    let cal = calibrate(seq, &sig, 3).unwrap();
    let full = concentration_from_signal(&cal, &sig, CurveKind::Tissue)
        .unwrap()
        .curve
        .values()[4];
    (re, full)
}

#[test]
fn relative_enhancement_low_concentration_regime() {
    // Myocardial-to-blood T10 at 3T; see the ledger for the T10 dependence.
    let seq = SequenceParams::default().with_t10(1.5);
    for c in [0.01, 0.025, 0.05, 0.1] {
        let (re, full) = re_vs_full(&seq, c);
        assert!((re - full).abs() / full < 0.10, "c = {c}: {re} vs {full}");
    }
}

#[test]
fn relative_enhancement_limit_is_signal_slope_ratio() {
    for t10 in [1.0, 1.2, 1.5, 1.8] {
        let seq = SequenceParams::default().with_t10(t10);
        let (re, full) = re_vs_full(&seq, 0.01);
        let limit = re_limit_ratio(&seq);
        assert!((re / full / limit - 1.0).abs() < 0.01, "T10 = {t10}");
    }
}

#[test]
#[ignore = "the linear approximation carries a 6-9% slope bias at finite TSAT and readout length; see relative_enhancement_limit_is_signal_slope_ratio"]
fn relative_enhancement_ratio_tends_to_one() {
    let seq = SequenceParams::default();
    let (re, full) = re_vs_full(&seq, 0.01);
    assert!((re / full - 1.0).abs() < 0.01, "ratio {}", re / full);
}

#[test]
fn dual_bolus_is_linear_through_the_model() {
    let pre = GammaVariate {
        peak: 0.5,
        ..GammaVariate::default()
    }
    .sample(0.5, 181)
    .unwrap();
    let main = build_dual_bolus_aif(&pre, DUAL_BOLUS_SCALE, 0.0).unwrap();
    let p = KineticParams::new(1.2, 0.08, 0.18, 0.65, 1.0).unwrap();
    let a = forward_model(&p, &pre, pre.times()).unwrap();
    let b = forward_model(&p, &main, pre.times()).unwrap();
    for (x, y) in a.values().iter().zip(b.values()) {
        assert!((y - 10.0 * x).abs() <= 1e-12 * y.abs().max(1e-15));
    }
}
