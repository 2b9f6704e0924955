//! Signal intensity <-> T1 <-> gadolinium concentration for a
//! saturation-recovery spoiled gradient echo readout.

use serde::{Deserialize, Serialize};

use crate::curve::{CurveKind, SampledCurve};
use crate::error::{Error, Result};

/// T1 search bracket for the signal inversion, seconds.
pub const T1_BRACKET: (f64, f64) = (1e-3, 10.0);

/// Acquisition constants of the signal equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceParams {
    #[serde(rename = "TR_s")]
    pub tr: f64,
    #[serde(rename = "TSAT_s")]
    pub tsat: f64,
    #[serde(rename = "alpha_deg")]
    pub flip_deg: f64,
    /// Excitation pulses up to the k-space centre.
    pub n: u32,
    #[serde(rename = "r1_L_per_mmol_s")]
    pub r1: f64,
    #[serde(rename = "T10_s")]
    pub t10: f64,
    #[serde(rename = "S0")]
    pub s0: f64,
    pub psi: f64,
}

impl Default for SequenceParams {
    fn default() -> Self {
        Self {
            tr: 0.003,
            tsat: 0.120,
            flip_deg: 15.0,
            n: 40,
            r1: 4.5,
            t10: 1.2,
            s0: 1.0,
            psi: 1.0,
        }
    }
}

impl SequenceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("sequence: {m}")));
        if !(self.tr > 0.0 && self.tsat > 0.0 && self.t10 > 0.0) {
            return bad("TR, TSAT and T10 must be > 0");
        }
        if !(self.flip_deg > 0.0 && self.flip_deg < 90.0) {
            return bad("flip angle must lie in (0, 90) degrees");
        }
        if self.n < 1 {
            return bad("n must be >= 1");
        }
        if !(self.r1 > 0.0) {
            return bad("r1 must be > 0");
        }
        if !(self.s0 > 0.0) {
            return bad("S0 must be > 0");
        }
        if !(self.psi > 0.0 && self.psi.is_finite()) {
            return bad("psi must be > 0");
        }
        Ok(())
    }

    pub fn with_t10(mut self, t10: f64) -> Self {
        self.t10 = t10;
        self
    }

    /// Dimensionless recovery term of the signal equation (the bracket).
    pub fn recovery(&self, t1: f64) -> f64 {
        let e_tr = (-self.tr / t1).exp();
        let a = self.flip_deg.to_radians().cos() * e_tr;
        let an = a.powi(self.n as i32 - 1);
        let sat = -(-self.tsat / t1).exp_m1();
        let rf = -(-self.tr / t1).exp_m1();
        // a <= cos(flip) < 1, so the geometric factor is well defined.
        let geom = (1.0 - an) / (1.0 - a);
        sat * an + rf * geom
    }

    pub fn signal_from_t1(&self, t1: f64) -> f64 {
        self.psi * self.s0 * self.recovery(t1)
    }

    /// Attainable signal range over the T1 bracket.
    pub fn signal_range(&self) -> (f64, f64) {
        (self.signal_from_t1(T1_BRACKET.1), self.signal_from_t1(T1_BRACKET.0))
    }
}

pub fn signal_from_t1(seq: &SequenceParams, t1: f64) -> f64 {
    seq.signal_from_t1(t1)
}

/// Scale factor making the model reproduce the mean baseline signal at T10.
pub fn estimate_psi(seq: &SequenceParams, baseline_signals: &[f64]) -> Result<f64> {
    if baseline_signals.is_empty() {
        return Err(Error::EmptyBaseline);
    }
    let mean = baseline_signals.iter().sum::<f64>() / baseline_signals.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::ZeroBaseline);
    }
    Ok(mean / (seq.s0 * seq.recovery(seq.t10)))
}

/// Copy of `seq` with `psi` fitted to the first `frames` samples of `curve`.
pub fn calibrate(seq: &SequenceParams, curve: &SampledCurve, frames: usize) -> Result<SequenceParams> {
    let k = frames.min(curve.len());
    let psi = estimate_psi(seq, &curve.values()[..k])?;
    Ok(SequenceParams { psi, ..*seq })
}

/// Inverts the signal equation by bisection on [1 ms, 10 s].
pub fn t1_from_signal(seq: &SequenceParams, s: f64) -> Result<f64> {
    t1_from_signal_tol(seq, s, 1e-12)
}

pub fn t1_from_signal_tol(seq: &SequenceParams, s: f64, tol: f64) -> Result<f64> {
    let (lo, hi) = T1_BRACKET;
    let (f_lo, f_hi) = (seq.signal_from_t1(lo), seq.signal_from_t1(hi));
    if !(f_lo > f_hi) {
        return Err(Error::NonBracketing { lo, hi });
    }
    if !(s >= f_hi && s <= f_lo) {
        return Err(Error::SignalOutOfRange {
            signal: s,
            min: f_hi,
            max: f_lo,
        });
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        // Decreasing in T1: a signal above target means T1 is too short.
        if seq.signal_from_t1(m) > s {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// `[Gd] = (1/T1 - 1/T10) / r1`, unclamped.
pub fn gd_from_t1(seq: &SequenceParams, t1: f64) -> f64 {
    (1.0 / t1 - 1.0 / seq.t10) / seq.r1
}

/// Inverse of [`gd_from_t1`].
pub fn t1_from_gd(seq: &SequenceParams, c: f64) -> f64 {
    1.0 / (1.0 / seq.t10 + seq.r1 * c)
}

/// Concentration curve plus the number of negative samples clamped to zero.
#[derive(Debug, Clone)]
pub struct Conversion {
    pub curve: SampledCurve,
    pub clamped: usize,
}

/// Per-sample signal -> T1 -> [Gd]. `seq.psi` must already be calibrated.
pub fn concentration_from_signal(seq: &SequenceParams, curve: &SampledCurve, kind: CurveKind) -> Result<Conversion> {
    let mut clamped = 0;
    let values = curve
        .values()
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let t1 = t1_from_signal(seq, s).map_err(|e| Error::at_sample(i, e))?;
            let c = gd_from_t1(seq, t1);
            if c < 0.0 {
                clamped += 1;
                Ok(0.0)
            } else {
                Ok(c)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if clamped > 0 {
        log::debug!("clamped {clamped} negative concentration samples");
    }
    Ok(Conversion {
        curve: SampledCurve::new(curve.times().to_vec(), values, kind)?,
        clamped,
    })
}

/// Forward chain [Gd] -> T1 -> signal.
pub fn signal_from_concentration(seq: &SequenceParams, curve: &SampledCurve) -> Result<SampledCurve> {
    let values = curve
        .values()
        .iter()
        .map(|&c| seq.signal_from_t1(t1_from_gd(seq, c)))
        .collect();
    SampledCurve::new(curve.times().to_vec(), values, CurveKind::Signal)
}

/// Linear approximation `C = (R10/r1) (S - S(0)) / S(0)` with S(0) the mean
/// of the first `baseline_frames` samples.
pub fn relative_enhancement(
    curve: &SampledCurve,
    seq: &SequenceParams,
    baseline_frames: usize,
) -> Result<SampledCurve> {
    let k = baseline_frames.clamp(1, curve.len());
    let s_base = curve.values()[..k].iter().sum::<f64>() / k as f64;
    if s_base == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    let scale = 1.0 / (seq.t10 * seq.r1);
    let values = curve.values().iter().map(|&s| scale * (s - s_base) / s_base).collect();
    SampledCurve::new(curve.times().to_vec(), values, CurveKind::Tissue)
}

/// Default scale factor between pre-bolus and main-bolus doses.
pub const DUAL_BOLUS_SCALE: f64 = 10.0;

/// Scales a pre-bolus AIF to the main-bolus dose and moves its time axis so
/// that its start coincides with `main_bolus_start`.
pub fn build_dual_bolus_aif(prebolus_aif: &SampledCurve, scale: f64, main_bolus_start: f64) -> Result<SampledCurve> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
    }
    let times = prebolus_aif.times().iter().map(|&t| t + main_bolus_start).collect();
    let values = prebolus_aif.values().iter().map(|&v| v * scale).collect();
    SampledCurve::new(times, values, CurveKind::Aif)
}
