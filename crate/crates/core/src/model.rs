//! Two-compartment exchange model (2CXM).
//!
//! The tissue concentration is the convolution of the flow-scaled residue
//! function `R_F(t) = Fp * (A exp(alpha t) + (1 - A) exp(beta t))` with the
//! (optionally delayed) arterial input function. Flows are carried in
//! ml/min/ml at the API boundary and converted to per-second rates once,
//! inside the coefficient computation.
//!
//! The convolution integrates the exponential kernel exactly against the
//! piecewise-linear interpolant of the AIF samples, so it reduces to an O(N)
//! recursion per exponential mode.

use serde::{Deserialize, Serialize};

use crate::curve::{interpolate_linear, CurveKind, SampledCurve};
use crate::error::{Error, Result};

/// Roots closer than this (relative to the larger magnitude) use the
/// confluent form of the residue function.
pub const ROOT_EPS: f64 = 1e-10;

/// Largest admissible `h * max(|alpha|, |beta|)` for the RK4 oracle.
pub const RK4_STEP_GUARD: f64 = 0.1;

/// 2CXM parameters. Flows in ml/min/ml, volumes as fractions, delay in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticParams {
    #[serde(rename = "Fp_ml_min_ml")]
    pub fp: f64,
    pub vp: f64,
    pub ve: f64,
    #[serde(rename = "PS_ml_min_ml")]
    pub ps: f64,
    #[serde(rename = "delay_s", default)]
    pub delay: f64,
}

impl KineticParams {
    pub const COUNT: usize = 5;
    pub const NAMES: [&'static str; 5] = ["Fp", "vp", "ve", "PS", "delay"];

    pub fn new(fp: f64, vp: f64, ve: f64, ps: f64, delay: f64) -> Result<Self> {
        let p = Self { fp, vp, ve, ps, delay };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !self.as_array().iter().all(|v| v.is_finite()) {
            return bad(format!("non-finite entry in {self:?}"));
        }
        if !(self.fp > 0.0) {
            return bad(format!("Fp must be > 0, got {}", self.fp));
        }
        if !(self.vp > 0.0 && self.vp < 1.0) {
            return bad(format!("vp must lie in (0, 1), got {}", self.vp));
        }
        if !(self.ve > 0.0 && self.ve < 1.0) {
            return bad(format!("ve must lie in (0, 1), got {}", self.ve));
        }
        if self.vp + self.ve > 1.0 {
            return bad(format!("vp + ve = {} exceeds 1", self.vp + self.ve));
        }
        if self.ps < 0.0 {
            return bad(format!("PS must be >= 0, got {}", self.ps));
        }
        if self.delay < 0.0 {
            return bad(format!("delay must be >= 0, got {}", self.delay));
        }
        Ok(())
    }

    /// Plasma flow in ml/s/ml.
    pub fn fp_per_s(&self) -> f64 {
        self.fp / 60.0
    }

    /// Permeability-surface area product in ml/s/ml.
    pub fn ps_per_s(&self) -> f64 {
        self.ps / 60.0
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.fp, self.vp, self.ve, self.ps, self.delay]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            fp: a[0],
            vp: a[1],
            ve: a[2],
            ps: a[3],
            delay: a[4],
        }
    }
}

/// Haematocrit and myocardial density used for blood/mass unit conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysioConstants {
    pub hct: f64,
    #[serde(rename = "density_g_ml")]
    pub density: f64,
}

impl Default for PhysioConstants {
    fn default() -> Self {
        Self {
            hct: 0.45,
            density: 1.05,
        }
    }
}

impl PhysioConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.hct >= 0.0 && self.hct < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "haematocrit must lie in [0, 1), got {}",
                self.hct
            )));
        }
        if !(self.density > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "density must be > 0, got {}",
                self.density
            )));
        }
        Ok(())
    }
}

/// Blood-referenced flow (ml/min/g) and volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BloodUnits {
    #[serde(rename = "Fb_ml_min_g")]
    pub fb: f64,
    pub vb: f64,
}

pub fn to_blood_units(p: &KineticParams, c: &PhysioConstants) -> BloodUnits {
    BloodUnits {
        fb: p.fp / ((1.0 - c.hct) * c.density),
        vb: p.vp / (1.0 - c.hct),
    }
}

/// Exponential rates (1/s) and mixing weight of the residue function.
///
/// `alpha` is always the root of larger magnitude. In the confluent case
/// (`alpha == beta`) `confluent_slope` holds the coefficient `s` of
/// `R_F(t) = Fp * exp(alpha t) * (1 + s t)` and `a` is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidueCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub a: f64,
    pub confluent_slope: Option<f64>,
}

impl ResidueCoefficients {
    /// Roots of `s^2 + s (Fp/vp + PS/vp + PS/ve) + (Fp/vp)(PS/ve)` with
    /// per-second flows. No validity checks.
    pub fn from_rates(fp_s: f64, vp: f64, ve: f64, ps_s: f64, allow_confluent: bool) -> Result<Self> {
        let x = fp_s / vp;
        let y = ps_s / vp;
        let z = ps_s / ve;
        let b = x + y + z;
        // b^2 - 4xz rewritten without cancellation.
        let disc = (x - z) * (x - z) + y * y + 2.0 * y * (x + z);
        let root = disc.max(0.0).sqrt();
        let alpha = -0.5 * (b + root);
        if root <= ROOT_EPS * alpha.abs() {
            if !allow_confluent {
                return Err(Error::DegenerateRoots { alpha, beta: alpha });
            }
            let rate = -0.5 * b;
            return Ok(Self {
                alpha: rate,
                beta: rate,
                a: 1.0,
                confluent_slope: Some(rate + y + z),
            });
        }
        // Product of roots is xz; avoids subtracting nearly equal numbers.
        let beta = if alpha != 0.0 { x * z / alpha } else { 0.0 };
        let a = (alpha + y + z) / (alpha - beta);
        Ok(Self {
            alpha,
            beta,
            a,
            confluent_slope: None,
        })
    }

    /// `R_F(t) / Fp`.
    pub fn shape(&self, t: f64) -> f64 {
        match self.confluent_slope {
            Some(s) => (self.alpha * t).exp() * (1.0 + s * t),
            None => self.a * (self.alpha * t).exp() + (1.0 - self.a) * (self.beta * t).exp(),
        }
    }

    pub fn max_rate(&self) -> f64 {
        self.alpha.abs().max(self.beta.abs())
    }
}

pub fn residue_coefficients(p: &KineticParams) -> Result<ResidueCoefficients> {
    residue_coefficients_with(p, true)
}

pub fn residue_coefficients_with(p: &KineticParams, allow_confluent: bool) -> Result<ResidueCoefficients> {
    p.validate()?;
    ResidueCoefficients::from_rates(p.fp_per_s(), p.vp, p.ve, p.ps_per_s(), allow_confluent)
}

/// Flow-scaled residue function `R_F(t)` in 1/s (so `R_F(0) = Fp` in ml/s/ml).
pub fn residue_function(p: &KineticParams, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("t must be >= 0, got {t}")));
    }
    let c = residue_coefficients(p)?;
    Ok(p.fp_per_s() * c.shape(t))
}

/// Shifts the curve right by `tau` seconds with linear interpolation onto the
/// original grid, padding with zeros on the left.
pub fn apply_delay(aif: &SampledCurve, tau: f64) -> Result<SampledCurve> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("delay must be >= 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(aif.clone());
    }
    let values = match aif.uniform_spacing() {
        Some(dt) => {
            let mut out = vec![0.0; aif.len()];
            shift_uniform(aif.values(), tau / dt, &mut out);
            out
        }
        None => aif
            .times()
            .iter()
            .map(|&t| interpolate_linear(aif.times(), aif.values(), t - tau))
            .collect(),
    };
    aif.with_values(values)
}

/// `out[k] = src(k - shift)` with linear interpolation, zero for negative
/// indices. Shifts within 1e-9 of an integer are snapped.
pub(crate) fn shift_uniform(src: &[f64], shift: f64, out: &mut [f64]) {
    let rounded = shift.round();
    let shift = if (shift - rounded).abs() < 1e-9 { rounded } else { shift };
    let whole = shift.floor();
    let frac = shift - whole;
    let whole = whole as isize;
    let at = |i: isize| -> f64 {
        if i < 0 {
            0.0
        } else {
            src[i as usize]
        }
    };
    for (k, o) in out.iter_mut().enumerate() {
        let i = k as isize - whole;
        *o = if frac == 0.0 {
            at(i)
        } else {
            (1.0 - frac) * at(i) + frac * at(i - 1)
        };
    }
}

/// `m_k(x) = integral_0^1 w^k exp(x w) dw` for k = 0, 1, 2.
fn exp_moments(x: f64) -> [f64; 3] {
    if x.abs() < 0.5 {
        let mut m = [0.0; 3];
        let mut term = 1.0; // x^j / j!
        for j in 0..30 {
            for (k, mk) in m.iter_mut().enumerate() {
                *mk += term / (j + k + 1) as f64;
            }
            term *= x / (j + 1) as f64;
        }
        m
    } else {
        let ex = x.exp();
        let m0 = x.exp_m1() / x;
        let m1 = (ex - m0) / x;
        let m2 = (ex - 2.0 * m1) / x;
        [m0, m1, m2]
    }
}

/// Running convolution state of one exponential mode `exp(rate * u)`
/// against a piecewise-linear input on a uniform grid.
struct ExpMode {
    decay: f64,
    w_prev: f64,
    w_cur: f64,
    // Extra weights for the `u * exp(rate u)` kernel (confluent case).
    v_prev: f64,
    v_cur: f64,
    h: f64,
}

impl ExpMode {
    fn new(rate: f64, h: f64) -> Self {
        let x = rate * h;
        let [m0, m1, m2] = exp_moments(x);
        Self {
            decay: x.exp(),
            w_prev: h * m1,
            w_cur: h * (m0 - m1),
            v_prev: h * h * m2,
            v_cur: h * h * (m1 - m2),
            h,
        }
    }
}

/// Convolves `R_F` with the piecewise-linear interpolant of `input`
/// (uniform spacing `h`, integral starting at the first sample).
pub(crate) fn convolve_residue(coeffs: &ResidueCoefficients, fp_s: f64, input: &[f64], h: f64, out: &mut [f64]) {
    debug_assert_eq!(input.len(), out.len());
    if out.is_empty() {
        return;
    }
    out[0] = 0.0;
    match coeffs.confluent_slope {
        None => {
            let ma = ExpMode::new(coeffs.alpha, h);
            let mb = ExpMode::new(coeffs.beta, h);
            let (mut ia, mut ib) = (0.0, 0.0);
            for n in 1..input.len() {
                let (prev, cur) = (input[n - 1], input[n]);
                ia = ma.decay * ia + ma.w_prev * prev + ma.w_cur * cur;
                ib = mb.decay * ib + mb.w_prev * prev + mb.w_cur * cur;
                out[n] = fp_s * (coeffs.a * ia + (1.0 - coeffs.a) * ib);
            }
        }
        Some(slope) => {
            let m = ExpMode::new(coeffs.alpha, h);
            let (mut i0, mut i1) = (0.0, 0.0);
            for n in 1..input.len() {
                let (prev, cur) = (input[n - 1], input[n]);
                i1 = m.decay * (i1 + m.h * i0) + m.v_prev * prev + m.v_cur * cur;
                i0 = m.decay * i0 + m.w_prev * prev + m.w_cur * cur;
                out[n] = fp_s * (i0 + slope * i1);
            }
        }
    }
}

/// Reusable evaluator of the tissue curve for a fixed AIF and sampling grid.
/// Holds scratch buffers, so each thread needs its own clone.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    dt: f64,
    aif: Vec<f64>,
    sample_index: Vec<usize>,
    shifted: Vec<f64>,
    full: Vec<f64>,
}

impl ForwardModel {
    /// `aif` must be uniformly sampled and contain every entry of `times`
    /// as a grid node.
    pub fn new(aif: &SampledCurve, times: &[f64]) -> Result<Self> {
        let dt = match aif.uniform_spacing() {
            Some(dt) => dt,
            None if aif.len() == 1 => 1.0,
            None => return Err(Error::NonUniformGrid),
        };
        let sample_index = times
            .iter()
            .map(|&t| aif.node_index(t).ok_or(Error::GridCoverage { time: t }))
            .collect::<Result<Vec<_>>>()?;
        let n = aif.len();
        Ok(Self {
            dt,
            aif: aif.values().to_vec(),
            sample_index,
            shifted: vec![0.0; n],
            full: vec![0.0; n],
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_index.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Evaluates without validating `p` (used inside optimizers that may
    /// probe slightly outside the physical domain).
    pub fn eval_into(&mut self, p: &KineticParams, out: &mut [f64]) -> Result<()> {
        let coeffs = ResidueCoefficients::from_rates(p.fp_per_s(), p.vp, p.ve, p.ps_per_s(), true)?;
        let input: &[f64] = if p.delay > 0.0 {
            shift_uniform(&self.aif, p.delay / self.dt, &mut self.shifted);
            &self.shifted
        } else {
            &self.aif
        };
        convolve_residue(&coeffs, p.fp_per_s(), input, self.dt, &mut self.full);
        for (o, &i) in out.iter_mut().zip(&self.sample_index) {
            *o = self.full[i];
        }
        Ok(())
    }

    pub fn eval(&mut self, p: &KineticParams) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.sample_index.len()];
        self.eval_into(p, &mut out)?;
        Ok(out)
    }
}

/// Tissue concentration `C_myo = R_F * C_AIF(t - delay)` sampled at `times`.
pub fn forward_model(p: &KineticParams, aif: &SampledCurve, times: &[f64]) -> Result<SampledCurve> {
    p.validate()?;
    let mut model = ForwardModel::new(aif, times)?;
    let values = model.eval(p)?;
    SampledCurve::new(times.to_vec(), values, CurveKind::Tissue)
}

/// Smallest number of RK4 sub-steps per grid interval satisfying the
/// step-size guard.
pub fn ode_substeps_for(p: &KineticParams, dt: f64) -> Result<usize> {
    let c = residue_coefficients(p)?;
    Ok(((dt * c.max_rate() / RK4_STEP_GUARD).ceil() as usize).max(1))
}

/// Independent solution of the coupled plasma/EES ODEs by classical RK4,
/// using `substeps` steps per AIF grid interval and linear interpolation of
/// the (delayed) AIF between nodes. Returns `vp*Cp + ve*Ce` at `times`.
pub fn ode_oracle(p: &KineticParams, aif: &SampledCurve, times: &[f64], substeps: usize) -> Result<SampledCurve> {
    p.validate()?;
    let dt = aif.uniform_spacing().ok_or(Error::NonUniformGrid)?;
    let idx = times
        .iter()
        .map(|&t| aif.node_index(t).ok_or(Error::GridCoverage { time: t }))
        .collect::<Result<Vec<_>>>()?;
    let substeps = substeps.max(1);
    let h = dt / substeps as f64;
    let rate = residue_coefficients(p)?.max_rate();
    if h * rate > RK4_STEP_GUARD {
        return Err(Error::StepSize { step: h, rate });
    }
    let delayed = apply_delay(aif, p.delay)?;
    let ca = delayed.values();
    let (fp, ps, vp, ve) = (p.fp_per_s(), p.ps_per_s(), p.vp, p.ve);
    let deriv =
        |cin: f64, cp: f64, ce: f64| -> (f64, f64) { ((fp * (cin - cp) + ps * (ce - cp)) / vp, ps * (cp - ce) / ve) };
    let mut total = vec![0.0; ca.len()];
    let (mut cp, mut ce) = (0.0, 0.0);
    for n in 1..ca.len() {
        let (a0, a1) = (ca[n - 1], ca[n]);
        for s in 0..substeps {
            let f0 = s as f64 / substeps as f64;
            let fm = (s as f64 + 0.5) / substeps as f64;
            let f1 = (s as f64 + 1.0) / substeps as f64;
            let c0 = a0 + f0 * (a1 - a0);
            let cm = a0 + fm * (a1 - a0);
            let c1 = a0 + f1 * (a1 - a0);
            let k1 = deriv(c0, cp, ce);
            let k2 = deriv(cm, cp + 0.5 * h * k1.0, ce + 0.5 * h * k1.1);
            let k3 = deriv(cm, cp + 0.5 * h * k2.0, ce + 0.5 * h * k2.1);
            let k4 = deriv(c1, cp + h * k3.0, ce + h * k3.1);
            cp += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            ce += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        total[n] = vp * cp + ve * ce;
    }
    let values = idx.iter().map(|&i| total[i]).collect();
    SampledCurve::new(times.to_vec(), values, CurveKind::Tissue)
}

/// Gamma-variate bolus `c0 (t - t0)^a exp(-(t - t0)/b)` scaled to `peak`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaVariate {
    pub a: f64,
    #[serde(rename = "b_s")]
    pub b: f64,
    #[serde(rename = "t0_s")]
    pub t0: f64,
    #[serde(rename = "peak_mmol_l")]
    pub peak: f64,
}

impl Default for GammaVariate {
    fn default() -> Self {
        Self {
            a: 2.5,
            b: 4.0,
            t0: 5.0,
            peak: 5.0,
        }
    }
}

impl GammaVariate {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.peak >= 0.0 && self.t0.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid gamma variate {self:?}")));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t <= self.t0 {
            return 0.0;
        }
        // Peak of u^a exp(-u/b) sits at u = a*b.
        let u = t - self.t0;
        let up = self.a * self.b;
        self.peak * (u / up).powf(self.a) * (-(u - up) / self.b).exp()
    }

    pub fn sample(&self, dt: f64, n: usize) -> Result<SampledCurve> {
        SampledCurve::from_fn(0.0, dt, n, CurveKind::Aif, |t| self.eval(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> KineticParams {
        KineticParams::new(1.0, 0.08, 0.18, 0.65, 0.0).unwrap()
    }

    #[test]
    fn validation() {
        assert!(KineticParams::new(0.0, 0.1, 0.2, 0.1, 0.0).is_err());
        assert!(KineticParams::new(1.0, 0.6, 0.5, 0.1, 0.0).is_err());
        assert!(KineticParams::new(1.0, 0.1, 0.2, -0.1, 0.0).is_err());
        assert!(KineticParams::new(1.0, 0.1, 0.2, 0.1, -1.0).is_err());
        assert!(KineticParams::new(1.0, 0.1, 0.2, 0.0, 0.0).is_ok());
    }

    #[test]
    fn zero_permeability_is_mono_exponential() {
        // Fp = 1/60 ml/s/ml.
        let p = KineticParams::new(1.0, 0.08, 0.18, 0.0, 0.0).unwrap();
        let c = residue_coefficients(&p).unwrap();
        let fp_vp = p.fp_per_s() / p.vp;
        assert!((c.alpha + fp_vp).abs() < 1e-15);
        assert_eq!(c.beta, 0.0);
        assert_eq!(c.a, 1.0);
        for t in [0.0, 1.0, 10.0, 50.0] {
            let r = residue_function(&p, t).unwrap();
            assert!((r - p.fp_per_s() * (-fp_vp * t).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_is_fast_mode() {
        let c = residue_coefficients(&canonical()).unwrap();
        assert!(c.alpha < c.beta && c.beta < 0.0);
    }

    #[test]
    fn residue_at_zero_is_flow() {
        let p = canonical();
        assert_eq!(residue_function(&p, 0.0).unwrap(), p.fp_per_s());
        assert!(residue_function(&p, 1e6).unwrap() < 1e-300);
        assert!(residue_function(&p, -1.0).is_err());
    }

    #[test]
    fn confluent_form_matches_nearby_distinct_roots() {
        let confluent = ResidueCoefficients {
            alpha: -0.2,
            beta: -0.2,
            a: 1.0,
            confluent_slope: Some(0.05),
        };
        // Partial-fraction form with roots split by a tiny epsilon and the
        // same numerator constant (alpha + k = slope).
        let eps: f64 = 1e-6;
        let (al, be) = (-0.2 - eps, -0.2 + eps);
        let k = 0.05 + 0.2;
        let a = (al + k) / (al - be);
        let distinct = ResidueCoefficients {
            alpha: al,
            beta: be,
            a,
            confluent_slope: None,
        };
        for t in [0.0, 1.0, 5.0, 20.0] {
            assert!((confluent.shape(t) - distinct.shape(t)).abs() < 1e-5, "t = {t}");
        }
        // Same agreement after convolution with a smooth input.
        let input: Vec<f64> = (0..200).map(|i| GammaVariate::default().eval(i as f64 * 0.5)).collect();
        let (mut yc, mut yd) = (vec![0.0; 200], vec![0.0; 200]);
        convolve_residue(&confluent, 0.02, &input, 0.5, &mut yc);
        convolve_residue(&distinct, 0.02, &input, 0.5, &mut yd);
        let scale = yd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (c, d) in yc.iter().zip(&yd) {
            assert!((c - d).abs() < 1e-5 * scale);
        }
    }

    #[test]
    fn degenerate_roots_error_when_disabled() {
        // x = z and y = 0 is the only degenerate configuration; it needs
        // Fp = 0, so it is reached through the raw-rate constructor.
        let r = ResidueCoefficients::from_rates(0.0, 0.1, 0.1, 0.0, false);
        assert!(matches!(r, Err(Error::DegenerateRoots { .. })));
        let ok = ResidueCoefficients::from_rates(0.0, 0.1, 0.1, 0.0, true).unwrap();
        assert!(ok.confluent_slope.is_some());
    }

    #[test]
    fn delay_identity_and_integer_shift() {
        let aif = SampledCurve::from_fn(0.0, 0.5, 20, CurveKind::Aif, |t| 1.0 + t).unwrap();
        assert_eq!(apply_delay(&aif, 0.0).unwrap(), aif);
        let s = apply_delay(&aif, 1.5).unwrap();
        assert_eq!(&s.values()[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&s.values()[3..], &aif.values()[..17]);
        assert!(apply_delay(&aif, -1.0).is_err());
    }

    #[test]
    fn delay_on_ramp_matches_closed_form() {
        let dt = 0.5;
        let aif = SampledCurve::from_fn(0.0, dt, 40, CurveKind::Aif, |t| 2.0 * t).unwrap();
        let tau = 1.3 * dt;
        let s = apply_delay(&aif, tau).unwrap();
        for (&t, &v) in s.times().iter().zip(s.values()) {
            // Ramp through zero at t = 0 and zero padding agree, except on
            // the first interval where interpolation runs towards the 0 pad.
            let expect = if t - tau >= 0.0 { 2.0 * (t - tau) } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "t = {t}: {v} vs {expect}");
        }
    }

    #[test]
    fn delay_non_uniform_grid() {
        let aif = SampledCurve::new(vec![0.0, 1.0, 3.0, 4.0], vec![0.0, 1.0, 3.0, 4.0], CurveKind::Aif).unwrap();
        let s = apply_delay(&aif, 0.5).unwrap();
        assert_eq!(s.values(), &[0.0, 0.5, 2.5, 3.5]);
    }

    #[test]
    fn blood_units() {
        let c = PhysioConstants::default();
        let p = KineticParams::new(1.05, 0.055, 0.2, 0.5, 0.0).unwrap();
        let b = to_blood_units(&p, &c);
        assert!((b.fb - 1.05 / (0.55 * 1.05)).abs() < 1e-12);
        assert!((b.fb - 1.8182).abs() < 1e-4);
        assert!((b.vb - 0.10).abs() < 1e-12);
        let id = to_blood_units(&p, &PhysioConstants { hct: 0.0, density: 1.0 });
        assert_eq!((id.fb, id.vb), (p.fp, p.vp));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let aif = SampledCurve::uniform(0.0, 0.5, vec![0.0; 100], CurveKind::Aif).unwrap();
        let out = forward_model(&canonical(), &aif, aif.times()).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
        let ode = ode_oracle(&canonical(), &aif, aif.times(), 4).unwrap();
        assert!(ode.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_model_grid_errors() {
        let nu = SampledCurve::new(vec![0.0, 1.0, 3.0], vec![0.0; 3], CurveKind::Aif).unwrap();
        assert!(matches!(
            forward_model(&canonical(), &nu, &[1.0]),
            Err(Error::NonUniformGrid)
        ));
        let aif = SampledCurve::uniform(0.0, 1.0, vec![0.0; 10], CurveKind::Aif).unwrap();
        assert!(matches!(
            forward_model(&canonical(), &aif, &[20.0]),
            Err(Error::GridCoverage { .. })
        ));
        assert!(matches!(
            forward_model(&canonical(), &aif, &[2.5]),
            Err(Error::GridCoverage { .. })
        ));
    }

    #[test]
    fn ode_step_guard() {
        let aif = GammaVariate::default().sample(0.5, 181).unwrap();
        let p = KineticParams::new(3.0, 0.02, 0.18, 0.65, 0.0).unwrap();
        assert!(matches!(
            ode_oracle(&p, &aif, aif.times(), 1),
            Err(Error::StepSize { .. })
        ));
        let n = ode_substeps_for(&p, 0.5).unwrap();
        assert!(ode_oracle(&p, &aif, aif.times(), n).is_ok());
    }

    #[test]
    fn exp_moments_branches_agree() {
        // Series and recurrence on either side of the switch point.
        for x in [-0.499_999_9f64, -0.5, 0.499_999_9, 0.5] {
            let m = exp_moments(x);
            // Simpson reference with many panels.
            let n = 20_000;
            let mut r = [0.0; 3];
            for i in 0..=n {
                let w = i as f64 / n as f64;
                let c = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                for (k, rk) in r.iter_mut().enumerate() {
                    *rk += c * w.powi(k as i32) * (x * w).exp();
                }
            }
            for k in 0..3 {
                let rk = r[k] / (3.0 * n as f64);
                assert!((m[k] - rk).abs() < 1e-12, "x={x} k={k}");
            }
        }
    }

    #[test]
    fn gamma_variate_peak() {
        let g = GammaVariate::default();
        let peak_t = g.t0 + g.a * g.b;
        assert!((g.eval(peak_t) - g.peak).abs() < 1e-12);
        assert_eq!(g.eval(g.t0), 0.0);
        assert!(g.eval(peak_t + 1.0) < g.peak && g.eval(peak_t - 1.0) < g.peak);
    }

    #[test]
    fn params_json_keys() {
        let p = KineticParams::new(1.0, 0.08, 0.18, 0.65, 2.0).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(
            s,
            r#"{"Fp_ml_min_ml":1.0,"vp":0.08,"ve":0.18,"PS_ml_min_ml":0.65,"delay_s":2.0}"#
        );
        let back: KineticParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<KineticParams>(
            r#"{"Fp_ml_min_ml":1,"vp":0.1,"ve":0.1,"PS_ml_min_ml":0,"x":1}"#
        )
        .is_err());
    }
}
