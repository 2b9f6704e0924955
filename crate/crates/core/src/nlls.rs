//! Non-linear least-squares estimation of 2CXM parameters.
//!
//! Levenberg-Marquardt on a logistic reparameterisation of the box bounds,
//! forward-difference Jacobian, best of a fixed-seed Latin-hypercube set of
//! starting points.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curve::SampledCurve;
use crate::error::{Error, Result};
use crate::model::{ForwardModel, KineticParams};

/// Box bounds per parameter, `(lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBounds {
    #[serde(rename = "Fp_ml_min_ml")]
    pub fp: (f64, f64),
    pub vp: (f64, f64),
    pub ve: (f64, f64),
    #[serde(rename = "PS_ml_min_ml")]
    pub ps: (f64, f64),
    #[serde(rename = "delay_s")]
    pub delay: (f64, f64),
}

impl Default for FitBounds {
    fn default() -> Self {
        Self {
            fp: (0.01, 10.0),
            vp: (0.001, 0.5),
            ve: (0.001, 0.8),
            ps: (0.0, 5.0),
            delay: (0.0, 10.0),
        }
    }
}

impl FitBounds {
    pub fn lower(&self) -> [f64; 5] {
        [self.fp.0, self.vp.0, self.ve.0, self.ps.0, self.delay.0]
    }

    pub fn upper(&self) -> [f64; 5] {
        [self.fp.1, self.vp.1, self.ve.1, self.ps.1, self.delay.1]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (lo, hi)) in self.lower().iter().zip(self.upper()).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && *lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "bounds for {}: lower {lo} must be < upper {hi}",
                    KineticParams::NAMES[i]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &KineticParams) -> bool {
        let v = p.as_array();
        self.lower()
            .iter()
            .zip(self.upper())
            .zip(v)
            .all(|((lo, hi), x)| x >= *lo && x <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: KineticParams,
    pub rss: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub start_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub n_starts: usize,
    pub max_iter: usize,
    /// Fit the bolus delay jointly; otherwise it is held at `fixed_delay`.
    pub fit_delay: bool,
    pub fixed_delay: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_starts: 10,
            max_iter: 500,
            fit_delay: true,
            fixed_delay: 0.0,
            seed: 0,
        }
    }
}

/// `y_i - C_p(t_i)` on the tissue grid.
pub fn residuals(p: &KineticParams, aif: &SampledCurve, tissue: &SampledCurve) -> Result<Vec<f64>> {
    let mut model = ForwardModel::new(aif, tissue.times()).map_err(grid_error)?;
    let pred = model.eval(p)?;
    Ok(tissue.values().iter().zip(&pred).map(|(y, m)| y - m).collect())
}

pub fn rss(p: &KineticParams, aif: &SampledCurve, tissue: &SampledCurve) -> Result<f64> {
    Ok(residuals(p, aif, tissue)?.iter().map(|r| r * r).sum())
}

fn grid_error(e: Error) -> Error {
    match e {
        Error::GridCoverage { .. } => Error::GridMismatch,
        other => other,
    }
}

pub fn fit_nlls(aif: &SampledCurve, tissue: &SampledCurve, bounds: &FitBounds, n_starts: usize) -> Result<FitResult> {
    let opts = FitOptions {
        n_starts,
        ..FitOptions::default()
    };
    fit_nlls_with(aif, tissue, bounds, &opts)
}

pub fn fit_nlls_with(
    aif: &SampledCurve,
    tissue: &SampledCurve,
    bounds: &FitBounds,
    opts: &FitOptions,
) -> Result<FitResult> {
    let mut fitter = PixelFitter::new(aif, tissue.times(), bounds, opts)?;
    fitter.fit(tissue.values())
}

/// Multi-start fitter bound to one AIF and sampling grid; reusable across
/// pixels sharing that grid.
#[derive(Debug, Clone)]
pub struct PixelFitter {
    model: ForwardModel,
    bounds: FitBounds,
    opts: FitOptions,
    free: Vec<usize>,
    starts: Vec<Vec<f64>>,
}

impl PixelFitter {
    pub fn new(aif: &SampledCurve, times: &[f64], bounds: &FitBounds, opts: &FitOptions) -> Result<Self> {
        bounds.validate()?;
        if opts.n_starts == 0 {
            return Err(Error::InvalidArgument("n_starts must be >= 1".into()));
        }
        let model = ForwardModel::new(aif, times).map_err(grid_error)?;
        let free: Vec<usize> = if opts.fit_delay {
            (0..5).collect()
        } else {
            (0..4).collect()
        };
        let starts = latin_hypercube(opts.n_starts, free.len(), opts.seed);
        Ok(Self {
            model,
            bounds: *bounds,
            opts: *opts,
            free,
            starts,
        })
    }

    /// Unit-cube start points (one row per start).
    pub fn start_points(&self) -> &[Vec<f64>] {
        &self.starts
    }

    fn to_params(&self, u: &[f64]) -> KineticParams {
        let (lo, hi) = (self.bounds.lower(), self.bounds.upper());
        let mut v = [0.0, 0.0, 0.0, 0.0, self.opts.fixed_delay];
        for (k, &i) in self.free.iter().enumerate() {
            v[i] = lo[i] + (hi[i] - lo[i]) * logistic(u[k]);
        }
        KineticParams::from_array(v)
    }

    fn to_unconstrained(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .map(|&f| {
                let f = f.clamp(1e-4, 1.0 - 1e-4);
                (f / (1.0 - f)).ln()
            })
            .collect()
    }

    pub fn fit(&mut self, y: &[f64]) -> Result<FitResult> {
        if y.len() != self.model.n_samples() {
            return Err(Error::GridMismatch);
        }
        if y.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateData);
        }
        let mut best: Option<FitResult> = None;
        for s in 0..self.starts.len() {
            let u0 = self.to_unconstrained(&self.starts[s].clone());
            let r = self.fit_from(y, &u0)?;
            if !r.converged {
                continue;
            }
            let r = FitResult { start_index: s, ..r };
            if best.as_ref().is_none_or(|b| r.rss < b.rss) {
                best = Some(r);
            }
        }
        best.ok_or(Error::NoConvergence {
            max_iter: self.opts.max_iter,
        })
    }

    /// Single LM run from an unconstrained start vector.
    pub fn fit_from(&mut self, y: &[f64], u0: &[f64]) -> Result<FitResult> {
        let lm = LmOptions {
            max_iter: self.opts.max_iter,
            ..LmOptions::default()
        };
        let n = y.len();
        let mut pred = vec![0.0; n];
        let this = &mut *self;
        let free = this.free.clone();
        let (lo, hi, fixed_delay) = (this.bounds.lower(), this.bounds.upper(), this.opts.fixed_delay);
        let model = &mut this.model;
        let out = levenberg_marquardt(
            |u: &[f64], r: &mut [f64]| {
                let mut v = [0.0, 0.0, 0.0, 0.0, fixed_delay];
                for (k, &i) in free.iter().enumerate() {
                    v[i] = lo[i] + (hi[i] - lo[i]) * logistic(u[k]);
                }
                model.eval_into(&KineticParams::from_array(v), &mut pred)?;
                for ((ri, yi), pi) in r.iter_mut().zip(y).zip(&pred) {
                    *ri = yi - pi;
                }
                Ok(())
            },
            u0,
            n,
            &lm,
        )?;
        Ok(FitResult {
            params: self.to_params(&out.x),
            rss: out.rss,
            converged: out.converged,
            n_iter: out.iterations,
            start_index: 0,
        })
    }
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Stratified samples in the unit cube: each coordinate visits every one of
/// the `n` strata exactly once.
pub fn latin_hypercube(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (p, s) in pts.iter_mut().zip(strata) {
            p[d] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    pub lambda0: f64,
    /// Relative RSS decrease below which an accepted step counts as converged.
    pub ftol: f64,
    /// Relative step size below which an accepted step counts as converged.
    pub xtol: f64,
    pub fd_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            lambda0: 1e-3,
            ftol: 1e-12,
            xtol: 1e-10,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: Vec<f64>,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// RSS after each accepted step, starting with the initial value.
    pub rss_trace: Vec<f64>,
}

/// Forward-difference Jacobian of the residual vector.
pub fn forward_difference_jacobian<F>(f: &mut F, x: &[f64], r0: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let (m, n) = (r0.len(), x.len());
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    let mut rp = vec![0.0; m];
    for j in 0..n {
        let h = step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        f(&xp, &mut rp)?;
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (rp[i] - r0[i]) / h;
        }
    }
    Ok(jac)
}

/// Central-difference Jacobian (reference for the forward-difference one).
pub fn central_difference_jacobian<F>(f: &mut F, x: &[f64], m: usize, step: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    let (mut rp, mut rm) = (vec![0.0; m], vec![0.0; m]);
    for j in 0..n {
        let h = step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        f(&xp, &mut rp)?;
        xp[j] = x[j] - h;
        f(&xp, &mut rm)?;
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Minimises the sum of squared residuals `f(x)` with the Marquardt damping
/// schedule (lambda x10 on rejection, /10 on acceptance, diagonal scaling).
pub fn levenberg_marquardt<F>(mut f: F, x0: &[f64], m: usize, opts: &LmOptions) -> Result<LmOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = vec![0.0; m];
    f(&x, &mut r)?;
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut trace = vec![cost];
    let mut lambda = opts.lambda0;
    let mut x_new = vec![0.0; n];
    let mut r_new = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        let jac = forward_difference_jacobian(&mut f, &x, &r, opts.fd_step)?;
        let jtj = jac.transpose() * &jac;
        // Residual r = y - model, so the descent direction solves
        // (J'J + lambda D) dx = -J' r.
        let grad = jac.transpose() * DVector::from_column_slice(&r);
        if grad.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                lambda *= 10.0;
                continue;
            };
            for i in 0..n {
                x_new[i] = x[i] + step[i];
            }
            f(&x_new, &mut r_new)?;
            let cost_new: f64 = r_new.iter().map(|v| v * v).sum();
            if cost_new.is_finite() && cost_new < cost {
                let step_norm = step.norm();
                let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let small_f = cost - cost_new <= opts.ftol * cost;
                let small_x = step_norm <= opts.xtol * (x_norm + opts.xtol);
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut r, &mut r_new);
                cost = cost_new;
                trace.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if small_f || small_x {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left at working precision.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    Ok(LmOutcome {
        x,
        rss: cost,
        iterations,
        converged,
        rss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::CurveKind;
    use crate::model::{forward_model, GammaVariate};

    #[test]
    fn lm_solves_exponential_fit() {
        let t: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let y: Vec<f64> = t.iter().map(|&t| 3.0 * (-0.7 * t).exp()).collect();
        let out = levenberg_marquardt(
            |x: &[f64], r: &mut [f64]| {
                for ((ri, ti), yi) in r.iter_mut().zip(&t).zip(&y) {
                    *ri = yi - x[0] * (-x[1] * ti).exp();
                }
                Ok(())
            },
            &[1.0, 0.1],
            t.len(),
            &LmOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 3.0).abs() < 1e-8 && (out.x[1] - 0.7).abs() < 1e-8);
        assert!(out.rss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn latin_hypercube_is_stratified() {
        let pts = latin_hypercube(10, 5, 3);
        for d in 0..5 {
            let mut strata: Vec<usize> = pts.iter().map(|p| (p[d] * 10.0) as usize).collect();
            strata.sort();
            assert_eq!(strata, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(pts, latin_hypercube(10, 5, 3));
    }

    #[test]
    fn zero_tissue_is_degenerate() {
        let aif = GammaVariate::default().sample(1.0, 90).unwrap();
        let tissue = SampledCurve::uniform(0.0, 1.0, vec![0.0; 90], CurveKind::Tissue).unwrap();
        assert!(matches!(
            fit_nlls(&aif, &tissue, &FitBounds::default(), 2),
            Err(Error::DegenerateData)
        ));
    }

    #[test]
    fn residuals_vanish_at_truth() {
        let aif = GammaVariate::default().sample(1.0, 90).unwrap();
        let p = KineticParams::new(1.5, 0.08, 0.18, 0.65, 2.0).unwrap();
        let tissue = forward_model(&p, &aif, aif.times()).unwrap();
        assert!(residuals(&p, &aif, &tissue).unwrap().iter().all(|&r| r == 0.0));
        let off = SampledCurve::uniform(0.5, 1.0, vec![1.0; 10], CurveKind::Tissue).unwrap();
        assert!(matches!(residuals(&p, &aif, &off), Err(Error::GridMismatch)));
    }

    #[test]
    fn bounds_validation_and_membership() {
        let b = FitBounds::default();
        assert!(b.validate().is_ok());
        let bad = FitBounds { vp: (0.5, 0.1), ..b };
        assert!(bad.validate().is_err());
        assert!(b.contains(&KineticParams::new(1.0, 0.1, 0.2, 0.5, 1.0).unwrap()));
        assert!(!b.contains(&KineticParams::new(11.0, 0.1, 0.2, 0.5, 1.0).unwrap()));
    }
}
