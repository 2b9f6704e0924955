//! Robust PCA: low-rank plus sparse decomposition by ADMM.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sign(x) * max(|x| - eps, 0)`.
pub fn shrink(x: f64, eps: f64) -> f64 {
    if x > eps {
        x - eps
    } else if x < -eps {
        x + eps
    } else {
        0.0
    }
}

/// Elementwise soft thresholding.
pub fn soft_threshold(x: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    x.map(|v| shrink(v, eps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SvdMethod {
    /// Full thin SVD.
    #[default]
    Exact,
    /// Eigendecomposition of the smaller Gram matrix. Much faster for tall
    /// Casorati matrices; singular values below ~1e-8 of the largest lose
    /// relative accuracy.
    Gram,
}

/// Singular value thresholding. Returns the thresholded matrix and the sum
/// of the shrunk singular values (its nuclear norm).
pub fn svt_with(x: &DMatrix<f64>, eps: f64, method: SvdMethod) -> Result<(DMatrix<f64>, f64)> {
    match method {
        SvdMethod::Exact => svt_exact(x, eps),
        SvdMethod::Gram => svt_gram(x, eps),
    }
}

pub fn svt(x: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    Ok(svt_exact(x, eps)?.0)
}

fn svt_exact(x: &DMatrix<f64>, eps: f64) -> Result<(DMatrix<f64>, f64)> {
    let (m, n) = x.shape();
    if m == 0 || n == 0 {
        return Ok((x.clone(), 0.0));
    }
    let svd = x
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Svd("SVD did not converge".into()))?;
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Svd("singular vectors unavailable".into())),
    };
    let mut out = DMatrix::zeros(m, n);
    let mut nuclear = 0.0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let t = s - eps;
        if t <= 0.0 {
            continue;
        }
        nuclear += t;
        out.ger(t, &u.column(k), &vt.row(k).transpose(), 1.0);
    }
    Ok((out, nuclear))
}

fn svt_gram(x: &DMatrix<f64>, eps: f64) -> Result<(DMatrix<f64>, f64)> {
    let (m, n) = x.shape();
    if m == 0 || n == 0 {
        return Ok((x.clone(), 0.0));
    }
    let tall = m >= n;
    let gram = if tall { x.tr_mul(x) } else { x * x.transpose() };
    let eig = SymmetricEigen::try_new(gram, f64::EPSILON, 0)
        .ok_or_else(|| Error::Svd("eigendecomposition did not converge".into()))?;
    let k = eig.eigenvalues.len();
    let mut keep = Vec::new();
    let mut nuclear = 0.0;
    for i in 0..k {
        let s = eig.eigenvalues[i].max(0.0).sqrt();
        if s > eps {
            nuclear += s - eps;
            keep.push((i, (s - eps) / s));
        }
    }
    if keep.is_empty() {
        return Ok((DMatrix::zeros(m, n), 0.0));
    }
    // P = W diag(w) W' projects onto the retained singular subspace with
    // shrinkage; L = X P (tall) or P X (wide).
    let r = keep.len();
    let mut w = DMatrix::zeros(k, r);
    let mut ws = DMatrix::zeros(k, r);
    for (c, &(i, f)) in keep.iter().enumerate() {
        w.set_column(c, &eig.eigenvectors.column(i));
        ws.set_column(c, &(eig.eigenvectors.column(i) * f));
    }
    let p = &ws * w.transpose();
    let out = if tall { x * p } else { p * x };
    Ok((out, nuclear))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpcaConfig {
    /// Sparsity weight; `None` selects `1 / sqrt(max(rows, cols))`.
    pub lambda: Option<f64>,
    /// Augmented-Lagrangian penalty; `None` selects `rows * cols / (4 |M|_1)`.
    pub mu: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub svd: SvdMethod,
}

impl Default for RpcaConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            mu: None,
            tol: 1e-7,
            max_iter: 500,
            svd: SvdMethod::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub l: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub iterations: usize,
    /// `|M - L - S|_F` at termination.
    pub primal_residual: f64,
    pub converged: bool,
    /// Objective of the constrained problem at each iterate,
    /// `|L|_* + lambda |M - L|_1`.
    pub objective: Vec<f64>,
    pub lambda: f64,
    pub mu: f64,
}

pub fn default_lambda(rows: usize, cols: usize) -> f64 {
    1.0 / (rows.max(cols) as f64).sqrt()
}

/// Decomposes `M = L + S` minimising `|L|_* + lambda |S|_1`.
pub fn rpca_admm(m: &DMatrix<f64>, cfg: &RpcaConfig) -> Result<Decomposition> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("RPCA input contains non-finite values".into()));
    }
    let (rows, cols) = m.shape();
    let lambda = cfg.lambda.unwrap_or_else(|| default_lambda(rows, cols));
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
    }
    let l1: f64 = m.iter().map(|v| v.abs()).sum();
    let norm_m = m.norm();
    if norm_m == 0.0 {
        return Ok(Decomposition {
            l: DMatrix::zeros(rows, cols),
            s: DMatrix::zeros(rows, cols),
            iterations: 0,
            primal_residual: 0.0,
            converged: true,
            objective: Vec::new(),
            lambda,
            mu: 0.0,
        });
    }
    let mu = cfg.mu.unwrap_or(0.25 * (rows * cols) as f64 / l1);
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidArgument(format!("mu must be > 0, got {mu}")));
    }
    let inv_mu = 1.0 / mu;
    let thresh = lambda * inv_mu;
    let mut s = DMatrix::<f64>::zeros(rows, cols);
    let mut y = DMatrix::<f64>::zeros(rows, cols);
    let mut l = DMatrix::<f64>::zeros(rows, cols);
    let mut work = DMatrix::<f64>::zeros(rows, cols);
    let mut objective = Vec::new();
    let mut residual = norm_m;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        for (((w, &mv), &sv), &yv) in work.iter_mut().zip(m.iter()).zip(s.iter()).zip(y.iter()) {
            *w = mv - sv + yv * inv_mu;
        }
        let (ln, nuclear) = svt_with(&work, inv_mu, cfg.svd)?;
        l = ln;
        let (mut r2, mut l1) = (0.0, 0.0);
        for (((sv, yv), &mv), &lv) in s.iter_mut().zip(y.iter_mut()).zip(m.iter()).zip(l.iter()) {
            let d = mv - lv;
            *sv = shrink(d + *yv * inv_mu, thresh);
            let r = d - *sv;
            r2 += r * r;
            *yv += mu * r;
            l1 += d.abs();
        }
        residual = r2.sqrt();
        objective.push(nuclear + lambda * l1);
        if residual / norm_m < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "RPCA stopped after {iterations} iterations with relative residual {:.3e}",
            residual / norm_m
        );
    }
    Ok(Decomposition {
        l,
        s,
        iterations,
        primal_residual: residual,
        converged,
        objective,
        lambda,
        mu,
    })
}

/// Numerical rank: singular values above `rtol * sigma_max`.
pub fn numerical_rank(x: &DMatrix<f64>, rtol: f64) -> usize {
    let sv: DVector<f64> = x.singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rtol * max).count()
}
