//! Bayesian inference of 2CXM parameters by Metropolis-Hastings sampling.
//!
//! Chains run in `x = (ln Fp, ln vp, ln ve, ln PS, delay)` with a flat
//! prior on the box in those coordinates. The optional spatial prior is a
//! Gaussian penalty on log-parameter differences to in-mask neighbours.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::SampledCurve;
use crate::error::{Error, Result};
use crate::image::{ImageSeries, Mask};
use crate::model::{ForwardModel, KineticParams};
use crate::nlls::{self, FitBounds, FitOptions, PixelFitter};
use crate::seed;

/// Lower limit applied to bounds before taking logs (a zero PS bound).
pub const LOG_FLOOR: f64 = 1e-4;
pub const DEFAULT_SPATIAL_WEIGHT: f64 = 2.0;
/// Baseline noise estimates are floored at this fraction of the curve peak.
pub const SIGMA_FLOOR_REL: f64 = 1e-4;

const DIM: usize = 5;
const ADAPT_BATCH: usize = 50;
/// Proposal SD caps (log units, seconds for the delay) for the initial
/// Laplace proposal.
const PROPOSAL_CAP: [f64; DIM] = [1.0, 1.0, 1.0, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseModel {
    Fixed {
        sigma: f64,
    },
    /// SD of the first `frames` samples about their mean.
    Baseline {
        frames: usize,
    },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Baseline { frames: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

/// Which log-parameters the spatial penalty acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialScope {
    #[default]
    All,
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    #[serde(rename = "box")]
    pub bounds: FitBounds,
    pub spatial_weight: f64,
    pub noise: NoiseModel,
    pub connectivity: Connectivity,
    pub spatial_scope: SpatialScope,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            bounds: FitBounds::default(),
            spatial_weight: DEFAULT_SPATIAL_WEIGHT,
            noise: NoiseModel::default(),
            connectivity: Connectivity::Four,
            spatial_scope: SpatialScope::All,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if !(self.spatial_weight >= 0.0 && self.spatial_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "spatial_weight must be >= 0, got {}",
                self.spatial_weight
            )));
        }
        match self.noise {
            NoiseModel::Fixed { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::InvalidArgument(format!("noise sigma must be > 0, got {sigma}")))
            }
            NoiseModel::Baseline { frames } if frames < 2 => Err(Error::InvalidArgument(
                "baseline noise estimate needs >= 2 frames".into(),
            )),
            _ => Ok(()),
        }
    }

    fn n_spatial(&self) -> usize {
        match self.spatial_scope {
            SpatialScope::All => 4,
            SpatialScope::Flow => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcOptions {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Checkerboard sweeps in field inference.
    pub sweeps: usize,
    /// Proposal scaling and covariance adaptation during burn-in.
    pub adapt: bool,
    /// Least-squares starts used to initialise each chain.
    pub init_starts: usize,
    /// Keep the thinned draws of every pixel in field inference.
    pub keep_draws: bool,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self {
            n_iter: 20_000,
            burn_in: 5_000,
            thin: 5,
            sweeps: 5,
            adapt: true,
            init_starts: 10,
            keep_draws: false,
        }
    }
}

impl McmcOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter <= self.burn_in {
            return Err(Error::InvalidArgument(format!(
                "n_iter ({}) must exceed burn_in ({})",
                self.n_iter, self.burn_in
            )));
        }
        if self.thin == 0 || self.sweeps == 0 || self.init_starts == 0 {
            return Err(Error::InvalidArgument(
                "thin, sweeps and init_starts must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn mh(&self) -> MhConfig {
        MhConfig {
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            thin: self.thin,
            adapt: self.adapt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MhConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub adapt: bool,
}

impl Default for MhConfig {
    fn default() -> Self {
        Self {
            n_iter: 20_000,
            burn_in: 5_000,
            thin: 5,
            adapt: false,
        }
    }
}

/// Thinned post-burn-in draws and their summaries. For kinetic inference the
/// coordinates are `(Fp, vp, ve, PS, delay)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    /// One row per draw; empty when draws were not retained.
    pub draws: Vec<Vec<f64>>,
    pub n_draws: usize,
    pub acceptance_rate: f64,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl PosteriorSamples {
    pub fn mean_params(&self) -> KineticParams {
        KineticParams::from_array(to_array(&self.mean))
    }

    pub fn sd_params(&self) -> KineticParams {
        KineticParams::from_array(to_array(&self.sd))
    }
}

fn to_array(v: &[f64]) -> [f64; DIM] {
    let mut a = [f64::NAN; DIM];
    for (o, x) in a.iter_mut().zip(v) {
        *o = *x;
    }
    a
}

pub fn log_likelihood(p: &KineticParams, aif: &SampledCurve, tissue: &SampledCurve, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let rss = nlls::rss(p, aif, tissue)?;
    Ok(gaussian_norm(tissue.len(), sigma) - rss / (2.0 * sigma * sigma))
}

fn gaussian_norm(n: usize, sigma: f64) -> f64 {
    -0.5 * n as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
}

/// Box support plus the neighbour penalty; `-inf` outside the box.
pub fn log_prior(p: &KineticParams, spec: &PriorSpec, neighbors: &[KineticParams]) -> f64 {
    if !spec.bounds.contains(p) {
        return f64::NEG_INFINITY;
    }
    if spec.spatial_weight == 0.0 || neighbors.is_empty() {
        return 0.0;
    }
    let x = log_state(p);
    let nb: Vec<[f64; 4]> = neighbors
        .iter()
        .map(|q| {
            let s = log_state(q);
            [s[0], s[1], s[2], s[3]]
        })
        .collect();
    spatial_log_prior(&x, &nb, spec.spatial_weight, spec.n_spatial())
}

fn spatial_log_prior(x: &[f64], nb: &[[f64; 4]], weight: f64, n: usize) -> f64 {
    let mut ss = 0.0;
    for q in nb {
        for k in 0..n {
            let d = x[k] - q[k];
            ss += d * d;
        }
    }
    -0.5 * weight * ss
}

fn log_state(p: &KineticParams) -> [f64; DIM] {
    [
        p.fp.max(LOG_FLOOR).ln(),
        p.vp.max(LOG_FLOOR).ln(),
        p.ve.max(LOG_FLOOR).ln(),
        p.ps.max(LOG_FLOOR).ln(),
        p.delay,
    ]
}

fn natural(x: &[f64]) -> [f64; DIM] {
    [x[0].exp(), x[1].exp(), x[2].exp(), x[3].exp(), x[4]]
}

/// Sampling-space box.
fn state_bounds(b: &FitBounds) -> ([f64; DIM], [f64; DIM]) {
    let (lo, hi) = (b.lower(), b.upper());
    let mut xl = [0.0; DIM];
    let mut xh = [0.0; DIM];
    for k in 0..4 {
        xl[k] = lo[k].max(LOG_FLOOR).ln();
        xh[k] = hi[k].max(LOG_FLOOR).ln();
    }
    xl[4] = lo[4];
    xh[4] = hi[4];
    (xl, xh)
}

#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1;
        for k in 0..v.len() {
            let d = v[k] - self.mean[k];
            self.mean[k] += d / self.n as f64;
            self.m2[k] += d * (v[k] - self.mean[k]);
        }
    }

    fn sd(&self) -> Vec<f64> {
        let den = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|m| (m / den).sqrt()).collect()
    }
}

/// Random-walk Metropolis chain whose state persists across blocks of
/// iterations.
#[derive(Debug, Clone)]
struct Chain {
    x: Vec<f64>,
    rng: ChaCha8Rng,
    chol: DMatrix<f64>,
    scale: f64,
    iter: usize,
    batch_acc: usize,
    post_acc: usize,
    history: Vec<Vec<f64>>,
    stats: Welford,
    draws: Vec<Vec<f64>>,
    block_sum: Vec<f64>,
    block_n: usize,
    natural: bool,
    keep: bool,
}

impl Chain {
    fn new(init: &[f64], chol: DMatrix<f64>, scale: f64, seed: u64, natural: bool, keep: bool) -> Self {
        let d = init.len();
        Self {
            x: init.to_vec(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            chol,
            scale,
            iter: 0,
            batch_acc: 0,
            post_acc: 0,
            history: Vec::new(),
            stats: Welford::new(d),
            draws: Vec::new(),
            block_sum: vec![0.0; d],
            block_n: 0,
            natural,
            keep,
        }
    }

    fn advance<F>(&mut self, steps: usize, cfg: &MhConfig, target: &mut F) -> Result<()>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let d = self.x.len();
        let mut lp = target(&self.x);
        if lp == f64::NEG_INFINITY || lp.is_nan() {
            return Err(Error::InvalidInit);
        }
        self.block_sum.iter_mut().for_each(|v| *v = 0.0);
        self.block_n = 0;
        let mut z = DVector::zeros(d);
        let mut cand = vec![0.0; d];
        for _ in 0..steps {
            for v in z.iter_mut() {
                *v = self.rng.sample(StandardNormal);
            }
            let step = &self.chol * &z;
            for k in 0..d {
                cand[k] = self.x[k] + self.scale * step[k];
            }
            let lp_c = target(&cand);
            let accept = if lp_c >= lp {
                true
            } else if lp_c == f64::NEG_INFINITY || lp_c.is_nan() {
                false
            } else {
                self.rng.random::<f64>() < (lp_c - lp).exp()
            };
            if accept {
                std::mem::swap(&mut self.x, &mut cand);
                lp = lp_c;
            }
            self.finish_step(accept, cfg);
        }
        Ok(())
    }

    fn finish_step(&mut self, accepted: bool, cfg: &MhConfig) {
        let it = self.iter;
        self.iter += 1;
        for (s, v) in self.block_sum.iter_mut().zip(&self.x) {
            *s += v;
        }
        self.block_n += 1;
        if it < cfg.burn_in {
            if cfg.adapt {
                self.adapt(it, accepted, cfg.burn_in);
            }
            return;
        }
        if accepted {
            self.post_acc += 1;
        }
        if (it - cfg.burn_in) % cfg.thin == 0 {
            let rec: Vec<f64> = if self.natural {
                natural(&self.x).to_vec()
            } else {
                self.x.clone()
            };
            self.stats.push(&rec);
            if self.keep {
                self.draws.push(rec);
            }
        }
    }

    fn adapt(&mut self, it: usize, accepted: bool, burn_in: usize) {
        if accepted {
            self.batch_acc += 1;
        }
        if (it + 1) % ADAPT_BATCH == 0 {
            let rate = self.batch_acc as f64 / ADAPT_BATCH as f64;
            if rate < 0.2 {
                self.scale *= 0.75;
            } else if rate > 0.4 {
                self.scale *= 1.3;
            }
            self.batch_acc = 0;
        }
        if it >= burn_in / 4 {
            self.history.push(self.x.clone());
        }
        let d = self.x.len();
        if (it + 1 == burn_in / 2 || it + 1 == 3 * burn_in / 4) && self.history.len() >= 20 * d {
            if let Some(l) = empirical_cholesky(&self.history) {
                self.chol = l;
                self.scale = 2.38 / (d as f64).sqrt();
            }
        }
        if it + 1 == burn_in {
            self.history = Vec::new();
        }
    }

    fn block_mean(&self) -> Vec<f64> {
        let n = self.block_n.max(1) as f64;
        self.block_sum.iter().map(|s| s / n).collect()
    }

    fn summary(&self, cfg: &MhConfig) -> PosteriorSamples {
        let post = cfg.n_iter - cfg.burn_in;
        PosteriorSamples {
            draws: self.draws.clone(),
            n_draws: self.stats.n,
            acceptance_rate: self.post_acc as f64 / post as f64,
            mean: self.stats.mean.clone(),
            sd: self.stats.sd(),
        }
    }
}

fn empirical_cholesky(h: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let d = h[0].len();
    let n = h.len() as f64;
    let mut mean = vec![0.0; d];
    for r in h {
        for k in 0..d {
            mean[k] += r[k] / n;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in h {
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
        if cov[(i, i)] <= 0.0 {
            return None;
        }
        cov[(i, i)] *= 1.0 + 1e-9;
    }
    cov.cholesky().map(|c| c.l())
}

/// Gaussian random-walk Metropolis-Hastings with per-coordinate proposal
/// SDs. Proposals that increase the target are always accepted.
pub fn metropolis_hastings<F>(
    mut log_target: F,
    init: &[f64],
    proposal_sd: &[f64],
    cfg: &MhConfig,
    seed: u64,
) -> Result<PosteriorSamples>
where
    F: FnMut(&[f64]) -> f64,
{
    if init.is_empty() || init.len() != proposal_sd.len() {
        return Err(Error::InvalidArgument(
            "init and proposal_sd must be non-empty and of equal length".into(),
        ));
    }
    if proposal_sd.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("proposal SDs must be > 0".into()));
    }
    if cfg.n_iter <= cfg.burn_in || cfg.thin == 0 {
        return Err(Error::InvalidArgument("need n_iter > burn_in and thin >= 1".into()));
    }
    let chol = DMatrix::from_diagonal(&DVector::from_column_slice(proposal_sd));
    let mut chain = Chain::new(init, chol, 1.0, seed, false, true);
    chain.advance(cfg.n_iter, cfg, &mut log_target)?;
    Ok(chain.summary(cfg))
}

/// Per-pixel likelihood evaluator in sampling coordinates.
#[derive(Debug, Clone)]
struct PixelTarget {
    model: ForwardModel,
    y: Vec<f64>,
    pred: Vec<f64>,
    sigma: f64,
    norm: f64,
    lo: [f64; DIM],
    hi: [f64; DIM],
}

impl PixelTarget {
    fn log_lik(&mut self, x: &[f64]) -> f64 {
        for k in 0..DIM {
            if !(x[k] >= self.lo[k] && x[k] <= self.hi[k]) {
                return f64::NEG_INFINITY;
            }
        }
        let p = KineticParams::from_array(natural(x));
        if self.model.eval_into(&p, &mut self.pred).is_err() {
            return f64::NEG_INFINITY;
        }
        let rss: f64 = self.y.iter().zip(&self.pred).map(|(a, b)| (a - b) * (a - b)).sum();
        self.norm - rss / (2.0 * self.sigma * self.sigma)
    }
}

/// Initial state (least-squares estimate) and Laplace-approximation
/// proposal for one pixel.
fn pixel_setup(
    aif: &SampledCurve,
    times: &[f64],
    y: &[f64],
    sigma: f64,
    spec: &PriorSpec,
    opts: &McmcOptions,
) -> Result<(PixelTarget, Vec<f64>, DMatrix<f64>)> {
    let (lo, hi) = state_bounds(&spec.bounds);
    let model = ForwardModel::new(aif, times)?;
    let mut target = PixelTarget {
        model,
        y: y.to_vec(),
        pred: vec![0.0; y.len()],
        sigma,
        norm: gaussian_norm(y.len(), sigma),
        lo,
        hi,
    };
    let fit_opts = FitOptions {
        n_starts: opts.init_starts,
        ..FitOptions::default()
    };
    let mut fitter = PixelFitter::new(aif, times, &spec.bounds, &fit_opts)?;
    let mut x0: Vec<f64> = match fitter.fit(y) {
        Ok(f) => log_state(&f.params).to_vec(),
        Err(Error::NoConvergence { .. }) | Err(Error::DegenerateData) => {
            (0..DIM).map(|k| 0.5 * (lo[k] + hi[k])).collect()
        }
        Err(e) => return Err(e),
    };
    for k in 0..DIM {
        x0[k] = x0[k].clamp(lo[k], hi[k]);
    }

    // Laplace proposal: (J'J / sigma^2 + diag(1/cap^2))^-1.
    let mut resid = |x: &[f64], r: &mut [f64]| -> Result<()> {
        let p = KineticParams::from_array(natural(x));
        target.model.eval_into(&p, r)?;
        Ok(())
    };
    let mut r0 = vec![0.0; y.len()];
    resid(&x0, &mut r0)?;
    let jac = nlls::forward_difference_jacobian(&mut resid, &x0, &r0, 1e-6)?;
    let mut h = jac.transpose() * &jac / (sigma * sigma);
    for k in 0..DIM {
        h[(k, k)] += 1.0 / (PROPOSAL_CAP[k] * PROPOSAL_CAP[k]);
    }
    let chol = h
        .try_inverse()
        .and_then(|c| {
            let c = (&c + c.transpose()) * 0.5;
            c.cholesky().map(|l| l.l())
        })
        .unwrap_or_else(|| DMatrix::from_diagonal(&DVector::from_column_slice(&PROPOSAL_CAP)));
    Ok((target, x0, chol))
}

fn baseline_sigma(curves: &[&[f64]], frames: usize) -> Result<f64> {
    let mut ss = 0.0;
    let mut dof = 0usize;
    let mut peak: f64 = 0.0;
    for y in curves {
        if y.len() < frames {
            return Err(Error::InvalidArgument(format!(
                "baseline noise estimate needs {frames} frames, curve has {}",
                y.len()
            )));
        }
        let b = &y[..frames];
        let m = b.iter().sum::<f64>() / frames as f64;
        ss += b.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        dof += frames - 1;
        peak = y.iter().fold(peak, |a, v| a.max(v.abs()));
    }
    let sigma = (ss / dof as f64).sqrt().max(SIGMA_FLOOR_REL * peak);
    if sigma > 0.0 {
        Ok(sigma)
    } else {
        Err(Error::DegenerateData)
    }
}

/// Observation noise SD implied by `spec` for the given curves.
pub fn resolve_sigma(spec: &PriorSpec, curves: &[&[f64]]) -> Result<f64> {
    match spec.noise {
        NoiseModel::Fixed { sigma } => Ok(sigma),
        NoiseModel::Baseline { frames } => baseline_sigma(curves, frames),
    }
}

/// Posterior sampling for a single tissue curve without neighbours.
pub fn infer_pixel(
    aif: &SampledCurve,
    tissue: &SampledCurve,
    spec: &PriorSpec,
    opts: &McmcOptions,
    seed: u64,
) -> Result<PosteriorSamples> {
    spec.validate()?;
    opts.validate()?;
    let sigma = resolve_sigma(spec, &[tissue.values()])?;
    let (mut target, x0, chol) = pixel_setup(aif, tissue.times(), tissue.values(), sigma, spec, opts)?;
    let cfg = opts.mh();
    let mut chain = Chain::new(&x0, chol, 2.38 / (DIM as f64).sqrt(), seed, true, true);
    chain.advance(cfg.n_iter, &cfg, &mut |x: &[f64]| target.log_lik(x))?;
    Ok(chain.summary(&cfg))
}

/// Seed of the chain for pixel `index` in a field run seeded with `seed`.
pub fn pixel_seed(seed: u64, index: usize) -> u64 {
    seed::derive(seed::derive(seed, seed::streams::MCMC), index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldResult {
    pub ny: usize,
    pub nx: usize,
    pub sigma: f64,
    /// Posterior per pixel, `None` outside the mask.
    pub pixels: Vec<Option<PosteriorSamples>>,
}

impl FieldResult {
    /// Posterior-mean map of parameter `k` (NaN outside the mask).
    pub fn mean_map(&self, k: usize) -> Vec<f64> {
        self.map(|s| s.mean[k])
    }

    pub fn sd_map(&self, k: usize) -> Vec<f64> {
        self.map(|s| s.sd[k])
    }

    fn map(&self, f: impl Fn(&PosteriorSamples) -> f64) -> Vec<f64> {
        self.pixels.iter().map(|p| p.as_ref().map_or(f64::NAN, &f)).collect()
    }
}

struct PixelState {
    index: usize,
    color: usize,
    neighbors: Vec<usize>,
    target: PixelTarget,
    chain: Chain,
}

/// Joint inference over the masked pixels of a concentration series.
///
/// Each sweep updates the two checkerboard colours in turn; every chain
/// advances by one block of iterations with the spatial prior centred on
/// the neighbours' mean log-parameters from their latest block.
pub fn infer_field(
    aif: &SampledCurve,
    times: &[f64],
    stack: &ImageSeries,
    mask: &Mask,
    spec: &PriorSpec,
    opts: &McmcOptions,
    seed: u64,
) -> Result<FieldResult> {
    spec.validate()?;
    opts.validate()?;
    if mask.ny() != stack.ny() || mask.nx() != stack.nx() {
        return Err(Error::InvalidArgument("mask and series dimensions differ".into()));
    }
    if stack.nt() != times.len() {
        return Err(Error::GridMismatch);
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let curves: Vec<Vec<f64>> = idx.iter().map(|&i| stack.pixel_curve(i)).collect();
    let refs: Vec<&[f64]> = curves.iter().map(|c| c.as_slice()).collect();
    let sigma = resolve_sigma(spec, &refs)?;
    let eight = spec.connectivity == Connectivity::Eight;
    let cfg = opts.mh();

    let setups: Vec<Result<PixelState>> = idx
        .par_iter()
        .zip(curves.par_iter())
        .map(|(&i, y)| {
            let (target, x0, chol) =
                pixel_setup(aif, times, y, sigma, spec, opts).map_err(|e| Error::at_sample(i, e))?;
            let chain = Chain::new(
                &x0,
                chol,
                2.38 / (DIM as f64).sqrt(),
                pixel_seed(seed, i),
                true,
                opts.keep_draws,
            );
            Ok(PixelState {
                index: i,
                color: (i / mask.nx() + i % mask.nx()) % 2,
                neighbors: mask.neighbors(i, eight),
                target,
                chain,
            })
        })
        .collect();
    let mut states = setups.into_iter().collect::<Result<Vec<_>>>()?;

    let mut estimate: Vec<[f64; 4]> = vec![[0.0; 4]; mask.ny() * mask.nx()];
    for s in &states {
        estimate[s.index] = [s.chain.x[0], s.chain.x[1], s.chain.x[2], s.chain.x[3]];
    }

    let weight = spec.spatial_weight;
    let n_sp = spec.n_spatial();
    let block = opts.n_iter / opts.sweeps;
    for sweep in 0..opts.sweeps {
        let steps = if sweep + 1 == opts.sweeps {
            opts.n_iter - block * (opts.sweeps - 1)
        } else {
            block
        };
        for color in 0..2 {
            let snapshot = &estimate;
            states
                .par_iter_mut()
                .filter(|s| s.color == color)
                .try_for_each(|s| -> Result<()> {
                    let nb: Vec<[f64; 4]> = s.neighbors.iter().map(|&j| snapshot[j]).collect();
                    let PixelState {
                        target, chain, index, ..
                    } = s;
                    chain
                        .advance(steps, &cfg, &mut |x: &[f64]| {
                            let ll = target.log_lik(x);
                            if weight == 0.0 || ll == f64::NEG_INFINITY {
                                ll
                            } else {
                                ll + spatial_log_prior(x, &nb, weight, n_sp)
                            }
                        })
                        .map_err(|e| Error::at_sample(*index, e))
                })?;
            for s in states.iter().filter(|s| s.color == color) {
                let m = s.chain.block_mean();
                estimate[s.index] = [m[0], m[1], m[2], m[3]];
            }
        }
    }

    let mut pixels = vec![None; mask.ny() * mask.nx()];
    for s in &states {
        pixels[s.index] = Some(s.chain.summary(&cfg));
    }
    Ok(FieldResult {
        ny: mask.ny(),
        nx: mask.nx(),
        sigma,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_model, GammaVariate};

    #[test]
    fn likelihood_normalisation() {
        let aif = GammaVariate::default().sample(1.0, 60).unwrap();
        let p = KineticParams::new(1.0, 0.1, 0.2, 0.5, 0.0).unwrap();
        let tissue = forward_model(&p, &aif, aif.times()).unwrap();
        let n = tissue.len() as f64;
        let l1 = log_likelihood(&p, &aif, &tissue, 0.1).unwrap();
        let expect = -n / 2.0 * (2.0 * std::f64::consts::PI * 0.01).ln();
        assert!((l1 - expect).abs() < 1e-12 * expect.abs());
        let l2 = log_likelihood(&p, &aif, &tissue, 0.2).unwrap();
        assert!((l2 - l1 + n * 2f64.ln()).abs() < 1e-9);
        assert!(log_likelihood(&p, &aif, &tissue, 0.0).is_err());
    }

    #[test]
    fn prior_support_and_penalty() {
        let spec = PriorSpec {
            spatial_weight: 3.0,
            ..PriorSpec::default()
        };
        let p = KineticParams::new(1.0, 0.1, 0.2, 0.5, 1.0).unwrap();
        let out = KineticParams { fp: 20.0, ..p };
        assert_eq!(log_prior(&out, &spec, &[]), f64::NEG_INFINITY);
        assert_eq!(log_prior(&p, &spec, &[p, p]), 0.0);
        let q = KineticParams::new(2.0, 0.05, 0.2, 1.0, 3.0).unwrap();
        let d = [2f64.ln(), -(2f64.ln()), 0.0, 2f64.ln()];
        let hand = -1.5 * d.iter().map(|v| v * v).sum::<f64>();
        assert!((log_prior(&p, &spec, &[q]) - hand).abs() < 1e-12);
        let flow = PriorSpec {
            spatial_scope: SpatialScope::Flow,
            ..spec
        };
        assert!((log_prior(&p, &flow, &[q]) + 1.5 * d[0] * d[0]).abs() < 1e-12);
    }

    #[test]
    fn uphill_proposals_always_accepted() {
        // Strictly increasing target on the reachable range: every step
        // to the right is accepted, every step left is a coin flip.
        let cfg = MhConfig {
            n_iter: 2000,
            burn_in: 1,
            thin: 1,
            adapt: false,
        };
        let s = metropolis_hastings(|x| x[0], &[0.0], &[1e-3], &cfg, 1).unwrap();
        assert!(s.acceptance_rate > 0.5);
        let flat = metropolis_hastings(|_| 0.0, &[0.0], &[1.0], &cfg, 1).unwrap();
        assert_eq!(flat.acceptance_rate, 1.0);
    }

    #[test]
    fn invalid_init_rejected() {
        let r = metropolis_hastings(|_| f64::NEG_INFINITY, &[0.0], &[1.0], &MhConfig::default(), 0);
        assert!(matches!(r, Err(Error::InvalidInit)));
    }

    #[test]
    fn baseline_sigma_pools_and_floors() {
        let a = [1.0, 3.0, 1.0, 3.0, 10.0];
        let b = [2.0, 2.0, 2.0, 2.0, 4.0];
        let s = baseline_sigma(&[&a, &b], 4).unwrap();
        assert!((s - (4.0f64 / 6.0).sqrt()).abs() < 1e-12);
        let c = [0.0, 0.0, 0.0, 5.0];
        assert_eq!(baseline_sigma(&[&c], 3).unwrap(), 5e-4);
        assert!(matches!(baseline_sigma(&[&[0.0; 4]], 3), Err(Error::DegenerateData)));
    }

    #[test]
    fn prior_spec_json() {
        let s = PriorSpec::default();
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"box\"") && j.contains("\"kind\":\"baseline\""));
        let back: PriorSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        let fixed: PriorSpec =
            serde_json::from_str(r#"{"noise":{"kind":"fixed","sigma":0.01},"spatial_weight":0}"#).unwrap();
        assert_eq!(fixed.noise, NoiseModel::Fixed { sigma: 0.01 });
        assert!(PriorSpec {
            spatial_weight: -1.0,
            ..s
        }
        .validate()
        .is_err());
    }
}
