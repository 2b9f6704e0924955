//! Translation-only motion correction of dynamic series.
//!
//! Stage one registers the low-rank RPCA component, which is free of the
//! contrast dynamics. Stage two registers each stage-one frame to a PCA
//! reconstruction of the stage-one series to remove residual motion.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{translate_frame, ImageSeries};
use crate::rpca::{rpca_admm, RpcaConfig, SvdMethod};

/// Per-frame translation `(dy, dx)` in pixels: frame `k` equals the
/// reference translated by `shifts[k]`, `frame(y, x) = ref(y - dy, x - dx)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionEstimate {
    pub shifts: Vec<(f64, f64)>,
}

impl MotionEstimate {
    pub fn zeros(nt: usize) -> Self {
        Self {
            shifts: vec![(0.0, 0.0); nt],
        }
    }

    pub fn compose(&self, other: &MotionEstimate) -> Result<MotionEstimate> {
        if self.shifts.len() != other.shifts.len() {
            return Err(Error::InvalidArgument("motion estimates differ in length".into()));
        }
        Ok(MotionEstimate {
            shifts: self
                .shifts
                .iter()
                .zip(&other.shifts)
                .map(|(a, b)| (a.0 + b.0, a.1 + b.1))
                .collect(),
        })
    }

    /// RMS of the per-frame vector difference to `truth`, both taken
    /// relative to frame `reference`.
    pub fn rms_error(&self, truth: &[(f64, f64)], reference: usize) -> f64 {
        let (ry, rx) = truth[reference];
        let (ey, ex) = self.shifts[reference];
        let ss: f64 = self
            .shifts
            .iter()
            .zip(truth)
            .map(|(e, t)| {
                let dy = (e.0 - ey) - (t.0 - ry);
                let dx = (e.1 - ex) - (t.1 - rx);
                dy * dy + dx * dx
            })
            .sum();
        (ss / truth.len() as f64).sqrt()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.shifts
            .iter()
            .map(|(y, x)| (y * y + x * x).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Normalised cross-correlation of `frame` against `reference` displaced by
/// the integer shift `(dy, dx)` over their overlap; `None` if either side is
/// flat there.
fn ncc(frame: &[f64], reference: &[f64], ny: usize, nx: usize, dy: isize, dx: isize) -> Option<f64> {
    let y0 = dy.max(0) as usize;
    let y1 = (ny as isize + dy.min(0)) as usize;
    let x0 = dx.max(0) as usize;
    let x1 = (nx as isize + dx.min(0)) as usize;
    if y1 <= y0 + 1 || x1 <= x0 + 1 {
        return None;
    }
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in y0..y1 {
        let ry = (y as isize - dy) as usize;
        let fa = &frame[y * nx..(y + 1) * nx];
        let fb = &reference[ry * nx..(ry + 1) * nx];
        for x in x0..x1 {
            let a = fa[x];
            let b = fb[(x as isize - dx) as usize];
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 1e-12 * saa.max(1e-300) || vb <= 1e-12 * sbb.max(1e-300) {
        return None;
    }
    Some((sab - sa * sb / n) / (va * vb).sqrt())
}

fn parabola_offset(cm: f64, c0: f64, cp: f64) -> f64 {
    let den = cm - 2.0 * c0 + cp;
    if den >= 0.0 {
        return 0.0;
    }
    (0.5 * (cm - cp) / den).clamp(-0.5, 0.5)
}

/// Translation of `frame` relative to `reference` maximising NCC over the
/// integer window `|dy|, |dx| <= max_shift`, refined per axis by quadratic
/// interpolation of the correlation peak.
pub fn estimate_shift(frame: &[f64], reference: &[f64], ny: usize, nx: usize, max_shift: usize) -> (f64, f64) {
    let w = max_shift as isize;
    let mut best: Option<(f64, isize, isize)> = None;
    for dy in -w..=w {
        for dx in -w..=w {
            if let Some(c) = ncc(frame, reference, ny, nx, dy, dx) {
                if best.is_none_or(|b| c > b.0) {
                    best = Some((c, dy, dx));
                }
            }
        }
    }
    let Some((c0, by, bx)) = best else {
        log::warn!("flat image: correlation undefined, assuming zero shift");
        return (0.0, 0.0);
    };
    if c0 >= 1.0 - 1e-12 {
        return (by as f64, bx as f64);
    }
    let at = |dy, dx| ncc(frame, reference, ny, nx, dy, dx);
    let oy = match (at(by - 1, bx), at(by + 1, bx)) {
        (Some(m), Some(p)) => parabola_offset(m, c0, p),
        _ => 0.0,
    };
    let ox = match (at(by, bx - 1), at(by, bx + 1)) {
        (Some(m), Some(p)) => parabola_offset(m, c0, p),
        _ => 0.0,
    };
    (by as f64 + oy, bx as f64 + ox)
}

/// Registers every frame to frame `reference_index`.
pub fn register_translation(series: &ImageSeries, reference_index: usize, max_shift: usize) -> Result<MotionEstimate> {
    let nt = series.nt();
    if nt < 2 {
        return Err(Error::InvalidArgument("registration needs at least 2 frames".into()));
    }
    if reference_index >= nt {
        return Err(Error::InvalidArgument(format!(
            "reference frame {reference_index} out of range (nt = {nt})"
        )));
    }
    let (ny, nx) = (series.ny(), series.nx());
    let reference = series.frame(reference_index);
    let shifts = (0..nt)
        .into_par_iter()
        .map(|t| {
            if t == reference_index {
                (0.0, 0.0)
            } else {
                estimate_shift(series.frame(t), reference, ny, nx, max_shift)
            }
        })
        .collect();
    Ok(MotionEstimate { shifts })
}

/// Undoes `motion`: `out_k(y, x) = frame_k(y + dy_k, x + dx_k)`, bilinear
/// with clamped edges.
pub fn apply_correction(series: &ImageSeries, motion: &MotionEstimate) -> Result<ImageSeries> {
    if motion.shifts.len() != series.nt() {
        return Err(Error::InvalidArgument("motion estimate length differs from nt".into()));
    }
    let (ny, nx) = (series.ny(), series.nx());
    let frames: Vec<Vec<f64>> = (0..series.nt())
        .into_par_iter()
        .map(|t| {
            let (dy, dx) = motion.shifts[t];
            if dy == 0.0 && dx == 0.0 {
                series.frame(t).to_vec()
            } else {
                translate_frame(series.frame(t), ny, nx, -dy, -dx)
            }
        })
        .collect();
    ImageSeries::new(series.nt(), ny, nx, series.spacing(), frames.concat())
}

/// Rank-truncated reconstruction keeping the leading temporal principal
/// components that explain at least `fraction` of the variance about the
/// per-pixel temporal mean.
pub fn pca_truncate(series: &ImageSeries, fraction: f64) -> Result<(ImageSeries, usize)> {
    let mean = series.temporal_mean();
    let mut x = series.casorati();
    for mut col in x.column_iter_mut() {
        for (v, m) in col.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let eig = SymmetricEigen::try_new(x.tr_mul(&x), f64::EPSILON, 0)
        .ok_or_else(|| Error::Svd("eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut keep = 0;
    let mut acc = 0.0;
    if total > 0.0 {
        for &i in &order {
            keep += 1;
            acc += eig.eigenvalues[i].max(0.0);
            if acc >= fraction * total {
                break;
            }
        }
    }
    let nt = series.nt();
    let mut v = DMatrix::zeros(nt, keep);
    for (c, &i) in order.iter().take(keep).enumerate() {
        v.set_column(c, &eig.eigenvectors.column(i));
    }
    let mut recon = &x * (&v * v.transpose());
    for mut col in recon.column_iter_mut() {
        for (r, m) in col.iter_mut().zip(&mean) {
            *r += m;
        }
    }
    Ok((
        ImageSeries::from_casorati(&recon, series.ny(), series.nx(), series.spacing())?,
        keep,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MocoConfig {
    pub rpca: RpcaConfig,
    /// Integer search half-width in pixels.
    pub max_shift: usize,
    /// Search half-width of the second-stage re-registration.
    pub refine_shift: usize,
    pub reference: usize,
    pub pca_variance: f64,
    pub second_stage: bool,
    /// Passes of stage one, each decomposing the series corrected by the
    /// motion found so far.
    pub iterations: usize,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            rpca: RpcaConfig {
                svd: SvdMethod::Gram,
                tol: 1e-4,
                ..RpcaConfig::default()
            },
            max_shift: 8,
            refine_shift: 2,
            reference: 0,
            pca_variance: 0.95,
            second_stage: true,
            iterations: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MocoOutput {
    pub corrected: ImageSeries,
    pub motion: MotionEstimate,
    pub stage1: MotionEstimate,
    pub rpca_iterations: usize,
    pub pca_components: usize,
}

pub fn motion_correct(series: &ImageSeries, cfg: &MocoConfig) -> Result<(ImageSeries, MotionEstimate)> {
    let out = motion_correct_detailed(series, cfg)?;
    Ok((out.corrected, out.motion))
}

pub fn motion_correct_detailed(series: &ImageSeries, cfg: &MocoConfig) -> Result<MocoOutput> {
    if series.nt() < 2 {
        return Err(Error::InvalidArgument(
            "motion correction needs at least 2 frames".into(),
        ));
    }
    if !(cfg.pca_variance > 0.0 && cfg.pca_variance <= 1.0) {
        return Err(Error::InvalidArgument("pca_variance must lie in (0, 1]".into()));
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let (ny, nx) = (series.ny(), series.nx());
    let mut stage1 = MotionEstimate::zeros(series.nt());
    let mut corrected1 = series.clone();
    let mut rpca_iterations = 0;
    for pass in 0..cfg.iterations {
        let dec = rpca_admm(&corrected1.casorati(), &cfg.rpca)?;
        rpca_iterations += dec.iterations;
        let low_rank = ImageSeries::from_casorati(&dec.l, ny, nx, series.spacing())?;
        let step = register_translation(&low_rank, cfg.reference, cfg.max_shift)?;
        let size = step.max_magnitude();
        stage1 = stage1.compose(&step)?;
        corrected1 = apply_correction(series, &stage1)?;
        log::debug!("motion pass {}: largest update {size:.3} px", pass + 1);
        if size < 1e-3 {
            break;
        }
    }
    if !cfg.second_stage {
        return Ok(MocoOutput {
            corrected: corrected1,
            motion: stage1.clone(),
            stage1,
            rpca_iterations,
            pca_components: 0,
        });
    }
    let (synthetic, k) = pca_truncate(&corrected1, cfg.pca_variance)?;
    let residual = MotionEstimate {
        shifts: (0..series.nt())
            .into_par_iter()
            .map(|t| estimate_shift(corrected1.frame(t), synthetic.frame(t), ny, nx, cfg.refine_shift))
            .collect(),
    };
    let motion = stage1.compose(&residual)?;
    let corrected = apply_correction(series, &motion)?;
    Ok(MocoOutput {
        corrected,
        motion,
        stage1,
        rpca_iterations,
        pca_components: k,
    })
}
