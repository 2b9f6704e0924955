//! Whole-image stages: signal series to concentration, and pixelwise
//! kinetic parameter maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::FieldResult;
use crate::curve::{CurveKind, SampledCurve};
use crate::error::{Error, Result};
use crate::image::{ImageSeries, Mask, ParamMaps};
use crate::nlls::{FitBounds, FitOptions, PixelFitter};
use crate::signal::{build_dual_bolus_aif, calibrate, concentration_from_signal, SequenceParams, DUAL_BOLUS_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertConfig {
    /// Myocardial acquisition constants; `psi` is re-estimated per pixel.
    pub sequence: SequenceParams,
    #[serde(rename = "T10_blood_s")]
    pub t10_blood: f64,
    pub baseline_frames: usize,
    pub dual_bolus_scale: f64,
    #[serde(rename = "main_bolus_start_s")]
    pub main_bolus_start: f64,
    /// Clip samples outside the invertible signal range (noise) to its
    /// edges instead of failing.
    pub clip_to_range: bool,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            sequence: SequenceParams::default(),
            t10_blood: 1.8,
            baseline_frames: 5,
            dual_bolus_scale: DUAL_BOLUS_SCALE,
            main_bolus_start: 0.0,
            clip_to_range: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Converted {
    pub aif: SampledCurve,
    /// Concentration series; zero outside the mask.
    pub tissue: ImageSeries,
    /// Negative samples clamped to zero, summed over pixels.
    pub clamped: usize,
    /// Samples clipped into the invertible signal range.
    pub clipped: usize,
}

/// Clips `curve` into the attainable signal range of `seq`.
pub fn clip_to_signal_range(seq: &SequenceParams, curve: &SampledCurve) -> Result<(SampledCurve, usize)> {
    let (lo, hi) = seq.signal_range();
    let mut n = 0;
    let values = curve
        .values()
        .iter()
        .map(|&v| {
            let c = v.clamp(lo, hi);
            if c != v {
                n += 1;
            }
            c
        })
        .collect();
    Ok((curve.with_values(values)?, n))
}

fn to_concentration(
    seq: &SequenceParams,
    curve: &SampledCurve,
    kind: CurveKind,
    cfg: &ConvertConfig,
) -> Result<(SampledCurve, usize, usize)> {
    let seq = calibrate(seq, curve, cfg.baseline_frames)?;
    let (curve, clipped) = if cfg.clip_to_range {
        clip_to_signal_range(&seq, curve)?
    } else {
        (curve.clone(), 0)
    };
    let c = concentration_from_signal(&seq, &curve, kind)?;
    Ok((c.curve, c.clamped, clipped))
}

/// Converts the pre-bolus blood signal to a main-bolus AIF and every mask
/// pixel of `series` to tissue concentration, each calibrated on its own
/// baseline frames.
pub fn convert_series(
    series: &ImageSeries,
    prebolus_signal: &SampledCurve,
    times: &[f64],
    mask: &Mask,
    cfg: &ConvertConfig,
) -> Result<Converted> {
    if mask.ny() != series.ny() || mask.nx() != series.nx() {
        return Err(Error::InvalidArgument("mask and series dimensions differ".into()));
    }
    if times.len() != series.nt() {
        return Err(Error::GridMismatch);
    }
    if cfg.baseline_frames == 0 {
        return Err(Error::EmptyBaseline);
    }
    let blood = cfg.sequence.with_t10(cfg.t10_blood);
    let (pre, _, pre_clipped) = to_concentration(&blood, prebolus_signal, CurveKind::Aif, cfg)?;
    let aif = build_dual_bolus_aif(&pre, cfg.dual_bolus_scale, cfg.main_bolus_start)?;

    let idx = mask.indices();
    let converted: Vec<(usize, Vec<f64>, usize, usize)> = idx
        .par_iter()
        .map(|&i| {
            let curve = SampledCurve::new(times.to_vec(), series.pixel_curve(i), CurveKind::Signal)?;
            let (c, clamped, clipped) =
                to_concentration(&cfg.sequence, &curve, CurveKind::Tissue, cfg).map_err(|e| Error::at_sample(i, e))?;
            Ok((i, c.values().to_vec(), clamped, clipped))
        })
        .collect::<Result<_>>()?;
    let np = series.n_pixels();
    let mut data = vec![0.0; series.nt() * np];
    let (mut clamped, mut clipped) = (0, pre_clipped);
    for (i, v, c, k) in converted {
        clamped += c;
        clipped += k;
        for (k, x) in v.into_iter().enumerate() {
            data[k * np + i] = x;
        }
    }
    Ok(Converted {
        aif,
        tissue: ImageSeries::new(series.nt(), series.ny(), series.nx(), series.spacing(), data)?,
        clamped,
        clipped,
    })
}

#[derive(Debug, Clone)]
pub struct NllsMaps {
    pub params: ParamMaps,
    pub rss: Vec<f64>,
    /// Mask pixels without a converged fit (NaN in the maps).
    pub failed: Vec<usize>,
}

/// Multi-start least-squares fit at every mask pixel.
pub fn fit_nlls_maps(
    aif: &SampledCurve,
    times: &[f64],
    tissue: &ImageSeries,
    mask: &Mask,
    bounds: &FitBounds,
    opts: &FitOptions,
) -> Result<NllsMaps> {
    if mask.ny() != tissue.ny() || mask.nx() != tissue.nx() {
        return Err(Error::InvalidArgument("mask and series dimensions differ".into()));
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let fitter = PixelFitter::new(aif, times, bounds, opts)?;
    let results: Vec<(usize, Result<crate::nlls::FitResult>)> = mask
        .indices()
        .into_par_iter()
        .map_with(fitter, |f, i| (i, f.fit(&tissue.pixel_curve(i))))
        .collect();
    let mut params = ParamMaps::nan(tissue.ny(), tissue.nx());
    let mut rss = vec![f64::NAN; tissue.n_pixels()];
    let mut failed = Vec::new();
    for (i, r) in results {
        match r {
            Ok(r) => {
                params.set(i, &r.params);
                rss[i] = r.rss;
            }
            Err(Error::NoConvergence { .. } | Error::DegenerateData) => failed.push(i),
            Err(e) => return Err(Error::at_sample(i, e)),
        }
    }
    if !failed.is_empty() {
        log::warn!("{} of {} pixels did not converge", failed.len(), mask.count());
    }
    Ok(NllsMaps { params, rss, failed })
}

/// Posterior mean and SD maps of a field inference.
pub fn field_maps(field: &FieldResult) -> (ParamMaps, ParamMaps) {
    let mean = ParamMaps {
        ny: field.ny,
        nx: field.nx,
        maps: std::array::from_fn(|k| field.mean_map(k)),
    };
    let sd = ParamMaps {
        ny: field.ny,
        nx: field.nx,
        maps: std::array::from_fn(|k| field.sd_map(k)),
    };
    (mean, sd)
}
