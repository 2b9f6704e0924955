//! Synthetic short-axis perfusion phantom with known kinetic parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{assign_segments, Layer, SegmentConfig, SegmentImage, SliceLevel, Territory};
use crate::curve::{CurveKind, SampledCurve};
use crate::error::{Error, Result};
use crate::image::{translate_frame, ImageSeries, Mask, ParamMaps};
use crate::model::{ForwardModel, GammaVariate, KineticParams, PhysioConstants};
use crate::seed::{derive, streams};
use crate::signal::{t1_from_gd, SequenceParams, DUAL_BOLUS_SCALE};

/// Region of altered kinetics: AHA segments `aha_range.0..=aha_range.1` of
/// the phantom slice, optionally restricted to one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defect {
    pub aha_range: (u8, u8),
    #[serde(default)]
    pub layer: Option<Layer>,
    pub params: KineticParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MotionSpec {
    #[default]
    None,
    /// `d(k) = amplitude * sin(2 pi k / period + phase)` along a direction
    /// given in degrees counterclockwise from +x as displayed.
    Sinusoidal {
        amplitude_px: f64,
        period_frames: f64,
        #[serde(default)]
        direction_deg: f64,
        #[serde(default)]
        phase_rad: f64,
    },
    /// Explicit per-frame `(dy, dx)`.
    Trace { shifts: Vec<(f64, f64)> },
}

impl MotionSpec {
    pub fn shifts(&self, nt: usize) -> Result<Vec<(f64, f64)>> {
        match self {
            MotionSpec::None => Ok(vec![(0.0, 0.0); nt]),
            MotionSpec::Sinusoidal {
                amplitude_px,
                period_frames,
                direction_deg,
                phase_rad,
            } => {
                if !(*period_frames > 0.0) {
                    return Err(Error::InvalidArgument("motion period must be > 0".into()));
                }
                let (s, c) = direction_deg.to_radians().sin_cos();
                Ok((0..nt)
                    .map(|k| {
                        let d = amplitude_px * (std::f64::consts::TAU * k as f64 / period_frames + phase_rad).sin();
                        (-d * s, d * c)
                    })
                    .collect())
            }
            MotionSpec::Trace { shifts } => {
                if shifts.len() != nt {
                    return Err(Error::InvalidArgument(format!(
                        "motion trace has {} frames, expected {nt}",
                        shifts.len()
                    )));
                }
                Ok(shifts.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub ny: usize,
    pub nx: usize,
    pub spacing_mm: (f64, f64),
    pub nt: usize,
    pub dt_s: f64,
    /// LV centre `(y, x)` in pixels.
    pub center: (f64, f64),
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub rv_radius: f64,
    /// Display angles (degrees) of the anterior and inferior RV insertion
    /// points on the epicardial border.
    pub rv_insertion_deg: (f64, f64),
    pub level: SliceLevel,
    pub background: KineticParams,
    pub defects: Vec<Defect>,
    pub aif: GammaVariate,
    /// RV blood pool enhances this many seconds ahead of the LV.
    pub rv_lead_s: f64,
    pub prebolus_scale: f64,
    pub sequence: SequenceParams,
    #[serde(rename = "T10_blood_s")]
    pub t10_blood: f64,
    /// Additive Gaussian noise SD in signal units.
    pub noise_sd: f64,
    pub motion: MotionSpec,
}

/// Plasma flow (ml/min/ml) for a blood flow in ml/min/g.
pub fn fp_from_mbf(mbf: f64, c: &PhysioConstants) -> f64 {
    mbf * (1.0 - c.hct) * c.density
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let c = PhysioConstants::default();
        Self {
            ny: 64,
            nx: 64,
            spacing_mm: (1.5, 1.5),
            nt: 60,
            dt_s: 1.0,
            center: (32.0, 36.0),
            inner_radius: 8.0,
            outer_radius: 14.0,
            rv_radius: 7.0,
            rv_insertion_deg: (130.0, 230.0),
            level: SliceLevel::Mid,
            background: KineticParams {
                fp: fp_from_mbf(1.93, &c),
                vp: 0.08 * (1.0 - c.hct),
                ve: 0.18,
                ps: 0.65,
                delay: 1.0,
            },
            defects: Vec::new(),
            aif: GammaVariate::default(),
            rv_lead_s: 3.0,
            prebolus_scale: 1.0 / DUAL_BOLUS_SCALE,
            sequence: SequenceParams {
                s0: 1000.0,
                ..SequenceParams::default()
            },
            t10_blood: 1.8,
            noise_sd: 0.0,
            motion: MotionSpec::None,
        }
    }
}

impl PhantomSpec {
    /// Adds a defect covering every segment of `territory` present on the
    /// phantom slice, with flow scaled by `factor`.
    pub fn with_territory_defect(mut self, territory: Territory, factor: f64) -> Self {
        let segs: Vec<u8> = territory
            .segments()
            .iter()
            .copied()
            .filter(|&s| {
                let first = self.level.first_segment();
                s >= first && s < first + self.level.sectors() as u8
            })
            .collect();
        if let (Some(&lo), Some(&hi)) = (segs.iter().min(), segs.iter().max()) {
            self.defects.push(Defect {
                aha_range: (lo, hi),
                layer: None,
                params: KineticParams {
                    fp: self.background.fp * factor,
                    ..self.background
                },
            });
        }
        self
    }

    /// Noise SD giving `snr_db` relative to the peak myocardial enhancement
    /// of the background tissue.
    pub fn noise_sd_for_snr(&self, snr_db: f64) -> Result<f64> {
        let times: Vec<f64> = (0..self.nt).map(|k| k as f64 * self.dt_s).collect();
        let aif = self.aif.sample(self.dt_s, self.nt)?;
        let c = ForwardModel::new(&aif, &times)?.eval(&self.background)?;
        let seq = self.sequence;
        let base = seq.signal_from_t1(seq.t10);
        let peak = c
            .iter()
            .map(|&v| seq.signal_from_t1(t1_from_gd(&seq, v)) - base)
            .fold(0.0, f64::max);
        Ok(peak / 10f64.powf(snr_db / 20.0))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("phantom: {m}")));
        if self.ny < 16 || self.nx < 16 {
            return bad("grid must be at least 16x16".into());
        }
        if self.nt < 2 || !(self.dt_s > 0.0) {
            return bad("need nt >= 2 and dt > 0".into());
        }
        if !(self.inner_radius > 0.0 && self.outer_radius > self.inner_radius + 1.0) {
            return bad("annulus needs 0 < inner radius < outer radius - 1".into());
        }
        let (cy, cx) = self.center;
        let r = self.outer_radius;
        if cy - r < 0.0 || cx - r < 0.0 || cy + r > (self.ny - 1) as f64 || cx + r > (self.nx - 1) as f64 {
            return bad("annulus leaves the grid".into());
        }
        let (ry, rx) = self.rv_center();
        let rr = self.rv_radius;
        if !(rr > 0.0)
            || ry - rr < 0.0
            || rx - rr < 0.0
            || ry + rr > (self.ny - 1) as f64
            || rx + rr > (self.nx - 1) as f64
        {
            return bad("RV pool leaves the grid".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise SD must be >= 0".into());
        }
        if !(self.prebolus_scale > 0.0) || !(self.t10_blood > 0.0) {
            return bad("pre-bolus scale and blood T10 must be > 0".into());
        }
        self.sequence.validate()?;
        self.aif.validate()?;
        self.background.validate()?;
        let end = (self.nt - 1) as f64 * self.dt_s;
        if self.aif.peak > 0.0
            && (end < self.aif.t0 + self.aif.a * self.aif.b || self.aif.eval(end) > 0.05 * self.aif.peak)
        {
            return bad(format!("acquisition of {end} s does not cover the AIF bolus"));
        }
        let first = self.level.first_segment();
        let last = first + self.level.sectors() as u8 - 1;
        for d in &self.defects {
            d.params.validate()?;
            let (lo, hi) = d.aha_range;
            if lo > hi || lo < first || hi > last {
                return bad(format!(
                    "defect segments {lo}..={hi} outside slice range {first}..={last}"
                ));
            }
        }
        self.motion.shifts(self.nt)?;
        Ok(())
    }

    fn rv_center(&self) -> (f64, f64) {
        let (a0, a1) = self.rv_insertion_deg;
        let ang = (0.5 * (a0 + a1)).to_radians();
        let d = self.outer_radius + self.rv_radius + 1.0;
        (self.center.0 - d * ang.sin(), self.center.1 + d * ang.cos())
    }

    pub fn rv_points(&self) -> [(f64, f64); 2] {
        let p = |deg: f64| {
            let a = deg.to_radians();
            (
                self.center.0 - self.outer_radius * a.sin(),
                self.center.1 + self.outer_radius * a.cos(),
            )
        };
        [p(self.rv_insertion_deg.0), p(self.rv_insertion_deg.1)]
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nt).map(|k| k as f64 * self.dt_s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Body,
    Myocardium,
    LvBlood,
    RvBlood,
    Air,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    /// Noisy, moving signal series.
    pub series: ImageSeries,
    /// Noise-free, motion-free concentration series.
    pub concentration: ImageSeries,
    /// Main-bolus AIF (concentration).
    pub aif: SampledCurve,
    /// LV blood-pool signal of the pre-bolus acquisition.
    pub prebolus_signal: SampledCurve,
    pub truth: ParamMaps,
    pub mask: Mask,
    pub rv_points: [(f64, f64); 2],
    pub segments: SegmentImage,
    /// Applied per-frame `(dy, dx)`.
    pub motion: Vec<(f64, f64)>,
}

fn body_texture(y: f64, x: f64, ny: f64, nx: f64) -> f64 {
    let (u, v) = ((y - 0.5 * ny) / (0.48 * ny), (x - 0.5 * nx) / (0.48 * nx));
    if u * u + v * v > 1.0 {
        return 0.0;
    }
    let t = std::f64::consts::TAU;
    0.12 * (1.0 + 0.4 * (t * x / 13.0).sin() * (t * y / 17.0).cos() + 0.25 * (t * (x + y) / 9.0).cos())
}

pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let (ny, nx, nt) = (spec.ny, spec.nx, spec.nt);
    let (cy, cx) = spec.center;
    let (ry, rx) = spec.rv_center();
    let classes: Vec<Tissue> = (0..ny * nx)
        .map(|i| {
            let (y, x) = ((i / nx) as f64, (i % nx) as f64);
            let r = (y - cy).hypot(x - cx);
            if r < spec.inner_radius {
                Tissue::LvBlood
            } else if r <= spec.outer_radius {
                Tissue::Myocardium
            } else if (y - ry).hypot(x - rx) <= spec.rv_radius {
                Tissue::RvBlood
            } else if body_texture(y, x, ny as f64, nx as f64) > 0.0 {
                Tissue::Body
            } else {
                Tissue::Air
            }
        })
        .collect();
    let mask = Mask::new(ny, nx, classes.iter().map(|&c| c == Tissue::Myocardium).collect())?;
    let rv_points = spec.rv_points();
    let segments = assign_segments(
        &mask,
        rv_points,
        spec.level,
        Some(spec.center),
        &SegmentConfig::default(),
    )?;

    let mut truth = ParamMaps::nan(ny, nx);
    for i in mask.indices() {
        let seg = crate::analysis::Segment::from_label(segments.labels[i]).expect("labelled mask pixel");
        let p = spec
            .defects
            .iter()
            .rev()
            .find(|d| seg.aha >= d.aha_range.0 && seg.aha <= d.aha_range.1 && d.layer.is_none_or(|l| l == seg.layer))
            .map_or(spec.background, |d| d.params);
        truth.set(i, &p);
    }

    let times = spec.times();
    let aif = spec.aif.sample(spec.dt_s, nt)?;
    let rv_curve: Vec<f64> = times.iter().map(|&t| spec.aif.eval(t + spec.rv_lead_s)).collect();
    let mut conc = vec![0.0; nt * ny * nx];
    let tissue_curves: Vec<(usize, Vec<f64>)> = mask
        .indices()
        .into_par_iter()
        .map_init(
            || ForwardModel::new(&aif, &times).expect("validated AIF grid"),
            |fm, i| {
                let p = truth.get(i).expect("mask pixel has parameters");
                (i, fm.eval(&p).expect("validated parameters"))
            },
        )
        .collect();
    for (i, c) in &tissue_curves {
        for (k, v) in c.iter().enumerate() {
            conc[k * ny * nx + i] = *v;
        }
    }
    for (i, cls) in classes.iter().enumerate() {
        let src = match cls {
            Tissue::LvBlood => aif.values(),
            Tissue::RvBlood => &rv_curve[..],
            _ => continue,
        };
        for k in 0..nt {
            conc[k * ny * nx + i] = src[k];
        }
    }

    let tissue_seq = spec.sequence;
    let blood_seq = spec.sequence.with_t10(spec.t10_blood);
    let mut signal = vec![0.0; nt * ny * nx];
    for (i, cls) in classes.iter().enumerate() {
        let (y, x) = ((i / nx) as f64, (i % nx) as f64);
        for k in 0..nt {
            let c = conc[k * ny * nx + i];
            signal[k * ny * nx + i] = match cls {
                Tissue::Myocardium => tissue_seq.signal_from_t1(t1_from_gd(&tissue_seq, c)),
                Tissue::LvBlood | Tissue::RvBlood => blood_seq.signal_from_t1(t1_from_gd(&blood_seq, c)),
                Tissue::Body => tissue_seq.s0 * tissue_seq.psi * body_texture(y, x, ny as f64, nx as f64),
                Tissue::Air => 0.0,
            };
        }
    }

    let motion = spec.motion.shifts(nt)?;
    let mut moved = Vec::with_capacity(signal.len());
    for (k, &(dy, dx)) in motion.iter().enumerate() {
        let frame = &signal[k * ny * nx..(k + 1) * ny * nx];
        if dy == 0.0 && dx == 0.0 {
            moved.extend_from_slice(frame);
        } else {
            moved.extend(translate_frame(frame, ny, nx, dy, dx));
        }
    }

    let pre_values: Vec<f64> = aif
        .values()
        .iter()
        .map(|&c| blood_seq.signal_from_t1(t1_from_gd(&blood_seq, c * spec.prebolus_scale)))
        .collect();
    let mut prebolus = pre_values;
    if spec.noise_sd > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, streams::PHANTOM_NOISE));
        for v in moved.iter_mut() {
            *v += normal.sample(&mut rng);
        }
        let n_lv = classes.iter().filter(|&&c| c == Tissue::LvBlood).count().max(1);
        let pool = Normal::new(0.0, spec.noise_sd / (n_lv as f64).sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in prebolus.iter_mut() {
            *v += pool.sample(&mut rng);
        }
    }

    Ok(Phantom {
        series: ImageSeries::new(nt, ny, nx, spec.spacing_mm, moved)?,
        concentration: ImageSeries::new(nt, ny, nx, spec.spacing_mm, conc)?,
        aif,
        prebolus_signal: SampledCurve::new(times, prebolus, CurveKind::Signal)?,
        truth,
        mask,
        rv_points,
        segments,
        motion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        PhantomSpec::default().validate().unwrap();
        let s = PhantomSpec {
            nt: 20,
            ..PhantomSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn sinusoid_direction() {
        let m = MotionSpec::Sinusoidal {
            amplitude_px: 2.0,
            period_frames: 4.0,
            direction_deg: 90.0,
            phase_rad: 0.0,
        };
        let s = m.shifts(4).unwrap();
        assert!((s[1].0 + 2.0).abs() < 1e-12 && s[1].1.abs() < 1e-12);
    }

    #[test]
    fn territory_defect_on_mid_slice() {
        let s = PhantomSpec::default().with_territory_defect(Territory::Rca, 0.6);
        assert_eq!(s.defects[0].aha_range, (9, 10));
        assert!((s.defects[0].params.fp - 0.6 * s.background.fp).abs() < 1e-15);
    }
}
