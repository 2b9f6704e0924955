//! Time series of concentration or signal samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used to decide whether a grid is uniform and whether
/// a requested time sits on a grid node.
pub const GRID_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Aif,
    Tissue,
    Signal,
}

/// A time/value series. Times are in seconds and strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCurve {
    times: Vec<f64>,
    values: Vec<f64>,
    kind: CurveKind,
}

impl SampledCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>, kind: CurveKind) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidCurve(format!(
                "{} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::InvalidCurve("empty curve".into()));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidCurve(format!(
                "times not strictly increasing at index {}",
                i + 1
            )));
        }
        if let Some(i) = times.iter().chain(values.iter()).position(|v| !v.is_finite()) {
            return Err(Error::InvalidCurve(format!("non-finite entry at {i}")));
        }
        Ok(Self { times, values, kind })
    }

    /// Uniformly sampled curve `t_k = t0 + k*dt`.
    pub fn uniform(t0: f64, dt: f64, values: Vec<f64>, kind: CurveKind) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidCurve(format!("non-positive spacing {dt}")));
        }
        let times = uniform_times(t0, dt, values.len());
        Self::new(times, values, kind)
    }

    /// Samples `f` on a uniform grid.
    pub fn from_fn(t0: f64, dt: f64, n: usize, kind: CurveKind, f: impl Fn(f64) -> f64) -> Result<Self> {
        let times = uniform_times(t0, dt, n);
        let values = times.iter().map(|&t| f(t)).collect();
        Self::new(times, values, kind)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn with_kind(mut self, kind: CurveKind) -> Self {
        self.kind = kind;
        self
    }

    /// Same grid, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.times.clone(), values, self.kind)
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>, CurveKind) {
        (self.times, self.values, self.kind)
    }

    /// Grid spacing if the curve is uniformly sampled.
    pub fn uniform_spacing(&self) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        let n = self.times.len();
        let dt = (self.times[n - 1] - self.times[0]) / (n - 1) as f64;
        let ok = self.times.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-6 * dt);
        ok.then_some(dt)
    }

    /// Linear interpolation; zero before the first sample, last value after the end.
    pub fn interpolate(&self, t: f64) -> f64 {
        interpolate_linear(&self.times, &self.values, t)
    }

    /// Resamples onto `times` by linear interpolation.
    pub fn resample(&self, times: &[f64]) -> Result<Self> {
        let values = times.iter().map(|&t| self.interpolate(t)).collect();
        Self::new(times.to_vec(), values, self.kind)
    }

    /// Resamples onto a uniform grid spanning the same interval with the same
    /// number of samples. Uniform curves are returned unchanged.
    pub fn to_uniform(&self) -> Result<Self> {
        if self.uniform_spacing().is_some() || self.len() < 2 {
            return Ok(self.clone());
        }
        let n = self.len();
        let dt = (self.times[n - 1] - self.times[0]) / (n - 1) as f64;
        self.resample(&uniform_times(self.times[0], dt, n))
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the grid node at `t`, if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let scale = self
            .times
            .last()
            .map_or(1.0, |l| l.abs().max(self.times[0].abs()).max(1.0));
        let i = self.times.partition_point(|&x| x < t - GRID_RTOL * scale);
        (i < self.times.len() && (self.times[i] - t).abs() <= GRID_RTOL * scale).then_some(i)
    }
}

pub fn uniform_times(t0: f64, dt: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| t0 + k as f64 * dt).collect()
}

pub(crate) fn interpolate_linear(times: &[f64], values: &[f64], t: f64) -> f64 {
    let n = times.len();
    if n == 0 || t < times[0] {
        return 0.0;
    }
    if t >= times[n - 1] {
        return values[n - 1];
    }
    let i = times.partition_point(|&x| x <= t);
    let (t0, t1) = (times[i - 1], times[i]);
    let w = (t - t0) / (t1 - t0);
    values[i - 1] + w * (values[i] - values[i - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_curves() {
        assert!(SampledCurve::new(vec![0.0, 1.0], vec![0.0], CurveKind::Aif).is_err());
        assert!(SampledCurve::new(vec![0.0, 0.0], vec![0.0, 1.0], CurveKind::Aif).is_err());
        assert!(SampledCurve::new(vec![0.0, 1.0], vec![f64::NAN, 1.0], CurveKind::Aif).is_err());
        assert!(SampledCurve::new(vec![], vec![], CurveKind::Aif).is_err());
    }

    #[test]
    fn uniform_detection() {
        let c = SampledCurve::from_fn(0.0, 0.5, 181, CurveKind::Aif, |t| t).unwrap();
        assert!((c.uniform_spacing().unwrap() - 0.5).abs() < 1e-12);
        let nu = SampledCurve::new(vec![0.0, 1.0, 3.0], vec![0.0; 3], CurveKind::Aif).unwrap();
        assert!(nu.uniform_spacing().is_none());
        let u = nu.to_uniform().unwrap();
        assert_eq!(u.times(), &[0.0, 1.5, 3.0]);
    }

    #[test]
    fn node_lookup() {
        let c = SampledCurve::from_fn(0.0, 0.5, 181, CurveKind::Aif, |t| t).unwrap();
        assert_eq!(c.node_index(30.0), Some(60));
        assert_eq!(c.node_index(30.25), None);
        assert_eq!(c.node_index(0.0), Some(0));
        assert_eq!(c.node_index(90.0), Some(180));
        assert_eq!(c.node_index(91.0), None);
    }

    #[test]
    fn interpolation_edges() {
        let c = SampledCurve::new(vec![1.0, 2.0], vec![2.0, 4.0], CurveKind::Aif).unwrap();
        assert_eq!(c.interpolate(0.5), 0.0);
        assert_eq!(c.interpolate(1.5), 3.0);
        assert_eq!(c.interpolate(5.0), 4.0);
    }
}
