//! Dynamic image series and pixel masks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KineticParams, PhysioConstants};

/// Frame-major stack of `nt` frames of `ny x nx` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSeries {
    nt: usize,
    ny: usize,
    nx: usize,
    /// Pixel spacing `(dy, dx)` in mm.
    spacing: (f64, f64),
    data: Vec<f64>,
}

impl ImageSeries {
    pub fn new(nt: usize, ny: usize, nx: usize, spacing: (f64, f64), data: Vec<f64>) -> Result<Self> {
        if nt == 0 || ny == 0 || nx == 0 {
            return Err(Error::InvalidArgument("image series dimensions must be > 0".into()));
        }
        if data.len() != nt * ny * nx {
            return Err(Error::InvalidArgument(format!(
                "expected {} samples for {nt}x{ny}x{nx}, got {}",
                nt * ny * nx,
                data.len()
            )));
        }
        Ok(Self {
            nt,
            ny,
            nx,
            spacing,
            data,
        })
    }

    pub fn zeros(nt: usize, ny: usize, nx: usize) -> Result<Self> {
        Self::new(nt, ny, nx, (1.0, 1.0), vec![0.0; nt * ny * nx])
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn n_pixels(&self) -> usize {
        self.ny * self.nx
    }

    pub fn spacing(&self) -> (f64, f64) {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: (f64, f64)) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.n_pixels();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.n_pixels();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> f64 {
        self.data[(t * self.ny + y) * self.nx + x]
    }

    /// Time course of pixel `index` (row-major `y * nx + x`).
    pub fn pixel_curve(&self, index: usize) -> Vec<f64> {
        let n = self.n_pixels();
        (0..self.nt).map(|t| self.data[t * n + index]).collect()
    }

    /// Pixels x frames matrix, one column per frame.
    pub fn casorati(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n_pixels(), self.nt, &self.data)
    }

    pub fn from_casorati(m: &DMatrix<f64>, ny: usize, nx: usize, spacing: (f64, f64)) -> Result<Self> {
        if m.nrows() != ny * nx {
            return Err(Error::InvalidArgument(format!(
                "Casorati matrix has {} rows, expected {}",
                m.nrows(),
                ny * nx
            )));
        }
        Self::new(m.ncols(), ny, nx, spacing, m.as_slice().to_vec())
    }

    /// Mean over frames.
    pub fn temporal_mean(&self) -> Vec<f64> {
        let n = self.n_pixels();
        let mut out = vec![0.0; n];
        for t in 0..self.nt {
            for (o, v) in out.iter_mut().zip(self.frame(t)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.nt as f64);
        out
    }

    /// Population variance over frames.
    pub fn temporal_variance(&self) -> Vec<f64> {
        let mean = self.temporal_mean();
        let mut out = vec![0.0; self.n_pixels()];
        for t in 0..self.nt {
            for ((o, v), m) in out.iter_mut().zip(self.frame(t)).zip(&mean) {
                *o += (v - m) * (v - m);
            }
        }
        out.iter_mut().for_each(|v| *v /= self.nt as f64);
        out
    }
}

/// Bilinear sample of a row-major `ny x nx` frame at `(y, x)`, clamping to
/// the edge pixels outside the frame.
pub fn sample_bilinear(frame: &[f64], ny: usize, nx: usize, y: f64, x: f64) -> f64 {
    let yc = y.clamp(0.0, (ny - 1) as f64);
    let xc = x.clamp(0.0, (nx - 1) as f64);
    let y0 = (yc.floor() as usize).min(ny.saturating_sub(2));
    let x0 = (xc.floor() as usize).min(nx.saturating_sub(2));
    let y1 = (y0 + 1).min(ny - 1);
    let x1 = (x0 + 1).min(nx - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    let a = frame[y0 * nx + x0];
    let b = frame[y0 * nx + x1];
    let c = frame[y1 * nx + x0];
    let d = frame[y1 * nx + x1];
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}

/// Translates a frame so that `out(y, x) = frame(y - dy, x - dx)`.
pub fn translate_frame(frame: &[f64], ny: usize, nx: usize, dy: f64, dx: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(ny * nx);
    for y in 0..ny {
        for x in 0..nx {
            out.push(sample_bilinear(frame, ny, nx, y as f64 - dy, x as f64 - dx));
        }
    }
    out
}

/// Per-pixel kinetic parameter maps, NaN outside the analysed region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMaps {
    pub ny: usize,
    pub nx: usize,
    /// Fp, vp, ve, PS, delay in [`KineticParams::NAMES`] order.
    pub maps: [Vec<f64>; 5],
}

impl ParamMaps {
    pub fn nan(ny: usize, nx: usize) -> Self {
        Self {
            ny,
            nx,
            maps: std::array::from_fn(|_| vec![f64::NAN; ny * nx]),
        }
    }

    pub fn set(&mut self, index: usize, p: &KineticParams) {
        for (m, v) in self.maps.iter_mut().zip(p.as_array()) {
            m[index] = v;
        }
    }

    pub fn get(&self, index: usize) -> Option<KineticParams> {
        let a: [f64; 5] = std::array::from_fn(|k| self.maps[k][index]);
        a.iter().all(|v| v.is_finite()).then(|| KineticParams::from_array(a))
    }

    /// Myocardial blood flow (ml/min/g).
    pub fn mbf(&self, c: &PhysioConstants) -> Vec<f64> {
        self.maps[0]
            .iter()
            .map(|&fp| fp / ((1.0 - c.hct) * c.density))
            .collect()
    }
}

/// Boolean pixel mask on a `ny x nx` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    ny: usize,
    nx: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(ny: usize, nx: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != ny * nx {
            return Err(Error::InvalidArgument(format!(
                "mask has {} entries, expected {}",
                data.len(),
                ny * nx
            )));
        }
        Ok(Self { ny, nx, data })
    }

    pub fn from_fn(ny: usize, nx: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..ny * nx).map(|i| f(i / nx, i % nx)).collect();
        Self { ny, nx, data }
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.nx + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i]).collect()
    }

    /// In-mask neighbours of pixel `index`, 4- or 8-connected.
    pub fn neighbors(&self, index: usize, eight: bool) -> Vec<usize> {
        let (y, x) = ((index / self.nx) as isize, (index % self.nx) as isize);
        let mut out = Vec::with_capacity(8);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                    continue;
                }
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= self.ny as isize || xx >= self.nx as isize {
                    continue;
                }
                let j = yy as usize * self.nx + xx as usize;
                if self.data[j] {
                    out.push(j);
                }
            }
        }
        out
    }
}
