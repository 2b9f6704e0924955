//! Segmental analysis: heart localisation, AHA segment geometry, per-vessel
//! flow statistics, threshold classification and ROC analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageSeries, Mask};

/// Patient-level cut-off (ml/min/g).
pub const PATIENT_THRESHOLD: f64 = 1.34;
/// Per-vessel cut-off (ml/min/g).
pub const VESSEL_THRESHOLD: f64 = 1.31;
pub const LOWEST_SEGMENTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceLevel {
    Basal,
    Mid,
    Apical,
}

impl SliceLevel {
    pub fn sectors(self) -> usize {
        match self {
            SliceLevel::Apical => 4,
            _ => 6,
        }
    }

    pub fn first_segment(self) -> u8 {
        match self {
            SliceLevel::Basal => 1,
            SliceLevel::Mid => 7,
            SliceLevel::Apical => 13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Endo,
    Epi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Territory {
    Lad,
    Rca,
    Lcx,
}

impl Territory {
    pub const ALL: [Territory; 3] = [Territory::Lad, Territory::Rca, Territory::Lcx];

    pub fn of_segment(aha: u8) -> Option<Territory> {
        match aha {
            1 | 2 | 7 | 8 | 13 | 14 => Some(Territory::Lad),
            3 | 4 | 9 | 10 | 15 => Some(Territory::Rca),
            5 | 6 | 11 | 12 | 16 => Some(Territory::Lcx),
            _ => None,
        }
    }

    pub fn segments(self) -> &'static [u8] {
        match self {
            Territory::Lad => &[1, 2, 7, 8, 13, 14],
            Territory::Rca => &[3, 4, 9, 10, 15],
            Territory::Lcx => &[5, 6, 11, 12, 16],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Territory::Lad => "LAD",
            Territory::Rca => "RCA",
            Territory::Lcx => "LCx",
        }
    }
}

/// One of the 32 layered AHA segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub aha: u8,
    pub layer: Layer,
}

impl Segment {
    /// Image label: `aha` for endocardial, `aha + 16` for epicardial; 0 is
    /// background.
    pub fn label(self) -> u8 {
        match self.layer {
            Layer::Endo => self.aha,
            Layer::Epi => self.aha + 16,
        }
    }

    pub fn from_label(label: u8) -> Option<Segment> {
        match label {
            1..=16 => Some(Segment {
                aha: label,
                layer: Layer::Endo,
            }),
            17..=32 => Some(Segment {
                aha: label - 16,
                layer: Layer::Epi,
            }),
            _ => None,
        }
    }

    pub fn territory(self) -> Territory {
        Territory::of_segment(self.aha).expect("AHA segment in 1..=16")
    }

    pub fn level(self) -> SliceLevel {
        match self.aha {
            1..=6 => SliceLevel::Basal,
            7..=12 => SliceLevel::Mid,
            _ => SliceLevel::Apical,
        }
    }
}

/// Segment label per pixel (0 outside the myocardium).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentImage {
    pub ny: usize,
    pub nx: usize,
    pub level: SliceLevel,
    pub labels: Vec<u8>,
}

impl SegmentImage {
    pub fn labels_present(&self) -> Vec<u8> {
        let mut v: Vec<u8> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn pixels_of(&self, label: u8) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn mask(&self) -> Mask {
        Mask::new(self.ny, self.nx, self.labels.iter().map(|&l| l > 0).collect()).expect("consistent dimensions")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Rotation of the sector origin relative to the anterior insertion
    /// point, degrees counterclockwise.
    pub origin_offset_deg: f64,
    /// Extra rotation applied to the 4-sector apical layout.
    pub apical_offset_deg: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            origin_offset_deg: 0.0,
            apical_offset_deg: -45.0,
        }
    }
}

/// Polar angle of `(y, x)` about `(cy, cx)` in radians, counterclockwise as
/// displayed (rows grow downwards), in `[0, 2 pi)`.
pub fn display_angle(y: f64, x: f64, cy: f64, cx: f64) -> f64 {
    let a = (-(y - cy)).atan2(x - cx);
    a.rem_euclid(std::f64::consts::TAU)
}

pub fn mask_centroid(mask: &Mask) -> Result<(f64, f64)> {
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = idx.len() as f64;
    let cy = idx.iter().map(|&i| (i / mask.nx()) as f64).sum::<f64>() / n;
    let cx = idx.iter().map(|&i| (i % mask.nx()) as f64).sum::<f64>() / n;
    Ok((cy, cx))
}

/// Inner and outer mask radius along the ray at `angle` from the centre:
/// the first contiguous run of mask samples.
fn ray_extent(mask: &Mask, cy: f64, cx: f64, angle: f64) -> Option<(f64, f64)> {
    let (s, c) = angle.sin_cos();
    let step = 0.1;
    let rmax = (mask.ny() + mask.nx()) as f64;
    let mut inner = None;
    let mut r = 0.0;
    while r < rmax {
        let y = (cy - r * s).round();
        let x = (cx + r * c).round();
        if y < 0.0 || x < 0.0 || y >= mask.ny() as f64 || x >= mask.nx() as f64 {
            break;
        }
        let inside = mask.get(y as usize, x as usize);
        match (inside, inner) {
            (true, None) => inner = Some(r),
            (false, Some(r0)) => return Some((r0, r)),
            _ => {}
        }
        r += step;
    }
    inner.map(|r0| (r0, r))
}

/// Labels every mask pixel with its layered AHA segment.
///
/// Sectors run counterclockwise (as displayed) from the angle of the
/// anterior RV insertion point `rv_points[0]` about the centre. Each pixel
/// is endocardial when it lies inside the midline between the inner and
/// outer mask boundary along its own ray.
pub fn assign_segments(
    mask: &Mask,
    rv_points: [(f64, f64); 2],
    level: SliceLevel,
    centroid: Option<(f64, f64)>,
    cfg: &SegmentConfig,
) -> Result<SegmentImage> {
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (a, b) = (rv_points[0], rv_points[1]);
    if (a.0 - b.0).hypot(a.1 - b.1) < 1e-9 {
        return Err(Error::CoincidentRvPoints);
    }
    let (cy, cx) = match centroid {
        Some(c) => c,
        None => mask_centroid(mask)?,
    };
    let n_sec = level.sectors();
    let width = std::f64::consts::TAU / n_sec as f64;
    let mut origin = display_angle(a.0, a.1, cy, cx) + cfg.origin_offset_deg.to_radians();
    if level == SliceLevel::Apical {
        origin += cfg.apical_offset_deg.to_radians();
    }
    let mut labels = vec![0u8; mask.ny() * mask.nx()];
    for &i in &idx {
        let (y, x) = ((i / mask.nx()) as f64, (i % mask.nx()) as f64);
        let ang = display_angle(y, x, cy, cx);
        let rel = (ang - origin).rem_euclid(std::f64::consts::TAU);
        let sector = ((rel / width) as usize).min(n_sec - 1);
        let r = (y - cy).hypot(x - cx);
        let layer = match ray_extent(mask, cy, cx, ang) {
            Some((r_in, r_out)) if r >= 0.5 * (r_in + r_out) => Layer::Epi,
            Some(_) => Layer::Endo,
            None => Layer::Epi,
        };
        labels[i] = Segment {
            aha: level.first_segment() + sector as u8,
            layer,
        }
        .label();
    }
    Ok(SegmentImage {
        ny: mask.ny(),
        nx: mask.nx(),
        level,
        labels,
    })
}

/// Mean of the `k` smallest values.
pub fn mean_of_lowest(values: &[f64], k: usize) -> Result<f64> {
    if values.len() < k || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least {k} values, got {}",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

/// Mean of `map` over each labelled segment, skipping non-finite pixels.
pub fn segment_means(map: &[f64], segments: &SegmentImage) -> Result<BTreeMap<u8, f64>> {
    if map.len() != segments.labels.len() {
        return Err(Error::InvalidArgument("map and segment image sizes differ".into()));
    }
    let mut acc: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    for (&l, &v) in segments.labels.iter().zip(map) {
        if l > 0 && v.is_finite() {
            let e = acc.entry(l).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerritoryStatistic {
    pub territory: Territory,
    pub statistic: f64,
    pub n_segments: usize,
}

/// Per territory, the mean of the four lowest segment means.
pub fn per_vessel_statistic(map: &[f64], segments: &SegmentImage) -> Result<Vec<TerritoryStatistic>> {
    let means = segment_means(map, segments)?;
    per_vessel_from_means(&means)
}

/// As [`per_vessel_statistic`] from precomputed segment means keyed by
/// segment label.
pub fn per_vessel_from_means(means: &BTreeMap<u8, f64>) -> Result<Vec<TerritoryStatistic>> {
    let mut out = Vec::new();
    for t in Territory::ALL {
        let vals: Vec<f64> = means
            .iter()
            .filter(|(&l, _)| Segment::from_label(l).is_some_and(|s| s.territory() == t))
            .map(|(_, &v)| v)
            .collect();
        if vals.len() < LOWEST_SEGMENTS {
            return Err(Error::InsufficientSegments {
                territory: t.name().to_string(),
                found: vals.len(),
                needed: LOWEST_SEGMENTS,
            });
        }
        out.push(TerritoryStatistic {
            territory: t,
            statistic: mean_of_lowest(&vals, LOWEST_SEGMENTS)?,
            n_segments: vals.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselResult {
    pub territory: Territory,
    pub statistic: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticResult {
    pub threshold: f64,
    pub vessels: Vec<VesselResult>,
    pub patient_positive: bool,
}

/// A vessel is positive when its statistic is strictly below `threshold`;
/// the patient is positive when any vessel is.
pub fn classify(stats: &[TerritoryStatistic], threshold: f64) -> Result<DiagnosticResult> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be > 0, got {threshold}"
        )));
    }
    let vessels: Vec<VesselResult> = stats
        .iter()
        .map(|s| VesselResult {
            territory: s.territory,
            statistic: s.statistic,
            positive: s.statistic < threshold,
        })
        .collect();
    let patient_positive = vessels.iter().any(|v| v.positive);
    Ok(DiagnosticResult {
        threshold,
        vessels,
        patient_positive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Positive when `score >= threshold`.
    #[default]
    Higher,
    /// Positive when `score <= threshold` (e.g. flow).
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub points: Vec<RocPoint>,
    pub optimal_threshold: f64,
    pub youden: f64,
    pub polarity: Polarity,
}

/// Threshold sweep over the unique scores, trapezoidal AUC and the
/// threshold maximising sensitivity + specificity - 1.
///
/// Points run from the strictest threshold (nothing positive, threshold
/// `+inf` or `-inf`) to the most lenient. The AUC is accumulated in integer
/// counts, so it equals the pairwise concordance with half credit for ties.
pub fn roc_analysis(scores: &[f64], labels: &[bool], polarity: Polarity) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let p = labels.iter().filter(|&&l| l).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    // Oriented so that larger keys are "more positive".
    let key = |s: f64| match polarity {
        Polarity::Higher => s,
        Polarity::Lower => -s,
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])));

    let strict = match polarity {
        Polarity::Higher => f64::INFINITY,
        Polarity::Lower => f64::NEG_INFINITY,
    };
    let mut points = vec![RocPoint {
        threshold: strict,
        sensitivity: 0.0,
        specificity: 1.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area2: u64 = 0;
    let mut best = (f64::NEG_INFINITY, strict);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && key(scores[order[i]]) == key(s) {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
        let sens = tp as f64 / p as f64;
        let spec = 1.0 - fp as f64 / n as f64;
        points.push(RocPoint {
            threshold: s,
            sensitivity: sens,
            specificity: spec,
        });
        let j = sens + spec - 1.0;
        if j > best.0 {
            best = (j, s);
        }
    }
    Ok(RocResult {
        auc: area2 as f64 / (2 * p * n) as f64,
        points,
        optimal_threshold: best.1,
        youden: best.0,
        polarity,
    })
}

/// Fraction of concordant positive/negative pairs with half credit for
/// ties, by direct pair enumeration.
pub fn concordance(scores: &[f64], labels: &[bool], polarity: Polarity) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            let (a, b) = match polarity {
                Polarity::Higher => (scores[i], scores[j]),
                Polarity::Lower => (scores[j], scores[i]),
            };
            if a > b {
                twice += 2;
            } else if a == b {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

pub const BBOX_QUANTILE: f64 = 0.95;
pub const BBOX_MARGIN: usize = 16;

/// 4-connected components of `on`, as lists of pixel indices, largest
/// first.
pub fn connected_components(on: &[bool], ny: usize, nx: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; on.len()];
    let mut comps = Vec::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = (i / nx, i % nx);
            let mut push = |j: usize| {
                if on[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - nx);
            }
            if y + 1 < ny {
                push(i + nx);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < nx {
                push(i + 1);
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

/// Heart bounding box from the two largest high-variance regions (the
/// ventricular blood pools).
///
/// Pixels whose temporal SD exceeds the `quantile` of all SDs are grouped
/// into connected components; components with at least a tenth of the
/// thresholded pixels count as large, and exactly two are required.
pub fn bounding_box_temporal_variance(series: &ImageSeries, quantile: f64, margin: usize) -> Result<BoundingBox> {
    if series.nt() < 10 {
        return Err(Error::InvalidArgument(format!(
            "temporal variance needs >= 10 frames, got {}",
            series.nt()
        )));
    }
    if !(0.0..1.0).contains(&quantile) {
        return Err(Error::InvalidArgument("quantile must lie in [0, 1)".into()));
    }
    let sd: Vec<f64> = series.temporal_variance().iter().map(|v| v.sqrt()).collect();
    let mut sorted = sd.clone();
    sorted.sort_by(f64::total_cmp);
    let thr = sorted[((sorted.len() - 1) as f64 * quantile).floor() as usize];
    let on: Vec<bool> = sd.iter().map(|&v| v > thr).collect();
    let total = on.iter().filter(|&&b| b).count();
    let comps = connected_components(&on, series.ny(), series.nx());
    let large: Vec<&Vec<usize>> = comps.iter().filter(|c| c.len() >= 4 && c.len() * 10 >= total).collect();
    if large.len() != 2 {
        return Err(Error::ComponentCount { found: large.len() });
    }
    let nx = series.nx();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for &i in large.iter().flat_map(|c| c.iter()) {
        let (y, x) = (i / nx, i % nx);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    Ok(BoundingBox {
        y0: y0.saturating_sub(margin),
        y1: (y1 + 1 + margin).min(series.ny()),
        x0: x0.saturating_sub(margin),
        x1: (x1 + 1 + margin).min(series.nx()),
    })
}

/// Mean time course of every labelled segment.
pub fn segment_curves(series: &ImageSeries, segments: &SegmentImage) -> Result<BTreeMap<u8, Vec<f64>>> {
    if series.ny() != segments.ny || series.nx() != segments.nx {
        return Err(Error::InvalidArgument("series and segment image sizes differ".into()));
    }
    let mut out = BTreeMap::new();
    for label in segments.labels_present() {
        let px = segments.pixels_of(label);
        let curve = (0..series.nt())
            .map(|t| {
                let f = series.frame(t);
                px.iter().map(|&i| f[i]).sum::<f64>() / px.len() as f64
            })
            .collect();
        out.insert(label, curve);
    }
    Ok(out)
}

/// Sum of absolute successive differences.
pub fn total_variation(curve: &[f64]) -> f64 {
    curve.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}
