//! Command-line stages. Each stage reads a directory written by the
//! previous one, copies its files forward and adds its own outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    assign_segments, classify, per_vessel_from_means, roc_analysis, segment_means, Polarity, SegmentImage, SliceLevel,
};
use crate::bayes::infer_field;
use crate::config::{FitMethod, RunConfig};
use crate::curve::{uniform_times, CurveKind};
use crate::error::{Error, Result};
use crate::image::{ImageSeries, ParamMaps};
use crate::io;
use crate::moco::{motion_correct, MotionEstimate};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::pipeline::{convert_series, field_maps, fit_nlls_maps};
use crate::seed::{derive, streams};

pub const PARAM_NAMES: [&str; 5] = ["fp", "vp", "ve", "ps", "delay"];

pub const SERIES: &str = "series.pqis";
pub const PREBOLUS: &str = "prebolus.csv";
pub const MASK: &str = "mask.pqis";
pub const SEGMENTS: &str = "segments.pqis";
pub const META: &str = "meta.json";
pub const CONCENTRATION: &str = "concentration.pqis";
pub const AIF: &str = "aif.csv";
pub const MBF: &str = "map_mbf.pqis";
pub const TRUTH_MBF: &str = "truth_mbf.pqis";

#[derive(Debug, Parser)]
#[command(name = "perfquant", version, about = "Quantitative myocardial perfusion analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input directory written by the previous stage.
    input: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic perfusion phantom.
    Simulate {
        /// Phantom specification (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correct in-plane motion of the image series.
    Moco(Common),
    /// Convert signal to concentration and build the AIF.
    Convert(Common),
    /// Fit kinetic parameter maps.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<FitMethod>,
        #[arg(long)]
        spatial_weight: Option<f64>,
    },
    /// Segment the myocardium and classify perfusion per territory.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Patient-level MBF threshold (ml/min/g).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Render parameter maps and bundle the summaries.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        wmin: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        wmax: Option<f64>,
    },
}

/// Acquisition geometry carried alongside the series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub t0_s: f64,
    pub dt_s: f64,
    pub nt: usize,
    pub level: SliceLevel,
    /// Anterior and inferior RV insertion points `(y, x)`.
    pub rv_points: [(f64, f64); 2],
}

impl Meta {
    pub fn times(&self) -> Vec<f64> {
        uniform_times(self.t0_s, self.dt_s, self.nt)
    }
}

/// Runs the command line `args` (program name first) and returns the exit
/// code: 0 on success, 1 on invalid input, 2 on a failed computation.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("perfquant: error: {e}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("perfquant: error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("PERFQUANT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("PERFQUANT_THREADS must be a positive integer, got {v:?}")))?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already initialised");
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { config, seed, out } => simulate(config.as_deref(), seed, &out),
        Command::Moco(c) => {
            let s = Stage::open(c)?;
            moco(&s)
        }
        Command::Convert(c) => {
            let s = Stage::open(c)?;
            convert(&s)
        }
        Command::Fit {
            common,
            method,
            spatial_weight,
        } => {
            let mut s = Stage::open(common)?;
            if let Some(m) = method {
                s.cfg.fit.method = m;
            }
            if let Some(w) = spatial_weight {
                s.cfg.fit.prior.spatial_weight = w;
            }
            s.cfg.validate()?;
            fit(&s)
        }
        Command::Analyze { common, threshold } => {
            let mut s = Stage::open(common)?;
            if let Some(t) = threshold {
                s.cfg.thresholds.patient = t;
            }
            s.cfg.validate()?;
            analyze(&s)
        }
        Command::Report { common, wmin, wmax } => {
            let s = Stage::open(common)?;
            report(&s, wmin, wmax)
        }
    }
}

struct Stage {
    cfg: RunConfig,
    input: PathBuf,
    out: PathBuf,
}

impl Stage {
    fn open(c: Common) -> Result<Stage> {
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        let input = c
            .input
            .or_else(|| cfg.paths.input.clone())
            .ok_or_else(|| Error::Config("no input directory given".into()))?;
        let out = c
            .out
            .or_else(|| cfg.paths.out.clone())
            .ok_or_else(|| Error::Config("no output directory given (--out)".into()))?;
        if !input.is_dir() {
            return Err(Error::Config(format!(
                "input directory {} does not exist",
                input.display()
            )));
        }
        fs::create_dir_all(&out)?;
        copy_forward(&input, &out)?;
        Ok(Stage { cfg, input, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.input.join(name)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn meta(&self) -> Result<Meta> {
        io::read_json(&self.path(META))
    }
}

/// Copies the regular files of `from` into `to` in name order.
fn copy_forward(from: &Path, to: &Path) -> Result<()> {
    if fs::canonicalize(from)? == fs::canonicalize(to)? {
        return Ok(());
    }
    let mut names: Vec<PathBuf> = fs::read_dir(from)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::result::Result<_, _>>()?;
    names.sort();
    for p in names.into_iter().filter(|p| p.is_file()) {
        fs::copy(&p, to.join(p.file_name().expect("file name")))?;
    }
    Ok(())
}

fn simulate(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let spec: PhantomSpec = match config {
        Some(p) => io::read_json(p)?,
        None => PhantomSpec::default(),
    };
    let ph = generate_phantom(&spec, seed)?;
    fs::create_dir_all(out)?;
    let sp = spec.spacing_mm;
    let (ny, nx) = (spec.ny, spec.nx);
    io::write_series(&out.join(SERIES), &ph.series)?;
    io::write_curve(&out.join(PREBOLUS), &ph.prebolus_signal)?;
    io::write_series(&out.join(MASK), &io::mask_to_series(&ph.mask, sp)?)?;
    io::write_series(&out.join(SEGMENTS), &io::segments_to_series(&ph.segments, sp)?)?;
    io::write_json(
        &out.join(META),
        &Meta {
            t0_s: 0.0,
            dt_s: spec.dt_s,
            nt: spec.nt,
            level: spec.level,
            rv_points: ph.rv_points,
        },
    )?;
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        io::write_series(
            &out.join(format!("truth_{name}.pqis")),
            &io::map_series(&ph.truth.maps[k], ny, nx, sp)?,
        )?;
    }
    let physio = RunConfig::default().physio;
    io::write_series(
        &out.join(TRUTH_MBF),
        &io::map_series(&ph.truth.mbf(&physio), ny, nx, sp)?,
    )?;
    io::write_motion(&out.join("motion_true.csv"), &MotionEstimate { shifts: ph.motion })?;
    io::write_curve(&out.join("aif_true.csv"), &ph.aif)?;
    io::write_json(&out.join("phantom.json"), &spec)?;
    Ok(())
}

fn moco(s: &Stage) -> Result<()> {
    let series = io::read_series(&s.path(SERIES))?;
    let (corrected, motion) = if s.cfg.moco.enabled {
        motion_correct(&series, &s.cfg.moco.config)?
    } else {
        let nt = series.nt();
        (series, MotionEstimate::zeros(nt))
    };
    log::info!("max estimated shift {:.3} px", motion.max_magnitude());
    io::write_series(&s.out(SERIES), &corrected)?;
    io::write_motion(&s.out("motion.csv"), &motion)
}

fn convert(s: &Stage) -> Result<()> {
    let series = io::read_series(&s.path(SERIES))?;
    let pre = io::read_curve(&s.path(PREBOLUS), CurveKind::Signal)?;
    let mask = io::series_to_mask(&io::read_map(&s.path(MASK))?)?;
    let times = s.meta()?.times();
    let c = convert_series(&series, &pre, &times, &mask, &s.cfg.convert_config())?;
    io::write_series(&s.out(CONCENTRATION), &c.tissue)?;
    io::write_curve(&s.out(AIF), &c.aif)?;
    io::write_json(
        &s.out("convert.json"),
        &json!({
            "n_pixels": mask.count(),
            "clamped_samples": c.clamped,
            "clipped_samples": c.clipped,
            "aif_peak_mmol_l": c.aif.max_value(),
        }),
    )
}

fn masked_means(maps: &ParamMaps, mask: &crate::image::Mask) -> BTreeMap<String, f64> {
    PARAM_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let v: Vec<f64> = mask
                .indices()
                .iter()
                .map(|&i| maps.maps[k][i])
                .filter(|v| v.is_finite())
                .collect();
            let m = if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            };
            (name.to_string(), m)
        })
        .collect()
}

fn write_maps(s: &Stage, prefix: &str, maps: &ParamMaps, spacing: (f64, f64)) -> Result<()> {
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        io::write_series(
            &s.out(&format!("{prefix}_{name}.pqis")),
            &io::map_series(&maps.maps[k], maps.ny, maps.nx, spacing)?,
        )?;
    }
    let mbf = maps.mbf(&s.cfg.physio);
    io::write_series(
        &s.out(&format!("{prefix}_mbf.pqis")),
        &io::map_series(&mbf, maps.ny, maps.nx, spacing)?,
    )
}

fn fit(s: &Stage) -> Result<()> {
    let conc = io::read_series(&s.path(CONCENTRATION))?;
    let aif = io::read_curve(&s.path(AIF), CurveKind::Aif)?;
    let mask = io::series_to_mask(&io::read_map(&s.path(MASK))?)?;
    let times = s.meta()?.times();
    let spacing = conc.spacing();
    let fit = &s.cfg.fit;
    let summary = match fit.method {
        FitMethod::Nlls => {
            let opts = crate::nlls::FitOptions {
                seed: derive(s.cfg.seed, streams::NLLS_STARTS),
                ..fit.nlls
            };
            let m = fit_nlls_maps(&aif, &times, &conc, &mask, &fit.bounds, &opts)?;
            write_maps(s, "map", &m.params, spacing)?;
            json!({
                "method": "nlls",
                "n_pixels": mask.count(),
                "failed": m.failed.len(),
                "mean": masked_means(&m.params, &mask),
            })
        }
        FitMethod::Bayes => {
            let prior = s.cfg.prior();
            let field = infer_field(
                &aif,
                &times,
                &conc,
                &mask,
                &prior,
                &fit.mcmc,
                derive(s.cfg.seed, streams::MCMC),
            )?;
            let (mean, sd) = field_maps(&field);
            write_maps(s, "map", &mean, spacing)?;
            write_maps(s, "sd", &sd, spacing)?;
            let acc: Vec<f64> = field.pixels.iter().flatten().map(|p| p.acceptance_rate).collect();
            json!({
                "method": "bayes",
                "n_pixels": mask.count(),
                "spatial_weight": prior.spatial_weight,
                "sigma": field.sigma,
                "mean_acceptance_rate": acc.iter().sum::<f64>() / acc.len().max(1) as f64,
                "mean": masked_means(&mean, &mask),
            })
        }
    };
    io::write_json(&s.out("fit.json"), &summary)
}

fn load_segments(s: &Stage, meta: &Meta) -> Result<SegmentImage> {
    let p = s.path(SEGMENTS);
    if p.is_file() {
        return io::series_to_segments(&io::read_map(&p)?, meta.level);
    }
    let mask = io::series_to_mask(&io::read_map(&s.path(MASK))?)?;
    assign_segments(&mask, meta.rv_points, meta.level, None, &s.cfg.segments)
}

fn analyze(s: &Stage) -> Result<()> {
    let meta = s.meta()?;
    let mbf = io::read_map(&s.path(MBF))?;
    let seg = load_segments(s, &meta)?;
    if (seg.ny, seg.nx) != (mbf.ny(), mbf.nx()) {
        return Err(Error::InvalidArgument("segment image and map dimensions differ".into()));
    }
    io::write_series(&s.out(SEGMENTS), &io::segments_to_series(&seg, mbf.spacing())?)?;
    let means = segment_means(mbf.frame(0), &seg)?;
    let stats = per_vessel_from_means(&means)?;
    let th = s.cfg.thresholds;
    let mut summary = json!({
        "segment_mean_mbf": means.iter().map(|(l, m)| (l.to_string(), *m)).collect::<BTreeMap<_, _>>(),
        "territories": stats,
        "patient": classify(&stats, th.patient)?,
        "vessel": classify(&stats, th.vessel)?,
    });

    let truth_path = s.path(TRUTH_MBF);
    if truth_path.is_file() {
        let truth = segment_means(io::read_map(&truth_path)?.frame(0), &seg)?;
        let (scores, labels): (Vec<f64>, Vec<bool>) = means
            .iter()
            .filter_map(|(l, m)| truth.get(l).map(|t| (*m, *t < th.patient)))
            .unzip();
        match roc_analysis(&scores, &labels, Polarity::Lower) {
            Ok(roc) => {
                io::write_roc(&s.out("roc.csv"), &roc.points)?;
                summary["roc"] = json!({
                    "unit": "segment",
                    "auc": roc.auc,
                    "optimal_threshold": roc.optimal_threshold,
                    "youden": roc.youden,
                });
            }
            Err(Error::SingleClass) => log::warn!("ground truth has a single class, no ROC written"),
            Err(e) => return Err(e),
        }
    }
    io::write_json(&s.out("vessels.json"), &summary)
}

fn render(s: &Stage, name: &str, map: &ImageSeries, wmin: Option<f64>, wmax: Option<f64>) -> Result<Value> {
    let finite = || map.frame(0).iter().copied().filter(|v| v.is_finite());
    let lo = wmin.unwrap_or(0.0);
    let hi = wmax.unwrap_or_else(|| finite().fold(f64::NEG_INFINITY, f64::max));
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let file = format!("{name}.pgm");
    fs::write(s.out(&file), io::encode_pgm(map.frame(0), map.ny(), map.nx(), lo, hi)?)?;
    Ok(json!({ "file": file, "wmin": lo, "wmax": hi }))
}

fn report(s: &Stage, wmin: Option<f64>, wmax: Option<f64>) -> Result<()> {
    if let (Some(a), Some(b)) = (wmin, wmax) {
        if !(b > a) {
            return Err(Error::InvalidArgument(format!("window [{a}, {b}] is empty")));
        }
    }
    let mut renders = Vec::new();
    for prefix in ["map", "sd"] {
        for name in PARAM_NAMES.iter().chain(&["mbf"]) {
            let stem = format!("{prefix}_{name}");
            let p = s.path(&format!("{stem}.pqis"));
            if p.is_file() {
                renders.push(render(s, &stem, &io::read_map(&p)?, wmin, wmax)?);
            }
        }
    }
    if renders.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no parameter maps in {}",
            s.input.display()
        )));
    }
    let mut bundle = json!({ "renders": renders });
    for part in ["convert", "fit", "vessels"] {
        let p = s.path(&format!("{part}.json"));
        if p.is_file() {
            bundle[part] = io::read_json::<Value>(&p)?;
        }
    }
    io::write_json(&s.out("report.json"), &bundle)
}
