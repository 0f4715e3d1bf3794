//! End-to-end orchestration: load, normalize, partition, equalize,
//! allocate, lay out, render and write.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocate::{split_budget, write_allocation_dump, AllocParams, ClassSplit, EmphasisPattern};
use crate::dataset::{load_points, normalize, CanvasSpec, InputFormat, Point, PointSet};
use crate::equalize::{
    assign_budgets, build_density_mapping, rasterize_footprints, write_mapping_dump, Footprints, PixelBudget,
};
use crate::error::{Error, Result};
use crate::layout::{assemble, initial_layout, kd_disperse, PixelLayout};
use crate::metrics::{evaluate, write_report, ClassRaster, MetricParams, MetricReport};
use crate::partition::{iso_density_partition, write_cluster_dump, Cluster, PartitionParams, L_MAX};
use crate::render::{encode, render, ImageFormat, Palette, RasterImage};

/// Starting partition level, fixed or derived from the canvas size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LInit {
    #[default]
    Auto,
    Fixed(i32),
}

impl LInit {
    pub fn resolve(self, canvas: CanvasSpec) -> i32 {
        match self {
            LInit::Auto => auto_l_init(canvas),
            LInit::Fixed(l) => l,
        }
    }
}

impl FromStr for LInit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LInit::Auto);
        }
        s.trim()
            .parse()
            .map(LInit::Fixed)
            .map_err(|_| format!("expected an integer or AUTO, got {s:?}"))
    }
}

impl fmt::Display for LInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LInit::Auto => f.write_str("AUTO"),
            LInit::Fixed(l) => write!(f, "{l}"),
        }
    }
}

impl Serialize for LInit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LInit::Auto => s.serialize_str("AUTO"),
            LInit::Fixed(l) => s.serialize_i32(*l),
        }
    }
}

impl<'de> Deserialize<'de> for LInit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i32),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(l) => Ok(LInit::Fixed(l)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// `round(-1 - log2(max(W, H) / 1000))`: -1 at 1000 px, one level coarser
/// per doubling of the canvas.
pub fn auto_l_init(canvas: CanvasSpec) -> i32 {
    let side = canvas.width().max(canvas.height()) as f64;
    (-1.0 - (side / 1000.0).log2()).round() as i32
}

/// Parameters of the abstraction itself, independent of any file I/O.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbstractionParams {
    pub canvas: CanvasSpec,
    pub theta_k: f64,
    pub tau_ns: f64,
    pub pattern: EmphasisPattern,
    pub h: f64,
    pub l_init: LInit,
    /// Fraction of each canvas side left empty on both ends.
    pub margin: f64,
}

impl AbstractionParams {
    pub fn new(canvas: CanvasSpec) -> Self {
        AbstractionParams {
            canvas,
            theta_k: 10.0,
            tau_ns: 0.5,
            pattern: EmphasisPattern::St2,
            h: 10.0,
            l_init: LInit::Auto,
            margin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        CanvasSpec::new(self.canvas.width(), self.canvas.height())?;
        if !(self.theta_k > 0.0) || !self.theta_k.is_finite() {
            return Err(Error::Config(format!("theta_k must be positive, got {}", self.theta_k)));
        }
        if !(0.5..=1.0).contains(&self.tau_ns) {
            return Err(Error::Config(format!("tau_ns must be in [0.5, 1], got {}", self.tau_ns)));
        }
        if !(self.h >= 1.0) || !self.h.is_finite() {
            return Err(Error::Config(format!("h must be at least 1, got {}", self.h)));
        }
        if let LInit::Fixed(l) = self.l_init {
            if l > L_MAX {
                return Err(Error::Config(format!("l_init {l} is above the maximum level {L_MAX}")));
            }
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::Config(format!("margin must be in [0, 0.5), got {}", self.margin)));
        }
        Ok(())
    }

    pub fn partition(&self) -> PartitionParams {
        PartitionParams::new(self.theta_k, self.l_init.resolve(self.canvas))
    }

    pub fn alloc(&self) -> AllocParams {
        AllocParams {
            pattern: self.pattern,
            h: self.h,
            tau_ns: self.tau_ns,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Normalize,
    Partition,
    Equalize,
    Allocate,
    Layout,
    Render,
    Write,
    Metrics,
    Dump,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "load",
            Stage::Normalize => "normalize",
            Stage::Partition => "partition",
            Stage::Equalize => "equalize",
            Stage::Allocate => "allocate",
            Stage::Layout => "layout",
            Stage::Render => "render",
            Stage::Write => "write",
            Stage::Metrics => "metrics",
            Stage::Dump => "dump",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Timings(pub Vec<(Stage, Duration)>);

impl Timings {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.0.push((stage, t.elapsed()));
        out
    }

    pub fn total(&self) -> Duration {
        self.0.iter().map(|(_, d)| *d).sum()
    }
}

/// Everything the abstraction produced, stage by stage.
#[derive(Debug, Clone)]
pub struct Abstraction {
    pub points: PointSet,
    pub l_init: i32,
    pub clusters: Vec<Cluster>,
    pub footprints: Footprints,
    pub budgets: Vec<PixelBudget>,
    pub splits: Vec<ClassSplit>,
    pub layout: PixelLayout,
}

impl Abstraction {
    pub fn total_budget(&self) -> u64 {
        self.budgets.iter().map(|b| b.budget as u64).sum()
    }
}

/// Runs every in-memory stage on `ps`, given in source coordinates.
pub fn abstract_points(
    ps: &PointSet,
    params: &AbstractionParams,
    timings: &mut Timings,
) -> std::result::Result<Abstraction, StageError> {
    params.validate().at(Stage::Normalize)?;
    let canvas = params.canvas;
    let points = timings
        .time(Stage::Normalize, || normalize(ps, canvas, params.margin))
        .at(Stage::Normalize)?;

    let part = params.partition();
    let clusters = timings
        .time(Stage::Partition, || iso_density_partition(&points, part))
        .at(Stage::Partition)?;

    let (footprints, budgets) = timings
        .time(Stage::Equalize, || -> Result<_> {
            let fps = rasterize_footprints(&clusters, &points, canvas);
            let mapping = build_density_mapping(&fps.footprints)?;
            let budgets = assign_budgets(&fps.footprints, &mapping);
            Ok((fps, budgets))
        })
        .at(Stage::Equalize)?;

    let alloc = params.alloc();
    let splits: Vec<ClassSplit> = timings.time(Stage::Allocate, || {
        footprints
            .footprints
            .iter()
            .zip(&budgets)
            .map(|(fp, b)| split_budget(fp.cluster, &fp.class_counts, b.budget, &alloc))
            .collect()
    });

    let layout = timings
        .time(Stage::Layout, || -> Result<_> {
            let pts = points.points();
            let layouts = footprints
                .footprints
                .par_iter()
                .zip(splits.par_iter())
                .map(|(fp, split)| {
                    let members: Vec<Point> = clusters[fp.cluster]
                        .point_ids
                        .iter()
                        .map(|&i| pts[i as usize])
                        .collect();
                    kd_disperse(&initial_layout(fp, split, &members), fp)
                })
                .collect::<Result<Vec<_>>>()?;
            assemble(&layouts, canvas)
        })
        .at(Stage::Layout)?;

    Ok(Abstraction {
        points,
        l_init: part.l_init,
        clusters,
        footprints,
        budgets,
        splits,
        layout,
    })
}

/// A full command-line run: inputs, parameters and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    #[serde(default)]
    pub format: Option<InputFormat>,
    #[serde(flatten)]
    pub params: AbstractionParams,
    #[serde(default)]
    pub palette: Option<PathBuf>,
    pub out: PathBuf,
    #[serde(default)]
    pub out_format: Option<ImageFormat>,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
    #[serde(default)]
    pub dump_clusters: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Reserved; the pipeline itself draws no random numbers.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, out: impl Into<PathBuf>, canvas: CanvasSpec) -> Self {
        RunConfig {
            input: input.into(),
            format: None,
            params: AbstractionParams::new(canvas),
            palette: None,
            out: out.into(),
            out_format: None,
            metrics: None,
            dump_clusters: None,
            threads: None,
            seed: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub points: usize,
    pub classes: usize,
    pub l_init: i32,
    pub clusters: usize,
    pub footprints: usize,
    pub dropped_clusters: usize,
    pub dropped_points: u64,
    pub total_budget: u64,
    pub colored_pixels: usize,
    pub infeasible_clusters: usize,
    pub metrics: Option<MetricReport>,
    pub timings: Timings,
    pub wall: Duration,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (stage, d) in &self.timings.0 {
            writeln!(f, "{stage:>10}: {:9.3} ms", d.as_secs_f64() * 1e3)?;
        }
        writeln!(f, "{:>10}: {:9.3} ms", "total", self.wall.as_secs_f64() * 1e3)?;
        writeln!(f, "points {} in {} classes, l_init {}", self.points, self.classes, self.l_init)?;
        writeln!(
            f,
            "clusters {} ({} placed, {} dropped with {} points)",
            self.clusters, self.footprints, self.dropped_clusters, self.dropped_points
        )?;
        write!(
            f,
            "budget {} px, colored {} px, infeasible clusters {}",
            self.total_budget, self.colored_pixels, self.infeasible_clusters
        )?;
        if let Some(m) = &self.metrics {
            write!(f, "\nlvc {:.4} pddr {:.4} pcdr {:.4} ecsr {:.4}", m.lvc, m.pddr, m.pcdr, m.ecsr)?;
        }
        Ok(())
    }
}

/// Executes a run on the current rayon pool, or on a dedicated pool when
/// `cfg.threads` is set.
pub fn run(cfg: &RunConfig) -> std::result::Result<RunSummary, StageError> {
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))
                .at(Stage::Load)?;
            pool.install(|| run_inner(cfg))
        }
        None => run_inner(cfg),
    }
}

fn run_inner(cfg: &RunConfig) -> std::result::Result<RunSummary, StageError> {
    let wall = Instant::now();
    let mut timings = Timings::default();
    let format = cfg.format.unwrap_or_else(|| InputFormat::from_path(&cfg.input));
    let ps = timings
        .time(Stage::Load, || load_points(&cfg.input, format))
        .at(Stage::Load)?;

    let abs = abstract_points(&ps, &cfg.params, &mut timings)?;

    let img: RasterImage = timings
        .time(Stage::Render, || -> Result<_> {
            let palette = match &cfg.palette {
                Some(p) => Palette::load(p, ps.class_names())?,
                None => Palette::generate(ps.class_count()),
            };
            render(&abs.layout, &palette)
        })
        .at(Stage::Render)?;

    let out_format = cfg.out_format.unwrap_or_else(|| ImageFormat::from_path(&cfg.out));
    timings
        .time(Stage::Write, || encode(&img, out_format, &cfg.out))
        .at(Stage::Write)?;

    let metrics = match &cfg.metrics {
        Some(path) => Some(
            timings
                .time(Stage::Metrics, || -> Result<_> {
                    let canvas = cfg.params.canvas;
                    let report = evaluate(
                        &ClassRaster::from_layout(&abs.layout),
                        abs.points.points(),
                        abs.points.class_count(),
                        &MetricParams::for_canvas(canvas.width(), canvas.height()),
                    )?;
                    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
                    write_report(&report, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))?;
                    Ok(report)
                })
                .at(Stage::Metrics)?,
        ),
        None => None,
    };

    if let Some(path) = &cfg.dump_clusters {
        timings
            .time(Stage::Dump, || -> Result<()> {
                write_cluster_dump(&abs.clusters, path)?;
                write_mapping_dump(&abs.footprints.footprints, &abs.budgets, sibling(path, "mapping"))?;
                write_allocation_dump(&abs.splits, sibling(path, "allocation"))
            })
            .at(Stage::Dump)?;
    }

    Ok(RunSummary {
        points: ps.len(),
        classes: ps.class_count(),
        l_init: abs.l_init,
        clusters: abs.clusters.len(),
        footprints: abs.footprints.footprints.len(),
        dropped_clusters: abs.footprints.dropped.len(),
        dropped_points: abs.footprints.dropped_points(),
        total_budget: abs.total_budget(),
        colored_pixels: abs.layout.len(),
        infeasible_clusters: abs.splits.iter().filter(|s| s.infeasible).count(),
        metrics,
        timings,
        wall: wall.elapsed(),
    })
}

/// `clusters.csv` -> `clusters.mapping.csv`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dump");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gaussian_mixture, MixtureSpec};

    fn canvas(w: u32, h: u32) -> CanvasSpec {
        CanvasSpec::new(w, h).unwrap()
    }

    #[test]
    fn auto_l_init_values() {
        assert_eq!(auto_l_init(canvas(1000, 1000)), -1);
        assert_eq!(auto_l_init(canvas(2000, 2000)), -2);
        assert_eq!(auto_l_init(canvas(500, 500)), 0);
        assert_eq!(auto_l_init(canvas(1400, 1400)), -1);
        assert_eq!(auto_l_init(canvas(500, 1000)), -1);
    }

    #[test]
    fn l_init_parsing() {
        assert_eq!("AUTO".parse::<LInit>().unwrap(), LInit::Auto);
        assert_eq!("auto".parse::<LInit>().unwrap(), LInit::Auto);
        assert_eq!("-2".parse::<LInit>().unwrap(), LInit::Fixed(-2));
        assert!("x".parse::<LInit>().is_err());
    }

    #[test]
    fn validation() {
        let base = AbstractionParams::new(canvas(64, 64));
        assert!(base.validate().is_ok());
        for bad in [
            AbstractionParams { theta_k: 0.0, ..base },
            AbstractionParams { tau_ns: 0.4, ..base },
            AbstractionParams { tau_ns: 1.1, ..base },
            AbstractionParams { h: 0.5, ..base },
            AbstractionParams { l_init: LInit::Fixed(7), ..base },
            AbstractionParams { margin: 0.5, ..base },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = RunConfig::new("in.csv", "out.png", canvas(300, 200));
        cfg.params.l_init = LInit::Fixed(-1);
        cfg.params.pattern = EmphasisPattern::St1;
        cfg.metrics = Some("m.csv".into());
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let auto = RunConfig::new("a", "b", canvas(8, 8));
        assert!(auto.to_json().contains("\"AUTO\""));
        assert_eq!(RunConfig::from_json(&auto.to_json()).unwrap(), auto);
    }

    #[test]
    fn colored_pixels_match_budgets() {
        let ps = gaussian_mixture(&MixtureSpec::new(3000, 4, 3)).unwrap();
        let mut t = Timings::default();
        let abs = abstract_points(&ps, &AbstractionParams::new(canvas(64, 64)), &mut t).unwrap();
        assert_eq!(abs.layout.len() as u64, abs.total_budget());
        for (fp, split) in abs.footprints.footprints.iter().zip(&abs.splits) {
            assert_eq!(split.cluster, fp.cluster);
        }
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let ps = gaussian_mixture(&MixtureSpec::new(100, 2, 3)).unwrap();
        let params = AbstractionParams {
            theta_k: -1.0,
            ..AbstractionParams::new(canvas(16, 16))
        };
        let err = abstract_points(&ps, &params, &mut Timings::default()).unwrap_err();
        assert!(err.to_string().contains("normalize"));
    }
}
