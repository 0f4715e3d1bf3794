use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pxsc::allocate::EmphasisPattern;
use pxsc::dataset::{load_points, normalize, write_binary, write_csv, CanvasSpec, InputFormat};
use pxsc::metrics::{
    ecsr, lvc, pcdr, pddr, write_report, write_window_dump, ClassRaster, LvcParams, MetricParams, MetricReport,
    WindowGrid,
};
use pxsc::pipeline::{run, AbstractionParams, LInit, RunConfig};
use pxsc::render::{read_image, ImageFormat, Palette};
use pxsc::synth::{gaussian_mixture, hdr_fixture, MixtureSpec};

#[derive(Parser)]
#[command(name = "pxsc", version, about = "Pixel abstraction of large multiclass scatterplots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset to an image.
    Run(RunArgs),
    /// Score an image against the points it was made from.
    Metrics(MetricsArgs),
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<InputFormat>,
    /// Canvas size as WxH.
    #[arg(long, required_unless_present = "config")]
    canvas: Option<CanvasSpec>,
    #[arg(long)]
    theta_k: Option<f64>,
    #[arg(long)]
    tau_ns: Option<f64>,
    #[arg(long, value_enum)]
    pattern: Option<EmphasisPattern>,
    #[arg(long)]
    h: Option<f64>,
    /// Starting partition level, or AUTO.
    #[arg(long, allow_hyphen_values = true)]
    l_init: Option<LInit>,
    #[arg(long)]
    margin: Option<f64>,
    /// CSV of `class,r,g,b` rows.
    #[arg(long)]
    palette: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    out_format: Option<ImageFormat>,
    /// Write `metric,value` CSV here.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write the cluster dump here, plus `.mapping` and `.allocation` siblings.
    #[arg(long)]
    dump_clusters: Option<PathBuf>,
    #[arg(long, env = "PXSC_THREADS")]
    threads: Option<usize>,
    /// Reserved.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn into_config(self) -> pxsc::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(
                self.input.clone().expect("required by clap"),
                self.out.clone().expect("required by clap"),
                self.canvas.expect("required by clap"),
            ),
        };
        if let Some(v) = self.input {
            cfg.input = v;
        }
        if let Some(v) = self.out {
            cfg.out = v;
        }
        if let Some(v) = self.canvas {
            cfg.params.canvas = v;
        }
        let p: &mut AbstractionParams = &mut cfg.params;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(p.theta_k, self.theta_k);
        set!(p.tau_ns, self.tau_ns);
        set!(p.pattern, self.pattern);
        set!(p.h, self.h);
        set!(p.l_init, self.l_init);
        set!(p.margin, self.margin);
        set!(cfg.seed, self.seed);
        cfg.format = self.format.or(cfg.format);
        cfg.palette = self.palette.or(cfg.palette);
        cfg.out_format = self.out_format.or(cfg.out_format);
        cfg.metrics = self.metrics.or(cfg.metrics);
        cfg.dump_clusters = self.dump_clusters.or(cfg.dump_clusters);
        cfg.threads = self.threads.or(cfg.threads);
        cfg.params.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct MetricsArgs {
    /// PPM or PNG image produced by `run`.
    #[arg(long)]
    image: PathBuf,
    /// The points the image was made from.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Option<InputFormat>,
    /// Palette used for the image; defaults to the generated one.
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Margin the image was rendered with.
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    /// Window for pddr/pcdr/ecsr; defaults to a tenth of the longer side.
    #[arg(long)]
    window: Option<u32>,
    #[arg(long, default_value_t = 10)]
    lvc_window: u32,
    #[arg(long, default_value_t = 0.3)]
    theta_grey: f64,
    /// CSV output; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-window CSV dump.
    #[arg(long)]
    dump_windows: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    points: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    components: usize,
    #[arg(long, default_value_t = 0.8)]
    skew: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dense blob, sparse blob and ring of outliers instead of a mixture.
    #[arg(long)]
    hdr: bool,
    #[arg(long, value_enum)]
    format: Option<InputFormat>,
}

fn cmd_run(args: RunArgs) -> Result<(), String> {
    let print = args.print_config;
    let cfg = args.into_config().map_err(|e| e.to_string())?;
    if print {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let summary = run(&cfg).map_err(|e| e.to_string())?;
    eprintln!("{summary}");
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> pxsc::Result<()> {
    let img = read_image(&args.image)?;
    let canvas = CanvasSpec::new(img.width(), img.height())?;
    let format = args.format.unwrap_or_else(|| InputFormat::from_path(&args.input));
    let ps = load_points(&args.input, format)?;
    let palette = match &args.palette {
        Some(p) => Palette::load(p, ps.class_names())?,
        None => Palette::generate(ps.class_count()),
    };
    let raster = ClassRaster::from_image(&img, &palette)?;
    let points = normalize(&ps, canvas, args.margin)?;
    let mut params = MetricParams::for_canvas(canvas.width(), canvas.height());
    params.lvc = LvcParams {
        window_size: args.lvc_window,
        theta_grey: args.theta_grey,
    };
    if let Some(w) = args.window {
        params.window_size = w;
    }
    let g = WindowGrid::build(&raster, points.points(), points.class_count(), params.window_size)?;
    let report = MetricReport {
        lvc: lvc(&raster, &params.lvc)?,
        pddr: pddr(&g),
        pcdr: pcdr(&g),
        ecsr: ecsr(&g),
    };
    match &args.out {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(|e| pxsc::Error::Config(format!("{}: {e}", p.display())))?;
            write_report(&report, std::io::BufWriter::new(f))
        }
        None => write_report(&report, std::io::stdout().lock()),
    }
    .map_err(|e| pxsc::Error::Config(format!("writing metrics: {e}")))?;
    if let Some(p) = &args.dump_windows {
        write_window_dump(&g, p)?;
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> pxsc::Result<()> {
    let ps = if args.hdr {
        hdr_fixture(args.points, (args.points / 100).max(1), 20, args.seed)?
    } else {
        gaussian_mixture(&MixtureSpec {
            points: args.points,
            classes: args.classes,
            components: args.components,
            skew: args.skew,
            seed: args.seed,
        })?
    };
    match args.format.unwrap_or_else(|| InputFormat::from_path(&args.out)) {
        InputFormat::BinaryF32 => write_binary(&ps, &args.out),
        _ => write_csv(&ps, &args.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Metrics(a) => cmd_metrics(a).map_err(|e| format!("metrics: {e}")),
        Command::Generate(a) => cmd_generate(a).map_err(|e| format!("generate: {e}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
