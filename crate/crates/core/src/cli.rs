//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 backend failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::eval::{self, dsc, read_csv_report, sweep, Method};
use crate::phantom::{gen_phantom, PhantomSpec};
use crate::pipeline::{
    read_box_file, run_dataset, write_run_reports, Backend, Case, Dataset, PipelineConfig, PipelineError,
};
use crate::prompt::BoundingBox;
use crate::rectify::{rectify, RectifyConfig};
use crate::segmenter::protocol::{encode_error, encode_handshake, encode_response, decode_request};
use crate::segmenter::{SegmentError, SegmentRequest, Segmenter, SyntheticConfig, SyntheticSegmenter};
use crate::volume::{normalize_intensity, read_uvol, write_uvol, BinaryMask, Dims};

#[derive(Parser, Debug)]
#[command(name = "ursam", version, about = "Uncertainty-rectified promptable segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run prompts, backend, uncertainty and rectification on a dataset.
    Pipeline(PipelineArgs),
    /// Mean DSC over a grid of augmentation counts and ratios.
    Sweep(SweepArgs),
    /// Rectify a precomputed ensemble mask with a precomputed uncertainty mask.
    Rectify(RectifyArgs),
    /// Dice similarity of two masks.
    Dsc { a: PathBuf, b: PathBuf },
    /// Write a synthetic phantom dataset.
    GenPhantom(PhantomArgs),
    /// Per-organ mean DSC tables and text bar charts from a report.
    Plot(PlotArgs),
    /// Reference backend process speaking the segmentation line protocol.
    #[command(hide = true)]
    Backend(BackendArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha_h: Option<String>,
    #[arg(long)]
    threshold_mode: Option<String>,
    #[arg(long)]
    fixed_fraction: Option<String>,
    #[arg(long)]
    lower_bound: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    jobs: Option<String>,
    /// Box growth per side as `z,y,x`.
    #[arg(long)]
    extension: Option<String>,
    #[arg(long)]
    manual_max_shift: Option<String>,
    #[arg(long)]
    auto_shift: Option<String>,
    /// Intensity window as `lo,hi`.
    #[arg(long, allow_hyphen_values = true)]
    window: Option<String>,
    #[arg(long)]
    shift_mode: Option<String>,
    #[arg(long)]
    shift_basis: Option<String>,
    #[arg(long)]
    synthetic_noise: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_config_file(path)?;
        }
        let flags = [
            ("backend", &self.backend),
            ("n", &self.n),
            ("ratio", &self.ratio),
            ("mode", &self.mode),
            ("alpha-h", &self.alpha_h),
            ("threshold-mode", &self.threshold_mode),
            ("fixed-fraction", &self.fixed_fraction),
            ("lower-bound", &self.lower_bound),
            ("seed", &self.seed),
            ("jobs", &self.jobs),
            ("extension", &self.extension),
            ("manual-max-shift", &self.manual_max_shift),
            ("auto-shift", &self.auto_shift),
            ("window", &self.window),
            ("shift-mode", &self.shift_mode),
            ("shift-basis", &self.shift_basis),
            ("synthetic-noise", &self.synthetic_noise),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Dataset root with `<case>/image.uvol` and `<case>/gt/*.uvol`.
    #[arg(long, conflicts_with_all = ["image", "gt_dir"])]
    data_dir: Option<PathBuf>,
    /// Single image volume; needs --gt-dir.
    #[arg(long, requires = "gt_dir")]
    image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    gt_dir: Option<PathBuf>,
    /// JSON `{"organ": [z0,y0,x0,z1,y1,x1]}` replacing ground-truth boxes.
    #[arg(long, requires = "image")]
    boxes: Option<PathBuf>,
    /// Case id for --image (default: the image's parent directory name).
    #[arg(long)]
    case_id: Option<String>,
}

impl InputArgs {
    fn load(&self) -> Result<Dataset, PipelineError> {
        if let Some(root) = &self.data_dir {
            return Dataset::load_dir(root);
        }
        let (Some(image), Some(gt_dir)) = (&self.image, &self.gt_dir) else {
            return Err(PipelineError::Input("give --data-dir or --image with --gt-dir".into()));
        };
        let id = self.case_id.clone().unwrap_or_else(|| default_case_id(image));
        let mut case = Case::load(&id, image, gt_dir)?;
        if let Some(b) = &self.boxes {
            case.boxes = Some(read_box_file(b)?);
            case.validate()?;
        }
        Ok(Dataset { cases: vec![case] })
    }
}

fn default_case_id(image: &Path) -> String {
    let parent = image.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str());
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("case");
    match parent {
        Some(p) if stem == "image" => p.to_string(),
        _ => stem.to_string(),
    }
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Artifact directory.
    #[arg(long, default_value = "ursam-out")]
    out_dir: PathBuf,
    /// CSV report path (default: <out-dir>/report.csv).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Augmentation counts, comma-separated.
    #[arg(long, default_value = "3,5,7")]
    ns: String,
    /// Perturb ratios, comma-separated.
    #[arg(long, default_value = "0.005,0.01,0.03,0.05,0.1")]
    ratios: String,
    /// Method whose DSC fills the table.
    #[arg(long, default_value = "ensemble")]
    method: String,
    /// CSV output; a markdown matrix is written next to it.
    #[arg(long, default_value = "sweep.csv")]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct RectifyArgs {
    /// Raw intensity volume.
    #[arg(long)]
    image: PathBuf,
    /// Binarized ensemble mask.
    #[arg(long)]
    mask: PathBuf,
    /// High-uncertainty mask.
    #[arg(long)]
    unc_mask: PathBuf,
    /// Region `[z0,y0,x0,z1,y1,x1]` as comma-separated integers (default: whole volume).
    #[arg(long)]
    region: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    cases: usize,
    #[arg(long, default_value_t = 4)]
    organs: usize,
    /// Volume size `d,h,w`.
    #[arg(long, default_value = "64,64,64")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    contrast: Option<f64>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// CSV report produced by `pipeline`.
    #[arg(long)]
    report: PathBuf,
    /// Output prefix; writes `<out>.csv` and `<out>.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BackendArgs {
    /// Pixels darker than this (normalized) count as the object to segment.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sleep before every reply.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Exit without replying to request number N (1-based).
    #[arg(long)]
    exit_at: Option<u64>,
    /// Reply to every request with an error frame.
    #[arg(long)]
    fail: bool,
    /// Reply with a truncated payload.
    #[arg(long)]
    truncate: bool,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Backend(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_backend() {
            CliError::Backend(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<eval::EvalError> for CliError {
    fn from(e: eval::EvalError) -> Self {
        match e {
            eval::EvalError::Pipeline(p) => p.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `argv` (including the program name) and runs the command.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { code };
        }
    };
    let result = match cli.command {
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Rectify(a) => cmd_rectify(a),
        Command::Dsc { a, b } => cmd_dsc(&a, &b),
        Command::GenPhantom(a) => cmd_gen_phantom(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Backend(a) => cmd_backend(a),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(CliError::Backend(m)) => {
            eprintln!("backend error: {m}");
            2
        }
    }
}

fn cmd_pipeline(a: PipelineArgs) -> Result<(), CliError> {
    let cfg = a.config.build()?;
    let dataset = a.input.load()?;
    let backend = Backend::open(&cfg)?;
    let run = run_dataset(&dataset, &cfg, &backend, Some(&a.out_dir))?;
    let report = a.report.unwrap_or_else(|| a.out_dir.join("report.csv"));
    write_run_reports(&run, &report)?;
    for m in Method::ALL {
        if let Some(v) = eval::mean_dsc(&run.records, m) {
            println!("{:<9} {v:.4}", m.as_str());
        }
    }
    for f in &run.failures {
        eprintln!("{}/{}: {:?}: {}", f.case, f.organ, f.kind, f.message);
    }
    if run.has_backend_failure() {
        return Err(CliError::Backend("one or more organs failed in the backend".into()));
    }
    Ok(())
}

fn parse_grid<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| usage(format!("bad grid value {p:?}"))))
        .collect()
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let cfg = a.config.build()?;
    let dataset = a.input.load()?;
    let ns: Vec<usize> = parse_grid(&a.ns)?;
    let ratios: Vec<f64> = parse_grid(&a.ratios)?;
    let method: Method = a.method.parse().map_err(usage)?;
    let backend = Backend::open(&cfg)?;
    let table = sweep(&dataset, &ns, &ratios, &cfg, &backend, method)?;
    let write = |p: &Path, text: String| {
        if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(d).map_err(usage)?;
        }
        std::fs::write(p, text).map_err(|e| usage(format!("{}: {e}", p.display())))
    };
    write(&a.report, table.to_csv())?;
    write(&a.report.with_extension("md"), table.to_markdown())?;
    print!("{}", table.to_markdown());
    if table
        .cells
        .iter()
        .flat_map(|c| &c.failures)
        .any(|f| f.kind == crate::pipeline::FailureKind::Backend)
    {
        return Err(CliError::Backend("backend failures during sweep".into()));
    }
    Ok(())
}

fn cmd_rectify(a: RectifyArgs) -> Result<(), CliError> {
    let cfg = a.config.build()?;
    let image = read_uvol(&a.image).map_err(usage)?.into_volume::<f64>().map_err(usage)?;
    let image = normalize_intensity(&image, cfg.window.0, cfg.window.1).map_err(usage)?;
    let ens = read_uvol(&a.mask).map_err(usage)?.into_mask().map_err(usage)?;
    let unc = read_uvol(&a.unc_mask).map_err(usage)?.into_mask().map_err(usage)?;
    let region = match &a.region {
        Some(s) => {
            let v: Vec<usize> = parse_grid(s)?;
            let arr: [usize; 6] = v.try_into().map_err(|_| usage("region needs six integers"))?;
            let b = BoundingBox::try_from(arr).map_err(usage)?;
            b.validate(image.dims()).map_err(usage)?;
            b
        }
        None => BoundingBox::full(image.dims()),
    };
    let rc = RectifyConfig { ..cfg.rectify };
    let out = rectify(&image, &ens, &unc, &rc, &region).map_err(usage)?;
    write_uvol(&out, &a.out).map_err(usage)?;
    println!("{} voxels", out.count());
    Ok(())
}

fn cmd_dsc(a: &Path, b: &Path) -> Result<(), CliError> {
    let load = |p: &Path| -> Result<BinaryMask, CliError> {
        read_uvol(p)
            .and_then(|g| g.into_mask())
            .map_err(|e| usage(format!("{}: {e}", p.display())))
    };
    let d = dsc(&load(a)?, &load(b)?).map_err(usage)?;
    println!("{d:?}");
    Ok(())
}

fn cmd_gen_phantom(a: PhantomArgs) -> Result<(), CliError> {
    let size: Vec<usize> = parse_grid(&a.size)?;
    let size: [usize; 3] = size.try_into().map_err(|_| usage("size needs three integers"))?;
    let mut spec = PhantomSpec {
        cases: a.cases,
        organs: a.organs,
        size,
        ..Default::default()
    };
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    if let Some(c) = a.contrast {
        spec.contrast = c;
    }
    let ds = gen_phantom(&spec, a.seed).map_err(usage)?;
    ds.write_dir(&a.out_dir)?;
    println!("wrote {} cases to {}", ds.cases.len(), a.out_dir.display());
    Ok(())
}

/// Per-organ mean DSC by method as CSV plus a text bar chart.
pub fn plot_tables(records: &[eval::EvalRecord]) -> (String, String) {
    let mut acc: BTreeMap<(String, Method), (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry((r.organ.clone(), r.method)).or_insert((0.0, 0));
        e.0 += r.dsc;
        e.1 += 1;
    }
    let mut csv = String::from("organ,method,mean_dsc,cases\n");
    let mut chart = String::new();
    let mut last = None;
    for ((organ, method), (sum, n)) in &acc {
        let mean = sum / *n as f64;
        let _ = writeln!(csv, "{organ},{method},{mean},{n}");
        if last.as_ref() != Some(organ) {
            let _ = writeln!(chart, "{organ}");
            last = Some(organ.clone());
        }
        let bar = "#".repeat((mean * 40.0).round() as usize);
        let _ = writeln!(chart, "  {:<9} {:<40} {mean:.4}", method.as_str(), bar);
    }
    (csv, chart)
}

fn cmd_plot(a: PlotArgs) -> Result<(), CliError> {
    let records = read_csv_report(&a.report)?;
    let (csv, chart) = plot_tables(&records);
    let csv_path = a.out.with_extension("csv");
    let txt_path = a.out.with_extension("txt");
    if let Some(d) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(usage)?;
    }
    std::fs::write(&csv_path, csv).map_err(usage)?;
    std::fs::write(&txt_path, &chart).map_err(usage)?;
    print!("{chart}");
    Ok(())
}

/// Segments pixels darker than `threshold` with the synthetic model.
struct ThresholdBackend {
    threshold: f32,
    seed: u64,
}

impl Segmenter for ThresholdBackend {
    fn name(&self) -> &str {
        "reference"
    }

    fn segment_unchecked(&self, req: &SegmentRequest) -> Result<crate::segmenter::SegmentResponse, SegmentError> {
        let dims = Dims::new(1, req.height, req.width).map_err(|e| SegmentError::InvalidRequest(e.to_string()))?;
        let target = BinaryMask::from_bools(dims, Default::default(), req.slice.iter().map(|&v| v < self.threshold))
            .map_err(|e| SegmentError::InvalidRequest(e.to_string()))?;
        SyntheticSegmenter::new(target, self.seed, SyntheticConfig::default()).segment_unchecked(req)
    }
}

fn cmd_backend(a: BackendArgs) -> Result<(), CliError> {
    let backend = ThresholdBackend {
        threshold: a.threshold,
        seed: a.seed,
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let io_fail = |e: io::Error| CliError::Backend(e.to_string());
    writeln!(out, "{}", encode_handshake(backend.name())).map_err(io_fail)?;
    out.flush().map_err(io_fail)?;
    let mut count = 0u64;
    for line in stdin.lock().lines() {
        let line = line.map_err(io_fail)?;
        if line.trim().is_empty() {
            continue;
        }
        count += 1;
        if a.exit_at == Some(count) {
            std::process::exit(3);
        }
        if a.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(a.delay_ms));
        }
        let reply = match decode_request(&line) {
            Ok(req) if a.fail => encode_error(req.id, "configured to fail"),
            Ok(req) => match backend.segment(&req) {
                Ok(mut resp) => {
                    if a.truncate {
                        resp.prob.pop();
                    }
                    encode_response(&resp)
                }
                Err(e) => encode_error(req.id, &e.to_string()),
            },
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                encode_error(id, &e.to_string())
            }
        };
        writeln!(out, "{reply}").map_err(io_fail)?;
        out.flush().map_err(io_fail)?;
    }
    Ok(())
}
