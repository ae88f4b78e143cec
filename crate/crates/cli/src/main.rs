use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[cfg(test)]
use clade::inference::DEFAULT_PERCENTILES;
use clade::inference::{
    load_generator, stride_sweep, super_resolve_volume, write_stride_csv, InferenceOptions,
    DEFAULT_STRIDE,
};
use clade::metrics::{
    evaluate_volume, phantom_edge_profiles, write_reports_csv, EvalOptions, QualityReport, Roi,
    PHANTOM_PROFILE_LEN,
};
use clade::patchwork::PatchSet;
use clade::trainer::{
    block_artifact_score_volume, latest_checkpoint, resume_training, run_sweep, run_training,
    EvalSet, TrainingConfig, TrainingOutcome, MIN_PROBES,
};
use clade::volume::{
    generate_phantom, load_volume, random_phantom_spec, save_volume, PhantomSpec, Plane,
};

/// Unpaired patch-based super-resolution of anisotropic volumes.
#[derive(Parser)]
#[command(name = "clade", version, about)]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom (hr.vol, lr.vol, spec.json) from a spec file or a seed.
    Phantom(PhantomArgs),
    /// Sample unpaired X and Y patch corpora from volumes.
    Prep(PrepArgs),
    /// Train a model on prepared corpora.
    Train(TrainArgs),
    /// Super-resolve a volume with a trained generator.
    Infer(InferArgs),
    /// Score a volume: no-reference score, edge sharpness, SNR, PSNR, seams.
    Eval(EvalArgs),
    /// Train one model per loss-weight combination.
    Sweep(SweepArgs),
    /// Time inference and score the output over a list of strides.
    StrideSweep(StrideSweepArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom spec JSON.
    #[arg(long, conflicts_with = "random_seed", required_unless_present = "random_seed")]
    spec: Option<PathBuf>,
    /// Draw a random body-like spec with this seed instead.
    #[arg(long)]
    random_seed: Option<u64>,
    /// Rendered grid for --random-seed.
    #[arg(long, value_parser = list::<usize, 3>, default_value = "64,64,64")]
    dims: [usize; 3],
    /// Acquisition spacing in mm for --random-seed; the coarse axis sets
    /// the anisotropy factor.
    #[arg(long, value_parser = list::<f64, 3>, default_value = "1,1,4")]
    spacing: [f64; 3],
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PercentileArgs {
    /// Percentile window mapped onto [-1, 1].
    #[arg(long, value_parser = list::<f64, 2>, default_value = DEFAULT_WINDOW)]
    percentiles: [f64; 2],
}

const DEFAULT_WINDOW: &str = "0.5,99.5";

impl PercentileArgs {
    fn pair(&self) -> (f64, f64) {
        (self.percentiles[0], self.percentiles[1])
    }
}

/// Parses exactly `N` comma-separated values.
fn list<T: FromStr, const N: usize>(s: &str) -> std::result::Result<[T; N], String>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated values, got {}", parts.len()));
    }
    let vals = parts
        .iter()
        .map(|p| p.parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<Vec<T>, String>>()?;
    vals.try_into().map_err(|_| unreachable!("length checked"))
}

#[derive(Args)]
struct PrepArgs {
    /// Input volumes (repeat or comma-separate).
    #[arg(long = "in", required = true, value_delimiter = ',')]
    inputs: Vec<PathBuf>,
    /// Output directory for x.patches and y.patches.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    patches_per_slice: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    window: PercentileArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// X corpus: a .patches file or a directory holding x.patches.
    #[arg(long)]
    x: PathBuf,
    /// Y corpus: a .patches file or a directory holding y.patches.
    #[arg(long)]
    y: PathBuf,
    /// Held-out low-resolution volume scored after every epoch.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a full-state checkpoint, or `auto` for the latest one
    /// in the run directory.
    #[arg(long)]
    resume: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    /// generator.ckpt or a full training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    stride: usize,
    #[command(flatten)]
    window: PercentileArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Reference volume for PSNR.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Patch-grid stride for the seam detector.
    #[arg(long)]
    grid_stride: Option<usize>,
    /// Phantom spec; enables edge-sharpness profiles across its boundaries.
    #[arg(long)]
    phantom_spec: Option<PathBuf>,
    /// Signal ROI as lo0,lo1,lo2,hi0,hi1,hi2 (voxels, hi exclusive).
    #[arg(long, value_parser = list::<usize, 6>, requires = "noise_roi")]
    signal_roi: Option<[usize; 6]>,
    /// Noise ROI, same layout as --signal-roi.
    #[arg(long, value_parser = list::<usize, 6>, requires = "signal_roi")]
    noise_roi: Option<[usize; 6]>,
    /// Intensity window mapped to [0, 1]; defaults to the volume's range.
    #[arg(long, value_parser = list::<f64, 2>)]
    range: Option<[f64; 2]>,
    /// Model name written into the reports.
    #[arg(long, default_value = "volume")]
    model: String,
    #[arg(long)]
    report: PathBuf,
    /// Also write one CSV row per plane.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    lambda_cyc: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    lambda_ident: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    lambda_gmap: Vec<f64>,
    /// Sweep directory: one run per combination plus sweep.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StrideSweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 12, 16, 24, 32])]
    strides: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[command(flatten)]
    window: PercentileArgs,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let spec: PhantomSpec = match (&a.spec, a.random_seed) {
        (Some(path), _) => read_json(path)?,
        (None, Some(seed)) => {
            random_phantom_spec(seed, a.dims, a.spacing)
        }
        (None, None) => unreachable!("clap requires one of --spec, --random-seed"),
    };
    let ph = generate_phantom(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_volume(&ph.hr, &a.out.join("hr.vol"))?;
    save_volume(&ph.lr, &a.out.join("lr.vol"))?;
    write_json(&a.out.join("spec.json"), &spec)?;
    log::info!(
        "phantom with {} primitives: hr {:?}, lr {:?}, factor {}",
        spec.primitives.len(),
        ph.hr.dims(),
        ph.lr.dims(),
        ph.factor
    );
    Ok(())
}

fn prep(a: PrepArgs) -> Result<()> {
    let volumes = a
        .inputs
        .iter()
        .map(|p| load_volume(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let (x, y) = clade::trainer::prepare_corpus(&volumes, a.patches_per_slice, a.seed, a.window.pair())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    x.save(&a.out.join("x.patches"))?;
    y.save(&a.out.join("y.patches"))?;
    println!("x: {} patches, y: {} patches", x.len(), y.len());
    Ok(())
}

fn corpus(path: &Path, name: &str) -> Result<PatchSet> {
    let file = if path.is_dir() { path.join(name) } else { path.to_path_buf() };
    PatchSet::load(&file).with_context(|| format!("loading {}", file.display()))
}

/// Evenly spaced X patches for the mode-collapse check.
fn probes(x: &PatchSet) -> Vec<clade::image::Image2D> {
    if x.len() < MIN_PROBES {
        return Vec::new();
    }
    (0..MIN_PROBES).map(|i| x.patches[i * x.len() / MIN_PROBES].clone()).collect()
}

fn eval_set(x: &PatchSet, eval: Option<&Path>) -> Result<EvalSet> {
    Ok(EvalSet {
        volume: eval.map(load_volume).transpose()?,
        probes: probes(x),
    })
}

fn config(path: Option<&Path>) -> Result<TrainingConfig> {
    match path {
        Some(p) => Ok(TrainingConfig::load(p)?),
        None => Ok(TrainingConfig::default()),
    }
}

fn report_outcome(o: &TrainingOutcome) {
    let last = o.state.losses.last().map(|(_, b)| b.total).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs ({} steps), final loss {last:.4}, selected epoch {}",
        o.state.epoch,
        o.state.step,
        o.selected_epoch.map_or("-".to_string(), |e| e.to_string())
    );
    println!("generator: {}", o.run_dir.join("generator.ckpt").display());
}

fn train(a: TrainArgs) -> Result<()> {
    let x = corpus(&a.x, "x.patches")?;
    let y = corpus(&a.y, "y.patches")?;
    let eval = eval_set(&x, a.eval.as_deref())?;
    let outcome = match a.resume.as_deref() {
        None => run_training(&config(a.config.as_deref())?, &x, &y, &eval, &a.out)?,
        Some(which) => {
            let ckpt = if which == "auto" {
                match latest_checkpoint(&a.out)? {
                    Some(p) => p,
                    None => bail!("no checkpoint to resume in {}", a.out.display()),
                }
            } else {
                PathBuf::from(which)
            };
            log::info!("resuming from {}", ckpt.display());
            resume_training(&ckpt, &x, &y, &eval, &a.out)?
        }
    };
    report_outcome(&outcome);
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let g = load_generator::<f32>(&a.checkpoint)?;
    let v = load_volume(&a.input)?;
    let opts = InferenceOptions {
        stride: a.stride,
        percentiles: a.window.pair(),
    };
    let out = super_resolve_volume(&v, &g, &opts)?;
    save_volume(&out, &a.out)?;
    println!("{:?} -> {:?}: {}", v.dims(), out.dims(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    input: PathBuf,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    reports: Vec<QualityReport>,
    grid_stride: Option<usize>,
    /// Seam score of the low-resolution primary plane.
    block_artifacts: Option<f64>,
}

fn roi(v: &[usize]) -> Roi {
    Roi::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
}

fn eval(a: EvalArgs) -> Result<()> {
    let v = load_volume(&a.input)?;
    let reference = a.reference.as_deref().map(load_volume).transpose()?;
    let profiles = match &a.phantom_spec {
        Some(p) => {
            let spec: PhantomSpec = read_json(p)?;
            phantom_edge_profiles(&spec, &v, PHANTOM_PROFILE_LEN)
        }
        None => Vec::new(),
    };
    let range = a.range.as_ref().map(|r| (r[0], r[1]));
    let rois = match (a.signal_roi, a.noise_roi) {
        (Some(s), Some(n)) => Some((roi(&s), roi(&n))),
        _ => None,
    };
    let opts = EvalOptions {
        model: a.model.clone(),
        range,
        profiles,
        rois,
        reference: reference.as_ref(),
    };
    let reports = [Plane::LrPrimary, Plane::LrSecondary, Plane::Hr]
        .into_iter()
        .map(|plane| evaluate_volume(&v, plane, &opts))
        .collect::<clade::Result<Vec<_>>>()?;
    let block_artifacts = a
        .grid_stride
        .map(|s| {
            block_artifact_score_volume(&v, Plane::LrPrimary, s, range.unwrap_or(v.intensity_range()))
        })
        .transpose()?;
    for r in &reports {
        println!(
            "{:<12} score {:.3} +- {:.3}  es {:.4}{}",
            r.orientation.name(),
            r.nr_score,
            r.nr_score_std,
            r.edge_sharpness_mean,
            r.psnr_db.map(|p| format!("  psnr {p:.2} dB")).unwrap_or_default()
        );
    }
    if let Some(b) = block_artifacts {
        println!("block artifacts {b:.6}");
    }
    if let Some(csv) = &a.csv {
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &reports)?;
        write_bytes(csv, &buf)?;
    }
    write_json(
        &a.report,
        &EvalReport {
            input: a.input.clone(),
            dims: v.dims(),
            spacing_mm: v.spacing(),
            reports,
            grid_stride: a.grid_stride,
            block_artifacts,
        },
    )
}

fn sweep(a: SweepArgs) -> Result<()> {
    let base = config(a.config.as_deref())?;
    let x = corpus(&a.x, "x.patches")?;
    let y = corpus(&a.y, "y.patches")?;
    let eval = eval_set(&x, Some(&a.eval))?;
    let rows = run_sweep(&base, &a.lambda_cyc, &a.lambda_ident, &a.lambda_gmap, &x, &y, &eval, &a.out)?;
    for r in &rows {
        println!(
            "cyc {} ident {} gmap {}: score {:.3} +- {:.3}",
            r.lambda_cyc, r.lambda_ident, r.lambda_gmap, r.score_mean, r.score_std
        );
    }
    println!("{}", a.out.join("sweep.csv").display());
    Ok(())
}

fn stride_sweep_cmd(a: StrideSweepArgs) -> Result<()> {
    let g = load_generator::<f32>(&a.checkpoint)?;
    let v = load_volume(&a.input)?;
    let rows = stride_sweep(&v, &g, &a.strides, a.repeats, a.window.pair())?;
    let mut buf = Vec::new();
    write_stride_csv(&mut buf, &rows)?;
    write_bytes(&a.out, &buf)?;
    for r in &rows {
        println!(
            "stride {:>2}: {:>4} patches/slice, {:.3} s, score {:.3}",
            r.stride, r.patches_per_slice, r.seconds_mean, r.score_mean
        );
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(s) = std::env::var("CLADE_THREADS") {
        let n: usize = s
            .trim()
            .parse()
            .with_context(|| format!("CLADE_THREADS={s:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Prep(a) => prep(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::StrideSweep(a) => stride_sweep_cmd(a),
    }
}

fn main() -> ExitCode {
    // Usage errors exit with 2 from inside `parse`.
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
