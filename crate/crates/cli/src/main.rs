use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use camot::evaluation::{clear_mot, EvalConfig, GtBox};
use camot::pipeline::format::{self, SequenceDir, TrackRecord};
use camot::pipeline::{render, run_sequence, tune, Params, RunOptions};
use camot::synthetic::{catalog, Scenario, ScenarioSpec};
use camot::{Error, Result};

/// Category-agnostic multi-object tracking over mask proposals.
#[derive(Parser)]
#[command(name = "camot", version)]
struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track one sequence directory.
    Track(TrackArgs),
    /// Score tracks against ground truth with CLEAR MOT.
    Eval(EvalArgs),
    /// Random-search hyperparameters.
    Tune(TuneArgs),
    /// Write a synthetic sequence directory.
    Synth(SynthArgs),
    /// Draw tracks over each frame as PNG files.
    Render(RenderArgs),
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Parameter file; defaults when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Preprocessing threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Evaluation config; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also write per-distance-bin metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Best parameter file; the trial log goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Catalog name or scenario file.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<u32>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn track(a: &TrackArgs) -> Result<()> {
    let params = match &a.params {
        Some(p) => Params::load(p)?,
        None => Params::default(),
    };
    let seq = SequenceDir::open(&a.input)?;
    let options = RunOptions {
        workers: a.workers,
        ..Default::default()
    };
    let out = run_sequence(&seq, &params, &options)?;
    out.write_tracks(&a.out)?;
    if let Some(d) = &a.diagnostics {
        out.write_diagnostics(d)?;
    }
    info!("peak hypothesis count {}", out.peak_hypotheses);
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => format::read_json::<EvalConfig>(p)?,
        None => EvalConfig::default(),
    };
    let tracks: Vec<TrackRecord> = format::read_jsonl(&a.tracks)?;
    let gt: Vec<GtBox> = format::read_jsonl(&a.gt)?;
    let eval_tracks: Vec<_> = tracks.iter().map(TrackRecord::to_eval).collect();
    let report = clear_mot(&eval_tracks, &gt, &config)?;
    print!("{}", report.table());
    if let Some(p) = &a.json {
        format::write_json(p, &report)?;
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, report.bins_csv()).map_err(|e| io_error(p, e))?;
    }
    Ok(())
}

fn run_tune(a: &TuneArgs) -> Result<()> {
    let r = tune::tune_from_file(&a.spec, &a.out)?;
    println!(
        "best trial {} of {}: objective {:.6}",
        r.best_trial,
        r.trials.len(),
        r.best_objective
    );
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match catalog(&a.scenario) {
        Some(s) => s,
        None if Path::new(&a.scenario).is_file() => format::read_json::<ScenarioSpec>(Path::new(&a.scenario))?,
        None => return Err(Error::InvalidInput(format!("'{}' is neither a catalog scenario nor a file", a.scenario))),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(frames) = a.frames {
        spec.frames = frames;
    }
    let scenario = Scenario::new(spec)?;
    for i in scenario.never_visible()? {
        warn!("object {i} is never visible");
    }
    format::write_sequence(&scenario, &a.out)
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let seq = SequenceDir::open(&a.input)?;
    let tracks: Vec<TrackRecord> = format::read_jsonl(&a.tracks)?;
    let written = render::render_sequence(&seq, &tracks, &a.out)?;
    info!("wrote {} images", written.len());
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    let result = match &cli.command {
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Tune(a) => run_tune(a),
        Command::Synth(a) => synth(a),
        Command::Render(a) => render_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
