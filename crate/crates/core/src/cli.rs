//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, BenchConfig};
use crate::error::{Error, Result};
use crate::eval::{clear_metrics, DEFAULT_IOU_THRESHOLD};
use crate::io::{self, DEFAULT_MAX_GAP};
use crate::selftest::{self, HistoryShape};
use crate::synth::{self, ScenarioConfig};
use crate::tracker::{run_sequence, TrackerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_ACCEPTANCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "fact", version, about = "Online multi-object tracking with continual appearance learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Track one sequence and write MOT results.
    Track(TrackArgs),
    /// Score a result file against ground truth.
    Eval(EvalArgs),
    /// Generate synthetic scenarios.
    Synth(SynthArgs),
    /// Check the recursive learner against the batch solution.
    Selftest(SelftestArgs),
    /// Time the continual update against the number of tracks.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    embs: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    cmc: Option<PathBuf>,
    /// Result file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fill short gaps by linear interpolation.
    #[arg(long)]
    interpolate: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_GAP)]
    max_gap: u32,
    /// Baseline tracker without the learned affinity stage.
    #[arg(long)]
    no_fac: bool,
    /// Ground truth; prints metrics when given.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "source")]
struct SynthSource {
    /// Write the 20-scenario suite derived from this seed.
    #[arg(long)]
    suite_seed: Option<u64>,
    /// Write one scenario described by a config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    source: SynthSource,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random histories.
    #[arg(long, default_value_t = 5)]
    histories: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    tracks_max: usize,
    #[arg(long, default_value_t = 50)]
    step: usize,
    #[arg(long, default_value_t = 256)]
    d_et: usize,
    #[arg(long, default_value_t = 10)]
    rows: usize,
    #[arg(long, default_value_t = 15)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalFailure { .. } => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Track(a) => track(a, out, err),
        Command::Eval(a) => eval(a, out),
        Command::Synth(a) => synth_cmd(a, out),
        Command::Selftest(a) => selftest_cmd(a, out),
        Command::Bench(a) => bench_cmd(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn track(a: TrackArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let mut cfg = TrackerConfig::load(&a.config)?;
    if a.no_fac {
        cfg.fac = false;
    }
    let dets = io::parse_detections(&a.dets)?;
    let counts: BTreeMap<u32, usize> = dets.iter().map(|(&f, b)| (f, b.len())).collect();
    let (d_reid, embs) = io::read_embeddings(&a.embs, &counts)?;
    let cmc = a.cmc.as_ref().map(io::parse_cmc).transpose()?;
    let frames = dets
        .into_iter()
        .map(|(f, b)| {
            let e = embs[&f].clone();
            (f, (b, e))
        })
        .collect();
    let mut rows = run_sequence(&cfg, d_reid.max(1), &frames, cmc)?;
    if a.interpolate {
        rows = io::interpolate(&rows, a.max_gap);
    }
    let metrics_sink: &mut dyn Write = match &a.out {
        Some(path) => {
            io::write_results(path, &rows)?;
            out
        }
        None => {
            out.write_all(io::format_results(&rows)?.as_bytes()).map_err(io_err)?;
            err
        }
    };
    if let Some(gt) = &a.gt {
        let gt = io::parse_gt(gt)?;
        let m = clear_metrics(&rows, &gt, DEFAULT_IOU_THRESHOLD);
        write!(metrics_sink, "{}{}", m.table(), m.key_values()).map_err(io_err)?;
    }
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    if !(0.0..=1.0).contains(&a.iou) {
        return Err(Error::invalid("--iou must lie in [0, 1]"));
    }
    let results = io::parse_gt(&a.results)?;
    let gt = io::parse_gt(&a.gt)?;
    let m = clear_metrics(&results, &gt, a.iou);
    write!(out, "{}{}", m.table(), m.key_values()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn synth_cmd(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let configs: Vec<(PathBuf, ScenarioConfig)> = match (a.source.suite_seed, a.source.config) {
        (Some(seed), _) => synth::scenario_suite(seed)
            .into_iter()
            .enumerate()
            .map(|(i, c)| (a.out_dir.join(format!("scenario_{i:02}")), c))
            .collect(),
        (None, Some(path)) => vec![(a.out_dir.clone(), ScenarioConfig::load(path)?)],
        (None, None) => unreachable!("clap enforces one source"),
    };
    for (dir, cfg) in &configs {
        let s = synth::generate(cfg)?;
        s.write_to(dir)?;
        std::fs::write(dir.join("scenario.txt"), cfg.to_string()).map_err(|e| Error::io(dir, e))?;
        writeln!(out, "{}", dir.display()).map_err(io_err)?;
    }
    Ok(EXIT_OK)
}

fn selftest_cmd(a: SelftestArgs, out: &mut dyn Write) -> Result<i32> {
    let seeds: Vec<u64> = (0..a.histories.max(1)).map(|k| a.seed + k).collect();
    let report = selftest::run(&seeds, &HistoryShape::default())?;
    write!(out, "{report}").map_err(io_err)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_ACCEPTANCE })
}

fn bench_cmd(a: BenchArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = BenchConfig {
        tracks_max: a.tracks_max,
        step: a.step,
        d_et: a.d_et,
        rows: a.rows,
        reps: a.reps,
        seed: a.seed,
        ..Default::default()
    };
    let report = bench::run(&cfg)?;
    write!(out, "{report}").map_err(io_err)?;
    Ok(if report.linear_ok() { EXIT_OK } else { EXIT_ACCEPTANCE })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("fact").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&[]).0, EXIT_USAGE);
        assert_eq!(run_args(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["track", "--dets", "a"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["eval", "--results", "a", "--gt", "b", "--bogus"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["synth", "--out-dir", "x"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["synth", "--out-dir", "x", "--suite-seed", "1", "--config", "c"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("track"));
    }

    #[test]
    fn missing_files_exit_two() {
        let (code, _, err) = run_args(&["eval", "--results", "/nonexistent/r.txt", "--gt", "/nonexistent/g.txt"]);
        assert_eq!(code, EXIT_INPUT);
        assert!(err.starts_with("error: "));
    }

    #[test]
    fn selftest_passes() {
        let (code, out, _) = run_args(&["selftest", "--histories", "2"]);
        assert_eq!(code, EXIT_OK, "{out}");
        assert!(out.contains("passed = true"));
    }

    #[test]
    fn numerical_failure_maps_to_three() {
        let e = Error::NumericalFailure {
            frame: 4,
            context: "x".into(),
        };
        assert_eq!(exit_code(&e), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_INPUT);
    }
}
