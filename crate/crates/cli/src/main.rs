//! Batch driver: one subcommand per pipeline stage, chained through the
//! scene manifest.
//!
//! Exit codes: 0 on success, 2 when validation or configuration fails,
//! 1 for any other error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::Value;
use slgs::io::synthetic::{generate_synthetic, SyntheticOptions};
use slgs::io::{validate, ValidationReport};
use slgs::pipeline::{
    run_align, run_eval, run_fit_codec, run_query_stage, run_render, run_train_rgb, run_train_sem, PipelineError, Stage,
    Workspace,
};
use slgs::scene::SceneError;
use slgs::PipelineConfig;

#[derive(Parser)]
#[command(name = "slgs", version, about = "Sparse-view language Gaussian splatting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Scene manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; defaults to `out/` next to the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` config override, dotted keys for nested fields.
    /// Overrides are saved into the manifest.
    #[arg(long = "config-override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth and write its manifest.
    Synth {
        /// Directory to write the scene into.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long, default_value_t = 0)]
        held_out: usize,
        #[arg(long, default_value_t = 10)]
        objects: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 512)]
        embed_dim: usize,
        /// Fraction of masks whose features are swapped pairwise.
        #[arg(long, default_value_t = 0.0)]
        swap_fraction: f64,
        /// Standard deviation of match-field noise in pixels.
        #[arg(long, default_value_t = 0.0)]
        match_noise: f64,
        #[arg(long = "config-override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check every file referenced by a manifest.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    Align(StageArgs),
    FitCodec(StageArgs),
    TrainRgb(StageArgs),
    TrainSem(StageArgs),
    Render(StageArgs),
    Query(StageArgs),
    Eval(StageArgs),
    /// Validate, then run every stage up to and including `--stage`.
    Run {
        #[command(flatten)]
        args: StageArgs,
        #[arg(long, default_value = "eval", value_parser = parse_stage)]
        stage: Stage,
    },
}

fn parse_stage(name: &str) -> Result<Stage, String> {
    Stage::parse(name).ok_or_else(|| {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        format!("unknown stage `{name}`; expected one of {}", names.join(", "))
    })
}

/// Failure that maps to exit code 2.
#[derive(Debug)]
struct Invalid;

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("validation failed")
    }
}

impl std::error::Error for Invalid {}

fn is_invalid(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>()
            || matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::Config(SceneError::InvalidConfig(_))))
            || matches!(e.downcast_ref::<SceneError>(), Some(SceneError::InvalidConfig(_)))
    })
}

/// Error chain on one line, skipping causes already spelled out by the
/// message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    let mut prev = out.clone();
    for cause in err.chain().skip(1) {
        let text = cause.to_string();
        if !prev.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        prev = text;
    }
    out
}

fn print_json(value: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn report_validation(manifest: &Path) -> Result<()> {
    let report: ValidationReport = validate(manifest);
    for issue in &report.issues {
        eprintln!("{:?}: {} [{}] {}", issue.severity, issue.file, issue.location, issue.message);
    }
    if !report.is_ok() {
        return Err(Invalid.into());
    }
    info!("{} is valid", manifest.display());
    Ok(())
}

fn open(args: &StageArgs) -> Result<Workspace> {
    Workspace::open(&args.manifest, args.out.as_deref(), &args.overrides, args.seed)
        .with_context(|| format!("opening {}", args.manifest.display()))
}

fn run_stage(ws: &mut Workspace, stage: Stage) -> Result<Value> {
    info!("stage {}", stage.name());
    let summary = match stage {
        Stage::Validate => {
            report_validation(&ws.manifest_path)?;
            Value::Null
        }
        Stage::Align => {
            let art = run_align(ws)?;
            serde_json::json!({
                "groups": art.result.graph.groups.len(),
                "scored_pairs": art.result.graph.pairs.len(),
            })
        }
        Stage::FitCodec => {
            let codecs = run_fit_codec(ws)?;
            Value::Object(codecs.iter().map(|(g, c)| (g.to_string(), Value::from(c.len()))).collect())
        }
        Stage::TrainRgb => serde_json::json!({ "gaussians": run_train_rgb(ws)?.len() }),
        Stage::TrainSem => serde_json::json!({ "gaussians": run_train_sem(ws)?.len() }),
        Stage::Render => serde_json::to_value(run_render(ws)?)?,
        Stage::Query => serde_json::to_value(run_query_stage(ws)?)?,
        Stage::Eval => serde_json::to_value(run_eval(ws)?)?,
    };
    Ok(summary)
}

fn stage_command(args: &StageArgs, stage: Stage) -> Result<()> {
    let mut ws = open(args)?;
    let summary = run_stage(&mut ws, stage)?;
    print_json(&summary)
}

fn synth(opts: SyntheticOptions, out: &Path, overrides: &[String]) -> Result<()> {
    let mut cfg = PipelineConfig::default();
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.seed = opts.seed;
    let scene = generate_synthetic(&opts)?;
    let manifest = scene.write(out, &cfg).with_context(|| format!("writing scene to {}", out.display()))?;
    println!("{}", manifest.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, seed, views, held_out, objects, size, embed_dim, swap_fraction, match_noise, overrides } => {
            let opts = SyntheticOptions {
                seed,
                views,
                held_out_views: held_out,
                objects,
                width: size,
                height: size,
                embed_dim,
                swap_fraction,
                match_noise_px: match_noise,
                ..Default::default()
            };
            synth(opts, &out, &overrides)
        }
        Command::Validate { manifest } => report_validation(&manifest),
        Command::Align(a) => stage_command(&a, Stage::Align),
        Command::FitCodec(a) => stage_command(&a, Stage::FitCodec),
        Command::TrainRgb(a) => stage_command(&a, Stage::TrainRgb),
        Command::TrainSem(a) => stage_command(&a, Stage::TrainSem),
        Command::Render(a) => stage_command(&a, Stage::Render),
        Command::Query(a) => stage_command(&a, Stage::Query),
        Command::Eval(a) => stage_command(&a, Stage::Eval),
        Command::Run { args, stage } => {
            report_validation(&args.manifest)?;
            let mut ws = open(&args)?;
            let mut last = Value::Null;
            for s in Stage::ALL.into_iter().filter(|s| *s != Stage::Validate && *s <= stage) {
                last = run_stage(&mut ws, s)?;
            }
            print_json(&last)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SLGS_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().with_context(|| format!("SLGS_THREADS=`{raw}` is not a thread count"))?;
    if n == 0 {
        bail!("SLGS_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(if is_invalid(&err) { 2 } else { 1 })
        }
    }
}
