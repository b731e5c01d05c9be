//! Command-line front end: synthetic data, the joint solver, its two half
//! steps on their own, energy evaluation and metrics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthdeblur::energy::total_energy;
use depthdeblur::imaging::io::{read_color_png, read_depth_png, read_flow_png, read_text, write_color_png, write_text};
use depthdeblur::pipeline::output::{layout, load_state, observations, save_result};
use depthdeblur::pipeline::synth::{self, parse_spec};
use depthdeblur::pipeline::{
    deblur_from_flows, evaluate, load_dataset, run_with, save_dataset, synth_generate, Dataset, EvalTarget, PipelineConfig, Steps,
};
use depthdeblur::scene::{Direction, REFERENCE_FRAME};
use depthdeblur::Error;

#[derive(Parser)]
#[command(name = "depthdeblur", version, about = "Joint depth completion and multi-frame deblurring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Full alternation of scene and image steps.
    Run(RunArgs),
    /// Scene steps only: depth completion from the blurry frames.
    Complete(RunArgs),
    /// Image step only, with blur and warps from given flows.
    Deblur(DeblurArgs),
    /// Energy of a stored scene state.
    Energy(EnergyArgs),
    /// Metrics of predictions against a dataset's ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec file; without it a built-in scene is used.
    #[arg(long, conflicts_with = "builtin")]
    spec: Option<PathBuf>,
    /// Built-in scene: `standard-N`, `two-motion` or `static`.
    #[arg(long)]
    builtin: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Common {
    /// Dataset directory; falls back to `dataset` in the config.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Result directory; falls back to `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DeblurArgs {
    #[command(flatten)]
    common: Common,
    /// Reference-to-next flow PNG.
    #[arg(long)]
    flow_next: PathBuf,
    /// Reference-to-previous flow PNG; mirrored from the next flow if absent.
    #[arg(long)]
    flow_prev: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnergyArgs {
    #[command(flatten)]
    common: Common,
    /// Result directory holding the state; the ground-truth state if absent.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Result directory with `depth_1.png`, `flow_1to2.png`, `restored_1.png`.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Data(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn load_config(common: &Common) -> CliResult<PipelineConfig> {
    let config = match &common.config {
        Some(p) => PipelineConfig::read(p).map_err(|e| match e {
            Error::Io { .. } => usage(e.to_string()),
            e => e.into(),
        })?,
        None => PipelineConfig::default(),
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn dataset_dir(common: &Common, config: &PipelineConfig) -> CliResult<PathBuf> {
    common
        .input
        .clone()
        .or_else(|| config.dataset.clone())
        .ok_or_else(|| usage("no dataset: pass --in or set `dataset` in the config"))
}

fn output_dir(out: &Option<PathBuf>, config: &PipelineConfig) -> CliResult<PathBuf> {
    out.clone()
        .or_else(|| config.output.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set `output` in the config"))
}

fn report(text: &str, out: &Option<PathBuf>) -> CliResult<()> {
    print!("{text}");
    if let Some(p) = out {
        write_text(p, text)?;
    }
    Ok(())
}

fn builtin_scene(name: &str) -> CliResult<synth::SyntheticSceneSpec> {
    match name {
        "two-motion" => Ok(synth::two_motion_scene()),
        "static" => Ok(synth::static_scene()),
        _ => name
            .strip_prefix("standard-")
            .and_then(|i| i.parse::<usize>().ok())
            .filter(|&i| i < synth::STANDARD_SUITE_SIZE)
            .map(synth::standard_scene)
            .ok_or_else(|| usage(format!("unknown built-in scene `{name}`"))),
    }
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let spec = match (&a.spec, &a.builtin) {
        (Some(p), _) => parse_spec(&read_text(p)?)?,
        (None, Some(name)) => builtin_scene(name)?,
        (None, None) => return Err(usage("pass --spec or --builtin")),
    };
    let ds = synth_generate(&spec, a.seed)?;
    save_dataset(&ds, &a.out)?;
    Ok(())
}

fn cmd_run(a: &RunArgs, steps: Steps) -> CliResult<()> {
    let config = load_config(&a.common)?;
    let ds = load_dataset(&dataset_dir(&a.common, &config)?)?;
    let out_dir = output_dir(&a.out, &config)?;
    let out = run_with(&ds, &config, steps)?;
    save_result(&out, &ds.inputs, &out_dir)?;
    if let Some(m) = out.report.final_metrics() {
        print!("{}", m.to_text());
    }
    Ok(())
}

fn cmd_deblur(a: &DeblurArgs) -> CliResult<()> {
    let config = load_config(&a.common)?;
    let ds = load_dataset(&dataset_dir(&a.common, &config)?)?;
    let out_dir = output_dir(&a.out, &config)?;
    let k = ds.inputs.k;
    let dims = Some((k.width, k.height));
    let next = read_flow_png(&a.flow_next, dims)?;
    let prev = a.flow_prev.as_deref().map(|p| read_flow_png(p, dims)).transpose()?;
    let restored = deblur_from_flows(&ds.inputs.blurry, [prev.as_ref(), Some(&next)], &config)?;
    std::fs::create_dir_all(&out_dir).map_err(|source| Error::Io {
        path: out_dir.clone(),
        source,
    })?;
    for (m, img) in restored.iter().enumerate() {
        write_color_png(&out_dir.join(layout::restored(m)), img)?;
    }
    Ok(())
}

fn require_truth(ds: &Dataset) -> CliResult<&depthdeblur::pipeline::GroundTruth> {
    ds.truth
        .as_ref()
        .ok_or_else(|| Failure::Data(Error::InvalidParameter("the dataset has no ground truth".into())))
}

fn cmd_energy(a: &EnergyArgs) -> CliResult<()> {
    let config = load_config(&a.common)?;
    let ds = load_dataset(&dataset_dir(&a.common, &config)?)?;
    let (scene, sp, latents) = match &a.state {
        Some(dir) => {
            let s = load_state(dir, &ds.inputs.k)?;
            (s.scene, s.superpixels, s.latents)
        }
        None => {
            let gt = require_truth(&ds)?;
            (
                gt.scene.clone(),
                gt.superpixels.clone(),
                gt.latents.iter().map(|c| c.luminance()).collect(),
            )
        }
    };
    let obs = observations(&ds.inputs, sp, &config)?;
    let e = total_energy(&scene, &latents, &obs, &config.weights)?;
    report(&e.report(), &a.out)
}

fn pick(explicit: &Option<PathBuf>, pred: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    explicit
        .clone()
        .or_else(|| pred.as_ref().map(|d| d.join(name)))
        .ok_or_else(|| usage(format!("no prediction for `{name}`: pass --pred or the file directly")))
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let config = load_config(&a.common)?;
    let ds = load_dataset(&dataset_dir(&a.common, &config)?)?;
    let gt = require_truth(&ds)?;
    let k = ds.inputs.k;
    let dims = Some((k.width, k.height));
    let depth = read_depth_png(&pick(&a.depth, &a.pred, layout::DEPTH)?, dims)?.to_dense();
    let flow = read_flow_png(&pick(&a.flow, &a.pred, &layout::flow(2))?, dims)?;
    let image = read_color_png(&pick(&a.image, &a.pred, &layout::restored(REFERENCE_FRAME))?, dims)?.luminance();
    let latent = gt.latents[REFERENCE_FRAME].luminance();
    let target = EvalTarget {
        depth: &gt.depth,
        flow: gt.flow(Direction::Next),
        latent: &latent,
    };
    let m = evaluate(&depth, &flow, &image, target, config.baseline, k.fx)?;
    report(&m.to_text(), &a.out)
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a, Steps::Joint),
        Command::Complete(a) => cmd_run(a, Steps::SceneOnly),
        Command::Deblur(a) => cmd_deblur(a),
        Command::Energy(a) => cmd_energy(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names() {
        assert!(builtin_scene("standard-0").is_ok());
        assert!(builtin_scene("standard-4").is_ok());
        assert!(builtin_scene("two-motion").is_ok());
        assert!(builtin_scene("static").is_ok());
        assert!(matches!(builtin_scene("standard-5"), Err(Failure::Usage(_))));
        assert!(matches!(builtin_scene("nope"), Err(Failure::Usage(_))));
    }

    #[test]
    fn config_errors_are_usage_errors() {
        assert!(matches!(Failure::from(Error::Config("x".into())), Failure::Usage(_)));
        assert!(matches!(Failure::from(Error::EmptyMeasurements), Failure::Data(_)));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn missing_paths_are_usage_errors() {
        let c = PipelineConfig::default();
        let common = Common { input: None, config: None };
        assert!(matches!(dataset_dir(&common, &c), Err(Failure::Usage(_))));
        assert!(matches!(output_dir(&None, &c), Err(Failure::Usage(_))));
        assert!(matches!(pick(&None, &None, "x"), Err(Failure::Usage(_))));
        assert_eq!(pick(&None, &Some(PathBuf::from("r")), "x").ok(), Some(PathBuf::from("r/x")));
    }
}
