//! Command-line front end for the analysis pipeline.
//!
//! Every subcommand is a thin wrapper over the library: `probe`,
//! `attribute`, `activations`, `intervene`, and `report` run increasing
//! prefixes of the pipeline from one declarative config file; `lens`
//! projects a saved probe direction through a model's unembedding; `synth`
//! materializes synthetic models (or the complete planted demo fixture);
//! `plot` renders any bundle CSV as an SVG bar chart.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use neurolens::attribution::logit_lens;
use neurolens::config::{ConfigError, Overrides, RunConfig};
use neurolens::corpus::GroupLabel;
use neurolens::fixture;
use neurolens::model::{generate_synthetic_model, load_model, save_model, synthetic_vocab};
use neurolens::pipeline::{
    run_activations_cmd, run_attribute_cmd, run_intervene_cmd, run_probe_cmd, run_report_cmd,
    PipelineError, ReportSummary, StageError,
};
use neurolens::probe::{load_probe, probe_direction};
use neurolens::report;
use neurolens::SyntheticSpec;

#[derive(Parser)]
#[command(
    name = "neurolens",
    version,
    about = "Trace, attribute, and edit demographic signals inside small decoder transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and save the mode's probes with their metrics and fingerprints.
    Probe(RunArgs),
    /// Project a saved probe direction through the unembedding (JSON to stdout).
    Lens(LensArgs),
    /// Rank neuron candidates per class and keyword-filter them into groups.
    Attribute(RunArgs),
    /// Write the group-conditioned activation matrix.
    Activations(RunArgs),
    /// Decode baselines and sweep interventions over misclassified records.
    Intervene(RunArgs),
    /// Run the whole pipeline and emit the full report bundle.
    Report(RunArgs),
    /// Generate a synthetic model from a spec, or the planted demo fixture.
    Synth(SynthArgs),
    /// Render a bundle CSV as an SVG bar chart.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration TOML.
    #[arg(long)]
    config: PathBuf,
    /// Override [run].seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override [run].output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override [dataset].test_fraction.
    #[arg(long)]
    test_fraction: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        Ok(RunConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                output_dir: self.output_dir.clone(),
                test_fraction: self.test_fraction,
            },
        )?)
    }
}

#[derive(Args)]
struct LensArgs {
    /// Model manifest JSON.
    #[arg(long)]
    model: PathBuf,
    /// Probe manifest JSON.
    #[arg(long)]
    probe: PathBuf,
    /// Class whose direction to project (e.g. "Asian").
    #[arg(long)]
    class: String,
    /// How many top tokens to report.
    #[arg(long, default_value_t = 20)]
    k: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic model spec (JSON). Omit to generate the planted demo
    /// fixture: model, corpus, keyword files, and a ready-to-run config.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Input CSV (any of the bundle's CSV artifacts).
    #[arg(long)]
    csv: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
    /// Chart title.
    #[arg(long, default_value = "neurolens")]
    title: String,
    /// Leading CSV columns folded into the row label (sweep.csv wants 2).
    #[arg(long, default_value_t = 1)]
    label_cols: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Probe(args) => print_summary(&run_probe_cmd(&args.load()?)?),
        Command::Attribute(args) => print_summary(&run_attribute_cmd(&args.load()?)?),
        Command::Activations(args) => print_summary(&run_activations_cmd(&args.load()?)?),
        Command::Intervene(args) => print_summary(&run_intervene_cmd(&args.load()?)?),
        Command::Report(args) => print_summary(&run_report_cmd(&args.load()?)?),
        Command::Lens(args) => lens(&args)?,
        Command::Synth(args) => synth(&args)?,
        Command::Plot(args) => plot(&args)?,
    }
    Ok(())
}

fn print_summary(summary: &ReportSummary) {
    println!(
        "wrote {} artifacts to {}",
        summary.artifact_count,
        summary.output_dir.display()
    );
    println!("config sha256: {}", summary.config_sha256);
    for probe in &summary.probes {
        println!(
            "probe {}: accuracy {:.3}, macro-F1 {:.3} (train {}, test {})",
            probe.kind, probe.accuracy, probe.macro_f1, probe.train_count, probe.test_count
        );
    }
    if let Some(b) = &summary.baseline {
        println!(
            "baseline: {} records, {} correct, {} errors, {} unknown (accuracy {:.3})",
            b.n_records, b.n_correct, b.n_errors, b.n_unknown, b.accuracy
        );
    }
    if summary.sweep_cells > 0 {
        println!("sweep: {} cells", summary.sweep_cells);
    }
}

fn lens(args: &LensArgs) -> Result<(), PipelineError> {
    let loaded = load_model(&args.model).map_err(|e| PipelineError::in_stage("load-model", e))?;
    let probe = load_probe(&args.probe).map_err(|e| PipelineError::in_stage("load-probe", e))?;
    let class = GroupLabel::ALL
        .iter()
        .copied()
        .find(|l| l.name() == args.class)
        .ok_or_else(|| {
            PipelineError::Config(ConfigError::Invalid(format!(
                "unknown class {:?}; expected one of {}",
                args.class,
                GroupLabel::ALL.map(|l| l.name()).join(", ")
            )))
        })?;
    let direction =
        probe_direction(&probe, class).map_err(|e| PipelineError::in_stage("lens", e))?;
    let projection = logit_lens(&loaded.model, loaded.vocab.as_ref(), &direction, args.k)
        .map_err(|e| PipelineError::in_stage("lens", e))?;
    let text = report::json_string(&projection)
        .map_err(|e| PipelineError::in_stage("lens", e))?;
    print!("{text}");
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<(), PipelineError> {
    match &args.spec {
        Some(spec_path) => {
            let raw = std::fs::read_to_string(spec_path).map_err(|source| {
                PipelineError::in_stage(
                    "synth",
                    StageError::Data(format!("cannot read spec {}: {source}", spec_path.display())),
                )
            })?;
            let spec: SyntheticSpec = serde_json::from_str(&raw).map_err(|e| {
                PipelineError::in_stage(
                    "synth",
                    StageError::Data(format!("spec {} does not parse: {e}", spec_path.display())),
                )
            })?;
            let bundle = generate_synthetic_model(&spec)
                .map_err(|e| PipelineError::in_stage("synth", e))?;
            let vocab =
                synthetic_vocab(&spec).map_err(|e| {
                    PipelineError::in_stage("synth", StageError::Data(e.to_string()))
                })?;
            let manifest = save_model(&bundle, vocab.as_ref(), &args.out)
                .map_err(|e| PipelineError::in_stage("synth", e))?;
            println!("wrote model manifest {}", manifest.display());
        }
        None => {
            let paths = fixture::write_fixture(&args.out)
                .map_err(|e| PipelineError::in_stage("synth", e))?;
            println!("wrote planted fixture to {}", paths.dir.display());
            println!("  model manifest: {}", paths.model_manifest.display());
            println!("  corpus:         {}", paths.corpus.display());
            println!("  run config:     {}", paths.config.display());
        }
    }
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<(), PipelineError> {
    let csv = std::fs::read_to_string(&args.csv).map_err(|source| {
        PipelineError::in_stage(
            "plot",
            StageError::Data(format!("cannot read csv {}: {source}", args.csv.display())),
        )
    })?;
    let svg = report::csv_bar_chart_svg(&csv, &args.title, args.label_cols)
        .map_err(|e| PipelineError::in_stage("plot", e))?;
    report::write_text(&args.out, &svg).map_err(|e| PipelineError::in_stage("plot", e))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
