//! Command-line front end: generate synthetic bundles, run experiments,
//! mix contaminated streams and render report tables. All logic lives in
//! the library; this binary parses arguments, wires files and prints
//! summaries (data on stdout, diagnostics on stderr).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tta_bench::bundle::{generate_synthetic, load_bundle, save_bundle, SynthSpec};
use tta_bench::error::{Result, TtaError};
use tta_bench::harness::{
    build_mixed_stream, config_hash, run_experiment, Contamination, ContaminationKind,
    ExperimentSpec, Mode, OodDetection, RunConfig, RunManifest, TemplateMode,
};
use tta_bench::report::{read_reports_csv, render_pivot, write_reports_csv, TableFormat};

#[derive(Parser)]
#[command(name = "tta-bench", version, about = "Test-time adaptation over embedding bundles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding bundle from a spec file.
    Generate(GenerateArgs),
    /// Run experiments from a manifest or from direct flags.
    Run(RunArgs),
    /// Mix contaminant samples into a clean bundle's stream.
    Mix(MixArgs),
    /// Pivot report CSVs into a methods-by-datasets table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON file holding the generator spec.
    #[arg(long)]
    spec: PathBuf,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON manifest with a list of experiments.
    #[arg(long, conflicts_with_all = ["bundle", "method"])]
    manifest: Option<PathBuf>,
    /// Bundle directory (single-experiment form).
    #[arg(long, requires = "method")]
    bundle: Option<PathBuf>,
    /// Method tag (single-experiment form).
    #[arg(long, requires = "bundle")]
    method: Option<String>,
    /// episodic | online.
    #[arg(long, default_value = "episodic")]
    mode: String,
    /// JSON config file; flags override nothing inside it, defaults fill
    /// the rest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// single | ensemble.
    #[arg(long, default_value = "single")]
    template_mode: String,
    /// Contaminant bundle for a mixed online stream.
    #[arg(long)]
    contaminant: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    /// ood | adversarial.
    #[arg(long, default_value = "adversarial")]
    kind: String,
    /// Run the OOD-detection protocol with this discard fraction.
    #[arg(long)]
    ood_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    ood_seed: u64,
    /// Output directory for reports, logs and resolved configs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Episodic fan-out width.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    contaminant: PathBuf,
    #[arg(long)]
    ratio: f64,
    /// ood | adversarial.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Report CSV files to pivot.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// csv | markdown.
    #[arg(long, default_value = "markdown")]
    format: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Mix(args) => cmd_mix(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec).map_err(|e| TtaError::io(&args.spec, e))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| TtaError::InvalidInput(format!("spec file: {e}")))?;
    spec.validate()?;
    let bundle = generate_synthetic(&spec)?;
    save_bundle(&bundle, &args.out)?;
    println!(
        "bundle {} -> {}: C={} D={} N={} V={} T={}",
        bundle.dataset_name,
        args.out.display(),
        bundle.num_classes(),
        bundle.dim,
        bundle.num_samples(),
        bundle.views_per_sample,
        bundle.num_templates()
    );
    Ok(())
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| TtaError::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| TtaError::InvalidInput(format!("config file: {e}")))
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (experiments, out_dir) = if let Some(manifest_path) = &args.manifest {
        let text =
            fs::read_to_string(manifest_path).map_err(|e| TtaError::io(manifest_path, e))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| TtaError::InvalidInput(format!("manifest file: {e}")))?;
        manifest.validate()?;
        let out = manifest.out_dir.clone().unwrap_or_else(|| args.out.clone());
        (manifest.experiments, out)
    } else {
        let bundle = args.bundle.clone().ok_or_else(|| {
            TtaError::InvalidInput("either --manifest or --bundle/--method is required".into())
        })?;
        let method = args.method.clone().expect("clap enforces bundle+method");
        let spec = ExperimentSpec {
            bundle,
            method,
            mode: args.mode.parse::<Mode>()?,
            seed: args.seed,
            template_mode: args.template_mode.parse::<TemplateMode>()?,
            config: load_config(args.config.as_ref())?,
            contamination: args.contaminant.as_ref().map(|c| -> Result<Contamination> {
                Ok(Contamination {
                    contaminant: c.clone(),
                    ratio: args.ratio,
                    kind: args.kind.parse::<ContaminationKind>()?,
                })
            }).transpose()?,
            ood_detection: args.ood_fraction.map(|fraction| OodDetection {
                fraction,
                seed: args.ood_seed,
            }),
        };
        (vec![spec], args.out.clone())
    };

    fs::create_dir_all(&out_dir).map_err(|e| TtaError::io(&out_dir, e))?;
    for spec in &experiments {
        let (report, log) = run_experiment(spec, args.workers)?;
        let stem = format!(
            "{}_{}_{}_{}",
            report.method_tag, report.mode, report.seed, report.config_hash
        );
        write_reports_csv(std::slice::from_ref(&report), &out_dir.join(format!("{stem}.report.csv")))?;
        log.write_csv(&out_dir.join(format!("{stem}.log.csv")))?;
        write_resolved_config(spec, &out_dir.join(format!("{stem}.config.json")))?;
        let ece = report
            .ece
            .map(|v| format!("{:.4}", v))
            .unwrap_or_else(|| "-".into());
        let auroc = report
            .auroc
            .map(|v| format!("{:.4}", v))
            .unwrap_or_else(|| "-".into());
        println!(
            "{} on {} [{}]: acc={:.2}% ece={} auroc={} n={}",
            report.method_tag,
            report.bundle_name,
            report.mode,
            report.accuracy * 100.0,
            ece,
            auroc,
            report.n_evaluated
        );
    }
    Ok(())
}

fn write_resolved_config(spec: &ExperimentSpec, path: &Path) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Resolved<'a> {
        config_hash: String,
        spec: &'a ExperimentSpec,
    }
    let resolved = Resolved {
        config_hash: config_hash(spec),
        spec,
    };
    let json = serde_json::to_string_pretty(&resolved)
        .map_err(|e| TtaError::Manifest(e.to_string()))?;
    fs::write(path, json).map_err(|e| TtaError::io(path, e))
}

fn cmd_mix(args: &MixArgs) -> Result<()> {
    let clean = load_bundle(&args.clean)?;
    let contaminant = load_bundle(&args.contaminant)?;
    let kind = args.kind.parse::<ContaminationKind>()?;
    let mixed = build_mixed_stream(&clean, &contaminant, args.ratio, kind, args.seed)?;
    save_bundle(&mixed, &args.out)?;
    let flagged = mixed
        .samples
        .iter()
        .filter(|s| s.flag != tta_bench::bundle::SampleFlag::Clean)
        .count();
    println!(
        "mixed stream -> {}: {} samples, {} contaminated ({})",
        args.out.display(),
        mixed.num_samples(),
        flagged,
        kind.as_str()
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let format = args.format.parse::<TableFormat>()?;
    let mut reports = Vec::new();
    for input in &args.inputs {
        reports.extend(read_reports_csv(input)?);
    }
    if reports.is_empty() {
        return Err(TtaError::InvalidInput(
            "the given report files contain no rows".into(),
        ));
    }
    print!("{}", render_pivot(&reports, format)?);
    Ok(())
}
