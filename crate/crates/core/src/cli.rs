//! Command-line front end. [`run`] parses arguments, dispatches the subcommand and
//! maps failures to exit codes: 0 success, 1 pipeline error, 2 usage or I/O error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::audit::TestStatistic;
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::explain::{
    aggregate_explanations, write_records_csv, write_summary_csv, ExplainOutcome,
};
use crate::pipeline::{run_audit, PipelineConfig, PipelineRun};
use crate::report::{write_audit_outputs, write_scatter_csv, AuditReport, RunManifest};
use crate::robustness::{run_imbalance_study, ImbalanceConfig, DEFAULT_OMEGAS};
use crate::synth::{generate, sme_preset, write_bundle, SynthSpec};

#[derive(Debug, Parser)]
#[command(
    name = "peerfair",
    version,
    about = "Peer-comparison fairness audits of binary decisions"
)]
pub struct Cli {
    /// Worker threads for the parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log verbosity; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full audit and write the report and plot data.
    Audit(AuditArgs),
    /// Run the audit and write watch-out lists for fairly treated rejections.
    Explain(ExplainArgs),
    /// Repeat the audit on under-sampled copies of the protected group.
    Imbalance(ImbalanceArgs),
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Turn an audit report into plot-ready CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatisticArg {
    GrandMean,
    Dispersion,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// TOML configuration; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "peerfair_out")]
    pub out: PathBuf,
    #[arg(long, env = "PEERFAIR_SEED")]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub test_statistic: Option<StatisticArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta_multiplier: Option<f64>,
    /// Use explicit one-sided p-values.
    #[arg(long)]
    pub one_sided: bool,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Significance level of the per-feature test (defaults to the audit alpha).
    #[arg(long)]
    pub explain_alpha: Option<f64>,
    #[arg(long)]
    pub min_accepted_peers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ImbalanceArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Target protected shares, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub omegas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Keep the baseline δ instead of re-resolving it per run.
    #[arg(long)]
    pub freeze_delta: bool,
    /// Refit at the baseline regularization strengths instead of re-running selection.
    #[arg(long)]
    pub reuse_strengths: bool,
    /// Compare five-way categories instead of the discriminated/fair/privileged sides.
    #[arg(long)]
    pub five_way: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Sme,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(
        long,
        value_enum,
        conflicts_with = "spec",
        required_unless_present = "spec"
    )]
    pub preset: Option<Preset>,
    /// TOML generator specification.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, env = "PEERFAIR_SEED")]
    pub seed: Option<u64>,
    /// Direct bias added to the outcome logit of the protected group.
    #[arg(long, allow_hyphen_values = true)]
    pub bias: Option<f64>,
    /// Make the protected label independent of the features.
    #[arg(long)]
    pub independent_group: bool,
    #[arg(long, default_value = "synth_out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Audit report JSON written by `audit`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = "peerfair_out")]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();

    let outcome = match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))
            .and_then(|pool| pool.install(|| dispatch(cli.command))),
        None => dispatch(cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Audit(a) => cmd_audit(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Imbalance(a) => cmd_imbalance(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn load(input: &InputArgs) -> Result<(Dataset, PipelineConfig)> {
    let mut config = match &input.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = input.seed {
        config.audit.seed = seed;
    }
    if let Some(t) = input.test_statistic {
        config.audit.test_statistic = match t {
            StatisticArg::GrandMean => TestStatistic::GrandMean,
            StatisticArg::Dispersion => TestStatistic::Dispersion,
        };
    }
    if let Some(a) = input.alpha {
        config.audit.alpha = a;
    }
    if let Some(m) = input.delta_multiplier {
        config.audit.delta_multiplier = m;
    }
    if input.one_sided {
        config.audit.one_sided = true;
    }
    config.validate()?;
    let dataset = load_dataset(&input.data, &input.schema)?;
    Ok((dataset, config))
}

fn write_explanations(dir: &Path, outcome: &ExplainOutcome, preamble: &str) -> Result<String> {
    let report = aggregate_explanations(&outcome.records);
    write_records_csv(&outcome.records, &dir.join("explanations.csv"), preamble)?;
    write_summary_csv(&report, &dir.join("explanation_summary.csv"), preamble)?;
    let mut text = format!(
        "explained instances: {} (skipped {})\n",
        report.explained,
        outcome.skipped.len()
    );
    for f in &report.features {
        text.push_str(&format!(
            "  {:<6} {:>6.2}% worse than accepted peers\n",
            f.feature, f.percentage
        ));
    }
    for n in &report.notes {
        text.push_str(&format!("  note: {n}\n"));
    }
    Ok(text)
}

fn audit_run(input: &InputArgs, command: &str) -> Result<(Dataset, PipelineRun, RunManifest)> {
    let (dataset, config) = load(input)?;
    let run = run_audit(&dataset, &config)?;
    let manifest = RunManifest::new(command, &dataset, &run);
    Ok((dataset, run, manifest))
}

fn cmd_audit(args: AuditArgs) -> Result<()> {
    let (dataset, run, manifest) = audit_run(&args.input, "audit")?;
    let report = AuditReport::new(manifest, &run);
    let dir = &args.input.out;
    write_audit_outputs(dir, &dataset, &run, &report)?;
    let explained = write_explanations(dir, &run.explain(&dataset)?, &report.manifest.preamble())?;
    print!("{}{}", report.summary_text(), explained);
    println!("outputs written to {}", dir.display());
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let (dataset, mut config) = load(&args.input)?;
    if args.explain_alpha.is_some() {
        config.explain_alpha = args.explain_alpha;
    }
    if let Some(m) = args.min_accepted_peers {
        config.min_accepted_peers = m;
    }
    config.validate()?;
    let run = run_audit(&dataset, &config)?;
    let manifest = RunManifest::new("explain", &dataset, &run);
    let dir = &args.input.out;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = write_explanations(dir, &run.explain(&dataset)?, &manifest.preamble())?;
    print!("{text}");
    Ok(())
}

fn cmd_imbalance(args: ImbalanceArgs) -> Result<()> {
    let (dataset, config) = load(&args.input)?;
    let study = ImbalanceConfig {
        omegas: args.omegas.unwrap_or_else(|| DEFAULT_OMEGAS.to_vec()),
        repeats: args.repeats,
        freeze_delta: args.freeze_delta,
        reselect: !args.reuse_strengths,
        five_way: args.five_way,
        seed: config.audit.seed,
    };
    let (baseline, report) = run_imbalance_study(&dataset, &config, &study)?;
    let mut manifest = RunManifest::new("imbalance", &dataset, &baseline);
    manifest.extra =
        Some(serde_json::to_value(&study).map_err(|e| Error::Serialize(e.to_string()))?);
    let dir = &args.input.out;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report.write_csv(&dir.join("fig6_imbalance.csv"), &manifest.preamble())?;
    let doc = serde_json::json!({ "manifest": manifest, "report": report });
    let path = dir.join("imbalance_report.json");
    let mut text =
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Serialize(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!(
        "baseline omega {:.4}, PUT {:.4}",
        report.baseline_omega, report.baseline_put
    );
    println!("omega    put_mean put_sd   ior_mean ior_sd");
    for l in &report.levels {
        println!(
            "{:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.4}",
            l.target_omega, l.put_mean, l.put_sd, l.ior_mean, l.ior_sd
        );
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = match (&args.preset, &args.spec) {
        (_, Some(path)) => SynthSpec::read(path)?,
        (Some(Preset::Sme), None) => sme_preset(args.seed.unwrap_or(0)),
        (None, None) => unreachable!("clap requires --preset or --spec"),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.n {
        spec.n = n;
    }
    if let Some(b) = args.bias {
        spec.direct_bias = b;
    }
    if args.independent_group {
        spec.zero_propensity_effects();
    }
    let (dataset, truth) = generate(&spec)?;
    write_bundle(&args.out, &dataset, &truth)?;
    println!(
        "{} instances ({} protected, favourable rate {:.4}) written to {}",
        dataset.len(),
        dataset.count(crate::data::Group::Protected),
        dataset.favourable_rate(),
        args.out.display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let report = AuditReport::read(&args.report)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("fig2_scatter.csv");
    write_scatter_csv(&report.instances, &path, &report.manifest.preamble())?;
    print!("{}", report.summary_text());
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["peerfair", "frobnicate"]), 2);
        assert_eq!(run(["peerfair", "audit", "--data", "x.csv"]), 2);
        assert_eq!(run(["peerfair", "--help"]), 0);
    }
}
