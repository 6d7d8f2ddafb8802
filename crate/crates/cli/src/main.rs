//! persid: drive perturbation experiments from scenario files.
//!
//! Subcommands mirror the pipeline prefix so a scenario can be run end to
//! end or stopped after any stage: `validate`, `simulate`, `fit`,
//! `informativeness`, `pipeline`. Exit codes: 0 success, 2 configuration
//! problem, 3 runtime failure (stage-tagged where one applies).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use persid_core::domain::Outputs;
use persid_core::policies::PerturbationPolicy;
use persid_core::error::{Error, Result};
use persid_core::informativeness::{discriminatory_power, DiscriminationReport};
use persid_core::linalg;
use persid_core::runner::{self, collect_dataset, run_pipeline, PipelineReport};
use persid_core::scenario::Scenario;
use persid_core::seeds;

#[derive(Parser)]
#[command(
    name = "persid",
    version,
    about = "Behavioral system identification by perturbation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a scenario file and print its content digest.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Collect the scenario's dataset over every policy and write the records.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Resolve the split, collect the training set, and fit the model class.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score the scenario's candidate models across its policies.
    Informativeness {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        out: FmtOutArgs,
    },
    /// Run the full pipeline and write the report.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        out: FmtOutArgs,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario file (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the scenario's master seed.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Worker threads; the PERSID_THREADS variable applies when absent.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Suppress the summary line on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct OutArgs {
    /// Destination path for the JSON output.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Overwrite an existing destination.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FmtOutArgs {
    /// Destination path for the report.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// json writes --out; csv writes the per-policy table to --out instead;
    /// both writes --out plus a sibling .csv.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Overwrite existing destinations.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Both,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}

/// Config problems (anywhere in a stage chain) are usage errors; the rest
/// are runtime failures.
fn classify(e: &Error) -> u8 {
    let mut root = e;
    while let Error::Stage { source, .. } = root {
        root = source;
    }
    match root {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let common = match &cli.cmd {
        Cmd::Validate { common }
        | Cmd::Simulate { common, .. }
        | Cmd::Fit { common, .. }
        | Cmd::Informativeness { common, .. }
        | Cmd::Pipeline { common, .. } => common,
    };
    init_threads(common.threads)?;

    match &cli.cmd {
        Cmd::Validate { common } => cmd_validate(common),
        Cmd::Simulate { common, out } => cmd_simulate(common, out),
        Cmd::Fit { common, out } => cmd_fit(common, out),
        Cmd::Informativeness { common, out } => cmd_informativeness(common, out),
        Cmd::Pipeline { common, out } => cmd_pipeline(common, out),
    }
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("PERSID_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Error::Config(format!("PERSID_THREADS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    match n {
        None => Ok(()),
        Some(0) => Err(Error::Config("thread count must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}"))),
    }
}

fn load_scenario(common: &CommonArgs) -> Result<Scenario> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| {
        Error::Config(format!(
            "cannot read scenario {}: {e}",
            common.config.display()
        ))
    })?;
    let mut s: Scenario = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("scenario parse: {e}")))?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn check_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "refusing to overwrite {}; pass --force",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn json_pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("output serialization: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Floats rendered exactly as in the JSON report, so the two formats agree.
fn num(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn select_by_id(
    policies: &[PerturbationPolicy],
    ids: &[String],
) -> Result<Vec<PerturbationPolicy>> {
    ids.iter()
        .map(|id| {
            policies
                .iter()
                .find(|p| &p.id == id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("policy {id:?} is not defined")))
        })
        .collect()
}

fn cmd_validate(common: &CommonArgs) -> Result<()> {
    let s = load_scenario(common)?;
    s.validate()?;
    if !common.quiet {
        println!("ok digest={}", s.digest()?);
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct RecordOut {
    policy_id: String,
    sequence_seed: u64,
    draw_seed: u64,
    inputs: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outputs: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    symbols: Option<Vec<usize>>,
}

#[derive(serde::Serialize)]
struct DatasetOut {
    records: Vec<RecordOut>,
    groups: Vec<Vec<usize>>,
}

fn cmd_simulate(common: &CommonArgs, out: &OutArgs) -> Result<()> {
    let s = load_scenario(common)?;
    s.validate()?;
    check_writable(&out.out, out.force)?;
    let data = collect_dataset(
        &s.truth,
        &s.environment,
        &s.policies,
        s.collection.reps_per_policy,
        &s.domain,
        seeds::derive_seed(s.seed, "collect", 0),
    )?;
    let records: Vec<RecordOut> = data
        .records
        .iter()
        .map(|r| {
            let (outputs, symbols) = match &r.outputs {
                Outputs::Continuous(m) => (Some(linalg::to_rows(m)), None),
                Outputs::Discrete(sym) => (None, Some(sym.clone())),
            };
            RecordOut {
                policy_id: r.inputs.policy_id.clone(),
                sequence_seed: r.inputs.seed,
                draw_seed: r.seed,
                inputs: linalg::to_rows(&r.inputs.values),
                outputs,
                symbols,
            }
        })
        .collect();
    let rendered = DatasetOut {
        records,
        groups: data.groups.clone(),
    };
    write_text(&out.out, &json_pretty(&rendered)?)?;
    if !common.quiet {
        println!(
            "records={} groups={} out={}",
            data.records.len(),
            data.groups.len(),
            out.out.display()
        );
    }
    Ok(())
}

fn cmd_fit(common: &CommonArgs, out: &OutArgs) -> Result<()> {
    let s = load_scenario(common)?;
    s.validate()?;
    check_writable(&out.out, out.force)?;
    let split = runner::resolve_split(&s, seeds::derive_seed(s.seed, "split", 0))?;
    let train = select_by_id(&s.policies, &split.train_policy_ids)?;
    let data = collect_dataset(
        &s.truth,
        &s.environment,
        &train,
        s.collection.reps_per_policy,
        &s.domain,
        seeds::derive_seed(s.seed, "collect", 0),
    )?;
    let report = runner::fit_multi_start(
        &s.model_class,
        &data,
        &s.loss,
        &s.fit,
        s.fit_starts,
        seeds::derive_seed(s.seed, "init", 0),
    )?;
    write_text(&out.out, &json_pretty(&report)?)?;
    if !common.quiet {
        println!(
            "final_loss={} iterations={} converged={}",
            num(report.final_loss),
            report.iterations,
            report.converged
        );
    }
    Ok(())
}

fn discrimination_csv(report: &DiscriminationReport, policy_ids: &[String]) -> String {
    let mut text = String::from("model_a,model_b,policy_id,distance\n");
    for row in &report.full_matrix {
        for (j, v) in row.per_policy.iter().enumerate() {
            text.push_str(&format!(
                "{},{},{},{}\n",
                row.pair.0,
                row.pair.1,
                csv_field(&policy_ids[j]),
                num(*v)
            ));
        }
    }
    text
}

fn cmd_informativeness(common: &CommonArgs, out: &FmtOutArgs) -> Result<()> {
    let s = load_scenario(common)?;
    s.validate()?;
    let spec = s.informativeness.as_ref().ok_or_else(|| {
        Error::Config("scenario has no informativeness section".into())
    })?;
    if spec.models.len() < 2 {
        return Err(Error::Config(
            "standalone informativeness needs at least two models listed in \
             informativeness.models; only the pipeline can add its fitted model"
                .into(),
        ));
    }
    let pols = if spec.policy_ids.is_empty() {
        s.policies.clone()
    } else {
        select_by_id(&s.policies, &spec.policy_ids)?
    };
    let report = discriminatory_power(
        &spec.models,
        &pols,
        &s.domain,
        seeds::derive_seed(s.seed, "informativeness", 0),
    )?;
    let ids: Vec<String> = pols.iter().map(|p| p.id.clone()).collect();
    write_formats(out, &json_pretty(&report)?, || discrimination_csv(&report, &ids))?;
    if !common.quiet {
        println!(
            "delta={} informative={} witness={}",
            num(report.delta_value),
            report.informative,
            report.witness_policy
        );
    }
    Ok(())
}

fn equivalence_csv(report: &PipelineReport) -> String {
    let eq = &report.equivalence_report;
    let mut text = String::from("policy_id,value,kind,delta,pass\n");
    for row in &eq.per_policy {
        let kind = serde_json::to_value(row.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&row.policy_id),
            num(row.value),
            kind,
            num(eq.delta),
            eq.pass
        ));
    }
    text
}

/// Writes the JSON and/or CSV rendering per the format flag, refusing to
/// clobber existing files unless forced.
fn write_formats(
    out: &FmtOutArgs,
    json: &str,
    csv: impl FnOnce() -> String,
) -> Result<()> {
    match out.format {
        Format::Json => {
            check_writable(&out.out, out.force)?;
            write_text(&out.out, json)
        }
        Format::Csv => {
            check_writable(&out.out, out.force)?;
            write_text(&out.out, &csv())
        }
        Format::Both => {
            let sibling = out.out.with_extension("csv");
            if sibling == out.out {
                return Err(Error::Config(format!(
                    "--format both needs a non-.csv --out, got {}",
                    out.out.display()
                )));
            }
            check_writable(&out.out, out.force)?;
            check_writable(&sibling, out.force)?;
            write_text(&out.out, json)?;
            write_text(&sibling, &csv())
        }
    }
}

fn cmd_pipeline(common: &CommonArgs, out: &FmtOutArgs) -> Result<()> {
    let s = load_scenario(common)?;
    // Fail on clobber before the long run, then again cheaply at write time.
    match out.format {
        Format::Json | Format::Csv => check_writable(&out.out, out.force)?,
        Format::Both => {
            check_writable(&out.out, out.force)?;
            check_writable(&out.out.with_extension("csv"), out.force)?;
        }
    }
    let (report, timings) = run_pipeline(&s)?;
    write_formats(out, &json_pretty(&report)?, || equivalence_csv(&report))?;
    if !common.quiet {
        println!(
            "pass={} sup={} delta={} digest={} total_s={:.1}",
            report.equivalence_report.pass,
            num(report.equivalence_report.sup_value),
            num(report.equivalence_report.delta),
            report.provenance.config_digest,
            timings.total_seconds
        );
    }
    Ok(())
}
