use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use plab::harness::{
    BaselineArtifacts, ExperimentReport, Lab, NonDissonantArtifacts, RunConfig, Stage,
};
use plab::Error;

#[derive(Parser)]
#[command(
    name = "plab",
    version,
    about = "Continual-learning experiments on a small from-scratch transformer"
)]
struct Cli {
    /// Run configuration, TOML or JSON (by extension). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for parallel arms and folds (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the fact corpus and write it with the resolved config.
    GenCorpus,
    /// Train the baseline model and accumulate its neuron profile.
    Baseline,
    /// Non-dissonant update round, every sweep arm, all folds.
    Update,
    /// Dissonant update round from the non-dissonant checkpoints.
    Dissonant,
    /// Both update rounds back to back, plus a combined plot table.
    Sweep,
    /// Full fine-tuning on counterfact sets of increasing size.
    Scale,
    /// Donor-profile neuron selection on fresh models.
    Lottery,
    /// Novel / known / dissonant classification grid.
    Classify,
    /// Stubborn-neuron counts per block and matrix kind.
    Histogram,
    /// Print a stage report as a table.
    Report {
        /// Stage directory name, or a path to a report.json.
        stage: String,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn print_report(report: &ExperimentReport) {
    println!("stage: {}", report.stage.dir_name());
    println!(
        "{:<22} {:>7} {:>7} {:>7} {:>7} {:>8}",
        "arm", "old", "new", "gen", "hmean", "epochs"
    );
    for a in &report.arms {
        println!(
            "{:<22} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8.1}",
            a.arm, a.mean.old, a.mean.new, a.mean.gen, a.harmonic_mean, a.mean.epochs
        );
    }
    for note in &report.notes {
        println!("note: {note}");
    }
}

fn load_report(out_dir: &Path, stage: &str) -> Result<ExperimentReport, Error> {
    let direct = PathBuf::from(stage);
    let path = if direct.is_file() {
        direct
    } else {
        out_dir.join(stage).join("report.json")
    };
    ExperimentReport::load(&path)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = resolve_config(cli)?;
    let out = config.out_dir.clone();
    if let Command::Report { stage } = &cli.command {
        print_report(&load_report(&out, stage)?);
        return Ok(());
    }
    let hash = config.hash();
    let lab = Lab::new(config)?.with_output(&out)?;
    let report = match &cli.command {
        Command::GenCorpus => {
            println!("wrote {}", out.join("corpus.json").display());
            return Ok(());
        }
        Command::Baseline => lab.run_baseline()?.report,
        Command::Update => {
            let base = BaselineArtifacts::load(&out, &hash)?;
            lab.run_nondissonant(&base)?.report
        }
        Command::Dissonant => {
            let base = BaselineArtifacts::load(&out, &hash)?;
            let nd = NonDissonantArtifacts::load(&out, &hash)?;
            lab.run_dissonant(&base, &nd)?
        }
        Command::Sweep => {
            let base = BaselineArtifacts::load(&out, &hash)?;
            let (nd, dis) = lab.run_sweep(&base)?;
            print_report(&nd.report);
            dis
        }
        Command::Scale => {
            let nd = NonDissonantArtifacts::load(&out, &hash)?;
            lab.run_contradiction_scale(&nd)?
        }
        Command::Lottery => lab.run_lottery()?,
        Command::Classify => {
            let base = BaselineArtifacts::load(&out, &hash)?;
            lab.run_classification(&base)?
        }
        Command::Histogram => {
            let base = BaselineArtifacts::load(&out, &hash)?;
            lab.run_stubborn_histogram(&base.profile)?
        }
        Command::Report { .. } => unreachable!("handled above"),
    };
    print_report(&report);
    if report.stage == Stage::Classification {
        println!("{}", serde_json::to_string_pretty(&report.details)?);
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidConfig(_) => 2,
        Error::NonConvergence { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
