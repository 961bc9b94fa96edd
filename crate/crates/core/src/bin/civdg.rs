use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use civdg::config::ExperimentConfig;
use civdg::experiment::{self, SweepReport};
use civdg::scm::OodMode;
use civdg::{io, Error, Result};

#[derive(Parser)]
#[command(
    name = "civdg",
    version,
    about = "Conditional-instrument domain generalization experiments"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Sample the train, source_val, id_test and ood_test splits.
    Generate(Common),
    /// Fit one model and evaluate it on every split.
    Train(Common),
    /// Run every ablation over the configured seeds.
    Ablation(Common),
    /// Sweep the GMM weight over `train.lambda_grid`.
    Sweep(Common),
    /// Rebuild tables from stored run artifacts.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Seed for both the simulator and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// independent, reversed or held_out_site=K
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    dump_representations: bool,
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            other => other,
        })?;
        if let Some(s) = self.seed {
            cfg.scm.seed = s;
            cfg.train.seed = s;
        }
        if let Some(out) = &self.out {
            cfg.run.out_dir = out.clone();
        }
        if let Some(m) = &self.mode {
            cfg.data.ood_mode = OodMode::parse(m)?;
        }
        if let Some(w) = self.workers {
            cfg.run.workers = w.max(1);
        }
        cfg.run.dump_representations |= self.dump_representations;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(verb: Verb) -> Result<()> {
    match verb {
        Verb::Generate(c) => {
            let cfg = c.load()?;
            let out = c
                .out
                .clone()
                .or_else(|| cfg.data.dir.clone())
                .unwrap_or_else(|| cfg.run.out_dir.clone());
            for path in experiment::generate(&cfg, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Verb::Train(c) => {
            let cfg = c.load()?;
            let outcome = experiment::train(&cfg)?;
            println!(
                "selected step {} of {} (validation {:.4}); artifacts in {}",
                outcome.fit.best.step,
                outcome.fit.steps_run,
                outcome.fit.best.val_metric,
                cfg.run.out_dir.display()
            );
            for (role, report) in &outcome.reports {
                println!("\n== {} ==\n{report}", role.as_str());
            }
        }
        Verb::Ablation(c) => {
            let cfg = c.load()?;
            let (_, table) = experiment::ablation_suite(&cfg)?;
            print!("{table}");
        }
        Verb::Sweep(c) => {
            let cfg = c.load()?;
            print!("{}", experiment::sweep(&cfg)?);
        }
        Verb::Report(c) => {
            let cfg = c.load()?;
            let out = &cfg.run.out_dir;
            let sweep = out.join("sweep.tsv");
            if out.join(experiment::RUNS_FILE).exists() || !sweep.exists() {
                print!("{}", experiment::report(out)?);
            } else {
                print!("{}", SweepReport::parse(&io::read_text(&sweep)?, &sweep)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
