use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use evd_harness::check::run_checks;
use evd_harness::metrics::tsv_table;
use evd_harness::run::{run_ablation, run_audit, run_sample, run_sweep, run_train};
use evd_harness::{RunConfig, Variant};

#[derive(Parser)]
#[command(name = "evd", version, about = "Event-gated flow matching experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train the checkpoint a variant samples from.
    Train(Flags),
    /// Sample held-out scenes with one variant and write metrics.
    Sample(Flags),
    /// Evaluate every variant with shared scenes and seeds.
    Ablate(Flags),
    /// Evaluate the sensitivity grid for one variant.
    Sweep(Flags),
    /// Pseudo-target audit of every scene.
    Audit(Flags),
    /// Run the invariant suite; exits nonzero on any failure.
    Check(Flags),
}

#[derive(clap::Args)]
struct Flags {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides paths.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the variant.
    #[arg(long)]
    variant: Option<Variant>,
}

impl Flags {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.out_dir = o.clone();
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        Ok(cfg)
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("EVD_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("EVD_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(verb: Verb) -> anyhow::Result<bool> {
    init_threads()?;
    match verb {
        Verb::Train(f) => {
            let cfg = f.load()?;
            let every = (cfg.train.steps / 20).max(1);
            let s = run_train(&cfg, |r| {
                if r.step % every == 0 {
                    eprintln!(
                        "step {:>5}  total {:.5}  base {:.5}  grad {:.3}",
                        r.step, r.loss.total, r.loss.base, r.grad_norm
                    );
                }
            })?;
            println!(
                "trained {} -> {} (base loss {:.5} -> {:.5})",
                cfg.variant.checkpoint(),
                s.dir.display(),
                s.initial_base,
                s.final_base
            );
        }
        Verb::Sample(f) => {
            let rec = run_sample(&f.load()?)?;
            print!("{}", tsv_table(&[rec]));
        }
        Verb::Ablate(f) => {
            let recs = run_ablation(&f.load()?)?;
            print!("{}", tsv_table(&recs));
        }
        Verb::Sweep(f) => {
            let recs = run_sweep(&f.load()?)?;
            println!("{} grid points written", recs.len());
        }
        Verb::Audit(f) => {
            let recs = run_audit(&f.load()?)?;
            let accepted = recs.iter().filter(|r| r.audit.accepted).count();
            println!("{} clips audited, {} accepted", recs.len(), accepted);
        }
        Verb::Check(f) => {
            let results = run_checks(&f.load()?);
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("{tag}  {:<26} {:>7.2}s  {}", r.name, r.seconds, r.detail);
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
