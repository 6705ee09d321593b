use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use csgmcmc::experiment::{
    eval_trace, generate_dataset, run_experiment, variance_sweep, write_metrics_csv,
    write_sweep_csv, BuiltinDataset, DatasetSpec, ExperimentConfig,
};
use csgmcmc::sampler::StepSchedule;

#[derive(Parser)]
#[command(name = "csgmcmc", version, about = "Clustering-enhanced SG-MCMC for hidden Markov models")]
struct Cli {
    /// Cap on worker threads used for metric evaluation and Monte Carlo reps.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a builtin dataset and write observations, latent states and parameters.
    Generate {
        /// bd, id, bern or rare2.
        #[arg(long)]
        dataset: String,
        /// Series length; the dataset default when omitted.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment from a JSON config.
    Run(RunArgs),
    /// Gradient variance of both estimators over an (S, L) grid.
    VarianceSweep {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated total subsample sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        s: Vec<usize>,
        /// Comma-separated subchain lengths.
        #[arg(long, value_delimiter = ',', required = true)]
        l: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from a finished run directory.
    EvalTrace {
        #[arg(long)]
        run_dir: PathBuf,
        /// Output CSV; defaults to metrics_recomputed.csv in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the builtin dataset length or the CSV window length.
    #[arg(long)]
    t: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_iter: Option<usize>,
    /// Overrides the constant step scale `a`.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    no_noise: bool,
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(new_t) = args.t {
        match &mut cfg.dataset {
            DatasetSpec::Builtin { t, .. } => *t = Some(new_t),
            DatasetSpec::Csv { max_t, .. } => *max_t = Some(new_t),
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Generate { dataset, t, seed, out } => {
            let ds = BuiltinDataset::parse(&dataset)?;
            let files = generate_dataset(ds, t.unwrap_or(ds.default_len()), seed, &out)?;
            println!("{}", files.observations.display());
            println!("{}", files.latent.display());
            println!("{}", files.params.display());
        }
        Command::Run(args) => {
            let mut cfg = load(&args.common)?;
            if let Some(out) = args.out {
                cfg.output = out;
            }
            if let Some(n) = args.n_iter {
                cfg.sampler.n_iter = n;
            }
            if let Some(a) = args.step {
                cfg.sampler.schedule = StepSchedule { a, ..cfg.sampler.schedule };
            }
            if args.no_noise {
                cfg.sampler.inject_noise = false;
            }
            cfg.validate()?;
            let outcome = run_experiment(&cfg)?;
            if let Some(msg) = &outcome.trace.abort {
                eprintln!("warning: sampler stopped early: {msg}");
            }
            let last = outcome.metrics.last().map_or(0, |r| r.iteration);
            for r in outcome.metrics.iter().filter(|r| r.iteration == last) {
                println!("{} @ {}: {}", r.metric, r.iteration, r.value);
            }
            println!("outputs in {}", outcome.dir.display());
        }
        Command::VarianceSweep { common, s, l, reps, out } => {
            let cfg = load(&common)?;
            let rows = variance_sweep(&cfg, &s, &l, reps)?;
            write_sweep_csv(&out, &rows)?;
            for r in rows.iter().filter(|r| r.component.is_none()) {
                println!("{:>10} S={:<4} L={:<4} mean variance {}", r.estimator, r.s, r.l, r.variance);
            }
        }
        Command::EvalTrace { run_dir, out } => {
            let rows = eval_trace(&run_dir)?;
            let out = out.unwrap_or_else(|| run_dir.join("metrics_recomputed.csv"));
            write_metrics_csv(&out, &rows)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
