use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gmr_core::checkpoint;
use gmr_core::config::{ExperimentConfig, ModelKind};
use gmr_core::dataio::SltSpec;
use gmr_core::gmm::SampleNoise;
use gmr_core::harness::{self, load_data};
use gmr_core::replay::{run_gmr, RunLabel};

/// Gaussian Mixture Replay experiments.
///
/// Settings are read from `--config`, then from `GMR_<KEY>` environment
/// variables, then from `--set` and the dedicated flags.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; repetition r uses seed + r.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Number of repetitions.
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration.
    Train,
    /// Run the configuration on every benchmark SLT, then summarize.
    Suite,
    /// Write a class-conditional sample grid from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated class ids.
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        classes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        rows: usize,
        #[arg(long, default_value_t = 5)]
        cols: usize,
        /// Emit centroids instead of random draws.
        #[arg(long)]
        zero_noise: bool,
        /// Output PGM path (default: <out>/samples.pgm).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train GMR on the configured SLT and report detected sub-task boundaries.
    Boundaries,
    /// Build summary tables from <out>/metrics.csv.
    Summarize,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.reps {
        cfg.repetitions = r;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Train => {
            let data = load_data(&cfg)?;
            for r in harness::run_config(&cfg, &data, &cli.out)? {
                println!("{} seed {} max accuracy {:.2}%", r.run_id, r.seed, r.max_accuracy);
            }
        }
        Command::Suite => {
            let data = load_data(&cfg)?;
            harness::run_suite(&cfg, &data, &cli.out)?;
            print_summary(&harness::emit_summary(&cli.out)?);
        }
        Command::Sample { checkpoint: path, classes, rows, cols, zero_noise, output } => {
            let model = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let noise = if *zero_noise { SampleNoise::Zero } else { SampleNoise::Gaussian };
            let grid = harness::sample_grid(&model, classes, *rows, *cols, cfg.confidence, cfg.control, noise, cfg.seed)?;
            std::fs::create_dir_all(&cli.out)?;
            let target = output.clone().unwrap_or_else(|| cli.out.join("samples.pgm"));
            harness::emit_sample_grid(&grid, &target, &cfg.hash())?;
            println!("wrote {}", target.display());
            println!("predicted classes: {:?}", grid.predicted);
            println!("in requested set: {:.1}%", 100.0 * grid.in_set_fraction(classes));
        }
        Command::Boundaries => {
            if cfg.model != ModelKind::Gmr {
                bail!("boundary detection needs model = gmr");
            }
            let data = load_data(&cfg)?;
            let spec = SltSpec::named(&cfg.slt)?;
            let settings = cfg.gmr_settings();
            std::fs::create_dir_all(&cli.out)?;
            for rep in 0..cfg.repetitions {
                let label = RunLabel {
                    run_id: format!("{}-boundaries-r{rep}", spec.name),
                    slt: spec.name.clone(),
                    seed: cfg.seed.wrapping_add(rep as u64),
                };
                let tasks = gmr_core::dataio::build_slt(&data.train, &data.test, &spec)?;
                let (_, output) = run_gmr(tasks, &data.test, data.dim(), data.classes(), &settings, &label, &mut |_| Ok(()))?;
                let path = cli.out.join(format!("{}.trace.csv", label.run_id));
                let mut text = String::from("batch,sub_task,epoch,inlier_fraction,boundary\n");
                for p in &output.trace {
                    text.push_str(&format!("{},{},{},{:.6},{}\n", p.batch, p.sub_task, p.epoch, p.inlier_fraction, u8::from(p.boundary)));
                }
                std::fs::write(&path, text)?;
                let tol = 2 * settings.detector.window;
                let matched = harness::transitions_matched(&output.transitions, &output.boundaries, tol);
                println!("{}: transitions {:?}", label.run_id, output.transitions);
                println!("{}: detected    {:?}", label.run_id, output.boundaries);
                println!("{}: matched     {:?} (trace in {})", label.run_id, matched, path.display());
            }
        }
        Command::Summarize => print_summary(&harness::emit_summary(&cli.out)?),
    }
    Ok(())
}

fn print_summary(rows: &[harness::SummaryRow]) {
    println!("{}", harness::SUMMARY_HEADER);
    for r in rows {
        println!("{}", r.to_csv());
    }
}
