use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use chansel::autodiff::GradCheckOptions;
use chansel::data::{io, split, synth_envelope, synth_motor, Labels, SynthConfig};
use chansel::harness::experiment::{fixed_ranking, prepare, run_once, run_seed};
use chansel::harness::gradcheck::selector_stack_grad_check;
use chansel::harness::{run_experiment, summary, ExperimentConfig, ExperimentReport, Method, Preset};
use chansel::par::Exec;
use chansel::rng;

#[derive(Parser)]
#[command(name = "chansel", version, about = "Learnable channel selection experiments")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Motor,
    Envelope,
}

#[derive(Subcommand)]
enum Command {
    /// Run the multi-run experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: `out`).
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset (EDS1, or CSV if the path ends in .csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "motor")]
        preset: PresetArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Select K channels of a dataset with one method.
    Select {
        #[arg(long)]
        method: String,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        data: PathBuf,
        /// Optional config for training settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of the selector + MSFBCNN gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the summary of a finished run.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let report = run_experiment(&cfg, &out, exec)?;
            print!("{}", summary(&report));
            println!("artifacts in {}", out.display());
        }
        Command::Synth {
            out,
            preset,
            seed,
            snr_db,
            samples,
        } => {
            let mut cfg = match preset {
                PresetArg::Motor => SynthConfig::motor_preset(),
                PresetArg::Envelope => SynthConfig::envelope_preset(),
            };
            cfg.seed = seed;
            cfg.snr_db = snr_db.unwrap_or(cfg.snr_db);
            cfg.samples = samples.unwrap_or(cfg.samples);
            let mut r = rng::seeded(seed);
            let ds = match preset {
                PresetArg::Motor => synth_motor(&cfg, &mut r)?,
                PresetArg::Envelope => synth_envelope(&cfg, &mut r)?,
            };
            let ds = split(&ds, &[0.8, 0.1, 0.1], &mut r)?;
            if out.extension().is_some_and(|e| e == "csv") {
                io::export_csv(&ds, &out)?;
            } else {
                io::save(&out, &ds)?;
            }
            println!(
                "wrote {} samples x {} channels x {} times to {}; informative channels {:?}",
                ds.n_samples,
                ds.n_channels,
                ds.n_times,
                out.display(),
                ds.truth_channels
            );
        }
        Command::Select {
            method,
            k,
            data,
            config,
        } => {
            let method: Method = method.parse().map_err(anyhow::Error::msg)?;
            let ds = io::load(&data).with_context(|| format!("reading {}", data.display()))?;
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::preset(match ds.labels {
                    Labels::Class { .. } => Preset::Motor,
                    Labels::Envelope(_) => Preset::Envelope,
                }),
            };
            cfg.k = vec![k];
            let ds = split(&ds, &cfg.split, &mut rng::seeded(cfg.synth.seed))?;
            let prep = prepare(&cfg, ds, exec)?;
            let selected = if method.is_learned() {
                run_once(&cfg, &prep, method, k, run_seed(&cfg, 0), None)?.0
            } else {
                fixed_ranking(method, &prep, k, exec)?.top(k).to_vec()
            };
            let list: Vec<String> = selected.iter().map(ToString::to_string).collect();
            println!("{}", list.join(","));
        }
        Command::Gradcheck { seed } => {
            let report = selector_stack_grad_check(&GradCheckOptions {
                seed,
                ..GradCheckOptions::default()
            })?;
            println!(
                "checked {} coordinates, max relative error {:.3e} (tolerance {:.0e}){}",
                report.coords_checked,
                report.max_rel_error,
                report.tolerance,
                report
                    .worst
                    .as_ref()
                    .map_or(String::new(), |(name, i)| format!(", worst at {name}[{i}]"))
            );
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { input } => {
            if !input.join("report.json").exists() {
                bail!("no report.json in {}", input.display());
            }
            print!("{}", summary(&ExperimentReport::load(&input)?));
        }
    }
    Ok(ExitCode::SUCCESS)
}
