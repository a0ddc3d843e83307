use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swagppm::accountant::{calibrate_noise, RdpLedger};
use swagppm::data::{self, Split};
use swagppm::eval::{self, SummaryRow};
use swagppm::pipeline::{self, RunConfig, DP_SGD, NON_PRIVATE, SWAG_PPM, SWAG_PPM_RW};
use swagppm::trainer::dp_steps;
use swagppm::Error;

/// Private classifier training via SWAG pseudo-posterior sampling, with a
/// DP-SGD baseline and an imbalanced-classification benchmark.
#[derive(Parser)]
#[command(name = "swagppm", version)]
struct Cli {
    /// JSON run config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted `key=value` config override; may be repeated.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prepare (generate or ingest, subsample, split) the dataset and write it out.
    GenerateData,
    /// Train the non-private model.
    Train,
    /// Run SWAG-PPM and release one posterior draw.
    SwagPpm,
    /// Run SWAG-PPM with the extra reweighting round.
    SwagPpmRw,
    /// Train DP-SGD with noise calibrated to the configured target epsilon.
    DpSgd,
    /// Print the (epsilon, delta) frontier of a DP-SGD configuration as CSV.
    Account {
        #[arg(long)]
        sampling_rate: Option<f64>,
        /// Calibrated from the config's target epsilon when omitted.
        #[arg(long)]
        noise_multiplier: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 0.1, 0.99])]
        deltas: Vec<f64>,
    },
    /// Train and evaluate all four models plus the DP-SGD delta sweep.
    Benchmark,
    /// Re-render the reports of a finished benchmark in `--out`.
    Report,
}

fn resolve_config(cli: &Cli) -> swagppm::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg = cfg.with_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn write_summary(out: &Path, rows: &[SummaryRow]) -> swagppm::Result<()> {
    fs::create_dir_all(out)?;
    eval::write_summary(rows, fs::File::create(out.join("summary.csv"))?)?;
    let md = eval::summary_markdown(rows);
    fs::write(out.join("summary.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn run(cli: &Cli) -> swagppm::Result<()> {
    let cfg = resolve_config(cli)?;
    let out = cfg.out_dir.clone();
    match &cli.command {
        Command::GenerateData => {
            let prepared = pipeline::prepare_data(&cfg).map_err(|e| e.in_phase("data"))?;
            pipeline::write_manifest(&out, &cfg, &prepared)?;
            data::write_csv(&prepared.dataset, &out.join("dataset.csv"))?;
            let mut w = csv::Writer::from_path(out.join("splits.csv"))?;
            w.write_record(["id", "split"])?;
            for (e, s) in prepared.dataset.examples.iter().zip(&prepared.dataset.splits) {
                let tag = match s {
                    Split::Train => "train",
                    Split::Test => "test",
                    Split::None => "none",
                };
                w.write_record([e.id.to_string(), tag.to_string()])?;
            }
            w.flush()?;
            let m = &prepared.manifest;
            println!(
                "{} records, {} classes, gini {:.4}, train {}, test {}, sha256 {}",
                m.records,
                prepared.num_classes(),
                m.gini,
                m.train_records,
                m.test_records,
                m.content_sha256
            );
        }
        Command::Train => {
            let prepared = pipeline::prepare_data(&cfg).map_err(|e| e.in_phase("data"))?;
            pipeline::write_manifest(&out, &cfg, &prepared)?;
            let base = pipeline::base_init(&cfg, &prepared)?;
            let params =
                pipeline::run_nonprivate(&cfg, &prepared, &base, &out).map_err(|e| e.in_phase("training"))?;
            let r = pipeline::evaluate_model(NON_PRIVATE, &prepared, &params, None, "–".into(), 0.0)?;
            write_summary(&out, &[r.summary_row()])?;
        }
        Command::SwagPpm | Command::SwagPpmRw => {
            let reweighted = matches!(cli.command, Command::SwagPpmRw);
            let name = if reweighted { SWAG_PPM_RW } else { SWAG_PPM };
            let prepared = pipeline::prepare_data(&cfg).map_err(|e| e.in_phase("data"))?;
            pipeline::write_manifest(&out, &cfg, &prepared)?;
            let base = pipeline::base_init(&cfg, &prepared)?;
            let o = pipeline::run_swag_ppm(&cfg, &prepared, &base, reweighted, &out)?;
            let r = pipeline::evaluate_model(
                name,
                &prepared,
                &o.released,
                Some(o.privacy.epsilon),
                pipeline::SWAG_PPM_DELTA.into(),
                0.0,
            )?;
            write_summary(&out, &[r.summary_row()])?;
        }
        Command::DpSgd => {
            let prepared = pipeline::prepare_data(&cfg).map_err(|e| e.in_phase("data"))?;
            pipeline::write_manifest(&out, &cfg, &prepared)?;
            let base = pipeline::base_init(&cfg, &prepared)?;
            let (params, privacy) = pipeline::run_dp_sgd(&cfg, &prepared, &base, cfg.dp_sgd.delta, &out)?;
            let mut r = pipeline::evaluate_model(DP_SGD, &prepared, &params, None, format!("{}", cfg.dp_sgd.delta), 0.0)?;
            r.epsilon = Some(privacy.epsilon);
            write_summary(&out, &[r.summary_row()])?;
        }
        Command::Account {
            sampling_rate,
            noise_multiplier,
            steps,
            deltas,
        } => {
            let d = &cfg.dp_sgd;
            let (q, t) = match (sampling_rate, steps) {
                (Some(q), Some(t)) => (*q, *t),
                _ => {
                    let n = pipeline::prepare_data(&cfg).map_err(|e| e.in_phase("data"))?.train.len();
                    (
                        sampling_rate.unwrap_or(d.batch_size as f64 / n as f64),
                        steps.unwrap_or(dp_steps(n, d.batch_size, d.epochs)),
                    )
                }
            };
            let sigma = match noise_multiplier {
                Some(s) => *s,
                None => calibrate_noise(d.target_epsilon, d.delta, q, t)?,
            };
            let ledger = RdpLedger::new(q, sigma)?.compose(t)?;
            let mut text = String::from("sampling_rate,noise_multiplier,steps,delta,epsilon,order\n");
            for delta in deltas {
                let c = ledger.to_dp(*delta)?;
                text.push_str(&format!("{q},{sigma},{t},{delta},{},{}\n", c.budget.epsilon, c.order));
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("account.csv"), &text)?;
            fs::write(out.join("ledger.json"), serde_json::to_vec_pretty(&ledger)?)?;
            std::io::stdout().write_all(text.as_bytes())?;
        }
        Command::Benchmark => {
            let result = pipeline::run_benchmark(&cfg)?;
            print!("{}", pipeline::render_markdown(&result));
            if result.models.iter().any(|m| m.error.is_some()) {
                return Err(Error::in_phase(
                    Error::InvalidArgument("one or more models failed; see report.md".into()),
                    "benchmark",
                ));
            }
        }
        Command::Report => {
            let result = pipeline::load_benchmark(&out)?;
            pipeline::write_benchmark_reports(&result, &out)?;
            print!("{}", pipeline::render_markdown(&result));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
