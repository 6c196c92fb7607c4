use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtair::bench::{run_bench, Kernel, DEFAULT_CHANNELS, DEFAULT_SIDES, MIN_REPS};
use mtair::degrade::{synthesize, Task};
use mtair::grad::{gradcheck, FdConfig, GradBlock};
use mtair::metrics::{psnr, ssim};
use mtair::network::{self, census};
use mtair::suite::{run_suite, Fault, SuiteOptions};
use mtair::weights::{DType, WeightStore};
use mtair_cli::exit::EXIT_CODE_HELP;
use mtair_cli::image_io::{read_png, write_png};
use mtair_cli::{load_config, write_json, CliError};
use serde_json::json;

/// Growth-exponent bounds applied by `bench --enforce`.
const LINEAR_MAX_EXPONENT: f64 = 1.35;
const QUADRATIC_MIN_EXPONENT: f64 = 1.8;

#[derive(Parser)]
#[command(name = "mtair", version, about = "All-in-one image restoration: inference, verification and benchmarks")]
#[command(after_help = EXIT_CODE_HELP)]
struct Cli {
    /// Worker threads for the kernels; 1 makes every command bit-reproducible.
    #[arg(long, global = true, env = "MTAIR_THREADS")]
    threads: Option<usize>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Also write a machine-readable JSON report here.
    #[arg(long, global = true)]
    report: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// `paper`, `tiny`, or a JSON network configuration file.
    #[arg(long, default_value = "paper")]
    config: String,
}

#[derive(Subcommand)]
enum Command {
    /// Restore a PNG image; prints PSNR and SSIM when a reference is given.
    Restore {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Add seeded Gaussian noise to a clean PNG.
    Synthesize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// denoise15, denoise25 or denoise50. Rain and haze have no synthesis rule.
        #[arg(long, value_parser = parse_task)]
        task: Task,
    },
    /// Run the oracle-equivalence and invariant suite.
    Check {
        /// Include central-difference gradient checks of the main blocks.
        #[arg(long)]
        gradients: bool,
        /// Test hook: corrupt part of the computation to show the suite notices.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Time the linear-cost mixers against naive spatial attention.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIDES)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_CHANNELS)]
        channels: usize,
        #[arg(long, default_value_t = MIN_REPS)]
        reps: usize,
        /// Fail unless the mixers grow with exponent <= 1.35 and the baseline >= 1.8.
        #[arg(long)]
        enforce: bool,
    },
    /// Compare a block's gradients with central finite differences (64-bit).
    Gradcheck {
        #[arg(long, value_parser = parse_block)]
        block: GradBlock,
        /// Input side length; the input is 1×size×size×channels.
        #[arg(long, default_value_t = 4)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Write freshly initialized weights for a configuration.
    Init {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DTypeArg,
        /// Zero every weight except attention temperatures. With a
        /// `global_residual` configuration the network is then the identity.
        #[arg(long)]
        identity: bool,
    },
    /// Print the parameter census of a configuration.
    Params {
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    MisalignedMerge,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: mtair::Error| e.to_string())
}

fn parse_block(s: &str) -> Result<GradBlock, String> {
    s.parse().map_err(|e: mtair::Error| e.to_string())
}

fn finite_or_inf(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

fn restore(
    cli: &Cli,
    config: &str,
    weights: &PathBuf,
    input: &PathBuf,
    output: &PathBuf,
    reference: Option<&PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let store = WeightStore::load(weights)?;
    let x = read_png(input)?;
    let y = network::forward(&x, &store, &cfg)?;
    write_png(output, &y)?;
    let s = y.shape();
    println!("restored {}×{} image written to {}", s.h(), s.w(), output.display());
    let mut report = json!({ "input": input, "output": output, "height": s.h(), "width": s.w() });
    if let Some(r) = reference {
        let reference = read_png(r)?;
        // score the image as written, after 8-bit rounding
        let written = read_png(output)?;
        let (p, q) = (psnr(&written, &reference, 1.0)?, ssim(&written, &reference, 1.0)?);
        println!("PSNR {p:.4} dB, SSIM {q:.6}");
        report["reference"] = json!(r);
        report["psnr_db"] = finite_or_inf(p);
        report["ssim"] = json!(q);
    }
    if let Some(path) = &cli.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Restore {
            config,
            weights,
            input,
            output,
            reference,
        } => restore(cli, &config.config, weights, input, output, reference.as_ref()),
        Command::Synthesize { input, output, task } => {
            let clean = read_png(input)?;
            let noisy = synthesize(&clean, *task, cli.seed)?;
            write_png(output, &noisy)?;
            println!("{task} with seed {} written to {}", cli.seed, output.display());
            Ok(())
        }
        Command::Check { gradients, inject_fault } => {
            let opt = SuiteOptions {
                seed: cli.seed,
                gradients: *gradients,
                fault: inject_fault.map(|FaultArg::MisalignedMerge| Fault::MisalignedMerge),
                ..SuiteOptions::default()
            };
            let report = run_suite(&opt)?;
            print!("{}", report.to_table());
            if let Some(path) = &cli.report {
                write_json(path, &report)?;
            }
            if report.passed {
                Ok(())
            } else {
                let names: Vec<_> = report.failures().map(|c| c.property.as_str()).collect();
                Err(CliError::CheckFailed(names.join(", ")))
            }
        }
        Command::Bench {
            sizes,
            channels,
            reps,
            enforce,
        } => {
            let report = run_bench(sizes, *channels, *reps, cli.seed)?;
            print!("{}", report.to_table());
            if let Some(path) = &cli.report {
                write_json(path, &report)?;
            }
            if *enforce {
                let bad: Vec<String> = report
                    .exponents
                    .iter()
                    .filter(|(k, &e)| match k {
                        Kernel::SpatialAttention => !(e >= QUADRATIC_MIN_EXPONENT),
                        _ => !(e <= LINEAR_MAX_EXPONENT),
                    })
                    .map(|(k, e)| format!("{} exponent {e:.3}", k.name()))
                    .collect();
                if !bad.is_empty() {
                    return Err(CliError::CheckFailed(bad.join(", ")));
                }
            }
            Ok(())
        }
        Command::Gradcheck {
            block,
            size,
            channels,
            step,
            tol,
        } => {
            let cfg = FdConfig {
                step: *step,
                tol: *tol,
                ..FdConfig::default()
            };
            let report = gradcheck(*block, *size, *channels, cli.seed, cfg)?;
            println!("{block} on 1×{size}×{size}×{channels}");
            print!("{}", report.to_table());
            if let Some(path) = &cli.report {
                write_json(path, &report)?;
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::CheckFailed(format!(
                    "{block}: max rel err {:.3e} exceeds {tol:e}",
                    report.max_rel_err()
                )))
            }
        }
        Command::Init {
            config,
            output,
            dtype,
            identity,
        } => {
            let cfg = load_config(&config.config)?;
            let dtype = match dtype {
                DTypeArg::F32 => DType::F32,
                DTypeArg::F64 => DType::F64,
            };
            let mut store = network::build(&cfg, cli.seed, dtype)?;
            if *identity {
                store.map_prefix("", |name, v| if name.ends_with("temperature") { v } else { 0.0 });
            }
            store.save(output)?;
            println!("{} parameters in {} tensors written to {}", store.total_params(), store.len(), output.display());
            Ok(())
        }
        Command::Params { config } => {
            let cfg = load_config(&config.config)?;
            let c = census(&cfg)?;
            for (level, n) in &c.per_level {
                println!("{level:<10} {n:>12}");
            }
            for (group, n) in &c.groups {
                println!("  {group:<18} {n:>12}");
            }
            println!("{:<10} {:>12}", "total", c.total);
            if let Some(path) = &cli.report {
                write_json(path, &c)?;
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("mtair: {e}");
        process::exit(e.code() as i32);
    }
}
