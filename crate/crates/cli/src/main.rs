use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use spinport_cli::{load_config, parse_engine, run_preset, CliError, CliResult, ExperimentConfig, Overrides, Preset};

/// Runs a simulation preset and writes CSV tables, a JSON summary and a
/// manifest. Set SPINPORT_THREADS to bound the worker pool.
#[derive(Parser, Debug)]
#[command(name = "simulate", version)]
struct Args {
    /// witness-scan | teleport | scaling-sweep | engine-compare | outcome-grid
    preset: String,
    /// JSON config (kHz units); omitted or empty means defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: ./out/<preset>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// ed | gauss | dtwa
    #[arg(long)]
    engine: Option<String>,
    /// Ions per ensemble
    #[arg(long = "n-ions")]
    n_ions: Option<usize>,
    /// sc | pdsc | ss | dicke
    #[arg(long)]
    input: Option<String>,
    /// Dicke excitation of the input
    #[arg(long)]
    kc: Option<usize>,
    /// Fixed squeezing magnitude instead of the automatic scan
    #[arg(long)]
    r: Option<f64>,
}

fn run(args: Args) -> CliResult<()> {
    if let Ok(t) = std::env::var("SPINPORT_THREADS") {
        let n: usize = t.parse().map_err(|_| CliError::Config(format!("SPINPORT_THREADS must be a positive integer, got `{t}`")))?;
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let preset = Preset::parse(&args.preset)?;
    let base = match &args.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = base.preset {
        if p != preset {
            return Err(CliError::Config(format!("config is for preset `{}`, command line asks for `{}`", p.name(), preset.name())));
        }
    }
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
        engine: args.engine.as_deref().map(parse_engine).transpose()?,
        n_ions: args.n_ions,
        input: args.input,
        kc: args.kc,
        r: args.r,
    };
    let mut cfg = overrides.apply(base)?;
    cfg.preset = Some(preset);
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out").join(preset.name()));
    let manifest = run_preset(preset, &cfg, &out)?;
    println!("{}: {} files in {} (config {})", preset.name(), manifest.files.len() + 1, out.display(), &manifest.config_hash[..12]);
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
