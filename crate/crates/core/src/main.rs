use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use plod::experiments::{self, presets, write_table, ExperimentConfig, Manifest, RunContext};

#[derive(Parser)]
#[command(name = "plod", version, about = "Multiscale wave solver studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build every basis of the grid and report sizes.
    BuildBasis(Common),
    /// One multiscale run with an energy log.
    Solve(Common),
    /// Error against the fine reference over H, per degree.
    Convergence(Common),
    /// Basis decay over the patch radius and errors at fixed radii.
    Localization(Common),
    /// Time-step convergence in one fixed space.
    Temporal(Common),
    /// Coarse Q1 elements against the multiscale method.
    FemCompare(Common),
    /// Energy conservation, energy identity and stability bound.
    EnergyAudit(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Rough,
    Smooth,
    Temporal,
    Localization,
    FemCompare,
    EnergyAudit,
    Solve,
}

#[derive(Args)]
struct Common {
    /// TOML config; without it the preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config to start from.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for the patch solves.
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for cached bases.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// h = 2^-8 and ε = 2^-6 instead of the desk defaults.
    #[arg(long)]
    paper_scale: bool,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

fn preset(p: Preset) -> ExperimentConfig {
    match p {
        Preset::Rough => presets::rough(),
        Preset::Smooth => presets::smooth(),
        Preset::Temporal => presets::temporal(),
        Preset::Localization => presets::localization(),
        Preset::FemCompare => presets::fem_compare(),
        Preset::EnergyAudit => presets::energy_audit(),
        Preset::Solve => presets::solve(),
    }
}

fn resolve(c: &Common, default: Preset) -> plod::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => preset(c.preset.unwrap_or(default)),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.paper_scale {
        cfg = cfg.paper_scale();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(name: &str, c: &Common, default: Preset) -> plod::Result<()> {
    let cfg = resolve(c, default)?;
    if c.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    #[cfg(feature = "parallel")]
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| plod::Error::Config(e.to_string()))?;
    }
    #[cfg(not(feature = "parallel"))]
    if c.threads.is_some_and(|n| n > 1) {
        log::warn!("built without the parallel feature, --threads ignored");
    }
    std::fs::create_dir_all(&c.out)?;
    let ctx = RunContext {
        cache_dir: c.cache.clone(),
    };
    let start = Instant::now();
    let out = |f: &str| c.out.join(f);
    let mut outputs = Vec::new();
    let mut table = |file: &str| {
        outputs.push(file.to_string());
        out(file)
    };
    match name {
        "build-basis" => write_table(&table("basis.csv"), &experiments::run_build_basis(&cfg, &ctx)?)?,
        "solve" => {
            let energy = table("energy.csv");
            write_table(&table("solve.csv"), &experiments::run_solve(&cfg, &ctx, &energy)?)?
        }
        "convergence" => write_table(&table("convergence.csv"), &experiments::run_convergence(&cfg, &ctx)?)?,
        "localization" => {
            write_table(&table("localization_decay.csv"), &experiments::run_localization_decay(&cfg)?)?;
            write_table(&table("localization.csv"), &experiments::run_localization_errors(&cfg, &ctx)?)?
        }
        "temporal" => write_table(&table("temporal.csv"), &experiments::run_temporal(&cfg, &ctx)?)?,
        "fem-compare" => write_table(&table("fem_compare.csv"), &experiments::run_fem_comparison(&cfg, &ctx)?)?,
        "energy-audit" => write_table(&table("energy_audit.csv"), &experiments::run_energy_audit(&cfg, &ctx)?)?,
        _ => unreachable!(),
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: name.to_string(),
        schema_version: experiments::SCHEMA_VERSION,
        config: cfg,
        outputs,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    manifest.write(&out("manifest.json"))?;
    report(&c.out, &manifest.outputs);
    Ok(())
}

fn report(dir: &Path, files: &[String]) {
    for f in files {
        println!("{}", dir.join(f).display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, common, default) = match &cli.command {
        Command::BuildBasis(c) => ("build-basis", c, Preset::Rough),
        Command::Solve(c) => ("solve", c, Preset::Solve),
        Command::Convergence(c) => ("convergence", c, Preset::Rough),
        Command::Localization(c) => ("localization", c, Preset::Localization),
        Command::Temporal(c) => ("temporal", c, Preset::Temporal),
        Command::FemCompare(c) => ("fem-compare", c, Preset::FemCompare),
        Command::EnergyAudit(c) => ("energy-audit", c, Preset::EnergyAudit),
    };
    match execute(name, common, default) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
