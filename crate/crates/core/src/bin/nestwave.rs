use clap::{Args, Parser, Subcommand};
use nestwave::hmc::{Algorithm, SampleArchive, SamplerConfig};
use nestwave::model::Variant;
use nestwave::pipeline::{
    self, default_out_dir, fit_all, fit_series, ingest, read_series_csv, simulate_counts,
    simulate_regime_switch, write_series_csv, GenConfig, RunConfig,
};
use nestwave::{Error, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "nestwave",
    version,
    about = "Bayesian wavelet models for nested multi-category count series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a haul CSV and print its shape and composition.
    Ingest {
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate synthetic inputs.
    Simulate {
        #[command(subcommand)]
        what: SimulateCmd,
    },
    /// Fit models: every branch × variant of a count dataset, or a single
    /// real-valued series with --series.
    Fit(FitArgs),
    /// Recompute WAIC from a saved archive.
    Waic {
        #[arg(long)]
        archive: PathBuf,
    },
    /// Draw a holdout split and write it as JSON.
    Holdout {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        fraction: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the wavelet transform summary from a saved archive.
    Transform {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, default_value_t = 20)]
        draws: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SimulateCmd {
    /// Two-regime sinusoidal series (4-cycle tone joined by a 10-cycle tone
    /// from t = 1/2) with Gaussian noise.
    Regime {
        #[arg(long, default_value_t = 128)]
        points: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nested count data from a generative config, with a ground-truth
    /// sidecar.
    Counts {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_data: PathBuf,
        #[arg(long)]
        out_truth: Option<PathBuf>,
        /// Also write the implied nesting config for `fit --nesting`.
        #[arg(long)]
        out_nesting: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, required_unless_present = "series")]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "series")]
    nesting: Option<PathBuf>,
    /// Fit a real-valued `t,y` series with the Gaussian wavelet model
    /// instead of count data.
    #[arg(long, conflicts_with_all = ["data", "nesting"])]
    series: Option<PathBuf>,
    /// Comma-separated subset of cmb,wb,wzib,wzanib,multinomial.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Output directory (default $NESTWAVE_OUT_DIR, else the working
    /// directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    chains: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    #[arg(long, default_value_t = 0.8)]
    target_accept: f64,
    #[arg(long, default_value_t = 10)]
    max_depth: usize,
    /// "nuts" or "hmc".
    #[arg(long, default_value = "nuts")]
    algorithm: String,
    /// Leapfrog steps per transition when --algorithm hmc.
    #[arg(long, default_value_t = 32)]
    hmc_steps: usize,
    /// Fixed initial step size (default: search heuristic).
    #[arg(long)]
    init_step: Option<f64>,
    /// Holdout fraction in [0, 1); enables holdout prediction outputs.
    #[arg(long)]
    holdout: Option<f64>,
    /// Initialize every variant independently instead of chaining from the
    /// previous fit.
    #[arg(long)]
    no_warm_start: bool,
    /// Fit branches concurrently (disables warm starts).
    #[arg(long)]
    parallel: bool,
    /// Wavelet depth D (default ⌈log2 T⌉ for counts, 6 for --series).
    #[arg(long)]
    depth: Option<usize>,
    /// Individual posterior draws carried into each transform summary.
    #[arg(long, default_value_t = 20)]
    transform_draws: usize,
}

impl FitArgs {
    fn sampler(&self) -> Result<SamplerConfig> {
        let algorithm = match self.algorithm.as_str() {
            "nuts" => Algorithm::Nuts,
            "hmc" => Algorithm::Hmc { steps: self.hmc_steps },
            other => {
                return Err(Error::Config(format!(
                    "unknown algorithm '{other}' (expected nuts or hmc)"
                )))
            }
        };
        Ok(SamplerConfig {
            iterations: self.iterations,
            warmup: self.warmup,
            chains: self.chains,
            thinning: self.thin,
            target_accept: self.target_accept,
            max_tree_depth: self.max_depth,
            seed: self.seed,
            algorithm,
            init_step: self.init_step,
        })
    }

    fn variants(&self) -> Result<Vec<Variant>> {
        if self.variants.is_empty() {
            return Ok(vec![
                Variant::ConstantMean,
                Variant::Wavelet,
                Variant::WaveletZi,
                Variant::WaveletZani,
                Variant::Multinomial,
            ]);
        }
        self.variants.iter().map(|s| Variant::parse(s)).collect()
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { data } => {
            let (_, summary) = ingest(&data)?;
            print!("{summary}");
            Ok(())
        }
        Command::Simulate { what } => match what {
            SimulateCmd::Regime { points, noise, seed, out } => {
                let series = simulate_regime_switch(points, noise, seed)?;
                write_series_csv(&series, &out)?;
                println!("wrote {} points to {}", series.len(), out.display());
                Ok(())
            }
            SimulateCmd::Counts { config, out_data, out_truth, out_nesting } => {
                let cfg = GenConfig::read_json(&config)?;
                let (data, truth) = simulate_counts(&cfg)?;
                data.write_csv(std::fs::File::create(&out_data)?)?;
                println!(
                    "wrote {} records ({} quarters, {} trips) to {}",
                    data.len(),
                    data.t_max,
                    data.j_max,
                    out_data.display()
                );
                if let Some(path) = out_truth {
                    std::fs::write(&path, serde_json::to_string_pretty(&truth)?)?;
                    println!("truth sidecar: {}", path.display());
                }
                if let Some(path) = out_nesting {
                    std::fs::write(&path, cfg.nesting_tree()?.to_config_json())?;
                    println!("nesting config: {}", path.display());
                }
                Ok(())
            }
        },
        Command::Fit(args) => {
            let sampler = args.sampler()?;
            let out_dir = args.out.clone().unwrap_or_else(default_out_dir);
            if let Some(series_path) = &args.series {
                let series = read_series_csv(series_path)?;
                let depth = args.depth.unwrap_or(6);
                let fit = fit_series(&series, depth, &sampler, &out_dir, args.transform_draws)?;
                println!("archive: {}", fit.archive_path.display());
                println!("transform summary: {}", fit.transform_path.display());
                println!(
                    "max split R-hat: {:.4}{}",
                    fit.archive.rhat.iter().cloned().fold(f64::NAN, f64::max),
                    if fit.archive.converged { "" } else { " (not converged)" }
                );
                return Ok(());
            }
            let config = RunConfig {
                data_path: args.data.clone().expect("clap enforces --data"),
                nesting_path: args.nesting.clone().expect("clap enforces --nesting"),
                variants: args.variants()?,
                sampler,
                holdout_fraction: args.holdout,
                warm_start: !args.no_warm_start,
                parallel_branches: args.parallel,
                out_dir,
                seed: args.seed,
                depth: args.depth,
                transform_draws: args.transform_draws,
            };
            let bundle = fit_all(&config)?;
            for path in &bundle.outputs {
                println!("wrote {}", path.display());
            }
            if !bundle.converged_all {
                println!("warning: some fits did not reach split R-hat < 1.1");
            }
            if bundle.failures.is_empty() {
                return Ok(());
            }
            for (what, err) in &bundle.failures {
                eprintln!("failed {what}: {err}");
            }
            if bundle.succeeded == 0 {
                let (what, err) = &bundle.failures[0];
                Err(Error::Sampler(format!("all fits failed; first: {what}: {err}")))
            } else {
                Err(Error::Partial { done: bundle.succeeded, total: bundle.attempted })
            }
        }
        Command::Waic { archive } => {
            let archive = SampleArchive::load(&archive)?;
            let w = nestwave::eval::waic_archive(&archive)?;
            println!("label: {}", archive.label);
            println!("lpd_hat: {:.6}", w.lpd_hat);
            println!("p_waic: {:.6}", w.p_waic);
            println!("waic: {:.6}", w.waic);
            Ok(())
        }
        Command::Holdout { data, fraction, seed, out } => {
            let dataset = nestwave::counts::HaulDataset::read_csv_path(&data)?;
            let split = nestwave::eval::make_holdout(&dataset, fraction, seed)?;
            let path = out.unwrap_or_else(|| default_out_dir().join("holdout_split.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&split)?)?;
            println!(
                "{} train / {} test records ({} eligible); split: {}",
                split.train.len(),
                split.test.len(),
                split.eligible.iter().filter(|&&e| e).count(),
                path.display()
            );
            Ok(())
        }
        Command::Transform { archive, draws, out } => {
            let loaded = SampleArchive::load(&archive)?;
            let summary = pipeline::transform_from_archive(&loaded, draws)?;
            let path = out.unwrap_or_else(|| archive.with_extension("transform.csv"));
            summary.write_csv(std::fs::File::create(&path)?)?;
            println!("wrote {} rows to {}", summary.rows.len(), path.display());
            Ok(())
        }
    }
}
