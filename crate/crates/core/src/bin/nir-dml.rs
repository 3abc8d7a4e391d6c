use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nir_dml::config::ExperimentConfig;
use nir_dml::experiment::{gen_data, run_ablation, run_eval, run_gradcheck, run_train, SweepSpec};
use nir_dml::synthetic::SyntheticSpec;
use nir_dml::{NirError, Result};

/// Results and checkpoints go here; defaults to `./nir-out`.
const OUT_DIR_VAR: &str = "NIR_OUT_DIR";

#[derive(Parser)]
#[command(name = "nir-dml", version, about = "Proxy-based metric learning with non-isotropy regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test benchmark.
    GenData(GenData),
    /// Train from a config file; trailing `--key value` pairs override it.
    Train {
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint directory on a dataset table.
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        nmi_seed: u64,
    },
    /// Run a sweep over config keys and seeds.
    Ablate {
        config: PathBuf,
        sweep: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Compare analytic and finite-difference gradients of the objective.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    sphere_dim: usize,
    #[arg(long, default_value_t = 32)]
    ambient_dim: usize,
    #[arg(long, default_value_t = 3)]
    submodes: usize,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    split: f64,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    anisotropy: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl GenData {
    fn spec(&self) -> SyntheticSpec {
        let d = SyntheticSpec::default();
        SyntheticSpec {
            num_classes: self.classes,
            samples_per_class: self.samples,
            sphere_dim: self.sphere_dim,
            ambient_dim: self.ambient_dim,
            submodes_per_class: self.submodes,
            within_submode_kappa: self.kappa.unwrap_or(d.within_submode_kappa),
            submode_spread: self.spread.unwrap_or(d.submode_spread),
            split: self.split,
            feature_noise: self.noise.unwrap_or(d.feature_noise),
            lift_anisotropy: self.anisotropy,
            seed: self.seed,
        }
    }
}

fn out_dir() -> Result<PathBuf> {
    let dir = std::env::var_os(OUT_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("nir-out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let out = out_dir()?;
            let data = gen_data(&args.spec(), &out)?;
            println!("train: {} ({} rows)", data.train.display(), data.benchmark_rows.0);
            println!("test: {} ({} rows)", data.test.display(), data.benchmark_rows.1);
        }
        Command::Train { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let out = out_dir()?;
            let record = run_train(&cfg, &out)?;
            for (split, m) in &record.metrics {
                println!(
                    "{split}: R@1 {:.4}  NMI {:.4}  mAP@1000 {:.4}  rho {:.4}",
                    m.recall_at_1(),
                    m.nmi,
                    m.map_at_1000,
                    m.spectral_decay
                );
            }
            println!("record: {}", out.join(nir_dml::experiment::RUN_FILE).display());
        }
        Command::Eval { checkpoint, data, ks, nmi_seed } => {
            let report = run_eval(&checkpoint, &data, &ks, nmi_seed)?;
            let json = to_json(&report);
            fs::write(out_dir()?.join("metrics.json"), &json)?;
            print!("{json}");
        }
        Command::Ablate { config, sweep, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let spec = SweepSpec::from_toml(&fs::read_to_string(&sweep)?)?;
            let out = out_dir()?;
            let ab = run_ablation(&cfg, &spec, &out)?;
            for row in &ab.summary {
                let settings: Vec<String> = row.settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let (m, s) = row.stats.get("recall@1").copied().unwrap_or((f64::NAN, f64::NAN));
                println!("[{}] runs {}  R@1 {m:.4} ± {s:.4}", settings.join(" "), row.runs);
            }
            println!("summary: {}", out.join("summary.csv").display());
        }
        Command::Gradcheck { config, batch, step, tolerance, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let report = run_gradcheck(&cfg, batch, step)?;
            let json = to_json(&report);
            fs::write(out_dir()?.join("gradcheck.json"), &json)?;
            print!("{json}");
            if !(report.max_rel_error < tolerance) {
                return Err(NirError::GradientCheck { max_rel_error: report.max_rel_error, tolerance });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
