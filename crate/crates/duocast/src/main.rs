//! Thin command-line wrapper over the library entry points. Each
//! subcommand has a matching runnable example in `examples/`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use duocast::config::RunConfig;
use duocast::pipeline::{self, ForecastVariant, TrainedModel};
use duocast::synthdata::{read_duo1, EventSpec};

#[derive(Parser)]
#[command(name = "duocast", about = "Dual-band diffusion nowcasting on synthetic radar events")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides mirroring the run-config keys. Precedence: defaults, then
/// --config file, then these flags, then DUOCAST_SEED.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    theta_int: Option<f64>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_path: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    airmass_channels: Option<usize>,
    #[arg(long)]
    predictor_channels: Option<usize>,
    #[arg(long)]
    model_channels: Option<usize>,
    #[arg(long)]
    latent_channels: Option<usize>,
    #[arg(long)]
    ae_channels: Option<usize>,
    #[arg(long)]
    high_channels: Option<usize>,
    #[arg(long)]
    attn_blocks: Option<usize>,
    #[arg(long)]
    attn_kernel: Option<usize>,
    /// Comma-separated threshold list.
    #[arg(long)]
    thresholds: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> duocast::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let mut overrides: Vec<(&str, String)> = Vec::new();
        macro_rules! push {
            ($key:literal, $field:expr) => {
                if let Some(v) = &$field {
                    overrides.push(($key, v.to_string()));
                }
            };
        }
        push!("grid", self.grid);
        push!("frames", self.frames);
        push!("rho", self.rho);
        push!("theta_int", self.theta_int);
        push!("t_steps", self.t_steps);
        push!("beta_start", self.beta_start);
        push!("beta_end", self.beta_end);
        push!("lambda1", self.lambda1);
        push!("lambda2", self.lambda2);
        push!("lambda3", self.lambda3);
        push!("lr", self.lr);
        push!("batch", self.batch);
        push!("epochs", self.epochs);
        push!("seed", self.seed);
        push!("data_path", self.data_path);
        push!("out_dir", self.out_dir);
        push!("airmass_channels", self.airmass_channels);
        push!("predictor_channels", self.predictor_channels);
        push!("model_channels", self.model_channels);
        push!("latent_channels", self.latent_channels);
        push!("ae_channels", self.ae_channels);
        push!("high_channels", self.high_channels);
        push!("attn_blocks", self.attn_blocks);
        push!("attn_kernel", self.attn_kernel);
        push!("thresholds", self.thresholds);
        for (k, v) in &overrides {
            cfg.set(k, v)?;
        }
        cfg.apply_env_seed(std::env::var("DUOCAST_SEED").ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event dataset (DUO1 container).
    GenData {
        #[arg(long, default_value = "events.duo1")]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        events: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        grid: usize,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        /// Speckle amplitude relative to local intensity.
        #[arg(long, default_value_t = 0.18)]
        speckle: f64,
        #[arg(long, default_value_t = 1.2)]
        front_velocity: f64,
        #[arg(long, default_value_t = 1.0)]
        advection: f64,
        /// Drop the moving front band.
        #[arg(long)]
        no_front: bool,
    },
    /// Train all phases and write checkpoints plus the loss curve.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Autoregressive forecast for one dataset event, rendered as PGM.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        event: usize,
        /// Frames to forecast; defaults to one target window.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value = "forecast_out")]
        out: PathBuf,
        /// Skip the detail branch (in-band ablation).
        #[arg(long)]
        low_only: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score the test split and write metric CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval_out")]
        out: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Run the verification table; nonzero exit if a mandatory check fails.
    VerifyTheory {
        #[command(flatten)]
        config: ConfigArgs,
        /// Optional trained checkpoint for the trained-branch rows.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "theory_report.csv")]
        out: PathBuf,
    },
    /// Dump one dataset sequence as PGM frames.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        event: usize,
        /// Which sequence: the condition window (x) or target window (y).
        #[arg(long, default_value = "y")]
        which: String,
        #[arg(long, default_value = "render_out")]
        out: PathBuf,
    },
}

fn run() -> duocast::Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            out,
            events,
            seed,
            grid,
            frames,
            speckle,
            front_velocity,
            advection,
            no_front,
        } => {
            let template = EventSpec {
                height: grid,
                width: grid,
                total_frames: 2 * frames,
                condition_frames: frames,
                speckle_amplitude: speckle,
                front_velocity,
                advection,
                front_enabled: !no_front,
                ..EventSpec::default()
            };
            let ds = pipeline::gen_data(&out, events, &template, seed)?;
            println!(
                "wrote {} events ({} train / {} val / {} test) to {}",
                ds.len(),
                ds.train().len(),
                ds.val().len(),
                ds.test().len(),
                out.display()
            );
            Ok(0)
        }
        Command::Train { config } => {
            let cfg = config.build()?;
            let report = pipeline::train(&cfg)?;
            for row in &report.curve {
                println!(
                    "{} epoch {:>3} {}={:.6}",
                    row.phase, row.epoch, row.metric, row.value
                );
            }
            println!("checkpoint: {}", report.checkpoint_path.display());
            Ok(0)
        }
        Command::Forecast {
            checkpoint,
            data,
            event,
            horizon,
            out,
            low_only,
            seed,
        } => {
            let model = TrainedModel::load(&checkpoint)?;
            let ds = read_duo1(&data)?;
            if event >= ds.len() {
                return Err(duocast::Error::config(format!(
                    "event {event} out of range ({} events)",
                    ds.len()
                )));
            }
            let horizon = horizon.unwrap_or(model.config.frames);
            let mut rng = pipeline::forecast_rng(seed.unwrap_or(model.config.seed), event);
            let x = ds.events[event].x.cast::<f64>();
            let variant = if low_only {
                ForecastVariant::LowOnly
            } else {
                ForecastVariant::Dual
            };
            let yhat = pipeline::forecast(&model, &x, horizon, &mut rng, variant)?;
            let paths = pipeline::render(&yhat, &out)?;
            println!("wrote {} frames to {}", paths.len(), out.display());
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            horizon,
        } => {
            let model = TrainedModel::load(&checkpoint)?;
            let ds = read_duo1(&data)?;
            let horizon = horizon.unwrap_or(model.config.frames);
            let summary = pipeline::evaluate(&model, ds.test(), horizon, &out)?;
            println!(
                "dual:        csi_m={:.4} hss={:.4} ssim={:.4} mse={:.6}",
                summary.dual.csi_m, summary.dual.hss_mean, summary.dual.ssim, summary.dual.mse
            );
            println!(
                "low-only:    csi_m={:.4} hss={:.4} ssim={:.4} mse={:.6}",
                summary.low_only.csi_m,
                summary.low_only.hss_mean,
                summary.low_only.ssim,
                summary.low_only.mse
            );
            println!(
                "persistence: csi_m={:.4} hss={:.4} ssim={:.4} mse={:.6}",
                summary.persistence.csi_m,
                summary.persistence.hss_mean,
                summary.persistence.ssim,
                summary.persistence.mse
            );
            println!("reports written to {}", out.display());
            Ok(0)
        }
        Command::VerifyTheory {
            config,
            checkpoint,
            out,
        } => {
            let cfg = config.build()?;
            let model = match &checkpoint {
                Some(p) => Some(TrainedModel::load(p)?),
                None => None,
            };
            let test_events = match (&model, Path::new(&cfg.data_path).exists()) {
                (Some(_), true) => Some(read_duo1(Path::new(&cfg.data_path))?),
                _ => None,
            };
            let report = pipeline::verify_theory(
                &cfg,
                model.as_ref(),
                test_events.as_ref().map(|d| d.test()),
            )?;
            report.write_csv(&out)?;
            for row in &report.rows {
                println!(
                    "{:<45} bound={:<12.6} measured={:<12.6} {}",
                    row.name,
                    row.bound,
                    row.measured,
                    if row.pass { "pass" } else { "FAIL" }
                );
            }
            println!("report written to {}", out.display());
            if report.all_mandatory_pass() {
                Ok(0)
            } else {
                eprintln!("mandatory verification checks failed");
                Ok(1)
            }
        }
        Command::Render {
            data,
            event,
            which,
            out,
        } => {
            let ds = read_duo1(&data)?;
            if event >= ds.len() {
                return Err(duocast::Error::config(format!(
                    "event {event} out of range ({} events)",
                    ds.len()
                )));
            }
            let seq = match which.as_str() {
                "x" => ds.events[event].x.cast::<f64>(),
                "y" => ds.events[event].y.cast::<f64>(),
                other => {
                    return Err(duocast::Error::config(format!(
                        "--which must be x or y, got '{other}'"
                    )))
                }
            };
            let paths = pipeline::render(&seq, &out)?;
            println!("wrote {} frames to {}", paths.len(), out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
