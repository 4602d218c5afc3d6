//! Flat key=value run configuration. File values override defaults, command
//! line flags override the file, and `DUOCAST_SEED` overrides the seed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::highfreq::HighBranchConfig;
use crate::lowfreq::LowBranchConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Square grid side; frames are grid x grid.
    pub grid: usize,
    /// Condition window length; the target window matches it.
    pub frames: usize,
    /// Band cutoff as a fraction of the Nyquist radius.
    pub rho: f64,
    /// High-intensity threshold for the masked base forecast.
    pub theta_int: f64,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Weights of the predictor, in-band, and detail objectives.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub batch: usize,
    /// Epochs per training phase.
    pub epochs: usize,
    pub seed: u64,
    pub data_path: String,
    pub out_dir: String,
    pub airmass_channels: usize,
    pub predictor_channels: usize,
    pub model_channels: usize,
    pub latent_channels: usize,
    pub ae_channels: usize,
    pub high_channels: usize,
    pub attn_blocks: usize,
    pub attn_kernel: usize,
    /// Threshold set for averaged CSI.
    pub thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: 32,
            frames: 5,
            rho: 0.25,
            theta_int: 0.6,
            t_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.12,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lr: 2e-3,
            batch: 8,
            epochs: 30,
            seed: 0,
            data_path: "events.duo1".to_string(),
            out_dir: "runs".to_string(),
            airmass_channels: 1,
            predictor_channels: 16,
            model_channels: 16,
            latent_channels: 8,
            ae_channels: 16,
            high_channels: 24,
            attn_blocks: 2,
            attn_kernel: 3,
            thresholds: crate::metrics::default_thresholds(),
        }
    }
}

/// Keys in canonical order; serialization and the CLI flag set follow it.
pub const CONFIG_KEYS: &[&str] = &[
    "grid",
    "frames",
    "rho",
    "theta_int",
    "t_steps",
    "beta_start",
    "beta_end",
    "lambda1",
    "lambda2",
    "lambda3",
    "lr",
    "batch",
    "epochs",
    "seed",
    "data_path",
    "out_dir",
    "airmass_channels",
    "predictor_channels",
    "model_channels",
    "latent_channels",
    "ae_channels",
    "high_channels",
    "attn_blocks",
    "attn_kernel",
    "thresholds",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("cannot parse {key}={value}")))
}

impl RunConfig {
    /// Sets one key from its textual value; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "grid" => self.grid = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "theta_int" => self.theta_int = parse(key, value)?,
            "t_steps" => self.t_steps = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "lambda3" => self.lambda3 = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_path" => self.data_path = value.trim().to_string(),
            "out_dir" => self.out_dir = value.trim().to_string(),
            "airmass_channels" => self.airmass_channels = parse(key, value)?,
            "predictor_channels" => self.predictor_channels = parse(key, value)?,
            "model_channels" => self.model_channels = parse(key, value)?,
            "latent_channels" => self.latent_channels = parse(key, value)?,
            "ae_channels" => self.ae_channels = parse(key, value)?,
            "high_channels" => self.high_channels = parse(key, value)?,
            "attn_blocks" => self.attn_blocks = parse(key, value)?,
            "attn_kernel" => self.attn_kernel = parse(key, value)?,
            "thresholds" => {
                self.thresholds = value
                    .split(',')
                    .map(|v| parse("thresholds", v))
                    .collect::<Result<Vec<f64>>>()?;
            }
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "grid" => self.grid.to_string(),
            "frames" => self.frames.to_string(),
            "rho" => self.rho.to_string(),
            "theta_int" => self.theta_int.to_string(),
            "t_steps" => self.t_steps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "lambda3" => self.lambda3.to_string(),
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "data_path" => self.data_path.clone(),
            "out_dir" => self.out_dir.clone(),
            "airmass_channels" => self.airmass_channels.to_string(),
            "predictor_channels" => self.predictor_channels.to_string(),
            "model_channels" => self.model_channels.to_string(),
            "latent_channels" => self.latent_channels.to_string(),
            "ae_channels" => self.ae_channels.to_string(),
            "high_channels" => self.high_channels.to_string(),
            "attn_blocks" => self.attn_blocks.to_string(),
            "attn_kernel" => self.attn_kernel.to_string(),
            "thresholds" => self
                .thresholds
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(","),
            _ => return None,
        };
        Some(v)
    }

    /// Parses a key=value file with '#' comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `(key, value)` overrides in order (command-line flags).
    pub fn apply_overrides<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// `DUOCAST_SEED` takes precedence over every other seed source.
    pub fn apply_env_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = parse("DUOCAST_SEED", v)?;
        }
        Ok(())
    }

    /// Canonical text form; parsing it back reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 || self.grid % 4 != 0 {
            return Err(Error::config("grid must be >= 8 and divisible by 4"));
        }
        if self.frames < 1 {
            return Err(Error::config("frames must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("rho must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.theta_int) {
            return Err(Error::config("theta_int must lie in [0, 1]"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be >= 1"));
        }
        crate::diffusion::NoiseSchedule::linear(self.t_steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::config(format!("schedule: {e}")))?;
        if self.thresholds.is_empty() {
            return Err(Error::config("thresholds must be non-empty"));
        }
        Ok(())
    }

    pub fn low_config(&self) -> LowBranchConfig {
        LowBranchConfig {
            frames: self.frames,
            height: self.grid,
            width: self.grid,
            airmass_channels: self.airmass_channels,
            predictor_channels: self.predictor_channels,
            model_channels: self.model_channels,
            attn_kernel: self.attn_kernel,
            theta_int: self.theta_int,
        }
    }

    pub fn high_config(&self) -> HighBranchConfig {
        HighBranchConfig {
            frames: self.frames,
            height: self.grid,
            width: self.grid,
            latent_channels: self.latent_channels,
            ae_channels: self.ae_channels,
            model_channels: self.high_channels,
            attn_blocks: self.attn_blocks,
            attn_kernel: self.attn_kernel,
        }
    }

    pub fn schedule(&self) -> crate::diffusion::NoiseSchedule {
        crate::diffusion::NoiseSchedule::linear(self.t_steps, self.beta_start, self.beta_end)
            .expect("validated schedule")
    }

    pub fn mask(&self) -> Result<crate::spectral::SpectralMask> {
        crate::spectral::SpectralMask::from_fraction(self.grid, self.grid, self.rho)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_exact() {
        let mut cfg = RunConfig::default();
        cfg.set("rho", "0.3125").unwrap();
        cfg.set("lr", "0.00173").unwrap();
        cfg.set("thresholds", "0.1,0.5,0.9").unwrap();
        let text = cfg.to_text();
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("grid=32\nbogus_key=1\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\n\ngrid=16 # trailing\nframes=3\n")
            .unwrap();
        assert_eq!(cfg.grid, 16);
        assert_eq!(cfg.frames, 3);
    }

    #[test]
    fn env_seed_wins() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "5").unwrap();
        cfg.apply_env_seed(Some("99")).unwrap();
        assert_eq!(cfg.seed, 99);
        cfg.apply_env_seed(None).unwrap();
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.lambda2 = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.grid = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.beta_end = 1.5;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
