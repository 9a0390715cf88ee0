//! Run-configuration resolution: built-in defaults, then a key=value config
//! file, then command-line flags, in increasing precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Everything a command needs, after resolution. Training hyperparameters
/// default to the published settings (lr 0.001, d 64, segment 128,
/// 20 negatives, 20 Monte-Carlo samples, 100 epochs).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: Option<String>,
    pub data: Option<PathBuf>,
    pub bipartite: bool,
    pub dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub segment: usize,
    pub negatives: usize,
    pub mc_samples: usize,
    pub history: usize,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub time_scaling: bool,
    pub eval_seed: u64,
    pub horizon_factor: f64,
    pub duration_grid: usize,
    pub validate_every: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            data: None,
            bipartite: false,
            dim: 64,
            lr: 0.001,
            epochs: 100,
            segment: 128,
            negatives: 20,
            mc_samples: 20,
            history: 128,
            seed: 0,
            threads: 1,
            out: std::env::var_os("HGTPP_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(".")),
            time_scaling: true,
            eval_seed: 59169,
            horizon_factor: 20.0,
            duration_grid: 1024,
            validate_every: 1,
            checkpoint: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key `{key}` has invalid value `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!(
            "config key `{key}` expects a boolean, got `{value}`"
        ))),
    }
}

impl RunConfig {
    /// Apply a key=value config file. Lines starting with `#` and blank
    /// lines are skipped; unknown keys are usage errors.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        for (ix, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{}:{}: expected key=value, got `{line}`",
                    path.display(),
                    ix + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "model" => self.model = Some(value.to_string()),
                "data" => self.data = Some(PathBuf::from(value)),
                "bipartite" => self.bipartite = parse_bool(key, value)?,
                "d" | "dim" => self.dim = parse_value(key, value)?,
                "lr" => self.lr = parse_value(key, value)?,
                "epochs" => self.epochs = parse_value(key, value)?,
                "segment" => self.segment = parse_value(key, value)?,
                "negatives" => self.negatives = parse_value(key, value)?,
                "mc_samples" => self.mc_samples = parse_value(key, value)?,
                "history" => self.history = parse_value(key, value)?,
                "seed" => self.seed = parse_value(key, value)?,
                "threads" => self.threads = parse_value(key, value)?,
                "out" => self.out = PathBuf::from(value),
                "time_scaling" => self.time_scaling = parse_bool(key, value)?,
                "eval_seed" => self.eval_seed = parse_value(key, value)?,
                "horizon_factor" => self.horizon_factor = parse_value(key, value)?,
                "duration_grid" => self.duration_grid = parse_value(key, value)?,
                "validate_every" => self.validate_every = parse_value(key, value)?,
                "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
                _ => {
                    return Err(CliError::Usage(format!(
                        "{}:{}: unknown config key `{key}`",
                        path.display(),
                        ix + 1
                    )))
                }
            }
        }
        Ok(())
    }

    /// The resolved configuration as stable key=value text, echoed next to
    /// every command's outputs.
    pub fn echo(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("model", self.model.clone().unwrap_or_default());
        map.insert(
            "data",
            self.data
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        map.insert("bipartite", self.bipartite.to_string());
        map.insert("d", self.dim.to_string());
        map.insert("lr", self.lr.to_string());
        map.insert("epochs", self.epochs.to_string());
        map.insert("segment", self.segment.to_string());
        map.insert("negatives", self.negatives.to_string());
        map.insert("mc_samples", self.mc_samples.to_string());
        map.insert("history", self.history.to_string());
        map.insert("seed", self.seed.to_string());
        map.insert("threads", self.threads.to_string());
        map.insert("out", self.out.display().to_string());
        map.insert("time_scaling", self.time_scaling.to_string());
        map.insert("eval_seed", self.eval_seed.to_string());
        map.insert("horizon_factor", self.horizon_factor.to_string());
        map.insert("duration_grid", self.duration_grid.to_string());
        map.insert("validate_every", self.validate_every.to_string());
        map.insert(
            "checkpoint",
            self.checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}
