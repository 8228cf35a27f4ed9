//! Per-subcommand settings. Every key can come from the `[<subcommand>]`
//! table of a TOML file (`--config`) or from the flag of the same name
//! (`sparse_lo` <-> `--sparse-lo`); flags win.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use evisurro_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateOpts {
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grid shape, e.g. 32x32 or 16x16x16.
    #[arg(long)]
    pub grid: Option<String>,
    /// Number of simulation parameters.
    #[arg(long)]
    pub d: Option<usize>,
    /// none | heteroscedastic | parameter-perturbation | resolution-variants:<factor>
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub cal: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Seed of the parameter draws and split assignment.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the simulator noise (defaults to --seed).
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Lower corner of a region excluded from the training split.
    #[arg(long, value_delimiter = ',')]
    pub sparse_lo: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub sparse_hi: Option<Vec<f64>>,
    /// Overwrite a non-empty output directory.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub force: Option<bool>,
}

impl SimulateOpts {
    pub fn with_defaults(mut self) -> Self {
        self.grid.get_or_insert_with(|| "32x32".into());
        self.d.get_or_insert(3);
        self.noise.get_or_insert_with(|| "heteroscedastic".into());
        self.train.get_or_insert(128);
        self.cal.get_or_insert(200);
        self.test.get_or_insert(100);
        let seed = *self.seed.get_or_insert(0);
        self.noise_seed.get_or_insert(seed);
        self.force.get_or_insert(false);
        self
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint instead of initializing a new network.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Hidden layer widths, e.g. 64,64.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the evidence regularizer.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of the uncertainty regularizer.
    #[arg(long)]
    pub xi: Option<f64>,
    /// Shuffle seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight initialization seed.
    #[arg(long)]
    pub net_seed: Option<u64>,
    /// Early stopping patience in epochs (0 = off).
    #[arg(long)]
    pub patience: Option<usize>,
    /// Per-epoch loss log (JSON lines); defaults to <out>.log.jsonl.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

impl TrainOpts {
    pub fn with_defaults(mut self) -> Self {
        let d = TrainConfig::default();
        self.hidden.get_or_insert_with(|| vec![64, 64]);
        self.epochs.get_or_insert(d.epochs);
        self.batch_size.get_or_insert(d.batch_size);
        self.lr.get_or_insert(d.learning_rate);
        self.lambda.get_or_insert(d.weights.lambda_reg);
        self.xi.get_or_insert(d.weights.xi_reg);
        self.seed.get_or_insert(d.seed);
        self.net_seed.get_or_insert(0);
        self.patience.get_or_insert(d.early_stopping_patience);
        if self.log.is_none() {
            self.log = self.out.as_ref().map(|o| suffixed(o, ".log.jsonl"));
        }
        self
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateOpts {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Calibration table file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Miscoverage of the raw intervals the scores are computed from.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Pool scores across grid elements.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub pooled: Option<bool>,
    /// split (a/2 per side) | per-side (a per side)
    #[arg(long)]
    pub tails: Option<String>,
    /// Miscoverage levels whose attainability is reported.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
}

impl CalibrateOpts {
    pub fn with_defaults(mut self) -> Self {
        self.delta.get_or_insert(0.1);
        self.pooled.get_or_insert(false);
        self.tails.get_or_insert_with(|| "split".into());
        self.levels.get_or_insert_with(default_levels);
        self
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateOpts {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Calibration table; without it only uncalibrated curves are produced.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Miscoverage levels; empty means 0.01..=0.30 in steps of 0.01.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Data range for PSNR/SSIM; defaults to the training range.
    #[arg(long)]
    pub data_range: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub force: Option<bool>,
}

impl EvaluateOpts {
    pub fn with_defaults(mut self) -> Self {
        if self.levels.as_ref().is_none_or(|l| l.is_empty()) {
            self.levels = Some(default_levels());
        }
        self.force.get_or_insert(false);
        self
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictOpts {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Parameter vector, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub params: Option<Vec<f64>>,
    /// Interval confidence 1 - a; omit for point prediction only.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub calibrated: Option<bool>,
    /// Output JSON file (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl PredictOpts {
    pub fn with_defaults(mut self) -> Self {
        self.calibrated.get_or_insert(false);
        self
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeOpts {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Allowed CORS origin ("*" for any); no CORS headers if omitted.
    #[arg(long)]
    pub cors: Option<String>,
}

impl ServeOpts {
    pub fn with_defaults(mut self) -> Self {
        self.host.get_or_insert_with(|| "127.0.0.1".into());
        self.port.get_or_insert(8080);
        self
    }
}

/// The config file: one optional table per subcommand.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub simulate: Option<SimulateOpts>,
    pub train: Option<TrainOpts>,
    pub calibrate: Option<CalibrateOpts>,
    pub evaluate: Option<EvaluateOpts>,
    pub predict: Option<PredictOpts>,
    pub serve: Option<ServeOpts>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }
}

/// 0.01, 0.02, ..., 0.30.
pub fn default_levels() -> Vec<f64> {
    (1..=30).map(|i| f64::from(i) / 100.0).collect()
}

pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// File values overridden by every flag that was given.
pub fn overlay<T: Serialize + DeserializeOwned + Default>(file: Option<T>, flags: &T) -> Result<T, CliError> {
    let mut base = serde_json::to_value(file.unwrap_or_default()).map_err(|e| CliError::Config(e.to_string()))?;
    let top = serde_json::to_value(flags).map_err(|e| CliError::Config(e.to_string()))?;
    if let (Value::Object(b), Value::Object(t)) = (&mut base, top) {
        for (k, v) in t {
            if !v.is_null() {
                b.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))
}

/// Resolved settings as TOML, for the run log.
pub fn echo<T: Serialize>(name: &str, opts: &T) -> String {
    let body = toml::to_string(opts).unwrap_or_else(|e| format!("# unprintable: {e}\n"));
    format!("[{name}]\n{body}")
}

pub fn require<T: Clone>(v: &Option<T>, key: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| {
        CliError::Config(format!(
            "missing required setting '{key}' (flag --{})",
            key.replace('_', "-")
        ))
    })
}
