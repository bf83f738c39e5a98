//! Run configuration: file (TOML or JSON) first, then command-line overrides.

use std::path::{Path, PathBuf};

use anchor_moe::dataset::{Schema, TargetColumn};
use anchor_moe::pipeline::PipelineConfig;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the directory under which run folders go.
pub const OUTPUT_ROOT_VAR: &str = "ANCHOR_MOE_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "output";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    /// Dataset label used in reports; the file stem when unset.
    pub name: Option<String>,
    pub schema: Schema,
    pub pipeline: PipelineConfig,
    pub n_runs: usize,
    pub seed_base: u64,
    pub output_dir: Option<PathBuf>,
    /// Content hash of `data`, filled in the config echo. When present on
    /// load, the data file must match it.
    pub data_sha256: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            name: None,
            schema: Schema::default(),
            pipeline: PipelineConfig::default(),
            n_runs: 20,
            seed_base: 0,
            output_dir: None,
            data_sha256: None,
        }
    }
}

/// Flags shared by the data-driven subcommands. Each one overrides the
/// matching field of the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML or JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset label in reports.
    #[arg(long)]
    pub name: Option<String>,
    /// Target column: a header name or a 0-based index. Defaults to the last column.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub n_runs: Option<usize>,
    #[arg(long)]
    pub seed_base: Option<u64>,
    /// Drop the GBDT anchor (experts predict free means).
    #[arg(long)]
    pub no_anchor: bool,
    /// Zero the router logits.
    #[arg(long)]
    pub no_router: bool,
    /// Report RMSE of uncalibrated means.
    #[arg(long)]
    pub no_calibration: bool,
    /// Keep this many random rows before splitting.
    #[arg(long)]
    pub subsample: Option<usize>,
    /// Phase-1 epoch budget.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Exact output directory (otherwise a fresh folder under the output root).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn load_config_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = read_text(path)?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => load_config_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            if cfg.data.as_ref() != Some(d) {
                cfg.data_sha256 = None;
            }
            cfg.data = Some(d.clone());
        }
        if let Some(n) = &self.name {
            cfg.name = Some(n.clone());
        }
        if let Some(t) = &self.target {
            cfg.schema.target = match t.parse::<usize>() {
                Ok(i) => TargetColumn::Index(i),
                Err(_) => TargetColumn::Name(t.clone()),
            };
        }
        if let Some(n) = self.n_runs {
            cfg.n_runs = n;
        }
        if let Some(s) = self.seed_base {
            cfg.seed_base = s;
        }
        let p = &mut cfg.pipeline;
        p.no_anchor |= self.no_anchor;
        p.no_router |= self.no_router;
        p.no_calibration |= self.no_calibration;
        if let Some(m) = self.subsample {
            p.subsample = Some(m);
        }
        if let Some(e) = self.epochs {
            p.train.max_epochs = e;
        }
        if let Some(lr) = self.lr {
            p.train.learning_rate = lr;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        if cfg.n_runs == 0 {
            return Err(CliError::Usage("n_runs must be at least 1".into()));
        }
        cfg.pipeline = cfg.pipeline.resolved();
        cfg.pipeline.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn data_path(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Usage("no dataset given (use --data or set `data` in the config)".into()))
    }

    pub fn dataset_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        self.data
            .as_deref()
            .and_then(|p| p.file_stem())
            .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
    }

    /// The run directory: `--out` if given, else `<root>/<name>-<unix time>`.
    pub fn run_dir(&self, label: &str) -> Result<PathBuf, CliError> {
        if let Some(d) = &self.output_dir {
            return Ok(d.clone());
        }
        fresh_dir(label)
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
}

pub fn fresh_dir(label: &str) -> Result<PathBuf, CliError> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let root = output_root();
    let mut dir = root.join(format!("{label}-{secs}"));
    let mut i = 1;
    while dir.exists() {
        dir = root.join(format!("{label}-{secs}-{i}"));
        i += 1;
    }
    Ok(dir)
}
