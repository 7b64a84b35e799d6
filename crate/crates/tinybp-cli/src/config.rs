//! Run configuration: one declarative TOML file whose fields every
//! subcommand shares, overridable per flag. Each run writes a manifest
//! (resolved config + versions) next to its outputs so results stay
//! reproducible from the files alone.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Residual scalar regressor.
    Resnet,
    /// Signal-to-signal U-Net.
    Unet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    Sbp,
    Dbp,
    /// Reconstruct the full pressure waveform.
    Sig2sig,
}

impl std::fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetSpec::Sbp => write!(f, "sbp"),
            TargetSpec::Dbp => write!(f, "dbp"),
            TargetSpec::Sig2sig => write!(f, "sig2sig"),
        }
    }
}

/// Everything a pipeline run depends on. Every stage derives its randomness
/// from `seed`, so a config file pins the whole experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// NDJSON record file, or `synthetic:<seed>` for the built-in generator.
    pub dataset: String,
    pub profile: Profile,
    pub target: TargetSpec,
    /// Cost-weight grid for the sweep; absent means the default 18-point
    /// log grid. An explicitly empty list is a usage error.
    pub lambdas: Option<Vec<f64>>,
    /// Seed-model training epochs.
    pub epochs: usize,
    pub out_dir: PathBuf,
    /// Deployment storage budget checked after int8 export.
    pub budget_bytes: usize,
    /// Root seed for every stage.
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Supernet search epochs per sweep point.
    pub nas_epochs: usize,
    /// Fine-tune epochs for each discretized child.
    pub ft_epochs: usize,
    pub ft_lr: f64,
    /// Quantization-aware tuning epochs; 0 calibrates without tuning.
    pub qat_epochs: usize,
    pub qat_lr: f64,
    /// Sweep worker threads; 0 uses every core.
    pub workers: usize,
    pub window_seconds: f64,
    /// Shape of `synthetic:` datasets.
    pub synth_subjects: usize,
    pub synth_seconds: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: "synthetic:0".into(),
            profile: Profile::Resnet,
            target: TargetSpec::Sbp,
            lambdas: None,
            epochs: 10,
            out_dir: PathBuf::from("out"),
            budget_bytes: 512 * 1024,
            seed: 0,
            batch_size: 32,
            lr: 1e-3,
            nas_epochs: 5,
            ft_epochs: 2,
            ft_lr: 1e-3,
            qat_epochs: 3,
            qat_lr: 1e-4,
            workers: 0,
            window_seconds: 5.0,
            synth_subjects: 12,
            synth_seconds: 60.0,
        }
    }
}

/// Flag-level overrides shared by the pipeline subcommands. Anything left
/// unset falls back to the config file, then to the defaults.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML config file; the flags below override its fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// NDJSON records, or `synthetic:<seed>`.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long, value_enum)]
    pub target: Option<TargetSpec>,
    /// Comma-separated cost weights, e.g. `1e-9,3e-9,1e-8`.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub budget_bytes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub nas_epochs: Option<usize>,
    #[arg(long)]
    pub ft_epochs: Option<usize>,
    #[arg(long)]
    pub ft_lr: Option<f64>,
    #[arg(long)]
    pub qat_epochs: Option<usize>,
    #[arg(long)]
    pub qat_lr: Option<f64>,
    /// Sweep worker threads; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub window_seconds: Option<f64>,
    #[arg(long)]
    pub synth_subjects: Option<usize>,
    #[arg(long)]
    pub synth_seconds: Option<f64>,
}

impl PipelineConfig {
    /// Resolve file + flags into one config and sanity-check it.
    pub fn load(ov: &Overrides) -> Result<PipelineConfig> {
        let mut cfg = match &ov.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("bad config {}", path.display()))?
            }
            None => PipelineConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &ov.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        take!(dataset, profile, target, epochs, out_dir, budget_bytes, seed);
        take!(batch_size, lr, nas_epochs, ft_epochs, ft_lr, qat_epochs, qat_lr);
        take!(workers, window_seconds, synth_subjects, synth_seconds);
        if ov.lambdas.is_some() {
            cfg.lambdas = ov.lambdas.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        if !(self.window_seconds > 0.0) {
            bail!("window_seconds must be positive, got {}", self.window_seconds);
        }
        if self.budget_bytes == 0 {
            bail!("budget_bytes must be positive");
        }
        if matches!(&self.lambdas, Some(v) if v.is_empty()) {
            bail!("the lambda grid is empty; omit `lambdas` for the default 18-point grid");
        }
        if let Some(grid) = &self.lambdas {
            if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
                bail!("cost weights must be finite and non-negative, got {bad}");
            }
        }
        for (name, v) in [("lr", self.lr), ("ft_lr", self.ft_lr), ("qat_lr", self.qat_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name} must be a positive finite number, got {v}");
            }
        }
        Ok(())
    }

    /// The sweep grid: the configured weights or the default 18-point grid.
    pub fn grid(&self) -> Vec<f64> {
        match &self.lambdas {
            Some(v) => v.clone(),
            None => tinybp::nas::lambda_grid(),
        }
    }
}

/// Where the dataset comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSpec {
    Synthetic { seed: u64 },
    Path(PathBuf),
}

pub fn parse_dataset(s: &str) -> Result<DatasetSpec> {
    if let Some(rest) = s.strip_prefix("synthetic:") {
        let seed: u64 = rest
            .parse()
            .with_context(|| format!("bad synthetic seed {rest:?} (want synthetic:<u64>)"))?;
        return Ok(DatasetSpec::Synthetic { seed });
    }
    let path = PathBuf::from(s);
    if !path.is_file() {
        bail!(
            "dataset file {} not found (pass an NDJSON record file, or synthetic:<seed> \
             for the generator)",
            path.display()
        );
    }
    Ok(DatasetSpec::Path(path))
}

/// Write `bytes` under a temporary name, then rename into place, so readers
/// never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("cannot move {} into place", tmp.display()))?;
    Ok(())
}

/// Record how an output was produced: the resolved config and the crate
/// versions, as `manifest_<command>.json` in the output directory.
pub fn write_manifest(out_dir: &Path, command: &str, cfg: &PipelineConfig) -> Result<PathBuf> {
    let manifest = serde_json::json!({
        "command": command,
        "config": cfg,
        "seed": cfg.seed,
        "versions": {
            "tinybp": tinybp_version(),
            "tinybp-cli": env!("CARGO_PKG_VERSION"),
        },
    });
    let path = out_dir.join(format!("manifest_{}.json", command.replace('-', "_")));
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&path, &bytes)?;
    Ok(path)
}

fn tinybp_version() -> &'static str {
    // The library crate pins its version through the workspace, same as us.
    env!("CARGO_PKG_VERSION")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_an_empty_config() {
        let cfg = PipelineConfig::load(&Overrides::default()).unwrap();
        assert_eq!(cfg.dataset, "synthetic:0");
        assert_eq!(cfg.budget_bytes, 512 * 1024);
        assert_eq!(cfg.grid().len(), 18);
    }

    #[test]
    fn file_then_flags_override_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "dataset = \"synthetic:7\"\nprofile = \"unet\"\ntarget = \"sig2sig\"\nepochs = 2\n",
        )
        .unwrap();
        let ov = Overrides {
            config: Some(path),
            epochs: Some(5),
            ..Overrides::default()
        };
        let cfg = PipelineConfig::load(&ov).unwrap();
        assert_eq!(cfg.dataset, "synthetic:7");
        assert_eq!(cfg.profile, Profile::Unet);
        assert_eq!(cfg.target, TargetSpec::Sig2sig);
        assert_eq!(cfg.epochs, 5);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "epocs = 3\n").unwrap();
        let ov = Overrides {
            config: Some(path),
            ..Overrides::default()
        };
        let err = PipelineConfig::load(&ov).unwrap_err();
        assert!(format!("{err:#}").contains("bad config"));
    }

    #[test]
    fn empty_lambda_grid_is_a_usage_error() {
        let ov = Overrides {
            lambdas: Some(Vec::new()),
            ..Overrides::default()
        };
        let err = PipelineConfig::load(&ov).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn dataset_spec_parses_synthetic_and_rejects_missing_files() {
        assert_eq!(
            parse_dataset("synthetic:42").unwrap(),
            DatasetSpec::Synthetic { seed: 42 }
        );
        assert!(parse_dataset("synthetic:x").is_err());
        let err = parse_dataset("/no/such/records.ndjson").unwrap_err();
        assert!(err.to_string().contains("not found"));

        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("d.ndjson");
        std::fs::write(&file, "").unwrap();
        assert_eq!(
            parse_dataset(file.to_str().unwrap()).unwrap(),
            DatasetSpec::Path(file)
        );
    }

    #[test]
    fn manifest_lands_next_to_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::default();
        let path = write_manifest(dir.path(), "train-seed", &cfg).unwrap();
        assert_eq!(path.file_name().unwrap(), "manifest_train_seed.json");
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(v["command"], "train-seed");
        assert_eq!(v["config"]["budget_bytes"], 524288);
        assert!(v["versions"]["tinybp"].is_string());
    }
}
