//! Line-oriented run configuration: `[section]` headers and `key = value`
//! pairs, no other syntax. Unknown sections or keys are rejected so typos
//! fail loudly. The GREENVAE_SEED environment variable overrides the seed.

use std::path::{Path, PathBuf};

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::rae::RegKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelName {
    Vanilla,
    Rae(RegKind),
    Iaf,
    Hvae,
}

impl ModelName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ModelName::Vanilla),
            "rae-l2" => Ok(ModelName::Rae(RegKind::L2)),
            "rae-gp" => Ok(ModelName::Rae(RegKind::GradientPenalty)),
            "rae-sn" => Ok(ModelName::Rae(RegKind::SpectralNorm)),
            "iaf" => Ok(ModelName::Iaf),
            "hvae" => Ok(ModelName::Hvae),
            other => Err(Error::config(format!(
                "unknown model '{other}' (expected vanilla, rae-l2, rae-gp, rae-sn, iaf or hvae)"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ModelName::Vanilla => "vanilla".into(),
            ModelName::Rae(kind) => format!("rae-{}", kind.name()),
            ModelName::Iaf => "iaf".into(),
            ModelName::Hvae => "hvae".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSpec {
    Synthetic { kind: SyntheticKind, n: usize, side: usize },
    Idx { images: PathBuf, labels: Option<PathBuf> },
}

/// Everything a training run needs, validated.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelName,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub data: DataSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub decay: f64,
    pub base_gamma: f64,
    /// Checkpoint also every this many epochs (0: only at the end).
    pub save_every: usize,
    pub out_dir: PathBuf,
    // rae
    pub rae_lambda: Option<f64>,
    pub rae_code_gamma: f64,
    pub gp_probes: usize,
    pub gp_eps: f64,
    pub sn_iters: usize,
    // flow
    pub flow_steps: usize,
    pub context_dim: usize,
    // hvae
    pub hvae_groups: Vec<usize>,
    pub hvae_latent_dim: usize,
    pub hvae_film: bool,
    pub hvae_bottom_up: bool,
    // second stage
    pub ss_hidden: usize,
    /// 0 means the default: twice the first-stage epochs.
    pub ss_epochs: usize,
    pub ss_batch_size: usize,
    pub ss_learning_rate: f64,
    /// Verbatim text for checkpoint echo and manifests.
    pub raw: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelName::Vanilla,
            latent_dim: 16,
            base_channels: 8,
            data: DataSpec::Synthetic {
                kind: SyntheticKind::Blobs,
                n: 1000,
                side: 16,
            },
            epochs: 5,
            batch_size: 100,
            learning_rate: 1e-3,
            seed: 0,
            decay: 0.99,
            base_gamma: 1.0,
            save_every: 0,
            out_dir: PathBuf::from("runs/out"),
            rae_lambda: None,
            rae_code_gamma: 1e-3,
            gp_probes: 1,
            gp_eps: 1e-2,
            sn_iters: 1,
            flow_steps: 4,
            context_dim: 16,
            hvae_groups: vec![1, 1],
            hvae_latent_dim: 2,
            hvae_film: false,
            hvae_bottom_up: false,
            ss_hidden: 1536,
            ss_epochs: 0,
            ss_batch_size: 100,
            ss_learning_rate: 1e-3,
            raw: String::new(),
        }
    }
}

impl TrainConfig {
    /// Parse the text form. Does not consult the environment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig {
            raw: text.to_string(),
            ..TrainConfig::default()
        };
        let mut section = String::new();
        let mut dataset_kind: Option<String> = None;
        let mut data_n: Option<usize> = None;
        let mut data_side: Option<usize> = None;
        let mut idx_images: Option<PathBuf> = None;
        let mut idx_labels: Option<PathBuf> = None;

        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}: unterminated section", lineno + 1)))?;
                section = name.trim().to_string();
                match section.as_str() {
                    "model" | "data" | "train" | "rae" | "flow" | "hvae" | "second-stage" => {}
                    other => {
                        return Err(Error::config(format!(
                            "line {}: unknown section '[{other}]'",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad_key = || {
                Error::config(format!(
                    "line {}: unknown key '{key}' in section '[{section}]'",
                    lineno + 1
                ))
            };
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::config(format!("line {}: '{v}' is not an integer", lineno + 1)))
            };
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| Error::config(format!("line {}: '{v}' is not a number", lineno + 1)))
            };
            let parse_bool = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::config(format!(
                    "line {}: '{v}' is not true/false",
                    lineno + 1
                ))),
            };
            match (section.as_str(), key) {
                ("model", "name") => cfg.model = ModelName::parse(value)?,
                ("model", "latent_dim") => cfg.latent_dim = parse_usize(value)?,
                ("model", "base_channels") => cfg.base_channels = parse_usize(value)?,
                ("data", "dataset") => dataset_kind = Some(value.to_string()),
                ("data", "n") => data_n = Some(parse_usize(value)?),
                ("data", "side") => data_side = Some(parse_usize(value)?),
                ("data", "images") => idx_images = Some(PathBuf::from(value)),
                ("data", "labels") => idx_labels = Some(PathBuf::from(value)),
                ("train", "epochs") => cfg.epochs = parse_usize(value)?,
                ("train", "batch_size") => cfg.batch_size = parse_usize(value)?,
                ("train", "learning_rate") => cfg.learning_rate = parse_f64(value)?,
                ("train", "seed") => {
                    cfg.seed = value.parse::<u64>().map_err(|_| {
                        Error::config(format!("line {}: '{value}' is not a seed", lineno + 1))
                    })?
                }
                ("train", "decay") => cfg.decay = parse_f64(value)?,
                ("train", "base_gamma") => cfg.base_gamma = parse_f64(value)?,
                ("train", "save_every") => cfg.save_every = parse_usize(value)?,
                ("train", "out_dir") => cfg.out_dir = PathBuf::from(value),
                ("rae", "lambda") => cfg.rae_lambda = Some(parse_f64(value)?),
                ("rae", "code_gamma") => cfg.rae_code_gamma = parse_f64(value)?,
                ("rae", "gp_probes") => cfg.gp_probes = parse_usize(value)?,
                ("rae", "gp_eps") => cfg.gp_eps = parse_f64(value)?,
                ("rae", "sn_iters") => cfg.sn_iters = parse_usize(value)?,
                ("flow", "steps") => cfg.flow_steps = parse_usize(value)?,
                ("flow", "context_dim") => cfg.context_dim = parse_usize(value)?,
                ("hvae", "groups") => {
                    cfg.hvae_groups = value
                        .split(',')
                        .map(|s| parse_usize(s.trim()))
                        .collect::<Result<Vec<_>>>()?;
                }
                ("hvae", "latent_dim") => cfg.hvae_latent_dim = parse_usize(value)?,
                ("hvae", "film") => cfg.hvae_film = parse_bool(value)?,
                ("hvae", "bottom_up") => cfg.hvae_bottom_up = parse_bool(value)?,
                ("second-stage", "hidden") => cfg.ss_hidden = parse_usize(value)?,
                ("second-stage", "epochs") => cfg.ss_epochs = parse_usize(value)?,
                ("second-stage", "batch_size") => cfg.ss_batch_size = parse_usize(value)?,
                ("second-stage", "learning_rate") => cfg.ss_learning_rate = parse_f64(value)?,
                _ => return Err(bad_key()),
            }
        }

        match dataset_kind.as_deref() {
            None | Some("blobs") | Some("rings") => {
                let kind = SyntheticKind::parse(dataset_kind.as_deref().unwrap_or("blobs")).unwrap();
                cfg.data = DataSpec::Synthetic {
                    kind,
                    n: data_n.unwrap_or(1000),
                    side: data_side.unwrap_or(16),
                };
            }
            Some("idx") => {
                let images = idx_images
                    .ok_or_else(|| Error::config("dataset 'idx' needs 'images = <path>'"))?;
                cfg.data = DataSpec::Idx {
                    images,
                    labels: idx_labels,
                };
            }
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown dataset '{other}' (expected blobs, rings or idx)"
                )))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file and apply environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env();
        Ok(cfg)
    }

    /// GREENVAE_SEED overrides the config seed when set.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var("GREENVAE_SEED") {
            if let Ok(seed) = v.parse::<u64>() {
                self.seed = seed;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(msg.to_string()))
            }
        };
        check(self.latent_dim >= 1 && self.latent_dim <= 4096, "latent_dim must be in 1..=4096")?;
        check(
            self.base_channels >= 1 && self.base_channels <= 1024,
            "base_channels must be in 1..=1024",
        )?;
        check(self.epochs >= 1 && self.epochs <= 100_000, "epochs must be in 1..=100000")?;
        check(
            self.batch_size >= 1 && self.batch_size <= 65_536,
            "batch_size must be in 1..=65536",
        )?;
        check(
            self.learning_rate > 0.0 && self.learning_rate <= 1.0,
            "learning_rate must be in (0, 1]",
        )?;
        check(self.decay > 0.0 && self.decay < 1.0, "decay must be in (0, 1)")?;
        check(self.base_gamma > 0.0, "base_gamma must be positive")?;
        if let DataSpec::Synthetic { n, side, .. } = &self.data {
            check(*n >= 1, "data n must be >= 1")?;
            check(*side >= 8 && *side <= 256, "data side must be in 8..=256")?;
        }
        check(self.gp_probes >= 1, "gp_probes must be >= 1")?;
        check(self.gp_eps > 0.0, "gp_eps must be positive")?;
        check(self.sn_iters >= 1, "sn_iters must be >= 1")?;
        check(self.flow_steps >= 1 && self.flow_steps <= 32, "flow steps must be in 1..=32")?;
        check(self.context_dim >= 1, "context_dim must be >= 1")?;
        check(self.ss_hidden >= 1, "second-stage hidden must be >= 1")?;
        check(self.ss_batch_size >= 1, "second-stage batch_size must be >= 1")?;
        check(
            self.ss_learning_rate > 0.0 && self.ss_learning_rate <= 1.0,
            "second-stage learning_rate must be in (0, 1]",
        )?;
        Ok(())
    }

    /// Effective second-stage epoch count (default: twice the first stage).
    pub fn second_stage_epochs(&self) -> usize {
        if self.ss_epochs == 0 {
            self.epochs * 2
        } else {
            self.ss_epochs
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# demo
[model]
name = rae-gp
latent_dim = 8
base_channels = 4

[data]
dataset = blobs
n = 500
side = 16

[train]
epochs = 3
batch_size = 50
learning_rate = 0.002
seed = 9
";

    #[test]
    fn parses_and_echoes() {
        let cfg = TrainConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.model, ModelName::Rae(RegKind::GradientPenalty));
        assert_eq!(cfg.latent_dim, 8);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.raw, SAMPLE);
        match cfg.data {
            DataSpec::Synthetic { n, side, .. } => {
                assert_eq!((n, side), (500, 16));
            }
            _ => panic!("expected synthetic"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = "[model]\nname = vanilla\ntypo_key = 3\n";
        let err = TrainConfig::parse(bad).unwrap_err().to_string();
        assert!(err.contains("typo_key"), "{err}");
        let bad = "[mystery]\nx = 1\n";
        assert!(TrainConfig::parse(bad).is_err());
    }

    #[test]
    fn range_validation() {
        let bad = "[train]\nlearning_rate = -1\n";
        assert!(TrainConfig::parse(bad).is_err());
        let bad = "[train]\nepochs = 0\n";
        assert!(TrainConfig::parse(bad).is_err());
    }

    #[test]
    fn env_seed_override() {
        let mut cfg = TrainConfig::parse("[train]\nseed = 5\n").unwrap();
        std::env::set_var("GREENVAE_SEED", "1234");
        cfg.apply_env();
        std::env::remove_var("GREENVAE_SEED");
        assert_eq!(cfg.seed, 1234);
    }

    #[test]
    fn idx_dataset_needs_images() {
        let bad = "[data]\ndataset = idx\n";
        assert!(TrainConfig::parse(bad).is_err());
        let ok = "[data]\ndataset = idx\nimages = /tmp/x.idx\n";
        let cfg = TrainConfig::parse(ok).unwrap();
        match cfg.data {
            DataSpec::Idx { images, labels } => {
                assert_eq!(images, PathBuf::from("/tmp/x.idx"));
                assert!(labels.is_none());
            }
            _ => panic!(),
        }
    }
}
