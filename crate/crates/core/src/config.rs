//! Run configuration: one TOML file per run, one optional table per command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::ReconstructOptions;
use crate::finetune::FinetuneConfig;
use crate::pretrain::PretrainConfig;
use crate::sampler::{StylizeOptions, TextEditOptions};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Overrides every per-command seed when set.
    pub seed: Option<u64>,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub prepare_style: PrepareStyleConfig,
    pub finetune: FinetuneRunConfig,
    pub stylize: StylizeRunConfig,
    pub text_edit: TextEditRunConfig,
    pub density_rank: DensityRankConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: None,
            out: None,
            pretrain: PretrainConfig::default(),
            prepare_style: PrepareStyleConfig::default(),
            finetune: FinetuneRunConfig::default(),
            stylize: StylizeRunConfig::default(),
            text_edit: TextEditRunConfig::default(),
            density_rank: DensityRankConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// The style image: a PNG, or the toy poster filter applied to a procedural
/// face drawn from `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleSource {
    pub image: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareStyleConfig {
    pub base: Option<PathBuf>,
    pub style: StyleSource,
    pub t0: usize,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for PrepareStyleConfig {
    fn default() -> Self {
        Self {
            base: None,
            style: StyleSource::default(),
            t0: 50,
            candidates: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneRunConfig {
    pub base: Option<PathBuf>,
    pub style: StyleSource,
    pub training: FinetuneConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StylizeRunConfig {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub options: StylizeOptions,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEditRunConfig {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub source: String,
    pub target: String,
    pub recompute_x_t0: bool,
    pub options: StylizeOptions,
    pub text: TextEditOptions,
}

/// Images for evaluation: PNGs in `dir`, or `generate` procedural ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSet {
    pub dir: Option<PathBuf>,
    pub generate: usize,
    pub seed: u64,
}

impl Default for ImageSet {
    fn default() -> Self {
        Self {
            dir: None,
            generate: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityRankConfig {
    pub base: Option<PathBuf>,
    /// Generated corpora are half artifact-occluded and report an AUC.
    pub corpus: ImageSet,
    pub k: usize,
    pub seed: u64,
    pub reconstruct: ReconstructOptions,
}

impl Default for DensityRankConfig {
    fn default() -> Self {
        Self {
            base: None,
            corpus: ImageSet {
                generate: 40,
                ..ImageSet::default()
            },
            k: 10,
            seed: 0,
            reconstruct: ReconstructOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRun {
    pub lambda: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub runs: Vec<AblationRun>,
    pub inputs: ImageSet,
    pub options: StylizeOptions,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Pushes the top-level seed into every command table.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.pretrain.seed = seed;
        self.prepare_style.seed = seed;
        self.finetune.training.seed = seed;
        self.density_rank.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let cfg = RunConfig::parse("version = 1\n[finetune.training]\niterations = 5\n").unwrap();
        assert_eq!(cfg.finetune.training.iterations, 5);
        assert_eq!(cfg.finetune.training.t0, 50);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(matches!(RunConfig::parse("version = 1\nbogus = 3\n"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::parse("version = 1\n[stylize.options]\nlambda = 0.1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::parse("version = 2\n"), Err(Error::Config(_))));
    }
}
