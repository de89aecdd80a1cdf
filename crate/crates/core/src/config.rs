//! Run configuration file (TOML).
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected. The top-level `seed` replaces the seeds of the `training`,
//! `sampler` and `data.synthetic` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CorpusConfig;
use crate::embeddings::EMBEDDING_DIM;
use crate::error::{Error, Result};
use crate::nn::NetworkConfig;
use crate::sampler::SamplerConfig;
use crate::sde::SdeParams;
use crate::stft::StftConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Corpus written by `tse synth`.
    pub synthetic: CorpusConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingsConfig {
    /// Embedding file or directory.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Checkpoints, training state and logs.
    pub out_dir: PathBuf,
    /// Starting point for `tse finetune`.
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            base_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub stft: StftConfig,
    pub sde: SdeParams,
    pub network: NetworkConfig,
    pub sampler: SamplerConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub embeddings: EmbeddingsConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Parses TOML text. Relative paths stay relative; see
    /// [`RunConfig::resolve_paths`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.training.seed = seed;
        self.sampler.seed = seed;
        self.data.synthetic.seed = seed;
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.data.train_manifest,
            &mut self.data.valid_manifest,
            &mut self.data.test_manifest,
            &mut self.embeddings.path,
            &mut self.paths.base_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.paths.out_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.sde.validate()?;
        self.network.validate()?;
        self.sampler.validate()?;
        self.training.validate()?;
        if self.network.speaker_embed_dim != EMBEDDING_DIM {
            return Err(Error::Config(format!(
                "network.speaker_embed_dim is {}, embeddings have {EMBEDDING_DIM} dimensions",
                self.network.speaker_embed_dim
            )));
        }
        let div = 1usize << self.network.depth;
        if !self.stft.bins().is_multiple_of(div) || !self.stft.frames.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "spectrogram {}x{} is not divisible by 2^depth = {div}",
                self.stft.bins(),
                self.stft.frames
            )));
        }
        if self.data.synthetic.sample_rate != self.stft.sample_rate {
            return Err(Error::Config(format!(
                "data.synthetic.sample_rate {} differs from stft.sample_rate {}",
                self.data.synthetic.sample_rate, self.stft.sample_rate
            )));
        }
        Ok(())
    }

    /// Small configuration for CPU-scale runs on the synthetic corpus.
    pub fn toy() -> Self {
        let mut cfg = Self {
            stft: StftConfig {
                frames: 32,
                ..StftConfig::default()
            },
            network: NetworkConfig {
                depth: 4,
                base_channels: 8,
                channel_multipliers: vec![1, 2, 2, 2],
                ..NetworkConfig::default()
            },
            training: TrainConfig {
                learning_rate: 2e-3,
                warmup_steps: 100,
                max_steps: 1500,
                sigma_weighted_loss: true,
                validation_samples: 4,
                checkpoint_every: 500,
                ..TrainConfig::default()
            },
            data: DataConfig {
                synthetic: CorpusConfig {
                    utterance_secs: 0.512,
                    train_both_orders: true,
                    ..CorpusConfig::default()
                },
                ..DataConfig::default()
            },
            ..Self::default()
        };
        cfg.set_seed(0);
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.sde.gamma, c.sde.sigma_min, c.sde.sigma_max), (2.0, 0.05, 0.5));
        assert_eq!((c.stft.alpha, c.stft.beta), (0.5, 0.15));
        assert_eq!((c.stft.n_fft, c.stft.window_len, c.stft.hop, c.stft.frames), (254, 256, 64, 256));
        assert_eq!((c.sampler.n_steps, c.sampler.snr), (30, 0.5));
        assert_eq!((c.training.learning_rate, c.training.warmup_steps), (5e-4, 2000));
        assert_eq!(c.network.time_embed_dim, 512);
        assert_eq!(c.network.speaker_embed_dim, 192);
    }

    #[test]
    fn toml_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[sde]\ngama = 2.0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("gama"), "{err}");
        let err = RunConfig::from_toml("colour = 1\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn partial_file_and_seed_override() {
        let cfg = RunConfig::from_toml("seed = 7\n[training]\nbatch_size = 4\n").unwrap();
        assert_eq!(cfg.training.batch_size, 4);
        assert_eq!(cfg.training.learning_rate, 5e-4);
        assert_eq!((cfg.training.seed, cfg.sampler.seed, cfg.data.synthetic.seed), (7, 7, 7));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[sde]\nsigma_min = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[stft]\nframes = 30\n").is_err());
        assert!(RunConfig::from_toml("[training]\nmode = \"sideways\"\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[data]\ntrain_manifest = \"d/train.jsonl\"\n[paths]\nout_dir = \"out\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.train_manifest.unwrap(), dir.path().join("d/train.jsonl"));
        assert_eq!(cfg.paths.out_dir, dir.path().join("out"));
    }

    #[test]
    fn shipped_toy_file_matches_builtin() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        let file = RunConfig::load(&path).unwrap();
        let toy = RunConfig::toy();
        assert_eq!(file.stft, toy.stft);
        assert_eq!(file.sde, toy.sde);
        assert_eq!(file.network, toy.network);
        assert_eq!(file.sampler, toy.sampler);
        assert_eq!(file.training, toy.training);
        assert_eq!(file.data.synthetic, toy.data.synthetic);
        assert!(file.data.train_manifest.unwrap().ends_with("data/toy/train.jsonl"));
    }
}
