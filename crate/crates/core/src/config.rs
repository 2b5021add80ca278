//! Run configuration shared by every CLI command.
//!
//! A JSON file with optional sections `seed`, `data`, `model`, `train`,
//! `eval` and `paths`. Missing keys take their defaults; unknown keys are
//! rejected. Every command writes the effective configuration to
//! `run_config.json` next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{DataConfig, Split};
use crate::trainer::TrainConfig;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Architecture hyperparameters. Joint count, window length and the robot
/// table come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelHyper {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub ffn_ratio: usize,
    pub prompt_len: usize,
    pub human_prompt_len: usize,
    pub dropout: f64,
}

impl Default for ModelHyper {
    fn default() -> Self {
        let d = ModelConfig::desk(Vec::new());
        ModelHyper {
            d_model: d.d_model,
            n_enc_layers: d.n_enc_layers,
            n_dec_layers: d.n_dec_layers,
            n_heads: d.n_heads,
            ffn_ratio: d.ffn_ratio,
            prompt_len: d.prompt_len,
            human_prompt_len: d.human_prompt_len,
            dropout: d.dropout,
        }
    }
}

impl ModelHyper {
    pub fn build(&self, joints: usize, window: usize, robot_dofs: Vec<usize>) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            n_heads: self.n_heads,
            ffn_ratio: self.ffn_ratio,
            prompt_len: self.prompt_len,
            human_prompt_len: self.human_prompt_len,
            dropout: self.dropout,
            joints,
            robot_dofs,
            window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub splits: Vec<Split>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            splits: vec![Split::Test, Split::ZeroShot],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelHyper,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The file at `path`, or the defaults when none is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.eval.splits.is_empty() {
            return Err(Error::Config("eval.splits must name at least one split".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 4, "train": {"total_steps": 10}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.total_steps, 10);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.data, DataConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [r#"{"sed": 1}"#, r#"{"train": {"steps": 1}}"#, r#"{"model": {"width": 3}}"#] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.seed = 99;
        c.train.base_lr = 3e-4;
        c.eval.splits = vec![Split::Val];
        let path = c.echo(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), c);
    }

    #[test]
    fn desk_hyperparameters_match_preset() {
        let m = ModelHyper::default().build(12, 16, vec![7, 8]);
        assert_eq!(m, ModelConfig::desk(vec![7, 8]));
    }
}
