//! TOML run configuration: a strict schema with defaults for every field,
//! merged with command-line overrides (flag > file > default).

use std::path::Path;

use serde::{Deserialize, Serialize};
use tandem_core::engine::{EngineConfig, EngineKind, EnvSpec};
use tandem_core::envs::{GridWorldSpec, StepTimeKind, StepTimeModel, SyntheticSpec};
use tandem_core::policy::LearnerHyperparams;
use tandem_core::Error;

/// Whole-file schema. Every section is optional; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub engine: EngineSection,
    pub hyperparams: HyperparamsSection,
    pub env: EnvSection,
    #[serde(rename = "async")]
    pub async_queue: AsyncSection,
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKindToken {
    Hts,
    Lockstep,
    Async,
}

impl EngineKindToken {
    pub fn to_kind(self) -> EngineKind {
        match self {
            EngineKindToken::Hts => EngineKind::Hts,
            EngineKindToken::Lockstep => EngineKind::Lockstep,
            EngineKindToken::Async => EngineKind::Async,
        }
    }

    pub fn parse(token: &str) -> Result<Self, Error> {
        match token {
            "hts" => Ok(EngineKindToken::Hts),
            "lockstep" => Ok(EngineKindToken::Lockstep),
            "async" => Ok(EngineKindToken::Async),
            other => Err(Error::usage(format!(
                "unknown engine kind {other:?}; expected hts, lockstep, or async"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub kind: EngineKindToken,
    pub n_envs: usize,
    pub n_actors: usize,
    pub sync_interval: usize,
    pub total_steps: u64,
    pub seed: u64,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            kind: EngineKindToken::Hts,
            n_envs: 4,
            n_actors: 2,
            sync_interval: 8,
            total_steps: 4 * 8 * 100,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperparamsSection {
    pub discount: f64,
    pub nstep: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
}

impl Default for HyperparamsSection {
    fn default() -> Self {
        HyperparamsSection {
            discount: 0.99,
            nstep: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSection {
    Gridworld(GridworldSection),
    Synthetic(SyntheticSection),
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection::Gridworld(GridworldSection::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridworldSection {
    pub width: usize,
    pub height: usize,
    pub start: [usize; 2],
    pub goal: [usize; 2],
    pub horizon: u64,
    pub step_reward: f64,
    pub goal_reward: f64,
}

impl Default for GridworldSection {
    fn default() -> Self {
        GridworldSection {
            width: 5,
            height: 5,
            start: [0, 0],
            goal: [4, 4],
            horizon: 64,
            step_reward: 0.0,
            goal_reward: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub feature_dim: usize,
    pub action_count: usize,
    pub horizon: u64,
    pub step_time: StepTimeSection,
    pub actor_compute_time: f64,
    pub real_sleep: bool,
    pub dense_features: bool,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            feature_dim: 32,
            action_count: 4,
            horizon: 128,
            step_time: StepTimeSection::Constant { seconds: 0.0 },
            actor_compute_time: 0.0,
            real_sleep: false,
            dense_features: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StepTimeSection {
    Constant { seconds: f64 },
    Exponential { rate: f64 },
    Gamma { shape: f64, rate: f64 },
}

impl StepTimeSection {
    fn to_kind(self) -> StepTimeKind {
        match self {
            StepTimeSection::Constant { seconds } => StepTimeKind::Constant { seconds },
            StepTimeSection::Exponential { rate } => StepTimeKind::Exponential { rate },
            StepTimeSection::Gamma { shape, rate } => StepTimeKind::Gamma { shape, rate },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsyncSection {
    pub queue_capacity: usize,
}

impl Default for AsyncSection {
    fn default() -> Self {
        AsyncSection { queue_capacity: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatToken {
    Csv,
    Jsonl,
}

impl FormatToken {
    pub fn parse(token: &str) -> Result<Self, Error> {
        match token {
            "csv" => Ok(FormatToken::Csv),
            "jsonl" => Ok(FormatToken::Jsonl),
            other => Err(Error::usage(format!(
                "unknown output format {other:?}; expected csv or jsonl"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Destination path; "-" writes to stdout.
    pub path: String,
    pub format: FormatToken,
    /// Drop the wall_time and sps columns (they vary run to run).
    pub strip_timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { path: "-".to_string(), format: FormatToken::Csv, strip_timing: false }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Translate into the engine's native config (validation happens when
    /// the run starts).
    pub fn to_engine_config(&self) -> EngineConfig<f64> {
        EngineConfig {
            kind: self.engine.kind.to_kind(),
            n_envs: self.engine.n_envs,
            n_actors: self.engine.n_actors,
            sync_interval: self.engine.sync_interval,
            total_steps: self.engine.total_steps,
            seed: self.engine.seed,
            hyperparams: LearnerHyperparams {
                discount: self.hyperparams.discount,
                nstep: self.hyperparams.nstep,
                entropy_coef: self.hyperparams.entropy_coef,
                value_coef: self.hyperparams.value_coef,
                learning_rate: self.hyperparams.learning_rate,
            },
            env: match &self.env {
                EnvSection::Gridworld(g) => EnvSpec::GridWorld(GridWorldSpec {
                    width: g.width,
                    height: g.height,
                    start: (g.start[0], g.start[1]),
                    goal: (g.goal[0], g.goal[1]),
                    horizon: g.horizon,
                    step_reward: g.step_reward,
                    goal_reward: g.goal_reward,
                }),
                EnvSection::Synthetic(s) => EnvSpec::Synthetic(SyntheticSpec {
                    feature_dim: s.feature_dim,
                    action_count: s.action_count,
                    horizon: s.horizon,
                    model: StepTimeModel {
                        kind: s.step_time.to_kind(),
                        actor_compute_time: s.actor_compute_time,
                    },
                    real_sleep: s.real_sleep,
                    dense_features: s.dense_features,
                }),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfigFile::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfigFile = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg: RunConfigFile = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfigFile::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg: RunConfigFile = toml::from_str(
            "[engine]\nkind = \"lockstep\"\nseed = 9\n\n[output]\nformat = \"jsonl\"\n",
        )
        .unwrap();
        assert_eq!(cfg.engine.kind, EngineKindToken::Lockstep);
        assert_eq!(cfg.engine.seed, 9);
        assert_eq!(cfg.engine.n_envs, EngineSection::default().n_envs);
        assert_eq!(cfg.output.format, FormatToken::Jsonl);
        assert_eq!(cfg.hyperparams, HyperparamsSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfigFile>("[engine]\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfigFile>("[mystery]\nx = 1\n").is_err());
        assert!(toml::from_str::<RunConfigFile>(
            "[env]\nkind = \"gridworld\"\nwidth = 3\nnot_a_key = 2\n"
        )
        .is_err());
    }

    #[test]
    fn synthetic_env_parses() {
        let cfg: RunConfigFile = toml::from_str(
            "[env]\nkind = \"synthetic\"\nfeature_dim = 64\n\
             step_time = { kind = \"exponential\", rate = 500.0 }\nreal_sleep = true\n",
        )
        .unwrap();
        match cfg.env {
            EnvSection::Synthetic(s) => {
                assert_eq!(s.feature_dim, 64);
                assert_eq!(s.step_time, StepTimeSection::Exponential { rate: 500.0 });
                assert!(s.real_sleep);
                assert_eq!(s.action_count, SyntheticSection::default().action_count);
            }
            other => panic!("expected synthetic env, got {other:?}"),
        }
    }

    #[test]
    fn engine_config_conversion_maps_fields() {
        let cfg: RunConfigFile = toml::from_str(
            "[engine]\nkind = \"async\"\nn_envs = 2\nn_actors = 6\n\
             sync_interval = 4\ntotal_steps = 64\nseed = 3\n",
        )
        .unwrap();
        let ec = cfg.to_engine_config();
        assert_eq!(ec.kind, EngineKind::Async);
        assert_eq!(ec.n_actors, 6);
        assert_eq!(ec.total_steps, 64);
        match ec.env {
            EnvSpec::GridWorld(g) => {
                assert_eq!((g.width, g.height), (5, 5));
                assert_eq!(g.goal, (4, 4));
            }
            other => panic!("expected gridworld, got {other:?}"),
        }
    }

    #[test]
    fn bad_engine_token_is_rejected() {
        assert!(toml::from_str::<RunConfigFile>("[engine]\nkind = \"warp\"\n").is_err());
        assert!(EngineKindToken::parse("warp").is_err());
        assert_eq!(EngineKindToken::parse("async").unwrap(), EngineKindToken::Async);
    }
}
