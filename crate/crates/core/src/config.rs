//! Experiment configuration: environment, model, training and evaluation
//! settings in one TOML (or JSON) document. Unknown keys are rejected and
//! every omitted setting takes its default, so the resolved form written
//! next to the outputs reproduces the run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::envs::{hypergrid_default_r0, one_more_mode_tree, DagEnv, Hypergrid, RegularTree};
use crate::error::{GfnError, Result};
use crate::policy::{BackwardKind, ModelSpec, PolicyModel};
use crate::rng;
use crate::trainer::{MonitorConfig, TrainConfig};

fn default_r1() -> f64 {
    0.5
}

fn default_r2() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Tree {
        branching: usize,
        depth: usize,
        /// One reward per leaf, left to right; unit rewards when omitted.
        #[serde(default)]
        leaf_rewards: Option<Vec<f64>>,
    },
    Hypergrid {
        dim: usize,
        side: usize,
        /// Background reward; defaults to `10^(-2 log2(side/8) - 1)`.
        #[serde(default)]
        r0: Option<f64>,
        #[serde(default = "default_r1")]
        r1: f64,
        #[serde(default = "default_r2")]
        r2: f64,
    },
    /// Unit-reward tree whose last leaf has reward `epsilon`, optionally
    /// promoted to 1.
    OneMoreMode {
        branching: usize,
        depth: usize,
        epsilon: f64,
        #[serde(default = "default_true")]
        promoted: bool,
    },
}

impl EnvSpec {
    pub fn build(&self) -> Result<Arc<dyn DagEnv>> {
        Ok(match self {
            EnvSpec::Tree {
                branching,
                depth,
                leaf_rewards,
            } => match leaf_rewards {
                Some(r) => Arc::new(RegularTree::with_rewards(*branching, *depth, r.clone())?),
                None => Arc::new(RegularTree::new(*branching, *depth)?),
            },
            EnvSpec::Hypergrid { dim, side, r0, r1, r2 } => {
                let r0 = match r0 {
                    Some(r) => *r,
                    None => hypergrid_default_r0(*side)?,
                };
                Arc::new(Hypergrid::new(*dim, *side, r0, *r1, *r2)?)
            }
            EnvSpec::OneMoreMode {
                branching,
                depth,
                epsilon,
                promoted,
            } => {
                let (prev, new) = one_more_mode_tree(*branching, *depth, *epsilon)?;
                if *promoted {
                    Arc::new(new)
                } else {
                    Arc::new(prev)
                }
            }
        })
    }

    /// Fills in computed defaults so the spec is explicit.
    fn resolve(&mut self) -> Result<()> {
        if let EnvSpec::Hypergrid { side, r0, .. } = self {
            if r0.is_none() {
                *r0 = Some(hypergrid_default_r0(*side)?);
            }
        }
        Ok(())
    }
}

/// Evaluation during and after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Exact TV from enumeration.
    pub oracle: bool,
    /// Rounds between in-training oracle evaluations.
    pub every: u64,
    /// Samples of each in-training total-L1 estimate; 0 skips it.
    pub monitor_samples: usize,
    /// Samples of the final evaluation.
    pub samples: usize,
    pub workers: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            oracle: true,
            every: 100,
            monitor_samples: 0,
            samples: 100_000,
            workers: 1,
        }
    }
}

impl EvaluationConfig {
    pub fn monitor(&self) -> MonitorConfig {
        MonitorConfig {
            oracle: self.oracle,
            every: self.every,
            samples: self.monitor_samples,
            workers: self.workers.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub environment: EnvSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub backward_policy: BackwardKind,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| GfnError::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| GfnError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let ModelSpec::Mlp { hidden } = &self.model {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(GfnError::Config(
                    "mlp hidden widths must be nonempty and positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Copy with every default made explicit.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        out.environment.resolve()?;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fresh model for `env`, initialized from the `"init"` stream.
    pub fn build_model(&self, env: &dyn DagEnv) -> Result<PolicyModel> {
        let mut r = rng::stream(self.seed, "init");
        PolicyModel::new(
            env,
            self.model.clone(),
            self.backward_policy,
            self.train.log_z_lr_multiplier,
            &mut r,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Objective;

    const TREE: &str = r#"
seed = 3
[environment]
kind = "tree"
branching = 3
depth = 3
[model]
kind = "tabular"
[train]
objective = "tb"
max_rounds = 50
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ExperimentConfig::parse(TREE).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model, ModelSpec::Tabular);
        assert_eq!(cfg.train.max_rounds, 50);
        assert_eq!(cfg.train.batch_size, 32);
        assert!((cfg.train.tv_target - 0.01).abs() < 1e-15);
        let env = cfg.environment.build().unwrap();
        assert_eq!(env.terminating_states().len(), 27);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let extra = TREE.replace("max_rounds = 50", "max_rounds = 50\nbogus = 1");
        assert!(ExperimentConfig::parse(&extra).is_err());
        let bad_obj = TREE.replace("\"tb\"", "\"nope\"");
        assert!(ExperimentConfig::parse(&bad_obj).is_err());
        let bad_d = TREE.replace("max_rounds = 50", "tv_target = 2.0");
        assert!(matches!(ExperimentConfig::parse(&bad_d), Err(GfnError::Config(_))));
        let bad_env = TREE.replace("\"tree\"", "\"maze\"");
        assert!(ExperimentConfig::parse(&bad_env).is_err());
    }

    #[test]
    fn resolved_json_round_trips() {
        let text = r#"
[environment]
kind = "hypergrid"
dim = 2
side = 8
[train]
stabilized = false
objective = "db"
"#;
        let cfg = ExperimentConfig::parse(text).unwrap().resolved().unwrap();
        match &cfg.environment {
            EnvSpec::Hypergrid { r0, r1, r2, .. } => {
                assert!((r0.unwrap() - 0.1).abs() < 1e-12);
                assert_eq!((*r1, *r2), (0.5, 2.0));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.train.objective, Objective::Db);
        let back = ExperimentConfig::parse(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn one_more_mode_env() {
        let text = r#"
[environment]
kind = "one_more_mode"
branching = 2
depth = 2
epsilon = 0.001
promoted = false
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        let env = cfg.environment.build().unwrap();
        let rewards: Vec<f64> = env.terminating_states().iter().map(|&s| env.reward(s)).collect();
        assert_eq!(rewards, vec![1.0, 1.0, 1.0, 0.001]);
    }
}
