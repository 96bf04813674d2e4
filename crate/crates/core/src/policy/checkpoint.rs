use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackwardKind, ModelSpec, PolicyModel};
use crate::approximator::{Adam, ParamVector};
use crate::envs::DagEnv;
use crate::error::{GfnError, Result};
use crate::rng;

pub const CHECKPOINT_FORMAT: &str = "stable-gfn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON dump of the model's named parameter slices and optional
/// optimizer state. Floats round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub environment: String,
    pub model: ModelSpec,
    pub backward: BackwardKind,
    pub params: ParamVector,
    pub optimizer: Option<Adam>,
    pub round: u64,
}

impl Checkpoint {
    pub fn capture(model: &PolicyModel, env: &dyn DagEnv, optimizer: Option<&Adam>, round: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            environment: env.describe(),
            model: model.spec().clone(),
            backward: model.backward_kind(),
            params: model.params().clone(),
            optimizer: optimizer.cloned(),
            round,
        }
    }

    /// Rebuilds the model for `env`. The environment must be the one the
    /// checkpoint was taken on.
    pub fn restore(&self, env: &dyn DagEnv) -> Result<PolicyModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(GfnError::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if self.environment != env.describe() {
            return Err(GfnError::InvalidArgument(format!(
                "checkpoint was taken on {}, not {}",
                self.environment,
                env.describe()
            )));
        }
        let log_z_mult = self
            .params
            .slices()
            .iter()
            .find(|s| s.name == "log_z")
            .map_or(super::DEFAULT_LOG_Z_LR_MULTIPLIER, |s| s.lr_multiplier);
        let mut r = rng::stream(0, "checkpoint");
        let mut model = PolicyModel::new(env, self.model.clone(), self.backward, log_z_mult, &mut r)?;
        if model.params().slices() != self.params.slices() {
            return Err(crate::error::invalid(
                "checkpoint parameter layout does not match the model",
            ));
        }
        model.params_mut().assign(self.params.values())?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}
