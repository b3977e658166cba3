use serde::{Deserialize, Serialize};

use super::{ParamEntry, ParameterRegistry, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.0025,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One SGD step with momentum and L2 weight decay on every trainable entry:
///
/// ```text
/// g' = grad + weight_decay·p
/// v  = momentum·v + g'
/// p  = p − learning_rate·v
/// ```
///
/// Frozen entries (values and velocities) are left untouched. Every gradient
/// is cleared afterwards.
pub fn sgd_momentum_step<T: Scalar>(reg: &mut ParameterRegistry<T>, cfg: &OptimizerConfig) -> Result<()> {
    cfg.validate()?;
    if let Some((name, _)) = reg
        .iter()
        .find(|(_, e)| e.trainable && e.tensor.grad().is_none())
    {
        return Err(Error::Contract(format!(
            "trainable parameter {name} has no gradient"
        )));
    }
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for (_, e) in reg.iter_mut() {
        if e.trainable {
            let grad = e.tensor.grad_mut().take().expect("checked above");
            let ParamEntry { tensor, velocity, .. } = e;
            for ((p, v), g) in tensor.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p = *p - lr * *v;
            }
        }
    }
    reg.clear_grads();
    Ok(())
}
