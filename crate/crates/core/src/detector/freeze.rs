use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParameterRegistry, Scalar};

use crate::tensor::name_has_prefix;

/// Parameter-name prefixes held fixed during training. The empty policy
/// trains everything.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezePolicy {
    pub frozen_prefixes: Vec<String>,
}

impl FreezePolicy {
    pub fn unfrozen() -> Self {
        FreezePolicy::default()
    }

    /// Backbone and RPN fixed, only the box head trains.
    pub fn frozen_backbone_rpn() -> Self {
        FreezePolicy {
            frozen_prefixes: vec!["backbone".into(), "rpn".into()],
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name_has_prefix(name, p))
    }
}

/// Marks each entry trainable iff no frozen prefix matches its name.
/// Entries that become frozen have their velocity zeroed.
pub fn apply_freeze_policy<T: Scalar>(reg: &mut ParameterRegistry<T>, policy: &FreezePolicy) -> Result<()> {
    for p in &policy.frozen_prefixes {
        if !reg.names().any(|n| name_has_prefix(n, p)) {
            let valid: BTreeSet<String> = reg
                .names()
                .flat_map(|n| {
                    let parts: Vec<&str> = n.split('.').collect();
                    (1..parts.len()).map(move |k| parts[..k].join("."))
                })
                .collect();
            return Err(Error::Config(format!(
                "freeze prefix {p:?} matches no parameter; valid prefixes: {}",
                valid.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
    }
    for (name, e) in reg.iter_mut() {
        let frozen = policy.is_frozen(name);
        if frozen && e.trainable {
            e.velocity.iter_mut().for_each(|v| *v = T::zero());
        }
        e.trainable = !frozen;
    }
    Ok(())
}
