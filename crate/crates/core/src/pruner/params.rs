use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    ValueAware,
    AttnLast,
    AttnText,
    AttnVis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneParams {
    pub merge_layer: usize,
    pub probe_start_layer: usize,
    pub theta_cos: f64,
    pub theta_l2: f64,
    pub exit_patience: usize,
    pub selector: Selector,
    pub baseline_top_k: usize,
    /// Vision index (0-based within the vision segment) that receives the
    /// merged mass. Defaults to the first vision token.
    pub merge_index: usize,
    pub merge_enabled: bool,
    pub skip_enabled: bool,
    pub detect_enabled: bool,
}

impl Default for PruneParams {
    fn default() -> Self {
        Self {
            merge_layer: 1,
            probe_start_layer: 2,
            theta_cos: 0.995,
            theta_l2: 0.2,
            exit_patience: 2,
            selector: Selector::ValueAware,
            baseline_top_k: 10,
            merge_index: 0,
            merge_enabled: true,
            skip_enabled: true,
            detect_enabled: true,
        }
    }
}

impl PruneParams {
    /// Every stage switched off: prefill runs exactly like a dense pass.
    pub fn null() -> Self {
        Self {
            merge_enabled: false,
            skip_enabled: false,
            detect_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_cos > 0.0 && self.theta_cos <= 1.0) {
            return Err(Error::config(format!("theta_cos {} outside (0, 1]", self.theta_cos)));
        }
        if !self.theta_l2.is_finite() || self.theta_l2 < 0.0 {
            return Err(Error::config(format!("theta_l2 {} must be finite and >= 0", self.theta_l2)));
        }
        if self.exit_patience == 0 {
            return Err(Error::config("exit_patience must be at least 1"));
        }
        if self.merge_layer == 0 {
            return Err(Error::config("merge_layer is 1-based"));
        }
        if self.merge_layer >= self.probe_start_layer {
            return Err(Error::config(format!(
                "merge_layer {} must precede probe_start_layer {}",
                self.merge_layer, self.probe_start_layer
            )));
        }
        Ok(())
    }
}
