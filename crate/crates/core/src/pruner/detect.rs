use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::influence::InfluenceRecord;
use super::params::{PruneParams, Selector};
use crate::engine::{LayerTrace, Modality};
use crate::error::{Error, Result};
use crate::kernels::top_n;

/// Influence records of one probed layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    pub layer: usize,
    pub records: Vec<InfluenceRecord>,
}

impl LayerSweep {
    pub fn min_cosine(&self) -> Option<f64> {
        self.records.iter().map(|r| r.cosine).min_by(f64::total_cmp)
    }
}

/// First layer whose smallest cosine falls below `theta_cos`.
pub fn detect_filtering_layer(sweeps: &[LayerSweep], params: &PruneParams) -> Option<usize> {
    sweeps
        .iter()
        .find(|s| s.min_cosine().is_some_and(|c| c < params.theta_cos))
        .map(|s| s.layer)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retention {
    pub retained: BTreeSet<usize>,
    /// Nothing cleared the threshold and the argmax-l2 token was kept.
    pub fallback: bool,
}

/// Tokens whose l2 influence reaches `theta_l2`; when none does, the single
/// token with the largest l2 (lowest position on ties).
pub fn select_retained(records: &[InfluenceRecord], params: &PruneParams) -> Retention {
    let retained: BTreeSet<usize> = records.iter().filter(|r| r.l2 >= params.theta_l2).map(|r| r.token).collect();
    if !retained.is_empty() || records.is_empty() {
        return Retention { retained, fallback: false };
    }
    let best = records
        .iter()
        .reduce(|a, b| if b.l2 > a.l2 || (b.l2 == a.l2 && b.token < a.token) { b } else { a })
        .expect("non-empty records");
    Retention {
        retained: BTreeSet::from([best.token]),
        fallback: true,
    }
}

/// Top-`k` vision columns by attention received from the rows the strategy
/// names, summed over heads. Returns sequence positions.
pub fn select_baseline(trace: &LayerTrace, strategy: Selector, k: usize) -> Result<BTreeSet<usize>> {
    let vision: Vec<usize> = (0..trace.positions.len())
        .filter(|&c| trace.modalities[c] == Modality::Vision)
        .collect();
    if k > vision.len() {
        return Err(Error::input(format!("k = {k} exceeds {} vision tokens", vision.len())));
    }
    let last = trace.positions.len() - 1;
    let rows: Vec<usize> = match strategy {
        Selector::AttnLast => vec![last],
        Selector::AttnText => (0..trace.positions.len())
            .filter(|&r| trace.modalities[r] == Modality::Instruction)
            .collect(),
        Selector::AttnVis => vision.clone(),
        Selector::ValueAware => {
            return Err(Error::input("value-aware selection needs influence records"));
        }
    };
    let scores: Vec<f64> = vision
        .iter()
        .map(|&c| trace.attention.iter().map(|a| rows.iter().map(|&r| a.get(r, c)).sum::<f64>()).sum())
        .collect();
    Ok(top_n(&scores, k).into_iter().map(|i| trace.positions[vision[i]]).collect())
}

/// A layer has no measurable impact when every record stays within both
/// thresholds.
pub fn has_impact(records: &[InfluenceRecord], params: &PruneParams) -> bool {
    !records.iter().all(|r| r.cosine >= params.theta_cos && r.l2 < params.theta_l2)
}

/// Last layer of the first run of `exit_patience` consecutive no-impact
/// layers. `history` starts at the filtering layer.
pub fn detect_exit_layer(history: &[LayerSweep], params: &PruneParams) -> Option<usize> {
    let mut streak = 0;
    for s in history {
        if has_impact(&s.records, params) {
            streak = 0;
        } else {
            streak += 1;
            if streak >= params.exit_patience {
                return Some(s.layer);
            }
        }
    }
    None
}
