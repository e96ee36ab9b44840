use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::detect::{detect_exit_layer, select_baseline, select_retained, LayerSweep};
use super::influence::influences_from_probe;
use super::params::{PruneParams, Selector};
use crate::engine::trace::ProbeRow;
use crate::engine::{
    evict_vision_kv, prefill, prefill_dense, LayerMode, LayerPlan, Model, PrefillOutput, PruneHooks, SequenceView, TokenStream,
};
use crate::error::{Error, Result};
use crate::kernels::MacCounter;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackFlags {
    /// No filtering layer was found; layers from `probe_start_layer` were
    /// rerun dense.
    pub filtering_undetected: bool,
    /// No token reached `theta_l2`; the argmax-l2 token was kept.
    pub empty_retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub filtering_layer: Option<usize>,
    pub retained_positions: BTreeSet<usize>,
    pub retained_vision_indices: BTreeSet<usize>,
    pub exit_layer: Option<usize>,
    pub per_layer_modes: Vec<LayerMode>,
    pub params: PruneParams,
    pub fallback_flags: FallbackFlags,
    /// Every probe sweep, in layer order.
    pub sweeps: Vec<LayerSweep>,
}

impl PruneSchedule {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::state(format!("schedule serialization: {e}")))
    }
}

/// True when modes read `dense* merge? (skip | dense-probe | dense)* sparse*
/// vision-free*`.
pub fn modes_are_monotone(modes: &[LayerMode]) -> bool {
    let mut merged = false;
    let mut last = 0;
    for &m in modes {
        let rank = match m {
            LayerMode::Dense if !merged => 0,
            LayerMode::Merge if !merged => {
                merged = true;
                1
            }
            LayerMode::Merge => return false,
            LayerMode::Dense | LayerMode::Skip | LayerMode::DenseProbe => 2,
            LayerMode::Sparse => 3,
            LayerMode::VisionFree => 4,
        };
        if rank < last {
            return false;
        }
        last = rank;
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Searching,
    Sparse,
    VisionFree,
}

struct Scheduler<'a> {
    params: &'a PruneParams,
    stream: &'a TokenStream,
    reference: Option<&'a PrefillOutput>,
    detect: bool,
    rerun: bool,
    phase: Phase,
    sweeps: Vec<LayerSweep>,
    history: Vec<LayerSweep>,
    filtering_layer: Option<usize>,
    exit_layer: Option<usize>,
    retained: BTreeSet<usize>,
    empty_retained: bool,
}

impl<'a> Scheduler<'a> {
    fn new(params: &'a PruneParams, stream: &'a TokenStream, reference: Option<&'a PrefillOutput>, rerun: bool) -> Self {
        Self {
            params,
            stream,
            reference,
            detect: params.detect_enabled && !rerun,
            rerun,
            phase: Phase::Searching,
            sweeps: Vec::new(),
            history: Vec::new(),
            filtering_layer: None,
            exit_layer: None,
            retained: BTreeSet::new(),
            empty_retained: false,
        }
    }

    fn skip_plan() -> LayerPlan {
        LayerPlan {
            mode: LayerMode::Skip,
            vision_attention: false,
            ..LayerPlan::dense()
        }
    }

    fn shallow_plan(&self) -> LayerPlan {
        if self.params.skip_enabled {
            Self::skip_plan()
        } else if self.detect {
            LayerPlan {
                mode: LayerMode::DenseProbe,
                ..LayerPlan::dense()
            }
        } else {
            LayerPlan::dense()
        }
    }

    fn drop_plan(mode: LayerMode, drop: Vec<usize>) -> LayerPlan {
        LayerPlan {
            mode,
            drop,
            ..LayerPlan::dense()
        }
    }

    fn choose_retained(&mut self, layer: usize, sweep: &LayerSweep) -> Result<()> {
        if self.params.selector == Selector::ValueAware {
            let r = select_retained(&sweep.records, self.params);
            self.retained = r.retained;
            self.empty_retained = r.fallback;
            return Ok(());
        }
        let reference = self
            .reference
            .ok_or_else(|| Error::state("baseline selector without a reference run"))?;
        let trace = reference
            .trace(layer)
            .ok_or_else(|| Error::state(format!("reference run has no layer {layer}")))?;
        let k = self.params.baseline_top_k.min(self.stream.n_vision());
        self.retained = select_baseline(trace, self.params.selector, k)?;
        Ok(())
    }

    fn after_probe(&mut self, layer: usize, view: &SequenceView, probe: &ProbeRow, counter: &mut MacCounter) -> Result<LayerPlan> {
        let sweep = LayerSweep {
            layer,
            records: influences_from_probe(probe, counter)?,
        };
        self.sweeps.push(sweep.clone());
        let present = view.vision_positions();
        if self.phase == Phase::Searching {
            if !sweep.min_cosine().is_some_and(|c| c < self.params.theta_cos) {
                return Ok(self.shallow_plan());
            }
            self.filtering_layer = Some(layer);
            self.choose_retained(layer, &sweep)?;
        }
        let retained_records = sweep.records.iter().filter(|r| self.retained.contains(&r.token)).cloned().collect();
        self.history.push(LayerSweep {
            layer,
            records: retained_records,
        });
        if let Some(exit) = detect_exit_layer(&self.history, self.params) {
            self.exit_layer = Some(exit);
            self.phase = Phase::VisionFree;
            return Ok(Self::drop_plan(LayerMode::VisionFree, present));
        }
        self.phase = Phase::Sparse;
        let drop = present.into_iter().filter(|p| !self.retained.contains(p)).collect();
        Ok(Self::drop_plan(LayerMode::Sparse, drop))
    }
}

impl PruneHooks for Scheduler<'_> {
    fn probe_request(&mut self, layer: usize, view: &SequenceView) -> Option<Vec<usize>> {
        if !self.detect || layer < self.params.probe_start_layer {
            return None;
        }
        let present = view.vision_positions();
        match self.phase {
            Phase::Searching if !present.is_empty() => Some(present),
            Phase::Sparse => Some(present.into_iter().filter(|p| self.retained.contains(p)).collect()),
            _ => None,
        }
    }

    fn plan_layer(&mut self, layer: usize, view: &SequenceView, probe: Option<&ProbeRow>, counter: &mut MacCounter) -> Result<LayerPlan> {
        let p = self.params;
        if layer < p.probe_start_layer {
            if p.merge_enabled && layer == p.merge_layer && self.stream.n_vision() > 0 {
                return Ok(LayerPlan {
                    mode: LayerMode::Merge,
                    merge_target: Some(self.stream.vision_position(p.merge_index)),
                    ..LayerPlan::dense()
                });
            }
            if p.skip_enabled && layer > p.merge_layer {
                return Ok(Self::skip_plan());
            }
            return Ok(LayerPlan::dense());
        }
        if self.rerun {
            return Ok(LayerPlan::dense());
        }
        if !self.detect {
            return Ok(self.shallow_plan());
        }
        match (self.phase, probe) {
            (Phase::VisionFree, _) => Ok(Self::drop_plan(LayerMode::VisionFree, view.vision_positions())),
            (_, Some(row)) => self.after_probe(layer, view, row, counter),
            (Phase::Searching, None) => Ok(self.shallow_plan()),
            (Phase::Sparse, None) => Ok(Self::drop_plan(LayerMode::Sparse, Vec::new())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub schedule: PruneSchedule,
    /// The pruned run; its cache already has vision rows evicted outside
    /// `[filtering_layer, exit_layer)`.
    pub output: PrefillOutput,
}

/// Runs prefill under the three-stage pruning policy.
pub fn apply_schedule(model: &Model, stream: &TokenStream, params: &PruneParams) -> Result<ScheduleOutcome> {
    params.validate()?;
    if params.detect_enabled && stream.n_instruction() == 0 {
        return Err(Error::input("pruning needs at least one instruction token to probe from"));
    }
    if params.merge_enabled && stream.n_vision() > 0 && params.merge_index >= stream.n_vision() {
        return Err(Error::input(format!(
            "merge index {} outside {} vision tokens",
            params.merge_index,
            stream.n_vision()
        )));
    }
    let reference = if params.detect_enabled && params.selector != Selector::ValueAware {
        Some(prefill_dense(model, stream)?)
    } else {
        None
    };

    let mut sched = Scheduler::new(params, stream, reference.as_ref(), false);
    let mut output = prefill(model, stream, &mut sched)?;
    let mut flags = FallbackFlags {
        filtering_undetected: false,
        empty_retained: sched.empty_retained,
    };
    if sched.detect && sched.filtering_layer.is_none() {
        let mut rerun = Scheduler::new(params, stream, None, true);
        let wasted = output.counters.total();
        output = prefill(model, stream, &mut rerun)?;
        output.counters.fallback.add(wasted);
        flags.filtering_undetected = true;
    }
    if let Some(r) = &reference {
        output.counters.probe.add(r.counters.total());
    }
    if let Some(f) = sched.filtering_layer {
        let end = sched.exit_layer.unwrap_or(model.num_layers() + 1);
        let layers: BTreeSet<usize> = (1..=model.num_layers()).filter(|&l| l < f || l >= end).collect();
        output.cache = evict_vision_kv(&output.cache, &layers)?;
    }
    let retained_vision_indices = sched.retained.iter().filter_map(|&p| stream.vision_index(p)).collect();
    let schedule = PruneSchedule {
        filtering_layer: sched.filtering_layer,
        retained_positions: sched.retained.clone(),
        retained_vision_indices,
        exit_layer: sched.exit_layer,
        per_layer_modes: output.modes(),
        params: params.clone(),
        fallback_flags: flags,
        sweeps: sched.sweeps,
    };
    Ok(ScheduleOutcome { schedule, output })
}
