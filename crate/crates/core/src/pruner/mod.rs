//! Three-stage vision pruning: merge shallow vision attention, skip vision
//! rows until fusion starts, keep only influential tokens, then drop vision
//! entirely once it stops mattering.

pub mod detect;
pub mod influence;
pub mod merge;
pub mod params;
pub mod schedule;

pub use detect::{detect_exit_layer, detect_filtering_layer, has_impact, select_baseline, select_retained, LayerSweep, Retention};
pub use influence::{influence_of_token, influences_from_probe, probe_layer_influences, InfluenceRecord};
pub use merge::{grouped_row_mass, merge_vision_attention};
pub use params::{PruneParams, Selector};
pub use schedule::{apply_schedule, modes_are_monotone, FallbackFlags, PruneSchedule, ScheduleOutcome};
