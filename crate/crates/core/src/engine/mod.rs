//! Decoder-only multimodal transformer with trace capture and pruning hooks.

pub mod cache;
pub mod fixture;
pub mod forward;
pub mod model;
pub mod stream;
pub mod trace;

pub use cache::{evict_vision_kv, KvCache, LayerCache};
pub use fixture::{build_fixture, ExpectedFacts, Fixture, FixtureKind};
pub use forward::{
    decode_step, prefill, prefill_dense, unembed, DecodeLayerTrace, DecodeOutput, IdentityHooks, LayerMode, LayerPlan, MaskHooks, MaskRule,
    PrefillOutput, PruneHooks, RowSelector, RunCounters, SequenceView,
};
pub use model::{init_model, LayerWeights, Model, ModelConfig};
pub use stream::{Modality, StreamEntry, TokenInput, TokenStream};
pub use trace::{export_jsonl, AttentionView, LayerTrace, ProbeRow, TraceRecord, WeightSource};
