//! Models with hand-wired routing so that sinks, critical tokens and dead
//! vision regions are known in advance.
//!
//! The top five hidden channels are reserved: three modality flags, a sink
//! flag and an answer payload. Random weights never read or write them.
//! Each head's last query/key/value coordinate is a routing coordinate that
//! only the flags feed, which lets a key carry a large signed bias toward
//! text queries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{init_model, Model, ModelConfig};
use super::stream::{TokenInput, TokenStream};
use crate::error::{Error, Result};

pub const RESERVED_CHANNELS: usize = 5;

/// Reserved hidden channels for a model of width `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub text: usize,
    pub vision: usize,
    pub critical: usize,
    pub sink: usize,
    pub payload: usize,
}

impl Channels {
    pub fn for_width(d: usize) -> Self {
        Self {
            text: d - 1,
            vision: d - 2,
            critical: d - 3,
            sink: d - 4,
            payload: d - 5,
        }
    }

    fn flags(&self) -> [usize; 4] {
        [self.text, self.vision, self.critical, self.sink]
    }

    fn all(&self) -> [usize; 5] {
        [self.text, self.vision, self.critical, self.sink, self.payload]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FixtureKind {
    /// One vision token soaks up the text rows' attention at every layer
    /// while carrying almost no value; a critical token fires at `layer`.
    EngineeredSink { layer: usize },
    /// One vision token matters at `layer` and nowhere else.
    CriticalToken { layer: usize },
    /// Text rows see one vision token on layers `2..=layer` and no vision
    /// token after `layer`.
    VisionDeadAfter { layer: usize },
    /// Identical vision embeddings, no position code, plain random weights.
    Uniform,
}

impl FixtureKind {
    pub fn from_name(name: &str, layer: usize) -> Result<Self> {
        match name {
            "engineered-sink" => Ok(Self::EngineeredSink { layer }),
            "critical-token" => Ok(Self::CriticalToken { layer }),
            "vision-dead-after" => Ok(Self::VisionDeadAfter { layer }),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::input(format!("unknown fixture kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::EngineeredSink { .. } => "engineered-sink",
            Self::CriticalToken { .. } => "critical-token",
            Self::VisionDeadAfter { .. } => "vision-dead-after",
            Self::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureLayout {
    pub n_system: usize,
    pub n_vision: usize,
    pub n_instruction: usize,
}

impl Default for FixtureLayout {
    fn default() -> Self {
        Self {
            n_system: 3,
            n_vision: 16,
            n_instruction: 5,
        }
    }
}

const SINK_FLAG: f64 = 1.0e5;
const SINK_CRITICAL: f64 = 0.5;

/// Coefficients of the hand-wired routing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingCoefficients {
    /// Flag value carried by text and ordinary vision tokens.
    pub flag: f64,
    /// Flag value of the sink; large so its normalized generic part, and
    /// with it its value vector, is tiny.
    pub sink_flag: f64,
    /// Key penalty on vision tokens; large enough that their softmax
    /// weights underflow to exactly zero.
    pub kill: f64,
    /// Key bonus of the critical token on its active layers.
    pub critical: f64,
    /// Key bonus of the critical token in the sink fixture; keeps its
    /// attention below the sink's.
    pub sink_critical: f64,
    pub sink: f64,
    /// Critical token's value on head 0's routing coordinate.
    pub payload: f64,
    pub answer_gain: f64,
    pub default_gain: f64,
}

impl Default for RoutingCoefficients {
    fn default() -> Self {
        Self {
            flag: 10.0,
            sink_flag: SINK_FLAG,
            kill: 1.0e4,
            critical: 10.0,
            sink_critical: SINK_CRITICAL,
            sink: 0.6,
            payload: 2.0,
            answer_gain: 250.0,
            default_gain: 10.0,
        }
    }
}

/// What the fixture was built to exhibit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedFacts {
    pub kind: FixtureKind,
    pub sink_position: Option<usize>,
    pub critical_position: Option<usize>,
    /// Layers on which text rows can see the critical token.
    pub critical_layers: Vec<usize>,
    pub filtering_layer: Option<usize>,
    /// Last layer on which any vision token reaches a text row.
    pub last_active_layer: Option<usize>,
    /// Vocabulary id driven by the critical token's payload.
    pub answer_token: Option<usize>,
    /// Vocabulary id that wins when no payload arrives.
    pub default_token: Option<usize>,
}

impl ExpectedFacts {
    pub fn exit_layer(&self, patience: usize, num_layers: usize) -> Option<usize> {
        let exit = self.last_active_layer? + patience;
        (exit <= num_layers).then_some(exit)
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: Model,
    pub stream: TokenStream,
    pub facts: ExpectedFacts,
}

pub fn build_fixture(kind: FixtureKind, config: &ModelConfig) -> Result<Fixture> {
    let layout = match kind {
        FixtureKind::Uniform => FixtureLayout {
            n_system: 0,
            ..FixtureLayout::default()
        },
        _ => FixtureLayout::default(),
    };
    build_fixture_with(kind, config, layout, RoutingCoefficients::default())
}

pub fn build_fixture_with(kind: FixtureKind, config: &ModelConfig, layout: FixtureLayout, coef: RoutingCoefficients) -> Result<Fixture> {
    config.validate()?;
    if layout.n_vision == 0 || layout.n_instruction == 0 {
        return Err(Error::input("fixtures need vision and instruction tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f1c7_0000_0001);
    if kind == FixtureKind::Uniform {
        return uniform(config, layout, &mut rng);
    }
    let d = config.hidden_dim;
    let dk = config.head_dim();
    if d < RESERVED_CHANNELS + 3 || dk < 2 || config.vocab_size < 3 {
        return Err(Error::input("routed fixtures need d >= 8, head_dim >= 2 and vocab >= 3"));
    }
    let l_max = config.num_layers;
    let (active, need_sink) = match kind {
        FixtureKind::CriticalToken { layer } | FixtureKind::EngineeredSink { layer } => {
            if !(2..=l_max).contains(&layer) {
                return Err(Error::input(format!("critical layer {layer} outside 2..={l_max}")));
            }
            (vec![layer], matches!(kind, FixtureKind::EngineeredSink { .. }))
        }
        FixtureKind::VisionDeadAfter { layer } => {
            if !(1..=l_max).contains(&layer) {
                return Err(Error::input(format!("dead-after layer {layer} outside 1..={l_max}")));
            }
            ((2..=layer).collect(), false)
        }
        FixtureKind::Uniform => unreachable!(),
    };
    if need_sink && layout.n_vision < 2 {
        return Err(Error::input("engineered-sink needs at least two vision tokens"));
    }

    let ch = Channels::for_width(d);
    let mut model = init_model(config)?;
    let routing: Vec<usize> = (0..config.num_heads).map(|h| (h + 1) * dk - 1).collect();
    let r0 = routing[0];

    for (li, w) in model.layers.iter_mut().enumerate() {
        let layer = li + 1;
        for m in [&mut w.w_q, &mut w.w_k, &mut w.w_v, &mut w.w_gate, &mut w.w_up] {
            for &c in &ch.all() {
                m.row_mut(c).fill(0.0);
            }
        }
        for m in [&mut w.w_q, &mut w.w_k, &mut w.w_v] {
            for r in 0..d {
                for &c in &routing {
                    m.set(r, c, 0.0);
                }
            }
        }
        for m in [&mut w.w_o, &mut w.w_down] {
            for r in 0..m.rows() {
                for &c in &ch.all() {
                    m.set(r, c, 0.0);
                }
            }
        }
        w.w_o.row_mut(r0).fill(0.0);
        w.w_o.set(r0, ch.payload, 1.0);
        let crit_key = match (active.contains(&layer), need_sink) {
            (true, true) => coef.sink_critical,
            (true, false) => coef.critical,
            (false, _) => -coef.kill,
        };
        for &r in &routing {
            for &f in &ch.flags() {
                w.w_q.set(f, r, 1.0);
            }
            w.w_k.set(ch.vision, r, -coef.kill);
            w.w_k.set(ch.critical, r, crit_key);
            w.w_k.set(ch.sink, r, coef.sink);
        }
        w.w_v.set(ch.critical, r0, coef.payload);
    }
    for &c in &ch.all() {
        model.positional_gain[c] = 0.0;
    }
    for id in 0..config.vocab_size {
        for &c in &ch.all() {
            model.embedding.set(id, c, 0.0);
            model.unembedding.set(id, c, 0.0);
        }
        model.embedding.set(id, ch.text, coef.flag);
    }
    let answer = config.vocab_size - 1;
    let default = config.vocab_size - 2;
    model.unembedding.row_mut(answer).fill(0.0);
    model.unembedding.set(answer, ch.payload, coef.answer_gain);
    model.unembedding.row_mut(default).fill(0.0);
    model.unembedding.set(default, ch.text, coef.default_gain);

    let critical = rng.random_range(0..layout.n_vision);
    let sink = need_sink.then(|| {
        let s = rng.random_range(0..layout.n_vision - 1);
        if s >= critical {
            s + 1
        } else {
            s
        }
    });
    let vision: Vec<Vec<f64>> = (0..layout.n_vision)
        .map(|i| {
            let mut v: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
                .collect();
            for &c in &ch.all() {
                v[c] = 0.0;
            }
            if Some(i) == sink {
                v.iter_mut().for_each(|x| *x = 0.0);
                v[ch.sink] = coef.sink_flag;
            } else if i == critical {
                v[ch.critical] = coef.flag;
            } else {
                v[ch.vision] = coef.flag;
            }
            v
        })
        .collect();
    let text_id = |rng: &mut ChaCha8Rng| TokenInput::Id(rng.random_range(0..config.vocab_size - 2));
    let system = (0..layout.n_system).map(|_| text_id(&mut rng)).collect();
    let instruction = (0..layout.n_instruction).map(|_| text_id(&mut rng)).collect();
    let stream = TokenStream::new(system, vision, instruction);

    let filtering_layer = active.first().copied();
    Ok(Fixture {
        model,
        facts: ExpectedFacts {
            kind,
            sink_position: sink.map(|s| stream.vision_position(s)),
            critical_position: Some(stream.vision_position(critical)),
            critical_layers: active.clone(),
            filtering_layer,
            last_active_layer: active.last().copied(),
            answer_token: Some(answer),
            default_token: Some(default),
        },
        stream,
    })
}

fn uniform(config: &ModelConfig, layout: FixtureLayout, rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let mut model = init_model(config)?;
    model.positional_gain.fill(0.0);
    let d = config.hidden_dim;
    let shared: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect();
    let id = |rng: &mut ChaCha8Rng| TokenInput::Id(rng.random_range(0..config.vocab_size));
    let system = (0..layout.n_system).map(|_| id(rng)).collect();
    let instruction = (0..layout.n_instruction).map(|_| id(rng)).collect();
    let stream = TokenStream::new(system, vec![shared; layout.n_vision], instruction);
    Ok(Fixture {
        model,
        stream,
        facts: ExpectedFacts {
            kind: FixtureKind::Uniform,
            sink_position: None,
            critical_position: None,
            critical_layers: Vec::new(),
            filtering_layer: None,
            last_active_layer: None,
            answer_token: None,
            default_token: None,
        },
    })
}

/// Config used throughout the fixture tests.
pub fn fixture_config(seed: u64) -> ModelConfig {
    ModelConfig::new(6, 32, 4, 64, 32, seed)
}
