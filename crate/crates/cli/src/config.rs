use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use visipruner_core::engine::fixture::{build_fixture_with, FixtureLayout, RoutingCoefficients};
use visipruner_core::engine::{build_fixture, init_model, ExpectedFacts, FixtureKind, Model, ModelConfig, TokenStream};
use visipruner_core::probes::ProbeSpec;
use visipruner_core::pruner::PruneParams;

use crate::output::Failure;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Jsonl,
}

/// Model shape; the seed comes from the top-level `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StreamSpec {
    Fixture {
        fixture: FixtureKind,
        #[serde(default)]
        layout: Option<FixtureLayout>,
    },
    Random {
        n_system: usize,
        n_vision: usize,
        n_instruction: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub params: PruneParams,
}

/// Replacements for the run's own shape in an extra analytical cost report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostOverrides {
    pub num_layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub n_vision: Option<usize>,
    pub n_text: Option<usize>,
    pub vocab_size: Option<usize>,
}

fn default_variants() -> Vec<Variant> {
    vec![Variant {
        name: "default".into(),
        params: PruneParams::default(),
    }]
}

fn default_formats() -> Vec<Format> {
    vec![Format::Json]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    pub stream: StreamSpec,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub probes: Vec<ProbeSpec>,
    #[serde(default)]
    pub cost: Option<CostOverrides>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

pub struct Experiment {
    pub model: Model,
    pub stream: TokenStream,
    pub facts: Option<ExpectedFacts>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("reading {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Failure::config(e.into_inner().to_string(), Some(field))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig::new(m.num_layers, m.hidden_dim, m.num_heads, m.ffn_dim, m.vocab_size, self.seed)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.version != CONFIG_VERSION {
            return Err(Failure::config(
                format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version),
                Some("version".into()),
            ));
        }
        self.model_config()
            .validate()
            .map_err(|e| Failure::config(e.to_string(), Some("model".into())))?;
        let mut names = std::collections::BTreeSet::new();
        for (i, v) in self.variants.iter().enumerate() {
            let field = format!("variants[{i}]");
            if v.name.is_empty() || !v.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(Failure::config(
                    format!("variant name {:?} must be non-empty [A-Za-z0-9_-]", v.name),
                    Some(format!("{field}.name")),
                ));
            }
            if !names.insert(v.name.clone()) {
                return Err(Failure::config(
                    format!("duplicate variant name {:?}", v.name),
                    Some(format!("{field}.name")),
                ));
            }
            v.params
                .validate()
                .map_err(|e| Failure::config(e.to_string(), Some(format!("{field}.params"))))?;
        }
        for (i, p) in self.probes.iter().enumerate() {
            p.validate(self.model.num_layers)
                .map_err(|e| Failure::config(e.to_string(), Some(format!("probes[{i}]"))))?;
        }
        if let StreamSpec::Random { n_instruction: 0, .. } = self.stream {
            return Err(Failure::config(
                "n_instruction must be at least 1",
                Some("stream.n_instruction".into()),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Experiment, Failure> {
        let config = self.model_config();
        let stream_err = |e: visipruner_core::Error| Failure::config(e.to_string(), Some("stream".into()));
        match &self.stream {
            StreamSpec::Fixture { fixture, layout } => {
                let fx = match layout {
                    Some(l) => build_fixture_with(*fixture, &config, *l, RoutingCoefficients::default()),
                    None => build_fixture(*fixture, &config),
                }
                .map_err(stream_err)?;
                Ok(Experiment {
                    model: fx.model,
                    stream: fx.stream,
                    facts: Some(fx.facts),
                })
            }
            StreamSpec::Random {
                n_system,
                n_vision,
                n_instruction,
            } => {
                let model = init_model(&config).map_err(stream_err)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x0057_4ea4);
                let stream = TokenStream::random(&mut rng, config.vocab_size, config.hidden_dim, *n_system, *n_vision, *n_instruction);
                Ok(Experiment {
                    model,
                    stream,
                    facts: None,
                })
            }
        }
    }
}
