use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::RealMatrix;

/// Architecture hyperparameters of the toy decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(num_layers: usize, hidden_dim: usize, num_heads: usize, ffn_dim: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            num_layers,
            hidden_dim,
            num_heads,
            ffn_dim,
            vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Weights of one pre-norm decoder block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w_q: RealMatrix,
    pub w_k: RealMatrix,
    pub w_v: RealMatrix,
    /// Output projection applied to the concatenated head outputs.
    pub w_o: RealMatrix,
    pub w_gate: RealMatrix,
    pub w_up: RealMatrix,
    pub w_down: RealMatrix,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
}

impl LayerWeights {
    /// Columns of `w_q` belonging to `head`.
    pub fn head_slice(&self, head: usize, head_dim: usize) -> (usize, usize) {
        (head * head_dim, (head + 1) * head_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    /// `vocab_size x d` token embedding table.
    pub embedding: RealMatrix,
    /// `vocab_size x d`; logits are `unembedding · h`.
    pub unembedding: RealMatrix,
    /// Per-channel multiplier on the sinusoidal position code.
    pub positional_gain: Vec<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> RealMatrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    RealMatrix::new(rows, cols, data).expect("finite normal samples")
}

/// Seeded model: weight matrices are standard normal scaled by `1/sqrt(d)`,
/// the embedding table is unscaled, norm gains start at 1.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let d = config.hidden_dim;
    let m = config.ffn_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            w_q: normal_matrix(&mut rng, d, d, scale),
            w_k: normal_matrix(&mut rng, d, d, scale),
            w_v: normal_matrix(&mut rng, d, d, scale),
            w_o: normal_matrix(&mut rng, d, d, scale),
            w_gate: normal_matrix(&mut rng, d, m, scale),
            w_up: normal_matrix(&mut rng, d, m, scale),
            w_down: normal_matrix(&mut rng, m, d, scale),
            attn_norm: vec![1.0; d],
            ffn_norm: vec![1.0; d],
        })
        .collect();
    let embedding = normal_matrix(&mut rng, config.vocab_size, d, 1.0);
    let unembedding = normal_matrix(&mut rng, config.vocab_size, d, scale);
    Ok(Model {
        config: config.clone(),
        layers,
        embedding,
        unembedding,
        positional_gain: vec![1.0; d],
    })
}

impl Model {
    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::input(format!("layer {layer} outside 1..={}", self.layers.len())));
        }
        Ok(&self.layers[layer - 1])
    }

    /// Additive sinusoidal position code for `pos`.
    pub fn positional_encoding(&self, pos: usize) -> Vec<f64> {
        let d = self.hidden_dim();
        (0..d)
            .map(|c| {
                let pair = (c / 2) as f64;
                let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
                let base = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                base * self.positional_gain[c]
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite()
            && self.unembedding.is_finite()
            && self.layers.iter().all(|l| {
                [&l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.w_gate, &l.w_up, &l.w_down]
                    .iter()
                    .all(|m| m.is_finite())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::new(2, 8, 2, 16, 10, 42);
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
    }

    #[test]
    fn seed_changes_weights() {
        let a = init_model(&ModelConfig::new(2, 8, 2, 16, 10, 42)).unwrap();
        let b = init_model(&ModelConfig::new(2, 8, 2, 16, 10, 43)).unwrap();
        assert_ne!(a.layers[0].w_q, b.layers[0].w_q);
    }

    #[test]
    fn shapes_follow_config() {
        let model = init_model(&ModelConfig::new(1, 8, 2, 16, 10, 0)).unwrap();
        let l = &model.layers[0];
        assert_eq!(l.w_q.shape(), (8, 8));
        assert_eq!(model.config.head_dim(), 4);
        assert_eq!(l.w_q.column_block(4, 8).shape(), (8, 4));
        assert_eq!(l.w_gate.shape(), (8, 16));
        assert_eq!(l.w_down.shape(), (16, 8));
        assert_eq!(model.unembedding.shape(), (10, 8));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig::new(1, 10, 3, 16, 10, 0);
        assert!(matches!(init_model(&cfg), Err(Error::Config(_))));
        assert!(ModelConfig::new(0, 8, 2, 16, 10, 0).validate().is_err());
    }
}
