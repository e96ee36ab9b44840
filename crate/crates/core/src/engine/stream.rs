use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::{Error, Result};
use crate::kernels::RealMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    System,
    Vision,
    Instruction,
}

impl Modality {
    pub fn is_text(self) -> bool {
        !matches!(self, Modality::Vision)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenInput {
    Id(usize),
    /// A precomputed d-vector (projected image features for vision tokens).
    Embedding(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub modality: Modality,
    pub input: TokenInput,
}

/// Modality-tagged input sequence laid out as system, vision, instruction.
/// Positions are the entry indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStream {
    entries: Vec<StreamEntry>,
    n_system: usize,
    n_vision: usize,
    n_instruction: usize,
}

impl TokenStream {
    pub fn new(system: Vec<TokenInput>, vision: Vec<Vec<f64>>, instruction: Vec<TokenInput>) -> Self {
        let (n_system, n_vision, n_instruction) = (system.len(), vision.len(), instruction.len());
        let entries = system
            .into_iter()
            .map(|input| StreamEntry {
                modality: Modality::System,
                input,
            })
            .chain(vision.into_iter().map(|v| StreamEntry {
                modality: Modality::Vision,
                input: TokenInput::Embedding(v),
            }))
            .chain(instruction.into_iter().map(|input| StreamEntry {
                modality: Modality::Instruction,
                input,
            }))
            .collect();
        Self {
            entries,
            n_system,
            n_vision,
            n_instruction,
        }
    }

    /// Checks that segments are contiguous and in system, vision,
    /// instruction order.
    pub fn from_entries(entries: Vec<StreamEntry>) -> Result<Self> {
        let mut last = Modality::System;
        for (pos, e) in entries.iter().enumerate() {
            if e.modality < last {
                return Err(Error::input(format!(
                    "{:?} token at position {pos} after a {:?} token",
                    e.modality, last
                )));
            }
            last = e.modality;
        }
        let count = |m| entries.iter().filter(|e| e.modality == m).count();
        Ok(Self {
            n_system: count(Modality::System),
            n_vision: count(Modality::Vision),
            n_instruction: count(Modality::Instruction),
            entries,
        })
    }

    /// Random ids for text segments, standard-normal vision embeddings.
    pub fn random<R: Rng>(
        rng: &mut R,
        vocab_size: usize,
        hidden_dim: usize,
        n_system: usize,
        n_vision: usize,
        n_instruction: usize,
    ) -> Self {
        let mut ids = |n: usize| -> Vec<TokenInput> { (0..n).map(|_| TokenInput::Id(rng.random_range(0..vocab_size))).collect() };
        let system = ids(n_system);
        let instruction = ids(n_instruction);
        let vision = (0..n_vision)
            .map(|_| {
                (0..hidden_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z
                    })
                    .collect()
            })
            .collect();
        Self::new(system, vision, instruction)
    }

    pub fn entries(&self) -> &[StreamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_system(&self) -> usize {
        self.n_system
    }

    pub fn n_vision(&self) -> usize {
        self.n_vision
    }

    pub fn n_instruction(&self) -> usize {
        self.n_instruction
    }

    pub fn n_text(&self) -> usize {
        self.n_system + self.n_instruction
    }

    pub fn modality(&self, pos: usize) -> Modality {
        self.entries[pos].modality
    }

    pub fn vision_range(&self) -> Range<usize> {
        self.n_system..self.n_system + self.n_vision
    }

    pub fn instruction_range(&self) -> Range<usize> {
        self.n_system + self.n_vision..self.len()
    }

    pub fn vision_positions(&self) -> Vec<usize> {
        self.vision_range().collect()
    }

    /// Sequence position of the `index`-th vision token.
    pub fn vision_position(&self, index: usize) -> usize {
        self.n_system + index
    }

    /// Index within the vision segment, if `pos` is a vision token.
    pub fn vision_index(&self, pos: usize) -> Option<usize> {
        self.vision_range().contains(&pos).then(|| pos - self.n_system)
    }

    pub fn last_position(&self) -> usize {
        self.len() - 1
    }

    /// Stream with `extra` appended to the instruction segment.
    pub fn extended(&self, extra: TokenInput) -> Self {
        let mut entries = self.entries.clone();
        entries.push(StreamEntry {
            modality: Modality::Instruction,
            input: extra,
        });
        Self {
            entries,
            n_system: self.n_system,
            n_vision: self.n_vision,
            n_instruction: self.n_instruction + 1,
        }
    }

    /// Prefix of the first `len` positions.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        Self::from_entries(self.entries[..len.min(self.len())].to_vec())
    }
}

impl Model {
    /// Input embedding of one token at `pos`, position code included.
    pub fn embed_token(&self, input: &TokenInput, pos: usize) -> Result<Vec<f64>> {
        let d = self.hidden_dim();
        let mut x = match input {
            TokenInput::Id(id) => {
                if *id >= self.config.vocab_size {
                    return Err(Error::input(format!(
                        "token id {id} outside vocabulary of {}",
                        self.config.vocab_size
                    )));
                }
                self.embedding.row(*id).to_vec()
            }
            TokenInput::Embedding(v) => {
                if v.len() != d {
                    return Err(Error::input(format!("embedding of length {} for d = {d}", v.len())));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("embedding at position {pos}")));
                }
                v.clone()
            }
        };
        for (xi, pe) in x.iter_mut().zip(self.positional_encoding(pos)) {
            *xi += pe;
        }
        Ok(x)
    }

    /// `H^(0)`: one row per stream position.
    pub fn embed(&self, stream: &TokenStream) -> Result<RealMatrix> {
        let rows = stream
            .entries()
            .iter()
            .enumerate()
            .map(|(pos, e)| self.embed_token(&e.input, pos))
            .collect::<Result<Vec<_>>>()?;
        RealMatrix::new(stream.len(), self.hidden_dim(), rows.concat())
    }
}
