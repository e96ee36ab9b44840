use serde::{Deserialize, Serialize};

use super::forward::LayerMode;
use super::stream::Modality;
use crate::error::{Error, Result};
use crate::kernels::{l1_norm, l2_norm, RealMatrix};

/// Everything one layer computed. Row and column `a` of every matrix refer
/// to `positions[a]`; only positions that attended at this layer appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub mode: LayerMode,
    pub positions: Vec<usize>,
    pub modalities: Vec<Modality>,
    /// One `|A| x |A|` softmax matrix per head.
    pub attention: Vec<RealMatrix>,
    pub queries: RealMatrix,
    pub keys: RealMatrix,
    pub values: RealMatrix,
    /// Concatenated head outputs before the output projection.
    pub output: RealMatrix,
    pub value_l1: Vec<f64>,
    /// Positions still in the sequence after this layer's drops.
    pub hidden_positions: Vec<usize>,
    pub input_hidden: RealMatrix,
    pub hidden: RealMatrix,
    pub probe: Option<ProbeRow>,
}

/// Side-channel attention row of the last input token against text keys
/// plus a chosen set of vision keys. Never written back to the residual
/// stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub row_position: usize,
    pub columns: Vec<usize>,
    pub modalities: Vec<Modality>,
    pub probed: Vec<usize>,
    /// Per head, one weight per column.
    pub weights: Vec<Vec<f64>>,
    pub values: RealMatrix,
    pub output: Vec<f64>,
}

/// Borrowed attention rows plus values, shared by traces and probe rows.
#[derive(Debug, Clone, Copy)]
pub struct AttentionView<'a> {
    pub layer: usize,
    pub rows: &'a [usize],
    pub columns: &'a [usize],
    pub weights: WeightSource<'a>,
    pub values: &'a RealMatrix,
}

#[derive(Debug, Clone, Copy)]
pub enum WeightSource<'a> {
    Matrices(&'a [RealMatrix]),
    Rows(&'a [Vec<f64>]),
}

impl AttentionView<'_> {
    pub fn num_heads(&self) -> usize {
        match self.weights {
            WeightSource::Matrices(m) => m.len(),
            WeightSource::Rows(r) => r.len(),
        }
    }

    pub fn weight(&self, head: usize, row: usize, col: usize) -> f64 {
        match self.weights {
            WeightSource::Matrices(m) => m[head].get(row, col),
            WeightSource::Rows(r) => r[head][col],
        }
    }

    pub fn row_index(&self, position: usize) -> Result<usize> {
        self.rows
            .iter()
            .position(|&p| p == position)
            .ok_or_else(|| Error::input(format!("position {position} is not a row at layer {}", self.layer)))
    }

    pub fn column_index(&self, position: usize) -> Result<usize> {
        self.columns
            .iter()
            .position(|&p| p == position)
            .ok_or_else(|| Error::input(format!("position {position} is not a column at layer {}", self.layer)))
    }
}

impl LayerTrace {
    pub fn view(&self) -> AttentionView<'_> {
        AttentionView {
            layer: self.layer,
            rows: &self.positions,
            columns: &self.positions,
            weights: WeightSource::Matrices(&self.attention),
            values: &self.values,
        }
    }

    pub fn index_of(&self, position: usize) -> Option<usize> {
        self.positions.iter().position(|&p| p == position)
    }

    /// Last row of every head's attention matrix.
    pub fn last_row_attention(&self) -> Vec<Vec<f64>> {
        let last = self.positions.len() - 1;
        self.attention.iter().map(|a| a.row(last).to_vec()).collect()
    }

    /// Hidden state of the last position after this layer.
    pub fn last_hidden(&self) -> &[f64] {
        self.hidden.row(self.hidden.rows() - 1)
    }
}

impl ProbeRow {
    pub fn view(&self) -> AttentionView<'_> {
        AttentionView {
            layer: self.layer,
            rows: std::slice::from_ref(&self.row_position),
            columns: &self.columns,
            weights: WeightSource::Rows(&self.weights),
            values: &self.values,
        }
    }
}

/// One line of the JSONL trace export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub layer: usize,
    pub mode: LayerMode,
    pub positions: Vec<usize>,
    pub modalities: Vec<Modality>,
    pub last_row_attention: Vec<Vec<f64>>,
    pub value_l1: Vec<f64>,
    pub hidden_positions: Vec<usize>,
    pub hidden_norms: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attention: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hidden: Option<Vec<Vec<f64>>>,
}

impl TraceRecord {
    pub fn from_trace(trace: &LayerTrace, full_matrices: bool) -> Self {
        Self {
            layer: trace.layer,
            mode: trace.mode,
            positions: trace.positions.clone(),
            modalities: trace.modalities.clone(),
            last_row_attention: trace.last_row_attention(),
            value_l1: trace.value_l1.clone(),
            hidden_positions: trace.hidden_positions.clone(),
            hidden_norms: trace.hidden.to_rows().iter().map(|r| l2_norm(r)).collect(),
            attention: full_matrices.then(|| trace.attention.iter().map(|a| a.to_rows()).collect()),
            output: full_matrices.then(|| trace.output.to_rows()),
            hidden: full_matrices.then(|| trace.hidden.to_rows()),
        }
    }
}

/// JSONL text, one record per selected layer (all when `layers` is empty).
pub fn export_jsonl(traces: &[LayerTrace], layers: &[usize], full_matrices: bool) -> Result<String> {
    if let Some(l) = layers.iter().find(|&&l| !traces.iter().any(|t| t.layer == l)) {
        return Err(Error::input(format!("no trace for layer {l}")));
    }
    let mut out = String::new();
    for t in traces.iter().filter(|t| layers.is_empty() || layers.contains(&t.layer)) {
        let line = serde_json::to_string(&TraceRecord::from_trace(t, full_matrices))
            .map_err(|e| Error::state(format!("trace serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub(crate) fn value_l1_norms(values: &RealMatrix) -> Vec<f64> {
    (0..values.rows()).map(|r| l1_norm(values.row(r))).collect()
}
