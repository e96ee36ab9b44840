use serde::{Deserialize, Serialize};

use crate::engine::trace::{AttentionView, ProbeRow};
use crate::engine::{prefill, LayerPlan, Model, PruneHooks, SequenceView, TokenStream};
use crate::error::{Error, Result};
use crate::kernels::{cosine_and_l2, MacCounter};
use crate::par;

/// How much masking column `token` moves the attention output of `row`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub layer: usize,
    pub row: usize,
    pub token: usize,
    pub cosine: f64,
    pub l2: f64,
    /// Weight on `token` summed over heads.
    pub attention_mass: f64,
}

/// Concatenated head outputs of row `r`, optionally leaving out column
/// `skip`. Columns are accumulated in order from `0.0`.
fn row_output(view: &AttentionView, r: usize, skip: Option<usize>) -> Vec<f64> {
    let heads = view.num_heads();
    let d = view.values.cols();
    let dk = d / heads;
    let mut out = vec![0.0; d];
    for h in 0..heads {
        let oh = &mut out[h * dk..(h + 1) * dk];
        for c in (0..view.columns.len()).filter(|&c| Some(c) != skip) {
            let w = view.weight(h, r, c);
            for (o, v) in oh.iter_mut().zip(&view.values.row(c)[h * dk..(h + 1) * dk]) {
                *o += w * v;
            }
        }
    }
    out
}

fn record(view: &AttentionView, r: usize, c: usize, original: &[f64]) -> Result<InfluenceRecord> {
    let masked = row_output(view, r, Some(c));
    let (cosine, l2) = cosine_and_l2(original, &masked)?;
    Ok(InfluenceRecord {
        layer: view.layer,
        row: view.rows[r],
        token: view.columns[c],
        cosine,
        l2,
        attention_mass: (0..view.num_heads()).map(|h| view.weight(h, r, c)).sum(),
    })
}

/// Zeroes the weight from row `i` to column `j` in every head, without
/// renormalizing, and compares the recomputed output with the original.
pub fn influence_of_token(view: &AttentionView, i: usize, j: usize) -> Result<InfluenceRecord> {
    if j > i {
        return Err(Error::Causality { row: i, col: j });
    }
    let r = view.row_index(i)?;
    let c = view.column_index(j)?;
    let original = row_output(view, r, None);
    record(view, r, c, &original)
}

/// One record per probed token of a probe row, reusing the row's stored
/// output. Each recomputation is charged to `counter`.
pub fn influences_from_probe(probe: &ProbeRow, counter: &mut MacCounter) -> Result<Vec<InfluenceRecord>> {
    let view = probe.view();
    let cols: Vec<usize> = probe.probed.iter().map(|&p| view.column_index(p)).collect::<Result<_>>()?;
    let records = par::map(&cols, |&c| record(&view, 0, c, &probe.output));
    let d = probe.values.cols() as u64;
    let n = probe.columns.len() as u64;
    counter.add(cols.len() as u64 * d * n.saturating_sub(1));
    records.into_iter().collect()
}

struct ProbeAt {
    layer: usize,
    tokens: Option<Vec<usize>>,
    records: Option<Vec<InfluenceRecord>>,
}

impl PruneHooks for ProbeAt {
    fn probe_request(&mut self, layer: usize, view: &SequenceView) -> Option<Vec<usize>> {
        (layer == self.layer).then(|| self.tokens.clone().unwrap_or_else(|| view.vision_positions()))
    }

    fn plan_layer(&mut self, _layer: usize, _view: &SequenceView, probe: Option<&ProbeRow>, counter: &mut MacCounter) -> Result<LayerPlan> {
        if let Some(p) = probe {
            self.records = Some(influences_from_probe(p, counter)?);
        }
        Ok(LayerPlan::dense())
    }
}

/// Influence of each vision token (or of `tokens`) on the last input
/// position's attention output at `layer` of a dense run.
pub fn probe_layer_influences(model: &Model, stream: &TokenStream, layer: usize, tokens: Option<&[usize]>) -> Result<Vec<InfluenceRecord>> {
    model.layer(layer)?;
    let mut hooks = ProbeAt {
        layer,
        tokens: tokens.map(<[usize]>::to_vec),
        records: None,
    };
    prefill(model, stream, &mut hooks)?;
    hooks.records.ok_or_else(|| Error::state(format!("no probe ran at layer {layer}")))
}
