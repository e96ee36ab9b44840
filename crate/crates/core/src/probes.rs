//! Read-only diagnostic experiments: attention knockouts, token masking,
//! vocabulary projections and sink statistics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::engine::{prefill, prefill_dense, LayerTrace, MaskHooks, MaskRule, Modality, Model, PrefillOutput, RowSelector, TokenStream};
use crate::error::{Error, Result};
use crate::kernels::{l2_norm, mat_vec, softmax, top_n, vec_mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnockoutMode {
    /// Text rows lose the vision columns.
    C,
    /// Text rows and vision rows both lose the vision columns.
    CAndV,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    AttnLast,
    AttnText,
    PosNearText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProbeSpec {
    Knockout {
        layers: Vec<usize>,
        mode: KnockoutMode,
    },
    MaskAttended {
        layers: Vec<usize>,
        fraction: f64,
        which: Which,
        criterion: Criterion,
    },
    MaskHalf {
        layers: Vec<usize>,
        side: Side,
    },
    SinkStats {
        #[serde(default = "first_layer")]
        layer: usize,
    },
    VoProjection {
        layer: usize,
        head: usize,
        #[serde(default = "default_top_n")]
        top_n: usize,
        #[serde(default)]
        softmax: bool,
    },
}

fn first_layer() -> usize {
    1
}

fn default_top_n() -> usize {
    5
}

impl ProbeSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeSpec::Knockout { .. } => "knockout",
            ProbeSpec::MaskAttended { .. } => "mask-attended",
            ProbeSpec::MaskHalf { .. } => "mask-half",
            ProbeSpec::SinkStats { .. } => "sink-stats",
            ProbeSpec::VoProjection { .. } => "vo-projection",
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let check = |layers: &[usize]| -> Result<()> {
            match layers.iter().find(|&&l| l == 0 || l > num_layers) {
                Some(l) => Err(Error::config(format!("probe layer {l} outside 1..={num_layers}"))),
                None => Ok(()),
            }
        };
        match self {
            ProbeSpec::Knockout { layers, .. } | ProbeSpec::MaskHalf { layers, .. } => check(layers),
            ProbeSpec::MaskAttended { layers, fraction, .. } => {
                if !(*fraction > 0.0 && *fraction <= 1.0) {
                    return Err(Error::config(format!("fraction {fraction} outside (0, 1]")));
                }
                check(layers)
            }
            ProbeSpec::SinkStats { layer } | ProbeSpec::VoProjection { layer, .. } => check(&[*layer]),
        }
    }
}

/// Last-position divergence from the dense run after one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: usize,
    pub delta_norm: f64,
    pub argmax_changed: bool,
    /// Logit-lens top ids of the probed run's last hidden state.
    pub top_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: String,
    pub layers: Vec<usize>,
    pub masked_positions: Vec<usize>,
    pub masked_vision_indices: Vec<usize>,
    pub logit_delta_norm: f64,
    pub logit_delta_max: f64,
    pub dense_argmax: usize,
    pub probe_argmax: usize,
    pub argmax_changed: bool,
    pub per_layer: Vec<LayerDelta>,
    pub logits: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sink: Option<SinkReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vo: Option<VocabProjection>,
}

impl ProbeReport {
    /// `layer,delta_norm,argmax_changed` rows.
    pub fn csv(&self) -> String {
        let mut out = String::from("layer,delta_norm,argmax_changed\n");
        for d in &self.per_layer {
            out.push_str(&format!("{},{:e},{}\n", d.layer, d.delta_norm, d.argmax_changed));
        }
        out
    }
}

pub fn argmax(v: &[f64]) -> usize {
    top_n(v, 1).first().copied().unwrap_or(0)
}

fn check_layers(model: &Model, layers: &BTreeSet<usize>) -> Result<()> {
    match layers.iter().find(|&&l| l == 0 || l > model.num_layers()) {
        Some(l) => Err(Error::input(format!("layer {l} outside 1..={}", model.num_layers()))),
        None => Ok(()),
    }
}

const LENS_TOP: usize = 5;

fn compare(
    kind: &str,
    model: &Model,
    stream: &TokenStream,
    dense: &PrefillOutput,
    probed: &PrefillOutput,
    layers: &BTreeSet<usize>,
    masked: &BTreeSet<usize>,
) -> Result<ProbeReport> {
    let diff: Vec<f64> = probed.logits.iter().zip(&dense.logits).map(|(a, b)| a - b).collect();
    let per_layer = dense
        .traces
        .iter()
        .zip(&probed.traces)
        .map(|(a, b)| {
            let (ha, hb) = (a.last_hidden(), b.last_hidden());
            let delta: Vec<f64> = hb.iter().zip(ha).map(|(x, y)| x - y).collect();
            let la = mat_vec(&model.unembedding, ha, None)?;
            let lb = mat_vec(&model.unembedding, hb, None)?;
            Ok(LayerDelta {
                layer: a.layer,
                delta_norm: l2_norm(&delta),
                argmax_changed: argmax(&la) != argmax(&lb),
                top_tokens: top_n(&lb, LENS_TOP),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (da, pa) = (argmax(&dense.logits), argmax(&probed.logits));
    Ok(ProbeReport {
        kind: kind.to_string(),
        layers: layers.iter().copied().collect(),
        masked_positions: masked.iter().copied().collect(),
        masked_vision_indices: masked.iter().filter_map(|&p| stream.vision_index(p)).collect(),
        logit_delta_norm: l2_norm(&diff),
        logit_delta_max: diff.iter().map(|x| x.abs()).fold(0.0, f64::max),
        dense_argmax: da,
        probe_argmax: pa,
        argmax_changed: da != pa,
        per_layer,
        logits: probed.logits.clone(),
        sink: None,
        vo: None,
    })
}

/// Runs prefill with the given mask rules on `layers`.
pub fn masked_run(model: &Model, stream: &TokenStream, layers: &BTreeSet<usize>, rules: &[MaskRule]) -> Result<PrefillOutput> {
    check_layers(model, layers)?;
    let mut hooks = MaskHooks {
        per_layer: layers.iter().map(|&l| (l, rules.to_vec())).collect(),
    };
    prefill(model, stream, &mut hooks)
}

/// Hides `columns` from text rows on `layers` (renormalizing the rest) and
/// compares with the dense run.
pub fn mask_vision_columns(
    model: &Model,
    stream: &TokenStream,
    layers: &BTreeSet<usize>,
    columns: &BTreeSet<usize>,
    kind: &str,
) -> Result<ProbeReport> {
    if let Some(c) = columns
        .iter()
        .find(|&&c| c >= stream.len() || stream.modality(c) != Modality::Vision)
    {
        return Err(Error::input(format!("position {c} is not a vision token")));
    }
    let rules = [MaskRule {
        rows: RowSelector::Text,
        columns: columns.clone(),
    }];
    let dense = prefill_dense(model, stream)?;
    let probed = masked_run(model, stream, layers, &rules)?;
    compare(kind, model, stream, &dense, &probed, layers, columns)
}

pub fn knockout_cross_attention(model: &Model, stream: &TokenStream, layers: &BTreeSet<usize>, mode: KnockoutMode) -> Result<ProbeReport> {
    let vision: BTreeSet<usize> = stream.vision_range().collect();
    let mut rules = vec![MaskRule {
        rows: RowSelector::Text,
        columns: vision.clone(),
    }];
    if mode == KnockoutMode::CAndV {
        rules.push(MaskRule {
            rows: RowSelector::Vision,
            columns: vision.clone(),
        });
    }
    let dense = prefill_dense(model, stream)?;
    let probed = masked_run(model, stream, layers, &rules)?;
    let kind = match mode {
        KnockoutMode::C => "knockout-c",
        KnockoutMode::CAndV => "knockout-c-and-v",
    };
    compare(kind, model, stream, &dense, &probed, layers, &vision)
}

/// Vision positions picked by `criterion` from the dense layer-1 trace.
pub fn select_attended(model: &Model, stream: &TokenStream, fraction: f64, which: Which, criterion: Criterion) -> Result<BTreeSet<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::input(format!("fraction {fraction} outside (0, 1]")));
    }
    let n_v = stream.n_vision();
    let count = ((fraction * n_v as f64).ceil() as usize).min(n_v);
    let dense = prefill_dense(model, stream)?;
    let t = dense.trace(1).ok_or_else(|| Error::state("model has no layers"))?;
    let cols: Vec<usize> = stream
        .vision_positions()
        .iter()
        .map(|&p| t.index_of(p).ok_or_else(|| Error::state("vision token missing from dense trace")))
        .collect::<Result<_>>()?;
    let rows: Vec<usize> = match criterion {
        Criterion::AttnLast => vec![t.positions.len() - 1],
        Criterion::AttnText => (0..t.positions.len())
            .filter(|&r| t.modalities[r] == Modality::Instruction)
            .collect(),
        Criterion::PosNearText => Vec::new(),
    };
    let scores: Vec<f64> = cols
        .iter()
        .enumerate()
        .map(|(i, &c)| match criterion {
            Criterion::PosNearText => i as f64,
            _ => t.attention.iter().map(|a| rows.iter().map(|&r| a.get(r, c)).sum::<f64>()).sum(),
        })
        .collect();
    let ranked = match which {
        Which::Top => top_n(&scores, count),
        Which::Bottom => top_n(&scores.iter().map(|s| -s).collect::<Vec<_>>(), count),
    };
    Ok(ranked.into_iter().map(|i| stream.vision_position(i)).collect())
}

pub fn mask_attended_tokens(
    model: &Model,
    stream: &TokenStream,
    layers: &BTreeSet<usize>,
    fraction: f64,
    which: Which,
    criterion: Criterion,
) -> Result<ProbeReport> {
    let selected = select_attended(model, stream, fraction, which, criterion)?;
    mask_vision_columns(model, stream, layers, &selected, "mask-attended")
}

/// First `ceil(n_v/2)` (left) or last `floor(n_v/2)` (right) vision
/// positions.
pub fn half_positions(stream: &TokenStream, side: Side) -> Result<BTreeSet<usize>> {
    let n_v = stream.n_vision();
    if n_v < 2 {
        return Err(Error::input("half masking needs at least two vision tokens"));
    }
    let left = n_v.div_ceil(2);
    let range = match side {
        Side::Left => 0..left,
        Side::Right => left..n_v,
    };
    Ok(range.map(|i| stream.vision_position(i)).collect())
}

pub fn mask_half(model: &Model, stream: &TokenStream, layers: &BTreeSet<usize>, side: Side) -> Result<ProbeReport> {
    let cols = half_positions(stream, side)?;
    mask_vision_columns(model, stream, layers, &cols, "mask-half")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabProjection {
    pub scores: Vec<f64>,
    pub top: Vec<usize>,
}

/// `softmax(W_u · hidden)` and its top ids.
pub fn logit_lens(model: &Model, hidden: &[f64], n: usize) -> Result<VocabProjection> {
    let logits = mat_vec(&model.unembedding, hidden, None)?;
    let dist = softmax(&logits);
    Ok(VocabProjection {
        top: top_n(&dist, n),
        scores: dist,
    })
}

/// `W_u · (v W_O)` with `v` placed in `head`'s slice of an otherwise zero
/// vector. Raw scores unless `apply_softmax`.
pub fn vo_projection(model: &Model, layer: usize, head: usize, value: &[f64], n: usize, apply_softmax: bool) -> Result<VocabProjection> {
    let w = model.layer(layer)?;
    let dk = model.config.head_dim();
    if head >= model.config.num_heads {
        return Err(Error::input(format!("head {head} outside 0..{}", model.config.num_heads)));
    }
    if value.len() != dk {
        return Err(Error::shape(format!("value of length {} for head_dim {dk}", value.len())));
    }
    let mut full = vec![0.0; model.hidden_dim()];
    full[head * dk..(head + 1) * dk].copy_from_slice(value);
    let projected = vec_mat(&full, &w.w_o, None)?;
    let raw = mat_vec(&model.unembedding, &projected, None)?;
    let scores = if apply_softmax { softmax(&raw) } else { raw };
    Ok(VocabProjection {
        top: top_n(&scores, n),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkToken {
    pub position: usize,
    pub vision_index: usize,
    /// Last-row attention averaged over heads.
    pub mass: f64,
    pub value_l1: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub layer: usize,
    pub rule: String,
    pub top_decile_count: usize,
    pub median_value_l1: f64,
    pub tokens: Vec<SinkToken>,
    pub flagged: Vec<usize>,
}

pub const SINK_RULE: &str = "flag = attention mass among the top max(1, floor(n_v/10)) vision tokens (ties to the lower position) and value L1 strictly below the median; a codified stand-in for a qualitative criterion";

/// Flags vision tokens that draw top-decile attention from the last row
/// while carrying a below-median value norm.
pub fn sink_stats(trace: &LayerTrace, stream: &TokenStream) -> Result<SinkReport> {
    let heads = trace.attention.len() as f64;
    let last = trace.positions.len() - 1;
    let cols: Vec<usize> = (0..trace.positions.len())
        .filter(|&c| trace.modalities[c] == Modality::Vision)
        .collect();
    if cols.is_empty() {
        return Err(Error::input(format!("layer {} has no attending vision tokens", trace.layer)));
    }
    let mass: Vec<f64> = cols
        .iter()
        .map(|&c| trace.attention.iter().map(|a| a.get(last, c)).sum::<f64>() / heads)
        .collect();
    let l1: Vec<f64> = cols.iter().map(|&c| trace.value_l1[c]).collect();
    let decile = (cols.len() / 10).max(1);
    let top: BTreeSet<usize> = top_n(&mass, decile).into_iter().collect();
    let mut sorted = l1.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    let tokens: Vec<SinkToken> = cols
        .iter()
        .enumerate()
        .map(|(i, &c)| SinkToken {
            position: trace.positions[c],
            vision_index: stream.vision_index(trace.positions[c]).unwrap_or(usize::MAX),
            mass: mass[i],
            value_l1: l1[i],
            flagged: top.contains(&i) && l1[i] < median,
        })
        .collect();
    Ok(SinkReport {
        layer: trace.layer,
        rule: SINK_RULE.to_string(),
        top_decile_count: decile,
        median_value_l1: median,
        flagged: tokens.iter().filter(|t| t.flagged).map(|t| t.position).collect(),
        tokens,
    })
}

/// Where the last row's attention goes once `removed` columns are hidden
/// from every row at `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Redistribution {
    pub layer: usize,
    pub removed: Vec<usize>,
    pub removed_mass: f64,
    pub gained_text: f64,
    pub gained_vision: f64,
    /// Last-row mass after removal, averaged over heads.
    pub total_after: f64,
}

pub fn sink_redistribution(model: &Model, stream: &TokenStream, layer: usize, removed: &BTreeSet<usize>) -> Result<Redistribution> {
    let layers = BTreeSet::from([layer]);
    let dense = prefill_dense(model, stream)?;
    let rules = [MaskRule {
        rows: RowSelector::All,
        columns: removed.clone(),
    }];
    let masked = masked_run(model, stream, &layers, &rules)?;
    let (a, b) = (dense.trace(layer).unwrap(), masked.trace(layer).unwrap());
    let avg_last = |t: &LayerTrace, c: usize| {
        let last = t.positions.len() - 1;
        t.attention.iter().map(|m| m.get(last, c)).sum::<f64>() / t.attention.len() as f64
    };
    let mut removed_mass = 0.0;
    let mut gained_text = 0.0;
    let mut gained_vision = 0.0;
    let mut total_after = 0.0;
    for (c, &p) in a.positions.iter().enumerate() {
        let before = avg_last(a, c);
        let after = avg_last(b, c);
        total_after += after;
        if removed.contains(&p) {
            removed_mass += before;
        } else if a.modalities[c].is_text() {
            gained_text += after - before;
        } else {
            gained_vision += after - before;
        }
    }
    Ok(Redistribution {
        layer,
        removed: removed.iter().copied().collect(),
        removed_mass,
        gained_text,
        gained_vision,
        total_after,
    })
}

/// Executes one probe spec against the dense baseline.
pub fn run_probe(model: &Model, stream: &TokenStream, spec: &ProbeSpec) -> Result<ProbeReport> {
    spec.validate(model.num_layers()).map_err(|e| Error::input(e.to_string()))?;
    let set = |l: &[usize]| l.iter().copied().collect::<BTreeSet<usize>>();
    match spec {
        ProbeSpec::Knockout { layers, mode } => knockout_cross_attention(model, stream, &set(layers), *mode),
        ProbeSpec::MaskAttended {
            layers,
            fraction,
            which,
            criterion,
        } => mask_attended_tokens(model, stream, &set(layers), *fraction, *which, *criterion),
        ProbeSpec::MaskHalf { layers, side } => mask_half(model, stream, &set(layers), *side),
        ProbeSpec::SinkStats { layer } => {
            let dense = prefill_dense(model, stream)?;
            let none = BTreeSet::new();
            let mut report = compare("sink-stats", model, stream, &dense, &dense, &set(&[*layer]), &none)?;
            report.sink = Some(sink_stats(dense.trace(*layer).unwrap(), stream)?);
            Ok(report)
        }
        ProbeSpec::VoProjection {
            layer,
            head,
            top_n,
            softmax,
        } => {
            let dense = prefill_dense(model, stream)?;
            let t = dense.trace(*layer).unwrap();
            let dk = model.config.head_dim();
            let v_last = &t.values.row(t.values.rows() - 1)[head * dk..(head + 1) * dk];
            let none = BTreeSet::new();
            let mut report = compare("vo-projection", model, stream, &dense, &dense, &set(&[*layer]), &none)?;
            report.vo = Some(vo_projection(model, *layer, *head, v_last, *top_n, *softmax)?);
            Ok(report)
        }
    }
}
