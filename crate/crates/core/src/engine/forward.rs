use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::cache::{KvCache, LayerCache};
use super::model::{LayerWeights, Model};
use super::stream::{Modality, TokenInput, TokenStream};
use super::trace::{value_l1_norms, LayerTrace, ProbeRow};
use crate::error::{Error, Result};
use crate::kernels::{dot, masked_softmax_row, mat_vec, rms_norm, silu, softmax, vec_mat, MacCounter, RealMatrix};
use crate::par;
use crate::pruner::merge::merge_vision_attention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerMode {
    Dense,
    Merge,
    Skip,
    DenseProbe,
    Sparse,
    VisionFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSelector {
    Text,
    Vision,
    All,
}

impl RowSelector {
    fn matches(self, m: Modality) -> bool {
        match self {
            RowSelector::Text => m.is_text(),
            RowSelector::Vision => !m.is_text(),
            RowSelector::All => true,
        }
    }
}

/// Columns (sequence positions) hidden from the selected rows before the
/// softmax. A row always keeps its own column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRule {
    pub rows: RowSelector,
    pub columns: BTreeSet<usize>,
}

/// What one layer does, as decided by the hooks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub mode: LayerMode,
    /// Vision positions removed from the sequence before this layer runs.
    pub drop: Vec<usize>,
    /// When false, vision rows skip attention and only pass through the FFN.
    pub vision_attention: bool,
    pub masks: Vec<MaskRule>,
    /// Vision position that collects all vision mass of every text row.
    pub merge_target: Option<usize>,
}

impl LayerPlan {
    pub fn dense() -> Self {
        Self {
            mode: LayerMode::Dense,
            drop: Vec::new(),
            vision_attention: true,
            masks: Vec::new(),
            merge_target: None,
        }
    }

    pub fn masked(masks: Vec<MaskRule>) -> Self {
        Self { masks, ..Self::dense() }
    }
}

/// Read-only view of the sequence handed to the hooks.
#[derive(Debug, Clone, Copy)]
pub struct SequenceView<'a> {
    pub stream: &'a TokenStream,
    /// Positions still present when the layer starts.
    pub positions: &'a [usize],
}

impl SequenceView<'_> {
    pub fn vision_positions(&self) -> Vec<usize> {
        self.positions
            .iter()
            .copied()
            .filter(|&p| self.stream.modality(p) == Modality::Vision)
            .collect()
    }
}

/// Points where a pruning policy can steer prefill.
pub trait PruneHooks {
    /// Vision positions whose influence should be probed before `layer`
    /// runs.
    fn probe_request(&mut self, _layer: usize, _view: &SequenceView) -> Option<Vec<usize>> {
        None
    }

    /// Decide the plan for `layer`. Extra work done here (influence
    /// recomputation) is charged to `probe_counter`.
    fn plan_layer(
        &mut self,
        _layer: usize,
        _view: &SequenceView,
        _probe: Option<&ProbeRow>,
        _probe_counter: &mut MacCounter,
    ) -> Result<LayerPlan> {
        Ok(LayerPlan::dense())
    }
}

/// Hooks that never change anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHooks;

impl PruneHooks for IdentityHooks {}

/// Fixed per-layer masks; layers without an entry run dense.
#[derive(Debug, Clone, Default)]
pub struct MaskHooks {
    pub per_layer: Vec<(usize, Vec<MaskRule>)>,
}

impl PruneHooks for MaskHooks {
    fn plan_layer(&mut self, layer: usize, _view: &SequenceView, _probe: Option<&ProbeRow>, _c: &mut MacCounter) -> Result<LayerPlan> {
        let masks: Vec<MaskRule> = self
            .per_layer
            .iter()
            .filter(|(l, _)| *l == layer)
            .flat_map(|(_, m)| m.iter().cloned())
            .collect();
        Ok(LayerPlan::masked(masks))
    }
}

/// Multiply-accumulate tallies split by where the work happened.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub projections: MacCounter,
    pub attention: MacCounter,
    pub ffn: MacCounter,
    pub unembed: MacCounter,
    pub probe: MacCounter,
    /// Work thrown away by a pass that had to be redone.
    pub fallback: MacCounter,
}

impl RunCounters {
    pub fn total(&self) -> u64 {
        self.projections.count()
            + self.attention.count()
            + self.ffn.count()
            + self.unembed.count()
            + self.probe.count()
            + self.fallback.count()
    }

    pub fn absorb(&mut self, other: &RunCounters) {
        self.projections.add(other.projections.count());
        self.attention.add(other.attention.count());
        self.ffn.add(other.ffn.count());
        self.unembed.add(other.unembed.count());
        self.probe.add(other.probe.count());
        self.fallback.add(other.fallback.count());
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub traces: Vec<LayerTrace>,
    pub logits: Vec<f64>,
    pub last_hidden: Vec<f64>,
    pub cache: KvCache,
    pub counters: RunCounters,
}

impl PrefillOutput {
    pub fn modes(&self) -> Vec<LayerMode> {
        self.traces.iter().map(|t| t.mode).collect()
    }

    /// 1-based layer access.
    pub fn trace(&self, layer: usize) -> Option<&LayerTrace> {
        layer.checked_sub(1).and_then(|i| self.traces.get(i))
    }
}

struct SeqState {
    positions: Vec<usize>,
    modalities: Vec<Modality>,
    hidden: Vec<Vec<f64>>,
}

struct Qkv {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn project(x: &[f64], w: &LayerWeights) -> Result<Qkv> {
    Ok(Qkv {
        q: vec_mat(x, &w.w_q, None)?,
        k: vec_mat(x, &w.w_k, None)?,
        v: vec_mat(x, &w.w_v, None)?,
    })
}

/// `silu(x W_gate) * (x W_up) W_down` on the normalized input; returns the
/// residual update.
fn ffn_delta(x: &[f64], w: &LayerWeights) -> Result<Vec<f64>> {
    let y = rms_norm(x, &w.ffn_norm);
    let gate = vec_mat(&y, &w.w_gate, None)?;
    let up = vec_mat(&y, &w.w_up, None)?;
    let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
    vec_mat(&act, &w.w_down, None)
}

fn to_matrix(rows: &[Vec<f64>], cols: usize) -> RealMatrix {
    if rows.is_empty() {
        return RealMatrix::zeros(0, cols);
    }
    RealMatrix::from_rows(rows).expect("rows of equal length")
}

fn head_slice(v: &[f64], head: usize, dk: usize) -> &[f64] {
    &v[head * dk..(head + 1) * dk]
}

struct HeadResult {
    weights: RealMatrix,
    out: Vec<Vec<f64>>,
}

/// Causal attention of one head over the attending set, masks applied
/// before the softmax and the merge applied after it.
#[allow(clippy::too_many_arguments)]
fn attend_head(
    head: usize,
    dk: usize,
    qkv: &[&Qkv],
    modalities: &[Modality],
    allowed: &[Vec<bool>],
    merge: Option<(std::ops::Range<usize>, usize)>,
) -> Result<HeadResult> {
    let n = qkv.len();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights = RealMatrix::zeros(n, n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let q = head_slice(&qkv[i].q, head, dk);
        let scores: Vec<f64> = (0..=i)
            .map(|j| {
                if allowed[i][j] {
                    dot(q, head_slice(&qkv[j].k, head, dk)) * scale
                } else {
                    0.0
                }
            })
            .collect();
        let mut row = masked_softmax_row(&scores, &allowed[i][..=i])?;
        row.resize(n, 0.0);
        if let (Some((range, target)), true) = (&merge, modalities[i].is_text()) {
            let mut rows = [row];
            merge_vision_attention(&mut rows, range.clone(), *target)?;
            [row] = rows;
        }
        let mut o = vec![0.0; dk];
        for j in (0..=i).filter(|&j| allowed[i][j]) {
            let w = row[j];
            for (oc, vc) in o.iter_mut().zip(head_slice(&qkv[j].v, head, dk)) {
                *oc += w * vc;
            }
        }
        weights.row_mut(i).copy_from_slice(&row);
        out.push(o);
    }
    Ok(HeadResult { weights, out })
}

#[allow(clippy::too_many_arguments)]
fn compute_probe(
    model: &Model,
    w: &LayerWeights,
    layer: usize,
    state: &SeqState,
    normed: &[Vec<f64>],
    text_qkv: &[Option<Qkv>],
    request: &[usize],
    counter: &mut MacCounter,
) -> Result<ProbeRow> {
    let d = model.hidden_dim();
    let heads = model.config.num_heads;
    let dk = model.config.head_dim();
    let last = state.positions.len() - 1;
    if !state.modalities[last].is_text() {
        return Err(Error::input("probe row needs a text token in the last position"));
    }
    let mut probed = BTreeSet::new();
    for &p in request {
        let idx = state
            .positions
            .binary_search(&p)
            .map_err(|_| Error::input(format!("probe position {p} is not present at layer {layer}")))?;
        if state.modalities[idx] != Modality::Vision {
            return Err(Error::input(format!("probe position {p} is not a vision token")));
        }
        probed.insert(idx);
    }
    let cols: Vec<usize> = (0..state.positions.len())
        .filter(|&i| state.modalities[i].is_text() || probed.contains(&i))
        .collect();
    let mut keys = Vec::with_capacity(cols.len());
    let mut values = Vec::with_capacity(cols.len());
    for &c in &cols {
        match &text_qkv[c] {
            Some(t) => {
                keys.push(t.k.clone());
                values.push(t.v.clone());
            }
            None => {
                keys.push(vec_mat(&normed[c], &w.w_k, None)?);
                values.push(vec_mat(&normed[c], &w.w_v, None)?);
            }
        }
    }
    let q = &text_qkv[last].as_ref().expect("text row projected").q;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    let mut output = vec![0.0; d];
    for h in 0..heads {
        let qh = head_slice(q, h, dk);
        let scores: Vec<f64> = keys.iter().map(|k| dot(qh, head_slice(k, h, dk)) * scale).collect();
        let row = softmax(&scores);
        let oh = &mut output[h * dk..(h + 1) * dk];
        for (wj, v) in row.iter().zip(&values) {
            for (oc, vc) in oh.iter_mut().zip(head_slice(v, h, dk)) {
                *oc += wj * vc;
            }
        }
        weights.push(row);
    }
    let (n, p, d64) = (cols.len() as u64, probed.len() as u64, d as u64);
    counter.add(2 * d64 * d64 * p + 2 * d64 * n);
    Ok(ProbeRow {
        layer,
        row_position: state.positions[last],
        columns: cols.iter().map(|&c| state.positions[c]).collect(),
        modalities: cols.iter().map(|&c| state.modalities[c]).collect(),
        probed: probed.iter().map(|&c| state.positions[c]).collect(),
        weights,
        values: to_matrix(&values, d),
        output,
    })
}

fn run_layer(
    model: &Model,
    layer: usize,
    stream: &TokenStream,
    state: &mut SeqState,
    hooks: &mut dyn PruneHooks,
    counters: &mut RunCounters,
    cache: &mut LayerCache,
) -> Result<LayerTrace> {
    let w = model.layer(layer)?;
    let d = model.hidden_dim();
    let m = model.config.ffn_dim;
    let heads = model.config.num_heads;
    let dk = model.config.head_dim();
    let (d64, m64) = (d as u64, m as u64);

    let view = SequenceView {
        stream,
        positions: &state.positions,
    };
    let request = hooks.probe_request(layer, &view);
    let normed: Vec<Vec<f64>> = state.hidden.iter().map(|x| rms_norm(x, &w.attn_norm)).collect();
    let mut qkv: Vec<Option<Qkv>> = (0..state.positions.len()).map(|_| None).collect();
    for i in 0..state.positions.len() {
        if state.modalities[i].is_text() {
            qkv[i] = Some(project(&normed[i], w)?);
            counters.projections.add(3 * d64 * d64);
        }
    }
    let probe = match &request {
        Some(req) => Some(compute_probe(model, w, layer, state, &normed, &qkv, req, &mut counters.probe)?),
        None => None,
    };
    let plan = hooks.plan_layer(layer, &view, probe.as_ref(), &mut counters.probe)?;

    let input_hidden = to_matrix(&state.hidden, d);
    let mut normed = normed;
    if !plan.drop.is_empty() {
        let drop: BTreeSet<usize> = plan.drop.iter().copied().collect();
        for &p in &drop {
            match state.positions.binary_search(&p) {
                Ok(i) if state.modalities[i] == Modality::Vision => {}
                _ => return Err(Error::input(format!("cannot drop position {p} at layer {layer}"))),
            }
        }
        let keep: Vec<bool> = state.positions.iter().map(|p| !drop.contains(p)).collect();
        retain_mask(&mut state.positions, &keep);
        retain_mask(&mut state.modalities, &keep);
        retain_mask(&mut state.hidden, &keep);
        retain_mask(&mut normed, &keep);
        retain_mask(&mut qkv, &keep);
    }
    finish_layer(
        model,
        w,
        layer,
        state,
        normed,
        qkv,
        plan,
        probe,
        input_hidden,
        counters,
        cache,
        (d64, m64, heads, dk),
    )
}

fn retain_mask<T>(v: &mut Vec<T>, keep: &[bool]) {
    let mut it = keep.iter();
    v.retain(|_| *it.next().unwrap());
}

#[allow(clippy::too_many_arguments)]
fn finish_layer(
    model: &Model,
    w: &LayerWeights,
    layer: usize,
    state: &mut SeqState,
    normed: Vec<Vec<f64>>,
    mut qkv: Vec<Option<Qkv>>,
    plan: LayerPlan,
    probe: Option<ProbeRow>,
    input_hidden: RealMatrix,
    counters: &mut RunCounters,
    cache: &mut LayerCache,
    (d64, m64, heads, dk): (u64, u64, usize, usize),
) -> Result<LayerTrace> {
    let d = model.hidden_dim();
    let attending: Vec<usize> = (0..state.positions.len())
        .filter(|&i| state.modalities[i].is_text() || plan.vision_attention)
        .collect();
    for &i in &attending {
        if qkv[i].is_none() {
            qkv[i] = Some(project(&normed[i], w)?);
            counters.projections.add(3 * d64 * d64);
        }
    }
    let a_qkv: Vec<&Qkv> = attending.iter().map(|&i| qkv[i].as_ref().unwrap()).collect();
    let a_pos: Vec<usize> = attending.iter().map(|&i| state.positions[i]).collect();
    let a_mod: Vec<Modality> = attending.iter().map(|&i| state.modalities[i]).collect();
    let n = attending.len();

    let allowed: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| j <= i && (i == j || !plan.masks.iter().any(|r| r.rows.matches(a_mod[i]) && r.columns.contains(&a_pos[j]))))
                .collect()
        })
        .collect();
    let pairs: u64 = allowed.iter().map(|r| r.iter().filter(|&&b| b).count() as u64).sum();

    let merge = match plan.merge_target {
        Some(target) => {
            let first = a_mod.iter().position(|m| *m == Modality::Vision);
            let last = a_mod.iter().rposition(|m| *m == Modality::Vision);
            let t = a_pos.binary_search(&target).ok();
            match (first, last, t) {
                (Some(f), Some(l), Some(t)) => Some((f..l + 1, t)),
                _ => {
                    return Err(Error::input(format!(
                        "merge target {target} is not an attending vision position at layer {layer}"
                    )))
                }
            }
        }
        None => None,
    };

    let results = par::map_range(heads, |h| attend_head(h, dk, &a_qkv, &a_mod, &allowed, merge.clone()));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    counters.attention.add(2 * d64 * pairs);

    let mut output = vec![vec![0.0; d]; n];
    for (h, r) in results.iter().enumerate() {
        for (i, o) in r.out.iter().enumerate() {
            output[i][h * dk..(h + 1) * dk].copy_from_slice(o);
        }
    }
    for (a, &i) in attending.iter().enumerate() {
        let delta = vec_mat(&output[a], &w.w_o, None)?;
        for (x, dx) in state.hidden[i].iter_mut().zip(&delta) {
            *x += dx;
        }
    }
    counters.projections.add(d64 * d64 * n as u64);

    let deltas = par::map(&state.hidden, |x| ffn_delta(x, w));
    for (x, delta) in state.hidden.iter_mut().zip(deltas) {
        for (xi, di) in x.iter_mut().zip(delta?) {
            *xi += di;
        }
    }
    counters.ffn.add(3 * d64 * m64 * state.positions.len() as u64);

    for (a, q) in a_qkv.iter().enumerate() {
        cache.push(a_pos[a], a_mod[a], q.k.clone(), q.v.clone());
    }
    let values = to_matrix(&a_qkv.iter().map(|q| q.v.clone()).collect::<Vec<_>>(), d);
    if state.hidden.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("hidden state after layer {layer}")));
    }
    Ok(LayerTrace {
        layer,
        mode: plan.mode,
        positions: a_pos,
        modalities: a_mod,
        attention: results.into_iter().map(|r| r.weights).collect(),
        queries: to_matrix(&a_qkv.iter().map(|q| q.q.clone()).collect::<Vec<_>>(), d),
        keys: to_matrix(&a_qkv.iter().map(|q| q.k.clone()).collect::<Vec<_>>(), d),
        value_l1: value_l1_norms(&values),
        values,
        output: to_matrix(&output, d),
        hidden_positions: state.positions.clone(),
        input_hidden,
        hidden: to_matrix(&state.hidden, d),
        probe,
    })
}

/// Logits `W_u · h`.
pub fn unembed(model: &Model, hidden: &[f64], counter: Option<&mut MacCounter>) -> Result<Vec<f64>> {
    mat_vec(&model.unembedding, hidden, counter)
}

/// One forward pass over the whole stream, steered by `hooks`.
pub fn prefill(model: &Model, stream: &TokenStream, hooks: &mut dyn PruneHooks) -> Result<PrefillOutput> {
    if stream.is_empty() {
        return Err(Error::input("empty token stream"));
    }
    let embedded = model.embed(stream)?;
    let mut state = SeqState {
        positions: (0..stream.len()).collect(),
        modalities: stream.entries().iter().map(|e| e.modality).collect(),
        hidden: embedded.to_rows(),
    };
    let mut counters = RunCounters::default();
    let mut traces = Vec::with_capacity(model.num_layers());
    let mut caches = Vec::with_capacity(model.num_layers());
    for layer in 1..=model.num_layers() {
        let mut cache = LayerCache::default();
        traces.push(run_layer(model, layer, stream, &mut state, hooks, &mut counters, &mut cache)?);
        caches.push(cache);
    }
    let last_hidden = state
        .hidden
        .last()
        .cloned()
        .ok_or_else(|| Error::state("every position was dropped"))?;
    let logits = unembed(model, &last_hidden, Some(&mut counters.unembed))?;
    Ok(PrefillOutput {
        traces,
        logits,
        last_hidden,
        cache: KvCache::new(caches, stream.len()),
        counters,
    })
}

pub fn prefill_dense(model: &Model, stream: &TokenStream) -> Result<PrefillOutput> {
    prefill(model, stream, &mut IdentityHooks)
}

/// Attention weights one decode step used at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeLayerTrace {
    pub layer: usize,
    /// Cached positions followed by the new position.
    pub positions: Vec<usize>,
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub logits: Vec<f64>,
    pub cache: KvCache,
    pub traces: Vec<DecodeLayerTrace>,
    pub counters: RunCounters,
}

/// Appends one instruction token and returns its logits plus the next cache
/// version. The input cache becomes stale.
pub fn decode_step(model: &Model, cache: &KvCache, input: &TokenInput) -> Result<DecodeOutput> {
    if cache.num_layers() != model.num_layers() {
        return Err(Error::state(format!(
            "cache has {} layers, model has {}",
            cache.num_layers(),
            model.num_layers()
        )));
    }
    cache.ensure_current()?;
    let d = model.hidden_dim();
    let (d64, m64) = (d as u64, model.config.ffn_dim as u64);
    let heads = model.config.num_heads;
    let dk = model.config.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let pos = cache.next_position();
    let mut x = model.embed_token(input, pos)?;
    let mut counters = RunCounters::default();
    let mut layers = Vec::with_capacity(model.num_layers());
    let mut traces = Vec::with_capacity(model.num_layers());
    for (l, lc) in cache.layers().iter().enumerate() {
        let w = &model.layers[l];
        let xn = rms_norm(&x, &w.attn_norm);
        let new = project(&xn, w)?;
        counters.projections.add(4 * d64 * d64);
        let mut lc = lc.clone();
        lc.push(pos, Modality::Instruction, new.k.clone(), new.v.clone());
        let mut o = vec![0.0; d];
        let mut attention = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_slice(&new.q, h, dk);
            let scores: Vec<f64> = lc.keys.iter().map(|k| dot(qh, head_slice(k, h, dk)) * scale).collect();
            let row = softmax(&scores);
            let oh = &mut o[h * dk..(h + 1) * dk];
            for (wj, v) in row.iter().zip(&lc.values) {
                for (oc, vc) in oh.iter_mut().zip(head_slice(v, h, dk)) {
                    *oc += wj * vc;
                }
            }
            attention.push(row);
        }
        counters.attention.add(2 * d64 * lc.len() as u64);
        let delta = vec_mat(&o, &w.w_o, None)?;
        for (xi, di) in x.iter_mut().zip(&delta) {
            *xi += di;
        }
        let f = ffn_delta(&x, w)?;
        for (xi, di) in x.iter_mut().zip(&f) {
            *xi += di;
        }
        counters.ffn.add(3 * d64 * m64);
        traces.push(DecodeLayerTrace {
            layer: l + 1,
            positions: lc.positions.clone(),
            attention,
        });
        layers.push(lc);
    }
    let logits = unembed(model, &x, Some(&mut counters.unembed))?;
    Ok(DecodeOutput {
        logits,
        cache: cache.advance(layers)?,
        traces,
        counters,
    })
}
