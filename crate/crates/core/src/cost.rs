//! Closed-form FLOPs and KV-cache accounting.
//!
//! Two conventions are reported side by side. `paper` follows the
//! published per-layer formulas (projections `4nd²`, scores `2n²d`, FFN
//! `3ndm`). `mac` is a census of every multiply-accumulate the engine
//! performs, doubled, and must equal the instrumented counters exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::RunCounters;
use crate::error::{Error, Result};
use crate::pruner::{PruneSchedule, Selector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    Paper,
    Mac,
}

/// Which stages ran and where the phase boundaries fell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSummary {
    pub filtering_layer: Option<usize>,
    pub exit_layer: Option<usize>,
    pub retained: usize,
    #[serde(default = "one")]
    pub merge_layer: usize,
    #[serde(default = "yes")]
    pub merge: bool,
    #[serde(default = "two")]
    pub probe_start_layer: usize,
    #[serde(default = "yes")]
    pub skip: bool,
    #[serde(default = "yes")]
    pub probing: bool,
    /// A dense pass ran first to feed an attention-based selector.
    #[serde(default)]
    pub reference_pass: bool,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn yes() -> bool {
    true
}

impl ScheduleSummary {
    pub fn from_schedule(s: &PruneSchedule) -> Self {
        let p = &s.params;
        Self {
            filtering_layer: s.filtering_layer,
            exit_layer: s.exit_layer,
            retained: s.retained_positions.len(),
            merge_layer: p.merge_layer,
            merge: p.merge_enabled,
            probe_start_layer: p.probe_start_layer,
            skip: p.skip_enabled,
            probing: p.detect_enabled,
            reference_pass: p.detect_enabled && p.selector != Selector::ValueAware,
        }
    }

    /// Layers before the filtering layer.
    pub fn shallow_layers(&self) -> usize {
        self.filtering_layer.map_or(0, |f| f - 1)
    }

    /// Layers in `[filtering_layer, exit_layer)`.
    pub fn middle_layers(&self, num_layers: usize) -> usize {
        match self.filtering_layer {
            Some(f) => self.exit_layer.unwrap_or(num_layers + 1).saturating_sub(f),
            None => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub n_vision: usize,
    pub n_text: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub schedule: Option<ScheduleSummary>,
}

impl CostParams {
    /// LLaVA-1.5-7B shape with the reconstructed schedule: skipping through
    /// layer 8, filtering at 9, exit at 24, ten retained tokens.
    pub fn llava7b() -> Self {
        Self {
            num_layers: 32,
            hidden_dim: 4096,
            ffn_dim: 11008,
            n_vision: 576,
            n_text: 74,
            vocab_size: 32000,
            schedule: Some(ScheduleSummary {
                filtering_layer: Some(9),
                exit_layer: Some(24),
                retained: 10,
                merge_layer: 1,
                merge: true,
                probe_start_layer: 2,
                skip: true,
                probing: true,
                reference_pass: false,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(s) = &self.schedule else {
            return Ok(());
        };
        if s.retained > self.n_vision {
            return Err(Error::config(format!("retained {} exceeds n_vision {}", s.retained, self.n_vision)));
        }
        if let Some(f) = s.filtering_layer {
            if f == 0 || f > self.num_layers {
                return Err(Error::config(format!("filtering layer {f} outside 1..={}", self.num_layers)));
            }
        }
        if let Some(e) = s.exit_layer {
            let Some(f) = s.filtering_layer else {
                return Err(Error::config("exit layer given without a filtering layer"));
            };
            if e < f || e > self.num_layers {
                return Err(Error::config(format!("exit layer {e} outside {f}..={}", self.num_layers)));
            }
        }
        if s.shallow_layers() + s.middle_layers(self.num_layers) > self.num_layers {
            return Err(Error::config("shallow plus middle layers exceed num_layers"));
        }
        if s.merge_layer == 0 || s.merge_layer >= s.probe_start_layer {
            return Err(Error::config("merge_layer must be >= 1 and precede probe_start_layer"));
        }
        if let Some(f) = s.filtering_layer {
            if s.probing && f < s.probe_start_layer {
                return Err(Error::config(format!(
                    "filtering layer {f} precedes probe_start_layer {}",
                    s.probe_start_layer
                )));
            }
        }
        Ok(())
    }

    fn n(&self) -> u128 {
        (self.n_vision + self.n_text) as u128
    }
}

/// FLOPs split by where they are spent. Sums to the total with no residue.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub attn_projections: u128,
    pub attn_scores: u128,
    pub ffn: u128,
    pub unembed: u128,
    pub probe: u128,
    pub fallback: u128,
}

impl Breakdown {
    pub fn total(&self) -> u128 {
        self.attn_projections + self.attn_scores + self.ffn + self.unembed + self.probe + self.fallback
    }

    fn add(&mut self, o: &Breakdown) {
        self.attn_projections += o.attn_projections;
        self.attn_scores += o.attn_scores;
        self.ffn += o.ffn;
        self.unembed += o.unembed;
        self.probe += o.probe;
        self.fallback += o.fallback;
    }

    fn doubled(&self) -> Breakdown {
        Breakdown {
            attn_projections: 2 * self.attn_projections,
            attn_scores: 2 * self.attn_scores,
            ffn: 2 * self.ffn,
            unembed: 2 * self.unembed,
            probe: 2 * self.probe,
            fallback: 2 * self.fallback,
        }
    }
}

/// The published visual-token arithmetic: a baseline of attention
/// plus FFN without projections, against pruned sums that keep them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedBlock {
    pub visual_baseline: u128,
    pub visual_pruned: u128,
    pub visual_reduction: f64,
    pub primary_dense: u128,
    pub primary_pruned: u128,
    pub total_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvMemory {
    pub dense_entries: u128,
    pub pruned_entries: u128,
    pub reduction: f64,
    pub vision_dense_entries: u128,
    pub vision_pruned_entries: u128,
    pub vision_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub convention: Convention,
    pub dense_total: u128,
    pub pruned_total: u128,
    pub dense_breakdown: Breakdown,
    pub pruned_breakdown: Breakdown,
    pub visual_dense: u128,
    pub visual_pruned: u128,
    /// Clamped to `[0, 1]`.
    pub visual_attention_reduction: f64,
    pub visual_attention_reduction_raw: f64,
    pub visual_flops_reduction: f64,
    pub total_reduction: f64,
    pub total_reduction_raw: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub published: Option<PublishedBlock>,
    pub kv_memory: KvMemory,
    pub notes: Vec<String>,
}

fn ratio(saved_from: u128, kept: u128) -> f64 {
    if saved_from == 0 {
        0.0
    } else {
        1.0 - kept as f64 / saved_from as f64
    }
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Published-formula breakdown for `n` tokens over `layers` layers.
fn paper_layer(n: u128, d: u128, m: u128, layers: u128) -> Breakdown {
    Breakdown {
        attn_projections: layers * 4 * n * d * d,
        attn_scores: layers * 2 * n * n * d,
        ffn: layers * 3 * n * d * m,
        ..Breakdown::default()
    }
}

/// Dense cost. `L = 0` gives zero.
pub fn dense_flops(params: &CostParams, convention: Convention) -> Breakdown {
    let (d, m) = (params.hidden_dim as u128, params.ffn_dim as u128);
    match convention {
        Convention::Paper => paper_layer(params.n(), d, m, params.num_layers as u128),
        Convention::Mac => mac_census(&CostParams {
            schedule: None,
            ..params.clone()
        })
        .doubled(),
    }
}

/// `(clamped, raw)` reduction of vision-related attention work. The
/// formula's `2·2·n_v'²` numerator can exceed its `2·n_v²` denominator at
/// full retention, hence the clamp.
pub fn visual_attention_reduction(params: &CostParams) -> (f64, f64) {
    let (nv, nt, d) = (params.n_vision as f64, params.n_text as f64, params.hidden_dim as f64);
    let l = params.num_layers as f64;
    let (lp, nvp) = match &params.schedule {
        Some(s) => (s.middle_layers(params.num_layers) as f64, s.retained as f64),
        None => (l, nv),
    };
    let denom = l * 2.0 * (nv * nv * d + nv * nt * d);
    if denom == 0.0 {
        return (0.0, 0.0);
    }
    let num = lp * 2.0 * 2.0 * nvp * nvp * d + lp * nvp * nt * d;
    let raw = 1.0 - num / denom;
    (clamp01(raw), raw)
}

fn visual_pruned_paper(params: &CostParams) -> u128 {
    let (d, m, nv) = (params.hidden_dim as u128, params.ffn_dim as u128, params.n_vision as u128);
    let Some(s) = &params.schedule else {
        return paper_layer(nv, d, m, params.num_layers as u128).total();
    };
    if s.filtering_layer.is_none() {
        return paper_layer(nv, d, m, params.num_layers as u128).total();
    }
    let shallow = s.shallow_layers() as u128;
    let middle = s.middle_layers(params.num_layers) as u128;
    let nvp = s.retained as u128;
    shallow * (4 * nv * d * d + 3 * nv * d * m) + paper_layer(nvp, d, m, middle).total()
}

pub fn kv_memory(params: &CostParams) -> KvMemory {
    let l = params.num_layers as u128;
    let d = params.hidden_dim as u128;
    let (nv, nt) = (params.n_vision as u128, params.n_text as u128);
    let vision_dense = l * nv * 2 * d;
    let vision_pruned = match &params.schedule {
        Some(s) if s.filtering_layer.is_some() => s.middle_layers(params.num_layers) as u128 * s.retained as u128 * 2 * d,
        _ => vision_dense,
    };
    let text = l * nt * 2 * d;
    KvMemory {
        dense_entries: text + vision_dense,
        pruned_entries: text + vision_pruned,
        reduction: clamp01(ratio(text + vision_dense, text + vision_pruned)),
        vision_dense_entries: vision_dense,
        vision_pruned_entries: vision_pruned,
        vision_reduction: clamp01(ratio(vision_dense, vision_pruned)),
    }
}

/// Paper-convention or mac-convention report for `params`.
pub fn pruned_flops(params: &CostParams, convention: Convention) -> Result<FlopsReport> {
    params.validate()?;
    let (r, r_raw) = visual_attention_reduction(params);
    let mut notes = Vec::new();
    if params.n_vision == 0 {
        notes.push("n_vision = 0: every reduction is defined as 0".to_string());
    }
    if r_raw < 0.0 {
        notes.push(format!("vision-attention formula gives {r_raw:.6} before clamping"));
    }
    let report = match convention {
        Convention::Paper => paper_report(params, r, r_raw, notes),
        Convention::Mac => mac_report(params, r, r_raw, notes),
    };
    Ok(report)
}

fn paper_report(params: &CostParams, r: f64, r_raw: f64, mut notes: Vec<String>) -> FlopsReport {
    let (d, m) = (params.hidden_dim as u128, params.ffn_dim as u128);
    let (nv, l) = (params.n_vision as u128, params.num_layers as u128);
    let dense = paper_layer(params.n(), d, m, l);
    let visual_dense = paper_layer(nv, d, m, l).total();
    let visual_pruned = visual_pruned_paper(params);
    let saved = visual_dense.saturating_sub(visual_pruned);
    let mut pruned_bd = dense.clone();
    let vd = paper_layer(nv, d, m, l);
    let vp = pruned_visual_breakdown(params);
    pruned_bd.attn_projections = pruned_bd.attn_projections - vd.attn_projections + vp.attn_projections;
    pruned_bd.attn_scores = pruned_bd.attn_scores - vd.attn_scores + vp.attn_scores;
    pruned_bd.ffn = pruned_bd.ffn - vd.ffn + vp.ffn;
    let pruned_total = pruned_bd.total();
    debug_assert_eq!(pruned_total, dense.total() - saved);

    let baseline = l * (2 * nv * nv * d + 3 * nv * d * m);
    let primary_dense = l * (2 * params.n() * params.n() * d + 3 * params.n() * d * m);
    let primary_pruned = primary_dense - baseline.min(primary_dense) + visual_pruned;
    let degenerate = params.n_vision == 0;
    let published = PublishedBlock {
        visual_baseline: baseline,
        visual_pruned,
        visual_reduction: if degenerate { 0.0 } else { clamp01(ratio(baseline, visual_pruned)) },
        primary_dense,
        primary_pruned,
        total_reduction: if degenerate {
            0.0
        } else {
            clamp01(ratio(primary_dense, primary_pruned))
        },
    };
    notes.push("visual_flops_reduction and total_reduction use one per-token census for dense and pruned; the `published` block repeats the published arithmetic, whose baseline omits projections".to_string());
    notes.push("vision-attention formula: cross term restored to n_v*n_t*d, literal 32 read as L".to_string());
    let total_raw = ratio(dense.total(), pruned_total);
    FlopsReport {
        convention: Convention::Paper,
        dense_total: dense.total(),
        pruned_total,
        dense_breakdown: dense,
        pruned_breakdown: pruned_bd,
        visual_dense,
        visual_pruned,
        visual_attention_reduction: r,
        visual_attention_reduction_raw: r_raw,
        visual_flops_reduction: if degenerate {
            0.0
        } else {
            clamp01(ratio(visual_dense, visual_pruned))
        },
        total_reduction: if degenerate { 0.0 } else { clamp01(total_raw) },
        total_reduction_raw: total_raw,
        published: Some(published),
        kv_memory: kv_memory(params),
        notes,
    }
}

fn pruned_visual_breakdown(params: &CostParams) -> Breakdown {
    let (d, m, nv) = (params.hidden_dim as u128, params.ffn_dim as u128, params.n_vision as u128);
    match &params.schedule {
        Some(s) if s.filtering_layer.is_some() => {
            let shallow = s.shallow_layers() as u128;
            let mut b = paper_layer(s.retained as u128, d, m, s.middle_layers(params.num_layers) as u128);
            b.attn_projections += shallow * 4 * nv * d * d;
            b.ffn += shallow * 3 * nv * d * m;
            b
        }
        _ => paper_layer(nv, d, m, params.num_layers as u128),
    }
}

fn mac_report(params: &CostParams, r: f64, r_raw: f64, mut notes: Vec<String>) -> FlopsReport {
    let dense = dense_flops(params, Convention::Mac);
    let pruned = mac_census(params).doubled();
    let text_only = CostParams {
        n_vision: 0,
        schedule: None,
        ..params.clone()
    };
    let text = mac_census(&text_only).doubled().total();
    let visual_dense = dense.total() - text;
    let visual_pruned = pruned.total().saturating_sub(text);
    let degenerate = params.n_vision == 0;
    let total_raw = ratio(dense.total(), pruned.total());
    notes.push(
        "mac convention: 2 FLOPs per multiply-accumulate over every product the engine executes, probe and fallback work included"
            .to_string(),
    );
    FlopsReport {
        convention: Convention::Mac,
        dense_total: dense.total(),
        pruned_total: pruned.total(),
        dense_breakdown: dense,
        pruned_breakdown: pruned,
        visual_dense,
        visual_pruned,
        visual_attention_reduction: r,
        visual_attention_reduction_raw: r_raw,
        visual_flops_reduction: if degenerate {
            0.0
        } else {
            clamp01(ratio(visual_dense, visual_pruned))
        },
        total_reduction: if degenerate { 0.0 } else { clamp01(total_raw) },
        total_reduction_raw: total_raw,
        published: None,
        kv_memory: kv_memory(params),
        notes,
    }
}

/// Per-layer shape of a pruned run: how many rows attend, how many are
/// present, and how many vision tokens get probed.
struct LayerShape {
    attending: u128,
    present: u128,
    probed: Option<u128>,
}

fn layer_macs(shape: &LayerShape, nt: u128, d: u128, m: u128) -> Breakdown {
    let a = shape.attending;
    let mut b = Breakdown {
        attn_projections: 4 * d * d * a,
        attn_scores: d * a * (a + 1),
        ffn: 3 * d * m * shape.present,
        ..Breakdown::default()
    };
    if let Some(p) = shape.probed {
        let cols = nt + p;
        b.probe = 2 * d * d * p + 2 * d * cols + p * d * cols.saturating_sub(1);
    }
    b
}

/// Multiply-accumulate census of one run (not doubled).
pub fn mac_census(params: &CostParams) -> Breakdown {
    let l = params.num_layers;
    let (d, m) = (params.hidden_dim as u128, params.ffn_dim as u128);
    let (nv, nt) = (params.n_vision as u128, params.n_text as u128);
    let unembed = params.vocab_size as u128 * d;
    let dense_layer = LayerShape {
        attending: nt + nv,
        present: nt + nv,
        probed: None,
    };
    let mut total = Breakdown::default();
    let Some(s) = &params.schedule else {
        for _ in 0..l {
            total.add(&layer_macs(&dense_layer, nt, d, m));
        }
        total.unembed = unembed;
        return total;
    };
    let skip_layer = LayerShape {
        attending: nt,
        present: nt + nv,
        probed: None,
    };
    let shallow = |layer: usize| -> &LayerShape {
        if s.merge && nv > 0 && layer == s.merge_layer {
            &dense_layer
        } else if s.skip && layer > s.merge_layer {
            &skip_layer
        } else {
            &dense_layer
        }
    };
    let searching = |layer: usize| -> LayerShape {
        let probed = (nv > 0).then_some(nv);
        if layer < s.probe_start_layer {
            let sh = shallow(layer);
            return LayerShape {
                attending: sh.attending,
                present: sh.present,
                probed: None,
            };
        }
        LayerShape {
            attending: if s.skip { nt } else { nt + nv },
            present: nt + nv,
            probed,
        }
    };
    if !s.probing {
        for layer in 1..=l {
            let sh = if layer < s.probe_start_layer {
                shallow(layer)
            } else if s.skip {
                &skip_layer
            } else {
                &dense_layer
            };
            total.add(&layer_macs(sh, nt, d, m));
        }
        total.unembed = unembed;
        return total;
    }
    if s.reference_pass {
        let reference = mac_census(&CostParams {
            schedule: None,
            ..params.clone()
        });
        total.probe += reference.total();
    }
    let Some(f) = s.filtering_layer else {
        let mut wasted = Breakdown::default();
        for layer in 1..=l {
            wasted.add(&layer_macs(&searching(layer), nt, d, m));
        }
        wasted.unembed = unembed;
        total.fallback += wasted.total();
        for layer in 1..=l {
            let sh = if layer < s.probe_start_layer {
                shallow(layer)
            } else {
                &dense_layer
            };
            total.add(&layer_macs(sh, nt, d, m));
        }
        total.unembed += unembed;
        return total;
    };
    let r = s.retained as u128;
    let exit = s.exit_layer.unwrap_or(l + 1);
    for layer in 1..=l {
        let shape = if layer < f {
            searching(layer)
        } else if layer == f {
            let present = if layer == exit { nt } else { nt + r };
            LayerShape {
                attending: present,
                present,
                probed: Some(nv),
            }
        } else if layer < exit {
            LayerShape {
                attending: nt + r,
                present: nt + r,
                probed: Some(r),
            }
        } else if layer == exit {
            LayerShape {
                attending: nt,
                present: nt,
                probed: Some(r),
            }
        } else {
            LayerShape {
                attending: nt,
                present: nt,
                probed: None,
            }
        };
        total.add(&layer_macs(&shape, nt, d, m));
    }
    total.unembed = unembed;
    total
}

/// Census doubled: FLOPs at two per multiply-accumulate.
pub fn mac_flops(params: &CostParams) -> Breakdown {
    mac_census(params).doubled()
}

/// Mac-convention totals against the engine's counters, per category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub categories: Vec<CategoryMatch>,
    pub analytical_total: u128,
    pub instrumented_total: u128,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMatch {
    pub category: String,
    pub analytical: u128,
    pub instrumented: u128,
}

pub fn reconcile(analytical: &Breakdown, counters: &RunCounters) -> Reconciliation {
    let pairs = [
        ("attn-projections", analytical.attn_projections, counters.projections.count()),
        ("attn-scores", analytical.attn_scores, counters.attention.count()),
        ("ffn", analytical.ffn, counters.ffn.count()),
        ("unembed", analytical.unembed, counters.unembed.count()),
        ("probe", analytical.probe, counters.probe.count()),
        ("fallback", analytical.fallback, counters.fallback.count()),
    ];
    let categories: Vec<CategoryMatch> = pairs
        .iter()
        .map(|&(c, a, i)| CategoryMatch {
            category: c.to_string(),
            analytical: a,
            instrumented: 2 * i as u128,
        })
        .collect();
    let analytical_total = analytical.total();
    let instrumented_total = 2 * counters.total() as u128;
    Reconciliation {
        exact: categories.iter().all(|c| c.analytical == c.instrumented) && analytical_total == instrumented_total,
        categories,
        analytical_total,
        instrumented_total,
    }
}

/// Paper-minus-mac difference per category, with the reason it exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionDelta {
    pub category: String,
    pub paper: u128,
    pub mac: u128,
    pub delta: i128,
    pub explanation: String,
}

pub fn convention_deltas(paper: &Breakdown, mac: &Breakdown) -> Vec<ConventionDelta> {
    let rows = [
        (
            "attn-projections",
            paper.attn_projections,
            mac.attn_projections,
            "the paper convention charges 4nd^2 for every token; the engine projects only rows that attend",
        ),
        (
            "attn-scores",
            paper.attn_scores,
            mac.attn_scores,
            "the paper convention charges the full n^2 square; causal attention touches n(n+1)/2 pairs, each costing a score and a weighted value",
        ),
        ("ffn", paper.ffn, mac.ffn, "same 3ndm shape in both conventions"),
        ("unembed", paper.unembed, mac.unembed, "the paper convention omits the unembedding"),
        (
            "probe",
            paper.probe,
            mac.probe,
            "probe rows and influence recomputation are overhead the paper convention omits",
        ),
        (
            "fallback",
            paper.fallback,
            mac.fallback,
            "work discarded by a dense rerun after detection failed",
        ),
    ];
    rows.iter()
        .map(|&(c, p, m, why)| ConventionDelta {
            category: c.to_string(),
            paper: p,
            mac: m,
            delta: p as i128 - m as i128,
            explanation: why.to_string(),
        })
        .collect()
}

/// One CSV row per vision-token count.
pub fn sweep_csv(base: &CostParams, n_vision: &[usize]) -> Result<String> {
    let mut out = String::from("n_v,n_t,l_prime,n_v_prime,r,visual_reduction,total_reduction\n");
    for &nv in n_vision {
        let params = CostParams {
            n_vision: nv,
            ..base.clone()
        };
        let rep = pruned_flops(&params, Convention::Paper)?;
        let (lp, nvp) = match &params.schedule {
            Some(s) => (s.middle_layers(params.num_layers), s.retained),
            None => (params.num_layers, nv),
        };
        writeln!(
            out,
            "{nv},{},{lp},{nvp},{:.10},{:.10},{:.10}",
            params.n_text, rep.visual_attention_reduction, rep.visual_flops_reduction, rep.total_reduction
        )
        .expect("write to string");
    }
    Ok(out)
}
