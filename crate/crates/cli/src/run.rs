use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use visipruner_core::cost::{
    convention_deltas, mac_flops, pruned_flops, reconcile, Convention, ConventionDelta, CostParams, FlopsReport, Reconciliation,
    ScheduleSummary,
};
use visipruner_core::engine::{export_jsonl, prefill_dense, ExpectedFacts, FixtureKind, LayerMode, PrefillOutput, RunCounters};
use visipruner_core::kernels::l2_norm;
use visipruner_core::par;
use visipruner_core::probes::{argmax, run_probe, ProbeReport};
use visipruner_core::pruner::{apply_schedule, modes_are_monotone, FallbackFlags, PruneParams, PruneSchedule};

use crate::config::{Experiment, Format, RunConfig};
use crate::output::{core, resolve_out, to_json, write_files, Failure, Judgment};

/// Pruned and dense logits may differ by this much on vision-dead fixtures.
const DEAD_VISION_TOLERANCE: f64 = 1e-5;

pub struct RunArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub formats: Vec<Format>,
}

pub fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct CacheFacts {
    entries: usize,
    vision_entries: usize,
}

#[derive(Serialize)]
struct DenseFacts {
    argmax: usize,
    logits: Vec<f64>,
    counters: RunCounters,
    kv_cache: CacheFacts,
}

#[derive(Serialize)]
struct ScheduleFacts {
    filtering_layer: Option<usize>,
    exit_layer: Option<usize>,
    retained_positions: BTreeSet<usize>,
    retained_vision_indices: BTreeSet<usize>,
    per_layer_modes: Vec<LayerMode>,
    fallback_flags: FallbackFlags,
    params: PruneParams,
}

#[derive(Serialize)]
struct CostFacts {
    paper: FlopsReport,
    mac: FlopsReport,
    reconciliation: Reconciliation,
    convention_deltas: Vec<ConventionDelta>,
}

#[derive(Serialize)]
struct VariantFacts {
    name: String,
    schedule_file: String,
    schedule: ScheduleFacts,
    argmax: usize,
    argmax_agrees: bool,
    bit_identical: bool,
    logit_delta_max: f64,
    logit_delta_norm: f64,
    counters: RunCounters,
    kv_cache: CacheFacts,
    cost: CostFacts,
}

#[derive(Serialize)]
struct ProbeFacts {
    index: usize,
    kind: String,
    files: Vec<String>,
    logit_delta_max: f64,
    argmax_changed: bool,
}

#[derive(Serialize)]
struct StreamFacts {
    n_system: usize,
    n_vision: usize,
    n_instruction: usize,
}

#[derive(Serialize)]
struct Facts {
    config: RunConfig,
    stream: StreamFacts,
    #[serde(skip_serializing_if = "Option::is_none")]
    fixture: Option<ExpectedFacts>,
    dense: DenseFacts,
    variants: Vec<VariantFacts>,
    probes: Vec<ProbeFacts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost_override: Option<Value>,
}

#[derive(Serialize)]
struct Summary {
    version: u32,
    facts: Facts,
    judgments: Vec<Judgment>,
}

fn cache_facts(out: &PrefillOutput) -> CacheFacts {
    CacheFacts {
        entries: out.cache.total_entries(),
        vision_entries: out.cache.vision_entries(),
    }
}

fn cost_params(exp: &Experiment, schedule: Option<ScheduleSummary>) -> CostParams {
    let c = &exp.model.config;
    CostParams {
        num_layers: c.num_layers,
        hidden_dim: c.hidden_dim,
        ffn_dim: c.ffn_dim,
        n_vision: exp.stream.n_vision(),
        n_text: exp.stream.n_text(),
        vocab_size: c.vocab_size,
        schedule,
    }
}

fn is_null(p: &PruneParams) -> bool {
    !p.merge_enabled && !p.skip_enabled && !p.detect_enabled
}

fn variant_facts(
    name: &str,
    exp: &Experiment,
    dense: &PrefillOutput,
    schedule: &PruneSchedule,
    output: &PrefillOutput,
) -> Result<VariantFacts, Failure> {
    let diff: Vec<f64> = output.logits.iter().zip(&dense.logits).map(|(a, b)| a - b).collect();
    let summary = ScheduleSummary::from_schedule(schedule);
    let cp = cost_params(exp, Some(summary));
    let paper = core(pruned_flops(&cp, Convention::Paper))?;
    let mac = core(pruned_flops(&cp, Convention::Mac))?;
    let analytical = mac_flops(&cp);
    let reconciliation = reconcile(&analytical, &output.counters);
    if !reconciliation.exact {
        return Err(Failure::invariant(
            "mac-census-equals-counters",
            format!(
                "variant {name}: analytical {} vs instrumented {}",
                reconciliation.analytical_total, reconciliation.instrumented_total
            ),
        ));
    }
    if !modes_are_monotone(&schedule.per_layer_modes) {
        return Err(Failure::invariant(
            "monotone-layer-modes",
            format!("variant {name}: {:?}", schedule.per_layer_modes),
        ));
    }
    Ok(VariantFacts {
        name: name.to_string(),
        schedule_file: format!("schedule-{name}.json"),
        schedule: ScheduleFacts {
            filtering_layer: schedule.filtering_layer,
            exit_layer: schedule.exit_layer,
            retained_positions: schedule.retained_positions.clone(),
            retained_vision_indices: schedule.retained_vision_indices.clone(),
            per_layer_modes: schedule.per_layer_modes.clone(),
            fallback_flags: schedule.fallback_flags.clone(),
            params: schedule.params.clone(),
        },
        argmax: argmax(&output.logits),
        argmax_agrees: argmax(&output.logits) == argmax(&dense.logits),
        bit_identical: output.logits.iter().zip(&dense.logits).all(|(a, b)| a.to_bits() == b.to_bits()),
        logit_delta_max: diff.iter().map(|x| x.abs()).fold(0.0, f64::max),
        logit_delta_norm: l2_norm(&diff),
        counters: output.counters.clone(),
        kv_cache: cache_facts(output),
        cost: CostFacts {
            convention_deltas: convention_deltas(&paper.pruned_breakdown, &analytical),
            paper,
            mac,
            reconciliation,
        },
    })
}

fn judge(exp: &Experiment, dense_argmax: usize, variants: &[VariantFacts]) -> Vec<Judgment> {
    let mut out = Vec::new();
    for v in variants {
        out.push(Judgment::new(
            "mac-reconciliation-exact",
            &v.name,
            v.cost.reconciliation.exact,
            json!(v.cost.reconciliation.instrumented_total),
            json!(v.cost.reconciliation.analytical_total),
        ));
        if is_null(&v.schedule.params) {
            out.push(Judgment::new(
                "null-schedule-bit-identical",
                &v.name,
                v.bit_identical,
                json!(v.logit_delta_max),
                json!(0.0),
            ));
        }
        let Some(facts) = &exp.facts else { continue };
        if !v.schedule.params.detect_enabled || facts.filtering_layer.is_none() {
            continue;
        }
        let p = &v.schedule.params;
        out.push(Judgment::new(
            "filtering-layer-matches-fixture",
            &v.name,
            v.schedule.filtering_layer == facts.filtering_layer,
            json!(v.schedule.filtering_layer),
            json!(facts.filtering_layer),
        ));
        let want_exit = facts.exit_layer(p.exit_patience, exp.model.num_layers());
        out.push(Judgment::new(
            "exit-layer-matches-fixture",
            &v.name,
            v.schedule.exit_layer == want_exit,
            json!(v.schedule.exit_layer),
            json!(want_exit),
        ));
        if matches!(facts.kind, FixtureKind::VisionDeadAfter { .. }) {
            out.push(Judgment::new(
                "logit-delta-within-tolerance",
                &v.name,
                v.logit_delta_max <= DEAD_VISION_TOLERANCE,
                json!(v.logit_delta_max),
                json!(DEAD_VISION_TOLERANCE),
            ));
            out.push(Judgment::new(
                "argmax-agrees",
                &v.name,
                v.argmax_agrees,
                json!(v.argmax),
                json!(dense_argmax),
            ));
        }
    }
    out
}

fn probe_files(i: usize, report: &ProbeReport, formats: &[Format]) -> Result<Vec<(String, Vec<u8>)>, Failure> {
    let stem = format!("probe-{i}-{}", report.kind);
    let mut files = Vec::new();
    if formats.contains(&Format::Json) {
        files.push((format!("{stem}.json"), to_json(report)?));
    }
    if formats.contains(&Format::Csv) {
        files.push((format!("{stem}.csv"), report.csv().into_bytes()));
    }
    Ok(files)
}

/// The first variant's schedule, replayed on the overridden shape.
fn cost_override(cfg: &RunConfig, exp: &Experiment, schedule: Option<ScheduleSummary>) -> Result<Option<Value>, Failure> {
    let Some(o) = &cfg.cost else { return Ok(None) };
    let base = cost_params(exp, None);
    let cp = CostParams {
        num_layers: o.num_layers.unwrap_or(base.num_layers),
        hidden_dim: o.hidden_dim.unwrap_or(base.hidden_dim),
        ffn_dim: o.ffn_dim.unwrap_or(base.ffn_dim),
        n_vision: o.n_vision.unwrap_or(base.n_vision),
        n_text: o.n_text.unwrap_or(base.n_text),
        vocab_size: o.vocab_size.unwrap_or(base.vocab_size),
        schedule: None,
    };
    let schedule = schedule.map(|mut s| {
        s.retained = s.retained.min(cp.n_vision);
        s
    });
    let cp = CostParams { schedule, ..cp };
    cp.validate().map_err(|e| Failure::config(e.to_string(), Some("cost".into())))?;
    let paper = core(pruned_flops(&cp, Convention::Paper))?;
    let mac = core(pruned_flops(&cp, Convention::Mac))?;
    Ok(Some(json!({ "params": cp, "paper": paper, "mac": mac })))
}

pub fn cmd_run(args: RunArgs) -> Result<PathBuf, Failure> {
    let cfg = load(&args.config, args.seed)?;
    let formats = if args.formats.is_empty() {
        cfg.formats.clone()
    } else {
        args.formats.clone()
    };
    let exp = cfg.build()?;
    let dense = core(prefill_dense(&exp.model, &exp.stream))?;

    let outcomes = par::map(&cfg.variants, |v| apply_schedule(&exp.model, &exp.stream, &v.params));
    let mut files = Vec::new();
    let mut variants = Vec::new();
    let mut first_schedule = None;
    for (v, outcome) in cfg.variants.iter().zip(outcomes) {
        let outcome = outcome.map_err(|e| match Failure::from_core(e) {
            f if f.code == crate::output::EXIT_CONFIG => Failure::config(f.message, Some(format!("variants.{}", v.name))),
            f => f,
        })?;
        files.push((format!("schedule-{}.json", v.name), to_json(&outcome.schedule)?));
        first_schedule.get_or_insert_with(|| ScheduleSummary::from_schedule(&outcome.schedule));
        variants.push(variant_facts(&v.name, &exp, &dense, &outcome.schedule, &outcome.output)?);
    }

    let reports = par::map(&cfg.probes, |p| run_probe(&exp.model, &exp.stream, p));
    let mut probes = Vec::new();
    let mut jsonl = String::new();
    for (i, r) in reports.into_iter().enumerate() {
        let r = core(r)?;
        let pf = probe_files(i, &r, &formats)?;
        if formats.contains(&Format::Jsonl) {
            jsonl.push_str(&serde_json::to_string(&r).map_err(|e| Failure::invariant("serializable-report", e.to_string()))?);
            jsonl.push('\n');
        }
        probes.push(ProbeFacts {
            index: i,
            kind: r.kind.clone(),
            files: pf.iter().map(|(n, _)| n.clone()).collect(),
            logit_delta_max: r.logit_delta_max,
            argmax_changed: r.argmax_changed,
        });
        files.extend(pf);
    }
    if formats.contains(&Format::Jsonl) && !cfg.probes.is_empty() {
        files.push(("probes.jsonl".into(), jsonl.into_bytes()));
    }

    let judgments = judge(&exp, argmax(&dense.logits), &variants);
    let summary = Summary {
        version: crate::config::CONFIG_VERSION,
        facts: Facts {
            stream: StreamFacts {
                n_system: exp.stream.n_system(),
                n_vision: exp.stream.n_vision(),
                n_instruction: exp.stream.n_instruction(),
            },
            fixture: exp.facts.clone(),
            dense: DenseFacts {
                argmax: argmax(&dense.logits),
                logits: dense.logits.clone(),
                counters: dense.counters.clone(),
                kv_cache: cache_facts(&dense),
            },
            variants,
            probes,
            cost_override: cost_override(&cfg, &exp, first_schedule)?,
            config: cfg.clone(),
        },
        judgments,
    };
    files.insert(0, ("summary.json".into(), to_json(&summary)?));
    let dir = resolve_out(args.out, cfg.output_dir.clone());
    write_files(&dir, &files)?;
    Ok(dir)
}

pub struct TraceArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub layers: Option<Vec<usize>>,
    pub full_matrices: bool,
    pub variant: Option<String>,
}

pub fn cmd_trace(args: TraceArgs) -> Result<PathBuf, Failure> {
    let cfg = load(&args.config, args.seed)?;
    let l = cfg.model.num_layers;
    let layers = args.layers.unwrap_or_else(|| (1..=l).collect());
    if let Some(bad) = layers.iter().find(|&&x| x == 0 || x > l) {
        return Err(Failure::config(format!("layer {bad} outside 1..={l}"), Some("--layers".into())));
    }
    let exp = cfg.build()?;
    let (name, output) = match &args.variant {
        None => ("dense".to_string(), core(prefill_dense(&exp.model, &exp.stream))?),
        Some(n) => {
            let v = cfg
                .variants
                .iter()
                .find(|v| &v.name == n)
                .ok_or_else(|| Failure::config(format!("no variant named {n:?}"), Some("--variant".into())))?;
            (n.clone(), core(apply_schedule(&exp.model, &exp.stream, &v.params))?.output)
        }
    };
    let text = core(export_jsonl(&output.traces, &layers, args.full_matrices))?;
    let dir = resolve_out(args.out, cfg.output_dir.clone());
    write_files(&dir, &[(format!("trace-{name}.jsonl"), text.into_bytes())])?;
    Ok(dir)
}
