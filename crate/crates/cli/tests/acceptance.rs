//! Acceptance criteria 1 to 10. Each prints one PASS/FAIL line; the test
//! fails if any criterion fails.

#![allow(clippy::needless_range_loop)]

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{column_mask, max_abs_diff, oracle, oracle_with, random_case};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visipruner_core::cost::{mac_flops, pruned_flops, reconcile, Convention, CostParams, ScheduleSummary};
use visipruner_core::engine::fixture::fixture_config;
use visipruner_core::engine::*;
use visipruner_core::kernels::softmax;
use visipruner_core::probes::*;
use visipruner_core::pruner::influence::influence_of_token;
use visipruner_core::pruner::*;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: f64) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < budget, || format!("took {secs:.2}s, budget {budget}s"))?;
    Ok(secs)
}

fn cos_l2(u: &[f64], v: &[f64]) -> (f64, f64) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cos = if nu > 0.0 && nv > 0.0 {
        (dot / (nu * nv)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let l2 = u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    (cos, l2)
}

fn influence_oracle() -> Outcome {
    let start = Instant::now();
    let (mut configs, mut worst) = (0, 0.0f64);
    for seed in 0..220u64 {
        let c = random_case(10_000 + seed, 4, 8, 32, 16);
        let out = prefill_dense(&c.model, &c.stream).map_err(|e| e.to_string())?;
        let o = oracle(&c.model, &c.stream);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = c.model.config.num_heads;
        let d = c.model.hidden_dim();
        let dk = d / heads;
        for _ in 0..3 {
            let layer = rng.random_range(1..=c.model.num_layers());
            let i = rng.random_range(0..c.stream.len());
            let j = rng.random_range(0..=i);
            let got = influence_of_token(&out.trace(layer).unwrap().view(), i, j).map_err(|e| e.to_string())?;
            let (a, v) = (&o.attn[layer - 1], &o.values[layer - 1]);
            let (mut full, mut masked) = (vec![0.0; d], vec![0.0; d]);
            for h in 0..heads {
                for jj in 0..=i {
                    for col in h * dk..(h + 1) * dk {
                        full[col] += a[h][i][jj] * v[jj][col];
                        if jj != j {
                            masked[col] += a[h][i][jj] * v[jj][col];
                        }
                    }
                }
            }
            let (cos, l2) = cos_l2(&full, &masked);
            worst = worst.max((got.cosine - cos).abs()).max((got.l2 - l2).abs());
        }
        configs += 1;
    }
    ensure(worst <= 1e-12, || format!("max diff {worst:e}"))?;
    let secs = within_budget(start, 10.0)?;
    Ok(format!("{configs} configs, max diff {worst:.1e}, {secs:.2}s"))
}

fn merge_conservation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rows_checked = 0;
    for _ in 0..600 {
        let width = rng.random_range(2..=24);
        let lo = rng.random_range(0..width - 1);
        let hi = rng.random_range(lo + 1..=width);
        let vision = lo..hi;
        let k = rng.random_range(vision.clone());
        let heads = rng.random_range(1..=4);
        let before: Vec<Vec<f64>> = (0..heads)
            .map(|_| {
                let raw: Vec<f64> = (0..width).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            })
            .collect();
        let mut after = before.clone();
        merge_vision_attention(&mut after, vision.clone(), k).map_err(|e| e.to_string())?;
        for (b, a) in before.iter().zip(&after) {
            ensure(grouped_row_mass(b, vision.clone()) == grouped_row_mass(a, vision.clone()), || {
                "row mass moved".into()
            })?;
            for c in 0..width {
                if !vision.contains(&c) {
                    ensure(a[c].to_bits() == b[c].to_bits(), || format!("column {c} changed"))?;
                } else if c != k {
                    ensure(a[c] == 0.0, || format!("column {c} not cleared"))?;
                }
            }
            rows_checked += 1;
        }
    }
    ensure(rows_checked >= 1000, || format!("only {rows_checked} rows"))?;
    let secs = within_budget(start, 1.0)?;
    Ok(format!("{rows_checked} rows, {secs:.3}s"))
}

fn detection() -> Outcome {
    let start = Instant::now();
    let params = PruneParams::default();
    let kinds = [
        FixtureKind::CriticalToken { layer: 3 },
        FixtureKind::CriticalToken { layer: 4 },
        FixtureKind::VisionDeadAfter { layer: 2 },
        FixtureKind::VisionDeadAfter { layer: 3 },
        FixtureKind::VisionDeadAfter { layer: 4 },
    ];
    let mut runs = 0;
    for kind in kinds {
        for seed in 0..50 {
            let fx = build_fixture(kind, &fixture_config(seed)).map_err(|e| e.to_string())?;
            let s = apply_schedule(&fx.model, &fx.stream, &params).map_err(|e| e.to_string())?.schedule;
            let f = detect_filtering_layer(&s.sweeps, &params);
            ensure(f.is_some() && f == fx.facts.filtering_layer, || {
                format!("{kind:?} seed {seed}: filtering {f:?}")
            })?;
            let history: Vec<LayerSweep> = s.sweeps.iter().filter(|w| Some(w.layer) >= f).cloned().collect();
            let exit = detect_exit_layer(&history, &params);
            if let FixtureKind::VisionDeadAfter { layer } = kind {
                let want = layer + params.exit_patience;
                ensure(exit == Some(want) && s.exit_layer == Some(want), || {
                    format!("{kind:?} seed {seed}: exit {exit:?}, want {want}")
                })?;
            } else {
                let want = fx.facts.exit_layer(params.exit_patience, fx.model.num_layers());
                ensure(exit == want && s.exit_layer == want, || {
                    format!("{kind:?} seed {seed}: exit {exit:?}, want {want:?}")
                })?;
            }
            runs += 1;
        }
    }
    let secs = within_budget(start, 30.0)?;
    Ok(format!("{runs}/{runs} fixture runs, {secs:.2}s"))
}

fn fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for layer in [2, 3, 4] {
        for seed in 0..50 {
            let fx = build_fixture(FixtureKind::VisionDeadAfter { layer }, &fixture_config(seed)).map_err(|e| e.to_string())?;
            let dense = prefill_dense(&fx.model, &fx.stream).map_err(|e| e.to_string())?;
            let out = apply_schedule(&fx.model, &fx.stream, &PruneParams::default()).map_err(|e| e.to_string())?;
            let diff = max_abs_diff(&dense.logits, &out.output.logits);
            worst = worst.max(diff);
            ensure(diff <= 1e-5, || format!("layer {layer} seed {seed}: {diff:e}"))?;
            ensure(argmax(&dense.logits) == argmax(&out.output.logits), || {
                format!("layer {layer} seed {seed}: argmax")
            })?;
            let null = apply_schedule(&fx.model, &fx.stream, &PruneParams::null()).map_err(|e| e.to_string())?;
            ensure(null.output.logits == dense.logits, || {
                format!("layer {layer} seed {seed}: null schedule drifted")
            })?;
        }
    }
    for seed in 0..20 {
        let c = random_case(20_000 + seed, 4, 4, 16, 16);
        let dense = prefill_dense(&c.model, &c.stream).map_err(|e| e.to_string())?;
        let null = apply_schedule(&c.model, &c.stream, &PruneParams::null()).map_err(|e| e.to_string())?;
        ensure(null.output.logits == dense.logits, || {
            format!("random seed {seed}: null schedule drifted")
        })?;
    }
    let secs = within_budget(start, 60.0)?;
    Ok(format!("150 fixture seeds, max |dlogit| {worst:.1e}, null bit-exact, {secs:.2}s"))
}

fn reconciliation() -> Outcome {
    let start = Instant::now();
    let selectors = [Selector::ValueAware, Selector::AttnLast, Selector::AttnText, Selector::AttnVis];
    let mut pairs = 0;
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, stream) = if seed % 4 == 0 {
            let fx = build_fixture(FixtureKind::CriticalToken { layer: 3 }, &fixture_config(seed)).map_err(|e| e.to_string())?;
            (fx.model, fx.stream)
        } else {
            let c = random_case(30_000 + seed, 6, 8, 64, 32);
            (c.model, c.stream)
        };
        let probe_start = rng.random_range(2..=3);
        let params = PruneParams {
            probe_start_layer: probe_start,
            merge_layer: rng.random_range(1..probe_start),
            theta_cos: rng.random_range(0.9..1.0),
            theta_l2: rng.random_range(0.0..0.5),
            exit_patience: rng.random_range(1..=3),
            selector: selectors[rng.random_range(0..4)],
            baseline_top_k: rng.random_range(1..=12),
            merge_enabled: rng.random(),
            skip_enabled: rng.random(),
            detect_enabled: rng.random_bool(0.8),
            ..PruneParams::default()
        };
        let out = apply_schedule(&model, &stream, &params).map_err(|e| e.to_string())?;
        let c = &model.config;
        let cp = CostParams {
            num_layers: c.num_layers,
            hidden_dim: c.hidden_dim,
            ffn_dim: c.ffn_dim,
            n_vision: stream.n_vision(),
            n_text: stream.n_text(),
            vocab_size: c.vocab_size,
            schedule: Some(ScheduleSummary::from_schedule(&out.schedule)),
        };
        let rec = reconcile(&mac_flops(&cp), &out.output.counters);
        ensure(rec.exact && rec.analytical_total == 2 * out.output.counters.total() as u128, || {
            format!("seed {seed}: {:?}", rec.categories)
        })?;
        pairs += 1;
    }
    let secs = within_budget(start, 30.0)?;
    Ok(format!("{pairs} pairs exact, {secs:.2}s"))
}

fn headline_costs() -> Outcome {
    let p = CostParams::llava7b();
    let s = p.schedule.as_ref().ok_or("preset has no schedule")?;
    ensure(
        (p.num_layers, p.hidden_dim, p.ffn_dim, p.n_vision, p.n_text) == (32, 4096, 11008, 576, 74)
            && (s.filtering_layer, s.exit_layer, s.retained, s.shallow_layers()) == (Some(9), Some(24), 10, 8),
        || format!("preset drifted: {p:?}"),
    )?;
    let r = pruned_flops(&p, Convention::Paper).map_err(|e| e.to_string())?;
    let dense = r.dense_total as f64;
    let rel = dense / 3.82e12 - 1.0;
    let ra = r.visual_attention_reduction;
    let a = r.published.as_ref().ok_or("no published block")?;
    let mut fails = Vec::new();
    if rel.abs() > 0.15 {
        fails.push(format!("dense {dense:.3e} is {:+.1}% from 3.82e12", 100.0 * rel));
    }
    if !(0.98..=0.9995).contains(&ra) {
        fails.push(format!("R = {ra:.5}"));
    }
    if (a.visual_reduction - 0.628).abs() > 0.03 {
        fails.push(format!("visual reduction {:.2}%", 100.0 * a.visual_reduction));
    }
    if (a.total_reduction - 0.539).abs() > 0.03 {
        fails.push(format!("total reduction {:.2}%", 100.0 * a.total_reduction));
    }
    let detail = format!(
        "dense {dense:.3e} ({:+.1}%), R {ra:.5}, visual {:.2}%, total {:.2}%",
        100.0 * rel,
        100.0 * a.visual_reduction,
        100.0 * a.total_reduction
    );
    if fails.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", fails.join("; ")))
    }
}

fn sink_mechanics() -> Outcome {
    let start = Instant::now();
    let params = PruneParams::default();
    let (mut excluded, mut low_l2) = (0, 0);
    for seed in 0..50 {
        let fx = build_fixture(FixtureKind::EngineeredSink { layer: 3 }, &fixture_config(seed)).map_err(|e| e.to_string())?;
        let sink = fx.facts.sink_position.ok_or("fixture has no sink")?;
        let dense = prefill_dense(&fx.model, &fx.stream).map_err(|e| e.to_string())?;
        let rep = sink_stats(dense.trace(1).unwrap(), &fx.stream).map_err(|e| e.to_string())?;
        ensure(rep.flagged == vec![sink], || {
            format!("seed {seed}: flagged {:?}, sink {sink}", rep.flagged)
        })?;
        let out = apply_schedule(&fx.model, &fx.stream, &params).map_err(|e| e.to_string())?;
        let f = out
            .schedule
            .filtering_layer
            .ok_or_else(|| format!("seed {seed}: no filtering layer"))?;
        let picked = select_baseline(dense.trace(f).unwrap(), Selector::AttnLast, 1).map_err(|e| e.to_string())?;
        ensure(picked == BTreeSet::from([sink]), || {
            format!("seed {seed}: attn-last picked {picked:?}")
        })?;
        let sweep = out
            .schedule
            .sweeps
            .iter()
            .find(|s| s.layer == f)
            .ok_or("no sweep at filtering layer")?;
        let rec = sweep.records.iter().find(|r| r.token == sink).ok_or("sink not swept")?;
        if rec.l2 < params.theta_l2 {
            low_l2 += 1;
            ensure(!out.schedule.retained_positions.contains(&sink), || {
                format!("seed {seed}: sink retained")
            })?;
            excluded += 1;
        }
    }
    ensure(low_l2 == 50, || format!("sink l2 below threshold on only {low_l2}/50 seeds"))?;
    let secs = within_budget(start, 30.0)?;
    Ok(format!(
        "flagged 50/50, attn-last picks sink 50/50, value-aware excludes {excluded}/{low_l2}, {secs:.2}s"
    ))
}

fn text_rule(cols: BTreeSet<usize>) -> MaskRule {
    MaskRule {
        rows: RowSelector::Text,
        columns: cols,
    }
}

fn probe_algebra() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..40 {
        let c = random_case(40_000 + seed, 4, 4, 16, 16);
        let vision = c.stream.vision_positions();
        let layers: BTreeSet<usize> = (1..=c.model.num_layers()).collect();
        let a: BTreeSet<usize> = vision.iter().copied().step_by(2).collect();
        let b: BTreeSet<usize> = vision.iter().copied().skip(1).step_by(3).collect();
        let seq = masked_run(&c.model, &c.stream, &layers, &[text_rule(a.clone()), text_rule(b.clone())]).map_err(|e| e.to_string())?;
        let union = masked_run(&c.model, &c.stream, &layers, &[text_rule(a.union(&b).copied().collect())]).map_err(|e| e.to_string())?;
        let d = max_abs_diff(&seq.logits, &union.logits);
        worst = worst.max(d);
        ensure(d <= 1e-12, || format!("seed {seed}: composition {d:e}"))?;

        let ko = knockout_cross_attention(&c.model, &c.stream, &layers, KnockoutMode::C).map_err(|e| e.to_string())?;
        for crit in [Criterion::AttnLast, Criterion::AttnText, Criterion::PosNearText] {
            let all = mask_attended_tokens(&c.model, &c.stream, &layers, 1.0, Which::Top, crit).map_err(|e| e.to_string())?;
            let d = max_abs_diff(&ko.logits, &all.logits);
            worst = worst.max(d);
            ensure(d <= 1e-12, || format!("seed {seed}: fraction 1.0 vs knockout {d:e}"))?;
        }

        let first = BTreeSet::from([1]);
        let out = masked_run(&c.model, &c.stream, &first, &[text_rule(a.clone())]).map_err(|e| e.to_string())?;
        let t = out.trace(1).unwrap();
        for att in &t.attention {
            for r in 0..t.positions.len() {
                let s: f64 = att.row(r).iter().sum();
                worst = worst.max((s - 1.0).abs());
                ensure((s - 1.0).abs() <= 1e-12, || format!("seed {seed}: row sums to {s}"))?;
                if t.modalities[r].is_text() {
                    for &p in a.iter().filter(|&&p| p != t.positions[r]) {
                        ensure(att.get(r, t.index_of(p).unwrap()) == 0.0, || {
                            format!("seed {seed}: masked column {p} kept weight")
                        })?;
                    }
                }
            }
        }
        let o = oracle_with(&c.model, &c.stream, &column_mask(&c.stream, first, a, false));
        let d = max_abs_diff(&out.logits, &o.logits);
        worst = worst.max(d);
        ensure(d <= 1e-12, || format!("seed {seed}: masked run vs oracle {d:e}"))?;
    }
    let secs = within_budget(start, 30.0)?;
    Ok(format!("40 sweeps, worst {worst:.1e}, {secs:.2}s"))
}

fn projections() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let c = random_case(50_000 + seed, 4, 4, 16, 16);
        let out = prefill_dense(&c.model, &c.stream).map_err(|e| e.to_string())?;
        let lens = logit_lens(&c.model, out.traces.last().unwrap().last_hidden(), 3).map_err(|e| e.to_string())?;
        let d = max_abs_diff(&lens.scores, &softmax(&out.logits));
        worst = worst.max(d);
        ensure(d <= 1e-12, || format!("seed {seed}: lens {d:e}"))?;

        let dk = c.model.config.head_dim();
        let layer = 1 + seed as usize % c.model.num_layers();
        let head = seed as usize % c.model.config.num_heads;
        let v: Vec<f64> = (0..dk).map(|i| ((i + seed as usize) as f64 * 0.37).sin()).collect();
        let base = vo_projection(&c.model, layer, head, &v, 3, false).map_err(|e| e.to_string())?;
        for k in [2.0, 0.5, -1.0, 0.25] {
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let p = vo_projection(&c.model, layer, head, &scaled, 3, false).map_err(|e| e.to_string())?;
            let want: Vec<f64> = base.scores.iter().map(|x| x * k).collect();
            ensure(p.scores == want, || format!("seed {seed}: scaling by {k} not exact"))?;
        }
        let zero = vo_projection(&c.model, layer, head, &vec![0.0; dk], 3, false).map_err(|e| e.to_string())?;
        ensure(zero.scores.iter().all(|&x| x == 0.0), || {
            format!("seed {seed}: zero input gave nonzero scores")
        })?;
    }
    let secs = within_budget(start, 5.0)?;
    Ok(format!("lens worst {worst:.1e}, vo linearity exact, {secs:.2}s"))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/vision-dead.json");
    let mut dirs = Vec::new();
    for i in 0..2 {
        let dir = tmp.path().join(format!("run{i}"));
        let o = Command::new(env!("CARGO_BIN_EXE_visipruner"))
            .env_remove("VISIPRUNER_OUT")
            .args(["run", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        dirs.push(dir);
    }
    let mut names: Vec<_> = std::fs::read_dir(&dirs[0])
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut other: Vec<_> = std::fs::read_dir(&dirs[1])
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    other.sort();
    ensure(names == other, || "different file sets".into())?;
    let mut bytes = 0;
    for n in &names {
        let (a, b) = (std::fs::read(dirs[0].join(n)).unwrap(), std::fs::read(dirs[1].join(n)).unwrap());
        ensure(a == b, || format!("{n:?} differs"))?;
        bytes += a.len();
    }
    Ok(format!("{} files, {bytes} bytes identical", names.len()))
}

/// Writes past the test harness capture so the lines show on success too.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

#[test]
fn acceptance_criteria() {
    let criteria: [Check; 10] = [
        ("influence matches full recomputation", influence_oracle),
        ("merge conserves row mass", merge_conservation),
        ("filtering and exit detection", detection),
        ("schedule fidelity and null schedule", fidelity),
        ("mac census reconciles with counters", reconciliation),
        ("headline costs for the LLaVA-7B preset", headline_costs),
        ("sink mechanics", sink_mechanics),
        ("probe algebra", probe_algebra),
        ("projection consistency", projections),
        ("byte-identical reruns", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => report(&format!("criterion {n:>2} PASS  {name}: {detail}")),
            Err(why) => {
                report(&format!("criterion {n:>2} FAIL  {name}: {why}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
