mod common;

use std::collections::BTreeSet;

use common::{column_mask, max_abs_diff, oracle_with, random_case};
use visipruner_core::engine::fixture::fixture_config;
use visipruner_core::engine::*;
use visipruner_core::kernels::softmax;
use visipruner_core::probes::*;

fn text_rule(cols: BTreeSet<usize>) -> MaskRule {
    MaskRule {
        rows: RowSelector::Text,
        columns: cols,
    }
}

#[test]
fn masks_compose_as_union() {
    for seed in 0..30 {
        let c = random_case(500 + seed, 4, 4, 16, 16);
        let vision = c.stream.vision_positions();
        let a: BTreeSet<usize> = vision.iter().copied().step_by(2).collect();
        let b: BTreeSet<usize> = vision.iter().copied().skip(1).step_by(3).collect();
        let layers: BTreeSet<usize> = (1..=c.model.num_layers()).collect();
        let seq = masked_run(&c.model, &c.stream, &layers, &[text_rule(a.clone()), text_rule(b.clone())]).unwrap();
        let union = masked_run(&c.model, &c.stream, &layers, &[text_rule(a.union(&b).copied().collect())]).unwrap();
        assert!(max_abs_diff(&seq.logits, &union.logits) <= 1e-12, "seed {seed}");
    }
}

#[test]
fn masked_rows_renormalize() {
    for seed in 0..30 {
        let c = random_case(600 + seed, 3, 4, 16, 16);
        let cols: BTreeSet<usize> = c.stream.vision_positions().into_iter().take(2).collect();
        let layers = BTreeSet::from([1]);
        let out = masked_run(&c.model, &c.stream, &layers, &[text_rule(cols.clone())]).unwrap();
        let t = out.trace(1).unwrap();
        for a in &t.attention {
            for r in 0..t.positions.len() {
                let sum: f64 = a.row(r).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                if t.modalities[r].is_text() {
                    for &p in &cols {
                        if p != t.positions[r] {
                            assert_eq!(a.get(r, t.index_of(p).unwrap()), 0.0);
                        }
                    }
                }
            }
        }
        let o = oracle_with(&c.model, &c.stream, &column_mask(&c.stream, layers, cols, false));
        assert!(max_abs_diff(&out.logits, &o.logits) <= 1e-10, "seed {seed}");
    }
}

#[test]
fn full_fraction_equals_knockout() {
    for seed in 0..20 {
        let c = random_case(700 + seed, 4, 4, 16, 16);
        let layers: BTreeSet<usize> = (1..=c.model.num_layers()).collect();
        let ko = knockout_cross_attention(&c.model, &c.stream, &layers, KnockoutMode::C).unwrap();
        for crit in [Criterion::AttnLast, Criterion::AttnText, Criterion::PosNearText] {
            let all = mask_attended_tokens(&c.model, &c.stream, &layers, 1.0, Which::Top, crit).unwrap();
            assert!(max_abs_diff(&ko.logits, &all.logits) <= 1e-12);
            assert_eq!(all.masked_positions, ko.masked_positions);
        }
    }
}

#[test]
fn halves_cover_the_vision_segment() {
    for seed in 0..20 {
        let c = random_case(800 + seed, 3, 4, 16, 16);
        if c.stream.n_vision() < 2 {
            continue;
        }
        let (l, r) = (
            half_positions(&c.stream, Side::Left).unwrap(),
            half_positions(&c.stream, Side::Right).unwrap(),
        );
        assert!(l.is_disjoint(&r));
        let all: BTreeSet<usize> = l.union(&r).copied().collect();
        assert_eq!(all, c.stream.vision_positions().into_iter().collect());
        let layers = BTreeSet::from([1]);
        let both = masked_run(&c.model, &c.stream, &layers, &[text_rule(l), text_rule(r)]).unwrap();
        let ko = knockout_cross_attention(&c.model, &c.stream, &layers, KnockoutMode::C).unwrap();
        assert!(max_abs_diff(&both.logits, &ko.logits) <= 1e-12);
    }
}

#[test]
fn knockout_with_vision_rows_matches_oracle() {
    let c = random_case(900, 3, 4, 16, 16);
    let layers: BTreeSet<usize> = (1..=c.model.num_layers()).collect();
    let vision: BTreeSet<usize> = c.stream.vision_positions().into_iter().collect();
    let ko = knockout_cross_attention(&c.model, &c.stream, &layers, KnockoutMode::CAndV).unwrap();
    let o = oracle_with(&c.model, &c.stream, &column_mask(&c.stream, layers, vision, true));
    assert!(max_abs_diff(&ko.logits, &o.logits) <= 1e-10);
}

#[test]
fn knocking_out_the_critical_token_flips_the_answer() {
    for seed in 0..10 {
        let fx = build_fixture(FixtureKind::CriticalToken { layer: 3 }, &fixture_config(seed)).unwrap();
        let layers = BTreeSet::from([3]);
        let rep = knockout_cross_attention(&fx.model, &fx.stream, &layers, KnockoutMode::C).unwrap();
        assert_eq!(rep.dense_argmax, fx.facts.answer_token.unwrap());
        assert_eq!(rep.probe_argmax, fx.facts.default_token.unwrap());
        let early = knockout_cross_attention(&fx.model, &fx.stream, &BTreeSet::from([1, 2]), KnockoutMode::C).unwrap();
        assert!(!early.argmax_changed);
    }
}

#[test]
fn lens_at_last_layer_is_softmax_of_logits() {
    for seed in 0..20 {
        let c = random_case(1000 + seed, 4, 4, 16, 16);
        let out = prefill_dense(&c.model, &c.stream).unwrap();
        let lens = logit_lens(&c.model, out.traces.last().unwrap().last_hidden(), 3).unwrap();
        assert!(max_abs_diff(&lens.scores, &softmax(&out.logits)) <= 1e-12);
        assert_eq!(lens.top[0], argmax(&out.logits));
    }
}

#[test]
fn vo_projection_is_linear() {
    let c = random_case(1100, 3, 4, 16, 16);
    let dk = c.model.config.head_dim();
    let v: Vec<f64> = (0..dk).map(|i| (i as f64 * 0.37).sin()).collect();
    let base = vo_projection(&c.model, 1, 0, &v, 3, false).unwrap();
    for k in [2.0, 0.5, -1.0, 0.25] {
        let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
        let p = vo_projection(&c.model, 1, 0, &scaled, 3, false).unwrap();
        let want: Vec<f64> = base.scores.iter().map(|x| x * k).collect();
        assert_eq!(p.scores, want);
    }
    let zero = vo_projection(&c.model, 1, 0, &vec![0.0; dk], 3, false).unwrap();
    assert!(zero.scores.iter().all(|&x| x == 0.0));
    let soft = vo_projection(&c.model, 1, 0, &v, 3, true).unwrap();
    assert!((soft.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(vo_projection(&c.model, 1, 99, &v, 3, false).is_err());
}

#[test]
fn vo_projection_reads_the_payload() {
    let fx = build_fixture(FixtureKind::CriticalToken { layer: 3 }, &fixture_config(1)).unwrap();
    let out = prefill_dense(&fx.model, &fx.stream).unwrap();
    let t = out.trace(3).unwrap();
    let c = t.index_of(fx.facts.critical_position.unwrap()).unwrap();
    let dk = fx.model.config.head_dim();
    let p = vo_projection(&fx.model, 3, 0, &t.values.row(c)[..dk], 1, false).unwrap();
    assert_eq!(p.top, vec![fx.facts.answer_token.unwrap()]);
}

#[test]
fn sink_rule_flags_the_engineered_sink() {
    for seed in 0..50 {
        let fx = build_fixture(FixtureKind::EngineeredSink { layer: 3 }, &fixture_config(seed)).unwrap();
        let out = prefill_dense(&fx.model, &fx.stream).unwrap();
        let rep = sink_stats(out.trace(1).unwrap(), &fx.stream).unwrap();
        assert_eq!(rep.flagged, vec![fx.facts.sink_position.unwrap()], "seed {seed}");
        assert_eq!(rep.top_decile_count, 1);
    }
}

#[test]
fn uniform_vision_has_no_sink_outlier() {
    let fx = build_fixture(FixtureKind::Uniform, &fixture_config(3)).unwrap();
    let out = prefill_dense(&fx.model, &fx.stream).unwrap();
    let rep = sink_stats(out.trace(1).unwrap(), &fx.stream).unwrap();
    assert!(rep.flagged.is_empty());
}

#[test]
fn removed_sink_mass_moves_elsewhere() {
    for seed in 0..10 {
        let fx = build_fixture(FixtureKind::EngineeredSink { layer: 3 }, &fixture_config(seed)).unwrap();
        let removed = BTreeSet::from([fx.facts.sink_position.unwrap()]);
        let r = sink_redistribution(&fx.model, &fx.stream, 2, &removed).unwrap();
        assert!(r.removed_mass > 0.9);
        assert!((r.total_after - 1.0).abs() < 1e-12);
        assert!((r.gained_text + r.gained_vision - r.removed_mass).abs() < 1e-9);
    }
}

#[test]
fn probe_specs_validate_and_run() {
    let fx = build_fixture(FixtureKind::CriticalToken { layer: 3 }, &fixture_config(0)).unwrap();
    let spec: ProbeSpec = serde_json::from_str(r#"{"kind": "mask-half", "layers": [3], "side": "left"}"#).unwrap();
    let rep = run_probe(&fx.model, &fx.stream, &spec).unwrap();
    assert_eq!(rep.per_layer.len(), fx.model.num_layers());
    assert!(rep.csv().lines().count() == fx.model.num_layers() + 1);
    let bad = ProbeSpec::Knockout {
        layers: vec![0],
        mode: KnockoutMode::C,
    };
    assert!(bad.validate(6).is_err());
    assert!(serde_json::from_str::<ProbeSpec>(r#"{"kind": "knockout", "layers": [1], "mode": "c", "extra": 1}"#).is_err());
}
