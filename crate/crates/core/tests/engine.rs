mod common;

use std::collections::BTreeSet;

use common::{max_abs_diff, oracle, random_case};
use visipruner_core::engine::fixture::fixture_config;
use visipruner_core::engine::*;
use visipruner_core::{par, Error};

#[test]
fn prefill_matches_straight_line_forward() {
    for seed in 0..40 {
        let c = random_case(seed, 3, 4, 16, 12);
        let out = prefill_dense(&c.model, &c.stream).unwrap();
        let o = oracle(&c.model, &c.stream);
        assert!(max_abs_diff(&out.logits, &o.logits) < 1e-10, "seed {seed}");
        for t in &out.traces {
            let l = t.layer;
            for (r, row) in o.hidden[l].iter().enumerate() {
                assert!(max_abs_diff(t.hidden.row(r), row) < 1e-10);
            }
            for (h, a) in t.attention.iter().enumerate() {
                for (r, row) in o.attn[l - 1][h].iter().enumerate() {
                    assert!(max_abs_diff(a.row(r), row) < 1e-12);
                }
            }
        }
    }
}

#[test]
fn decode_continues_prefill() {
    for seed in 0..20 {
        let c = random_case(100 + seed, 3, 4, 16, 12);
        let full = c.stream.extended(TokenInput::Id(1));
        let pre = prefill_dense(&c.model, &c.stream).unwrap();
        let step = decode_step(&c.model, &pre.cache, &TokenInput::Id(1)).unwrap();
        let whole = prefill_dense(&c.model, &full).unwrap();
        assert!(max_abs_diff(&step.logits, &whole.logits) < 1e-10, "seed {seed}");
        assert_eq!(step.cache.next_position(), full.len());
        let again = decode_step(&c.model, &step.cache, &TokenInput::Id(2)).unwrap();
        let whole2 = prefill_dense(&c.model, &full.extended(TokenInput::Id(2))).unwrap();
        assert!(max_abs_diff(&again.logits, &whole2.logits) < 1e-10);
    }
}

#[test]
fn stale_cache_is_rejected() {
    let c = random_case(7, 2, 2, 8, 8);
    let pre = prefill_dense(&c.model, &c.stream).unwrap();
    let keep = pre.cache.fork();
    decode_step(&c.model, &pre.cache, &TokenInput::Id(0)).unwrap();
    let err = decode_step(&c.model, &pre.cache, &TokenInput::Id(0)).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
    decode_step(&c.model, &keep, &TokenInput::Id(0)).unwrap();
}

#[test]
fn evicting_dead_vision_changes_nothing() {
    for seed in 0..10 {
        let fx = build_fixture(FixtureKind::VisionDeadAfter { layer: 1 }, &fixture_config(seed)).unwrap();
        let pre = prefill_dense(&fx.model, &fx.stream).unwrap();
        let all: BTreeSet<usize> = (1..=fx.model.num_layers()).collect();
        let evicted = evict_vision_kv(&pre.cache, &all).unwrap();
        assert_eq!(evicted.vision_entries(), 0);
        let a = decode_step(&fx.model, &pre.cache.fork(), &TokenInput::Id(2)).unwrap();
        let b = decode_step(&fx.model, &evicted, &TokenInput::Id(2)).unwrap();
        assert_eq!(a.logits, b.logits, "seed {seed}");
    }
}

#[test]
fn eviction_touches_only_named_layers() {
    let c = random_case(3, 4, 2, 8, 12);
    let pre = prefill_dense(&c.model, &c.stream).unwrap();
    let layers = BTreeSet::from([1, c.model.num_layers()]);
    let ev = evict_vision_kv(&pre.cache, &layers).unwrap();
    for l in 1..=c.model.num_layers() {
        let (before, after) = (pre.cache.layer(l).unwrap(), ev.layer(l).unwrap());
        if layers.contains(&l) {
            assert_eq!(after.vision_count(), 0);
            assert_eq!(after.len(), before.len() - before.vision_count());
            assert!(after.modalities.iter().all(|m| m.is_text()));
        } else {
            assert_eq!(after, before);
        }
    }
    assert!(evict_vision_kv(&pre.cache, &BTreeSet::from([0])).is_err());
}

#[test]
fn later_tokens_never_reach_earlier_rows() {
    for seed in 0..10 {
        let c = random_case(200 + seed, 3, 4, 16, 14);
        let short = c.stream.truncated(c.stream.len() - 2).unwrap();
        let a = prefill_dense(&c.model, &c.stream).unwrap();
        let b = prefill_dense(&c.model, &short).unwrap();
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            for r in 0..short.len() {
                assert_eq!(ta.hidden.row(r), tb.hidden.row(r));
            }
            for (ma, mb) in ta.attention.iter().zip(&tb.attention) {
                for r in 0..short.len() {
                    assert!(ma.row(r)[r + 1..].iter().all(|&w| w == 0.0));
                    assert_eq!(&ma.row(r)[..short.len()], mb.row(r));
                }
            }
        }
    }
}

#[test]
fn trace_output_is_attention_times_values() {
    let c = random_case(11, 3, 4, 16, 12);
    let out = prefill_dense(&c.model, &c.stream).unwrap();
    let dk = c.model.config.head_dim();
    for t in &out.traces {
        for r in 0..t.positions.len() {
            for (h, a) in t.attention.iter().enumerate() {
                for k in 0..dk {
                    let col = h * dk + k;
                    let want: f64 = (0..t.positions.len()).map(|j| a.get(r, j) * t.values.get(j, col)).sum();
                    assert!((t.output.get(r, col) - want).abs() < 1e-12);
                }
                let mass: f64 = a.row(r).iter().sum();
                assert!((mass - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn no_op_hooks_are_transparent() {
    let c = random_case(12, 3, 4, 16, 12);
    let dense = prefill_dense(&c.model, &c.stream).unwrap();
    let id = prefill(&c.model, &c.stream, &mut IdentityHooks).unwrap();
    let mut empty = MaskHooks {
        per_layer: vec![(1, Vec::new())],
    };
    let masked = prefill(&c.model, &c.stream, &mut empty).unwrap();
    assert_eq!(dense.logits, id.logits);
    assert_eq!(dense.logits, masked.logits);
    assert_eq!(dense.cache, masked.cache);
}

#[test]
fn runs_are_deterministic_and_thread_independent() {
    let c = random_case(13, 3, 8, 32, 16);
    let a = prefill_dense(&c.model, &c.stream).unwrap();
    par::force_sequential(true);
    let b = prefill_dense(&c.model, &c.stream).unwrap();
    par::force_sequential(false);
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.counters, b.counters);
}

#[test]
fn trace_export_is_line_per_layer() {
    let c = random_case(14, 3, 2, 8, 10);
    let out = prefill_dense(&c.model, &c.stream).unwrap();
    let want: Vec<usize> = [1, 2].into_iter().filter(|&l| l <= c.model.num_layers()).collect();
    let text = export_jsonl(&out.traces, &want, true).unwrap();
    let layers: Vec<usize> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["layer"].as_u64().unwrap() as usize)
        .collect();
    assert_eq!(layers, want);
    assert!(export_jsonl(&out.traces, &[99], false).is_err());
}

#[test]
fn bad_inputs_are_rejected() {
    let c = random_case(15, 2, 2, 8, 8);
    let bad = c.stream.extended(TokenInput::Id(10_000));
    assert!(matches!(prefill_dense(&c.model, &bad), Err(Error::Input(_))));
    let nan = c.stream.extended(TokenInput::Embedding(vec![f64::NAN; c.model.hidden_dim()]));
    assert!(prefill_dense(&c.model, &nan).is_err());
}
