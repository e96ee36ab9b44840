#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visipruner_core::engine::{init_model, Model, ModelConfig, TokenInput, TokenStream};

/// Straight-line dense forward pass written against the raw weights only.
pub struct Oracle {
    /// Hidden states entering each layer, then the final ones.
    pub hidden: Vec<Vec<Vec<f64>>>,
    /// `attn[layer-1][head][row][col]`, zero above the diagonal.
    pub attn: Vec<Vec<Vec<Vec<f64>>>>,
    pub values: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<f64>,
}

fn row_times(x: &[f64], w: &visipruner_core::kernels::RealMatrix) -> Vec<f64> {
    let (r, c) = w.shape();
    assert_eq!(x.len(), r);
    let mut out = vec![0.0; c];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..c {
            out[j] += xi * w.get(i, j);
        }
    }
    out
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, gi)| v / s * gi).collect()
}

fn pos_code(model: &Model, pos: usize) -> Vec<f64> {
    let d = model.hidden_dim();
    (0..d)
        .map(|c| {
            let freq = 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
            let a = pos as f64 / freq;
            model.positional_gain[c] * if c % 2 == 0 { a.sin() } else { a.cos() }
        })
        .collect()
}

/// `blocked(layer, row_pos, col_pos)` hides a column from a row; the
/// diagonal is never hidden.
pub fn oracle_with(model: &Model, stream: &TokenStream, blocked: &dyn Fn(usize, usize, usize) -> bool) -> Oracle {
    let d = model.hidden_dim();
    let heads = model.config.num_heads;
    let dk = d / heads;
    let n = stream.len();
    let mut h: Vec<Vec<f64>> = stream
        .entries()
        .iter()
        .enumerate()
        .map(|(p, e)| {
            let base = match &e.input {
                TokenInput::Id(id) => model.embedding.row(*id).to_vec(),
                TokenInput::Embedding(v) => v.clone(),
            };
            base.iter().zip(pos_code(model, p)).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut hidden = vec![h.clone()];
    let mut attn = Vec::new();
    let mut values = Vec::new();
    for (li, w) in model.layers.iter().enumerate() {
        let normed: Vec<Vec<f64>> = h.iter().map(|x| rms(x, &w.attn_norm)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|x| row_times(x, &w.w_q)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| row_times(x, &w.w_k)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| row_times(x, &w.w_v)).collect();
        let mut layer_attn = vec![vec![vec![0.0; n]; n]; heads];
        let mut concat = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            let sl = hd * dk..(hd + 1) * dk;
            for i in 0..n {
                let allowed: Vec<usize> = (0..=i).filter(|&j| j == i || !blocked(li + 1, i, j)).collect();
                let s: Vec<f64> = allowed
                    .iter()
                    .map(|&j| q[i][sl.clone()].iter().zip(&k[j][sl.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (&j, ej) in allowed.iter().zip(&e) {
                    layer_attn[hd][i][j] = ej / z;
                    for c in sl.clone() {
                        concat[i][c] += ej / z * v[j][c];
                    }
                }
            }
        }
        for i in 0..n {
            let o = row_times(&concat[i], &w.w_o);
            for c in 0..d {
                h[i][c] += o[c];
            }
            let f = rms(&h[i], &w.ffn_norm);
            let g = row_times(&f, &w.w_gate);
            let u = row_times(&f, &w.w_up);
            let act: Vec<f64> = g.iter().zip(&u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
            let down = row_times(&act, &w.w_down);
            for c in 0..d {
                h[i][c] += down[c];
            }
        }
        hidden.push(h.clone());
        attn.push(layer_attn);
        values.push(v);
    }
    let last = &h[n - 1];
    let logits = (0..model.config.vocab_size)
        .map(|t| (0..d).map(|c| model.unembedding.get(t, c) * last[c]).sum())
        .collect();
    Oracle {
        hidden,
        attn,
        values,
        logits,
    }
}

pub fn oracle(model: &Model, stream: &TokenStream) -> Oracle {
    oracle_with(model, stream, &|_, _, _| false)
}

/// Masks text rows (and vision rows too when `vision_rows`) from `cols` on
/// `layers`.
pub fn column_mask(
    stream: &TokenStream,
    layers: BTreeSet<usize>,
    cols: BTreeSet<usize>,
    vision_rows: bool,
) -> impl Fn(usize, usize, usize) -> bool + '_ {
    move |l, i, j| layers.contains(&l) && cols.contains(&j) && (stream.modality(i).is_text() || vision_rows)
}

pub struct Case {
    pub model: Model,
    pub stream: TokenStream,
}

/// Random model and stream; `d` is a multiple of the head count.
pub fn random_case(seed: u64, max_layers: usize, max_heads: usize, max_d: usize, max_n: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=max_heads);
    let dk_max = (max_d / heads).max(1);
    let d = heads * rng.random_range(1..=dk_max);
    let layers = rng.random_range(1..=max_layers);
    let vocab = rng.random_range(4..=24);
    let m = rng.random_range(1..=2 * d);
    let n = rng.random_range(3..=max_n);
    let nx = rng.random_range(1..=(n - 1).min(4));
    let nv = rng.random_range(1..=n - nx);
    let ns = n - nx - nv;
    let config = ModelConfig::new(layers, d, heads, m, vocab, rng.random());
    let model = init_model(&config).unwrap();
    let stream = TokenStream::random(&mut rng, vocab, d, ns, nv, nx);
    Case { model, stream }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
