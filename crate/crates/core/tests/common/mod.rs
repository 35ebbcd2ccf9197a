//! Straightforward f64 reference transformer, written independently of the
//! engine's kernels.
#![allow(dead_code)]

use harp_core::checkpoint::Checkpoint;
use harp_core::Matrix;

pub type M = Vec<Vec<f64>>;

pub fn to64(m: &Matrix) -> M {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| v as f64).collect()).collect()
}

pub fn mm(a: &M, b: &Matrix) -> M {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|j| row.iter().enumerate().map(|(k, &x)| x * b.get(k, j) as f64).sum())
                .collect()
        })
        .collect()
}

pub fn rms(a: &M, gain: &[f32]) -> M {
    a.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + 1e-5).sqrt();
            row.iter().zip(gain).map(|(v, &g)| v * inv * g as f64).collect()
        })
        .collect()
}

fn rope(a: &mut M, heads: usize, hd: usize, base: f64) {
    for (pos, row) in a.iter_mut().enumerate() {
        for h in 0..heads {
            for i in 0..hd / 2 {
                let theta = pos as f64 * base.powf(-(2.0 * i as f64) / hd as f64);
                let (s, c) = theta.sin_cos();
                let (x, y) = (row[h * hd + 2 * i], row[h * hd + 2 * i + 1]);
                row[h * hd + 2 * i] = x * c - y * s;
                row[h * hd + 2 * i + 1] = x * s + y * c;
            }
        }
    }
}

fn add(a: &M, b: &M, s: f64) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + s * q).collect()).collect()
}

/// `None` = full attention, `Some(α)` = skipped path with pre-attention norm.
pub fn forward(ck: &Checkpoint, tokens: &[u32], plan: &[Option<f64>]) -> M {
    let cfg = &ck.config;
    let (hq, hkv, hd) = (cfg.num_query_heads, cfg.num_kv_heads, cfg.head_dim);
    let g = hq / hkv;
    let mut h: M = tokens.iter().map(|&t| ck.embedding.row(t as usize).iter().map(|&v| v as f64).collect()).collect();
    let n = h.len();
    for (l, w) in ck.layers.iter().enumerate() {
        let x = rms(&h, &w.attn_norm);
        let v = mm(&x, &w.wv);
        let mut heads_out = vec![vec![0.0; hq * hd]; n];
        match plan[l] {
            None => {
                let mut q = mm(&x, w.wq.as_ref().unwrap());
                let mut k = mm(&x, w.wk.as_ref().unwrap());
                rope(&mut q, hq, hd, cfg.rope_base as f64);
                rope(&mut k, hkv, hd, cfg.rope_base as f64);
                for head in 0..hq {
                    let kv = head / g;
                    for i in 0..n {
                        let scores: Vec<f64> = (0..=i)
                            .map(|j| {
                                (0..hd).map(|c| q[i][head * hd + c] * k[j][kv * hd + c]).sum::<f64>()
                                    / (hd as f64).sqrt()
                            })
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                        for (j, s) in scores.iter().enumerate() {
                            let p = (s - m).exp() / z;
                            for c in 0..hd {
                                heads_out[i][head * hd + c] += p * v[j][kv * hd + c];
                            }
                        }
                    }
                }
            }
            Some(_) => {
                for i in 0..n {
                    for head in 0..hq {
                        for c in 0..hd {
                            heads_out[i][head * hd + c] = v[i][(head / g) * hd + c];
                        }
                    }
                }
            }
        }
        let o = mm(&heads_out, &w.wo);
        h = add(&h, &o, plan[l].unwrap_or(1.0));
        let y = rms(&h, &w.ffn_norm);
        let gate = mm(&y, &w.w_gate);
        let up = mm(&y, &w.w_up);
        let act: M = gate
            .iter()
            .zip(&up)
            .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect())
            .collect();
        h = add(&h, &mm(&act, &w.w_down), 1.0);
    }
    let x = rms(&h, &ck.final_norm);
    mm(&x, &ck.output_matrix().transpose())
}

/// Per-token NLL loop over the same windows the evaluator uses: the first
/// window scores all targets, later windows advance by `stride` and score only
/// the new ones.
pub fn perplexity(ck: &Checkpoint, tokens: &[u32], window: usize, stride: usize, plan: &[Option<f64>]) -> f64 {
    let last = tokens.len() - 1;
    let (mut end, mut scored_to) = (window.min(last), 0usize);
    let (mut total, mut count) = (0.0f64, 0usize);
    loop {
        let begin = end.saturating_sub(window);
        let logits = forward(ck, &tokens[begin..end], plan);
        for target in scored_to + 1..=end {
            let row = &logits[target - 1 - begin];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[tokens[target] as usize];
            count += 1;
        }
        scored_to = end;
        if end == last {
            break;
        }
        end = (end + stride).min(last);
    }
    assert_eq!(count, last);
    (total / count as f64).exp()
}

pub fn max_rel_err(a: &Matrix, b: &M) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            num = num.max((a.get(i, j) as f64 - v).abs());
            den = den.max(v.abs());
        }
    }
    num / den.max(1e-30)
}
