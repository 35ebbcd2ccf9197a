//! Measurable proxies for over-smoothing and attention informativeness.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{HarpError, Result};
use crate::model::{forward, CaptureFlags, LayerPlan};
use crate::tensor::{dot, rms_norm, softmax_in_place, Matrix};

const ROW_SUM_TOL: f64 = 1e-5;

/// One line of the diagnostics JSON-lines output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub layer: usize,
    /// Mean pairwise token cosine similarity of the layer input.
    pub sim: f64,
    /// Distance of the layer input from the all-rows-equal subspace.
    pub d_m: f64,
    /// Mean normalized attention entropy across heads; absent for skipped layers.
    pub attention_entropy: Option<f64>,
    /// Mean `‖A·X‖/‖X‖` across heads for the normalized layer input.
    pub frobenius_ratio: Option<f64>,
}

fn unit_rows(h: &Matrix) -> Result<Vec<Vec<f64>>> {
    (0..h.rows())
        .map(|i| {
            let row = h.row(i);
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(HarpError::contract(format!("row {i} has zero norm")));
            }
            Ok(row.iter().map(|&v| v as f64 / norm).collect())
        })
        .collect()
}

/// Average pairwise cosine similarity among rows.
pub fn sim_metric(h: &Matrix) -> Result<f64> {
    let n = h.rows();
    if n < 2 {
        return Err(HarpError::contract("sim_metric needs at least two rows"));
    }
    let rows = unit_rows(h)?;
    let mut total = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            total += rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(2.0 * total / (n * (n - 1)) as f64)
}

/// `‖H − e·mean_row(H)‖_F`; the column mean is the minimizing shared row.
pub fn dm_distance(h: &Matrix) -> Result<f64> {
    let (n, d) = h.shape();
    if n == 0 {
        return Err(HarpError::contract("dm_distance of an empty matrix"));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(h.row(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut ss = 0.0f64;
    for i in 0..n {
        for (m, &v) in mean.iter().zip(h.row(i)) {
            ss += (v as f64 - m).powi(2);
        }
    }
    Ok(ss.sqrt())
}

fn check_row_stochastic(a: &Matrix) -> Result<()> {
    let (n, m) = a.shape();
    if n != m {
        return Err(HarpError::contract(format!("attention matrix is {n}x{m}, not square")));
    }
    for i in 0..n {
        let row = a.row(i);
        if let Some(v) = row.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
            return Err(HarpError::contract(format!("row {i} has invalid entry {v}")));
        }
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(HarpError::contract(format!("row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// `‖Â·H‖_F / ‖H‖_F` evaluated in f64.
pub fn frobenius_ratio(a_hat: &Matrix, h: &Matrix) -> Result<f64> {
    check_row_stochastic(a_hat)?;
    if a_hat.cols() != h.rows() {
        return Err(HarpError::contract("attention and hidden state disagree on N"));
    }
    let h_norm = h.frobenius_norm();
    if h_norm == 0.0 {
        return Err(HarpError::contract("frobenius_ratio of a zero hidden state"));
    }
    let (n, d) = h.shape();
    let mut ss = 0.0f64;
    let mut row = vec![0.0f64; d];
    for i in 0..n {
        row.fill(0.0);
        for (j, &a) in a_hat.row(i).iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (r, &v) in row.iter_mut().zip(h.row(j)) {
                *r += a as f64 * v as f64;
            }
        }
        // Same accumulation order as `frobenius_norm`, so identity gives exactly 1.
        for v in &row {
            ss += v * v;
        }
    }
    Ok(ss.sqrt() / h_norm)
}

/// Mean over rows `i ≥ 1` of the row entropy divided by `ln(i+1)`, the
/// maximum on a causal support of `i+1` keys. In `[0, 1]`.
pub fn attention_entropy(a_hat: &Matrix) -> Result<f64> {
    check_row_stochastic(a_hat)?;
    let n = a_hat.rows();
    for i in 0..n {
        if a_hat.row(i)[i + 1..].iter().any(|&v| v != 0.0) {
            return Err(HarpError::contract(format!("row {i} attends to future positions")));
        }
    }
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for i in 1..n {
        let entropy: f64 = a_hat.row(i)[..=i]
            .iter()
            .filter(|&&a| a > 0.0)
            .map(|&a| -(a as f64) * (a as f64).ln())
            .sum();
        total += entropy / ((i + 1) as f64).ln();
    }
    Ok((total / (n - 1) as f64).clamp(0.0, 1.0))
}

/// Causal softmax of `q·kᵀ / sqrt(d_k)` with no positional encoding.
pub fn causal_attention_probs(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.shape() != k.shape() {
        return Err(HarpError::contract("query and key shapes differ"));
    }
    let (n, dk) = q.shape();
    let scale = 1.0 / (dk as f32).sqrt();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let row = &mut out.row_mut(i)[..=i];
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(q.row(i), k.row(j)) * scale;
        }
        softmax_in_place(row);
    }
    Ok(out)
}

/// Per-layer diagnostics of one forward pass over `tokens`.
pub fn diagnose(checkpoint: &Checkpoint, plan: &LayerPlan, tokens: &[u32]) -> Result<Vec<DiagnosticsRecord>> {
    let out = forward(checkpoint, tokens, plan, CaptureFlags { hidden: true, attention: true })?;
    let hidden = out.hidden.expect("captured");
    let attention = out.attention.expect("captured");
    let mut records = Vec::with_capacity(checkpoint.config.num_layers);
    for (layer, probs) in attention.iter().enumerate() {
        let h = &hidden[layer];
        let sim = if h.rows() >= 2 { sim_metric(h)? } else { 1.0 };
        let (entropy, ratio) = match probs {
            Some(heads) => {
                let x = rms_norm(h, &checkpoint.layers[layer].attn_norm)?;
                let mut e = 0.0;
                let mut r = 0.0;
                for a in heads {
                    e += attention_entropy(a)?;
                    r += frobenius_ratio(a, &x)?;
                }
                let k = heads.len() as f64;
                (Some(e / k), Some(r / k))
            }
            None => (None, None),
        };
        records.push(DiagnosticsRecord {
            layer,
            sim,
            d_m: dm_distance(h)?,
            attention_entropy: entropy,
            frobenius_ratio: ratio,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::generate_model;
    use crate::config::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sim_identical_orthogonal_and_hand_case() {
        let same = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        assert!((sim_metric(&same).unwrap() - 1.0).abs() < 1e-12);
        let orth = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]);
        assert_eq!(sim_metric(&orth).unwrap(), 0.0);
        let hand = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]);
        assert!((sim_metric(&hand).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sim_rejects_zero_rows() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(sim_metric(&m), Err(HarpError::Contract(_))));
        assert!(sim_metric(&Matrix::from_rows(&[[1.0]])).is_err());
    }

    #[test]
    fn dm_zero_on_shared_rows_and_hand_case() {
        let shared = Matrix::from_rows(&[[0.5, -1.0, 2.0], [0.5, -1.0, 2.0]]);
        assert_eq!(dm_distance(&shared).unwrap(), 0.0);
        let h = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]);
        assert!((dm_distance(&h).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dm_closed_form_beats_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let h = Matrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let closed = dm_distance(&h).unwrap();
            let step = 0.01;
            let mut best = f64::INFINITY;
            for a in -100..=100 {
                for b in -100..=100 {
                    let c = [a as f64 * step, b as f64 * step];
                    let d: f64 = (0..3)
                        .flat_map(|i| (0..2).map(move |j| (i, j)))
                        .map(|(i, j)| (h.get(i, j) as f64 - c[j]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    best = best.min(d);
                }
            }
            assert!(closed <= best + 1e-12);
            // Grid spacing 0.01 bounds how far the best grid point can be from the optimum.
            assert!(best - closed < 3f64.sqrt() * step, "{best} vs {closed}");
        }
    }

    #[test]
    fn frobenius_identity_is_exactly_one() {
        let h = Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.7], [-0.1, 0.0]]);
        assert_eq!(frobenius_ratio(&Matrix::identity(3), &h).unwrap(), 1.0);
    }

    #[test]
    fn frobenius_uniform_cancels_opposite_rows() {
        let a = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]);
        let h = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(frobenius_ratio(&a, &h).unwrap(), 0.0);
    }

    #[test]
    fn frobenius_rejects_zero_hidden_and_bad_rows() {
        let a = Matrix::identity(2);
        assert!(frobenius_ratio(&a, &Matrix::zeros(2, 3)).is_err());
        let bad = Matrix::from_rows(&[[0.5, 0.4], [0.0, 1.0]]);
        assert!(frobenius_ratio(&bad, &Matrix::identity(2)).is_err());
    }

    #[test]
    fn entropy_extremes() {
        assert_eq!(attention_entropy(&Matrix::identity(5)).unwrap(), 0.0);
        let n = 6;
        let mut uniform = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                uniform.set(i, j, 1.0 / (i + 1) as f32);
            }
        }
        assert!((attention_entropy(&uniform).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_negative_and_acausal() {
        let neg = Matrix::from_rows(&[[1.0, 0.0], [1.5, -0.5]]);
        assert!(matches!(attention_entropy(&neg), Err(HarpError::Contract(_))));
        let acausal = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]);
        assert!(attention_entropy(&acausal).is_err());
    }

    #[test]
    fn diagnose_reports_every_layer() {
        let ck = generate_model(&ModelConfig::tiny(), 3).unwrap();
        let spec = crate::pruning::PruneSpec::top(4, 1).unwrap();
        let plan = LayerPlan::new(&ck.config, &spec, &[1.0]).unwrap();
        let recs = diagnose(&ck, &plan, &[10, 20, 30, 40, 50, 60]).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs[3].attention_entropy.is_none());
        for r in &recs[..3] {
            let e = r.attention_entropy.unwrap();
            assert!((0.0..=1.0 + 1e-6).contains(&e));
            assert!(r.frobenius_ratio.unwrap() > 0.0);
            assert!(r.d_m >= 0.0 && (-1.0..=1.0).contains(&r.sim));
        }
    }

    proptest! {
        #[test]
        fn sim_invariant_under_row_scaling(
            vals in proptest::collection::vec(-5.0f32..5.0, 12),
            scales in proptest::collection::vec(0.1f32..10.0, 4),
        ) {
            let h = Matrix::from_vec(4, 3, vals).unwrap();
            prop_assume!((0..4).all(|i| h.row(i).iter().any(|v| v.abs() > 1e-3)));
            let mut scaled = h.clone();
            for i in 0..4 {
                for v in scaled.row_mut(i) { *v *= scales[i]; }
            }
            let (a, b) = (sim_metric(&h).unwrap(), sim_metric(&scaled).unwrap());
            prop_assert!((a - b).abs() < 1e-5);
        }

        #[test]
        fn dm_scales_linearly(vals in proptest::collection::vec(-5.0f32..5.0, 12), s in 0.5f32..4.0) {
            let h = Matrix::from_vec(4, 3, vals).unwrap();
            let a = dm_distance(&h).unwrap();
            let b = dm_distance(&h.scale(s)).unwrap();
            prop_assert!((b - s as f64 * a).abs() <= 1e-5 * (1.0 + b));
        }
    }
}
