//! Training objectives: symmetric retrieval InfoNCE, layer-diagonal prompt
//! alignment between modalities, cross-task prompt alignment (NT-BXent), and
//! their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub base: f64,
    pub modal: f64,
    pub task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            base: 0.8,
            modal: 0.1,
            task: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub modal: f64,
    pub task: f64,
    pub retrieval: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            modal: 0.01,
            task: 0.01,
            retrieval: 0.05,
        }
    }
}

/// Sum of the diagonal of a square matrix node.
fn trace(tape: &mut Tape, m: Var) -> Result<Var> {
    let n = tape.shape(m)[0];
    let eye = tape.constant(Tensor::eye(n));
    let d = tape.mul(m, eye)?;
    Ok(tape.sum(d))
}

/// Symmetric InfoNCE over a batch of matched pairs: row `i` of `vision` is
/// the positive for row `i` of `text`.
pub fn retrieval_loss(tape: &mut Tape, vision: Var, text: Var, tau: f64) -> Result<Var> {
    let (vs, ts) = (tape.shape(vision).to_vec(), tape.shape(text).to_vec());
    if vs.len() != 2 || vs != ts {
        return Err(Error::shape("retrieval_loss", &vs, &ts));
    }
    let scores = tape.matmul_t(vision, text)?;
    retrieval_loss_from_scores(tape, scores, tau)
}

/// Symmetric InfoNCE over a square image-by-text score matrix whose
/// diagonal holds the matching pairs.
pub fn retrieval_loss_from_scores(tape: &mut Tape, scores: Var, tau: f64) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::domain("retrieval_loss", format!("scores must be square, got {s:?}")));
    }
    let b = s[0];
    if b < 2 {
        return Err(Error::domain("retrieval_loss", "batch needs at least 2 pairs"));
    }
    let logits = tape.scale(scores, 1.0 / tau);
    let rows = tape.log_softmax(logits);
    let cols_in = tape.transpose(logits)?;
    let cols = tape.log_softmax(cols_in);
    let r = trace(tape, rows)?;
    let c = trace(tape, cols)?;
    let both = tape.add(r, c)?;
    Ok(tape.scale(both, -0.5 / b as f64))
}

/// Prompt alignment across layers: layer `i` of the visual prompts should
/// match layer `i` of the textual prompts and no other layer.
///
/// `pv: D×L×d_v`, `pl: D×L×d_l`. Both operands are divided by `tau` before the
/// product, so the effective logit scale is `1/tau²`.
pub fn hpa_loss(tape: &mut Tape, pv: Var, pl: Var, tau: f64) -> Result<Var> {
    let (a, b) = (tape.shape(pv).to_vec(), tape.shape(pl).to_vec());
    if a.len() != 3 || b.len() != 3 || a[..2] != b[..2] {
        return Err(Error::shape("hpa_loss", &a, &b));
    }
    let depth = a[0];
    let mv = tape.mean_axis(pv, 2)?;
    let ml = tape.mean_axis(pl, 2)?;
    let mv = tape.scale(mv, 1.0 / tau);
    let ml = tape.scale(ml, 1.0 / tau);
    let logits = tape.matmul_t(mv, ml)?;
    let ls = tape.log_softmax(logits);
    let diag = trace(tape, ls)?;
    Ok(tape.scale(diag, -1.0 / depth as f64))
}

/// Pairwise task relatedness from task-name embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLabelMatrix {
    /// `z[i][j]` is true when tasks `i` and `j` count as a positive pair.
    pub z: Vec<Vec<bool>>,
    pub cosine: Vec<Vec<f64>>,
    pub threshold: f64,
}

impl TaskLabelMatrix {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Leading `k × k` block.
    pub fn truncate(&self, k: usize) -> Self {
        Self {
            z: self.z[..k].iter().map(|r| r[..k].to_vec()).collect(),
            cosine: self.cosine[..k].iter().map(|r| r[..k].to_vec()).collect(),
            threshold: self.threshold,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `z_ij = 1` iff `cos(S_i, S_j) ≥ threshold`.
pub fn task_label_matrix(embeddings: &[Vec<f64>], threshold: f64) -> Result<TaskLabelMatrix> {
    for (i, e) in embeddings.iter().enumerate() {
        if e.iter().all(|&x| x == 0.0) {
            return Err(Error::domain("task_label_matrix", format!("task {i} has a zero-norm name embedding")));
        }
    }
    let k = embeddings.len();
    let mut c = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            c[i][j] = if i == j { 1.0 } else { cosine(&embeddings[i], &embeddings[j]) };
        }
    }
    let z = c.iter().map(|row| row.iter().map(|&v| v >= threshold).collect()).collect();
    Ok(TaskLabelMatrix {
        z,
        cosine: c,
        threshold,
    })
}

/// `log σ(x)` elementwise, computed as the first entry of a two-way
/// log-softmax over `[x, 0]`.
fn log_sigmoid(tape: &mut Tape, x: Var) -> Result<Var> {
    let mut shape = tape.shape(x).to_vec();
    shape.push(1);
    let col = tape.reshape(x, &shape)?;
    let zeros = tape.constant(Tensor::zeros(&shape));
    let pair = tape.concat(&[col, zeros], shape.len() - 1)?;
    let ls = tape.log_softmax(pair);
    let first = tape.narrow(ls, shape.len() - 1, 0, 1)?;
    shape.pop();
    tape.reshape(first, &shape)
}

/// Stack flattened prompts of `k` tasks into a `k × n` matrix.
fn flatten_rows(tape: &mut Tape, prompts: &[Var]) -> Result<Var> {
    let rows = prompts
        .iter()
        .map(|&p| {
            let n = tape.value(p).numel();
            tape.reshape(p, &[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&rows, 0)
}

/// Per-modality sum over tasks of the normalized NT-BXent terms.
fn cpa_modality(tape: &mut Tape, prompts: &[Var], z: &TaskLabelMatrix, tau: f64) -> Result<Var> {
    let k = prompts.len();
    let flat = flatten_rows(tape, prompts)?;
    let ts = tape.cosine_matrix(flat, flat)?;
    let pos_logit = tape.scale(ts, 1.0 / tau);
    let pos = log_sigmoid(tape, pos_logit)?;
    let one_minus = tape.scale(ts, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let neg_logit = tape.scale(one_minus, 1.0 / tau);
    let neg = log_sigmoid(tape, neg_logit)?;

    let mut w_pos = vec![0.0; k * k];
    let mut w_neg = vec![0.0; k * k];
    for i in 0..k {
        let n_pos = z.z[i].iter().filter(|&&p| p).count();
        let n_neg = k - n_pos;
        for j in 0..k {
            if z.z[i][j] {
                w_pos[i * k + j] = 1.0 / n_pos as f64;
            } else {
                w_neg[i * k + j] = 1.0 / n_neg as f64;
            }
        }
    }
    let w_pos = tape.constant(Tensor::new(vec![k, k], w_pos)?);
    let w_neg = tape.constant(Tensor::new(vec![k, k], w_neg)?);
    let a = tape.mul(pos, w_pos)?;
    let b = tape.mul(neg, w_neg)?;
    let sa = tape.sum(a);
    let sb = tape.sum(b);
    let s = tape.add(sa, sb)?;
    Ok(tape.scale(s, -1.0))
}

/// Cross-task prompt alignment over tasks `1..=k`, where `vision[i]` and
/// `text[i]` are task `i`'s reconstructed prompts. Earlier tasks should be
/// passed as constant nodes so only the current task receives gradient.
pub fn cpa_loss(tape: &mut Tape, vision: &[Var], text: &[Var], z: &TaskLabelMatrix, tau: f64) -> Result<Var> {
    let k = vision.len();
    if k == 0 || text.len() != k || z.len() < k {
        return Err(Error::shape("cpa_loss", &[vision.len(), text.len()], &[z.len()]));
    }
    let z = z.truncate(k);
    let lv = cpa_modality(tape, vision, &z, tau)?;
    let ll = cpa_modality(tape, text, &z, tau)?;
    let s = tape.add(lv, ll)?;
    Ok(tape.scale(s, 1.0 / (2 * k) as f64))
}

/// `w.base · base + w.modal · modal + w.task · task`; absent components are
/// skipped.
pub fn total_loss(tape: &mut Tape, base: Var, modal: Option<Var>, task: Option<Var>, w: &LossWeights) -> Result<Var> {
    let mut total = tape.scale(base, w.base);
    for (part, weight) in [(modal, w.modal), (task, w.task)] {
        if let Some(p) = part {
            let scaled = tape.scale(p, weight);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, sigmoid};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    /// Scalar NT-BXent for one modality, written directly from the formulas.
    fn scalar_cpa_modality(flat: &[Vec<f64>], z: &[Vec<bool>], tau: f64) -> f64 {
        let k = flat.len();
        let mut total = 0.0;
        for i in 0..k {
            let n_pos = z[i].iter().filter(|&&p| p).count() as f64;
            let n_neg = k as f64 - n_pos;
            let (mut pos, mut neg) = (0.0, 0.0);
            for j in 0..k {
                let ts = cosine(&flat[i], &flat[j]);
                if z[i][j] {
                    pos += -sigmoid(ts / tau).ln();
                } else {
                    neg += -sigmoid((1.0 - ts) / tau).ln();
                }
            }
            if n_pos > 0.0 {
                total += pos / n_pos;
            }
            if n_neg > 0.0 {
                total += neg / n_neg;
            }
        }
        total
    }

    #[test]
    fn retrieval_identity_pairs_at_unit_temperature() {
        let loss = eval(|tape| {
            let v = tape.constant(Tensor::eye(2));
            let tt = tape.constant(Tensor::eye(2));
            retrieval_loss(tape, v, tt, 1.0)
        });
        let e = 1f64.exp();
        assert!((loss - -(e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn retrieval_vanishes_as_temperature_drops() {
        let loss = eval(|tape| {
            let v = tape.constant(Tensor::eye(3));
            let tt = tape.constant(Tensor::eye(3));
            retrieval_loss(tape, v, tt, 0.01)
        });
        assert!(loss < 1e-40);
    }

    #[test]
    fn retrieval_needs_two_pairs() {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        assert!(retrieval_loss(&mut tape, v, v, 0.05).is_err());
    }

    #[test]
    fn retrieval_is_invariant_to_consistent_relabeling() {
        let v = rand_t(&[4, 3], 1);
        let w = rand_t(&[4, 3], 2);
        let perm = [2, 0, 3, 1];
        let permute = |m: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = eval(|tape| {
            let (x, y) = (tape.constant(v.clone()), tape.constant(w.clone()));
            retrieval_loss(tape, x, y, 0.5)
        });
        let b = eval(|tape| {
            let (x, y) = (tape.constant(permute(&v)), tape.constant(permute(&w)));
            retrieval_loss(tape, x, y, 0.5)
        });
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn hpa_single_layer_is_zero() {
        let loss = eval(|tape| {
            let pv = tape.constant(rand_t(&[1, 4, 3], 1));
            let pl = tape.constant(rand_t(&[1, 4, 2], 2));
            hpa_loss(tape, pv, pl, 0.01)
        });
        assert!(loss.abs() <= 1e-12);
    }

    #[test]
    fn hpa_two_layer_hand_value() {
        // Width 1, so the per-layer means are the token rows (√2, 0) and
        // (0, √2); with tau = 1 the logits are [[2, 0], [0, 2]].
        let r2 = 2f64.sqrt();
        let loss = eval(|tape| {
            let pv = tape.constant(t(&[2, 2, 1], &[r2, 0.0, 0.0, r2]));
            let pl = tape.constant(t(&[2, 2, 1], &[r2, 0.0, 0.0, r2]));
            hpa_loss(tape, pv, pl, 1.0)
        });
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 1.0)).ln();
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
        assert!((loss - 0.12693).abs() < 1e-5);
    }

    #[test]
    fn hpa_saturated_diagonal_is_near_zero() {
        // Means 10·e_i with tau = 1 give logits 100·I.
        let loss = eval(|tape| {
            let pv = tape.constant(t(&[2, 2, 1], &[10.0, 0.0, 0.0, 10.0]));
            let pl = tape.constant(t(&[2, 2, 1], &[10.0, 0.0, 0.0, 10.0]));
            hpa_loss(tape, pv, pl, 1.0)
        });
        assert!(loss < 1e-12);
    }

    #[test]
    fn label_matrix_threshold_is_inclusive() {
        // cos = 0.6 exactly between [1, 0] and [0.6, 0.8].
        let z = task_label_matrix(&[vec![1.0, 0.0], vec![0.6, 0.8]], 0.6).unwrap();
        assert_eq!(z.cosine[0][1], 0.6);
        assert!(z.z[0][1] && z.z[1][0]);
        let z = task_label_matrix(&[vec![1.0, 0.0], vec![0.6, 0.8]], 0.6000001).unwrap();
        assert!(!z.z[0][1]);
    }

    #[test]
    fn orthogonal_names_give_identity_labels() {
        let z = task_label_matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]], 0.4).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(z.z[i][j], i == j);
            }
        }
        let same = task_label_matrix(&[vec![1.0, 2.0], vec![1.0, 2.0]], 0.4).unwrap();
        assert!(same.z.iter().flatten().all(|&p| p));
    }

    #[test]
    fn zero_name_embedding_is_an_error() {
        assert!(task_label_matrix(&[vec![0.0, 0.0]], 0.4).is_err());
    }

    #[test]
    fn cpa_single_task_is_saturated() {
        let z = task_label_matrix(&[vec![1.0]], 0.4).unwrap();
        let loss = eval(|tape| {
            let pv = tape.constant(rand_t(&[2, 3, 4], 1));
            let pl = tape.constant(rand_t(&[2, 3, 2], 2));
            cpa_loss(tape, &[pv], &[pl], &z, 0.01)
        });
        assert!(loss < 1e-40, "{loss}");
    }

    #[test]
    fn cpa_negative_pair_with_identical_prompts_is_ln2() {
        // Two identical tasks labelled negative: TS = 1, so each negative term
        // is -log σ(0) = ln 2, while the self pairs contribute ≈ 0.
        let z = TaskLabelMatrix {
            z: vec![vec![true, false], vec![false, true]],
            cosine: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            threshold: 0.4,
        };
        let p = rand_t(&[2, 2, 3], 5);
        let q = rand_t(&[2, 2, 2], 6);
        let loss = eval(|tape| {
            let a = tape.constant(p.clone());
            let b = tape.constant(q.clone());
            cpa_loss(tape, &[a, a], &[b, b], &z, 0.01)
        });
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn cpa_matches_scalar_oracle() {
        let z = TaskLabelMatrix {
            z: vec![vec![true, false], vec![false, true]],
            cosine: vec![vec![1.0, 0.1], vec![0.1, 1.0]],
            threshold: 0.4,
        };
        let pv = [t(&[1, 2, 2], &[0.3, -0.2, 0.5, 0.1]), t(&[1, 2, 2], &[0.2, 0.4, -0.1, 0.3])];
        let pl = [t(&[1, 2, 1], &[0.7, -0.3]), t(&[1, 2, 1], &[0.1, 0.9])];
        for tau in [0.01, 0.5, 1.0] {
            let loss = eval(|tape| {
                let v: Vec<Var> = pv.iter().map(|p| tape.constant(p.clone())).collect();
                let l: Vec<Var> = pl.iter().map(|p| tape.constant(p.clone())).collect();
                cpa_loss(tape, &v, &l, &z, tau)
            });
            let fv: Vec<Vec<f64>> = pv.iter().map(|p| p.to_vec()).collect();
            let fl: Vec<Vec<f64>> = pl.iter().map(|p| p.to_vec()).collect();
            let expected = (scalar_cpa_modality(&fv, &z.z, tau) + scalar_cpa_modality(&fl, &z.z, tau)) / 4.0;
            assert!((loss - expected).abs() < 1e-9, "tau {tau}: {loss} vs {expected}");
        }
    }

    #[test]
    fn cpa_all_positive_drops_negative_term() {
        let z = task_label_matrix(&[vec![1.0], vec![2.0]], 0.4).unwrap();
        let pv = [rand_t(&[3], 1), rand_t(&[3], 2)];
        let pl = [rand_t(&[2], 3), rand_t(&[2], 4)];
        let loss = eval(|tape| {
            let v: Vec<Var> = pv.iter().map(|p| tape.constant(p.clone())).collect();
            let l: Vec<Var> = pl.iter().map(|p| tape.constant(p.clone())).collect();
            cpa_loss(tape, &v, &l, &z, 0.3)
        });
        let fv: Vec<Vec<f64>> = pv.iter().map(|p| p.to_vec()).collect();
        let fl: Vec<Vec<f64>> = pl.iter().map(|p| p.to_vec()).collect();
        let expected = (scalar_cpa_modality(&fv, &z.z, 0.3) + scalar_cpa_modality(&fl, &z.z, 0.3)) / 4.0;
        assert!(loss.is_finite());
        assert!((loss - expected).abs() < 1e-9);
    }

    #[test]
    fn cpa_gives_frozen_tasks_no_gradient() {
        let z = task_label_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.4).unwrap();
        let mut tape = Tape::new();
        let frozen_v = tape.constant(rand_t(&[2, 2, 3], 1));
        let frozen_l = tape.constant(rand_t(&[2, 2, 2], 2));
        let live_v = tape.param(rand_t(&[2, 2, 3], 3));
        let live_l = tape.param(rand_t(&[2, 2, 2], 4));
        let loss = cpa_loss(&mut tape, &[frozen_v, live_v], &[frozen_l, live_l], &z, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(frozen_v).is_none() && g.get(frozen_l).is_none());
        assert!(g.wrt(live_v).data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn pair_term_is_monotone_in_similarity() {
        // d/dTS of the positive term is negative, of the negative term positive.
        let tau = 0.2;
        let pos = |ts: f64| -sigmoid(ts / tau).ln();
        let neg = |ts: f64| -sigmoid((1.0 - ts) / tau).ln();
        let h = 1e-6;
        for i in 0..=40 {
            let ts = -1.0 + i as f64 * 0.05;
            assert!(pos(ts + h) - pos(ts - h) < 0.0);
            assert!(neg(ts + h) - neg(ts - h) > 0.0);
        }
    }

    #[test]
    fn total_loss_weights_and_linearity() {
        let w = LossWeights::default();
        let v = eval(|tape| {
            let one = tape.constant(Tensor::scalar(1.0));
            total_loss(tape, one, Some(one), Some(one), &w)
        });
        assert!((v - 1.0).abs() < 1e-15);
        let base_only = eval(|tape| {
            let b = tape.constant(Tensor::scalar(2.5));
            let m = tape.constant(Tensor::scalar(7.0));
            total_loss(
                tape,
                b,
                Some(m),
                None,
                &LossWeights {
                    base: 1.0,
                    modal: 0.0,
                    task: 0.0,
                },
            )
        });
        assert_eq!(base_only, 2.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn hpa_is_non_negative_and_layer_permutation_invariant(seed in any::<u64>()) {
            let pv = rand_t(&[3, 2, 4], seed);
            let pl = rand_t(&[3, 2, 3], seed ^ 7);
            let perm = [2usize, 0, 1];
            let permute = |p: &Tensor| {
                let per = p.numel() / 3;
                let data: Vec<f64> = perm.iter().flat_map(|&i| p.data()[i * per..(i + 1) * per].to_vec()).collect();
                Tensor::new(p.shape().to_vec(), data).unwrap()
            };
            let run = |a: Tensor, b: Tensor| eval(|tape| {
                let (x, y) = (tape.constant(a), tape.constant(b));
                hpa_loss(tape, x, y, 0.7)
            });
            let base = run(pv.clone(), pl.clone());
            prop_assert!(base >= 0.0);
            prop_assert!((base - run(permute(&pv), permute(&pl))).abs() < 1e-12);
        }

        #[test]
        fn losses_match_finite_differences(seed in any::<u64>()) {
            let v = rand_t(&[3, 4], seed);
            let tt = rand_t(&[3, 4], seed ^ 1);
            let err = grad_check(|tape, p| {
                let a = tape.l2_normalize(p[0])?;
                let b = tape.l2_normalize(p[1])?;
                retrieval_loss(tape, a, b, 0.5)
            }, &[v, tt], 1e-5).unwrap();
            prop_assert!(err <= 1e-5, "retrieval {}", err);

            let pv = rand_t(&[3, 2, 4], seed ^ 2).map(|x| 0.3 * x);
            let pl = rand_t(&[3, 2, 3], seed ^ 3).map(|x| 0.3 * x);
            let err = grad_check(|tape, p| hpa_loss(tape, p[0], p[1], 0.5), &[pv.clone(), pl.clone()], 1e-5).unwrap();
            prop_assert!(err <= 1e-5, "hpa {}", err);

            let z = TaskLabelMatrix { z: vec![vec![true, false], vec![false, true]], cosine: vec![vec![1.0, 0.0], vec![0.0, 1.0]], threshold: 0.4 };
            let fv = rand_t(&[3, 2, 4], seed ^ 4);
            let fl = rand_t(&[3, 2, 3], seed ^ 5);
            let err = grad_check(|tape, p| {
                let a = tape.constant(fv.clone());
                let b = tape.constant(fl.clone());
                cpa_loss(tape, &[a, p[0]], &[b, p[1]], &z, 0.5)
            }, &[pv.clone(), pl.clone()], 1e-5).unwrap();
            prop_assert!(err <= 1e-5, "cpa {}", err);
        }
    }
}
