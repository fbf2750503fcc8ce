//! Connectionist Temporal Classification.
//!
//! Log-probabilities are `[T x (V+1)]`; column `V` (the last one) is the
//! blank. Labels are symbols in `[0, V)`.
//!
//! The loss is computed with the usual forward (alpha) / backward (beta)
//! recursion over the extended label sequence `␣ l1 ␣ l2 ␣ ... lS ␣`, entirely
//! in log space. Here beta excludes the emission at its own frame, so
//! `alpha_t(s) + beta_t(s)` is the log-mass of all alignments passing through
//! state `s` at frame `t`, and the gradient of the loss with respect to
//! `log_probs[t][k]` is minus the posterior occupancy of symbol `k` at `t`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{log_add_exp, log_sum_exp, Tensor};

/// Largest `(V+1)^T` the brute-force enumerator accepts.
pub const BRUTE_FORCE_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutput {
    /// `-log p(labels | log_probs)`; `+inf` when infeasible.
    pub loss: f64,
    /// Gradient of `loss` w.r.t. the log-probabilities; zero when infeasible.
    pub grad: Tensor,
    pub feasible: bool,
}

/// Number of adjacent equal pairs, each of which forces a blank between them.
pub fn repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Fewest frames that can emit `labels`.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + repeats(labels)
}

fn validate(log_probs: &Tensor, labels: &[usize]) -> Result<usize> {
    if log_probs.rank() != 2 || log_probs.cols() < 2 {
        return Err(Error::Contract(format!(
            "CTC log-probabilities must be [T x (V+1)] with V >= 1, got {:?}",
            log_probs.shape()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("CTC label sequence is empty".into()));
    }
    let blank = log_probs.cols() - 1;
    if let Some(&bad) = labels.iter().find(|&&l| l >= blank) {
        return Err(Error::Contract(format!(
            "label {bad} outside vocabulary [0, {blank})"
        )));
    }
    Ok(blank)
}

fn extended(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Whether state `s` may be entered from `s - 2` (skipping a blank).
fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

pub fn ctc_loss(log_probs: &Tensor, labels: &[usize]) -> Result<CtcOutput> {
    let blank = validate(log_probs, labels)?;
    let t_len = log_probs.rows();
    if t_len < min_frames(labels) {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad: Tensor::zeros(log_probs.shape()),
            feasible: false,
        });
    }
    let ext = extended(labels, blank);
    let n = ext.len();
    let lp = |t: usize, s: usize| log_probs.at(t, ext[s]);

    let mut alpha = vec![f64::NEG_INFINITY; t_len * n];
    alpha[0] = lp(0, 0);
    alpha[1] = lp(0, 1);
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        for s in 0..n {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add_exp(a, prev[s - 1]);
            }
            if can_skip(&ext, s, blank) {
                a = log_add_exp(a, prev[s - 2]);
            }
            cur[s] = if a == f64::NEG_INFINITY { a } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![f64::NEG_INFINITY; t_len * n];
    beta[(t_len - 1) * n + n - 1] = 0.0;
    beta[(t_len - 1) * n + n - 2] = 0.0;
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * n);
        let cur = &mut cur[t * n..];
        let next = &next[..n];
        for s in 0..n {
            let mut b = next[s] + lp(t + 1, s);
            if s + 1 < n {
                b = log_add_exp(b, next[s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < n && can_skip(&ext, s + 2, blank) {
                b = log_add_exp(b, next[s + 2] + lp(t + 1, s + 2));
            }
            cur[s] = b;
        }
    }

    let last = (t_len - 1) * n;
    let log_likelihood = log_add_exp(alpha[last + n - 1], alpha[last + n - 2]);
    if !log_likelihood.is_finite() {
        return Err(Error::Numeric(
            "CTC likelihood is zero or non-finite for a feasible label sequence".into(),
        ));
    }

    let mut grad = Tensor::zeros(log_probs.shape());
    let v1 = log_probs.cols();
    // Sum state occupancies per symbol in log space, then exponentiate once.
    let mut occupancy = vec![f64::NEG_INFINITY; v1];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        for s in 0..n {
            let ab = alpha[t * n + s] + beta[t * n + s];
            occupancy[ext[s]] = log_add_exp(occupancy[ext[s]], ab);
        }
        for (k, &o) in occupancy.iter().enumerate() {
            grad.data_mut()[t * v1 + k] = -libm::exp(o - log_likelihood);
        }
    }

    Ok(CtcOutput {
        loss: -log_likelihood,
        grad,
        feasible: true,
    })
}

/// Merges repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exhaustive CTC loss: enumerates every length-`T` symbol string, keeps those
/// that collapse to `labels`, and sums their probabilities. Refuses search
/// spaces larger than [`BRUTE_FORCE_CAP`].
pub fn ctc_brute_force(log_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let blank = validate(log_probs, labels)?;
    let (t_len, v1) = (log_probs.rows(), log_probs.cols());
    let space = (v1 as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if space > BRUTE_FORCE_CAP {
        return Err(Error::Contract(format!(
            "brute-force CTC over {v1}^{t_len} paths exceeds the cap of {BRUTE_FORCE_CAP}"
        )));
    }
    let mut path = vec![0usize; t_len];
    let mut matches = Vec::new();
    loop {
        if collapse(&path, blank) == labels {
            matches.push(path.iter().enumerate().map(|(t, &k)| log_probs.at(t, k)).sum());
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                let lse = log_sum_exp(&matches);
                return Ok(-lse);
            }
            path[i] += 1;
            if path[i] < v1 {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// The same forward recursion as [`ctc_loss`], recorded on the tape node by
/// node so that reverse mode differentiates the dynamic program itself.
/// Only reachable states get nodes. Meant for verification; it is slow.
pub fn ctc_loss_taped(g: &mut Graph, log_probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lp = g.value(log_probs).clone();
    let blank = validate(&lp, labels)?;
    let t_len = lp.rows();
    if t_len < min_frames(labels) {
        return Err(Error::Numeric("infeasible CTC instance cannot be taped".into()));
    }
    let ext = extended(labels, blank);
    let n = ext.len();
    let v1 = lp.cols();

    let mut prev: Vec<Option<NodeId>> = vec![None; n];
    prev[0] = Some(g.pick(log_probs, ext[0])?);
    prev[1] = Some(g.pick(log_probs, ext[1])?);
    for t in 1..t_len {
        let mut cur = vec![None; n];
        for s in 0..n {
            let mut sources: Vec<NodeId> = Vec::with_capacity(3);
            sources.extend(prev[s]);
            if s >= 1 {
                sources.extend(prev[s - 1]);
            }
            if can_skip(&ext, s, blank) {
                sources.extend(prev[s - 2]);
            }
            if sources.is_empty() {
                continue;
            }
            let reach = if sources.len() == 1 {
                sources[0]
            } else {
                g.log_sum_exp(&sources)?
            };
            let emit = g.pick(log_probs, t * v1 + ext[s])?;
            cur[s] = Some(g.add(reach, emit)?);
        }
        prev = cur;
    }
    let finals: Vec<NodeId> = [prev[n - 1], prev[n - 2]].into_iter().flatten().collect();
    let ll = g.log_sum_exp(&finals)?;
    Ok(g.scale(ll, -1.0))
}

/// Best-path decoding: per-frame argmax, then [`collapse`].
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let blank = log_probs.cols() - 1;
    let path: Vec<usize> = (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path, blank)
}

/// Levenshtein distance.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1).min(row[j] + 1).min(diag + usize::from(x != y));
            diag = up;
        }
    }
    row[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_differences, max_relative_error};
    use crate::rng::SplitMix64;

    fn random_log_probs(t: usize, v1: usize, rng: &mut SplitMix64) -> Tensor {
        Tensor::uniform(&[t, v1], -3.0, 3.0, rng).log_softmax_rows()
    }

    fn ln(x: f64) -> f64 {
        libm::log(x)
    }

    #[test]
    fn single_frame_single_label() {
        let mut rng = SplitMix64::new(1);
        let lp = random_log_probs(1, 3, &mut rng);
        let out = ctc_loss(&lp, &[1]).unwrap();
        assert!((out.loss + lp.at(0, 1)).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_alignments() {
        let mut rng = SplitMix64::new(2);
        let lp = random_log_probs(2, 3, &mut rng);
        let p = |t: usize, k: usize| libm::exp(lp.at(t, k));
        let (a, blank) = (0, 2);
        let expected =
            -ln(p(0, a) * p(1, a) + p(0, a) * p(1, blank) + p(0, blank) * p(1, a));
        assert!((ctc_loss(&lp, &[a]).unwrap().loss - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_forces_blank() {
        let mut rng = SplitMix64::new(3);
        let lp = random_log_probs(3, 3, &mut rng);
        let p = |t: usize, k: usize| libm::exp(lp.at(t, k));
        let expected = -ln(p(0, 0) * p(1, 2) * p(2, 0));
        assert!((ctc_loss(&lp, &[0, 0]).unwrap().loss - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_two_frames() {
        let lp = Tensor::full(&[2, 2], ln(0.5));
        let expected = -ln(0.75);
        assert!((ctc_loss(&lp, &[0]).unwrap().loss - expected).abs() < 1e-12);
        assert!((ctc_brute_force(&lp, &[0]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_flagged_on_both_sides() {
        let lp = Tensor::full(&[2, 3], ln(1.0 / 3.0));
        let out = ctc_loss(&lp, &[1, 1]).unwrap();
        assert!(!out.feasible);
        assert_eq!(out.loss, f64::INFINITY);
        assert_eq!(out.grad, Tensor::zeros(&[2, 3]));
        assert_eq!(ctc_brute_force(&lp, &[1, 1]).unwrap(), f64::INFINITY);
        assert_eq!(ctc_brute_force(&lp, &[0, 1, 0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn brute_force_refuses_large_spaces() {
        let lp = Tensor::full(&[13, 3], ln(1.0 / 3.0));
        assert!(matches!(ctc_brute_force(&lp, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_labels_rejected() {
        let lp = Tensor::full(&[3, 3], ln(1.0 / 3.0));
        assert!(ctc_loss(&lp, &[]).is_err());
        assert!(ctc_loss(&lp, &[2]).is_err());
    }

    #[test]
    fn matches_brute_force_on_small_grid() {
        let mut rng = SplitMix64::new(77);
        for _ in 0..200 {
            let t = 1 + rng.below(5);
            let v = 1 + rng.below(3);
            let s = 1 + rng.below(3);
            let labels: Vec<usize> = (0..s).map(|_| rng.below(v)).collect();
            let lp = random_log_probs(t, v + 1, &mut rng);
            let fast = ctc_loss(&lp, &labels).unwrap();
            let slow = ctc_brute_force(&lp, &labels).unwrap();
            if fast.feasible {
                assert!((fast.loss - slow).abs() < 1e-9, "{} vs {}", fast.loss, slow);
            } else {
                assert_eq!(slow, f64::INFINITY);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..20 {
            let t = 3 + rng.below(4);
            let labels: Vec<usize> = (0..1 + rng.below(3)).map(|_| rng.below(3)).collect();
            // unnormalized inputs: the gradient is w.r.t. free log-probs
            let lp = Tensor::uniform(&[t, 4], -2.0, 0.0, &mut rng);
            if t < min_frames(&labels) {
                continue;
            }
            let out = ctc_loss(&lp, &labels).unwrap();
            let numeric = central_differences(
                |p| Ok(ctc_loss(&p[0], &labels)?.loss),
                core::slice::from_ref(&lp),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&[out.grad], &numeric);
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn taped_dynamic_program_agrees_with_posteriors() {
        let mut rng = SplitMix64::new(6);
        for _ in 0..20 {
            let t = 2 + rng.below(5);
            let labels: Vec<usize> = (0..1 + rng.below(3)).map(|_| rng.below(2)).collect();
            if t < min_frames(&labels) {
                continue;
            }
            let lp = random_log_probs(t, 3, &mut rng);
            let mut g = Graph::new();
            let x = g.param(lp.clone());
            let loss = ctc_loss_taped(&mut g, x, &labels).unwrap();
            let taped = g.backward(loss).unwrap();
            let out = ctc_loss(&lp, &labels).unwrap();
            assert!((g.value(loss).item() - out.loss).abs() < 1e-10);
            assert!(taped.get(x).unwrap().max_abs_diff(&out.grad) < 1e-8);
        }
    }

    #[test]
    fn greedy_decode_and_edit_distance() {
        let lp = Tensor::matrix(&[
            [0.0, -5.0, -5.0],
            [0.0, -5.0, -5.0],
            [-5.0, -5.0, 0.0],
            [-5.0, 0.0, -5.0],
            [-5.0, -5.0, 0.0],
            [0.0, -5.0, -5.0],
        ]);
        assert_eq!(greedy_decode(&lp), vec![0, 1, 0]);
        assert_eq!(edit_distance(&[0, 1, 0], &[0, 1, 0]), 0);
        assert_eq!(edit_distance(&[0, 1], &[1, 0, 1]), 1);
        assert_eq!(edit_distance(&[0, 1], &[1, 1, 1]), 2);
        assert_eq!(edit_distance(&[], &[1, 1]), 2);
        assert_eq!(edit_distance(&[3, 4, 5], &[]), 3);
    }

    #[test]
    fn trailing_blank_frame_costs_its_log_probability() {
        // Appending a frame that is almost surely blank changes the loss by
        // about -log p(blank) once the alignment can absorb it.
        let mut rng = SplitMix64::new(8);
        let lp = random_log_probs(4, 3, &mut rng);
        let base = ctc_loss(&lp, &[0, 1]).unwrap().loss;
        let mut rows: Vec<Vec<f64>> = (0..4).map(|t| lp.row(t).to_vec()).collect();
        let p_blank: f64 = 1.0 - 2e-9;
        rows.push(vec![ln(1e-9), ln(1e-9), ln(p_blank)]);
        let extended = ctc_loss(&Tensor::matrix(&rows), &[0, 1]).unwrap().loss;
        assert!((extended - base - (-ln(p_blank))).abs() < 1e-6);
    }
}
