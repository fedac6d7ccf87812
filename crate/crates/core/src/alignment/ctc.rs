//! CTC over an ordered label sequence with one BLANK symbol.
//!
//! The extended state sequence is `[B, t1, B, t2, …, B, tm, B]`: even states
//! are BLANK, odd state `2i+1` is label `i`. Labels are distinct positions,
//! so skipping the blank between two labels is always allowed. Everything
//! runs in log space.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Per-frame log-posteriors over `{t_1..t_m, BLANK}`. Row `m` is BLANK.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosteriors {
    pub log_probs: Array2<f64>,
}

impl FramePosteriors {
    /// Number of labels, not counting BLANK.
    pub fn labels(&self) -> usize {
        self.log_probs.nrows() - 1
    }

    pub fn frames(&self) -> usize {
        self.log_probs.ncols()
    }

    pub fn label(&self, i: usize, j: usize) -> f64 {
        self.log_probs[[i, j]]
    }

    pub fn blank(&self, j: usize) -> f64 {
        self.log_probs[[self.labels(), j]]
    }

    /// Posterior probabilities, `(m+1)×n`, columns summing to one.
    pub fn probabilities(&self) -> Array2<f64> {
        self.log_probs.mapv(f64::exp)
    }

    fn emit(&self, s: usize, j: usize) -> f64 {
        if s.is_multiple_of(2) {
            self.blank(j)
        } else {
            self.label(s / 2, j)
        }
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let max = a.max(b);
    max + ((a - max).exp() + (b - max).exp()).ln()
}

/// Column-wise log-softmax of `[label_logits; blank_row]` divided by
/// `temperature`.
pub fn log_softmax_columns(
    label_logits: &Array2<f64>,
    blank_row: &Array1<f64>,
    temperature: f64,
) -> FramePosteriors {
    let (m, n) = label_logits.dim();
    let mut out = Array2::zeros((m + 1, n));
    let mut column = vec![0.0; m + 1];
    for j in 0..n {
        for i in 0..m {
            column[i] = label_logits[[i, j]] / temperature;
        }
        column[m] = blank_row[j] / temperature;
        let lse = log_sum_exp(&column);
        for (i, z) in column.iter().enumerate() {
            out[[i, j]] = z - lse;
        }
    }
    FramePosteriors { log_probs: out }
}

fn check_fits(m: usize, n: usize) -> Result<()> {
    if m == 0 || n < m {
        return Err(Error::NoValidAlignment {
            labels: m,
            frames: n,
        });
    }
    Ok(())
}

/// Forward variables, `n × (2m+1)`.
fn forward(post: &FramePosteriors) -> Array2<f64> {
    let (m, n) = (post.labels(), post.frames());
    let states = 2 * m + 1;
    let mut alpha = Array2::from_elem((n, states), f64::NEG_INFINITY);
    alpha[[0, 0]] = post.emit(0, 0);
    alpha[[0, 1]] = post.emit(1, 0);
    for j in 1..n {
        for s in 0..states {
            let mut acc = alpha[[j - 1, s]];
            if s >= 1 {
                acc = lse2(acc, alpha[[j - 1, s - 1]]);
            }
            if s % 2 == 1 && s >= 2 {
                acc = lse2(acc, alpha[[j - 1, s - 2]]);
            }
            if acc != f64::NEG_INFINITY {
                alpha[[j, s]] = acc + post.emit(s, j);
            }
        }
    }
    alpha
}

/// Backward variables, `n × (2m+1)`, including the emission at `j`.
fn backward(post: &FramePosteriors) -> Array2<f64> {
    let (m, n) = (post.labels(), post.frames());
    let states = 2 * m + 1;
    let mut beta = Array2::from_elem((n, states), f64::NEG_INFINITY);
    beta[[n - 1, states - 1]] = post.emit(states - 1, n - 1);
    beta[[n - 1, states - 2]] = post.emit(states - 2, n - 1);
    for j in (0..n - 1).rev() {
        for s in 0..states {
            let mut acc = beta[[j + 1, s]];
            if s + 1 < states {
                acc = lse2(acc, beta[[j + 1, s + 1]]);
            }
            if s % 2 == 1 && s + 2 < states {
                acc = lse2(acc, beta[[j + 1, s + 2]]);
            }
            if acc != f64::NEG_INFINITY {
                beta[[j, s]] = acc + post.emit(s, j);
            }
        }
    }
    beta
}

/// `log p(t | r)`: the log of the summed probability of every valid
/// alignment.
pub fn ctc_log_likelihood(post: &FramePosteriors) -> Result<f64> {
    let (m, n) = (post.labels(), post.frames());
    check_fits(m, n)?;
    let alpha = forward(post);
    let last = 2 * m;
    Ok(lse2(alpha[[n - 1, last]], alpha[[n - 1, last - 1]]))
}

/// Loss `−log p(t|r)` together with its gradient with respect to the
/// logits that produced `post` through a temperature-`temperature` softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcGradient {
    pub loss: f64,
    /// `m × n`.
    pub labels: Array2<f64>,
    /// Length `n`.
    pub blank: Array1<f64>,
}

impl CtcGradient {
    /// Expected number of frames spent on each row (`(m+1)×n` occupancy).
    pub fn occupancy_from(post: &FramePosteriors) -> Result<(f64, Array2<f64>)> {
        let (m, n) = (post.labels(), post.frames());
        check_fits(m, n)?;
        let alpha = forward(post);
        let beta = backward(post);
        let last = 2 * m;
        let log_p = lse2(alpha[[n - 1, last]], alpha[[n - 1, last - 1]]);
        if log_p == f64::NEG_INFINITY {
            return Err(Error::NoValidAlignment {
                labels: m,
                frames: n,
            });
        }
        let mut occ = Array2::zeros((m + 1, n));
        for j in 0..n {
            for s in 0..=last {
                let g = alpha[[j, s]] + beta[[j, s]] - post.emit(s, j) - log_p;
                if g == f64::NEG_INFINITY {
                    continue;
                }
                let row = if s % 2 == 0 { m } else { s / 2 };
                occ[[row, j]] += g.exp();
            }
        }
        Ok((log_p, occ))
    }
}

pub fn ctc_grad(post: &FramePosteriors, temperature: f64) -> Result<CtcGradient> {
    let (log_p, occ) = CtcGradient::occupancy_from(post)?;
    let m = post.labels();
    // d(-log p)/dz = softmax(z) - occupancy, and z = logit / temperature.
    let grad = (post.probabilities() - occ) / temperature;
    Ok(CtcGradient {
        loss: -log_p,
        labels: grad.slice(ndarray::s![..m, ..]).to_owned(),
        blank: grad.row(m).to_owned(),
    })
}

/// Best single path through the CTC topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    pub log_prob: f64,
    /// Label per frame, `None` for BLANK.
    pub frame_labels: Vec<Option<usize>>,
}

pub fn viterbi(post: &FramePosteriors) -> Result<ViterbiPath> {
    let (m, n) = (post.labels(), post.frames());
    check_fits(m, n)?;
    let states = 2 * m + 1;
    let mut score = Array2::from_elem((n, states), f64::NEG_INFINITY);
    let mut back = Array2::<usize>::zeros((n, states));
    score[[0, 0]] = post.emit(0, 0);
    score[[0, 1]] = post.emit(1, 0);
    for j in 1..n {
        for s in 0..states {
            // Ties prefer staying, then the nearer predecessor.
            let mut best = (score[[j - 1, s]], s);
            if s >= 1 && score[[j - 1, s - 1]] > best.0 {
                best = (score[[j - 1, s - 1]], s - 1);
            }
            if s % 2 == 1 && s >= 2 && score[[j - 1, s - 2]] > best.0 {
                best = (score[[j - 1, s - 2]], s - 2);
            }
            if best.0 != f64::NEG_INFINITY {
                score[[j, s]] = best.0 + post.emit(s, j);
                back[[j, s]] = best.1;
            }
        }
    }
    let (last, second) = (states - 1, states - 2);
    let mut s = if score[[n - 1, second]] > score[[n - 1, last]] {
        second
    } else {
        last
    };
    let log_prob = score[[n - 1, s]];
    if log_prob == f64::NEG_INFINITY {
        return Err(Error::NoValidAlignment {
            labels: m,
            frames: n,
        });
    }
    let mut frame_labels = vec![None; n];
    for j in (0..n).rev() {
        if s % 2 == 1 {
            frame_labels[j] = Some(s / 2);
        }
        if j > 0 {
            s = back[[j, s]];
        }
    }
    Ok(ViterbiPath {
        log_prob,
        frame_labels,
    })
}

/// Per-frame argmax over `{labels, BLANK}` ignoring ordering constraints.
pub fn greedy_frame_labels(post: &FramePosteriors) -> Vec<Option<usize>> {
    let m = post.labels();
    (0..post.frames())
        .map(|j| {
            let col = post.log_probs.column(j);
            let mut best = m;
            for i in 0..m {
                if col[i] > col[best] {
                    best = i;
                }
            }
            (best < m).then_some(best)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn post_from_probs(p: Array2<f64>) -> FramePosteriors {
        FramePosteriors {
            log_probs: p.mapv(f64::ln),
        }
    }

    #[test]
    fn one_label_one_frame() {
        let post = post_from_probs(array![[0.3], [0.7]]);
        assert!((ctc_log_likelihood(&post).unwrap() - 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn one_label_two_frames() {
        // Rows: t1, BLANK.
        let p: Array2<f64> = array![[0.6, 0.2], [0.4, 0.8]];
        let expected = (p[[0, 0]] * p[[0, 1]] + p[[1, 0]] * p[[0, 1]] + p[[0, 0]] * p[[1, 1]]).ln();
        let post = post_from_probs(p);
        assert!((ctc_log_likelihood(&post).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn too_few_frames() {
        let post = post_from_probs(array![[0.2], [0.3], [0.5]]);
        assert!(matches!(
            ctc_log_likelihood(&post),
            Err(Error::NoValidAlignment {
                labels: 2,
                frames: 1
            })
        ));
        assert!(viterbi(&post).is_err());
    }

    #[test]
    fn softmax_columns_normalize() {
        let logits = array![[1.0, 50.0], [2.0, 0.0]];
        let blank = array![1.0, 0.0];
        let post = log_softmax_columns(&logits, &blank, 1.0);
        let p = post.probabilities();
        for j in 0..2 {
            assert!((p.column(j).sum() - 1.0).abs() < 1e-12);
        }
        assert!(p[[0, 1]] > 1.0 - 1e-9);
        let single = log_softmax_columns(&array![[0.0]], &array![0.0], 1.0).probabilities();
        assert!((single[[0, 0]] - 0.5).abs() < 1e-15 && (single[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gradient_columns_sum_to_zero() {
        let logits = array![[0.3, -1.0, 0.2, 0.9], [1.1, 0.4, -0.7, 0.0]];
        let blank = Array1::zeros(4);
        let g = ctc_grad(&log_softmax_columns(&logits, &blank, 1.0), 1.0).unwrap();
        for j in 0..4 {
            let s = g.labels.column(j).sum() + g.blank[j];
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_path_has_no_gradient() {
        let logits = array![[40.0, -40.0], [-40.0, 40.0]];
        let blank = Array1::from_elem(2, -40.0);
        let g = ctc_grad(&log_softmax_columns(&logits, &blank, 1.0), 1.0).unwrap();
        assert!(g.loss < 1e-12);
        assert!(g.labels.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn viterbi_prefers_the_diagonal() {
        let logits = array![[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]];
        let post = log_softmax_columns(&logits, &Array1::zeros(3), 1.0);
        let path = viterbi(&post).unwrap();
        assert_eq!(path.frame_labels, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(greedy_frame_labels(&post), vec![Some(0), Some(1), Some(2)]);
    }
}
