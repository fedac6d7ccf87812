//! Landmark-to-frame alignment.
//!
//! The compatibility of phrase `i` and frame `j` is
//! `A[i][j] = text_i · image_j − λ (time_i − time_j)²`, where both embeddings
//! pass through their projection heads. Each frame gets a softmax over the
//! `m` phrases plus BLANK, and CTC ties the frame sequence to the ordered
//! phrase sequence.

mod ctc;
mod finetune;

pub use ctc::{
    ctc_grad, ctc_log_likelihood, greedy_frame_labels, log_softmax_columns, log_sum_exp, viterbi,
    CtcGradient, FramePosteriors, ViterbiPath,
};
pub use finetune::{
    corpus_loss, finetune, loss_and_gradients, project_rows, FinetuneOutcome, OptimizerConfig,
    TrainingExample,
};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::PoseFrame;
use crate::embeddings::{view_key, EmbeddingProvider, Modality, ProjectionHeads};
use crate::error::{Error, Result};
use crate::geometry::PerspectiveSpec;
use crate::phrases::LandmarkPhrase;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Weight of the squared timestamp difference.
    pub lambda: f64,
    pub blank_logit: f64,
    pub temperature: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            lambda: 1.0,
            blank_logit: 0.0,
            temperature: 1.0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invariant(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Invariant(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.blank_logit.is_finite() {
            return Err(Error::Invariant("blank logit must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    /// `m × n` phrase/frame logits.
    pub values: Array2<f64>,
    /// BLANK logit per frame.
    pub blank_row: Array1<f64>,
}

impl LogitMatrix {
    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn n(&self) -> usize {
        self.values.ncols()
    }

    pub fn posteriors(&self, cfg: &AlignmentConfig) -> FramePosteriors {
        log_softmax_columns(&self.values, &self.blank_row, cfg.temperature)
    }
}

/// Logits from already-projected unit embeddings (`text`: m×d, `image`:
/// n×d).
pub fn logits_from_embeddings(
    text: &Array2<f64>,
    image: &Array2<f64>,
    phrase_times: &[f64],
    frame_times: &[f64],
    cfg: &AlignmentConfig,
) -> Result<LogitMatrix> {
    let (m, n) = (text.nrows(), image.nrows());
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput("logit matrix"));
    }
    if text.ncols() != image.ncols() {
        return Err(Error::DimensionMismatch {
            expected: text.ncols(),
            found: image.ncols(),
        });
    }
    if phrase_times.len() != m || frame_times.len() != n {
        return Err(Error::CountMismatch {
            expected: m + n,
            found: phrase_times.len() + frame_times.len(),
        });
    }
    let mut values = text.dot(&image.t());
    for (i, ti) in phrase_times.iter().enumerate() {
        for (j, tj) in frame_times.iter().enumerate() {
            let dt = ti - tj;
            values[[i, j]] -= cfg.lambda * dt * dt;
        }
    }
    Ok(LogitMatrix {
        values,
        blank_row: Array1::from_elem(n, cfg.blank_logit),
    })
}

/// Image key of the view a pose frame looked at.
pub fn frame_key(frame: &PoseFrame) -> String {
    view_key(&frame.pano_id, &PerspectiveSpec::from_frame(frame))
}

/// Stacks projected embeddings of `keys` into a matrix.
pub fn embed_rows(
    keys: &[String],
    modality: Modality,
    provider: &dyn EmbeddingProvider,
    heads: &ProjectionHeads,
) -> Result<Array2<f64>> {
    let d = heads.dim();
    if provider.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: provider.dim(),
        });
    }
    let mut out = Array2::zeros((keys.len(), d));
    for (r, key) in keys.iter().enumerate() {
        let v = heads.embed(provider, modality, key)?;
        out.row_mut(r).assign(&Array1::from(v));
    }
    Ok(out)
}

pub fn build_logit_matrix(
    phrases: &[LandmarkPhrase],
    frames: &[PoseFrame],
    provider: &dyn EmbeddingProvider,
    heads: &ProjectionHeads,
    cfg: &AlignmentConfig,
) -> Result<LogitMatrix> {
    if phrases.is_empty() || frames.is_empty() {
        return Err(Error::EmptyInput("logit matrix"));
    }
    let text_keys: Vec<String> = phrases.iter().map(|p| p.text.clone()).collect();
    let image_keys: Vec<String> = frames.iter().map(frame_key).collect();
    let text = embed_rows(&text_keys, Modality::Text, provider, heads)?;
    let image = embed_rows(&image_keys, Modality::Image, provider, heads)?;
    let phrase_times: Vec<f64> = phrases.iter().map(|p| p.time_s).collect();
    let frame_times: Vec<f64> = frames.iter().map(|f| f.time_s).collect();
    logits_from_embeddings(&text, &image, &phrase_times, &frame_times, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Inclusive frame interval per phrase.
    pub runs: Vec<(usize, usize)>,
    /// Frame in each run where the phrase's posterior peaks.
    pub best_frame: Vec<usize>,
    /// Log-probability of the decoded path.
    pub log_prob: f64,
}

/// Forced alignment: the most probable valid CTC path, turned into one
/// contiguous run per phrase.
pub fn decode_alignment(logits: &LogitMatrix, cfg: &AlignmentConfig) -> Result<AlignmentResult> {
    let post = logits.posteriors(cfg);
    let path = viterbi(&post)?;
    let m = logits.m();
    let mut runs: Vec<Option<(usize, usize)>> = vec![None; m];
    for (j, label) in path.frame_labels.iter().enumerate() {
        if let Some(i) = *label {
            runs[i] = Some(match runs[i] {
                None => (j, j),
                Some((a, _)) => (a, j),
            });
        }
    }
    let runs: Vec<(usize, usize)> = runs
        .into_iter()
        .map(|r| r.expect("a valid CTC path visits every label"))
        .collect();
    let best_frame = runs
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            let mut best = a;
            for j in a..=b {
                if post.label(i, j) > post.label(i, best) {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok(AlignmentResult {
        runs,
        best_frame,
        log_prob: path.log_prob,
    })
}

/// Best frame per phrase taken from the unconstrained per-frame argmax;
/// phrases that win no frame fall back to their highest-posterior frame.
/// Diagnostic only: the result need not respect phrase order.
pub fn decode_greedy(logits: &LogitMatrix, cfg: &AlignmentConfig) -> Vec<usize> {
    let post = logits.posteriors(cfg);
    let labels = greedy_frame_labels(&post);
    (0..logits.m())
        .map(|i| {
            let mut frames = (0..logits.n()).filter(|&j| labels[j] == Some(i)).peekable();
            let pool: Vec<usize> = if frames.peek().is_some() {
                frames.collect()
            } else {
                (0..logits.n()).collect()
            };
            let mut best = pool[0];
            for &j in &pool {
                if post.label(i, j) > post.label(i, best) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Alignment precision ×100: per phrase 1 when the predicted frame falls in
/// its inclusive gold range, averaged within each instruction and then
/// across instructions. Instructions without phrases are skipped.
pub fn alignment_precision(predicted: &[Vec<usize>], gold: &[Vec<(usize, usize)>]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::CountMismatch {
            expected: gold.len(),
            found: predicted.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (pred, ranges) in predicted.iter().zip(gold) {
        if pred.len() != ranges.len() {
            return Err(Error::CountMismatch {
                expected: ranges.len(),
                found: pred.len(),
            });
        }
        if pred.is_empty() {
            continue;
        }
        let hits = pred
            .iter()
            .zip(ranges)
            .filter(|(j, (a, b))| (*a..=*b).contains(*j))
            .count();
        total += hits as f64 / pred.len() as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyInput("alignment precision"));
    }
    Ok(100.0 * total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bias_term() {
        let text = array![[1.0, 0.0]];
        let image = array![[0.8, 0.6]];
        let a = logits_from_embeddings(&text, &image, &[2.0], &[2.5], &AlignmentConfig::default())
            .unwrap();
        assert!((a.values[[0, 0]] - 0.55).abs() < 1e-15);
        let no_bias = AlignmentConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let a = logits_from_embeddings(&text, &image, &[2.0], &[9.5], &no_bias).unwrap();
        assert_eq!(a.values[[0, 0]], 0.8);
        // Symmetric in the sign of the time difference.
        let cfg = AlignmentConfig::default();
        let early = logits_from_embeddings(&text, &image, &[2.0], &[1.5], &cfg).unwrap();
        let late = logits_from_embeddings(&text, &image, &[2.0], &[2.5], &cfg).unwrap();
        assert_eq!(early.values, late.values);
    }

    #[test]
    fn decode_diagonal() {
        let logits = LogitMatrix {
            values: array![[6.0, 0.0, 0.0], [0.0, 6.0, 0.0], [0.0, 0.0, 6.0]],
            blank_row: Array1::zeros(3),
        };
        let r = decode_alignment(&logits, &AlignmentConfig::default()).unwrap();
        assert_eq!(r.runs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(r.best_frame, vec![0, 1, 2]);
        assert!(r.log_prob <= 0.0);
    }

    #[test]
    fn decode_single_peak() {
        let logits = LogitMatrix {
            values: array![[-2.0, -1.0, 0.5, 4.0, 1.0]],
            blank_row: Array1::zeros(5),
        };
        let r = decode_alignment(&logits, &AlignmentConfig::default()).unwrap();
        let (a, b) = r.runs[0];
        assert!(a <= 3 && 3 <= b);
        assert_eq!(r.best_frame, vec![3]);
    }

    #[test]
    fn precision_macro_average() {
        let p = alignment_precision(
            &[vec![1, 4], vec![0]],
            &[vec![(0, 2), (3, 5)], vec![(1, 1)]],
        )
        .unwrap();
        assert!((p - 50.0).abs() < 1e-12);
        let p = alignment_precision(&[vec![2]], &[vec![(2, 2)]]).unwrap();
        assert_eq!(p, 100.0);
        assert!(alignment_precision(&[vec![1]], &[vec![(0, 1), (2, 3)]]).is_err());
        assert!(alignment_precision(&[vec![1]], &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AlignmentConfig::default().validate().is_ok());
        assert!(AlignmentConfig {
            lambda: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AlignmentConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
