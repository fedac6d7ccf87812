//! CTC finetuning of the text and image projection heads.
//!
//! Encoders stay frozen; only the two linear heads train. Gradients flow
//! from the CTC loss through the logit matrix, the L2 normalization and the
//! linear layer. Optimization is Adam over the full corpus unless a batch
//! size is set.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ctc_grad, logits_from_embeddings, AlignmentConfig};
use crate::embeddings::{EmbeddingProvider, Modality, ProjectionHeads};
use crate::error::{Error, Result};

/// Frozen encoder outputs for one instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// `m × d` unit text embeddings, one row per phrase.
    pub text: Array2<f64>,
    /// `n × d` unit image embeddings, one row per frame.
    pub image: Array2<f64>,
    pub phrase_times: Vec<f64>,
    pub frame_times: Vec<f64>,
}

impl TrainingExample {
    pub fn from_keys(
        text_keys: &[String],
        image_keys: &[String],
        phrase_times: Vec<f64>,
        frame_times: Vec<f64>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self> {
        let rows = |keys: &[String], modality| -> Result<Array2<f64>> {
            let mut out = Array2::zeros((keys.len(), provider.dim()));
            for (r, k) in keys.iter().enumerate() {
                out.row_mut(r)
                    .assign(&Array1::from(provider.embed(modality, k)?));
            }
            Ok(out)
        };
        Ok(TrainingExample {
            text: rows(text_keys, Modality::Text)?,
            image: rows(image_keys, Modality::Image)?,
            phrase_times,
            frame_times,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Examples per step; `None` trains on the whole corpus every step.
    pub batch_size: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            steps: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 7,
            batch_size: None,
        }
    }
}

/// Row-normalized `x · wᵀ` plus the pre-normalization norms.
/// Projects each row of `x` through `w` and normalizes it to unit length.
pub fn project_rows(x: &Array2<f64>, w: &Array2<f64>) -> Result<Array2<f64>> {
    project(x, w).map(|(z, _)| z)
}

fn project(x: &Array2<f64>, w: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut z = x.dot(&w.t());
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::DegenerateProjection);
    }
    for (mut row, &n) in z.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row /= n;
    }
    Ok((z, norms))
}

/// Backpropagates `du` (gradient w.r.t. normalized rows `u`) to the head
/// weight: `dW = Σ_r ((du_r − u_r (u_r·du_r)) / ‖z_r‖) x_rᵀ`.
fn head_gradient(
    x: &Array2<f64>,
    u: &Array2<f64>,
    norms: &Array1<f64>,
    du: &Array2<f64>,
) -> Array2<f64> {
    let mut dz = du.clone();
    for r in 0..u.nrows() {
        let proj = u.row(r).dot(&du.row(r));
        let mut row = dz.row_mut(r);
        row.scaled_add(-proj, &u.row(r));
        row /= norms[r];
    }
    dz.t().dot(x)
}

struct ExampleGrad {
    loss: f64,
    text: Array2<f64>,
    image: Array2<f64>,
}

fn example_gradient(
    heads: &ProjectionHeads,
    ex: &TrainingExample,
    cfg: &AlignmentConfig,
) -> Result<ExampleGrad> {
    let (u, un) = project(&ex.text, &heads.text.weight)?;
    let (v, vn) = project(&ex.image, &heads.image.weight)?;
    let logits = logits_from_embeddings(&u, &v, &ex.phrase_times, &ex.frame_times, cfg)?;
    let g = ctc_grad(&logits.posteriors(cfg), cfg.temperature)?;
    // A = U Vᵀ − bias, so dU = G V and dV = Gᵀ U.
    let du = g.labels.dot(&v);
    let dv = g.labels.t().dot(&u);
    Ok(ExampleGrad {
        loss: g.loss,
        text: head_gradient(&ex.text, &u, &un, &du),
        image: head_gradient(&ex.image, &v, &vn, &dv),
    })
}

/// Mean CTC loss over `examples` and its gradient with respect to the text
/// and image head weights. Reduction follows example order.
pub fn loss_and_gradients(
    heads: &ProjectionHeads,
    examples: &[TrainingExample],
    cfg: &AlignmentConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("finetune"));
    }
    #[cfg(feature = "parallel")]
    let per: Vec<Result<ExampleGrad>> = {
        use rayon::prelude::*;
        examples
            .par_iter()
            .map(|ex| example_gradient(heads, ex, cfg))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per: Vec<Result<ExampleGrad>> = examples
        .iter()
        .map(|ex| example_gradient(heads, ex, cfg))
        .collect();

    let d = heads.dim();
    let mut loss = 0.0;
    let mut gt = Array2::zeros((d, d));
    let mut gi = Array2::zeros((d, d));
    for g in per {
        let g = g?;
        loss += g.loss;
        gt += &g.text;
        gi += &g.image;
    }
    let k = examples.len() as f64;
    Ok((loss / k, gt / k, gi / k))
}

pub fn corpus_loss(
    heads: &ProjectionHeads,
    examples: &[TrainingExample],
    cfg: &AlignmentConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let (u, _) = project(&ex.text, &heads.text.weight)?;
        let (v, _) = project(&ex.image, &heads.image.weight)?;
        let logits = logits_from_embeddings(&u, &v, &ex.phrase_times, &ex.frame_times, cfg)?;
        total -= super::ctc_log_likelihood(&logits.posteriors(cfg))?;
    }
    if examples.is_empty() {
        return Err(Error::EmptyInput("finetune"));
    }
    Ok(total / examples.len() as f64)
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Adam {
    fn new(d: usize) -> Self {
        Adam {
            m: Array2::zeros((d, d)),
            v: Array2::zeros((d, d)),
        }
    }

    fn step(&mut self, w: &mut Array2<f64>, g: &Array2<f64>, t: usize, opt: &OptimizerConfig) {
        let b1t = 1.0 - opt.beta1.powi(t as i32);
        let b2t = 1.0 - opt.beta2.powi(t as i32);
        ndarray::Zip::from(w)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(g)
            .for_each(|w, m, v, &g| {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                *w -= opt.learning_rate * (*m / b1t) / ((*v / b2t).sqrt() + opt.epsilon);
            });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub heads: ProjectionHeads,
    /// `losses[k]` is the batch loss before update `k`; the last entry is
    /// the full-corpus loss after the final update.
    pub losses: Vec<f64>,
}

pub fn finetune(
    examples: &[TrainingExample],
    initial: ProjectionHeads,
    cfg: &AlignmentConfig,
    opt: &OptimizerConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyInput("finetune"));
    }
    let d = initial.dim();
    let mut heads = initial;
    let mut adam_text = Adam::new(d);
    let mut adam_image = Adam::new(d);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(opt.steps + 1);

    for step in 0..opt.steps {
        let batch: Vec<TrainingExample> = match opt.batch_size {
            Some(b) if b < examples.len() => {
                order.shuffle(&mut rng);
                let mut pick = order[..b.max(1)].to_vec();
                pick.sort_unstable();
                pick.into_iter().map(|k| examples[k].clone()).collect()
            }
            _ => Vec::new(),
        };
        let batch = if batch.is_empty() {
            examples
        } else {
            &batch[..]
        };
        let (loss, gt, gi) = loss_and_gradients(&heads, batch, cfg)?;
        if !loss.is_finite() || gt.iter().chain(gi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        log::debug!("finetune step={step} loss={loss:.6}");
        losses.push(loss);
        adam_text.step(&mut heads.text.weight, &gt, step + 1, opt);
        adam_image.step(&mut heads.image.weight, &gi, step + 1, opt);
    }
    let final_loss = corpus_loss(&heads, examples, cfg).map_err(|e| match e {
        Error::DegenerateProjection => Error::Divergence { step: opt.steps },
        other => other,
    })?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { step: opt.steps });
    }
    losses.push(final_loss);
    Ok(FinetuneOutcome { heads, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_example(rng: &mut ChaCha8Rng, m: usize, n: usize, d: usize) -> TrainingExample {
        let mut unit = |rows: usize| {
            let mut a = Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0));
            for mut r in a.axis_iter_mut(Axis(0)) {
                let n: f64 = r.dot(&r);
                let n = n.sqrt();
                r /= n;
            }
            a
        };
        let text = unit(m);
        let image = unit(n);
        TrainingExample {
            text,
            image,
            phrase_times: (0..m).map(|i| 0.5 + i as f64).collect(),
            frame_times: (0..n).map(|j| j as f64 * m as f64 / n as f64).collect(),
        }
    }

    #[test]
    fn zero_steps_is_the_frozen_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = vec![
            random_example(&mut rng, 2, 5, 6),
            random_example(&mut rng, 3, 6, 6),
        ];
        let cfg = AlignmentConfig::default();
        let opt = OptimizerConfig {
            steps: 0,
            ..Default::default()
        };
        let out = finetune(&ex, ProjectionHeads::identity(6), &cfg, &opt).unwrap();
        let baseline = corpus_loss(&ProjectionHeads::identity(6), &ex, &cfg).unwrap();
        assert_eq!(out.losses, vec![baseline]);
        assert_eq!(out.heads, ProjectionHeads::identity(6));
    }

    #[test]
    fn minibatches_are_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex: Vec<_> = (0..6).map(|_| random_example(&mut rng, 2, 4, 4)).collect();
        let cfg = AlignmentConfig::default();
        let opt = OptimizerConfig {
            steps: 5,
            batch_size: Some(2),
            ..Default::default()
        };
        let a = finetune(&ex, ProjectionHeads::identity(4), &cfg, &opt).unwrap();
        let b = finetune(&ex, ProjectionHeads::identity(4), &cfg, &opt).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 6);
    }

    #[test]
    fn first_step_loss_matches_corpus_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = vec![random_example(&mut rng, 3, 6, 5)];
        let cfg = AlignmentConfig::default();
        let (loss, _, _) = loss_and_gradients(&ProjectionHeads::identity(5), &ex, &cfg).unwrap();
        assert_eq!(
            loss,
            corpus_loss(&ProjectionHeads::identity(5), &ex, &cfg).unwrap()
        );
    }
}
