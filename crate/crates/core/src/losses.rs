//! Caption cross-entropy, knowledge prediction and distillation losses.
//!
//! Every loss is a pure function of logits. The `*_grad` variants also return
//! the gradient with respect to the (student) logits, which seeds the model's
//! backward pass.

use crate::error::{Error, Result};
use crate::model::LogitsMatrix;
use crate::tensor::{log_softmax, softmax, Mat};
use crate::text::{Keyword, TokenId, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_k: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_k: 1.0,
            lambda_d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_k: f64, lambda_d: f64) -> Result<Self> {
        for (n, v) in [("lambda_k", lambda_k), ("lambda_d", lambda_d)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{n} must be finite and non-negative")));
            }
        }
        Ok(LossWeights { lambda_k, lambda_d })
    }
}

/// Softening temperature of the distillation softmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillTemperature(f64);

impl DistillTemperature {
    pub fn new(t: f64) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Config(format!("distillation temperature {t} must be positive")));
        }
        Ok(DistillTemperature(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Losses of one training step, each averaged over the samples of its branch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub l_ce: f64,
    pub l_cov: f64,
    pub l_rep: f64,
    pub l_kpred: f64,
    pub l_distill: f64,
    pub l_total: f64,
    pub caption_samples: usize,
    pub replay_samples: usize,
}

impl LossBundle {
    pub fn assemble(
        l_ce: f64,
        l_cov: f64,
        l_rep: f64,
        l_distill: f64,
        weights: LossWeights,
        caption_samples: usize,
        replay_samples: usize,
    ) -> Self {
        let l_kpred = l_cov + l_rep;
        LossBundle {
            l_ce,
            l_cov,
            l_rep,
            l_kpred,
            l_distill,
            l_total: total_loss(l_ce, l_kpred, l_distill, weights),
            caption_samples,
            replay_samples,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_cov, self.l_rep, self.l_distill, self.l_total]
            .iter()
            .all(|x| x.is_finite())
    }
}

fn check_rows(logits: &LogitsMatrix, target: &TokenSequence) -> Result<()> {
    if target.len() < 2 || logits.rows != target.len() - 1 {
        return Err(Error::Shape(format!(
            "{} logit rows for a target of length {}",
            logits.rows,
            target.len()
        )));
    }
    if let Some(&bad) = target.ids().iter().find(|&&t| t >= logits.cols) {
        return Err(Error::InvalidTokenId {
            id: bad,
            vocab_size: logits.cols,
        });
    }
    Ok(())
}

/// Label-smoothed caption cross-entropy and its logit gradient.
///
/// Per predicted position the loss is `-[(1-ε)·log p(w) + ε/V'·Σ_j log p_j]`
/// where the smoothing sum runs over every entry except `pad` (`V' = V - 1`),
/// or over all `V` entries when `pad` is `None`. Positions whose target is
/// `pad` are skipped; the result is the mean over the remaining positions.
pub fn caption_ce_grad(
    logits: &LogitsMatrix,
    target: &TokenSequence,
    epsilon: f64,
    pad: Option<TokenId>,
) -> Result<(f64, Mat)> {
    check_rows(logits, target)?;
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    let v = logits.cols;
    let smooth_over = if pad.is_some() { v - 1 } else { v };
    let share = epsilon / smooth_over as f64;
    let rows: Vec<usize> = (0..logits.rows)
        .filter(|&r| Some(target.ids()[r + 1]) != pad)
        .collect();
    let mut grad = Mat::zeros(logits.rows, v);
    if rows.is_empty() {
        return Ok((0.0, grad));
    }
    let n = rows.len() as f64;
    let mut total = 0.0;
    for &r in &rows {
        let want = target.ids()[r + 1];
        let lp = log_softmax(logits.row(r), 1.0);
        let g = grad.row_mut(r);
        let mut loss = 0.0;
        for j in 0..v {
            let mut q = if Some(j) == pad { 0.0 } else { share };
            if j == want {
                q += 1.0 - epsilon;
            }
            loss -= q * lp[j];
            g[j] = (lp[j].exp() - q) / n;
        }
        total += loss;
    }
    Ok((total / n, grad))
}

pub fn caption_ce(
    logits: &LogitsMatrix,
    target: &TokenSequence,
    epsilon: f64,
    pad: Option<TokenId>,
) -> Result<f64> {
    caption_ce_grad(logits, target, epsilon, pad).map(|(l, _)| l)
}

/// Highest softmax probability any row assigns to `id`, and that row
/// (lowest index on ties).
pub fn keyword_probability_at(logits: &LogitsMatrix, id: TokenId) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for r in 0..logits.rows {
        let p = softmax(logits.row(r), 1.0)[id];
        if p > best.0 {
            best = (p, r);
        }
    }
    best
}

pub fn keyword_probability(logits: &LogitsMatrix, id: TokenId) -> f64 {
    keyword_probability_at(logits, id).0
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `-Σ log σ(p_i)`, with σ applied to the probability itself.
pub fn coverage_loss(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| -sigmoid(p).ln()).sum()
}

/// `Σ (1 - p_i)²`
pub fn repetition_penalty(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| (1.0 - p) * (1.0 - p)).sum()
}

pub fn kpred_loss(probs: &[f64]) -> f64 {
    coverage_loss(probs) + repetition_penalty(probs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KpredParts {
    pub coverage: f64,
    pub repetition: f64,
}

impl KpredParts {
    pub fn total(&self) -> f64 {
        self.coverage + self.repetition
    }
}

/// Coverage and repetition terms of the knowledge prediction loss with their
/// separate logit gradients. Each subword's gradient flows through its
/// max-probability row.
pub fn kpred_grads(logits: &LogitsMatrix, keyword: &Keyword) -> Result<(KpredParts, Mat, Mat)> {
    if let Some(&bad) = keyword.subword_ids.iter().find(|&&t| t >= logits.cols) {
        return Err(Error::InvalidTokenId {
            id: bad,
            vocab_size: logits.cols,
        });
    }
    let mut g_cov = Mat::zeros(logits.rows, logits.cols);
    let mut g_rep = Mat::zeros(logits.rows, logits.cols);
    let mut probs = Vec::with_capacity(keyword.len());
    for &id in &keyword.subword_ids {
        let (p, r) = keyword_probability_at(logits, id);
        probs.push(p);
        let dcov_dp = -(1.0 - sigmoid(p));
        let drep_dp = -2.0 * (1.0 - p);
        let row = softmax(logits.row(r), 1.0);
        for j in 0..logits.cols {
            let indicator = if j == id { 1.0 } else { 0.0 };
            let dp = p * (indicator - row[j]);
            g_cov.row_mut(r)[j] += dcov_dp * dp;
            g_rep.row_mut(r)[j] += drep_dp * dp;
        }
    }
    let parts = KpredParts {
        coverage: coverage_loss(&probs),
        repetition: repetition_penalty(&probs),
    };
    Ok((parts, g_cov, g_rep))
}

/// Knowledge prediction loss of `keyword` over the student's logits and its
/// logit gradient.
pub fn kpred_loss_grad(logits: &LogitsMatrix, keyword: &Keyword) -> Result<(KpredParts, Mat)> {
    let (parts, mut g, g_rep) = kpred_grads(logits, keyword)?;
    g.add_assign(&g_rep);
    Ok((parts, g))
}

/// Mean over positions of `KL(φ(z_teacher) ‖ φ(z_student))` with
/// `φ(z) = softmax(z / T)`, and its gradient with respect to the student.
/// No `T²` factor is applied.
pub fn distill_loss_grad(
    teacher: &LogitsMatrix,
    student: &LogitsMatrix,
    temperature: DistillTemperature,
) -> Result<(f64, Mat)> {
    if teacher.shape() != student.shape() {
        return Err(Error::Shape(format!(
            "teacher logits {:?} vs student {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    let t = temperature.get();
    let mut grad = Mat::zeros(student.rows, student.cols);
    if student.rows == 0 {
        return Ok((0.0, grad));
    }
    let n = student.rows as f64;
    let mut total = 0.0;
    for r in 0..student.rows {
        let lt = log_softmax(teacher.row(r), t);
        let ls = log_softmax(student.row(r), t);
        let mut kl = 0.0;
        for ((a, b), g) in lt.iter().zip(&ls).zip(grad.row_mut(r)) {
            let pt = a.exp();
            if pt > 0.0 {
                kl += pt * (a - b);
            }
            *g = (b.exp() - pt) / (t * n);
        }
        total += kl;
    }
    Ok(((total / n).max(0.0), grad))
}

pub fn distill_loss(
    teacher: &LogitsMatrix,
    student: &LogitsMatrix,
    temperature: DistillTemperature,
) -> Result<f64> {
    distill_loss_grad(teacher, student, temperature).map(|(l, _)| l)
}

pub fn total_loss(l_ce: f64, l_kpred: f64, l_distill: f64, weights: LossWeights) -> f64 {
    l_ce + weights.lambda_k * l_kpred + weights.lambda_d * l_distill
}
