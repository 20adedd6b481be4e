//! The loss family.
//!
//! All losses here are written over cosine logits `s_c = w_c . g` of a
//! unit-norm embedding against unit-norm class rows, so `1 - s_c` is exactly
//! the cosine distance. The pieces:
//!
//! * [`contrastive_loss`] — the generic two-term form over arbitrary
//!   distances, with free weights `alpha`, `beta`.
//! * [`pos_hinge_loss`] — the squared hinge a client minimizes on its own
//!   positives, default margin 0.9.
//! * [`ccl_loss`] — cosine contrastive loss: pulls the true logit to 1,
//!   hinges every other logit below `1 - nu`.
//! * [`lsp_loss`] — same positive term, but the negative term measures
//!   class-to-class similarity `w_y . w_c` instead of instance-to-class; this
//!   is the loss the federated objective actually minimizes.
//! * [`softmax_xent`] — temperature-scaled cross entropy, the centralized
//!   oracle.
//! * [`surrogate_gap`] — both sides of the surrogate inequality
//!   `ccl >= 2(nu - 1) * [y not in Top-1]`, valid for `nu` in (1, 2).

use thiserror::Error;

use crate::math::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("class id {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("margin {value} outside the valid range (0, 2)")]
    MarginOutOfRange { value: f64 },
    #[error("margin {value} outside the theory range (1, 2)")]
    MarginOutOfTheoryRange { value: f64 },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
}

/// Separation margin `nu`. Valid in (0, 2); the surrogate and approximation
/// bounds additionally require (1, 2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin(f64);

impl Margin {
    pub fn new(value: f64) -> Result<Self, LossError> {
        if value > 0.0 && value < 2.0 {
            Ok(Self(value))
        } else {
            Err(LossError::MarginOutOfRange { value })
        }
    }

    /// Constructor that also enforces the theory range (1, 2).
    pub fn theory(value: f64) -> Result<Self, LossError> {
        let m = Self::new(value)?;
        if m.in_theory_range() {
            Ok(m)
        } else {
            Err(LossError::MarginOutOfTheoryRange { value })
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn in_theory_range(self) -> bool {
        self.0 > 1.0 && self.0 < 2.0
    }
}

impl Default for Margin {
    /// Midpoint of the theory range.
    fn default() -> Self {
        Self(1.5)
    }
}

fn check_class(class: usize, classes: usize) -> Result<(), LossError> {
    if class < classes {
        Ok(())
    } else {
        Err(LossError::ClassOutOfRange { class, classes })
    }
}

/// Generic contrastive loss over precomputed distances:
/// `alpha * d_pos^2 + beta * sum_c max(0, nu - d_c)^2`.
pub fn contrastive_loss(
    dist_to_pos: f64,
    dists_to_negs: &[f64],
    alpha: f64,
    beta: f64,
    nu: Margin,
) -> f64 {
    debug_assert!(dist_to_pos >= 0.0 && dists_to_negs.iter().all(|&d| d >= 0.0));
    let neg: f64 = dists_to_negs
        .iter()
        .map(|&d| {
            let h = (nu.value() - d).max(0.0);
            h * h
        })
        .sum();
    alpha * dist_to_pos * dist_to_pos + beta * neg
}

/// Squared hinge on the positive logit, and its derivative in `s_y`.
///
/// `max(0, m - s_y)^2`; the derivative at the kink is 0 (the inactive side).
pub fn pos_hinge_loss(s_y: f64, margin: f64) -> (f64, f64) {
    let h = (margin - s_y).max(0.0);
    (h * h, -2.0 * h)
}

/// Cosine contrastive loss `(1 - s_y)^2 + sum_{c != y} max(0, nu - 1 + s_c)^2`.
pub fn ccl_loss(scores: &[f64], y: usize, nu: Margin) -> Result<f64, LossError> {
    check_class(y, scores.len())?;
    let pos = 1.0 - scores[y];
    let mut total = pos * pos;
    for (c, &s) in scores.iter().enumerate() {
        if c != y {
            let h = (nu.value() - 1.0 + s).max(0.0);
            total += h * h;
        }
    }
    Ok(total)
}

/// Derivative of [`ccl_loss`] in each logit.
pub fn ccl_grad(scores: &[f64], y: usize, nu: Margin) -> Result<Vec<f64>, LossError> {
    check_class(y, scores.len())?;
    Ok(scores
        .iter()
        .enumerate()
        .map(|(c, &s)| {
            if c == y {
                -2.0 * (1.0 - s)
            } else {
                2.0 * (nu.value() - 1.0 + s).max(0.0)
            }
        })
        .collect())
}

/// The spreadout-composite loss
/// `(1 - s_y)^2 + sum_{c != y} max(0, nu - 1 + w_y . w_c)^2`.
///
/// Rows of `class_embeddings` are assumed unit-norm; the negative term
/// depends only on the class rows, not on the instance.
pub fn lsp_loss(
    s_y: f64,
    class_embeddings: &Matrix,
    y: usize,
    nu: Margin,
) -> Result<f64, LossError> {
    check_class(y, class_embeddings.rows())?;
    let pos = 1.0 - s_y;
    let mut total = pos * pos;
    let w_y = class_embeddings.row(y);
    for c in 0..class_embeddings.rows() {
        if c != y {
            let sim: f64 = w_y.iter().zip(class_embeddings.row(c)).map(|(a, b)| a * b).sum();
            let h = (nu.value() - 1.0 + sim).max(0.0);
            total += h * h;
        }
    }
    Ok(total)
}

/// Gradient of [`lsp_loss`]: derivative in `s_y` plus the gradient with
/// respect to every row of the class matrix.
pub fn lsp_grad(
    s_y: f64,
    class_embeddings: &Matrix,
    y: usize,
    nu: Margin,
) -> Result<(f64, Matrix), LossError> {
    check_class(y, class_embeddings.rows())?;
    let d_s = -2.0 * (1.0 - s_y);
    let mut grad = Matrix::zeros(class_embeddings.rows(), class_embeddings.cols());
    let w_y = class_embeddings.row(y).to_vec();
    for c in 0..class_embeddings.rows() {
        if c == y {
            continue;
        }
        let w_c = class_embeddings.row(c);
        let sim: f64 = w_y.iter().zip(w_c).map(|(a, b)| a * b).sum();
        let h = (nu.value() - 1.0 + sim).max(0.0);
        if h > 0.0 {
            for j in 0..class_embeddings.cols() {
                let gy = grad.get(y, j) + 2.0 * h * w_c[j];
                grad.set(y, j, gy);
                let gc = grad.get(c, j) + 2.0 * h * w_y[j];
                grad.set(c, j, gc);
            }
        }
    }
    Ok((d_s, grad))
}

/// Temperature-scaled softmax cross entropy with its gradient in the logits.
///
/// Computed with max subtraction; the gradient entries sum to zero.
pub fn softmax_xent(
    scores: &[f64],
    y: usize,
    temperature: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    check_class(y, scores.len())?;
    if temperature <= 0.0 {
        return Err(LossError::NonPositiveTemperature(temperature));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (scaled[y] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(c, e)| {
            let p = e / z;
            (p - if c == y { 1.0 } else { 0.0 }) / temperature
        })
        .collect();
    Ok((loss, grad))
}

/// Top-1 membership with ties counted as correct: `y` is in the argmax set
/// iff its logit equals the maximum after rounding to 1e-12.
pub fn top1_contains(scores: &[f64], y: usize) -> bool {
    let quantize = |s: f64| (s / 1e-12).round();
    let max = scores.iter().map(|&s| quantize(s)).fold(f64::NEG_INFINITY, f64::max);
    quantize(scores[y]) == max
}

/// Both sides of the surrogate inequality: the cosine contrastive loss on the
/// left, `2 (nu - 1) * [y not in Top-1]` on the right. The caller asserts
/// `lhs >= rhs`.
pub fn surrogate_gap(scores: &[f64], y: usize, nu: Margin) -> Result<(f64, f64), LossError> {
    if !nu.in_theory_range() {
        return Err(LossError::MarginOutOfTheoryRange { value: nu.value() });
    }
    let lhs = ccl_loss(scores, y, nu)?;
    let rhs = if top1_contains(scores, y) { 0.0 } else { 2.0 * (nu.value() - 1.0) };
    Ok((lhs, rhs))
}
