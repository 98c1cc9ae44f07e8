//! Answer heads: multi-choice scoring with a hinge loss, open-ended
//! classification with cross-entropy, and the argmax prediction rule.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::DecoderMode;
use crate::error::{config_err, data_err, Result};
use crate::nn::{elu, elu_grad, Linear};
use crate::params::{join, ParamVisit};
use crate::tensor::{argmax, dot, softmax, softmax_backward, Matrix, Real};

/// Probability floor applied before the log in [`ce_loss`].
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum DecoderParams<T> {
    /// `W_c`: `d × 1` plus a scalar bias.
    MultiChoice { w_c: Linear<T> },
    /// `W_qv`: `2d × d` plus bias; `W_c`: `d × |A|` plus bias.
    OpenEnded { w_qv: Linear<T>, w_c: Linear<T> },
}

impl<T: Real> DecoderParams<T> {
    pub fn new<R: Rng + ?Sized>(mode: DecoderMode, hidden: usize, rng: &mut R) -> Self {
        match mode {
            DecoderMode::MultiChoice { .. } => Self::MultiChoice { w_c: Linear::new(hidden, 1, rng) },
            DecoderMode::OpenEnded { answer_set_size } => Self::OpenEnded {
                w_qv: Linear::new(2 * hidden, hidden, rng),
                w_c: Linear::new(hidden, answer_set_size, rng),
            },
        }
    }

    pub fn zeros(mode: DecoderMode, hidden: usize) -> Self {
        match mode {
            DecoderMode::MultiChoice { .. } => Self::MultiChoice { w_c: Linear::zeros(hidden, 1) },
            DecoderMode::OpenEnded { answer_set_size } => Self::OpenEnded {
                w_qv: Linear::zeros(2 * hidden, hidden),
                w_c: Linear::zeros(hidden, answer_set_size),
            },
        }
    }
}

impl<T: Real> ParamVisit<T> for DecoderParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix<T>)) {
        match self {
            Self::MultiChoice { w_c } => w_c.visit(&join(prefix, "w_c"), f),
            Self::OpenEnded { w_qv, w_c } => {
                w_qv.visit(&join(prefix, "w_qv"), f);
                w_c.visit(&join(prefix, "w_c"), f);
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        match self {
            Self::MultiChoice { w_c } => w_c.visit_mut(&join(prefix, "w_c"), f),
            Self::OpenEnded { w_qv, w_c } => {
                w_qv.visit_mut(&join(prefix, "w_qv"), f);
                w_c.visit_mut(&join(prefix, "w_c"), f);
            }
        }
    }
}

fn hadamard<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

/// `W_cᵀ (f_Q ⊙ f_V) + b` for one candidate.
pub fn mc_logit<T: Real>(f_q: &[T], f_v: &[T], w_c: &Linear<T>) -> T {
    dot(&hadamard(f_q, f_v), w_c.weight.data()) + w_c.bias.get(0, 0)
}

/// Softmax over the candidates' logits. Each pair is the holistic query
/// vector and the video vector computed under that query.
pub fn mc_scores<T: Real>(pairs: &[(Vec<T>, Vec<T>)], w_c: &Linear<T>) -> Result<Vec<T>> {
    if pairs.len() < 2 {
        return Err(config_err!("multi-choice scoring needs at least 2 candidates, got {}", pairs.len()));
    }
    let logits: Vec<T> = pairs.iter().map(|(q, v)| mc_logit(q, v, w_c)).collect();
    Ok(softmax(&logits))
}

/// Backward through [`mc_scores`]. Returns `(g_f_Q, g_f_V)` per candidate.
pub fn mc_scores_backward<T: Real>(
    pairs: &[(Vec<T>, Vec<T>)],
    scores: &[T],
    grad_scores: &[T],
    w_c: &Linear<T>,
    grads: &mut Linear<T>,
) -> Vec<(Vec<T>, Vec<T>)> {
    let g_logits = softmax_backward(scores, grad_scores);
    let w = w_c.weight.data();
    pairs
        .iter()
        .zip(&g_logits)
        .map(|((q, v), &g)| {
            for (j, gw) in grads.weight.data_mut().iter_mut().enumerate() {
                *gw += g * q[j] * v[j];
            }
            // The shared bias shifts every logit equally, so its softmax
            // gradient is exactly zero; summing `g` would only leave rounding
            // residue for Adam to amplify.
            let g_q = (0..q.len()).map(|j| g * w[j] * v[j]).collect();
            let g_v = (0..v.len()).map(|j| g * w[j] * q[j]).collect();
            (g_q, g_v)
        })
        .collect()
}

/// `Σ_{n ≠ p} max(0, 1 + s_n − s_p)`.
pub fn hinge_loss<T: Real>(scores: &[T], positive: usize) -> Result<T> {
    if positive >= scores.len() {
        return Err(data_err!("positive index {positive} outside {} candidates", scores.len()));
    }
    let s_p = scores[positive];
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != positive)
        .map(|(_, &s_n)| (T::one() + s_n - s_p).max(T::zero()))
        .sum())
}

/// Subgradient of [`hinge_loss`] with respect to the scores.
pub fn hinge_grad<T: Real>(scores: &[T], positive: usize) -> Vec<T> {
    let mut g = vec![T::zero(); scores.len()];
    let s_p = scores[positive];
    for (i, &s_n) in scores.iter().enumerate() {
        if i != positive && T::one() + s_n - s_p > T::zero() {
            g[i] += T::one();
            g[positive] -= T::one();
        }
    }
    g
}

/// Intermediates of [`oe_scores`] needed by the backward pass.
#[derive(Clone, Debug)]
pub struct OeTape<T> {
    input: Vec<T>,
    preact: Vec<T>,
    hidden: Vec<T>,
}

/// `softmax(W_cᵀ ELU(W_qv [f_Q ; f_V]) + b)`.
pub fn oe_scores<T: Real>(f_q: &[T], f_v: &[T], w_qv: &Linear<T>, w_c: &Linear<T>) -> Vec<T> {
    oe_scores_taped(f_q, f_v, w_qv, w_c).0
}

pub fn oe_scores_taped<T: Real>(
    f_q: &[T],
    f_v: &[T],
    w_qv: &Linear<T>,
    w_c: &Linear<T>,
) -> (Vec<T>, OeTape<T>) {
    let input: Vec<T> = f_q.iter().chain(f_v).copied().collect();
    let preact = w_qv.forward_vec(&input);
    let hidden: Vec<T> = preact.iter().map(|&v| elu(v)).collect();
    let scores = softmax(&w_c.forward_vec(&hidden));
    (scores, OeTape { input, preact, hidden })
}

/// Returns `(g_f_Q, g_f_V)`.
pub fn oe_scores_backward<T: Real>(
    tape: &OeTape<T>,
    scores: &[T],
    grad_scores: &[T],
    w_qv: &Linear<T>,
    w_c: &Linear<T>,
    grads_qv: &mut Linear<T>,
    grads_c: &mut Linear<T>,
) -> (Vec<T>, Vec<T>) {
    let g_logits = softmax_backward(scores, grad_scores);
    let g_hidden = w_c.backward_vec(&tape.hidden, &g_logits, grads_c);
    let g_pre: Vec<T> = g_hidden.iter().zip(&tape.preact).map(|(&g, &p)| g * elu_grad(p)).collect();
    let g_in = w_qv.backward_vec(&tape.input, &g_pre, grads_qv);
    let d = tape.input.len() / 2;
    (g_in[..d].to_vec(), g_in[d..].to_vec())
}

/// `−log max(s_answer, 1e-12)`.
pub fn ce_loss<T: Real>(scores: &[T], answer: usize) -> Result<T> {
    let s = *scores
        .get(answer)
        .ok_or_else(|| data_err!("answer index {answer} outside {} classes", scores.len()))?;
    Ok(-s.max(T::lit(CE_CLAMP)).ln())
}

/// Gradient of [`ce_loss`] with respect to the scores; zero once clamped.
pub fn ce_grad<T: Real>(scores: &[T], answer: usize) -> Vec<T> {
    let mut g = vec![T::zero(); scores.len()];
    let s = scores[answer];
    if s > T::lit(CE_CLAMP) {
        g[answer] = -T::one() / s;
    }
    g
}

/// Argmax with the lowest index winning ties.
pub fn predict<T: Real>(scores: &[T]) -> usize {
    argmax(scores)
}
