//! Category-specific awareness head: a squeeze-style channel gate decides,
//! per channel, how much of the original feature to keep versus its
//! instance-normalized form.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{FrptError, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_REDUCTION: usize = 8;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CahParams<T: Real = f32> {
    /// `[C_P / r, C_P]`
    pub w_f: Tensor<T>,
    /// `[C_P, C_P / r]`
    pub w_l: Tensor<T>,
    pub reduction: usize,
    pub epsilon: f64,
}

impl<T: Real> CahParams<T> {
    /// Random squeeze weights and a zero excitation layer, so the gate
    /// starts at exactly 0.5 on every channel.
    pub fn init<R: Rng + ?Sized>(c_p: usize, reduction: usize, epsilon: f64, rng: &mut R) -> Result<Self> {
        if reduction == 0 || c_p % reduction != 0 {
            return Err(FrptError::Config(format!("C_P = {c_p} not divisible by reduction {reduction}")));
        }
        if !(epsilon > 0.0) {
            return Err(FrptError::Config("epsilon must be positive".into()));
        }
        let hidden = c_p / reduction;
        Ok(Self {
            w_f: Tensor::randn(&[hidden, c_p], (1.0 / c_p as f64).sqrt(), rng).learnable(),
            w_l: Tensor::zeros(&[c_p, hidden]).learnable(),
            reduction,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_f.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.w_f.len() + self.w_l.len()
    }

    pub fn cast<U: Real>(&self) -> CahParams<U> {
        CahParams { w_f: self.w_f.cast(), w_l: self.w_l.cast(), reduction: self.reduction, epsilon: self.epsilon }
    }
}

/// `sigmoid(w_l · relu(w_f · gap(m_p)))`, one weight per channel.
pub fn channel_attention<T: Real>(tape: &mut Tape<T>, m_p: Var, w_f: Var, w_l: Var) -> Result<Var> {
    let pooled = tape.gap(m_p)?;
    let squeezed = tape.fc(pooled, w_f, None)?;
    let squeezed = tape.relu(squeezed);
    let excited = tape.fc(squeezed, w_l, None)?;
    Ok(tape.sigmoid(excited))
}

/// `w_c ⊙ m_p + (1 − w_c) ⊙ IN(m_p)` per channel. Without instance
/// normalization the second term is dropped: `w_c ⊙ m_p`.
pub fn cah_forward<T: Real>(tape: &mut Tape<T>, m_p: Var, w_c: Var, epsilon: f64, use_in: bool) -> Result<Var> {
    if use_in {
        let normalized = tape.instance_norm(m_p, T::lit(epsilon))?;
        tape.blend_channels(m_p, normalized, w_c)
    } else {
        tape.scale_channels(m_p, w_c)
    }
}
