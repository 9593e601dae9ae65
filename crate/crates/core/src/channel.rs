//! The binary symmetric channel over activation codes.

use rand::Rng;
use thiserror::Error;

use crate::codes::{ActivationCode, CodeError};

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("flip probability {0} outside [0, 0.5)")]
    Probability(f64),
    #[error("log probability is -inf: p = 0 and the codes differ")]
    ZeroProbability,
    #[error(transparent)]
    Code(#[from] CodeError),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Flips every bit independently with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpec {
    p: f64,
}

impl ChannelSpec {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&p) {
            return Err(ChannelError::Probability(p));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `ln((1−p)/p)`; infinite for the noiseless channel.
    pub fn scale(&self) -> f64 {
        ((1.0 - self.p) / self.p).ln()
    }

    /// `½·ln((1−p)/p)`, the weight on code dot products.
    pub fn half_scale(&self) -> f64 {
        0.5 * self.scale()
    }

    /// `(D/2)·ln(p(1−p))`.
    pub fn log_normalizer(&self, d: usize) -> f64 {
        0.5 * d as f64 * (self.p * (1.0 - self.p)).ln()
    }

    pub fn transmit<R: Rng + ?Sized>(&self, c: &ActivationCode, rng: &mut R) -> ActivationCode {
        let mut out = c.clone();
        for d in 0..c.len() {
            if rng.random::<f64>() < self.p {
                out.negate_bit(d);
            }
        }
        out
    }

    /// `ln P(c̃ | c) = (c̃·c)·½ln((1−p)/p) + (D/2)·ln(p(1−p))`.
    pub fn log_cond_prob(&self, noisy: &ActivationCode, c: &ActivationCode) -> Result<f64> {
        let dot = noisy.dot(c)?;
        if self.p == 0.0 {
            return if dot == c.len() as i64 {
                Ok(0.0)
            } else {
                Err(ChannelError::ZeroProbability)
            };
        }
        Ok(dot as f64 * self.half_scale() + self.log_normalizer(c.len()))
    }

    /// `E[c̃·cⱼ | cᵢ] = (1−2p)(cᵢ·cⱼ)`.
    pub fn expected_noisy_dot(&self, ci: &ActivationCode, cj: &ActivationCode) -> Result<f64> {
        Ok((1.0 - 2.0 * self.p) * ci.dot(cj)? as f64)
    }
}
