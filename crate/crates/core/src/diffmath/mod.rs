//! Dense `f64` matrices and a small reverse-mode tape covering exactly the
//! operations the layout losses need.

mod matrix;
mod tape;

pub use matrix::DenseMatrix;
pub use tape::{sigmoid, Gradient, Gradients, NodeId, Tape};

use thiserror::Error;

/// Floor applied to every division denominator.
pub const DENOM_EPS: f64 = 1e-8;
/// Probability clamp for binary cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got {0}x{1}")]
    NotScalar(usize, usize),
    #[error("contract violated: {0}")]
    Contract(String),
}

impl Tape {
    /// `max(‖v‖_∞, ε)` as a 1x1 node.
    pub fn guarded_max_norm(&mut self, v: NodeId) -> Result<NodeId, MathError> {
        let m = self.max_norm(v)?;
        Ok(self.clamp(m, DENOM_EPS, f64::INFINITY))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and a constant
    /// target of the same shape.
    pub fn bce_with_sigmoid(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId, MathError> {
        let p = self.sigmoid(logits);
        let p = self.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        let log_p = self.ln(p);
        let one_minus_p = self.rsub_scalar(1.0, p);
        let log_q = self.ln(one_minus_p);
        let one_minus_y = self.rsub_scalar(1.0, target);
        let pos = self.mul(target, log_p)?;
        let neg = self.mul(one_minus_y, log_q)?;
        let both = self.add(pos, neg)?;
        let mean = self.mean(both);
        Ok(self.scale(mean, -1.0))
    }
}
