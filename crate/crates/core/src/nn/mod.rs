//! Minimal reverse-mode differentiation over [`Tensor4`](crate::Tensor4).
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so
//! reverse creation order is a valid topological order for backward.

mod conv;
mod graph;
mod optim;

pub use conv::{conv2d_forward, conv_output_size, pixel_shuffle_tensor, pixel_unshuffle_tensor};
pub use graph::{Graph, NodeId};
pub use optim::{adam_step, cosine_lr, AdamState};

use crate::error::{Error, Result};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropoutDim {
    /// Independent keep/drop decision per element.
    Element,
    /// One decision per `(sample, channel)` pair; whole feature maps drop.
    Channel,
}

impl DropoutDim {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropoutDim::Element => "element",
            DropoutDim::Channel => "channel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "element" => Ok(DropoutDim::Element),
            "channel" => Ok(DropoutDim::Channel),
            other => Err(Error::Config(format!(
                "unknown dropout dimension '{other}' (expected element or channel)"
            ))),
        }
    }
}

/// Dropout dimension and drop probability `p`, with `0 <= p < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub dim: DropoutDim,
    p: f64,
}

impl DropoutSpec {
    pub fn new(dim: DropoutDim, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(DropoutSpec { dim, p })
    }

    pub fn channel(p: f64) -> Result<Self> {
        Self::new(DropoutDim::Channel, p)
    }

    pub fn element(p: f64) -> Result<Self> {
        Self::new(DropoutDim::Element, p)
    }

    pub fn disabled() -> Self {
        DropoutSpec {
            dim: DropoutDim::Channel,
            p: 0.0,
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}
