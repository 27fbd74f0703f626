//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every forward operation in an append-only arena, so
//! node order is already topological. [`Graph::backward`] walks the arena
//! once in reverse and hands back leaf gradients; trainable tensors live in
//! [`Params`] and are bound onto a graph for each forward pass.
//!
//! ```
//! use embcap::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::vector(vec![1.0, 2.0])).unwrap();
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```

mod adam;
mod check;
mod graph;
mod params;
mod tensor;

use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use check::{check_inputs, check_params, finite_difference_check, relative_error, GradCheckReport};
pub use graph::{softmax, Gradients, Graph, Var};
pub(crate) use graph::sigmoid;
pub use params::{ParamGrads, ParamId, Params};
pub use tensor::Tensor;

/// Storage precision of forward values.
///
/// `F32` rounds every forward result to single precision while keeping the
/// `f64` arithmetic path, so both modes share one implementation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn round(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for x in data {
                *x = *x as f32 as f64;
            }
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}
