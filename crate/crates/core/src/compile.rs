//! Options and errors shared by the program compilers.

use thiserror::Error;

use crate::fxp::FxError;
use crate::gates::GateError;
use crate::graph::{GraphError, Limits, NodeId};
use crate::tfcore::ProgError;

#[derive(Debug, Clone, Copy)]
pub struct CompileOptions {
    /// Declared fan-in bound; graphs whose max arity exceeds it are rejected.
    pub max_fan_in: usize,
    /// Cap on the width constant of looped programs: blocks per position.
    pub max_width_const: usize,
    pub limits: Limits,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            max_fan_in: 8,
            max_width_const: 16,
            limits: Limits::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Fx(#[from] FxError),
    #[error(transparent)]
    Prog(#[from] ProgError),
    #[error("fan-in {got} exceeds the declared bound {bound}")]
    FanInExceeded { got: usize, bound: usize },
    #[error("graph has no input nodes; decoding needs at least one position")]
    NoInputs,
    #[error("output node {node} is an input; only function-node outputs can be decoded in order")]
    InputAsOutput { node: NodeId },
    #[error("width violation: layer width {width} needs width constant {needed} > bound {bound} at {positions} positions")]
    WidthViolation {
        width: usize,
        needed: usize,
        bound: usize,
        positions: usize,
    },
    #[error("{outputs} outputs exceed the {positions} available positions")]
    TooManyOutputs { outputs: usize, positions: usize },
    #[error("constant-valued output node {node} is not supported by the looped compiler")]
    ConstantOutput { node: NodeId },
    #[error("depth-0 graph: outputs must be the last {m} inputs in order")]
    Depth0OutputsMisaligned { m: usize },
    #[error("circuit: {0}")]
    Circuit(String),
}
