//! Exact interpreter for fixed-point transformer programs with saturated
//! attention, in causal chain-of-thought mode and non-causal looped mode.

mod program;
mod run;

pub use program::{
    FeedForward, Head, Layer, Mask, Mode, PosTable, ProgError, TransformerProgram,
    PROGRAM_FORMAT_VERSION,
};
pub use run::{
    argmax_lowest, ff_apply, forward_block, run_cot, run_looped, saturated_attention, CotState,
    Trace,
};
