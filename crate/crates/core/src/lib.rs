//! A compiler, interpreter, and verification toolkit for exact fixed-point
//! transformer programs.
//!
//! Computation DAGs over finite alphabets compile into chain-of-thought
//! programs (one decode step per node) or looped programs (one loop per depth
//! layer); threshold circuits compile into looped programs (one loop per
//! circuit layer). All interpretation is exact: saturated attention averages
//! over the true argmax set and every arithmetic primitive truncates
//! deterministically, so compiled programs are checked bit-for-bit against
//! the graph evaluator.
//!
//! The probabilistic side simulates a weak next-token oracle over
//! self-reducible relations, aggregates it by coordinate-wise medians, and
//! corrects it by rejection sampling into an almost-uniform sampler and a
//! solution-count estimator, all validated against brute-force enumeration.

pub mod circuit;
pub mod compile;
pub mod corpus;
pub mod cot;
pub mod fxp;
pub mod gates;
pub mod graph;
pub mod linalg;
pub mod looped;
pub mod relations;
pub mod sampler;
pub mod selfcheck;
pub mod tfcore;

pub use fxp::{FxError, FxFormat, FxScalar};
