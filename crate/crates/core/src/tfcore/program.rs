//! Compiled program representation: embeddings, positional tables, attention
//! heads, feedforward (standard or mixture-of-experts), and the output
//! projection, all in one shared fixed-point format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{FxError, FxFormat};
use crate::gates::FFWeights;
use crate::linalg::{FxMatrix, FxVector};

pub const PROGRAM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProgError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("budget {budget} exceeds positional table size {table}")]
    BudgetExceedsTable { budget: u64, table: usize },
    #[error("loop index {idx} beyond positional table with {table} rows")]
    LoopBeyondTable { idx: u64, table: usize },
    #[error("empty attention window")]
    EmptyWindow,
    #[error("token {0} outside vocabulary of size {1}")]
    TokenRange(usize, usize),
    #[error("input length {got} does not match the program's {expected} positions")]
    InputLength { expected: usize, got: usize },
    #[error("mode mismatch: expected {expected} program")]
    ModeMismatch { expected: &'static str },
    #[error(transparent)]
    Fx(#[from] FxError),
    #[error("program file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mask {
    Causal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Cot,
    Looped,
}

/// One attention head: query/key/value projections, each `head_dim x m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub q: FxMatrix,
    pub k: FxMatrix,
    pub v: FxMatrix,
}

impl Head {
    pub fn head_dim(&self) -> usize {
        self.q.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeedForward {
    Standard(FFWeights),
    Moe {
        gate: FxMatrix,
        experts: Vec<FFWeights>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub heads: Vec<Head>,
    /// m x (sum of head dims): merges concatenated head outputs back into the
    /// hidden space.
    pub head_merge: FxMatrix,
    pub ff: FeedForward,
}

/// Positional embeddings indexed by (loop, position). Chain-of-thought
/// programs use a single loop row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosTable {
    pub rows: Vec<Vec<FxVector>>,
}

impl PosTable {
    pub fn loops(&self) -> usize {
        self.rows.len()
    }

    pub fn positions(&self) -> usize {
        self.rows.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn at(&self, loop_idx: usize, pos: usize) -> &FxVector {
        &self.rows[loop_idx][pos]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerProgram {
    pub format_version: u32,
    pub fmt: FxFormat,
    pub embed_dim: usize,
    pub vocab: Vec<String>,
    /// One embedding vector per vocabulary symbol.
    pub word_embed: Vec<FxVector>,
    pub pos_table: PosTable,
    pub layers: Vec<Layer>,
    pub mask: Mask,
    pub mode: Mode,
    /// |vocab| x m linear decode head.
    pub output_proj: FxMatrix,
    /// Steps (chain-of-thought) or loops (looped) the program is built for.
    pub declared_budget: u64,
    /// The answer is the last `output_len` tokens / positions.
    pub output_len: usize,
}

impl TransformerProgram {
    pub fn validate(&self) -> Result<(), ProgError> {
        let m = self.embed_dim;
        let bad = |msg: String| Err(ProgError::Malformed(msg));
        if self.word_embed.len() != self.vocab.len() {
            return bad(format!(
                "{} word embeddings for {} symbols",
                self.word_embed.len(),
                self.vocab.len()
            ));
        }
        for (i, v) in self.word_embed.iter().enumerate() {
            if v.len() != m {
                return bad(format!("word embedding {i} has dim {}", v.len()));
            }
        }
        for (l, row) in self.pos_table.rows.iter().enumerate() {
            if row.len() != self.pos_table.positions() {
                return bad(format!("positional row {l} has ragged length"));
            }
            for (p, v) in row.iter().enumerate() {
                if v.len() != m {
                    return bad(format!("positional ({l},{p}) has dim {}", v.len()));
                }
            }
        }
        for (li, layer) in self.layers.iter().enumerate() {
            let total: usize = layer.heads.iter().map(|h| h.head_dim()).sum();
            for (hi, h) in layer.heads.iter().enumerate() {
                for (name, mat) in [("q", &h.q), ("k", &h.k), ("v", &h.v)] {
                    if mat.cols() != m || mat.rows() != h.head_dim() {
                        return bad(format!(
                            "layer {li} head {hi} {name}: {}x{} against m={m}",
                            mat.rows(),
                            mat.cols()
                        ));
                    }
                    if !mat.entries_in_range() {
                        return bad(format!("layer {li} head {hi} {name}: weight out of range"));
                    }
                }
            }
            if layer.head_merge.rows() != m || layer.head_merge.cols() != total {
                return bad(format!(
                    "layer {li} head merge is {}x{}, want {m}x{total}",
                    layer.head_merge.rows(),
                    layer.head_merge.cols()
                ));
            }
            let check_ff = |ff: &FFWeights, what: &str| -> Result<(), ProgError> {
                if ff.input_dim() != m || ff.output_dim() != m {
                    return Err(ProgError::Malformed(format!(
                        "layer {li} {what}: {}->{} against m={m}",
                        ff.input_dim(),
                        ff.output_dim()
                    )));
                }
                Ok(())
            };
            match &layer.ff {
                FeedForward::Standard(ff) => check_ff(ff, "ff")?,
                FeedForward::Moe { gate, experts } => {
                    if gate.cols() != m || gate.rows() != experts.len() {
                        return bad(format!(
                            "layer {li} gate is {}x{} for {} experts",
                            gate.rows(),
                            gate.cols(),
                            experts.len()
                        ));
                    }
                    if experts.is_empty() {
                        return bad(format!("layer {li} has no experts"));
                    }
                    for (e, ff) in experts.iter().enumerate() {
                        check_ff(ff, &format!("expert {e}"))?;
                    }
                }
            }
        }
        if self.output_proj.rows() != self.vocab.len() || self.output_proj.cols() != m {
            return bad(format!(
                "output projection is {}x{}",
                self.output_proj.rows(),
                self.output_proj.cols()
            ));
        }
        match (self.mode, self.mask) {
            (Mode::Cot, Mask::Causal) | (Mode::Looped, Mask::Full) => {}
            _ => return bad("mode and mask disagree".to_string()),
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("program serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, ProgError> {
        let p: TransformerProgram =
            serde_json::from_str(s).map_err(|e| ProgError::Parse(e.to_string()))?;
        if p.format_version != PROGRAM_FORMAT_VERSION {
            return Err(ProgError::Parse(format!(
                "unsupported program format version {}",
                p.format_version
            )));
        }
        p.validate()?;
        Ok(p)
    }
}
