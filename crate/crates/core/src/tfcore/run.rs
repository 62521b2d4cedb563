//! Program execution: saturated attention computed as exact argmax-set
//! averaging (the infinite-sharpness limit taken symbolically, never by
//! large-temperature softmax), residual blocks, greedy chain-of-thought
//! decoding, and loop iteration.

use serde::{Deserialize, Serialize};

use crate::fxp::{self, FxError};
use crate::linalg::FxVector;

use super::program::{FeedForward, Layer, Mask, Mode, ProgError, TransformerProgram};

/// Per-step decoded tokens (chain-of-thought) or per-loop hidden-state
/// snapshots (looped).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Trace {
    Cot { steps: Vec<usize> },
    Looped { snapshots: Vec<Vec<FxVector>> },
}

impl Trace {
    pub fn len(&self) -> usize {
        match self {
            Trace::Cot { steps } => steps.len(),
            Trace::Looped { snapshots } => snapshots.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lowest index attaining the maximum raw value.
pub fn argmax_lowest(raws: impl Iterator<Item = i128>) -> usize {
    let mut best_idx = 0usize;
    let mut best = i128::MIN;
    for (i, r) in raws.enumerate() {
        if r > best {
            best = r;
            best_idx = i;
        }
    }
    best_idx
}

fn inner_raw(a: &FxVector, b: &FxVector) -> Result<i128, FxError> {
    let fmt = a.format();
    let mut acc = 0i128;
    for (x, y) in a.iter_raw().zip(b.iter_raw()) {
        if x == 0 || y == 0 {
            continue;
        }
        acc = fxp::mac_raw(acc, x, y, fmt, "attention_score")?;
    }
    Ok(acc)
}

/// Attention output for one query over `keys[..window]`: the exact uniform
/// average of the values at all argmax-score positions, truncated once.
fn attend_one(
    q: &FxVector,
    keys: &[FxVector],
    values: &[FxVector],
    window: usize,
) -> Result<FxVector, ProgError> {
    if window == 0 {
        return Err(ProgError::EmptyWindow);
    }
    let mut best = i128::MIN;
    let mut arg: Vec<usize> = Vec::new();
    for (j, k) in keys.iter().take(window).enumerate() {
        let s = inner_raw(q, k)?;
        if s > best {
            best = s;
            arg.clear();
            arg.push(j);
        } else if s == best {
            arg.push(j);
        }
    }
    let chosen: Vec<&FxVector> = arg.iter().map(|&j| &values[j]).collect();
    Ok(FxVector::truncated_mean(&chosen)?)
}

/// The standalone operation over whole sequences of per-position
/// query/key/value vectors.
pub fn saturated_attention(
    queries: &[FxVector],
    keys: &[FxVector],
    values: &[FxVector],
    mask: Mask,
) -> Result<Vec<FxVector>, ProgError> {
    let n = queries.len();
    assert_eq!(keys.len(), n);
    assert_eq!(values.len(), n);
    (0..n)
        .map(|i| {
            let window = match mask {
                Mask::Causal => i + 1,
                Mask::Full => n,
            };
            attend_one(&queries[i], keys, values, window)
        })
        .collect()
}

/// Feedforward delta for one position (residual added by the block runner).
/// Mixture-of-experts routes to the argmax-gated expert, ties to the lowest
/// expert index.
pub fn ff_apply(ff: &FeedForward, hidden: &FxVector) -> Result<FxVector, ProgError> {
    match ff {
        FeedForward::Standard(w) => Ok(w.apply(hidden)?),
        FeedForward::Moe { gate, experts } => {
            let scores = gate.matvec(hidden)?;
            let e = argmax_lowest(scores.iter_raw());
            Ok(experts[e].apply(hidden)?)
        }
    }
}

fn concat(parts: &[FxVector]) -> FxVector {
    let fmt = parts[0].format();
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = FxVector::zeros(total, fmt);
    let mut at = 0;
    for p in parts {
        for i in 0..p.len() {
            out.set(at + i, p.get(i));
        }
        at += p.len();
    }
    out
}

fn layer_forward(layer: &Layer, hidden: &[FxVector], mask: Mask) -> Result<Vec<FxVector>, ProgError> {
    let n = hidden.len();
    // per-head keys and values at every position, from the layer input
    let mut head_keys: Vec<Vec<FxVector>> = Vec::with_capacity(layer.heads.len());
    let mut head_vals: Vec<Vec<FxVector>> = Vec::with_capacity(layer.heads.len());
    for h in &layer.heads {
        let mut ks = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for z in hidden {
            ks.push(h.k.matvec(z)?);
            vs.push(h.v.matvec(z)?);
        }
        head_keys.push(ks);
        head_vals.push(vs);
    }
    let mut after_sa = Vec::with_capacity(n);
    for (i, z) in hidden.iter().enumerate() {
        let window = match mask {
            Mask::Causal => i + 1,
            Mask::Full => n,
        };
        let mut parts = Vec::with_capacity(layer.heads.len());
        for (hi, h) in layer.heads.iter().enumerate() {
            let q = h.q.matvec(z)?;
            parts.push(attend_one(&q, &head_keys[hi], &head_vals[hi], window)?);
        }
        let sa = if parts.is_empty() {
            FxVector::zeros(z.len(), z.format())
        } else {
            layer.head_merge.matvec(&concat(&parts))?
        };
        after_sa.push(z.add(&sa)?);
    }
    let mut out = Vec::with_capacity(n);
    for u in &after_sa {
        out.push(u.add(&ff_apply(&layer.ff, u)?)?);
    }
    Ok(out)
}

/// One full pass of the program's block over all positions.
pub fn forward_block(
    prog: &TransformerProgram,
    hidden: &[FxVector],
) -> Result<Vec<FxVector>, ProgError> {
    let mut h = hidden.to_vec();
    for layer in &prog.layers {
        h = layer_forward(layer, &h, prog.mask)?;
    }
    Ok(h)
}

fn embed(prog: &TransformerProgram, token: usize, pos: usize) -> Result<FxVector, ProgError> {
    if token >= prog.vocab.len() {
        return Err(ProgError::TokenRange(token, prog.vocab.len()));
    }
    Ok(prog.word_embed[token].add(prog.pos_table.at(0, pos))?)
}

/// Incremental chain-of-thought evaluation state. Appending a token never
/// changes earlier positions under a causal mask, so per-position keys,
/// values, and layer inputs are cached and each step costs one position.
/// `run_cot` is bit-identical to re-running the full forward pass per step;
/// tests assert this.
pub struct CotState<'p> {
    prog: &'p TransformerProgram,
    pub tokens: Vec<usize>,
    // kv[layer][head] = (keys per position, values per position)
    kv: Vec<Vec<(Vec<FxVector>, Vec<FxVector>)>>,
    last_hidden: Option<FxVector>,
}

impl<'p> CotState<'p> {
    pub fn new(prog: &'p TransformerProgram) -> Self {
        let kv = prog
            .layers
            .iter()
            .map(|l| l.heads.iter().map(|_| (Vec::new(), Vec::new())).collect())
            .collect();
        CotState {
            prog,
            tokens: Vec::new(),
            kv,
            last_hidden: None,
        }
    }

    /// Append a token and evaluate its position through all layers.
    pub fn extend(&mut self, token: usize) -> Result<(), ProgError> {
        let pos = self.tokens.len();
        if pos >= self.prog.pos_table.positions() {
            return Err(ProgError::BudgetExceedsTable {
                budget: pos as u64 + 1,
                table: self.prog.pos_table.positions(),
            });
        }
        let mut z = embed(self.prog, token, pos)?;
        for (li, layer) in self.prog.layers.iter().enumerate() {
            let mut parts = Vec::with_capacity(layer.heads.len());
            for (hi, h) in layer.heads.iter().enumerate() {
                let k = h.k.matvec(&z)?;
                let v = h.v.matvec(&z)?;
                let (ks, vs) = &mut self.kv[li][hi];
                ks.push(k);
                vs.push(v);
            }
            for (hi, h) in layer.heads.iter().enumerate() {
                let q = h.q.matvec(&z)?;
                let (ks, vs) = &self.kv[li][hi];
                parts.push(attend_one(&q, ks, vs, pos + 1)?);
            }
            let sa = if parts.is_empty() {
                FxVector::zeros(z.len(), z.format())
            } else {
                layer.head_merge.matvec(&concat(&parts))?
            };
            let u = z.add(&sa)?;
            z = u.add(&ff_apply(&layer.ff, &u)?)?;
        }
        self.tokens.push(token);
        self.last_hidden = Some(z);
        Ok(())
    }

    /// Decode logits at the newest position.
    pub fn logits(&self) -> Result<FxVector, ProgError> {
        let h = self
            .last_hidden
            .as_ref()
            .ok_or(ProgError::EmptyWindow)?;
        Ok(self.prog.output_proj.matvec(h)?)
    }
}

/// Greedy chain-of-thought run: `budget` decode-append steps, then the
/// answer is the last `output_len` tokens of the full sequence.
pub fn run_cot(
    prog: &TransformerProgram,
    x: &[usize],
    budget: u64,
) -> Result<(Vec<usize>, Trace), ProgError> {
    if prog.mode != Mode::Cot {
        return Err(ProgError::ModeMismatch { expected: "chain-of-thought" });
    }
    prog.validate()?;
    let table = prog.pos_table.positions();
    if x.len() as u64 + budget > table as u64 {
        return Err(ProgError::BudgetExceedsTable {
            budget: x.len() as u64 + budget,
            table,
        });
    }
    let mut state = CotState::new(prog);
    for &t in x {
        state.extend(t)?;
    }
    let mut steps = Vec::with_capacity(budget as usize);
    for _ in 0..budget {
        let logits = state.logits()?;
        let tok = argmax_lowest(logits.iter_raw());
        steps.push(tok);
        state.extend(tok)?;
    }
    let seq = &state.tokens;
    let m = prog.output_len.min(seq.len());
    let answer = seq[seq.len() - m..].to_vec();
    Ok((answer, Trace::Cot { steps }))
}

/// Looped run: `loops` applications of the block with loop-indexed positional
/// encodings added before each, then per-position argmax decode; the answer
/// is the last `output_len` positions.
pub fn run_looped(
    prog: &TransformerProgram,
    x: &[usize],
    loops: u64,
) -> Result<(Vec<usize>, Trace), ProgError> {
    if prog.mode != Mode::Looped {
        return Err(ProgError::ModeMismatch { expected: "looped" });
    }
    prog.validate()?;
    let n = prog.pos_table.positions();
    if x.len() != n {
        return Err(ProgError::InputLength {
            expected: n,
            got: x.len(),
        });
    }
    if loops > prog.pos_table.loops() as u64 {
        return Err(ProgError::LoopBeyondTable {
            idx: loops.saturating_sub(1),
            table: prog.pos_table.loops(),
        });
    }
    let mut hidden: Vec<FxVector> = Vec::with_capacity(n);
    for (i, &t) in x.iter().enumerate() {
        if t >= prog.vocab.len() {
            return Err(ProgError::TokenRange(t, prog.vocab.len()));
        }
        let _ = i;
        hidden.push(prog.word_embed[t].clone());
    }
    let mut snapshots = Vec::with_capacity(loops as usize);
    for k in 0..loops {
        let mut staged = Vec::with_capacity(n);
        for (i, h) in hidden.iter().enumerate() {
            staged.push(h.add(prog.pos_table.at(k as usize, i))?);
        }
        hidden = forward_block(prog, &staged)?;
        snapshots.push(hidden.clone());
    }
    let decoded: Vec<usize> = hidden
        .iter()
        .map(|h| Ok(argmax_lowest(prog.output_proj.matvec(h)?.iter_raw())))
        .collect::<Result<_, ProgError>>()?;
    let m = prog.output_len.min(decoded.len());
    let answer = decoded[decoded.len() - m..].to_vec();
    Ok((answer, Trace::Looped { snapshots }))
}
