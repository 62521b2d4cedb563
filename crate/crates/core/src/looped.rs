//! Looped compilers: (a) a computation graph becomes a 2-layer looped
//! program evaluating one depth layer per loop; (b) a threshold/Boolean
//! circuit becomes a 3-layer looped program running one circuit layer per
//! loop.
//!
//! For graphs, the hidden state at each of the n positions is split into W
//! blocks of equal width; slot (position, block) carries one node of the
//! current layer. Attention heads indexed (dst block, pred slot, src block)
//! fetch predecessor values through the orthogonal selector; queries whose
//! predecessor lives in a different source block aim at a reserved
//! empty slot of that block, so their retrieval is exactly zero and the
//! per-slot sums stay clean. Loop-indexed positional rows rewrite the
//! function labels and predecessor indices between loops as deltas on the
//! residual stream, and a second layer commits values to exact one-hots.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::circuit::{GateKind, ThresholdCircuit};
use crate::compile::{CompileError, CompileOptions};
use crate::fxp::{ceil_log2, sbin, FxFormat, FxScalar};
use crate::gates::{self, FFWeights, PrecisionClass};
use crate::graph::{self, CompGraph, LocalFn, Node, NodeId, NodeKind, SymbolId};
use crate::linalg::{FxMatrix, FxVector};
use crate::tfcore::{
    run_looped, FeedForward, Head, Layer, Mask, Mode, PosTable, Trace, TransformerProgram,
    PROGRAM_FORMAT_VERSION,
};

// ---------------------------------------------------------------------------
// small builder for sparse two-layer ReLU nets over a wide hidden space

struct FfBuilder {
    m: usize,
    fmt: FxFormat,
    // per unit: (input taps, bias, output taps), weights in raw units
    units: Vec<(Vec<(usize, i128)>, i128, Vec<(usize, i128)>)>,
}

impl FfBuilder {
    fn new(m: usize, fmt: FxFormat) -> Self {
        Self {
            m,
            fmt,
            units: Vec::new(),
        }
    }

    fn one(&self) -> i128 {
        self.fmt.scale()
    }

    fn unit(&mut self, taps: Vec<(usize, i128)>, bias: i128, out: Vec<(usize, i128)>) {
        self.units.push((taps, bias, out));
    }

    /// ReLU(slot) subtracted from itself: a delta-write that clears a
    /// nonnegative slot.
    fn clear_slot(&mut self, slot: usize) {
        let one = self.one();
        self.unit(vec![(slot, one)], 0, vec![(slot, -one)]);
    }

    fn build(self) -> Result<FFWeights, CompileError> {
        let h = self.units.len().max(1);
        let mut w1 = FxMatrix::zeros(h, self.m, self.fmt);
        let mut b1 = FxVector::zeros(h, self.fmt);
        let mut w2 = FxMatrix::zeros(self.m, h, self.fmt);
        for (u, (taps, bias, out)) in self.units.into_iter().enumerate() {
            for (col, w) in taps {
                w1.set_raw(u, col, w1.raw_at(u, col) + w)?;
            }
            b1.set_raw(u, bias)?;
            for (row, w) in out {
                w2.set_raw(row, u, w2.raw_at(row, u) + w)?;
            }
        }
        Ok(FFWeights {
            w1,
            b1,
            w2,
            class: PrecisionClass::LogBit,
        })
    }
}

// ---------------------------------------------------------------------------
// graph normalization: constant folding and output depth extension

/// Values of every node with no input ancestor, computed at compile time.
fn constant_values(g: &CompGraph) -> Result<BTreeMap<NodeId, SymbolId>, CompileError> {
    let order = graph::topo_order(g)?;
    let by_id: BTreeMap<NodeId, &Node> = g.nodes.iter().map(|n| (n.id, n)).collect();
    let mut consts: BTreeMap<NodeId, SymbolId> = BTreeMap::new();
    for id in order {
        let n = by_id[&id];
        if let NodeKind::Func { label } = &n.kind {
            if n.preds.iter().all(|p| consts.contains_key(p)) {
                let args: Vec<SymbolId> = n.preds.iter().map(|p| consts[p]).collect();
                consts.insert(id, g.fn_table[label].apply(&args, g.alphabet.len()));
            }
        }
    }
    Ok(consts)
}

/// Remove constant-valued nodes, partially applying consumers' tables.
/// Constant-valued outputs are rejected by the caller beforehand.
fn fold_constants(g: &CompGraph) -> Result<CompGraph, CompileError> {
    let consts = constant_values(g)?;
    if consts.is_empty() {
        return Ok(g.clone());
    }
    let mut out = g.clone();
    out.nodes.retain(|n| !consts.contains_key(&n.id));
    let sigma = g.alphabet.len();
    for n in &mut out.nodes {
        let NodeKind::Func { label } = &n.kind else { continue };
        let fixed: Vec<(usize, SymbolId)> = n
            .preds
            .iter()
            .enumerate()
            .filter_map(|(i, p)| consts.get(p).map(|v| (i, *v)))
            .collect();
        if fixed.is_empty() {
            continue;
        }
        let f = &g.fn_table[label];
        let free: Vec<usize> = (0..f.arity)
            .filter(|i| !fixed.iter().any(|(fi, _)| fi == i))
            .collect();
        let mut table = Vec::with_capacity(sigma.pow(free.len() as u32));
        for pat in 0..sigma.pow(free.len() as u32) {
            let mut args = vec![0usize; f.arity];
            let mut rest = pat;
            for &i in free.iter().rev() {
                args[i] = rest % sigma;
                rest /= sigma;
            }
            for (i, v) in &fixed {
                args[*i] = *v;
            }
            table.push(f.apply(&args, sigma));
        }
        let derived = format!(
            "{label}@{}",
            fixed
                .iter()
                .map(|(i, v)| format!("{i}:{v}"))
                .collect::<Vec<_>>()
                .join(",")
        );
        out.fn_table.insert(
            derived.clone(),
            LocalFn {
                arity: free.len(),
                table,
            },
        );
        n.kind = NodeKind::Func { label: derived };
        n.preds = free.iter().map(|&i| n.preds[i]).collect();
    }
    Ok(out)
}

/// Append identity chains so every output node sits at depth `target`.
fn extend_outputs_to_depth(g: &CompGraph, target: usize) -> Result<CompGraph, CompileError> {
    let ld = graph::layerize(g)?;
    let mut out = g.clone();
    let needs: Vec<(usize, NodeId, usize)> = g
        .outputs
        .iter()
        .enumerate()
        .filter_map(|(j, o)| {
            let d = ld.depth_of[o];
            (d < target).then_some((j, *o, d))
        })
        .collect();
    if needs.is_empty() {
        return Ok(out);
    }
    let id_label = match out
        .fn_table
        .iter()
        .find(|(_, f)| **f == LocalFn::identity(g.alphabet.len()))
    {
        Some((l, _)) => l.clone(),
        None => {
            let mut label = "id".to_string();
            while out.fn_table.contains_key(&label) {
                label.push('_');
            }
            out.fn_table
                .insert(label.clone(), LocalFn::identity(g.alphabet.len()));
            label
        }
    };
    let mut next_id = out.nodes.iter().map(|n| n.id).max().unwrap_or(0) + 1;
    for (j, o, d) in needs {
        let mut prev = o;
        for _ in d..target {
            out.nodes.push(Node {
                id: next_id,
                kind: NodeKind::Func {
                    label: id_label.clone(),
                },
                preds: vec![prev],
            });
            prev = next_id;
            next_id += 1;
        }
        out.outputs[j] = prev;
    }
    Ok(out)
}

/// Loops needed: the depth of the graph, which strict layered expansion
/// preserves.
pub fn loop_count(g: &CompGraph) -> Result<u64, CompileError> {
    Ok(graph::layerize(g)?.depth() as u64)
}

pub fn circuit_loop_count(c: &ThresholdCircuit) -> u64 {
    c.depth() as u64
}

// ---------------------------------------------------------------------------
// graph -> looped program

/// Per-block slot offsets and the per-layer slot assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopLayout {
    pub sigma: usize,
    pub num_labels: usize,
    pub fan_in: usize,
    pub width_const: usize,
    pub positions: usize,
    pub index_bits: u32,
    pub block_dim: usize,
    pub embed_dim: usize,
    pub off_value: usize,
    pub off_label: usize,
    pub off_sbin: usize,
    pub off_pred: usize,
    pub off_sel: usize,
    pub off_scratch: usize,
    pub labels: Vec<String>,
    /// assignment[layer][slot] = node carried by that slot, if any.
    pub assignment: Vec<Vec<Option<NodeId>>>,
    pub loops: u64,
}

impl LoopLayout {
    pub fn block_base(&self, w: usize) -> usize {
        w * self.block_dim
    }
}

#[derive(Debug, Clone)]
pub struct CompiledLoop {
    pub program: TransformerProgram,
    pub layout: LoopLayout,
    /// The normalized graph the program actually simulates (constants
    /// folded, outputs extended, strictly layered); audits read node values
    /// from here.
    pub sim_graph: CompGraph,
    pub loops: u64,
}


/// The graph a looped program actually simulates: constants folded, strictly
/// layered, outputs extended to the final layer.
fn normalize_for_loops(g: &CompGraph, depth_target: usize) -> Result<CompGraph, CompileError> {
    let folded = fold_constants(g)?;
    let expanded = graph::strict_layered_expansion(&folded)?;
    let sim = extend_outputs_to_depth(&expanded, depth_target)?;
    sim.checked()?;
    Ok(sim)
}

/// Width constant from the simulated graph's layer widths: W = 1 needs no
/// reserved slots; W >= 2 at two or more positions keeps one empty slot per
/// block on every source layer (the attention sink); a single position
/// switches to the feedforward fetch path, which needs no sinks.
fn width_constant(widths: &[usize], n: usize) -> usize {
    let depth = widths.len().saturating_sub(1);
    let mid_max = widths
        .iter()
        .take(depth.max(1))
        .skip(1)
        .copied()
        .max()
        .unwrap_or(0);
    let final_w = widths.last().copied().unwrap_or(0);
    if mid_max <= n && final_w <= n {
        1
    } else if n == 1 {
        mid_max.max(final_w)
    } else {
        let need_mid = mid_max.div_ceil(n - 1);
        let need_final = final_w.div_ceil(n);
        need_mid.max(need_final).max(2)
    }
}

/// The width constant a looped compilation of `g` would use; lets corpus
/// generators keep graphs inside a target regime without compiling.
pub fn width_requirement(g: &CompGraph) -> Result<usize, CompileError> {
    g.checked()?;
    let depth_target = graph::layerize(g)?.depth();
    let sim = normalize_for_loops(g, depth_target)?;
    let ld = graph::layerize(&sim)?;
    let widths: Vec<usize> = ld.layers.iter().map(|l| l.len()).collect();
    Ok(width_constant(&widths, g.num_inputs()))
}

pub fn compile_looped(g: &CompGraph, opts: &CompileOptions) -> Result<CompiledLoop, CompileError> {
    let diags = g.validate_with(&opts.limits);
    if !diags.is_empty() {
        return Err(graph::GraphError::Invalid(diags).into());
    }
    if g.num_inputs() == 0 {
        return Err(CompileError::NoInputs);
    }
    let consts = constant_values(g)?;
    for o in &g.outputs {
        if consts.contains_key(o) {
            return Err(CompileError::ConstantOutput { node: *o });
        }
    }
    let n = g.num_inputs();
    let m_out = g.outputs.len();
    if m_out > n {
        return Err(CompileError::TooManyOutputs {
            outputs: m_out,
            positions: n,
        });
    }
    let depth_target = graph::layerize(g)?.depth();

    // depth-0 graphs decode raw embeddings; outputs must be the trailing
    // inputs in order
    if depth_target == 0 {
        let inputs = g.input_ids();
        if g.outputs != inputs[n - m_out..] {
            return Err(CompileError::Depth0OutputsMisaligned { m: m_out });
        }
    }

    let sim = normalize_for_loops(g, depth_target)?;
    let fan_in = sim.max_fan_in();
    if fan_in > opts.max_fan_in {
        return Err(CompileError::FanInExceeded {
            got: fan_in,
            bound: opts.max_fan_in,
        });
    }
    let c = fan_in.max(1);
    let ld = graph::layerize(&sim)?;
    let depth = ld.depth();
    debug_assert_eq!(depth, depth_target);
    let widths: Vec<usize> = ld.layers.iter().map(|l| l.len()).collect();
    let w_const = width_constant(&widths, n);
    if w_const > opts.max_width_const {
        return Err(CompileError::WidthViolation {
            width: widths.iter().skip(1).copied().max().unwrap_or(0),
            needed: w_const,
            bound: opts.max_width_const,
            positions: n,
        });
    }
    // a single position cannot address peer blocks through attention keys,
    // so predecessor fetch moves into the feedforward layers via selector
    // bits and the ReLU product gadget
    let ff_fetch = w_const >= 2 && n == 1;
    let space = graph::parallel_space(&sim)?;
    assert!(space <= w_const * n, "parallel space exceeds W*n");

    // ---- slot assignment: slot = pos * W + w, 1-based index slot + 1
    let slots = n * w_const;
    let slot_of_pos_block = |pos: usize, w: usize| pos * w_const + w;
    let mut assignment: Vec<Vec<Option<NodeId>>> = vec![vec![None; slots]; depth + 1];
    let by_id: BTreeMap<NodeId, &Node> = sim.nodes.iter().map(|n| (n.id, n)).collect();
    // layer 0: inputs at block 0, position order
    let inputs = sim.input_ids();
    debug_assert_eq!(inputs.len(), n);
    for (i, id) in inputs.iter().enumerate() {
        assignment[0][slot_of_pos_block(i, 0)] = Some(*id);
    }
    // final layer: outputs pinned to block 0 of the trailing positions
    let out_set: BTreeMap<NodeId, usize> = sim
        .outputs
        .iter()
        .enumerate()
        .map(|(j, o)| (*o, j))
        .collect();
    if depth > 0 {
        for (o, j) in &out_set {
            assignment[depth][slot_of_pos_block(n - m_out + j, 0)] = Some(*o);
        }
        let mut free: Vec<usize> = (0..slots)
            .filter(|s| assignment[depth][*s].is_none())
            .collect();
        free.reverse();
        for id in &ld.layers[depth] {
            if out_set.contains_key(id) {
                continue;
            }
            assignment[depth][free.pop().expect("capacity checked")] = Some(*id);
        }
    }
    // middle layers: fill in (block, position) order, node ids ascending,
    // keeping position n-1 empty per block when attention sinks are needed
    for t in 1..depth {
        let usable_pos = if w_const >= 2 && !ff_fetch { n - 1 } else { n };
        let mut free: Vec<usize> = Vec::new();
        for w in 0..w_const {
            for pos in 0..usable_pos {
                free.push(slot_of_pos_block(pos, w));
            }
        }
        free.reverse();
        for id in &ld.layers[t] {
            assignment[t][free.pop().expect("capacity checked")] = Some(*id);
        }
    }
    let slot_at: Vec<BTreeMap<NodeId, usize>> = assignment
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter_map(|(s, id)| id.map(|id| (id, s)))
                .collect()
        })
        .collect();
    // attention sink per source block: the reserved empty slot at position n-1
    let sink_slot = |w: usize| slot_of_pos_block(n - 1, w);

    // ---- layout
    let sigma = sim.alphabet.len();
    let mut labels: Vec<String> = sim
        .nodes
        .iter()
        .filter_map(|n| match &n.kind {
            NodeKind::Func { label } => Some(label.clone()),
            NodeKind::Input => None,
        })
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    labels.push("__keep".to_string());
    let num_labels = labels.len();
    let label_index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let keep = num_labels - 1;
    let p = ceil_log2(slots as u64 + 1).max(1);
    let pw = p as usize;
    let fmt = index_format(p)?;
    let off_value = 0usize;
    let off_label = sigma;
    let off_sbin = off_label + num_labels;
    let off_pred = off_sbin + pw;
    // block-selector bits, used only by the feedforward fetch path
    let off_sel = off_pred + c * w_const * pw;
    let off_scratch = off_sel + c * w_const;
    let block_dim = off_scratch + c * sigma;
    let m = w_const * block_dim;
    let base = |w: usize| w * block_dim;
    let key_scale: i64 = 1 << (p + 1);

    // word embeddings: value one-hot in block 0
    let mut word_embed = Vec::with_capacity(sigma);
    for a in 0..sigma {
        let mut v = FxVector::zeros(m, fmt);
        v.set(off_value + a, FxScalar::one(fmt));
        word_embed.push(v);
    }

    // positional rows: deltas taking the residual stream from the content
    // seen at loop t-1 to the content needed at loop t
    let sbin_into = |v: &mut FxVector, at: usize, index: u64| -> Result<(), CompileError> {
        for (l, &b) in sbin(index, p)?.bits.iter().enumerate() {
            v.set(at + l, FxScalar::from_int(b as i64, fmt)?);
        }
        Ok(())
    };
    // content[t] = labels + own sbin + pred fields describing layer t+1
    let mut contents: Vec<FxVector> = vec![FxVector::zeros(m, fmt); n];
    let mut rows: Vec<Vec<FxVector>> = Vec::with_capacity(depth);
    for t in 0..depth {
        let mut new_contents: Vec<FxVector> = Vec::with_capacity(n);
        for pos in 0..n {
            let mut v = FxVector::zeros(m, fmt);
            for w in 0..w_const {
                let slot = slot_of_pos_block(pos, w);
                sbin_into(&mut v, base(w) + off_sbin, slot as u64 + 1)?;
                let target = assignment[t + 1][slot];
                let (lbl, preds): (usize, Vec<NodeId>) = match target {
                    Some(id) => match &by_id[&id].kind {
                        NodeKind::Func { label } => {
                            (label_index[label.as_str()], by_id[&id].preds.clone())
                        }
                        NodeKind::Input => unreachable!("inputs live at layer 0 only"),
                    },
                    None => (keep, vec![]),
                };
                v.set(base(w) + off_label + lbl, FxScalar::one(fmt));
                for slot_c in 0..c {
                    let pred_slot = preds.get(slot_c).map(|pid| slot_at[t][pid]);
                    if ff_fetch {
                        if let Some(s) = pred_slot {
                            v.set(
                                base(w) + off_sel + slot_c * w_const + s % w_const,
                                FxScalar::one(fmt),
                            );
                        }
                        continue;
                    }
                    for wp in 0..w_const {
                        let at = base(w) + off_pred + (slot_c * w_const + wp) * pw;
                        let index = match pred_slot {
                            Some(s) if s % w_const == wp => s as u64 + 1,
                            _ => sink_slot(wp) as u64 + 1,
                        };
                        sbin_into(&mut v, at, index)?;
                    }
                }
            }
            new_contents.push(v);
        }
        let mut row = Vec::with_capacity(n);
        for pos in 0..n {
            let mut delta = FxVector::zeros(m, fmt);
            for i in 0..m {
                delta.set_raw(i, new_contents[pos].raw_at(i) - contents[pos].raw_at(i))?;
            }
            row.push(delta);
        }
        rows.push(row);
        contents = new_contents;
    }
    if rows.is_empty() {
        rows.push(vec![FxVector::zeros(m, fmt); n]);
    }

    // ---- layer 1 attention: heads (dst block, pred slot, src block)
    let head_dim = (2 * pw).max(sigma);
    let head_range = if ff_fetch { 0 } else { w_const };
    let mut heads = Vec::with_capacity(head_range * c * w_const);
    for w in 0..head_range {
        for slot_c in 0..c {
            for wp in 0..w_const {
                let mut q = FxMatrix::zeros(head_dim, m, fmt);
                let mut k = FxMatrix::zeros(head_dim, m, fmt);
                let mut v = FxMatrix::zeros(head_dim, m, fmt);
                let pred_off = base(w) + off_pred + (slot_c * w_const + wp) * pw;
                for l in 0..pw {
                    q.set_int(2 * l, pred_off + l, 1)?;
                    k.set_int(2 * l, base(wp) + off_sbin + l, key_scale)?;
                    for e in 0..num_labels {
                        // constant tracks from the label one-hot, which sums
                        // to 1 in every block including empty ones
                        q.set_int(2 * l + 1, base(w) + off_label + e, 1)?;
                        k.set_int(2 * l + 1, base(wp) + off_label + e, -key_scale)?;
                    }
                }
                for a in 0..sigma {
                    v.set_int(a, base(wp) + off_value + a, 1)?;
                }
                heads.push(Head { q, k, v });
            }
        }
    }
    let mut head_merge = FxMatrix::zeros(m, heads.len() * head_dim, fmt);
    for w in 0..head_range {
        for slot_c in 0..c {
            for wp in 0..w_const {
                let h = (w * c + slot_c) * w_const + wp;
                for a in 0..sigma {
                    head_merge.set_int(
                        base(w) + off_scratch + slot_c * sigma + a,
                        h * head_dim + a,
                        1,
                    )?;
                }
            }
        }
    }

    // ---- layer 1 feedforward: per-block table evaluation with delta writes
    let one = fmt.scale();
    let table_units = |fb: &mut FfBuilder, w: usize, f: &LocalFn, lbl_col: Option<usize>| {
        let patterns = sigma.pow(f.arity as u32);
        for unit in 0..patterns {
            let mut rest = unit;
            let mut pattern = vec![0usize; f.arity];
            for i in (0..f.arity).rev() {
                pattern[i] = rest % sigma;
                rest /= sigma;
            }
            let mut taps: Vec<(usize, i128)> = pattern
                .iter()
                .enumerate()
                .map(|(i, &s)| (base(w) + off_scratch + i * sigma + s, one))
                .collect();
            let mut bias = -((f.arity as i128 - 1) * one);
            if let Some(col) = lbl_col {
                taps.push((col, one));
                bias -= one;
            }
            fb.unit(
                taps,
                bias,
                vec![(base(w) + off_value + f.table[unit], one)],
            );
        }
    };
    let ff1 = if ff_fetch {
        // single-position fetch: scratch(w,c) <- sum over source blocks of
        // ReLU(val(w')[s] + sel(w,c,w') - 1), the exact product of the value
        // bit and the selector bit
        let mut fb = FfBuilder::new(m, fmt);
        for w in 0..w_const {
            for slot_c in 0..c {
                for wp in 0..w_const {
                    for a in 0..sigma {
                        fb.unit(
                            vec![
                                (base(wp) + off_value + a, one),
                                (base(w) + off_sel + slot_c * w_const + wp, one),
                            ],
                            -one,
                            vec![(base(w) + off_scratch + slot_c * sigma + a, one)],
                        );
                    }
                }
            }
            for s in 0..c * sigma {
                fb.clear_slot(base(w) + off_scratch + s);
            }
        }
        FeedForward::Standard(fb.build()?)
    } else if w_const == 1 {
        // one expert per function label plus the keep expert
        let mut gate = FxMatrix::zeros(num_labels, m, fmt);
        for e in 0..num_labels {
            gate.set_int(e, off_label + e, 1)?;
        }
        let mut experts = Vec::with_capacity(num_labels);
        for label in labels.iter().take(num_labels - 1) {
            let mut fb = FfBuilder::new(m, fmt);
            table_units(&mut fb, 0, &sim.fn_table[label], None);
            for a in 0..sigma {
                fb.clear_slot(off_value + a);
            }
            for s in 0..c * sigma {
                fb.clear_slot(off_scratch + s);
            }
            experts.push(fb.build()?);
        }
        // keep: clear value and scratch; a slot with no node must read as
        // exact zero so it can serve as an attention sink
        let mut fb = FfBuilder::new(m, fmt);
        for a in 0..sigma {
            fb.clear_slot(off_value + a);
        }
        for s in 0..c * sigma {
            fb.clear_slot(off_scratch + s);
        }
        experts.push(fb.build()?);
        FeedForward::Moe { gate, experts }
    } else {
        // label-gated units: one bank per (block, function); value clears
        // are suppressed on keep-labeled blocks
        let mut fb = FfBuilder::new(m, fmt);
        for w in 0..w_const {
            for (e, label) in labels.iter().enumerate().take(num_labels - 1) {
                table_units(&mut fb, w, &sim.fn_table[label], Some(base(w) + off_label + e));
            }
            for a in 0..sigma {
                fb.clear_slot(base(w) + off_value + a);
            }
            for s in 0..c * sigma {
                fb.clear_slot(base(w) + off_scratch + s);
            }
        }
        FeedForward::Standard(fb.build()?)
    };
    let layer1 = Layer {
        heads,
        head_merge,
        ff: ff1,
    };

    // ---- layer 2: attention disabled. Normally commits values to exact
    // one-hots via delta = (1/delta) * ReLU(val - (1-delta)) - ReLU(val) with
    // delta = 1/4; on the single-position fetch path it instead runs the
    // label-gated table banks over the scratch the first layer just selected.
    let mut fb = FfBuilder::new(m, fmt);
    if ff_fetch {
        for w in 0..w_const {
            for (e, label) in labels.iter().enumerate().take(num_labels - 1) {
                table_units(&mut fb, w, &sim.fn_table[label], Some(base(w) + off_label + e));
            }
            for a in 0..sigma {
                fb.clear_slot(base(w) + off_value + a);
            }
        }
    } else {
        let three_quarters = one - (one >> 2);
        for w in 0..w_const {
            for a in 0..sigma {
                let col = base(w) + off_value + a;
                fb.unit(vec![(col, one)], -three_quarters, vec![(col, 4 * one)]);
                fb.clear_slot(col);
            }
        }
    }
    let layer2 = Layer {
        heads: vec![],
        head_merge: FxMatrix::zeros(m, 0, fmt),
        ff: FeedForward::Standard(fb.build()?),
    };

    let mut output_proj = FxMatrix::zeros(sigma, m, fmt);
    for a in 0..sigma {
        output_proj.set_int(a, off_value + a, 1)?;
    }

    let program = TransformerProgram {
        format_version: PROGRAM_FORMAT_VERSION,
        fmt,
        embed_dim: m,
        vocab: sim.alphabet.clone(),
        word_embed,
        pos_table: PosTable { rows },
        layers: vec![layer1, layer2],
        mask: Mask::Full,
        mode: Mode::Looped,
        output_proj,
        declared_budget: depth as u64,
        output_len: m_out,
    };
    program.validate()?;
    Ok(CompiledLoop {
        program,
        layout: LoopLayout {
            sigma,
            num_labels,
            fan_in: c,
            width_const: w_const,
            positions: n,
            index_bits: p,
            block_dim,
            embed_dim: m,
            off_value,
            off_label,
            off_sbin,
            off_pred,
            off_sel,
            off_scratch,
            labels,
            assignment,
            loops: depth as u64,
        },
        sim_graph: sim,
        loops: depth as u64,
    })
}

fn index_format(p: u32) -> Result<FxFormat, CompileError> {
    let integer_bits = p + 4 + ceil_log2(p.max(1) as u64);
    Ok(FxFormat::new(integer_bits, p.max(2))?)
}

// ---------------------------------------------------------------------------
// verification

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopMismatch {
    pub input: Vec<SymbolId>,
    pub expected: Vec<SymbolId>,
    pub got: Vec<SymbolId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopReport {
    pub pass: bool,
    pub mismatches: Vec<LoopMismatch>,
    pub loops: u64,
    pub size: usize,
    pub depth: u64,
    /// First loop whose committed layer values diverged from the oracle, if
    /// any: (input index, loop, node).
    pub first_divergence: Option<(usize, u64, NodeId)>,
    pub inputs_checked: usize,
}

/// Compare against the graph evaluator and audit the layer-synchrony
/// invariant: after loop t, each slot owning a depth-t node holds the exact
/// one-hot of its oracle value.
pub fn verify_looped(
    g: &CompGraph,
    compiled: &CompiledLoop,
    inputs: &[Vec<SymbolId>],
) -> Result<LoopReport, CompileError> {
    let mut mismatches = Vec::new();
    let mut first_divergence = None;
    let lay = &compiled.layout;
    for (xi, x) in inputs.iter().enumerate() {
        let expected = graph::evaluate(g, x)?;
        let (got, trace) = run_looped(&compiled.program, x, compiled.loops)?;
        if got != expected {
            mismatches.push(LoopMismatch {
                input: x.clone(),
                expected,
                got,
            });
        }
        let oracle = graph::evaluate_all(&compiled.sim_graph, x)?;
        if let Trace::Looped { snapshots } = &trace {
            'audit: for (k, snap) in snapshots.iter().enumerate() {
                let layer = k + 1;
                for (slot, owner) in lay.assignment[layer].iter().enumerate() {
                    let Some(node) = owner else { continue };
                    let pos = slot / lay.width_const;
                    let w = slot % lay.width_const;
                    let at = lay.block_base(w) + lay.off_value;
                    let want = oracle[node];
                    let ok = (0..lay.sigma).all(|a| {
                        let raw = snap[pos].raw_at(at + a);
                        raw == if a == want { compiled.program.fmt.scale() } else { 0 }
                    });
                    if !ok && first_divergence.is_none() {
                        first_divergence = Some((xi, layer as u64, *node));
                        break 'audit;
                    }
                }
            }
        }
    }
    Ok(LoopReport {
        pass: mismatches.is_empty() && first_divergence.is_none(),
        mismatches,
        loops: compiled.loops,
        size: g.num_nodes(),
        depth: loop_count(g)?,
        first_divergence,
        inputs_checked: inputs.len(),
    })
}

// ---------------------------------------------------------------------------
// threshold circuit -> 3-layer looped program

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitLayout {
    pub positions: usize,
    pub node_count: usize,
    pub embed_dim: usize,
    pub off_x: usize,
    pub off_pos_onehot: usize,
    pub off_gathered: usize,
    pub off_pairs: usize,
    /// node index (0-based over inputs then gates by id) of each gate id
    pub node_index: BTreeMap<u32, usize>,
    pub loops: u64,
}

#[derive(Debug, Clone)]
pub struct CompiledCircuit {
    pub program: TransformerProgram,
    pub layout: CircuitLayout,
    pub loops: u64,
}

pub fn compile_circuit_looped(
    circuit: &ThresholdCircuit,
    precision: PrecisionClass,
    _opts: &CompileOptions,
) -> Result<CompiledCircuit, CompileError> {
    circuit
        .checked()
        .map_err(|e| CompileError::Circuit(e.to_string()))?;
    if precision == PrecisionClass::ConstantBit {
        if let Some(g) = circuit
            .gates
            .iter()
            .find(|g| matches!(g.kind, GateKind::Maj | GateKind::Threshold))
        {
            return Err(CompileError::Circuit(format!(
                "gate {} needs log precision; constant-bit mode allows AND/OR/NOT only",
                g.id
            )));
        }
    }
    let n = circuit.inputs;
    let depth = circuit.depth();
    if depth == 0 {
        return Err(CompileError::Circuit(
            "output gate is an input; nothing to loop".to_string(),
        ));
    }
    let mut gate_ids: Vec<u32> = circuit.gates.iter().map(|g| g.id).collect();
    gate_ids.sort_unstable();
    let node_count = n + gate_ids.len();
    let node_index: BTreeMap<u32, usize> = (1..=n as u32)
        .map(|i| (i, i as usize - 1))
        .chain(gate_ids.iter().enumerate().map(|(j, id)| (*id, n + j)))
        .collect();

    let integer_bits = ceil_log2(node_count.max(n) as u64 + 1) + 3;
    let fmt = FxFormat::new(integer_bits, 2)?;
    let one = fmt.scale();

    let off_x = 0usize;
    let off_pos_onehot = 1usize;
    let off_gathered = 1 + n;
    let off_pairs = 1 + 2 * n;
    let pair_val = |i: usize| off_pairs + 2 * i;
    let pair_one = |i: usize| off_pairs + 2 * i + 1;
    let m = 1 + 2 * n + 2 * node_count;

    // word embeddings over {0,1}: the token value in the x slot
    let mut word_embed = Vec::with_capacity(2);
    for a in 0..2i64 {
        let mut v = FxVector::zeros(m, fmt);
        v.set(off_x, FxScalar::from_int(a, fmt)?);
        word_embed.push(v);
    }
    // positional rows: the position one-hot lands once, at loop 0
    let mut rows = vec![vec![FxVector::zeros(m, fmt); n]; depth];
    for (pos, row) in rows[0].iter_mut().enumerate() {
        row.set(off_pos_onehot + pos, FxScalar::one(fmt));
    }

    // layer 1: no attention; gathered_l <- ReLU(x + e_l - 1)
    let mut fb = FfBuilder::new(m, fmt);
    for l in 0..n {
        fb.unit(
            vec![(off_x, one), (off_pos_onehot + l, one)],
            -one,
            vec![(off_gathered + l, one)],
        );
        fb.clear_slot(off_gathered + l);
    }
    let layer1 = Layer {
        heads: vec![],
        head_merge: FxMatrix::zeros(m, 0, fmt),
        ff: FeedForward::Standard(fb.build()?),
    };

    // layer 2: one uniform head copies every input value (and a constant 1)
    // into the input pair slots at every position; delta-writes keep the
    // re-run idempotent
    let head_dim = (2 * n).max(n);
    let mut q = FxMatrix::zeros(head_dim, m, fmt);
    let mut k = FxMatrix::zeros(head_dim, m, fmt);
    let mut v = FxMatrix::zeros(head_dim, m, fmt);
    for r in 0..n {
        for j in 0..n {
            q.set_int(r, off_pos_onehot + j, 1)?;
            k.set_int(r, off_pos_onehot + j, 1)?;
        }
    }
    for l in 0..n {
        v.set_int(2 * l, off_gathered + l, n as i64)?;
        v.set_int(2 * l, pair_val(l), -1)?;
        for j in 0..n {
            v.set_int(2 * l + 1, off_pos_onehot + j, 1)?;
        }
        v.set_int(2 * l + 1, pair_one(l), -1)?;
    }
    let mut head_merge = FxMatrix::zeros(m, head_dim, fmt);
    for l in 0..n {
        head_merge.set_int(pair_val(l), 2 * l, 1)?;
        head_merge.set_int(pair_one(l), 2 * l + 1, 1)?;
    }
    let layer2 = Layer {
        heads: vec![Head { q, k, v }],
        head_merge,
        ff: FeedForward::Standard(FfBuilder::new(m, fmt).build()?),
    };

    // layer 3: the gate bank, built from the gate library and spliced onto
    // the pair slots; every gate updates in parallel each loop
    let mut fb = FfBuilder::new(m, fmt);
    for gid in &gate_ids {
        let gate = circuit.gates.iter().find(|g| g.id == *gid).unwrap();
        let d = gate.preds.len();
        let ff = match gate.kind {
            GateKind::And => gates::ff_and(d, fmt),
            GateKind::Or => gates::ff_or(d, fmt),
            GateKind::Not => gates::ff_not(fmt),
            GateKind::Maj => gates::ff_majority(d, fmt),
            GateKind::Threshold => gates::ff_threshold(d, gate.k, fmt),
        };
        let idx = node_index[gid];
        // column 2l of the gate net reads pred l's value, column 2l+1 its
        // constant-one slot
        let col_of = |col: usize| {
            let pred = node_index[&gate.preds[col / 2]];
            if col % 2 == 0 {
                pair_val(pred)
            } else {
                pair_one(pred)
            }
        };
        for u in 0..ff.hidden_dim() {
            let taps: Vec<(usize, i128)> = (0..ff.input_dim())
                .filter_map(|col| {
                    let w = ff.w1.raw_at(u, col);
                    (w != 0).then(|| (col_of(col), w))
                })
                .collect();
            let out = vec![(pair_val(idx), ff.w2.raw_at(0, u))];
            fb.unit(taps, ff.b1.raw_at(u), out);
        }
        fb.clear_slot(pair_val(idx));
        // set the gate's constant-one slot
        fb.unit(vec![], one, vec![(pair_one(idx), one)]);
        fb.clear_slot(pair_one(idx));
    }
    let layer3 = Layer {
        heads: vec![],
        head_merge: FxMatrix::zeros(m, 0, fmt),
        ff: FeedForward::Standard(fb.build()?),
    };

    let out_idx = node_index[&circuit.output];
    let mut output_proj = FxMatrix::zeros(2, m, fmt);
    for j in 0..n {
        output_proj.set_int(0, off_pos_onehot + j, 1)?;
    }
    output_proj.set_int(0, pair_val(out_idx), -1)?;
    output_proj.set_int(1, pair_val(out_idx), 1)?;

    let program = TransformerProgram {
        format_version: PROGRAM_FORMAT_VERSION,
        fmt,
        embed_dim: m,
        vocab: vec!["0".into(), "1".into()],
        word_embed,
        pos_table: PosTable { rows },
        layers: vec![layer1, layer2, layer3],
        mask: Mask::Full,
        mode: Mode::Looped,
        output_proj,
        declared_budget: depth as u64,
        output_len: 1,
    };
    program.validate()?;
    Ok(CompiledCircuit {
        program,
        layout: CircuitLayout {
            positions: n,
            node_count,
            embed_dim: m,
            off_x,
            off_pos_onehot,
            off_gathered,
            off_pairs,
            node_index,
            loops: depth as u64,
        },
        loops: depth as u64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitReport {
    pub pass: bool,
    pub mismatches: Vec<(Vec<bool>, bool, bool)>,
    pub loops: u64,
    pub size: usize,
    pub depth: u64,
    pub inputs_checked: usize,
}

/// Compare the compiled program against direct circuit evaluation.
pub fn verify_circuit_looped(
    circuit: &ThresholdCircuit,
    compiled: &CompiledCircuit,
    inputs: &[Vec<bool>],
) -> Result<CircuitReport, CompileError> {
    let mut mismatches = Vec::new();
    for x in inputs {
        let expected = circuit
            .evaluate(x)
            .map_err(|e| CompileError::Circuit(e.to_string()))?;
        let tokens: Vec<usize> = x.iter().map(|&b| b as usize).collect();
        let (ans, _) = run_looped(&compiled.program, &tokens, compiled.loops)?;
        let got = ans[0] == 1;
        if got != expected {
            mismatches.push((x.clone(), expected, got));
        }
    }
    Ok(CircuitReport {
        pass: mismatches.is_empty(),
        mismatches,
        loops: compiled.loops,
        size: circuit.inputs + circuit.gates.len(),
        depth: circuit.depth() as u64,
        inputs_checked: inputs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::Gate;
    use crate::graph::testutil::{diamond, xor_chain};

    fn opts() -> CompileOptions {
        CompileOptions::default()
    }

    #[test]
    fn diamond_two_loops() {
        let g = diamond();
        let compiled = compile_looped(&g, &opts()).unwrap();
        assert_eq!(compiled.loops, 2);
        for x in [[0usize], [1usize]] {
            let (ans, _) = run_looped(&compiled.program, &x, 2).unwrap();
            assert_eq!(ans, graph::evaluate(&g, &x).unwrap(), "input {x:?}");
        }
        let report = verify_looped(&g, &compiled, &[vec![0], vec![1]]).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn xor_chain_loops_equal_depth() {
        let g = xor_chain();
        let compiled = compile_looped(&g, &opts()).unwrap();
        assert_eq!(compiled.loops, loop_count(&g).unwrap());
        let inputs: Vec<Vec<usize>> = (0..8usize)
            .map(|w| (0..3).map(|i| (w >> i) & 1).collect())
            .collect();
        let report = verify_looped(&g, &compiled, &inputs).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.loops, 3);
    }

    #[test]
    fn depth_zero_graph_aligned_outputs() {
        let g = CompGraph {
            alphabet: vec!["0".into(), "1".into()],
            fn_table: BTreeMap::new(),
            nodes: vec![
                Node { id: 0, kind: NodeKind::Input, preds: vec![] },
                Node { id: 1, kind: NodeKind::Input, preds: vec![] },
            ],
            outputs: vec![0, 1],
        };
        let compiled = compile_looped(&g, &opts()).unwrap();
        assert_eq!(compiled.loops, 0);
        let (ans, _) = run_looped(&compiled.program, &[1, 0], 0).unwrap();
        assert_eq!(ans, vec![1, 0]);
    }

    #[test]
    fn depth_zero_misaligned_rejected() {
        let g = CompGraph {
            alphabet: vec!["0".into(), "1".into()],
            fn_table: BTreeMap::new(),
            nodes: vec![
                Node { id: 0, kind: NodeKind::Input, preds: vec![] },
                Node { id: 1, kind: NodeKind::Input, preds: vec![] },
            ],
            outputs: vec![0],
        };
        assert!(matches!(
            compile_looped(&g, &opts()),
            Err(CompileError::Depth0OutputsMisaligned { .. })
        ));
    }

    #[test]
    fn constant_nodes_fold_away() {
        // c = const 1; out = xor(x, c) behaves as not(x)
        let mut fn_table = BTreeMap::new();
        fn_table.insert("one".to_string(), LocalFn { arity: 0, table: vec![1] });
        fn_table.insert("xor".to_string(), LocalFn { arity: 2, table: vec![0, 1, 1, 0] });
        let g = CompGraph {
            alphabet: vec!["0".into(), "1".into()],
            fn_table,
            nodes: vec![
                Node { id: 0, kind: NodeKind::Input, preds: vec![] },
                Node { id: 1, kind: NodeKind::Func { label: "one".into() }, preds: vec![] },
                Node { id: 2, kind: NodeKind::Func { label: "xor".into() }, preds: vec![0, 1] },
            ],
            outputs: vec![2],
        };
        g.checked().unwrap();
        let compiled = compile_looped(&g, &opts()).unwrap();
        for x in [[0usize], [1usize]] {
            let (ans, _) = run_looped(&compiled.program, &x, compiled.loops).unwrap();
            assert_eq!(ans, vec![1 - x[0]]);
        }
    }

    #[test]
    fn corrupted_positional_table_caught_by_audit() {
        let g = xor_chain();
        let mut compiled = compile_looped(&g, &opts()).unwrap();
        // corrupt the second loop's positional row
        let row = &mut compiled.program.pos_table.rows[1][0];
        let cur = row.raw_at(compiled.layout.off_label);
        row.set_raw(compiled.layout.off_label, cur + compiled.program.fmt.scale())
            .unwrap();
        let report = verify_looped(&g, &compiled, &[vec![1, 1, 1]]).unwrap();
        assert!(!report.pass);
        assert!(report.first_divergence.is_some());
        let (_, at_loop, _) = report.first_divergence.unwrap();
        assert_eq!(at_loop, 2);
    }

    #[test]
    fn wide_layer_forces_multiple_blocks() {
        // three inputs feeding a width-5 middle layer: W = 3 with the
        // cross-block attention heads and per-block sinks in play
        let mut fn_table = BTreeMap::new();
        fn_table.insert("not".to_string(), LocalFn { arity: 1, table: vec![1, 0] });
        fn_table.insert("xor".to_string(), LocalFn { arity: 2, table: vec![0, 1, 1, 0] });
        fn_table.insert(
            "maj".to_string(),
            LocalFn { arity: 3, table: vec![0, 0, 0, 1, 0, 1, 1, 1] },
        );
        let mut nodes = vec![
            Node { id: 0, kind: NodeKind::Input, preds: vec![] },
            Node { id: 1, kind: NodeKind::Input, preds: vec![] },
            Node { id: 2, kind: NodeKind::Input, preds: vec![] },
        ];
        for (i, preds) in [
            vec![0, 1],
            vec![1, 2],
            vec![0, 2],
            vec![2, 0],
            vec![1, 0],
        ]
        .into_iter()
        .enumerate()
        {
            nodes.push(Node {
                id: 10 + i as NodeId,
                kind: NodeKind::Func { label: "xor".into() },
                preds,
            });
        }
        nodes.push(Node {
            id: 20,
            kind: NodeKind::Func { label: "maj".into() },
            preds: vec![10, 11, 12],
        });
        nodes.push(Node {
            id: 21,
            kind: NodeKind::Func { label: "xor".into() },
            preds: vec![13, 14],
        });
        nodes.push(Node {
            id: 22,
            kind: NodeKind::Func { label: "xor".into() },
            preds: vec![20, 21],
        });
        let g = CompGraph {
            alphabet: vec!["0".into(), "1".into()],
            fn_table,
            nodes,
            outputs: vec![22],
        };
        g.checked().unwrap();
        let compiled = compile_looped(&g, &opts()).unwrap();
        assert!(compiled.layout.width_const >= 2, "W = {}", compiled.layout.width_const);
        let inputs: Vec<Vec<usize>> = (0..8usize)
            .map(|w| (0..3).map(|i| (w >> i) & 1).collect())
            .collect();
        let report = verify_looped(&g, &compiled, &inputs).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.loops, loop_count(&g).unwrap());
    }

    #[test]
    fn single_and_gate_circuit_exhaustive() {
        let c = ThresholdCircuit {
            inputs: 3,
            gates: vec![Gate { id: 4, kind: GateKind::And, k: 0, preds: vec![1, 2, 3] }],
            output: 4,
        };
        let compiled =
            compile_circuit_looped(&c, PrecisionClass::ConstantBit, &opts()).unwrap();
        assert_eq!(compiled.loops, 1);
        let inputs: Vec<Vec<bool>> = (0..8u32)
            .map(|w| (0..3).map(|i| (w >> i) & 1 == 1).collect())
            .collect();
        let report = verify_circuit_looped(&c, &compiled, &inputs).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn not_chain_circuit_parity() {
        let mut gates_v = Vec::new();
        let mut prev = 1u32;
        for i in 0..4u32 {
            gates_v.push(Gate { id: 2 + i, kind: GateKind::Not, k: 0, preds: vec![prev] });
            prev = 2 + i;
        }
        let c = ThresholdCircuit { inputs: 1, gates: gates_v, output: prev };
        let compiled =
            compile_circuit_looped(&c, PrecisionClass::ConstantBit, &opts()).unwrap();
        assert_eq!(compiled.loops, 4);
        let report =
            verify_circuit_looped(&c, &compiled, &[vec![false], vec![true]]).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn majority_rejected_in_constant_bit_mode() {
        let c = ThresholdCircuit {
            inputs: 3,
            gates: vec![Gate { id: 4, kind: GateKind::Maj, k: 0, preds: vec![1, 2, 3] }],
            output: 4,
        };
        assert!(matches!(
            compile_circuit_looped(&c, PrecisionClass::ConstantBit, &opts()),
            Err(CompileError::Circuit(_))
        ));
        assert!(compile_circuit_looped(&c, PrecisionClass::LogBit, &opts()).is_ok());
    }

    #[test]
    fn mixed_depth3_circuit_exhaustive() {
        // (1 AND 2) OR (NOT 3), MAJ over three copies at depth 2, output NOT at 3
        let c = ThresholdCircuit {
            inputs: 3,
            gates: vec![
                Gate { id: 4, kind: GateKind::And, k: 0, preds: vec![1, 2] },
                Gate { id: 5, kind: GateKind::Not, k: 0, preds: vec![3] },
                Gate { id: 6, kind: GateKind::Or, k: 0, preds: vec![4, 5] },
                Gate { id: 7, kind: GateKind::Maj, k: 0, preds: vec![4, 5, 6] },
                Gate { id: 8, kind: GateKind::Not, k: 0, preds: vec![7] },
            ],
            output: 8,
        };
        c.checked().unwrap();
        let compiled = compile_circuit_looped(&c, PrecisionClass::LogBit, &opts()).unwrap();
        assert_eq!(compiled.loops, c.depth() as u64);
        let inputs: Vec<Vec<bool>> = (0..8u32)
            .map(|w| (0..3).map(|i| (w >> i) & 1 == 1).collect())
            .collect();
        let report = verify_circuit_looped(&c, &compiled, &inputs).unwrap();
        assert!(report.pass, "{report:?}");
    }
}

