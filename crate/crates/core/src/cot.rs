//! Chain-of-thought compiler: a computation graph becomes a single-layer
//! causal program that decodes node values one per step in topological order.
//!
//! Sequence slot r (0-based) carries node r+1 of the topological order, so
//! inputs occupy the prompt and every decode step appends the value of the
//! next function node. The positional row at slot r announces the node to be
//! decoded next: its function label, its predecessors' indices, and the
//! slot's own index for the attention keys. Each of the C attention heads
//! fetches one predecessor's value one-hot through the orthogonal
//! query/key construction, and a mixture-of-experts feedforward (one expert
//! per function label) computes the new value one-hot, which the output
//! projection decodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compile::{CompileError, CompileOptions};
use crate::fxp::{ceil_log2, FxFormat, FxScalar};
use crate::gates::{FFWeights, PrecisionClass};
use crate::graph::{self, CompGraph, LocalFn, NodeId, NodeKind, SymbolId};
use crate::linalg::{FxMatrix, FxVector};
use crate::tfcore::{
    run_cot, FeedForward, Head, Layer, Mask, Mode, PosTable, TransformerProgram,
};

pub const PROGRAM_FORMAT: &str = "dagtf-program/1";

/// Slot offsets of the per-position embedding. The retrieved-value scratch
/// holds C full one-hots (C*sigma slots) and a separate next-value region
/// receives the feedforward output so the decode head reads clean slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CotLayout {
    pub sigma: usize,
    pub num_labels: usize,
    pub fan_in: usize,
    pub index_bits: u32,
    pub embed_dim: usize,
    pub off_value: usize,
    pub off_label: usize,
    pub off_pos: usize,
    pub off_pred: usize,
    pub off_scratch: usize,
    pub off_next: usize,
    /// Function labels in gate order; the final entry is the reserved no-op
    /// label used for input successors and the halt row.
    pub labels: Vec<String>,
    /// Topological node order; sequence slot r carries node_order[r].
    pub node_order: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct CompiledCot {
    pub program: TransformerProgram,
    pub layout: CotLayout,
    pub steps: u64,
    pub graph_size: usize,
}

/// Decode steps consumed by the compiled program: one per non-input node.
pub fn cot_step_count(g: &CompGraph) -> u64 {
    (g.num_nodes() - g.num_inputs()) as u64
}

/// Format sized for the orthogonal selector at `p` index bits: scores reach
/// p * 2^{p+2}, plus one guard bit.
fn index_format(p: u32) -> Result<FxFormat, CompileError> {
    let integer_bits = p + 4 + ceil_log2(p.max(1) as u64);
    Ok(FxFormat::new(integer_bits, p.max(2))?)
}

/// Expert computing one table function from the scratch one-hots into the
/// next-value region, with every unused slot ignored.
fn table_expert(
    f: &LocalFn,
    sigma: usize,
    layout_m: usize,
    off_scratch: usize,
    off_next: usize,
    fmt: FxFormat,
) -> Result<FFWeights, CompileError> {
    let patterns = sigma.pow(f.arity as u32);
    let mut w1 = FxMatrix::zeros(patterns, layout_m, fmt);
    let mut b1 = FxVector::zeros(patterns, fmt);
    let mut w2 = FxMatrix::zeros(layout_m, patterns, fmt);
    for unit in 0..patterns {
        let mut rest = unit;
        let mut pattern = vec![0usize; f.arity];
        for c in (0..f.arity).rev() {
            pattern[c] = rest % sigma;
            rest /= sigma;
        }
        for (c, &sym) in pattern.iter().enumerate() {
            w1.set_int(unit, off_scratch + c * sigma + sym, 1)?;
        }
        b1.set(unit, FxScalar::from_int(1 - f.arity as i64, fmt)?);
        w2.set_int(off_next + f.table[unit], unit, 1)?;
    }
    Ok(FFWeights {
        w1,
        b1,
        w2,
        class: PrecisionClass::ConstantBit,
    })
}

fn noop_expert(layout_m: usize, fmt: FxFormat) -> FFWeights {
    FFWeights {
        w1: FxMatrix::zeros(1, layout_m, fmt),
        b1: FxVector::zeros(1, fmt),
        w2: FxMatrix::zeros(layout_m, 1, fmt),
        class: PrecisionClass::ConstantBit,
    }
}

pub fn compile_cot(g: &CompGraph, opts: &CompileOptions) -> Result<CompiledCot, CompileError> {
    let diags = g.validate_with(&opts.limits);
    if !diags.is_empty() {
        return Err(graph::GraphError::Invalid(diags).into());
    }
    if g.num_inputs() == 0 {
        return Err(CompileError::NoInputs);
    }
    let by_id: BTreeMap<NodeId, &graph::Node> = g.nodes.iter().map(|n| (n.id, n)).collect();
    for o in &g.outputs {
        if matches!(by_id[o].kind, NodeKind::Input) {
            return Err(CompileError::InputAsOutput { node: *o });
        }
    }
    let fan_in = g.max_fan_in();
    if fan_in > opts.max_fan_in {
        return Err(CompileError::FanInExceeded {
            got: fan_in,
            bound: opts.max_fan_in,
        });
    }
    let c = fan_in.max(1);
    let order = graph::topo_order(g)?;
    let total = order.len();
    // 1-based topological index of each node; sequence slot r holds index r+1
    let topo_index: BTreeMap<NodeId, u64> = order
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, i as u64 + 1))
        .collect();
    let p = ceil_log2(total as u64 + 1).max(1);
    let fmt = index_format(p)?;
    let sigma = g.alphabet.len();
    // only labels that nodes actually use get experts; unused table entries
    // would otherwise inflate the fan-in bound
    let mut labels: Vec<String> = g
        .nodes
        .iter()
        .filter_map(|n| match &n.kind {
            NodeKind::Func { label } => Some(label.clone()),
            NodeKind::Input => None,
        })
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    labels.push("__noop".to_string());
    let num_labels = labels.len();
    let label_index: BTreeMap<&str, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let noop = num_labels - 1;

    let pw = p as usize;
    let off_value = 0;
    let off_label = off_value + sigma;
    let off_pos = off_label + num_labels;
    let off_pred = off_pos + pw;
    let off_scratch = off_pred + c * pw;
    let off_next = off_scratch + c * sigma;
    let m = off_next + sigma;

    let key_scale: i64 = 1 << (p + 1);

    // word embeddings: value one-hot
    let mut word_embed = Vec::with_capacity(sigma);
    for a in 0..sigma {
        let mut v = FxVector::zeros(m, fmt);
        v.set(off_value + a, FxScalar::one(fmt));
        word_embed.push(v);
    }

    // positional rows: slot r describes its own index r+1 and the node at
    // topological index r+2 (the one decoded from this position)
    let mut rows = Vec::with_capacity(total);
    for r in 0..total {
        let own_index = r as u64 + 1;
        let mut v = FxVector::zeros(m, fmt);
        let own_sbin = crate::fxp::sbin(own_index, p)?;
        for (l, &b) in own_sbin.bits.iter().enumerate() {
            v.set(off_pos + l, FxScalar::from_int(b as i64, fmt)?);
        }
        let next = order.get(r + 1).map(|id| by_id[id]);
        let (label_slot, preds): (usize, Vec<u64>) = match next {
            Some(node) => match &node.kind {
                NodeKind::Input => (noop, vec![]),
                NodeKind::Func { label } => (
                    label_index[label.as_str()],
                    node.preds.iter().map(|pid| topo_index[pid]).collect(),
                ),
            },
            None => (noop, vec![]),
        };
        v.set(off_label + label_slot, FxScalar::one(fmt));
        for slot in 0..c {
            // missing predecessors point at the slot's own index; the
            // retrieval lands in scratch the expert never reads
            let target = preds.get(slot).copied().unwrap_or(own_index);
            let sb = crate::fxp::sbin(target, p)?;
            for (l, &b) in sb.bits.iter().enumerate() {
                v.set(off_pred + slot * pw + l, FxScalar::from_int(b as i64, fmt)?);
            }
        }
        rows.push(v);
    }

    // C heads: head c fetches predecessor c's value one-hot
    let head_dim = (2 * pw).max(sigma);
    let mut heads = Vec::with_capacity(c);
    for slot in 0..c {
        let mut q = FxMatrix::zeros(head_dim, m, fmt);
        let mut k = FxMatrix::zeros(head_dim, m, fmt);
        let mut v = FxMatrix::zeros(head_dim, m, fmt);
        for l in 0..pw {
            q.set_int(2 * l, off_pred + slot * pw + l, 1)?;
            k.set_int(2 * l, off_pos + l, key_scale)?;
            for a in 0..sigma {
                // constant tracks from the value one-hot, which sums to 1
                q.set_int(2 * l + 1, off_value + a, 1)?;
                k.set_int(2 * l + 1, off_value + a, -key_scale)?;
            }
        }
        for a in 0..sigma {
            v.set_int(a, off_value + a, 1)?;
        }
        heads.push(Head { q, k, v });
    }
    let mut head_merge = FxMatrix::zeros(m, c * head_dim, fmt);
    for slot in 0..c {
        for a in 0..sigma {
            head_merge.set_int(off_scratch + slot * sigma + a, slot * head_dim + a, 1)?;
        }
    }

    // mixture of experts: one expert per function label plus the no-op
    let mut gate = FxMatrix::zeros(num_labels, m, fmt);
    for e in 0..num_labels {
        gate.set_int(e, off_label + e, 1)?;
    }
    let mut experts = Vec::with_capacity(num_labels);
    for label in labels.iter().take(num_labels - 1) {
        let f = &g.fn_table[label];
        experts.push(table_expert(f, sigma, m, off_scratch, off_next, fmt)?);
    }
    experts.push(noop_expert(m, fmt));

    let mut output_proj = FxMatrix::zeros(sigma, m, fmt);
    for a in 0..sigma {
        output_proj.set_int(a, off_next + a, 1)?;
    }

    let steps = cot_step_count(g);
    let program = TransformerProgram {
        format_version: crate::tfcore::PROGRAM_FORMAT_VERSION,
        fmt,
        embed_dim: m,
        vocab: g.alphabet.clone(),
        word_embed,
        pos_table: PosTable { rows: vec![rows] },
        layers: vec![Layer {
            heads,
            head_merge,
            ff: FeedForward::Moe { gate, experts },
        }],
        mask: Mask::Causal,
        mode: Mode::Cot,
        output_proj,
        declared_budget: steps,
        output_len: g.outputs.len(),
    };
    program.validate()?;
    Ok(CompiledCot {
        program,
        layout: CotLayout {
            sigma,
            num_labels,
            fan_in: c,
            index_bits: p,
            embed_dim: m,
            off_value,
            off_label,
            off_pos,
            off_pred,
            off_scratch,
            off_next,
            labels,
            node_order: order,
        },
        steps,
        graph_size: total,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CotMismatch {
    pub input: Vec<SymbolId>,
    pub expected: Vec<SymbolId>,
    pub got: Vec<SymbolId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CotReport {
    pub pass: bool,
    pub mismatches: Vec<CotMismatch>,
    pub steps: u64,
    pub size: usize,
    /// Whether every decoded step token equalled the oracle value of the
    /// corresponding non-input node (the scratchpad is the node-value
    /// sequence).
    pub trace_transparent: bool,
    pub inputs_checked: usize,
}

/// Compare the compiled program against the graph evaluator on a sample set.
pub fn verify_cot(
    g: &CompGraph,
    compiled: &CompiledCot,
    inputs: &[Vec<SymbolId>],
) -> Result<CotReport, CompileError> {
    let mut mismatches = Vec::new();
    let mut trace_transparent = true;
    let by_id: BTreeMap<NodeId, &graph::Node> = g.nodes.iter().map(|n| (n.id, n)).collect();
    for x in inputs {
        let expected = graph::evaluate(g, x)?;
        let (got, trace) = run_cot(&compiled.program, x, compiled.steps)?;
        let oracle_all = graph::evaluate_all(g, x)?;
        if let crate::tfcore::Trace::Cot { steps } = &trace {
            let non_inputs = compiled
                .layout
                .node_order
                .iter()
                .filter(|id| !matches!(by_id[*id].kind, NodeKind::Input));
            for (tok, node) in steps.iter().zip(non_inputs) {
                if *tok != oracle_all[node] {
                    trace_transparent = false;
                }
            }
        }
        if got != expected {
            mismatches.push(CotMismatch {
                input: x.clone(),
                expected,
                got,
            });
        }
    }
    Ok(CotReport {
        pass: mismatches.is_empty() && trace_transparent,
        mismatches,
        steps: compiled.steps,
        size: compiled.graph_size,
        trace_transparent,
        inputs_checked: inputs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testutil::{diamond, xor_chain};

    #[test]
    fn single_identity_node_reproduces_input() {
        let mut fn_table = BTreeMap::new();
        fn_table.insert("copy".to_string(), LocalFn::identity(2));
        let g = CompGraph {
            alphabet: vec!["0".into(), "1".into()],
            fn_table,
            nodes: vec![
                graph::Node {
                    id: 0,
                    kind: NodeKind::Input,
                    preds: vec![],
                },
                graph::Node {
                    id: 1,
                    kind: NodeKind::Func {
                        label: "copy".into(),
                    },
                    preds: vec![0],
                },
            ],
            outputs: vec![1],
        };
        let compiled = compile_cot(&g, &CompileOptions::default()).unwrap();
        assert_eq!(compiled.steps, 1);
        for x in [[0usize], [1usize]] {
            let (ans, _) = run_cot(&compiled.program, &x, 1).unwrap();
            assert_eq!(ans, x.to_vec());
        }
    }

    #[test]
    fn xor_chain_decodes_node_values() {
        let g = xor_chain();
        let compiled = compile_cot(&g, &CompileOptions::default()).unwrap();
        assert_eq!(compiled.steps, 3);
        let (ans, trace) = run_cot(&compiled.program, &[1, 1, 0], 3).unwrap();
        assert_eq!(ans, vec![0]);
        match trace {
            crate::tfcore::Trace::Cot { steps } => assert_eq!(steps, vec![0, 0, 0]),
            _ => unreachable!(),
        }
        let (ans, trace) = run_cot(&compiled.program, &[1, 0, 0], 3).unwrap();
        assert_eq!(ans, vec![1]);
        match trace {
            crate::tfcore::Trace::Cot { steps } => assert_eq!(steps, vec![1, 1, 1]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn diamond_verifies_on_all_inputs() {
        let g = diamond();
        let compiled = compile_cot(&g, &CompileOptions::default()).unwrap();
        let report = verify_cot(&g, &compiled, &[vec![0], vec![1]]).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.steps, cot_step_count(&g));
    }

    #[test]
    fn step_count_is_non_input_count() {
        let g = xor_chain();
        assert_eq!(cot_step_count(&g), 3);
        let inputs_only = CompGraph {
            alphabet: vec!["0".into()],
            fn_table: BTreeMap::new(),
            nodes: vec![graph::Node {
                id: 0,
                kind: NodeKind::Input,
                preds: vec![],
            }],
            outputs: vec![],
        };
        assert_eq!(cot_step_count(&inputs_only), 0);
    }

    #[test]
    fn incremental_decode_matches_full_recompute() {
        // the cached chain-of-thought path must be bit-identical to
        // re-running the whole block over the whole sequence each step
        let g = xor_chain();
        let compiled = compile_cot(&g, &CompileOptions::default()).unwrap();
        let prog = &compiled.program;
        for x in [[1usize, 1, 0], [1, 0, 1], [0, 1, 1]] {
            let (_, trace) = run_cot(prog, &x, compiled.steps).unwrap();
            let crate::tfcore::Trace::Cot { steps } = &trace else { unreachable!() };
            // full recompute: embed the whole sequence, run the block, read
            // the last position's logits, append greedily
            let mut tokens: Vec<usize> = x.to_vec();
            for step in 0..compiled.steps as usize {
                let hidden: Vec<crate::linalg::FxVector> = tokens
                    .iter()
                    .enumerate()
                    .map(|(pos, &t)| {
                        prog.word_embed[t].add(prog.pos_table.at(0, pos)).unwrap()
                    })
                    .collect();
                let out = crate::tfcore::forward_block(prog, &hidden).unwrap();
                let logits = prog.output_proj.matvec(out.last().unwrap()).unwrap();
                let tok = crate::tfcore::argmax_lowest(logits.iter_raw());
                assert_eq!(tok, steps[step], "divergence at step {step} on {x:?}");
                tokens.push(tok);
            }
        }
    }

    #[test]
    fn corrupted_expert_reported_as_mismatch() {
        let g = xor_chain();
        let mut compiled = compile_cot(&g, &CompileOptions::default()).unwrap();
        // zero out the experts: decoded symbols collapse to symbol 0
        if let FeedForward::Moe { experts, .. } = &mut compiled.program.layers[0].ff {
            for e in experts.iter_mut() {
                for w in e.w2.iter_raw_mut() {
                    *w = 0;
                }
            }
        }
        let report = verify_cot(&g, &compiled, &[vec![1, 0, 0]]).unwrap();
        assert!(!report.pass);
        assert_eq!(report.mismatches.len(), 1);
    }

    #[test]
    fn constant_function_nodes_decode() {
        // arity-0 function node: the expert fires unconditionally on its
        // bias and writes the constant symbol
        let mut fn_table = BTreeMap::new();
        fn_table.insert("two".to_string(), LocalFn { arity: 0, table: vec![2] });
        fn_table.insert("copy".to_string(), LocalFn::identity(3));
        let g = CompGraph {
            alphabet: vec!["0".into(), "1".into(), "2".into()],
            fn_table,
            nodes: vec![
                graph::Node { id: 0, kind: NodeKind::Input, preds: vec![] },
                graph::Node {
                    id: 1,
                    kind: NodeKind::Func { label: "two".into() },
                    preds: vec![],
                },
                graph::Node {
                    id: 2,
                    kind: NodeKind::Func { label: "copy".into() },
                    preds: vec![0],
                },
            ],
            outputs: vec![2, 1],
        };
        g.checked().unwrap();
        let compiled = compile_cot(&g, &CompileOptions::default()).unwrap();
        let report = verify_cot(&g, &compiled, &[vec![0], vec![1], vec![2]]).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn rejects_input_as_output() {
        let mut g = diamond();
        g.nodes.push(graph::Node {
            id: 9,
            kind: NodeKind::Input,
            preds: vec![],
        });
        g.outputs = vec![3, 9];
        assert!(matches!(
            compile_cot(&g, &CompileOptions::default()),
            Err(CompileError::InputAsOutput { node: 9 })
        ));
    }

    #[test]
    fn rejects_excess_fan_in() {
        let g = xor_chain();
        let opts = CompileOptions {
            max_fan_in: 1,
            ..CompileOptions::default()
        };
        assert!(matches!(
            compile_cot(&g, &opts),
            Err(CompileError::FanInExceeded { got: 2, bound: 1 })
        ));
    }
}
