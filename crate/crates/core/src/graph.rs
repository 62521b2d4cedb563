//! Computation-graph IR, validation, layering passes, and the reference
//! evaluator every compiler is checked against.
//!
//! A graph is a DAG over a finite alphabet: input nodes carry symbols, func
//! nodes apply table-driven local functions to their predecessors, and an
//! ordered subset of sink nodes forms the output tuple. This module owns the
//! JSON schema for graph files.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;
pub type SymbolId = usize;

/// Default cap on node count; polynomial size is not checked, a hard cap is.
pub const DEFAULT_NODE_CAP: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph:{}", .0.iter().map(|d| format!("\n  - {d}")).collect::<String>())]
    Invalid(Vec<Diagnostic>),
    #[error("cycle through node {node}")]
    Cycle { node: NodeId },
    #[error("input length {got} does not match the {expected} input nodes")]
    InputLength { expected: usize, got: usize },
    #[error("symbol index {symbol} outside alphabet of size {alphabet}")]
    SymbolRange { symbol: SymbolId, alphabet: usize },
    #[error("graph file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    EmptyAlphabet,
    DuplicateSymbol { symbol: String },
    DuplicateId { node: NodeId },
    InputHasPreds { node: NodeId },
    UnknownLabel { node: NodeId, label: String },
    ArityMismatch { node: NodeId, expected: usize, got: usize },
    UnknownPred { node: NodeId, pred: NodeId },
    BadTable { label: String, expected: usize, got: usize },
    BadTableEntry { label: String, entry: SymbolId },
    Cycle { node: NodeId },
    UnknownOutput { node: NodeId },
    DuplicateOutput { node: NodeId },
    OutputNotSink { node: NodeId },
    TooManyNodes { count: usize, cap: usize },
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::EmptyAlphabet => write!(f, "alphabet is empty"),
            Diagnostic::DuplicateSymbol { symbol } => write!(f, "duplicate symbol {symbol:?}"),
            Diagnostic::DuplicateId { node } => write!(f, "duplicate node id {node}"),
            Diagnostic::InputHasPreds { node } => {
                write!(f, "input node {node} has predecessors")
            }
            Diagnostic::UnknownLabel { node, label } => {
                write!(f, "node {node} uses unknown function {label:?}")
            }
            Diagnostic::ArityMismatch {
                node,
                expected,
                got,
            } => write!(
                f,
                "arity mismatch at node {node}: function takes {expected}, got {got} predecessors"
            ),
            Diagnostic::UnknownPred { node, pred } => {
                write!(f, "node {node} references unknown predecessor {pred}")
            }
            Diagnostic::BadTable {
                label,
                expected,
                got,
            } => write!(
                f,
                "function {label:?} table has {got} entries, expected {expected}"
            ),
            Diagnostic::BadTableEntry { label, entry } => {
                write!(f, "function {label:?} table entry {entry} outside alphabet")
            }
            Diagnostic::Cycle { node } => write!(f, "cycle through node {node}"),
            Diagnostic::UnknownOutput { node } => write!(f, "unknown output node {node}"),
            Diagnostic::DuplicateOutput { node } => write!(f, "duplicate output node {node}"),
            Diagnostic::OutputNotSink { node } => {
                write!(f, "output node {node} has successors")
            }
            Diagnostic::TooManyNodes { count, cap } => {
                write!(f, "{count} nodes exceeds the configured cap {cap}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Input,
    Func { label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub preds: Vec<NodeId>,
}

/// A local function as an explicit value table, row-major over the
/// predecessor tuple with the first predecessor most significant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalFn {
    pub arity: usize,
    pub table: Vec<SymbolId>,
}

impl LocalFn {
    pub fn identity(alphabet_len: usize) -> Self {
        Self {
            arity: 1,
            table: (0..alphabet_len).collect(),
        }
    }

    pub fn apply(&self, args: &[SymbolId], alphabet_len: usize) -> SymbolId {
        debug_assert_eq!(args.len(), self.arity);
        let mut idx = 0usize;
        for &a in args {
            idx = idx * alphabet_len + a;
        }
        self.table[idx]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompGraph {
    pub alphabet: Vec<String>,
    pub fn_table: BTreeMap<String, LocalFn>,
    pub nodes: Vec<Node>,
    pub outputs: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub node_cap: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            node_cap: DEFAULT_NODE_CAP,
        }
    }
}

/// Depth map and the canonical layer decomposition: layer of a node is the
/// length of the longest path from any source to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDecomposition {
    pub layers: Vec<Vec<NodeId>>,
    pub depth_of: BTreeMap<NodeId, usize>,
}

impl LayerDecomposition {
    pub fn depth(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }
}

impl CompGraph {
    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Input node ids in ascending order; the i-th input symbol feeds the
    /// i-th of these.
    pub fn input_ids(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Input))
            .map(|n| n.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn num_inputs(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Input))
            .count()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn max_fan_in(&self) -> usize {
        self.nodes.iter().map(|n| n.preds.len()).max().unwrap_or(0)
    }

    pub fn symbol_index(&self, s: &str) -> Option<SymbolId> {
        self.alphabet.iter().position(|a| a == s)
    }

    fn succ_counts(&self) -> BTreeMap<NodeId, usize> {
        let mut out: BTreeMap<NodeId, usize> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        for n in &self.nodes {
            for p in &n.preds {
                if let Some(c) = out.get_mut(p) {
                    *c += 1;
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        self.validate_with(&Limits::default())
    }

    pub fn validate_with(&self, limits: &Limits) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        if self.alphabet.is_empty() && !self.nodes.is_empty() {
            diags.push(Diagnostic::EmptyAlphabet);
        }
        let mut seen_syms = BTreeSet::new();
        for s in &self.alphabet {
            if !seen_syms.insert(s.clone()) {
                diags.push(Diagnostic::DuplicateSymbol { symbol: s.clone() });
            }
        }
        if self.nodes.len() > limits.node_cap {
            diags.push(Diagnostic::TooManyNodes {
                count: self.nodes.len(),
                cap: limits.node_cap,
            });
        }
        for (label, f) in &self.fn_table {
            let expected = self.alphabet.len().pow(f.arity as u32);
            if f.table.len() != expected {
                diags.push(Diagnostic::BadTable {
                    label: label.clone(),
                    expected,
                    got: f.table.len(),
                });
            }
            for &e in &f.table {
                if e >= self.alphabet.len() {
                    diags.push(Diagnostic::BadTableEntry {
                        label: label.clone(),
                        entry: e,
                    });
                    break;
                }
            }
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                diags.push(Diagnostic::DuplicateId { node: n.id });
            }
        }
        for n in &self.nodes {
            match &n.kind {
                NodeKind::Input => {
                    if !n.preds.is_empty() {
                        diags.push(Diagnostic::InputHasPreds { node: n.id });
                    }
                }
                NodeKind::Func { label } => match self.fn_table.get(label) {
                    None => diags.push(Diagnostic::UnknownLabel {
                        node: n.id,
                        label: label.clone(),
                    }),
                    Some(f) => {
                        if f.arity != n.preds.len() {
                            diags.push(Diagnostic::ArityMismatch {
                                node: n.id,
                                expected: f.arity,
                                got: n.preds.len(),
                            });
                        }
                    }
                },
            }
            for p in &n.preds {
                if !ids.contains(p) {
                    diags.push(Diagnostic::UnknownPred {
                        node: n.id,
                        pred: *p,
                    });
                }
            }
        }
        // cycle detection only makes sense once the edge set is well formed
        if diags.is_empty() {
            if let Err(GraphError::Cycle { node }) = topo_order(self) {
                diags.push(Diagnostic::Cycle { node });
            }
        }
        let succ = self.succ_counts();
        let mut seen_out = BTreeSet::new();
        for o in &self.outputs {
            if !ids.contains(o) {
                diags.push(Diagnostic::UnknownOutput { node: *o });
                continue;
            }
            if !seen_out.insert(*o) {
                diags.push(Diagnostic::DuplicateOutput { node: *o });
            }
            if succ.get(o).copied().unwrap_or(0) != 0 {
                diags.push(Diagnostic::OutputNotSink { node: *o });
            }
        }
        diags
    }

    /// Validation as a hard gate.
    pub fn checked(&self) -> Result<(), GraphError> {
        let diags = self.validate();
        if diags.is_empty() {
            Ok(())
        } else {
            Err(GraphError::Invalid(diags))
        }
    }

    pub fn from_json_str(s: &str) -> Result<CompGraph, GraphError> {
        let raw: RawGraph =
            serde_json::from_str(s).map_err(|e| GraphError::Parse(e.to_string()))?;
        raw.into_graph()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&RawGraph::from_graph(self)).expect("graph serializes")
    }
}

/// Deterministic topological order: inputs first (ascending id), func nodes
/// by a min-id Kahn scan, declared outputs last in their declared order.
pub fn topo_order(g: &CompGraph) -> Result<Vec<NodeId>, GraphError> {
    use std::cmp::Reverse;
    let out_set: BTreeSet<NodeId> = g.outputs.iter().copied().collect();
    let tier = |n: &Node| -> u8 {
        match n.kind {
            NodeKind::Input => 0,
            NodeKind::Func { .. } => {
                if out_set.contains(&n.id) {
                    2
                } else {
                    1
                }
            }
        }
    };
    let mut indeg: BTreeMap<NodeId, usize> =
        g.nodes.iter().map(|n| (n.id, n.preds.len())).collect();
    let mut succs: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for n in &g.nodes {
        for p in &n.preds {
            succs.entry(*p).or_default().push(n.id);
        }
    }
    let mut heap = BinaryHeap::new();
    for n in &g.nodes {
        if n.preds.is_empty() {
            heap.push(Reverse((tier(n), n.id)));
        }
    }
    let by_id: BTreeMap<NodeId, &Node> = g.nodes.iter().map(|n| (n.id, n)).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(Reverse((_, id))) = heap.pop() {
        order.push(id);
        for s in succs.get(&id).into_iter().flatten() {
            let d = indeg.get_mut(s).unwrap();
            *d -= 1;
            if *d == 0 {
                heap.push(Reverse((tier(by_id[s]), *s)));
            }
        }
    }
    if order.len() != g.nodes.len() {
        let node = indeg
            .iter()
            .filter(|(_, d)| **d > 0)
            .map(|(id, _)| *id)
            .min()
            .unwrap();
        return Err(GraphError::Cycle { node });
    }
    // move non-input outputs to the tail in declared order; the min-heap
    // already defers them, but the declared order is authoritative
    let declared_tail: Vec<NodeId> = g
        .outputs
        .iter()
        .copied()
        .filter(|o| !matches!(by_id[o].kind, NodeKind::Input))
        .collect();
    let tail_set: BTreeSet<NodeId> = declared_tail.iter().copied().collect();
    let mut head: Vec<NodeId> = order.into_iter().filter(|n| !tail_set.contains(n)).collect();
    head.extend(declared_tail);
    Ok(head)
}

/// depth(v) = 0 for sources, otherwise 1 + max over predecessors.
pub fn layerize(g: &CompGraph) -> Result<LayerDecomposition, GraphError> {
    let order = topo_order(g)?;
    let by_id: BTreeMap<NodeId, &Node> = g.nodes.iter().map(|n| (n.id, n)).collect();
    let mut depth_of: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut max_depth = 0usize;
    for id in &order {
        let n = by_id[id];
        let d = n
            .preds
            .iter()
            .map(|p| depth_of[p] + 1)
            .max()
            .unwrap_or(0);
        max_depth = max_depth.max(d);
        depth_of.insert(*id, d);
    }
    let mut layers = vec![Vec::new(); if g.nodes.is_empty() { 0 } else { max_depth + 1 }];
    for id in &order {
        layers[depth_of[id]].push(*id);
    }
    for layer in &mut layers {
        layer.sort_unstable();
    }
    Ok(LayerDecomposition { layers, depth_of })
}

fn fresh_label(g: &CompGraph, base: &str) -> String {
    let mut label = base.to_string();
    while g.fn_table.contains_key(&label) {
        label.push('_');
    }
    label
}

/// Rewrite so every edge spans exactly one depth layer, inserting chains of
/// identity nodes. Chains are shared per source node, so an edge skipping k
/// layers adds at most k-1 nodes overall per source. The rewrite preserves
/// the computed function and the graph depth.
pub fn strict_layered_expansion(g: &CompGraph) -> Result<CompGraph, GraphError> {
    let ld = layerize(g)?;
    let mut out = g.clone();
    let has_skip = g.nodes.iter().any(|n| {
        n.preds
            .iter()
            .any(|p| ld.depth_of[&n.id] > ld.depth_of[p] + 1)
    });
    if !has_skip {
        return Ok(out);
    }
    let id_label = fresh_label(g, "id");
    out.fn_table
        .insert(id_label.clone(), LocalFn::identity(g.alphabet.len()));
    let mut next_id: NodeId = g.nodes.iter().map(|n| n.id).max().unwrap_or(0) + 1;
    // copies[(source, depth)] = id of the identity copy of `source` at `depth`
    let mut copies: BTreeMap<(NodeId, usize), NodeId> = BTreeMap::new();
    // how deep each source must be forwarded
    let mut need_until: BTreeMap<NodeId, usize> = BTreeMap::new();
    for n in &g.nodes {
        let dv = ld.depth_of[&n.id];
        for p in &n.preds {
            if dv > ld.depth_of[p] + 1 {
                let e = need_until.entry(*p).or_insert(0);
                *e = (*e).max(dv - 1);
            }
        }
    }
    let mut new_nodes = Vec::new();
    for (src, until) in &need_until {
        let d0 = ld.depth_of[src];
        let mut prev = *src;
        for d in (d0 + 1)..=*until {
            let id = next_id;
            next_id += 1;
            new_nodes.push(Node {
                id,
                kind: NodeKind::Func {
                    label: id_label.clone(),
                },
                preds: vec![prev],
            });
            copies.insert((*src, d), id);
            prev = id;
        }
    }
    for n in &mut out.nodes {
        let dv = ld.depth_of[&n.id];
        for p in n.preds.iter_mut() {
            if dv > ld.depth_of[p] + 1 {
                *p = copies[&(*p, dv - 1)];
            }
        }
    }
    out.nodes.extend(new_nodes);
    Ok(out)
}

/// Peak number of node values simultaneously live during layer-by-layer
/// evaluation: max over layers l of |L_l together with every already-computed
/// predecessor still awaited by a deeper node|.
pub fn parallel_space(g: &CompGraph) -> Result<usize, GraphError> {
    let ld = layerize(g)?;
    if g.nodes.is_empty() {
        return Ok(0);
    }
    let mut best = 0usize;
    for l in 0..ld.layers.len() {
        let mut live: BTreeSet<NodeId> = ld.layers[l].iter().copied().collect();
        for n in &g.nodes {
            if ld.depth_of[&n.id] > l {
                for p in &n.preds {
                    if ld.depth_of[p] <= l {
                        live.insert(*p);
                    }
                }
            }
        }
        best = best.max(live.len());
    }
    Ok(best)
}

/// Evaluation in topological order, returning every node's value.
pub fn evaluate_all(g: &CompGraph, x: &[SymbolId]) -> Result<BTreeMap<NodeId, SymbolId>, GraphError> {
    let inputs = g.input_ids();
    if x.len() != inputs.len() {
        return Err(GraphError::InputLength {
            expected: inputs.len(),
            got: x.len(),
        });
    }
    for &s in x {
        if s >= g.alphabet.len() {
            return Err(GraphError::SymbolRange {
                symbol: s,
                alphabet: g.alphabet.len(),
            });
        }
    }
    let order = topo_order(g)?;
    let by_id: BTreeMap<NodeId, &Node> = g.nodes.iter().map(|n| (n.id, n)).collect();
    let input_val: BTreeMap<NodeId, SymbolId> =
        inputs.iter().copied().zip(x.iter().copied()).collect();
    let mut values: BTreeMap<NodeId, SymbolId> = BTreeMap::new();
    for id in &order {
        let n = by_id[id];
        let v = match &n.kind {
            NodeKind::Input => input_val[id],
            NodeKind::Func { label } => {
                let f = &g.fn_table[label];
                let args: Vec<SymbolId> = n.preds.iter().map(|p| values[p]).collect();
                f.apply(&args, g.alphabet.len())
            }
        };
        values.insert(*id, v);
    }
    Ok(values)
}

/// Reference evaluation in topological order; this is the oracle all
/// compiled programs are compared against.
pub fn evaluate(g: &CompGraph, x: &[SymbolId]) -> Result<Vec<SymbolId>, GraphError> {
    let values = evaluate_all(g, x)?;
    Ok(g.outputs.iter().map(|o| values[o]).collect())
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Serialize, Deserialize)]
struct RawFn {
    arity: usize,
    table: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawNode {
    id: NodeId,
    kind: String,
    #[serde(rename = "fn", default, skip_serializing_if = "Option::is_none")]
    fn_label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    preds: Vec<NodeId>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    alphabet: Vec<String>,
    functions: BTreeMap<String, RawFn>,
    nodes: Vec<RawNode>,
    outputs: Vec<NodeId>,
}

impl RawGraph {
    fn into_graph(self) -> Result<CompGraph, GraphError> {
        let sym_index: BTreeMap<&str, SymbolId> = self
            .alphabet
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut fn_table = BTreeMap::new();
        for (label, f) in &self.functions {
            let mut table = Vec::with_capacity(f.table.len());
            for entry in &f.table {
                let idx = *sym_index.get(entry.as_str()).ok_or_else(|| {
                    GraphError::Parse(format!(
                        "function {label:?}: table entry {entry:?} is not in the alphabet"
                    ))
                })?;
                table.push(idx);
            }
            fn_table.insert(
                label.clone(),
                LocalFn {
                    arity: f.arity,
                    table,
                },
            );
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for rn in self.nodes {
            let kind = match rn.kind.as_str() {
                "input" => NodeKind::Input,
                "func" => NodeKind::Func {
                    label: rn.fn_label.ok_or_else(|| {
                        GraphError::Parse(format!("node {}: func node without \"fn\"", rn.id))
                    })?,
                },
                other => {
                    return Err(GraphError::Parse(format!(
                        "node {}: unknown kind {other:?}",
                        rn.id
                    )))
                }
            };
            nodes.push(Node {
                id: rn.id,
                kind,
                preds: rn.preds,
            });
        }
        let g = CompGraph {
            alphabet: self.alphabet,
            fn_table,
            nodes,
            outputs: self.outputs,
        };
        g.checked()?;
        Ok(g)
    }

    fn from_graph(g: &CompGraph) -> RawGraph {
        RawGraph {
            alphabet: g.alphabet.clone(),
            functions: g
                .fn_table
                .iter()
                .map(|(label, f)| {
                    (
                        label.clone(),
                        RawFn {
                            arity: f.arity,
                            table: f.table.iter().map(|&s| g.alphabet[s].clone()).collect(),
                        },
                    )
                })
                .collect(),
            nodes: g
                .nodes
                .iter()
                .map(|n| RawNode {
                    id: n.id,
                    kind: match n.kind {
                        NodeKind::Input => "input".into(),
                        NodeKind::Func { .. } => "func".into(),
                    },
                    fn_label: match &n.kind {
                        NodeKind::Input => None,
                        NodeKind::Func { label } => Some(label.clone()),
                    },
                    preds: n.preds.clone(),
                })
                .collect(),
            outputs: g.outputs.clone(),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn empty_graph_is_valid() {
        let g = CompGraph {
            alphabet: vec![],
            fn_table: BTreeMap::new(),
            nodes: vec![],
            outputs: vec![],
        };
        assert!(g.validate().is_empty());
        assert_eq!(evaluate(&g, &[]).unwrap(), Vec::<SymbolId>::new());
    }

    #[test]
    fn two_cycle_diagnosed() {
        let mut g = diamond();
        g.nodes[1].preds = vec![2];
        g.nodes[2].preds = vec![1];
        let diags = g.validate();
        assert!(diags.iter().any(|d| matches!(d, Diagnostic::Cycle { .. })), "{diags:?}");
    }

    #[test]
    fn arity_mismatch_diagnosed() {
        let mut g = diamond();
        g.nodes[3].preds = vec![0, 1, 2];
        let diags = g.validate();
        assert!(diags
            .iter()
            .any(|d| matches!(d, Diagnostic::ArityMismatch { node: 3, expected: 2, got: 3 })));
    }

    #[test]
    fn topo_chain_and_diamond() {
        let g = xor_chain();
        assert_eq!(topo_order(&g).unwrap(), vec![0, 1, 2, 10, 11, 12]);
        let d = diamond();
        assert_eq!(topo_order(&d).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn topo_inputs_only() {
        let g = CompGraph {
            alphabet: bool_alphabet(),
            fn_table: BTreeMap::new(),
            nodes: vec![
                Node { id: 5, kind: NodeKind::Input, preds: vec![] },
                Node { id: 2, kind: NodeKind::Input, preds: vec![] },
            ],
            outputs: vec![],
        };
        assert_eq!(topo_order(&g).unwrap(), vec![2, 5]);
    }

    #[test]
    fn layerize_cases() {
        let single = CompGraph {
            alphabet: bool_alphabet(),
            fn_table: BTreeMap::new(),
            nodes: vec![Node { id: 0, kind: NodeKind::Input, preds: vec![] }],
            outputs: vec![],
        };
        let ld = layerize(&single).unwrap();
        assert_eq!(ld.depth(), 0);
        assert_eq!(ld.layers, vec![vec![0]]);

        let ld = layerize(&xor_chain()).unwrap();
        assert_eq!(ld.depth(), 3);

        let ld = layerize(&diamond()).unwrap();
        assert_eq!(ld.depth(), 2);
    }

    #[test]
    fn expansion_inserts_shared_chain() {
        // edge from depth 0 to depth 3 gains 2 identity hops
        let mut g = xor_chain();
        g.fn_table.insert(
            "maj3".to_string(),
            LocalFn {
                arity: 3,
                table: vec![0, 0, 0, 1, 0, 1, 1, 1],
            },
        );
        g.nodes.pop();
        g.outputs = vec![13];
        g.nodes.push(Node {
            id: 13,
            kind: NodeKind::Func { label: "maj3".into() },
            preds: vec![0, 10, 11],
        });
        // skip edges: 0->13 (two hops shared for node 0), 10->13 (one hop),
        // and the pre-existing 2->11 (one hop)
        g.checked().unwrap();
        let e = strict_layered_expansion(&g).unwrap();
        e.checked().unwrap();
        assert_eq!(e.num_nodes(), g.num_nodes() + 4);
        let ld = layerize(&e).unwrap();
        assert_eq!(ld.depth(), 3);
        for n in &e.nodes {
            for p in &n.preds {
                assert_eq!(ld.depth_of[&n.id], ld.depth_of[p] + 1, "edge {}->{}", p, n.id);
            }
        }
        for xs in [[0, 0, 0], [1, 0, 1], [1, 1, 0], [0, 1, 1]] {
            assert_eq!(evaluate(&e, &xs).unwrap(), evaluate(&g, &xs).unwrap());
        }
    }

    #[test]
    fn expansion_identity_on_strict_graphs() {
        let g = diamond();
        let e = strict_layered_expansion(&g).unwrap();
        assert_eq!(e.num_nodes(), g.num_nodes());
    }

    #[test]
    fn parallel_space_examples() {
        // unary chain keeps one value live at a time
        let mut fn_table = BTreeMap::new();
        fn_table.insert("not".to_string(), LocalFn { arity: 1, table: vec![1, 0] });
        let chain = CompGraph {
            alphabet: bool_alphabet(),
            fn_table: fn_table.clone(),
            nodes: vec![
                Node { id: 0, kind: NodeKind::Input, preds: vec![] },
                Node { id: 1, kind: NodeKind::Func { label: "not".into() }, preds: vec![0] },
                Node { id: 2, kind: NodeKind::Func { label: "not".into() }, preds: vec![1] },
            ],
            outputs: vec![2],
        };
        assert_eq!(parallel_space(&chain).unwrap(), 1);

        // n independent inputs feeding one n-ary node stay live together
        let n = 5usize;
        let mut ft = BTreeMap::new();
        ft.insert(
            "any".to_string(),
            LocalFn { arity: n, table: vec![0; 2usize.pow(n as u32)] },
        );
        let mut nodes: Vec<Node> = (0..n as NodeId)
            .map(|id| Node { id, kind: NodeKind::Input, preds: vec![] })
            .collect();
        nodes.push(Node {
            id: 100,
            kind: NodeKind::Func { label: "any".into() },
            preds: (0..n as NodeId).collect(),
        });
        let star = CompGraph {
            alphabet: bool_alphabet(),
            fn_table: ft,
            nodes,
            outputs: vec![100],
        };
        assert_eq!(parallel_space(&star).unwrap(), n);

        assert_eq!(parallel_space(&diamond()).unwrap(), 2);
    }

    #[test]
    fn evaluate_matches_recursive_oracle() {
        let g = xor_chain();
        assert_eq!(evaluate(&g, &[1, 0, 0]).unwrap(), vec![1]);
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let x = [a, b, c];
                    assert_eq!(evaluate(&g, &x).unwrap(), recursive_evaluate(&g, &x));
                }
            }
        }
    }

    #[test]
    fn evaluate_rejects_bad_symbols() {
        let g = diamond();
        assert!(matches!(
            evaluate(&g, &[7]),
            Err(GraphError::SymbolRange { .. })
        ));
        assert!(matches!(
            evaluate(&g, &[0, 1]),
            Err(GraphError::InputLength { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let g = xor_chain();
        let s = g.to_json_string();
        let back = CompGraph::from_json_str(&s).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn json_rejects_unknown_symbol() {
        let s = r#"{"alphabet":["0","1"],"functions":{"f":{"arity":1,"table":["0","2"]}},"nodes":[{"id":0,"kind":"input"}],"outputs":[]}"#;
        assert!(matches!(
            CompGraph::from_json_str(s),
            Err(GraphError::Parse(_))
        ));
    }
}
