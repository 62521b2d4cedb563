//! Seeded random graph and circuit generators for the verification suites.
//! Everything is deterministic in the seed.

use std::collections::BTreeMap;

use rand::Rng;

use crate::circuit::{Gate, GateKind, ThresholdCircuit};
use crate::graph::{CompGraph, LocalFn, Node, NodeId, NodeKind, SymbolId};
use crate::sampler::substream;

#[derive(Debug, Clone, Copy)]
pub struct GraphCorpusParams {
    pub max_inputs: usize,
    pub max_nodes: usize,
    pub max_fan_in: usize,
    pub max_sigma: usize,
}

impl Default for GraphCorpusParams {
    fn default() -> Self {
        Self {
            max_inputs: 12,
            max_nodes: 48,
            max_fan_in: 3,
            max_sigma: 4,
        }
    }
}

/// A random computation graph: random local-function tables over a random
/// alphabet, function nodes reading earlier nodes, outputs among the sinks.
/// Roughly a fifth of the graphs are generated wide (many nodes per layer)
/// to exercise multi-block looped compilation; candidates whose looped
/// width constant would exceed 3 are resampled.
pub fn random_graph(rng: &mut impl Rng, params: &GraphCorpusParams) -> CompGraph {
    let mut last = None;
    for _ in 0..50 {
        let g = random_graph_candidate(rng, params);
        if matches!(crate::looped::width_requirement(&g), Ok(w) if w <= 3) {
            return g;
        }
        last = Some(g);
    }
    last.expect("at least one candidate generated")
}

fn random_graph_candidate(rng: &mut impl Rng, params: &GraphCorpusParams) -> CompGraph {
    let sigma = rng.gen_range(2..=params.max_sigma);
    let n = rng.gen_range(2..=params.max_inputs);
    let funcs = rng.gen_range(1..=(params.max_nodes - n).min(36));
    let wide = rng.gen_bool(0.2);

    let num_fns = rng.gen_range(1..=4usize);
    let mut fn_table = BTreeMap::new();
    for f in 0..num_fns {
        let arity = rng.gen_range(1..=params.max_fan_in);
        let table: Vec<SymbolId> = (0..sigma.pow(arity as u32))
            .map(|_| rng.gen_range(0..sigma))
            .collect();
        fn_table.insert(format!("f{f}"), LocalFn { arity, table });
    }
    let labels: Vec<String> = fn_table.keys().cloned().collect();

    let mut nodes: Vec<Node> = (0..n as NodeId)
        .map(|id| Node {
            id,
            kind: NodeKind::Input,
            preds: vec![],
        })
        .collect();
    for i in 0..funcs {
        let id = (n + i) as NodeId;
        let label = labels[rng.gen_range(0..labels.len())].clone();
        let arity = fn_table[&label].arity;
        let pool = if wide && rng.gen_bool(0.7) {
            // wide bursts read inputs only, stacking many nodes at depth 1
            n
        } else {
            nodes.len()
        };
        let preds: Vec<NodeId> = (0..arity)
            .map(|_| {
                // bias toward recent nodes so depth grows
                let lo = if pool > 6 && rng.gen_bool(0.5) {
                    pool - 6
                } else {
                    0
                };
                rng.gen_range(lo..pool) as NodeId
            })
            .collect();
        nodes.push(Node {
            id,
            kind: NodeKind::Func { label },
            preds,
        });
    }
    // outputs: function sinks, capped so looped programs can place them
    let referenced: Vec<NodeId> = nodes.iter().flat_map(|nd| nd.preds.clone()).collect();
    let mut sinks: Vec<NodeId> = nodes
        .iter()
        .filter(|nd| matches!(nd.kind, NodeKind::Func { .. }) && !referenced.contains(&nd.id))
        .map(|nd| nd.id)
        .collect();
    sinks.sort_unstable();
    let m = sinks.len().min(n).min(3).max(1);
    let outputs = sinks[..m].to_vec();
    let g = CompGraph {
        alphabet: (0..sigma).map(|s| s.to_string()).collect(),
        fn_table,
        nodes,
        outputs,
    };
    debug_assert!(g.validate().is_empty(), "{:?}", g.validate());
    g
}

pub fn random_inputs(rng: &mut impl Rng, g: &CompGraph, count: usize) -> Vec<Vec<SymbolId>> {
    let n = g.num_inputs();
    let sigma = g.alphabet.len();
    (0..count)
        .map(|_| (0..n).map(|_| rng.gen_range(0..sigma)).collect())
        .collect()
}

/// The deterministic 200-graph corpus used by the verification suites.
pub fn graph_corpus(seed: u64, count: usize, params: &GraphCorpusParams) -> Vec<CompGraph> {
    (0..count as u64)
        .map(|i| random_graph(&mut substream(seed, &[0x6772, i]), params))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct CircuitCorpusParams {
    pub max_inputs: usize,
    pub max_depth: usize,
    pub max_layer_gates: usize,
    pub allow_threshold: bool,
}

impl Default for CircuitCorpusParams {
    fn default() -> Self {
        Self {
            max_inputs: 10,
            max_depth: 5,
            max_layer_gates: 5,
            allow_threshold: true,
        }
    }
}

/// A random layered threshold circuit: every gate keeps at least one
/// predecessor in the previous layer, so gate depth equals its layer and the
/// output gate sits at the target depth.
pub fn random_circuit(rng: &mut impl Rng, params: &CircuitCorpusParams) -> ThresholdCircuit {
    let n = rng.gen_range(2..=params.max_inputs);
    let depth = rng.gen_range(1..=params.max_depth);
    let mut layers: Vec<Vec<u32>> = vec![(1..=n as u32).collect()];
    let mut gates = Vec::new();
    let mut next_id = n as u32 + 1;
    for d in 1..=depth {
        let count = if d == depth {
            1
        } else {
            rng.gen_range(1..=params.max_layer_gates)
        };
        let mut layer = Vec::with_capacity(count);
        let earlier: Vec<u32> = layers.iter().flatten().copied().collect();
        for _ in 0..count {
            let kind = match rng.gen_range(0..if params.allow_threshold { 5 } else { 3 }) {
                0 => GateKind::And,
                1 => GateKind::Or,
                2 => GateKind::Not,
                3 => GateKind::Maj,
                _ => GateKind::Threshold,
            };
            let prev = &layers[d - 1];
            let anchor = prev[rng.gen_range(0..prev.len())];
            let (preds, k) = if matches!(kind, GateKind::Not) {
                (vec![anchor], 0)
            } else {
                let extra = rng.gen_range(0..=3.min(earlier.len() - 1));
                let mut preds = vec![anchor];
                for _ in 0..extra {
                    let cand = earlier[rng.gen_range(0..earlier.len())];
                    if !preds.contains(&cand) {
                        preds.push(cand);
                    }
                }
                let k = rng.gen_range(0..=preds.len());
                (preds, k)
            };
            gates.push(Gate {
                id: next_id,
                kind,
                k,
                preds,
            });
            layer.push(next_id);
            next_id += 1;
        }
        layers.push(layer);
    }
    let c = ThresholdCircuit {
        inputs: n,
        gates,
        output: *layers[depth].last().unwrap(),
    };
    debug_assert!(c.validate().is_empty(), "{:?}", c.validate());
    debug_assert_eq!(c.depth(), depth);
    c
}

pub fn circuit_corpus(seed: u64, count: usize, params: &CircuitCorpusParams) -> Vec<ThresholdCircuit> {
    (0..count as u64)
        .map(|i| random_circuit(&mut substream(seed, &[0x6369, i]), params))
        .collect()
}
