//! Threshold/Boolean circuits: the DAG model the looped circuit compiler
//! consumes, with a direct evaluator used as its oracle. This module owns
//! the circuit JSON schema.
//!
//! Input nodes carry ids 1..=inputs; gates have arbitrary distinct ids above
//! that and reference inputs or earlier gates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type GateId = u32;

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("invalid circuit:{}", .0.iter().map(|d| format!("\n  - {d}")).collect::<String>())]
    Invalid(Vec<String>),
    #[error("circuit file: {0}")]
    Parse(String),
    #[error("input length {got}, circuit takes {expected}")]
    InputLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    And,
    Or,
    Not,
    Maj,
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gate {
    pub id: GateId,
    pub kind: GateKind,
    /// Threshold parameter; only meaningful for `Threshold` gates.
    pub k: usize,
    pub preds: Vec<GateId>,
}

impl Gate {
    fn apply(&self, inputs: &[bool]) -> bool {
        let ones = inputs.iter().filter(|&&b| b).count();
        match self.kind {
            GateKind::And => ones == inputs.len(),
            GateKind::Or => ones > 0,
            GateKind::Not => !inputs[0],
            GateKind::Maj => ones >= inputs.len() / 2 + 1,
            GateKind::Threshold => ones >= self.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdCircuit {
    pub inputs: usize,
    pub gates: Vec<Gate>,
    pub output: GateId,
}

impl ThresholdCircuit {
    pub fn validate(&self) -> Vec<String> {
        let mut diags = Vec::new();
        if self.inputs == 0 {
            diags.push("circuit has no inputs".to_string());
        }
        let mut ids: BTreeSet<GateId> = (1..=self.inputs as GateId).collect();
        for g in &self.gates {
            if g.id <= self.inputs as GateId {
                diags.push(format!("gate id {} collides with input ids", g.id));
            }
            if !ids.insert(g.id) {
                diags.push(format!("duplicate gate id {}", g.id));
            }
        }
        for g in &self.gates {
            if g.preds.is_empty() {
                diags.push(format!("gate {} has no predecessors", g.id));
            }
            if matches!(g.kind, GateKind::Not) && g.preds.len() != 1 {
                diags.push(format!("NOT gate {} must have fan-in 1", g.id));
            }
            if matches!(g.kind, GateKind::Threshold) && g.k > g.preds.len() {
                diags.push(format!(
                    "threshold gate {}: k={} exceeds fan-in {}",
                    g.id,
                    g.k,
                    g.preds.len()
                ));
            }
            let mut seen = BTreeSet::new();
            for p in &g.preds {
                if !ids.contains(p) {
                    diags.push(format!("gate {} references unknown node {p}", g.id));
                }
                if !seen.insert(*p) {
                    diags.push(format!("gate {} repeats predecessor {p}", g.id));
                }
            }
        }
        if !ids.contains(&self.output) {
            diags.push(format!("unknown output node {}", self.output));
        }
        if diags.is_empty() && self.depths().is_none() {
            diags.push("circuit contains a cycle".to_string());
        }
        diags
    }

    pub fn checked(&self) -> Result<(), CircuitError> {
        let diags = self.validate();
        if diags.is_empty() {
            Ok(())
        } else {
            Err(CircuitError::Invalid(diags))
        }
    }

    /// Depth of every node (inputs at 0), or None if cyclic.
    pub fn depths(&self) -> Option<BTreeMap<GateId, usize>> {
        let mut depth: BTreeMap<GateId, usize> =
            (1..=self.inputs as GateId).map(|i| (i, 0)).collect();
        let mut remaining: Vec<&Gate> = self.gates.iter().collect();
        while !remaining.is_empty() {
            let before = remaining.len();
            remaining.retain(|g| {
                let ready = g.preds.iter().all(|p| depth.contains_key(p));
                if ready {
                    let d = g.preds.iter().map(|p| depth[p] + 1).max().unwrap();
                    depth.insert(g.id, d);
                }
                !ready
            });
            if remaining.len() == before {
                return None;
            }
        }
        Some(depth)
    }

    /// Depth of the output gate: the loop count of the compiled program.
    pub fn depth(&self) -> usize {
        self.depths().map(|d| d[&self.output]).unwrap_or(0)
    }

    /// Direct evaluation: the oracle for compiled programs.
    pub fn evaluate(&self, x: &[bool]) -> Result<bool, CircuitError> {
        if x.len() != self.inputs {
            return Err(CircuitError::InputLength {
                expected: self.inputs,
                got: x.len(),
            });
        }
        let mut val: BTreeMap<GateId, bool> = (1..=self.inputs as GateId)
            .zip(x.iter().copied())
            .collect();
        let mut remaining: Vec<&Gate> = self.gates.iter().collect();
        while !remaining.is_empty() {
            let before = remaining.len();
            remaining.retain(|g| {
                if g.preds.iter().all(|p| val.contains_key(p)) {
                    let args: Vec<bool> = g.preds.iter().map(|p| val[p]).collect();
                    val.insert(g.id, g.apply(&args));
                    false
                } else {
                    true
                }
            });
            assert!(remaining.len() < before, "validated circuits are acyclic");
        }
        Ok(val[&self.output])
    }

    pub fn from_json_str(s: &str) -> Result<Self, CircuitError> {
        let raw: RawCircuit =
            serde_json::from_str(s).map_err(|e| CircuitError::Parse(e.to_string()))?;
        let c = ThresholdCircuit {
            inputs: raw.inputs,
            gates: raw
                .gates
                .into_iter()
                .map(|g| Gate {
                    id: g.id,
                    kind: g.kind,
                    k: g.k.unwrap_or(0),
                    preds: g.preds,
                })
                .collect(),
            output: raw.output,
        };
        c.checked()?;
        Ok(c)
    }

    pub fn to_json_string(&self) -> String {
        let raw = RawCircuit {
            inputs: self.inputs,
            gates: self
                .gates
                .iter()
                .map(|g| RawGate {
                    id: g.id,
                    kind: g.kind,
                    k: if matches!(g.kind, GateKind::Threshold) {
                        Some(g.k)
                    } else {
                        None
                    },
                    preds: g.preds.clone(),
                })
                .collect(),
            output: self.output,
        };
        serde_json::to_string_pretty(&raw).expect("circuit serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct RawGate {
    id: GateId,
    kind: GateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    preds: Vec<GateId>,
}

#[derive(Serialize, Deserialize)]
struct RawCircuit {
    inputs: usize,
    gates: Vec<RawGate>,
    output: GateId,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn not_chain(len: usize) -> ThresholdCircuit {
        let mut gates = Vec::new();
        let mut prev = 1u32;
        for i in 0..len {
            let id = 2 + i as u32;
            gates.push(Gate {
                id,
                kind: GateKind::Not,
                k: 0,
                preds: vec![prev],
            });
            prev = id;
        }
        ThresholdCircuit {
            inputs: 1,
            gates,
            output: prev,
        }
    }

    #[test]
    fn not_chain_depth_and_parity() {
        let c = not_chain(4);
        c.checked().unwrap();
        assert_eq!(c.depth(), 4);
        assert_eq!(c.evaluate(&[true]).unwrap(), true);
        assert_eq!(c.evaluate(&[false]).unwrap(), false);
    }

    #[test]
    fn majority_gate_truth() {
        let c = ThresholdCircuit {
            inputs: 3,
            gates: vec![Gate {
                id: 4,
                kind: GateKind::Maj,
                k: 0,
                preds: vec![1, 2, 3],
            }],
            output: 4,
        };
        c.checked().unwrap();
        for m in 0..8u32 {
            let bits: Vec<bool> = (0..3).map(|i| (m >> i) & 1 == 1).collect();
            let ones = bits.iter().filter(|&&b| b).count();
            assert_eq!(c.evaluate(&bits).unwrap(), ones >= 2);
        }
    }

    #[test]
    fn cycle_rejected() {
        let c = ThresholdCircuit {
            inputs: 1,
            gates: vec![
                Gate { id: 2, kind: GateKind::Not, k: 0, preds: vec![3] },
                Gate { id: 3, kind: GateKind::Not, k: 0, preds: vec![2] },
            ],
            output: 3,
        };
        assert!(c.checked().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ThresholdCircuit {
            inputs: 2,
            gates: vec![Gate {
                id: 3,
                kind: GateKind::Threshold,
                k: 1,
                preds: vec![1, 2],
            }],
            output: 3,
        };
        let back = ThresholdCircuit::from_json_str(&c.to_json_string()).unwrap();
        assert_eq!(c, back);
    }
}
