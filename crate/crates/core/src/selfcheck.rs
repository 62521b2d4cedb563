//! The embedded invariant suite behind the `selfcheck` command: selector
//! identities, gate truth tables, and small-corpus compiler equivalences.
//! A fault can be injected to prove the checks actually bite.

use serde::{Deserialize, Serialize};

use crate::compile::CompileOptions;
use crate::corpus::{
    self, random_inputs, CircuitCorpusParams, GraphCorpusParams,
};
use crate::cot::{compile_cot, verify_cot};
use crate::fxp;
use crate::gates::{self, PrecisionClass};
use crate::looped::{compile_circuit_looped, compile_looped, verify_circuit_looped, verify_looped};
use crate::sampler::substream;
use crate::tfcore::FeedForward;

/// Test hook: deliberately break one component so the suite must name it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Corrupt a majority gate's weight table.
    GateTable,
    /// Corrupt a compiled chain-of-thought expert.
    CotExpert,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfCheckReport {
    pub pass: bool,
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| !c.pass)
    }
}

pub fn run(fault: Option<Fault>) -> SelfCheckReport {
    let mut checks = Vec::new();

    // orthogonal selector, exhaustive to s = 8
    let mut failures = 0usize;
    for s in 2..=8u32 {
        for i in 1..(1u64 << s) {
            for j in 1..(1u64 << s) {
                let v = fxp::selector_value(i, j, s).unwrap();
                let want = if i == j { fxp::selector_format(s).unwrap().scale() } else { 0 };
                if v.raw() != want {
                    failures += 1;
                }
            }
        }
    }
    checks.push(CheckResult {
        name: "selector-identity".into(),
        pass: failures == 0,
        detail: format!("{failures} mismatches over s=2..8"),
    });

    // gate truth tables to n = 6
    let mut failures = 0usize;
    for n in 1..=6usize {
        let fmt = fxp::FxFormat::new(fxp::ceil_log2(n as u64 + 2) + 2, 4).unwrap();
        let mut maj = gates::ff_majority(n, fmt);
        if fault == Some(Fault::GateTable) && n == 3 {
            let raw = maj.w1.raw_at(0, 0);
            maj.w1.set_raw(0, 0, raw + fmt.scale()).unwrap();
        }
        let all = gates::ff_and(n, fmt);
        let any = gates::ff_or(n, fmt);
        let thresholds: Vec<_> = (0..=n).map(|k| (k, gates::ff_threshold(n, k, fmt))).collect();
        for m in 0..(1usize << n) {
            let bits: Vec<bool> = (0..n).map(|i| (m >> i) & 1 == 1).collect();
            let ones = bits.iter().filter(|&&b| b).count();
            let x = gates::interleaved_input(&bits, fmt).unwrap();
            let val = |ff: &gates::FFWeights| ff.apply(&x).unwrap().raw_at(0) >> fmt.fraction_bits;
            if val(&all) != (ones == n) as i128
                || val(&any) != (ones > 0) as i128
                || val(&maj) != (ones >= n / 2 + 1) as i128
            {
                failures += 1;
                continue;
            }
            for (k, th) in &thresholds {
                if val(th) != (ones >= *k) as i128 {
                    failures += 1;
                }
            }
        }
    }
    checks.push(CheckResult {
        name: "gate-truth-tables".into(),
        pass: failures == 0,
        detail: format!("{failures} mismatches over n=1..6"),
    });

    // small-corpus compiler equivalences
    let opts = CompileOptions::default();
    let params = GraphCorpusParams {
        max_inputs: 6,
        max_nodes: 16,
        ..GraphCorpusParams::default()
    };
    let mut detail = String::new();
    let mut pass = true;
    for (i, g) in corpus::graph_corpus(0xC0FFEE, 6, &params).iter().enumerate() {
        let inputs = random_inputs(&mut substream(1, &[i as u64]), g, 8);
        let mut compiled = match compile_cot(g, &opts) {
            Ok(c) => c,
            Err(e) => {
                pass = false;
                detail = format!("graph {i}: chain-of-thought compile failed: {e}");
                break;
            }
        };
        if fault == Some(Fault::CotExpert) && i == 0 {
            if let FeedForward::Moe { experts, .. } = &mut compiled.program.layers[0].ff {
                for e in experts.iter_mut() {
                    for w in e.w2.iter_raw_mut() {
                        *w = 0;
                    }
                }
            }
        }
        let report = verify_cot(g, &compiled, &inputs).unwrap();
        if !report.pass {
            pass = false;
            detail = format!("graph {i}: chain-of-thought disagrees with the evaluator");
            break;
        }
        let looped = match compile_looped(g, &opts) {
            Ok(c) => c,
            Err(e) => {
                pass = false;
                detail = format!("graph {i}: looped compile failed: {e}");
                break;
            }
        };
        let report = verify_looped(g, &looped, &inputs).unwrap();
        if !report.pass {
            pass = false;
            detail = format!("graph {i}: looped program disagrees with the evaluator");
            break;
        }
    }
    checks.push(CheckResult {
        name: "compiler-equivalence".into(),
        pass,
        detail,
    });

    // circuits, exhaustive on small input counts
    let cparams = CircuitCorpusParams {
        max_inputs: 6,
        max_depth: 4,
        ..CircuitCorpusParams::default()
    };
    let mut pass = true;
    let mut detail = String::new();
    for (i, c) in corpus::circuit_corpus(0xBEEF, 4, &cparams).iter().enumerate() {
        let compiled = match compile_circuit_looped(c, PrecisionClass::LogBit, &opts) {
            Ok(p) => p,
            Err(e) => {
                pass = false;
                detail = format!("circuit {i}: compile failed: {e}");
                break;
            }
        };
        let inputs: Vec<Vec<bool>> = (0..(1u32 << c.inputs))
            .map(|m| (0..c.inputs).map(|b| (m >> b) & 1 == 1).collect())
            .collect();
        let report = verify_circuit_looped(c, &compiled, &inputs).unwrap();
        if !report.pass {
            pass = false;
            detail = format!("circuit {i}: looped program disagrees with the evaluator");
            break;
        }
    }
    checks.push(CheckResult {
        name: "circuit-equivalence".into(),
        pass,
        detail,
    });

    SelfCheckReport {
        pass: checks.iter().all(|c| c.pass),
        checks,
    }
}
