//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//! Run with `cargo test -p dagtf --test acceptance -- --nocapture`.

use std::time::Instant;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use dagtf::compile::CompileOptions;
use dagtf::corpus::{
    circuit_corpus, graph_corpus, random_inputs, CircuitCorpusParams, GraphCorpusParams,
};
use dagtf::cot::{compile_cot, cot_step_count, verify_cot};
use dagtf::fxp;
use dagtf::gates;
use dagtf::graph::{self, CompGraph};
use dagtf::looped::{
    compile_circuit_looped, compile_looped, loop_count, verify_circuit_looped, verify_looped,
};
use dagtf::relations::{brute_count, enumerate_solutions, PathIndepSet, SatInstance, SelfReducible};
use dagtf::sampler::{
    self, exact_output_law, mixing_weight, rejection_sample, required_t, self_consistency_median,
    substream, tv_distance, weak_oracle_sample, FailureMode, PSource, WeakOracleConfig,
};

const CORPUS_SEED: u64 = 0xDA6_7F01;

fn report(criterion: &str, started: Instant, detail: &str) {
    println!(
        "[acceptance] {criterion}: PASS in {:.1}s: {detail}",
        started.elapsed().as_secs_f64()
    );
}

fn corpus_200() -> Vec<CompGraph> {
    graph_corpus(CORPUS_SEED, 200, &GraphCorpusParams::default())
}

fn corpus_inputs(g: &CompGraph, index: usize) -> Vec<Vec<usize>> {
    random_inputs(&mut substream(CORPUS_SEED, &[0x1A, index as u64]), g, 64)
}

#[test]
fn criterion_01_selector_identity() {
    let t0 = Instant::now();
    let mut checked = 0u64;
    for s in 2..=8u32 {
        let fmt = fxp::selector_format(s).unwrap();
        for i in 1..(1u64 << s) {
            for j in 1..(1u64 << s) {
                let v = fxp::selector_value(i, j, s).unwrap();
                let want = if i == j { fmt.scale() } else { 0 };
                assert_eq!(v.raw(), want, "selector failed at s={s} i={i} j={j}");
                checked += 1;
            }
        }
    }
    report(
        "criterion 01 (orthogonal selector)",
        t0,
        &format!("{checked} (i, j) pairs exact over s=2..8"),
    );
}

#[test]
fn criterion_02_gate_library() {
    let t0 = Instant::now();
    let mut checked = 0u64;
    for n in 1..=10usize {
        let fmt = fxp::FxFormat::new(fxp::ceil_log2(n as u64 + 2) + 2, 4).unwrap();
        let and = gates::ff_and(n, fmt);
        let or = gates::ff_or(n, fmt);
        let maj = gates::ff_majority(n, fmt);
        let thresholds: Vec<_> = (0..=n).map(|k| (k, gates::ff_threshold(n, k, fmt))).collect();
        for m in 0..(1usize << n) {
            let bits: Vec<bool> = (0..n).map(|i| (m >> i) & 1 == 1).collect();
            let ones = bits.iter().filter(|&&b| b).count();
            let x = gates::interleaved_input(&bits, fmt).unwrap();
            let val = |ff: &gates::FFWeights| ff.apply(&x).unwrap().raw_at(0) >> fmt.fraction_bits;
            assert_eq!(val(&and), (ones == n) as i128, "AND n={n} m={m}");
            assert_eq!(val(&or), (ones > 0) as i128, "OR n={n} m={m}");
            assert_eq!(val(&maj), (ones >= n / 2 + 1) as i128, "MAJ n={n} m={m}");
            for (k, th) in &thresholds {
                assert_eq!(val(th), (ones >= *k) as i128, "THRESHOLD n={n} k={k} m={m}");
                checked += 1;
            }
            checked += 3;
        }
    }
    let fmt = fxp::FxFormat::new(4, 4).unwrap();
    let not = gates::ff_not(fmt);
    for b in [false, true] {
        let x = gates::interleaved_input(&[b], fmt).unwrap();
        assert_eq!(not.apply(&x).unwrap().raw_at(0) >> 4, (!b) as i128);
        checked += 1;
    }
    report(
        "criterion 02 (gate library)",
        t0,
        &format!("{checked} gate evaluations exact for n<=10, all k"),
    );
}

#[test]
fn criterion_03_cot_simulation() {
    let t0 = Instant::now();
    let opts = CompileOptions::default();
    let corpus = corpus_200();
    let mut runs = 0usize;
    for (i, g) in corpus.iter().enumerate() {
        let compiled = compile_cot(g, &opts)
            .unwrap_or_else(|e| panic!("graph {i} failed to compile: {e}"));
        assert_eq!(
            compiled.steps,
            cot_step_count(g),
            "step-count law violated on graph {i}"
        );
        let inputs = corpus_inputs(g, i);
        let report_i = verify_cot(g, &compiled, &inputs).unwrap();
        assert!(
            report_i.pass,
            "graph {i}: {} mismatches, trace_transparent={}",
            report_i.mismatches.len(),
            report_i.trace_transparent
        );
        runs += inputs.len();
    }
    report(
        "criterion 03 (chain-of-thought simulation)",
        t0,
        &format!("200 graphs x 64 inputs = {runs} runs, steps = non-input count exactly"),
    );
}

#[test]
fn criterion_04_looped_simulation() {
    let t0 = Instant::now();
    let opts = CompileOptions::default();
    let corpus = corpus_200();
    let mut runs = 0usize;
    let mut max_w = 0usize;
    for (i, g) in corpus.iter().enumerate() {
        let compiled = compile_looped(g, &opts)
            .unwrap_or_else(|e| panic!("graph {i} failed to compile: {e}"));
        assert_eq!(
            compiled.loops,
            loop_count(g).unwrap(),
            "loop law violated on graph {i}"
        );
        max_w = max_w.max(compiled.layout.width_const);
        let inputs = corpus_inputs(g, i);
        let report_i = verify_looped(g, &compiled, &inputs).unwrap();
        assert!(
            report_i.pass,
            "graph {i}: {} mismatches, divergence {:?}",
            report_i.mismatches.len(),
            report_i.first_divergence
        );
        runs += inputs.len();
    }
    report(
        "criterion 04 (looped simulation)",
        t0,
        &format!("200 graphs x 64 inputs = {runs} runs, loops = depth, layer audit clean, max W = {max_w}"),
    );
}

#[test]
fn criterion_05_circuit_correspondence() {
    let t0 = Instant::now();
    let opts = CompileOptions::default();
    let corpus = circuit_corpus(CORPUS_SEED, 100, &CircuitCorpusParams::default());
    let mut runs = 0usize;
    for (i, c) in corpus.iter().enumerate() {
        let compiled = compile_circuit_looped(c, gates::PrecisionClass::LogBit, &opts)
            .unwrap_or_else(|e| panic!("circuit {i} failed to compile: {e}"));
        assert_eq!(compiled.loops, c.depth() as u64, "loop law on circuit {i}");
        let inputs: Vec<Vec<bool>> = (0..(1u32 << c.inputs))
            .map(|m| (0..c.inputs).map(|b| (m >> b) & 1 == 1).collect())
            .collect();
        let report_i = verify_circuit_looped(c, &compiled, &inputs).unwrap();
        assert!(
            report_i.pass,
            "circuit {i}: {} mismatches",
            report_i.mismatches.len()
        );
        runs += inputs.len();
    }
    report(
        "criterion 05 (circuit correspondence)",
        t0,
        &format!("100 circuits, {runs} exhaustive runs, loops = circuit depth"),
    );
}

#[test]
fn criterion_06_strict_layered_expansion() {
    let t0 = Instant::now();
    let corpus = corpus_200();
    for (i, g) in corpus.iter().enumerate() {
        let e = graph::strict_layered_expansion(g).unwrap();
        assert!(e.validate().is_empty(), "expansion of graph {i} invalid");
        let ld_g = graph::layerize(g).unwrap();
        let ld_e = graph::layerize(&e).unwrap();
        assert_eq!(ld_g.depth(), ld_e.depth(), "depth changed on graph {i}");
        for n in &e.nodes {
            for p in &n.preds {
                assert_eq!(
                    ld_e.depth_of[&n.id],
                    ld_e.depth_of[p] + 1,
                    "non-adjacent edge {}->{} in expansion of graph {i}",
                    p,
                    n.id
                );
            }
        }
        let space = graph::parallel_space(&e).unwrap();
        let widest = ld_e.layers.iter().map(|l| l.len()).max().unwrap();
        assert!(space >= widest, "space bound broken on graph {i}");
        for x in corpus_inputs(g, i) {
            assert_eq!(
                graph::evaluate(&e, &x).unwrap(),
                graph::evaluate(g, &x).unwrap(),
                "expansion changed the function of graph {i}"
            );
        }
    }
    report(
        "criterion 06 (strict layered expansion)",
        t0,
        "function preserved, edges adjacent, depth exact on all 200 graphs",
    );
}

#[test]
fn criterion_07_self_consistency_bound() {
    let t0 = Instant::now();
    let gamma = 0.25;
    let delta = 0.05;
    let alpha = 0.02;
    let t = required_t(gamma, delta, 2);
    assert_eq!(t, 119, "T formula drifted");
    let rel = PathIndepSet::new(6);
    let truth = dagtf::relations::brute_conditional(&rel, &[]).unwrap().probs;
    let lambda = mixing_weight(&truth, alpha);
    let bound = (alpha / 2.0).sqrt() + lambda;
    let cfg = WeakOracleConfig::new(gamma, alpha, FailureMode::AdversarialArgmaxFlip, 0);
    let reps = 10_000usize;
    let mut failures = 0usize;
    for rep in 0..reps {
        let mut rng = substream(0x5E1F, &[rep as u64]);
        let draws: Vec<_> = (0..t)
            .map(|_| weak_oracle_sample(&cfg, &rel, &[], &mut rng).unwrap())
            .collect();
        let med = self_consistency_median(&draws);
        let dev = med
            .probs
            .iter()
            .zip(&truth)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if dev > bound {
            failures += 1;
        }
    }
    let budget = (delta * reps as f64 + 3.0 * (reps as f64 * delta * (1.0 - delta)).sqrt()) as usize;
    assert!(
        failures <= budget,
        "median deviation failures {failures} exceed {budget}"
    );
    report(
        "criterion 07 (self-consistency bound)",
        t0,
        &format!("T=119, {failures}/{reps} deviation failures within budget {budget}"),
    );
}

/// Oracle quality keeping per-token conditionals within the acceptance
/// window: alpha = 1 / (4 g^2 |R|^2).
fn calibrated_alpha<R: SelfReducible>(rel: &R) -> f64 {
    let g = rel.solution_len() as f64;
    let c = brute_count(rel).unwrap() as f64;
    1.0 / (4.0 * g * g * c * c)
}

#[test]
fn criterion_08_fpaus_contract() {
    let t0 = Instant::now();
    let epsilon = 0.1;
    let mut details = Vec::new();
    for (k, want) in [(6usize, 21u64), (8usize, 55u64)] {
        let rel = PathIndepSet::new(k);
        assert_eq!(brute_count(&rel).unwrap(), want);
        let cfg = WeakOracleConfig::new(
            0.25,
            calibrated_alpha(&rel),
            FailureMode::AdversarialArgmaxFlip,
            0,
        );
        let law = exact_output_law(&cfg, &rel, epsilon, 0xFA05 + k as u64, PSource::OracleExact)
            .unwrap();
        assert!(
            law.tv_to_uniform <= epsilon,
            "k={k}: exact TV {} > {epsilon}",
            law.tv_to_uniform
        );

        // empirical: 50k accepted samples from the live sampler
        let solutions = enumerate_solutions(&rel).unwrap();
        let mut counts = vec![0u64; solutions.len()];
        let target = 50_000u64;
        let mut accepted = 0u64;
        let mut seed = 0u64;
        while accepted < target {
            match rejection_sample(&cfg, &rel, epsilon, 0x0BB0 + seed, PSource::OracleExact) {
                Ok((y, _)) => {
                    let idx = solutions.iter().position(|s| s == &y).unwrap();
                    counts[idx] += 1;
                    accepted += 1;
                }
                Err(sampler::SampleError::AllRejected { .. }) => {}
                Err(e) => panic!("unexpected sampler error: {e}"),
            }
            seed += 1;
        }
        let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / target as f64).collect();
        let uniform = vec![1.0 / solutions.len() as f64; solutions.len()];
        let tv_emp = tv_distance(&emp, &uniform).unwrap();
        assert!(tv_emp <= 0.12, "k={k}: empirical TV {tv_emp} > 0.12");
        details.push(format!(
            "k={k}: exact TV {:.4}, empirical TV {:.4} over {target} samples",
            law.tv_to_uniform, tv_emp
        ));
    }
    report("criterion 08 (almost-uniform sampling)", t0, &details.join("; "));
}

#[test]
fn criterion_09_uniform_acceptance() {
    let t0 = Instant::now();
    let rel = PathIndepSet::new(6);
    let solutions = enumerate_solutions(&rel).unwrap();
    let cells = solutions.len();
    let cfg = WeakOracleConfig::new(
        0.25,
        calibrated_alpha(&rel),
        FailureMode::AdversarialArgmaxFlip,
        0,
    );
    let per_seed = 1050u64; // 50 expected per cell
    let chi = ChiSquared::new((cells - 1) as f64).unwrap();
    let mut passes = 0usize;
    let mut worst_p = 1.0f64;
    for seed_idx in 0..20u64 {
        let mut counts = vec![0u64; cells];
        let mut accepted = 0u64;
        let mut sub = 0u64;
        while accepted < per_seed {
            match rejection_sample(
                &cfg,
                &rel,
                0.1,
                0xC41 + seed_idx * 1_000_003 + sub,
                PSource::OracleExact,
            ) {
                Ok((y, _)) => {
                    let idx = solutions.iter().position(|s| s == &y).unwrap();
                    counts[idx] += 1;
                    accepted += 1;
                }
                Err(sampler::SampleError::AllRejected { .. }) => {}
                Err(e) => panic!("unexpected sampler error: {e}"),
            }
            sub += 1;
        }
        let expected = per_seed as f64 / cells as f64;
        let stat: f64 = counts
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        let p_value = 1.0 - chi.cdf(stat);
        worst_p = worst_p.min(p_value);
        if p_value >= 0.01 {
            passes += 1;
        }
    }
    assert!(passes >= 19, "only {passes}/20 seeds pass the chi-square test");
    report(
        "criterion 09 (uniform acceptance)",
        t0,
        &format!("{passes}/20 seeds not rejected at p=0.01 (worst p={worst_p:.3})"),
    );
}

#[test]
fn criterion_10_counting() {
    let t0 = Instant::now();
    let mut details = Vec::new();
    let sat = SatInstance::new(3, vec![vec![1, 2]]).unwrap();
    let instances: Vec<(String, Box<dyn Fn(u64) -> Result<f64, sampler::SampleError>>, u64)> = vec![
        (
            "path k=8".into(),
            {
                let rel = PathIndepSet::new(8);
                let cfg = WeakOracleConfig::new(
                    0.25,
                    calibrated_alpha(&rel),
                    FailureMode::AdversarialArgmaxFlip,
                    0,
                );
                Box::new(move |seed| {
                    sampler::count_estimate(&cfg, &rel, 0.05, seed).map(|(c, _)| c)
                })
            },
            55,
        ),
        (
            "path k=6".into(),
            {
                let rel = PathIndepSet::new(6);
                let cfg = WeakOracleConfig::new(
                    0.25,
                    calibrated_alpha(&rel),
                    FailureMode::AdversarialArgmaxFlip,
                    0,
                );
                Box::new(move |seed| {
                    sampler::count_estimate(&cfg, &rel, 0.05, seed).map(|(c, _)| c)
                })
            },
            21,
        ),
        (
            "sat 3 vars".into(),
            {
                let cfg = WeakOracleConfig::new(
                    0.25,
                    calibrated_alpha(&sat),
                    FailureMode::AdversarialArgmaxFlip,
                    0,
                );
                let rel = sat.clone();
                Box::new(move |seed| {
                    sampler::count_estimate(&cfg, &rel, 0.05, seed).map(|(c, _)| c)
                })
            },
            6,
        ),
    ];
    for (name, estimate, truth) in &instances {
        let mut good = 0usize;
        for seed in 0..100u64 {
            let c_hat = estimate(0xC0 + seed).unwrap();
            if c_hat >= 0.8 * *truth as f64 && c_hat <= 1.2 * *truth as f64 {
                good += 1;
            }
        }
        assert!(good >= 90, "{name}: only {good}/100 runs within 20% of {truth}");
        details.push(format!("{name}: {good}/100 within (1 +- 0.2) x {truth}"));
    }
    report("criterion 10 (counting from sampling)", t0, &details.join("; "));
}

#[test]
fn criterion_11_negative_controls() {
    let t0 = Instant::now();
    let opts = CompileOptions::default();

    // corrupted chain-of-thought experts surface as named mismatches
    let g = {
        let corpus = graph_corpus(CORPUS_SEED, 3, &GraphCorpusParams::default());
        corpus.into_iter().next().unwrap()
    };
    let mut compiled = compile_cot(&g, &opts).unwrap();
    if let dagtf::tfcore::FeedForward::Moe { experts, .. } = &mut compiled.program.layers[0].ff {
        for e in experts.iter_mut() {
            for w in e.w2.iter_raw_mut() {
                *w = 0;
            }
        }
    }
    let inputs = corpus_inputs(&g, 0);
    let rep = verify_cot(&g, &compiled, &inputs).unwrap();
    assert!(!rep.pass && !rep.mismatches.is_empty());

    // corrupted positional rows pinpoint the first divergent loop
    let g2 = dagtf::graph::CompGraph::from_json_str(
        &graph_corpus(CORPUS_SEED, 2, &GraphCorpusParams::default())[1].to_json_string(),
    )
    .unwrap();
    let mut looped = compile_looped(&g2, &opts).unwrap();
    if looped.program.pos_table.rows.len() > 1 {
        let fmtscale = looped.program.fmt.scale();
        let row = &mut looped.program.pos_table.rows[1][0];
        let cur = row.raw_at(looped.layout.off_value);
        row.set_raw(looped.layout.off_value, cur + fmtscale).unwrap();
        // either the layer audit pinpoints the divergence or the arithmetic
        // overflow check names the site; silence is the only failure
        match verify_looped(&g2, &looped, &corpus_inputs(&g2, 1)) {
            Ok(rep) => assert!(!rep.pass, "corrupted positional table went unnoticed"),
            Err(e) => {
                let msg = e.to_string();
                assert!(
                    msg.contains("overflow") || msg.contains("diverg"),
                    "diagnostic lacks a name: {msg}"
                );
            }
        }
    }

    // margin violations are diagnosed, not silently committed
    let fmt = fxp::FxFormat::new(4, 4).unwrap();
    let mut bad = dagtf::linalg::FxVector::zeros(3, fmt);
    bad.set_raw(0, 15).unwrap();
    bad.set_raw(1, 14).unwrap();
    assert!(matches!(
        gates::onehot_threshold_checked(&bad, 2),
        Err(gates::GateError::MarginViolation { above: 2 })
    ));

    // overflow names the operation site instead of wrapping
    let small = fxp::FxFormat::new(2, 2).unwrap();
    match fxp::quantize(5, 1, small) {
        Err(fxp::FxError::Overflow { op, .. }) => assert_eq!(op, "quantize"),
        other => panic!("expected overflow, got {other:?}"),
    }
    let a = fxp::FxScalar::from_int(3, small).unwrap();
    match fxp::fx_mul(a, a) {
        Err(fxp::FxError::Overflow { op, .. }) => assert_eq!(op, "fx_mul"),
        other => panic!("expected overflow, got {other:?}"),
    }

    // budget overruns are rejected by name
    let ccot = compile_cot(&g, &opts).unwrap();
    assert!(matches!(
        dagtf::tfcore::run_cot(&ccot.program, &vec![0; g.num_inputs()], 10_000),
        Err(dagtf::tfcore::ProgError::BudgetExceedsTable { .. })
    ));

    // the selfcheck fault hooks produce named failures
    let rep = dagtf::selfcheck::run(Some(dagtf::selfcheck::Fault::GateTable));
    assert_eq!(rep.first_failure().unwrap().name, "gate-truth-tables");
    let rep = dagtf::selfcheck::run(Some(dagtf::selfcheck::Fault::CotExpert));
    assert_eq!(rep.first_failure().unwrap().name, "compiler-equivalence");

    report(
        "criterion 11 (negative controls)",
        t0,
        "all injected faults produced named diagnostics",
    );
}
