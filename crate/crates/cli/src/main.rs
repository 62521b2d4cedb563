//! Batch command-line front end: compile computation graphs and threshold
//! circuits into transformer programs, run and verify them against the
//! graph/circuit evaluators, and drive the weak-oracle sampling pipeline.
//! Every report embeds a reproducibility manifest (command, input hash,
//! seed, config echo) and identical invocations produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use dagtf::circuit::ThresholdCircuit;
use dagtf::compile::CompileOptions;
use dagtf::cot::{compile_cot, cot_step_count, verify_cot};
use dagtf::gates::PrecisionClass;
use dagtf::graph::CompGraph;
use dagtf::looped::{compile_circuit_looped, compile_looped, loop_count, verify_looped};
use dagtf::relations::{
    brute_count, enumerate_solutions, PathIndepSet, SatInstance, SelfReducible,
};
use dagtf::sampler::{
    count_estimate, exact_output_law, rejection_sample, rejection_trials, required_t,
    substream, tv_distance, FailureMode, PSource, SampleError, SamplerReport, WeakOracleConfig,
};
use dagtf::tfcore::{run_cot, run_looped, Mode, TransformerProgram};

const REPORT_FORMAT: &str = "dagtf-report/1";

#[derive(Parser)]
#[command(name = "dagtf", version, about = "compile DAGs and circuits to exact fixed-point transformer programs; sample and count over self-reducible relations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    Log,
    Const,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyMode {
    Cot,
    Loop,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMode {
    OracleExact,
    Estimated,
}

#[derive(Clone, Copy, ValueEnum)]
enum FailureModeArg {
    UniformGarbage,
    Antipodal,
    ArgmaxFlip,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
}

#[derive(Args)]
struct OracleArgs {
    /// Excess success probability of the weak oracle, in (0, 1/2).
    #[arg(long, default_value_t = 0.25)]
    gamma: f64,
    /// Cross-entropy budget of good predictions; defaults to the
    /// per-instance schedule 1 / (4 g^2 |R|^2).
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-position confidence split.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Failure-mode distribution of bad reasoning paths.
    #[arg(long, value_enum, default_value_t = FailureModeArg::UniformGarbage)]
    failure_mode: FailureModeArg,
    /// Mandatory seed; there is no wall-clock default.
    #[arg(long)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a graph into a chain-of-thought program (one step per node).
    CompileCot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the slot-layout manifest.
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Compile a graph into a looped program (one loop per depth layer).
    CompileLoop {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Compile a threshold circuit into a looped program.
    CompileCircuit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Precision::Log)]
        precision: Precision,
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Run a compiled program on one input.
    Run {
        /// Program file produced by a compile command.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated input symbols, e.g. "1,0,1".
        tokens: String,
        /// Step/loop override; must not fall below the program's declared
        /// budget.
        #[arg(long)]
        budget: Option<u64>,
        /// Also write the decoded-token / hidden-state trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compile a graph in the chosen mode and compare against the evaluator
    /// on sampled inputs.
    Verify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: VerifyMode,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw almost-uniform solutions of a self-reducible instance.
    Sample {
        #[arg(long)]
        instance: PathBuf,
        #[command(flatten)]
        oracle: OracleArgs,
        /// Total-variation target.
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = SampleMode::OracleExact)]
        mode: SampleMode,
        /// Accepted samples to collect for the empirical histogram.
        #[arg(long, default_value_t = 1000)]
        samples: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the solution count of a self-reducible instance.
    Count {
        #[arg(long)]
        instance: PathBuf,
        #[command(flatten)]
        oracle: OracleArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the embedded invariant suite.
    Selfcheck,
}

// ---------------------------------------------------------------------------
// manifest and report plumbing

#[derive(Serialize)]
struct Manifest {
    format: &'static str,
    command: String,
    input_sha256: String,
    seed: Option<u64>,
    config: BTreeMap<String, String>,
}

fn manifest(command: &str, input: &[u8], seed: Option<u64>, config: &[(&str, String)]) -> Manifest {
    let mut hasher = Sha256::new();
    hasher.update(input);
    Manifest {
        format: REPORT_FORMAT,
        command: command.to_string(),
        input_sha256: format!("{:x}", hasher.finalize()),
        seed,
        config: config
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            fs::write(path, text.as_bytes())
                .with_context(|| format!("writing {}", path.display()))?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// instances

#[derive(Clone)]
enum Instance {
    Sat(SatInstance),
    Path(PathIndepSet),
}

impl Instance {
    fn load(path: &Path) -> Result<(Instance, Vec<u8>)> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let text = String::from_utf8_lossy(&bytes);
        if path.extension().and_then(|e| e.to_str()) == Some("cnf") {
            let sat = SatInstance::from_dimacs(&text)?;
            return Ok((Instance::Sat(sat), bytes));
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| "instance file is not valid JSON")?;
        let kind = value
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| anyhow!("instance file lacks a \"kind\" field"))?;
        let inst = match kind {
            "sat" => {
                let vars = value
                    .get("vars")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| anyhow!("sat instance lacks \"vars\""))?;
                let clauses: Vec<Vec<i32>> =
                    serde_json::from_value(value.get("clauses").cloned().unwrap_or_default())
                        .context("bad \"clauses\"")?;
                Instance::Sat(SatInstance::new(vars as usize, clauses)?)
            }
            "path-independent-set" => {
                let k = value
                    .get("k")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| anyhow!("path instance lacks \"k\""))?;
                Instance::Path(PathIndepSet::new(k as usize))
            }
            other => bail!("unknown instance kind {other:?}"),
        };
        Ok((inst, bytes))
    }
}

impl SelfReducible for Instance {
    fn alphabet_len(&self) -> usize {
        match self {
            Instance::Sat(x) => x.alphabet_len(),
            Instance::Path(x) => x.alphabet_len(),
        }
    }
    fn solution_len(&self) -> usize {
        match self {
            Instance::Sat(x) => x.solution_len(),
            Instance::Path(x) => x.solution_len(),
        }
    }
    fn reduce(&self, prefix: &[usize]) -> Self {
        match self {
            Instance::Sat(x) => Instance::Sat(x.reduce(prefix)),
            Instance::Path(x) => Instance::Path(x.reduce(prefix)),
        }
    }
    fn verify(&self, y: &[usize]) -> bool {
        match self {
            Instance::Sat(x) => x.verify(y),
            Instance::Path(x) => x.verify(y),
        }
    }
    fn size(&self) -> usize {
        match self {
            Instance::Sat(x) => x.size(),
            Instance::Path(x) => x.size(),
        }
    }
}

fn resolve_oracle(args: &OracleArgs, inst: &Instance) -> Result<WeakOracleConfig> {
    let alpha = match args.alpha {
        Some(a) => a,
        None => {
            let g = inst.solution_len().max(1) as f64;
            let c = brute_count(inst)? as f64;
            if c == 0.0 {
                1e-6
            } else {
                1.0 / (4.0 * g * g * c * c)
            }
        }
    };
    let mode = match args.failure_mode {
        FailureModeArg::UniformGarbage => FailureMode::UniformGarbage,
        FailureModeArg::Antipodal => FailureMode::Antipodal,
        FailureModeArg::ArgmaxFlip => FailureMode::AdversarialArgmaxFlip,
    };
    Ok(WeakOracleConfig::new(args.gamma, alpha, mode, args.seed))
}

// ---------------------------------------------------------------------------
// commands

fn load_graph(path: &Path) -> Result<(CompGraph, Vec<u8>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let g = CompGraph::from_json_str(&String::from_utf8_lossy(&bytes))?;
    Ok((g, bytes))
}

#[derive(Serialize)]
struct CompileReport {
    manifest: Manifest,
    mode: String,
    size: usize,
    depth: u64,
    steps: u64,
    loops: u64,
    embed_dim: usize,
    program_sha256: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn cmd_compile_cot(input: &Path, out: &Path, layout: Option<&Path>) -> Result<()> {
    let (g, bytes) = load_graph(input)?;
    let compiled = compile_cot(&g, &CompileOptions::default())?;
    let text = compiled.program.to_json_string();
    fs::write(out, text.as_bytes())?;
    if let Some(lp) = layout {
        fs::write(lp, serde_json::to_string_pretty(&compiled.layout)?)?;
    }
    let report = CompileReport {
        manifest: manifest("compile-cot", &bytes, None, &[]),
        mode: "cot".into(),
        size: g.num_nodes(),
        depth: loop_count(&g).map_err(|e| anyhow!("{e}"))?,
        steps: compiled.steps,
        loops: loop_count(&g).map_err(|e| anyhow!("{e}"))?,
        embed_dim: compiled.program.embed_dim,
        program_sha256: sha_hex(text.as_bytes()),
    };
    emit(&report, None)
}

fn cmd_compile_loop(input: &Path, out: &Path, layout: Option<&Path>) -> Result<()> {
    let (g, bytes) = load_graph(input)?;
    let compiled = compile_looped(&g, &CompileOptions::default())?;
    let text = compiled.program.to_json_string();
    fs::write(out, text.as_bytes())?;
    if let Some(lp) = layout {
        fs::write(lp, serde_json::to_string_pretty(&compiled.layout)?)?;
    }
    let report = CompileReport {
        manifest: manifest("compile-loop", &bytes, None, &[]),
        mode: "looped".into(),
        size: g.num_nodes(),
        depth: compiled.loops,
        steps: cot_step_count(&g),
        loops: compiled.loops,
        embed_dim: compiled.program.embed_dim,
        program_sha256: sha_hex(text.as_bytes()),
    };
    emit(&report, None)
}

fn cmd_compile_circuit(
    input: &Path,
    out: &Path,
    precision: Precision,
    layout: Option<&Path>,
) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let c = ThresholdCircuit::from_json_str(&String::from_utf8_lossy(&bytes))?;
    let class = match precision {
        Precision::Log => PrecisionClass::LogBit,
        Precision::Const => PrecisionClass::ConstantBit,
    };
    let compiled = compile_circuit_looped(&c, class, &CompileOptions::default())?;
    let text = compiled.program.to_json_string();
    fs::write(out, text.as_bytes())?;
    if let Some(lp) = layout {
        fs::write(lp, serde_json::to_string_pretty(&compiled.layout)?)?;
    }
    let report = CompileReport {
        manifest: manifest("compile-circuit", &bytes, None, &[]),
        mode: "looped-circuit".into(),
        size: c.inputs + c.gates.len(),
        depth: compiled.loops,
        steps: c.gates.len() as u64,
        loops: compiled.loops,
        embed_dim: compiled.program.embed_dim,
        program_sha256: sha_hex(text.as_bytes()),
    };
    emit(&report, None)
}

#[derive(Serialize)]
struct RunReport {
    manifest: Manifest,
    answers: Vec<String>,
    steps_or_loops: u64,
    pass: Option<bool>,
}

fn cmd_run(
    input: &Path,
    tokens: &str,
    budget: Option<u64>,
    trace_out: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let prog = TransformerProgram::from_json_str(&String::from_utf8_lossy(&bytes))?;
    let toks: Vec<usize> = tokens
        .split(',')
        .map(|t| {
            prog.vocab
                .iter()
                .position(|v| v == t.trim())
                .ok_or_else(|| anyhow!("token {t:?} not in the program vocabulary"))
        })
        .collect::<Result<_>>()?;
    let budget = budget.unwrap_or(prog.declared_budget);
    if budget < prog.declared_budget {
        bail!(
            "BudgetTooSmall: {budget} below the required {}",
            prog.declared_budget
        );
    }
    let (answer, trace) = match prog.mode {
        Mode::Cot => run_cot(&prog, &toks, budget)?,
        Mode::Looped => run_looped(&prog, &toks, budget)?,
    };
    if let Some(tp) = trace_out {
        fs::write(tp, serde_json::to_string(&trace)?)?;
    }
    let report = RunReport {
        manifest: manifest(
            "run",
            &bytes,
            None,
            &[("tokens", tokens.to_string()), ("budget", budget.to_string())],
        ),
        answers: answer.iter().map(|&a| prog.vocab[a].clone()).collect(),
        steps_or_loops: budget,
        pass: None,
    };
    emit(&report, out)
}

#[derive(Serialize)]
struct VerifyReportOut {
    manifest: Manifest,
    pass: bool,
    mode: String,
    size: usize,
    depth: u64,
    steps: u64,
    loops: u64,
    inputs_checked: usize,
    mismatches: usize,
}

fn cmd_verify(
    input: &Path,
    mode: VerifyMode,
    samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<bool> {
    let (g, bytes) = load_graph(input)?;
    let mut rng = substream(seed, &[0xCE11]);
    let inputs = dagtf::corpus::random_inputs(&mut rng, &g, samples);
    let (pass, mismatches, label) = match mode {
        VerifyMode::Cot => {
            let compiled = compile_cot(&g, &CompileOptions::default())?;
            let rep = verify_cot(&g, &compiled, &inputs)?;
            (rep.pass, rep.mismatches.len(), "cot")
        }
        VerifyMode::Loop => {
            let compiled = compile_looped(&g, &CompileOptions::default())?;
            let rep = verify_looped(&g, &compiled, &inputs)?;
            (rep.pass, rep.mismatches.len(), "looped")
        }
    };
    let report = VerifyReportOut {
        manifest: manifest(
            "verify",
            &bytes,
            Some(seed),
            &[("mode", label.to_string()), ("samples", samples.to_string())],
        ),
        pass,
        mode: label.to_string(),
        size: g.num_nodes(),
        depth: loop_count(&g).map_err(|e| anyhow!("{e}"))?,
        steps: cot_step_count(&g),
        loops: loop_count(&g).map_err(|e| anyhow!("{e}"))?,
        inputs_checked: inputs.len(),
        mismatches,
    };
    emit(&report, out)?;
    Ok(pass)
}

#[derive(Serialize)]
struct SampleReportOut {
    manifest: Manifest,
    report: SamplerReport,
    histogram: BTreeMap<String, u64>,
}

fn cmd_sample(
    instance: &Path,
    oracle: &OracleArgs,
    epsilon: f64,
    mode: SampleMode,
    samples: u64,
    out: Option<&Path>,
) -> Result<()> {
    let (inst, bytes) = Instance::load(instance)?;
    let cfg = resolve_oracle(oracle, &inst)?;
    let truth = brute_count(&inst)?;
    if truth == 0 {
        bail!("unsatisfiable instance: solution set is empty, sampling refused");
    }
    let source = match mode {
        SampleMode::OracleExact => PSource::OracleExact,
        SampleMode::Estimated => PSource::Estimated,
    };
    let solutions = enumerate_solutions(&inst)?;
    let mut histogram: BTreeMap<String, u64> = BTreeMap::new();
    let mut accepted = 0u64;
    let mut attempts = 0u64;
    let mut clamped = 0u64;
    let mut dead = 0u64;
    let mut trial_sum = 0u64;
    let mut c_hat = None;
    while accepted < samples {
        match rejection_sample(&cfg, &inst, epsilon, oracle.seed.wrapping_add(attempts), source) {
            Ok((y, stats)) => {
                let key: String = y.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("");
                *histogram.entry(key).or_insert(0) += 1;
                accepted += 1;
                clamped += stats.clamped_ratios;
                dead += stats.dead_end_trials;
                trial_sum += stats.trials_used;
                if matches!(mode, SampleMode::Estimated) && c_hat.is_none() {
                    c_hat = Some(1.0 / stats.p_hat);
                }
            }
            Err(SampleError::AllRejected { trials }) => {
                trial_sum += trials;
            }
            Err(e) => return Err(e.into()),
        }
        attempts += 1;
    }
    let empirical: Vec<f64> = solutions
        .iter()
        .map(|y| {
            let key: String = y.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("");
            *histogram.get(&key).unwrap_or(&0) as f64 / accepted as f64
        })
        .collect();
    let uniform = vec![1.0 / solutions.len() as f64; solutions.len()];
    let tv_empirical = tv_distance(&empirical, &uniform).map_err(|e| anyhow!("{e}"))?;
    let tv_exact = if inst.solution_len() <= 12 {
        Some(
            exact_output_law(&cfg, &inst, epsilon, oracle.seed, source)
                .map_err(|e| anyhow!("{e}"))?
                .tv_to_uniform,
        )
    } else {
        None
    };
    let g_len = inst.solution_len().max(1);
    let report = SampleReportOut {
        manifest: manifest(
            "sample",
            &bytes,
            Some(oracle.seed),
            &[
                ("gamma", cfg.gamma.to_string()),
                ("alpha", cfg.alpha.to_string()),
                ("delta", oracle.delta.to_string()),
                ("epsilon", epsilon.to_string()),
                ("samples", samples.to_string()),
            ],
        ),
        report: SamplerReport {
            tv_exact,
            tv_empirical: Some(tv_empirical),
            acceptance_rate: accepted as f64 / trial_sum.max(1) as f64,
            trials_budget: rejection_trials(epsilon),
            per_token_t: required_t(cfg.gamma, epsilon / 2.0 / g_len as f64, inst.alphabet_len()),
            count_estimate: c_hat,
            samples_collected: accepted,
            clamped_ratios: clamped,
            dead_end_trials: dead,
        },
        histogram,
    };
    emit(&report, out)
}

#[derive(Serialize)]
struct CountReportOut {
    manifest: Manifest,
    count_estimate: f64,
    brute_count: u64,
    per_token_t: u64,
}

fn cmd_count(instance: &Path, oracle: &OracleArgs, out: Option<&Path>) -> Result<()> {
    let (inst, bytes) = Instance::load(instance)?;
    let truth = brute_count(&inst)?;
    let man = manifest(
        "count",
        &bytes,
        Some(oracle.seed),
        &[("gamma", oracle.gamma.to_string()), ("delta", oracle.delta.to_string())],
    );
    if truth == 0 {
        let report = CountReportOut {
            manifest: man,
            count_estimate: 0.0,
            brute_count: 0,
            per_token_t: 0,
        };
        return emit(&report, out);
    }
    let cfg = resolve_oracle(oracle, &inst)?;
    let (c_hat, _) = count_estimate(&cfg, &inst, oracle.delta, oracle.seed)?;
    let g_len = inst.solution_len().max(1);
    let report = CountReportOut {
        manifest: man,
        count_estimate: c_hat,
        brute_count: truth,
        per_token_t: required_t(cfg.gamma, oracle.delta / g_len as f64, inst.alphabet_len()),
    };
    emit(&report, out)
}

fn cmd_selfcheck() -> Result<bool> {
    let report = dagtf::selfcheck::run(None);
    for check in &report.checks {
        println!(
            "{} {}{}",
            if check.pass { "ok  " } else { "FAIL" },
            check.name,
            if check.detail.is_empty() {
                String::new()
            } else {
                format!(" ({})", check.detail)
            }
        );
    }
    if let Some(first) = report.first_failure() {
        eprintln!("selfcheck failed at: {}", first.name);
    }
    Ok(report.pass)
}

fn run_command(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::CompileCot { input, out, layout } => {
            cmd_compile_cot(&input, &out, layout.as_deref())?;
            Ok(true)
        }
        Command::CompileLoop { input, out, layout } => {
            cmd_compile_loop(&input, &out, layout.as_deref())?;
            Ok(true)
        }
        Command::CompileCircuit {
            input,
            out,
            precision,
            layout,
        } => {
            cmd_compile_circuit(&input, &out, precision, layout.as_deref())?;
            Ok(true)
        }
        Command::Run {
            input,
            tokens,
            budget,
            trace,
            format: ReportFormat::Json,
            out,
        } => {
            cmd_run(&input, &tokens, budget, trace.as_deref(), out.as_deref())?;
            Ok(true)
        }
        Command::Verify {
            input,
            mode,
            samples,
            seed,
            out,
        } => cmd_verify(&input, mode, samples, seed, out.as_deref()),
        Command::Sample {
            instance,
            oracle,
            epsilon,
            mode,
            samples,
            out,
        } => {
            cmd_sample(&instance, &oracle, epsilon, mode, samples, out.as_deref())?;
            Ok(true)
        }
        Command::Count { instance, oracle, out } => {
            cmd_count(&instance, &oracle, out.as_deref())?;
            Ok(true)
        }
        Command::Selfcheck => cmd_selfcheck(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

