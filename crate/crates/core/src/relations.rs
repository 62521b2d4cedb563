//! Self-reducible relations and the brute-force counting / conditional /
//! uniform-sampling oracles that ground-truth the sampler.
//!
//! A relation instance knows its solution length, reduces under a solution
//! prefix to a smaller instance of the same family, and verifies candidate
//! solutions. Both shipped families use chunk size 1 and the alphabet {0,1}.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("solution length {len} exceeds the enumeration cap {cap}")]
    EnumerationCap { len: usize, cap: usize },
    #[error("empty solution set")]
    EmptySolutionSet,
    #[error("prefix longer than the solution length")]
    PrefixTooLong,
    #[error("instance file: {0}")]
    Parse(String),
}

/// Default cap on brute-force enumeration.
pub const ENUMERATION_CAP: usize = 24;

/// A self-reducible relation instance. Symbols are indices into the
/// solution alphabet.
pub trait SelfReducible: Clone {
    /// Solution alphabet size.
    fn alphabet_len(&self) -> usize;
    /// Exact solution length g(x): every witness has this length.
    fn solution_len(&self) -> usize;
    /// Chunk size sigma(x): how many leading symbols one reduction consumes.
    fn chunk(&self) -> usize {
        1
    }
    /// The reduced instance under a prefix of `chunk()` symbols.
    fn reduce(&self, prefix: &[usize]) -> Self;
    /// Whether `y` is a solution of this instance.
    fn verify(&self, y: &[usize]) -> bool;
    /// Indivisible base case: nothing left to decide.
    fn is_atom(&self) -> bool {
        self.solution_len() == 0
    }
    /// Instance size |x| (for the shrinkage property).
    fn size(&self) -> usize;
}

fn check_cap<R: SelfReducible>(rel: &R) -> Result<(), RelationError> {
    if rel.solution_len() > ENUMERATION_CAP {
        Err(RelationError::EnumerationCap {
            len: rel.solution_len(),
            cap: ENUMERATION_CAP,
        })
    } else {
        Ok(())
    }
}

fn count_recursive<R: SelfReducible>(rel: &R, depth: usize) -> u64 {
    if rel.is_atom() {
        return rel.verify(&[]) as u64;
    }
    debug_assert!(depth <= ENUMERATION_CAP);
    (0..rel.alphabet_len())
        .map(|a| count_recursive(&rel.reduce(&[a]), depth + 1))
        .sum()
}

/// Exact |R(x)| by exhaustive enumeration through the reduction map.
pub fn brute_count<R: SelfReducible>(rel: &R) -> Result<u64, RelationError> {
    check_cap(rel)?;
    Ok(count_recursive(rel, 0))
}

/// Exact |R(x)| by direct string enumeration and `verify`, sharing nothing
/// with the reduction route; the pair cross-checks self-reducibility.
pub fn brute_count_direct<R: SelfReducible>(rel: &R) -> Result<u64, RelationError> {
    check_cap(rel)?;
    let g = rel.solution_len();
    let k = rel.alphabet_len();
    let mut y = vec![0usize; g];
    let mut count = 0u64;
    loop {
        if rel.verify(&y) {
            count += 1;
        }
        let mut i = 0;
        loop {
            if i == g {
                return Ok(count);
            }
            y[i] += 1;
            if y[i] < k {
                break;
            }
            y[i] = 0;
            i += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditional {
    /// Exact conditional probabilities of the next symbol under the uniform
    /// distribution over completions.
    pub probs: Vec<f64>,
    /// Completion counts per next symbol.
    pub counts: Vec<u64>,
    /// No completion exists for the given prefix.
    pub dead_end: bool,
}

/// Exact conditional distribution of the next symbol given a prefix,
/// computed through the reduction route and cross-checked against direct
/// filtered enumeration (the defining equivalence of self-reducibility).
pub fn brute_conditional<R: SelfReducible>(
    rel: &R,
    prefix: &[usize],
) -> Result<Conditional, RelationError> {
    check_cap(rel)?;
    if prefix.len() >= rel.solution_len() {
        return Err(RelationError::PrefixTooLong);
    }
    let mut cur = rel.clone();
    for &a in prefix {
        cur = cur.reduce(&[a]);
    }
    let k = rel.alphabet_len();
    let counts: Vec<u64> = (0..k)
        .map(|a| count_recursive(&cur.reduce(&[a]), 0))
        .collect();
    if cfg!(debug_assertions) {
        // direct route: filter full strings by verify on the original instance
        let direct = conditional_counts_direct(rel, prefix);
        debug_assert_eq!(direct, counts, "self-reducibility consistency violated");
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Ok(Conditional {
            probs: vec![0.0; k],
            counts,
            dead_end: true,
        });
    }
    Ok(Conditional {
        probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        counts,
        dead_end: false,
    })
}

fn conditional_counts_direct<R: SelfReducible>(rel: &R, prefix: &[usize]) -> Vec<u64> {
    let g = rel.solution_len();
    let k = rel.alphabet_len();
    let mut counts = vec![0u64; k];
    let tail = g - prefix.len() - 1;
    let mut y: Vec<usize> = Vec::with_capacity(g);
    for a in 0..k {
        let mut total = 0u64;
        for m in 0..k.pow(tail as u32) as u64 {
            y.clear();
            y.extend_from_slice(prefix);
            y.push(a);
            let mut rest = m;
            for _ in 0..tail {
                y.push((rest % k as u64) as usize);
                rest /= k as u64;
            }
            total += rel.verify(&y) as u64;
        }
        counts[a] = total;
    }
    counts
}

/// Exact uniform draw from R(x): the oracle for total-variation testing.
pub fn brute_uniform_sample<R: SelfReducible>(
    rel: &R,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, RelationError> {
    let total = brute_count(rel)?;
    if total == 0 {
        return Err(RelationError::EmptySolutionSet);
    }
    let mut index = rng.gen_range(0..total);
    let mut cur = rel.clone();
    let mut y = Vec::with_capacity(rel.solution_len());
    while !cur.is_atom() {
        for a in 0..cur.alphabet_len() {
            let next = cur.reduce(&[a]);
            let c = count_recursive(&next, 0);
            if index < c {
                y.push(a);
                cur = next;
                break;
            }
            index -= c;
        }
    }
    debug_assert!(rel.verify(&y));
    Ok(y)
}

/// All solutions in lexicographic order (desk scale only).
pub fn enumerate_solutions<R: SelfReducible>(rel: &R) -> Result<Vec<Vec<usize>>, RelationError> {
    check_cap(rel)?;
    let g = rel.solution_len();
    let k = rel.alphabet_len();
    let mut out = Vec::new();
    let mut y = vec![0usize; g];
    loop {
        if rel.verify(&y) {
            out.push(y.clone());
        }
        let mut i = g;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            y[i] += 1;
            if y[i] < k {
                for b in y.iter_mut().skip(i + 1) {
                    *b = 0;
                }
                break;
            }
            y[i] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// CNF satisfiability

/// CNF instance over variables 1..=vars; clauses are signed literals.
/// Reduction assigns the lowest-index variable and simplifies: satisfied
/// clauses drop, falsified literals vanish, and an emptied clause marks the
/// instance unsatisfiable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatInstance {
    pub vars: usize,
    pub clauses: Vec<Vec<i32>>,
    /// Set when simplification produced an empty clause.
    #[serde(default)]
    pub falsified: bool,
}

impl SatInstance {
    pub fn new(vars: usize, clauses: Vec<Vec<i32>>) -> Result<Self, RelationError> {
        for cl in &clauses {
            for &lit in cl {
                if lit == 0 || lit.unsigned_abs() as usize > vars {
                    return Err(RelationError::Parse(format!(
                        "literal {lit} out of range for {vars} variables"
                    )));
                }
            }
        }
        Ok(SatInstance {
            vars,
            clauses,
            falsified: false,
        })
    }

    /// DIMACS CNF: `p cnf <vars> <clauses>` header, clauses terminated by 0.
    pub fn from_dimacs(text: &str) -> Result<Self, RelationError> {
        let mut vars = None;
        let mut clauses = Vec::new();
        let mut current: Vec<i32> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('c') || line.starts_with('%') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('p') {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 || parts[0] != "cnf" {
                    return Err(RelationError::Parse(format!("bad problem line {line:?}")));
                }
                vars = Some(
                    parts[1]
                        .parse::<usize>()
                        .map_err(|e| RelationError::Parse(e.to_string()))?,
                );
                continue;
            }
            for tok in line.split_whitespace() {
                let lit: i32 = tok
                    .parse()
                    .map_err(|e| RelationError::Parse(format!("bad literal {tok:?}: {e}")))?;
                if lit == 0 {
                    clauses.push(std::mem::take(&mut current));
                } else {
                    current.push(lit);
                }
            }
        }
        if !current.is_empty() {
            clauses.push(current);
        }
        let vars = vars.ok_or_else(|| RelationError::Parse("missing p cnf header".into()))?;
        SatInstance::new(vars, clauses)
    }
}

impl SelfReducible for SatInstance {
    fn alphabet_len(&self) -> usize {
        2
    }

    fn solution_len(&self) -> usize {
        self.vars
    }

    fn reduce(&self, prefix: &[usize]) -> Self {
        debug_assert_eq!(prefix.len(), 1);
        let value = prefix[0] == 1;
        let mut falsified = self.falsified;
        let mut clauses = Vec::with_capacity(self.clauses.len());
        for cl in &self.clauses {
            let mut kept = Vec::with_capacity(cl.len());
            let mut satisfied = false;
            for &lit in cl {
                if lit.unsigned_abs() == 1 {
                    if (lit > 0) == value {
                        satisfied = true;
                        break;
                    }
                } else {
                    // renumber the remaining variables down by one
                    kept.push(if lit > 0 { lit - 1 } else { lit + 1 });
                }
            }
            if satisfied {
                continue;
            }
            if kept.is_empty() {
                falsified = true;
                continue;
            }
            clauses.push(kept);
        }
        SatInstance {
            vars: self.vars.saturating_sub(1),
            clauses,
            falsified,
        }
    }

    fn verify(&self, y: &[usize]) -> bool {
        if self.falsified || y.len() != self.vars {
            return false;
        }
        self.clauses.iter().all(|cl| {
            cl.iter().any(|&lit| {
                let idx = lit.unsigned_abs() as usize - 1;
                (lit > 0) == (y[idx] == 1)
            })
        })
    }

    fn size(&self) -> usize {
        self.vars + self.clauses.iter().map(|c| c.len()).sum::<usize>()
    }
}

// ---------------------------------------------------------------------------
// independent sets of a path graph

/// Independent sets of a path with `len` vertices, as 0/1 strings with no
/// two adjacent ones. Reduction fixes the first vertex; choosing it blocks
/// the next. Counts follow the Fibonacci recurrence, handy as an analytic
/// cross-check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathIndepSet {
    pub len: usize,
    /// First vertex unavailable (the previous one was chosen).
    #[serde(default)]
    pub first_blocked: bool,
    /// Unsatisfiable marker: a blocked vertex was chosen anyway.
    #[serde(default)]
    pub dead: bool,
}

impl PathIndepSet {
    pub fn new(len: usize) -> Self {
        PathIndepSet {
            len,
            first_blocked: false,
            dead: false,
        }
    }
}

impl SelfReducible for PathIndepSet {
    fn alphabet_len(&self) -> usize {
        2
    }

    fn solution_len(&self) -> usize {
        self.len
    }

    fn reduce(&self, prefix: &[usize]) -> Self {
        debug_assert_eq!(prefix.len(), 1);
        let take = prefix[0] == 1;
        PathIndepSet {
            len: self.len.saturating_sub(1),
            first_blocked: take,
            dead: self.dead || (take && self.first_blocked),
        }
    }

    fn verify(&self, y: &[usize]) -> bool {
        if self.dead || y.len() != self.len {
            return false;
        }
        if self.first_blocked && y.first() == Some(&1) {
            return false;
        }
        y.windows(2).all(|w| !(w[0] == 1 && w[1] == 1))
    }

    fn size(&self) -> usize {
        self.len
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn unsat_pair_counts_zero() {
        let x = SatInstance::new(1, vec![vec![1], vec![-1]]).unwrap();
        assert_eq!(brute_count(&x).unwrap(), 0);
        assert_eq!(brute_count_direct(&x).unwrap(), 0);
    }

    #[test]
    fn no_clause_sat_counts_all_assignments() {
        let x = SatInstance::new(3, vec![]).unwrap();
        assert_eq!(brute_count(&x).unwrap(), 8);
    }

    #[test]
    fn path_counts_follow_fibonacci() {
        // counts(k) satisfies c(k) = c(k-1) + c(k-2), c(0) = 1, c(1) = 2
        let mut prev = 1u64;
        let mut cur = 2u64;
        for k in 2..=10usize {
            let next = cur + prev;
            prev = cur;
            cur = next;
            assert_eq!(brute_count(&PathIndepSet::new(k)).unwrap(), cur, "k={k}");
        }
        assert_eq!(brute_count(&PathIndepSet::new(8)).unwrap(), 55);
        assert_eq!(brute_count(&PathIndepSet::new(6)).unwrap(), 21);
    }

    #[test]
    fn reduction_and_direct_counts_agree() {
        let x = SatInstance::new(4, vec![vec![1, -2], vec![2, 3, -4], vec![-1, 4]]).unwrap();
        assert_eq!(brute_count(&x).unwrap(), brute_count_direct(&x).unwrap());
        let p = PathIndepSet::new(7);
        assert_eq!(brute_count(&p).unwrap(), brute_count_direct(&p).unwrap());
    }

    #[test]
    fn conditional_uniform_without_clauses() {
        let x = SatInstance::new(3, vec![]).unwrap();
        let c = brute_conditional(&x, &[]).unwrap();
        assert_eq!(c.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn conditional_forced_next_token() {
        // (x1 or x2): solutions 01, 10, 11; after x1 = 0 the next token is forced
        let x = SatInstance::new(2, vec![vec![1, 2]]).unwrap();
        let c = brute_conditional(&x, &[0]).unwrap();
        assert_eq!(c.probs, vec![0.0, 1.0]);
        assert!(!c.dead_end);
    }

    #[test]
    fn dead_end_prefix_flagged() {
        let p = PathIndepSet::new(3);
        let c = brute_conditional(&p.reduce(&[1]), &[]).unwrap();
        // after choosing vertex 1, choosing vertex 2 dead-ends
        assert_eq!(c.counts[1], 0);
        let dead = brute_conditional(&p.reduce(&[1]).reduce(&[1]), &[]).unwrap();
        assert!(dead.dead_end);
    }

    #[test]
    fn self_reduction_equivalence_exhaustive() {
        // verify(x, y) iff verify(psi(x, y1), y[1..]) on the whole cube
        let x = SatInstance::new(4, vec![vec![1, -3], vec![2, 4], vec![-2, -4]]).unwrap();
        for m in 0..16u32 {
            let y: Vec<usize> = (0..4).map(|i| ((m >> i) & 1) as usize).collect();
            let lhs = x.verify(&y);
            let rhs = x.reduce(&y[..1]).verify(&y[1..]);
            assert_eq!(lhs, rhs, "y={y:?}");
        }
        let p = PathIndepSet::new(5);
        for m in 0..32u32 {
            let y: Vec<usize> = (0..5).map(|i| ((m >> i) & 1) as usize).collect();
            assert_eq!(p.verify(&y), p.reduce(&y[..1]).verify(&y[1..]), "y={y:?}");
        }
    }

    #[test]
    fn conditional_telescoping_inverts_count() {
        let x = PathIndepSet::new(6);
        let total = brute_count(&x).unwrap();
        for y in enumerate_solutions(&x).unwrap() {
            let mut product = 1.0f64;
            for i in 0..y.len() {
                let c = brute_conditional(&x, &y[..i]).unwrap();
                product *= c.probs[y[i]];
            }
            assert!((product - 1.0 / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_shrinkage() {
        let x = SatInstance::new(5, vec![vec![1, 2, 3], vec![-1, -4], vec![2, 5]]).unwrap();
        let mut cur = x.clone();
        for a in [0usize, 1, 0, 1] {
            let next = cur.reduce(&[a]);
            assert!(next.size() <= cur.size());
            cur = next;
        }
    }

    #[test]
    fn uniform_sampler_is_close_to_uniform() {
        let p = PathIndepSet::new(6);
        let total = brute_count(&p).unwrap() as f64;
        let mut counts = std::collections::BTreeMap::new();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let draws = 100_000usize;
        for _ in 0..draws {
            let y = brute_uniform_sample(&p, &mut rng).unwrap();
            assert!(p.verify(&y));
            *counts.entry(y).or_insert(0usize) += 1;
        }
        let tv: f64 = counts
            .values()
            .map(|&c| (c as f64 / draws as f64 - 1.0 / total).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.02, "empirical tv {tv}");
        assert_eq!(counts.len() as f64, total);
    }

    #[test]
    fn singleton_relation_returns_its_solution() {
        // force all variables: x1 and not x2
        let x = SatInstance::new(2, vec![vec![1], vec![-2]]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        assert_eq!(brute_uniform_sample(&x, &mut rng).unwrap(), vec![1, 0]);
    }

    #[test]
    fn dimacs_parsing() {
        let text = "c example\np cnf 3 2\n1 -2 0\n2 3 0\n";
        let x = SatInstance::from_dimacs(text).unwrap();
        assert_eq!(x.vars, 3);
        assert_eq!(x.clauses, vec![vec![1, -2], vec![2, 3]]);
        assert!(SatInstance::from_dimacs("1 2 0").is_err());
    }
}
