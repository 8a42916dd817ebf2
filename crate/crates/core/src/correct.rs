//! Error-correction harness: flawed prefixes that end in a wrong answer,
//! continued after a WAIT token either unguided or with a routed steering
//! feature.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Rng, Vector};
use crate::router::{route, RouterParams, RouterTrainingPair};
use crate::steering::paired_rng;
use crate::toylm::{Injection, TokenId, ToyLm, Trajectory, ANSWER_MARKER, PLANTED_AMPLITUDE, WAIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyProblem {
    pub prefix: Trajectory,
    /// Hook activation at the last prefix token (the wrong answer).
    pub context: Vector,
    pub target_strategy: usize,
    pub wrong_strategy: usize,
    pub correct_answer: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    /// Sampled tokens before the forced marker and wrong answer.
    pub prefix_len: usize,
    /// Gain of the target cue direction in the prefix activations.
    pub cue_gain: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            prefix_len: 24,
            cue_gain: 2.0,
        }
    }
}

/// `count` problems. Problem `i` targets strategy `i mod S` and draws a
/// different wrong strategy; the prefix is sampled with `a · g_wrong + b · p_target`
/// planted at the hook and ends with the marker and the wrong answer.
pub fn make_problem_set(lm: &ToyLm, count: usize, config: &ProblemConfig, seed: u64) -> Result<Vec<ToyProblem>> {
    if count == 0 {
        return Err(invalid("problem count must be at least 1"));
    }
    if lm.n_strategies() < 2 {
        return Err(invalid("problems need at least two strategies"));
    }
    if config.prefix_len == 0 {
        return Err(invalid("prefix_len must be at least 1"));
    }
    (0..count)
        .into_par_iter()
        .map(|i| make_problem(lm, config, i % lm.n_strategies(), &mut Rng::derive(seed, i as u64)))
        .collect()
}

fn make_problem(lm: &ToyLm, config: &ProblemConfig, target: usize, rng: &mut Rng) -> Result<ToyProblem> {
    let s = lm.n_strategies();
    let wrong = (target + 1 + rng.below(s - 1)) % s;
    let a = rng.uniform(PLANTED_AMPLITUDE.0, PLANTED_AMPLITUDE.1);
    let mut planted = lm.strategy_dir(wrong).scaled(a);
    planted.axpy(config.cue_gain, &lm.cue_dir(target));
    let start = lm.start(Some(&mut *rng), true)?;
    let mut traj = lm.generate_planted(&start, config.prefix_len, 1.0, None, Some(&planted), Some(&mut *rng), true)?;
    if traj.last_token() != ANSWER_MARKER {
        lm.feed(&mut traj, ANSWER_MARKER, Some(&planted), Some(&mut *rng))?;
    }
    let wrong_answer = lm.strategies[wrong].answer_token;
    lm.feed(&mut traj, wrong_answer, Some(&planted), Some(&mut *rng))?;
    let context = traj
        .activations
        .take()
        .and_then(|mut a| a.pop())
        .expect("captured trajectories carry activations");
    Ok(ToyProblem {
        prefix: traj.into_prefix(),
        context,
        target_strategy: target,
        wrong_strategy: wrong,
        correct_answer: lm.strategies[target].answer_token,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub method: String,
    pub corrected: bool,
    /// First answer after a new marker, if one was emitted.
    pub answer: Option<TokenId>,
    /// Total trajectory length when the continuation stopped.
    pub length: usize,
    /// Strategy of the feature used for steering, if any.
    pub routed_strategy: Option<usize>,
}

/// A steering candidate with its searched strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub strategy: usize,
    pub feature_id: usize,
    pub alpha: f64,
    pub vector: Vector,
}

/// Append WAIT, then decode at temperature 0 until the first answer that
/// follows a new marker or until `horizon` tokens have been generated.
pub fn continue_after_wait(
    lm: &ToyLm,
    problem: &ToyProblem,
    injection: Option<Injection<'_>>,
    horizon: usize,
    rng: &mut Rng,
) -> Result<(Option<TokenId>, usize)> {
    if horizon == 0 {
        return Err(invalid("correction horizon must be at least 1"));
    }
    let mut traj = problem.prefix.clone();
    traj.activations = None;
    lm.feed(&mut traj, WAIT, None, Some(&mut *rng))?;
    let mut prev = WAIT;
    let mut activation = lm.hook(&traj.state, injection, None)?;
    for _ in 0..horizon {
        let logits = lm.logits(&activation)?;
        let token = lm.decode(&logits, prev, 0.0, None)?;
        let out = lm.step(&traj.state, token, injection, None, Some(&mut *rng))?;
        traj.tokens.push(token);
        traj.state = out.state;
        activation = out.activation;
        if prev == ANSWER_MARKER {
            return Ok((Some(token), traj.len()));
        }
        prev = token;
    }
    Ok((None, traj.len()))
}

fn result(method: &str, problem: &ToyProblem, outcome: (Option<TokenId>, usize), routed: Option<usize>) -> CorrectionResult {
    CorrectionResult {
        method: method.into(),
        corrected: outcome.0 == Some(problem.correct_answer),
        answer: outcome.0,
        length: outcome.1,
        routed_strategy: routed,
    }
}

/// Unguided continuation after WAIT. Problem `index` uses noise stream
/// `paired_rng(noise_seed, index)` in every arm.
pub fn budget_force(lm: &ToyLm, problem: &ToyProblem, horizon: usize, noise_seed: u64, index: usize) -> Result<CorrectionResult> {
    let out = continue_after_wait(lm, problem, None, horizon, &mut paired_rng(noise_seed, index))?;
    Ok(result("budget_forcing", problem, out, None))
}

/// Continuation steered by one pool entry at its searched strength.
pub fn steer_with(
    lm: &ToyLm,
    problem: &ToyProblem,
    entry: &PoolEntry,
    horizon: usize,
    noise_seed: u64,
    index: usize,
    method: &str,
) -> Result<CorrectionResult> {
    let inj = Injection::new(&entry.vector, entry.alpha);
    let out = continue_after_wait(lm, problem, Some(inj), horizon, &mut paired_rng(noise_seed, index))?;
    Ok(result(method, problem, out, Some(entry.strategy)))
}

/// Route on the prefix's final activation, then steer with the chosen
/// candidate.
pub fn steered_correct(
    lm: &ToyLm,
    problem: &ToyProblem,
    router: &RouterParams,
    pool: &[PoolEntry],
    horizon: usize,
    noise_seed: u64,
    index: usize,
) -> Result<CorrectionResult> {
    let cands = candidates(pool);
    let routed = route(router, &problem.context, &cands)?;
    steer_with(lm, problem, &pool[routed.index], horizon, noise_seed, index, "router_steering")
}

/// Steer with the top feature of the hidden target strategy. `top` maps a
/// strategy to its best pool entry.
pub fn oracle_correct(
    lm: &ToyLm,
    problem: &ToyProblem,
    top: &[Option<PoolEntry>],
    horizon: usize,
    noise_seed: u64,
    index: usize,
) -> Result<CorrectionResult> {
    match top.get(problem.target_strategy).and_then(|e| e.as_ref()) {
        Some(entry) => steer_with(lm, problem, entry, horizon, noise_seed, index, "oracle_steering"),
        None => {
            let out = continue_after_wait(lm, problem, None, horizon, &mut paired_rng(noise_seed, index))?;
            Ok(result("oracle_steering", problem, out, None))
        }
    }
}

/// Per-strategy entry for the oracle arm: the one with the highest training
/// fix rate, earlier pool entries winning ties.
pub fn oracle_choice(pool: &[PoolEntry], fix_rates: &[f64], n_strategies: usize) -> Result<Vec<Option<PoolEntry>>> {
    if fix_rates.len() != pool.len() {
        return Err(invalid(format!("{} fix rates for a pool of {}", fix_rates.len(), pool.len())));
    }
    let mut best: Vec<Option<(usize, f64)>> = vec![None; n_strategies];
    for (i, (e, &r)) in pool.iter().zip(fix_rates).enumerate() {
        let slot = best
            .get_mut(e.strategy)
            .ok_or_else(|| invalid(format!("pool entry for unknown strategy {}", e.strategy)))?;
        if slot.map_or(true, |(_, b)| r > b) {
            *slot = Some((i, r));
        }
    }
    Ok(best.into_iter().map(|b| b.map(|(i, _)| pool[i].clone())).collect())
}

/// Column means of a label matrix.
pub fn fix_rates(labels: &[Vec<bool>]) -> Vec<f64> {
    let width = labels.first().map_or(0, Vec::len);
    (0..width)
        .map(|j| labels.iter().filter(|row| row[j]).count() as f64 / labels.len() as f64)
        .collect()
}

pub fn candidates(pool: &[PoolEntry]) -> Vec<(usize, Vector)> {
    pool.iter().map(|e| (e.strategy, e.vector.clone())).collect()
}

/// Corrected fraction per method label.
pub fn correction_rate(results: &[CorrectionResult]) -> Result<BTreeMap<String, f64>> {
    if results.is_empty() {
        return Err(invalid("no correction results"));
    }
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in results {
        let t = tally.entry(r.method.clone()).or_default();
        t.0 += usize::from(r.corrected);
        t.1 += 1;
    }
    Ok(tally.into_iter().map(|(m, (c, n))| (m, c as f64 / n as f64)).collect())
}

/// Which pool entries fix each problem.
pub fn label_pool(
    lm: &ToyLm,
    problems: &[ToyProblem],
    pool: &[PoolEntry],
    horizon: usize,
    noise_seed: u64,
) -> Result<Vec<Vec<bool>>> {
    problems
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            pool.iter()
                .map(|e| Ok(steer_with(lm, p, e, horizon, noise_seed, i, "label")?.corrected))
                .collect()
        })
        .collect()
}

/// One InfoNCE pair per (problem, fixing entry); the entries that do not
/// fix the problem are its negatives.
pub fn router_pairs(problems: &[ToyProblem], pool: &[PoolEntry], labels: &[Vec<bool>]) -> Vec<RouterTrainingPair> {
    let mut out = Vec::new();
    for (p, row) in problems.iter().zip(labels) {
        let negatives: Vec<Vector> = pool
            .iter()
            .zip(row)
            .filter(|(_, ok)| !**ok)
            .map(|(e, _)| e.vector.clone())
            .collect();
        if negatives.is_empty() {
            continue;
        }
        for (e, _) in pool.iter().zip(row).filter(|(_, ok)| **ok) {
            out.push(RouterTrainingPair {
                context_activation: p.context.clone(),
                positive_feature: e.vector.clone(),
                negative_features: negatives.clone(),
            });
        }
    }
    out
}

/// Fraction of problems routed to a feature of their target strategy.
pub fn routing_accuracy(router: &RouterParams, problems: &[ToyProblem], pool: &[PoolEntry]) -> Result<f64> {
    if problems.is_empty() {
        return Err(invalid("no problems to route"));
    }
    let cands = candidates(pool);
    let mut hits = 0;
    for p in problems {
        if route(router, &p.context, &cands)?.strategy == p.target_strategy {
            hits += 1;
        }
    }
    Ok(hits as f64 / problems.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::RouterParams;
    use crate::toylm::ToyLmConfig;

    fn lm() -> ToyLm {
        ToyLm::build(&ToyLmConfig::default()).unwrap()
    }

    fn planted_pool(lm: &ToyLm, alpha: f64) -> Vec<PoolEntry> {
        (0..lm.n_strategies())
            .map(|s| PoolEntry {
                strategy: s,
                feature_id: s,
                alpha,
                vector: lm.strategy_dir(s),
            })
            .collect()
    }

    #[test]
    fn problems_end_with_a_wrong_answer() {
        let lm = lm();
        let probs = make_problem_set(&lm, 40, &ProblemConfig::default(), 1).unwrap();
        for p in &probs {
            assert_ne!(p.target_strategy, p.wrong_strategy);
            let n = p.prefix.len();
            assert_eq!(p.prefix.tokens[n - 2], ANSWER_MARKER);
            assert_eq!(p.prefix.tokens[n - 1], lm.strategies[p.wrong_strategy].answer_token);
            assert_ne!(p.prefix.last_token(), p.correct_answer);
            assert_eq!(p.prefix.prefix_len, n);
            // the context carries the target cue
            assert!(p.context.dot(&lm.cue_dir(p.target_strategy)) > 1.5);
        }
        assert_eq!(probs, make_problem_set(&lm, 40, &ProblemConfig::default(), 1).unwrap());
        assert!(make_problem_set(&lm, 0, &ProblemConfig::default(), 1).is_err());
    }

    #[test]
    fn target_histogram_is_uniform() {
        let lm = lm();
        let probs = make_problem_set(&lm, 500, &ProblemConfig::default(), 2).unwrap();
        let mut counts = [0usize; 5];
        for p in &probs {
            counts[p.target_strategy] += 1;
        }
        for c in counts {
            assert!((c as f64 - 100.0).abs() <= 10.0, "{counts:?}");
        }
    }

    #[test]
    fn one_token_horizon_never_corrects() {
        let lm = lm();
        let probs = make_problem_set(&lm, 20, &ProblemConfig::default(), 3).unwrap();
        for (i, p) in probs.iter().enumerate() {
            let r = budget_force(&lm, p, 1, 0, i).unwrap();
            assert!(!r.corrected && r.answer.is_none());
            assert_eq!(r.length, p.prefix.len() + 2);
        }
    }

    #[test]
    fn arms_are_deterministic_and_zero_pool_matches_budget() {
        let lm = lm();
        let probs = make_problem_set(&lm, 30, &ProblemConfig::default(), 4).unwrap();
        let zero: Vec<PoolEntry> = (0..5)
            .map(|s| PoolEntry {
                strategy: s,
                feature_id: s,
                alpha: 5.0,
                vector: Vector::zeros(lm.n_dim()),
            })
            .collect();
        let router = RouterParams::new(lm.n_dim(), 8, 4, &mut Rng::seed(0));
        for (i, p) in probs.iter().enumerate() {
            let b = budget_force(&lm, p, 128, 9, i).unwrap();
            assert_eq!(b, budget_force(&lm, p, 128, 9, i).unwrap());
            let s = steered_correct(&lm, p, &router, &zero, 128, 9, i).unwrap();
            assert_eq!((s.corrected, s.answer, s.length), (b.corrected, b.answer, b.length));
        }
    }

    #[test]
    fn oracle_steering_beats_budget_forcing() {
        let lm = lm();
        let probs = make_problem_set(&lm, 100, &ProblemConfig::default(), 5).unwrap();
        let pool = planted_pool(&lm, 4.0);
        let top: Vec<Option<PoolEntry>> = pool.iter().cloned().map(Some).collect();
        let mut results = Vec::new();
        for (i, p) in probs.iter().enumerate() {
            results.push(budget_force(&lm, p, 128, 1, i).unwrap());
            results.push(oracle_correct(&lm, p, &top, 128, 1, i).unwrap());
        }
        let rates = correction_rate(&results).unwrap();
        assert!(rates["oracle_steering"] >= 0.95, "{rates:?}");
        assert!(rates["oracle_steering"] - rates["budget_forcing"] >= 0.15, "{rates:?}");
    }

    #[test]
    fn labels_and_pairs() {
        let lm = lm();
        let probs = make_problem_set(&lm, 10, &ProblemConfig::default(), 6).unwrap();
        let pool = planted_pool(&lm, 4.0);
        let labels = label_pool(&lm, &probs, &pool, 128, 2).unwrap();
        for (p, row) in probs.iter().zip(&labels) {
            assert!(row[p.target_strategy]);
            assert_eq!(row.iter().filter(|x| **x).count(), 1);
        }
        let pairs = router_pairs(&probs, &pool, &labels);
        assert_eq!(pairs.len(), 10);
        assert!(pairs.iter().all(|p| p.negative_features.len() == 4));
    }

    #[test]
    fn rate_arithmetic() {
        let mk = |m: &str, c: bool| CorrectionResult {
            method: m.into(),
            corrected: c,
            answer: None,
            length: 0,
            routed_strategy: None,
        };
        let r = correction_rate(&[mk("a", true), mk("a", true), mk("b", false), mk("b", true), mk("b", false), mk("b", false)]).unwrap();
        assert_eq!(r["a"], 1.0);
        assert_eq!(r["b"], 0.25);
        assert_eq!(correction_rate(&[mk("c", false)]).unwrap()["c"], 0.0);
        assert!(correction_rate(&[]).is_err());
    }

    #[test]
    fn oracle_prefers_the_entry_that_fixes_training_problems() {
        let lm = lm();
        let mut pool = planted_pool(&lm, 4.0);
        pool.push(PoolEntry { feature_id: 9, ..pool[4].clone() });
        let labels = vec![
            vec![true, false, false, false, false, true],
            vec![false, true, false, false, false, true],
        ];
        let rates = fix_rates(&labels);
        assert_eq!(rates, vec![0.5, 0.5, 0.0, 0.0, 0.0, 1.0]);
        let top = oracle_choice(&pool, &rates, 6).unwrap();
        assert_eq!(top[0].as_ref().unwrap().feature_id, 0);
        // ties keep the earlier entry
        assert_eq!(top[2].as_ref().unwrap().feature_id, 2);
        assert_eq!(top[4].as_ref().unwrap().feature_id, 9);
        assert!(top[5].is_none());
        assert!(oracle_choice(&pool, &rates[..2], 6).is_err());
        assert!(oracle_choice(&pool, &rates, 3).is_err());
    }
}
