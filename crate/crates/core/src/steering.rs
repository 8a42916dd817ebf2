//! Feature injection, loop detection and the steering-strength search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Matrix, Rng, Vector};
use crate::toylm::{HookPoint, Injection, ToyLm, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringConfig {
    pub feature: Vector,
    pub alpha: f64,
    pub horizon: usize,
    pub hook_point: HookPoint,
}

impl SteeringConfig {
    pub fn new(feature: Vector, alpha: f64, horizon: usize) -> Self {
        Self {
            feature,
            alpha,
            horizon,
            hook_point: HookPoint::PreUnembed,
        }
    }

    pub fn validate(&self, n_dim: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || self.horizon == 0 {
            return Err(invalid("steering needs alpha >= 0 and horizon >= 1"));
        }
        if self.feature.dim() != n_dim {
            return Err(invalid(format!("feature dim {} != n_dim {n_dim}", self.feature.dim())));
        }
        Ok(())
    }
}

/// A back-to-back loop detector: some n-gram of length at least
/// `min_gram` occurring at least `min_repeats` times in a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepetitionRule {
    pub min_gram: usize,
    pub min_repeats: usize,
}

impl Default for RepetitionRule {
    fn default() -> Self {
        Self {
            min_gram: 3,
            min_repeats: 3,
        }
    }
}

impl RepetitionRule {
    pub fn validate(&self) -> Result<()> {
        if self.min_gram < 1 || self.min_repeats < 2 {
            return Err(invalid("repetition rule needs min_gram >= 1 and min_repeats >= 2"));
        }
        Ok(())
    }

    /// Loop check on a bare token slice.
    pub fn matches(&self, tokens: &[usize]) -> bool {
        let n = tokens.len();
        let r = self.min_repeats;
        // a block of length p repeated r times has period p over p·r tokens
        let mut p = self.min_gram.max(1);
        while p * r <= n {
            let need = p * (r - 1);
            let mut run = 0;
            for j in 0..n - p {
                if tokens[j] == tokens[j + p] {
                    run += 1;
                    if run >= need {
                        return true;
                    }
                } else {
                    run = 0;
                }
            }
            p += 1;
        }
        false
    }
}

/// Loop check on the generated part of a trajectory.
pub fn is_repetitive(traj: &Trajectory, rule: &RepetitionRule) -> bool {
    rule.matches(traj.suffix())
}

/// Generation with `α · f` added at the hook for every new token.
pub fn steer_generate(
    lm: &ToyLm,
    prefix: &Trajectory,
    config: &SteeringConfig,
    temperature: f64,
    rng: Option<&mut Rng>,
) -> Result<Trajectory> {
    config.validate(lm.n_dim())?;
    let injection = Injection::new(&config.feature, config.alpha);
    lm.generate(prefix, config.horizon, temperature, Some(injection), rng, false)
}

/// Noise stream for evaluation run `index`. Baseline and steered runs of
/// the same prefix draw the same stream, so they differ only through the
/// injection.
pub fn paired_rng(seed: u64, index: usize) -> Rng {
    Rng::derive(seed, index as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaSearchConfig {
    pub alpha_start: f64,
    pub rule: RepetitionRule,
    pub horizon: usize,
}

impl Default for AlphaSearchConfig {
    fn default() -> Self {
        Self {
            alpha_start: 15.0,
            rule: RepetitionRule::default(),
            horizon: 64,
        }
    }
}

impl AlphaSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_start >= 1.0) || self.horizon == 0 {
            return Err(invalid("alpha search needs alpha_start >= 1 and horizon >= 1"));
        }
        self.rule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearch {
    /// Chosen strength for each prefix, in prefix order.
    pub per_prefix: Vec<f64>,
    pub mean: f64,
    /// Total generations run.
    pub generations: usize,
}

/// Decrement search over an abstract "is steering at α repetitive on
/// prefix i" oracle.
pub fn search_alpha_with<F>(alpha_start: f64, n_prefixes: usize, repetitive: F) -> Result<AlphaSearch>
where
    F: Fn(usize, f64) -> Result<bool> + Sync,
{
    if !(alpha_start >= 1.0) {
        return Err(invalid("alpha_start must be >= 1"));
    }
    if n_prefixes == 0 {
        return Err(invalid("alpha search needs at least one prefix"));
    }
    let runs: Vec<(f64, usize)> = (0..n_prefixes)
        .into_par_iter()
        .map(|i| {
            let mut alpha = alpha_start;
            let mut count = 0;
            loop {
                count += 1;
                if !repetitive(i, alpha)? || alpha <= 0.0 {
                    return Ok((alpha, count));
                }
                alpha = (alpha - 1.0).max(0.0);
            }
        })
        .collect::<Result<_>>()?;
    let per_prefix: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let mean = per_prefix.iter().sum::<f64>() / n_prefixes as f64;
    Ok(AlphaSearch {
        per_prefix,
        mean,
        generations: runs.iter().map(|r| r.1).sum(),
    })
}

/// Search the steering strength for `feature` over validation prefixes.
/// Prefix `i` is generated with noise stream `paired_rng(noise_seed, i)`.
pub fn search_alpha(
    lm: &ToyLm,
    feature: &Vector,
    prefixes: &[Trajectory],
    config: &AlphaSearchConfig,
    noise_seed: u64,
) -> Result<AlphaSearch> {
    config.validate()?;
    search_alpha_with(config.alpha_start, prefixes.len(), |i, alpha| {
        let cfg = SteeringConfig::new(feature.clone(), alpha, config.horizon);
        let mut rng = paired_rng(noise_seed, i);
        let traj = steer_generate(lm, &prefixes[i], &cfg, 0.0, Some(&mut rng))?;
        Ok(is_repetitive(&traj, &config.rule))
    })
}

/// Expected logit shift `α · Uᵀ · f` of an injection.
pub fn logit_delta_oracle(u: &Matrix, feature: &Vector, alpha: f64) -> Result<Vector> {
    Ok(u.matvec_t(feature)?.scaled(alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::keyword_judge;
    use crate::numerics::Rng;
    use crate::toylm::ToyLmConfig;
    use proptest::prelude::*;

    fn raw(tokens: &[usize]) -> Trajectory {
        Trajectory {
            tokens: tokens.to_vec(),
            prefix_len: 0,
            activations: None,
            state: Vector::zeros(1),
        }
    }

    fn rule(l: usize, r: usize) -> RepetitionRule {
        RepetitionRule {
            min_gram: l,
            min_repeats: r,
        }
    }

    #[test]
    fn repetition_examples() {
        assert!(is_repetitive(&raw(&[1, 2, 1, 2, 1, 2]), &rule(2, 3)));
        assert!(!is_repetitive(&raw(&[1, 2, 3, 4, 5, 6, 7, 8, 9]), &rule(1, 2)));
        assert!(is_repetitive(&raw(&[4, 4, 4, 4]), &rule(1, 4)));
        assert!(!is_repetitive(&raw(&[4, 4, 4]), &rule(1, 4)));
        // two copies only
        assert!(!is_repetitive(&raw(&[1, 2, 3, 1, 2, 3]), &rule(3, 3)));
        assert!(is_repetitive(&raw(&[9, 1, 2, 3, 1, 2, 3, 1, 2, 3, 8]), &rule(3, 3)));
        // a period-2 loop also repeats its 4-grams
        assert!(is_repetitive(&raw(&[1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1, 2]), &rule(3, 3)));
        assert!(!is_repetitive(&raw(&[1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1]), &rule(3, 3)));
    }

    #[test]
    fn repetition_ignores_the_prefix() {
        let mut t = raw(&[5, 5, 5, 5, 5, 5, 5, 5, 5, 1, 2, 3]);
        assert!(is_repetitive(&t, &rule(3, 3)));
        t.prefix_len = 9;
        assert!(!is_repetitive(&t, &rule(3, 3)));
    }

    fn brute_repetitive(t: &[usize], l: usize, r: usize) -> bool {
        for len in l..=t.len() {
            for start in 0..t.len() {
                if start + len * r > t.len() {
                    break;
                }
                let block = &t[start..start + len];
                if (1..r).all(|c| &t[start + c * len..start + (c + 1) * len] == block) {
                    return true;
                }
            }
        }
        false
    }

    proptest! {
        #[test]
        fn detector_matches_brute_force(t in prop::collection::vec(0usize..3, 0..30), l in 1usize..4, r in 2usize..4) {
            prop_assert_eq!(rule(l, r).matches(&t), brute_repetitive(&t, l, r));
        }
    }

    #[test]
    fn search_on_constant_profiles() {
        let never = search_alpha_with(15.0, 4, |_, _| Ok(false)).unwrap();
        assert_eq!(never.per_prefix, vec![15.0; 4]);
        assert_eq!(never.mean, 15.0);
        assert_eq!(never.generations, 4);
        let always = search_alpha_with(15.0, 2, |_, _| Ok(true)).unwrap();
        assert_eq!(always.per_prefix, vec![0.0, 0.0]);
        // 15, 14, ..., 0
        assert_eq!(always.generations, 2 * 16);
    }

    #[test]
    fn search_stops_at_first_clean_alpha() {
        // repetition is not monotone here: clean at 9, loops at 8
        let s = search_alpha_with(12.0, 1, |_, a| Ok(a > 9.0 || a == 8.0)).unwrap();
        assert_eq!(s.per_prefix, vec![9.0]);
    }

    #[test]
    fn search_rejects_bad_start() {
        assert!(search_alpha_with(0.5, 1, |_, _| Ok(false)).is_err());
        assert!(search_alpha_with(3.0, 0, |_, _| Ok(false)).is_err());
    }

    fn lm() -> ToyLm {
        ToyLm::build(&ToyLmConfig::default()).unwrap()
    }

    fn prefix(lm: &ToyLm, seed: u64) -> Trajectory {
        let mut rng = Rng::seed(seed);
        let start = lm.start(Some(&mut rng), false).unwrap();
        lm.generate(&start, 31, 1.0, None, Some(&mut rng), false).unwrap().into_prefix()
    }

    #[test]
    fn zero_alpha_matches_baseline() {
        let lm = lm();
        let p = prefix(&lm, 1);
        let base = lm.generate(&p, 64, 0.0, None, Some(&mut paired_rng(5, 0)), false).unwrap();
        let cfg = SteeringConfig::new(lm.strategy_dir(2), 0.0, 64);
        let steered = steer_generate(&lm, &p, &cfg, 0.0, Some(&mut paired_rng(5, 0))).unwrap();
        assert_eq!(base, steered);
    }

    #[test]
    fn doubled_alpha_with_halved_feature_is_identical() {
        let lm = lm();
        let p = prefix(&lm, 2);
        let g = lm.strategy_dir(1);
        let a = SteeringConfig::new(g.clone(), 3.0, 64);
        let b = SteeringConfig::new(g.scaled(0.5), 6.0, 64);
        let ta = steer_generate(&lm, &p, &a, 0.0, Some(&mut paired_rng(9, 3))).unwrap();
        let tb = steer_generate(&lm, &p, &b, 0.0, Some(&mut paired_rng(9, 3))).unwrap();
        assert_eq!(ta.tokens, tb.tokens);
    }

    #[test]
    fn planted_steering_raises_keyword_counts() {
        let lm = lm();
        for s in 0..lm.n_strategies() {
            let p = prefix(&lm, 10 + s as u64);
            let base = lm.generate(&p, 64, 0.0, None, Some(&mut paired_rng(1, s)), false).unwrap();
            let cfg = SteeringConfig::new(lm.strategy_dir(s), 6.0, 64);
            let steered = steer_generate(&lm, &p, &cfg, 0.0, Some(&mut paired_rng(1, s))).unwrap();
            let spec = &lm.strategies[s];
            assert!(spec.count_keywords(steered.suffix()) > spec.count_keywords(base.suffix()));
        }
    }

    #[test]
    fn judge_agrees_with_planted_target() {
        let lm = lm();
        let mut rng = Rng::seed(77);
        let mut agree = 0;
        for run in 0..100 {
            let target = rng.below(lm.n_strategies());
            let p = prefix(&lm, 1000 + run);
            let base = lm.generate(&p, 64, 0.0, None, Some(&mut paired_rng(2, run as usize)), false).unwrap();
            let cfg = SteeringConfig::new(lm.strategy_dir(target), 6.0, 64);
            let steered = steer_generate(&lm, &p, &cfg, 0.0, Some(&mut paired_rng(2, run as usize))).unwrap();
            let verdicts: Vec<bool> = lm
                .strategies
                .iter()
                .map(|spec| keyword_judge(&base, &steered, spec, 3).unwrap().value)
                .collect();
            if verdicts.iter().enumerate().all(|(s, v)| *v == (s == target)) {
                agree += 1;
            }
        }
        assert!(agree >= 95, "judge agreed on {agree}/100 runs");
    }

    #[test]
    fn zero_feature_search_keeps_the_start() {
        let lm = lm();
        let prefixes: Vec<_> = (0..8).map(|i| prefix(&lm, 200 + i)).collect();
        let cfg = AlphaSearchConfig::default();
        for (i, p) in prefixes.iter().enumerate() {
            let base = lm.generate(p, 64, 0.0, None, Some(&mut paired_rng(4, i)), false).unwrap();
            assert!(!is_repetitive(&base, &cfg.rule));
        }
        let s = search_alpha(&lm, &Vector::zeros(lm.n_dim()), &prefixes, &cfg, 4).unwrap();
        assert_eq!(s.mean, 15.0);
    }

    #[test]
    fn injection_shift_matches_oracle() {
        let lm = lm();
        let mut rng = Rng::seed(3);
        let state = rng.gaussian_vector(lm.n_dim(), 1.0);
        let f = rng.gaussian_vector(lm.n_dim(), 1.0);
        let alpha = 2.75;
        let base = lm.step(&state, 40, None, None, None).unwrap();
        let steered = lm.step(&state, 40, Some(Injection::new(&f, alpha)), None, None).unwrap();
        let oracle = logit_delta_oracle(&lm.unembed, &f, alpha).unwrap();
        for v in 0..lm.vocab() {
            let d = steered.logits[v] - base.logits[v];
            assert!((d - oracle[v]).abs() <= 1e-12 * (1.0 + oracle[v].abs()));
        }
    }

    #[test]
    fn oracle_examples() {
        let u = Matrix::identity(4);
        let f = u.col_vector(2);
        assert_eq!(logit_delta_oracle(&u, &f, 0.0).unwrap(), Vector::zeros(4));
        assert_eq!(logit_delta_oracle(&u, &f, 1.0).unwrap(), Vector::basis(4, 2));
        assert!(logit_delta_oracle(&u, &Vector::zeros(3), 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SteeringConfig::new(Vector::zeros(4), -1.0, 4).validate(4).is_err());
        assert!(SteeringConfig::new(Vector::zeros(4), 1.0, 0).validate(4).is_err());
        assert!(SteeringConfig::new(Vector::zeros(3), 1.0, 4).validate(4).is_err());
        assert!(RepetitionRule { min_gram: 0, min_repeats: 3 }.validate().is_err());
        assert!(RepetitionRule { min_gram: 2, min_repeats: 1 }.validate().is_err());
    }
}
