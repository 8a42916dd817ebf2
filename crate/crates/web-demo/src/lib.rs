//! wasm-bindgen wrapper around the toy model for the static demo page in
//! `www/`. Each operation returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use sae_steering::correct::{budget_force, make_problem_set, steer_with, PoolEntry, ProblemConfig};
use sae_steering::identify::validation_prefixes;
use sae_steering::numerics::topk_indices;
use sae_steering::steering::{is_repetitive, logit_delta_oracle, paired_rng, steer_generate, RepetitionRule, SteeringConfig};
use sae_steering::toylm::{ToyLm, ToyLmConfig, TokenId};

const PREFIX_LEN: usize = 16;
const CORRECTION_HORIZON: usize = 128;

#[derive(Debug, Serialize)]
pub struct TokenView {
    pub id: TokenId,
    pub label: String,
    /// Strategy whose keyword or answer this token is.
    pub strategy: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct StrategyView {
    pub id: usize,
    pub name: String,
    pub keywords: Vec<TokenView>,
    pub answer: TokenView,
}

#[derive(Debug, Serialize)]
pub struct SteerView {
    pub prefix: Vec<TokenView>,
    pub generated: Vec<TokenView>,
    pub keyword_counts: Vec<usize>,
    pub repetitive: bool,
}

#[derive(Debug, Serialize)]
pub struct LensRow {
    pub token: TokenView,
    pub logit: f64,
}

#[derive(Debug, Serialize)]
pub struct CorrectionView {
    pub prefix_tail: Vec<TokenView>,
    pub target: usize,
    pub wrong: usize,
    pub unsteered: Option<TokenView>,
    pub steered: Option<TokenView>,
    pub unsteered_ok: bool,
    pub steered_ok: bool,
}

/// The toy model plus the operations the page exposes.
#[wasm_bindgen]
pub struct Demo {
    lm: ToyLm,
}

impl Demo {
    pub fn build(seed: u64) -> Result<Self, String> {
        let cfg = ToyLmConfig { seed, ..ToyLmConfig::default() };
        Ok(Self { lm: ToyLm::build(&cfg).map_err(|e| e.to_string())? })
    }

    fn token(&self, id: TokenId) -> TokenView {
        let strategy = self
            .lm
            .answer_strategy(id)
            .or_else(|| self.lm.strategies.iter().find(|s| s.is_keyword(id)).map(|s| s.id));
        TokenView { id, label: self.lm.token_label(id), strategy }
    }

    fn check_strategy(&self, s: usize) -> Result<(), String> {
        if s >= self.lm.n_strategies() {
            return Err(format!("strategy {s} out of range (0..{})", self.lm.n_strategies()));
        }
        Ok(())
    }

    pub fn strategy_views(&self) -> Vec<StrategyView> {
        self.lm
            .strategies
            .iter()
            .map(|s| StrategyView {
                id: s.id,
                name: s.name.clone(),
                keywords: s.keywords.iter().map(|t| self.token(*t)).collect(),
                answer: self.token(s.answer_token),
            })
            .collect()
    }

    /// Greedy continuation of a sampled prefix with `α · g_s` injected.
    pub fn steer_view(&self, strategy: usize, alpha: f64, horizon: usize, noise_seed: u64) -> Result<SteerView, String> {
        self.check_strategy(strategy)?;
        let err = |e: sae_steering::error::Error| e.to_string();
        let prefix = validation_prefixes(&self.lm, 1, PREFIX_LEN, noise_seed).map_err(err)?.remove(0);
        let cfg = SteeringConfig::new(self.lm.strategy_dir(strategy), alpha, horizon);
        let traj = steer_generate(&self.lm, &prefix, &cfg, 0.0, Some(&mut paired_rng(noise_seed, 0))).map_err(err)?;
        Ok(SteerView {
            prefix: prefix.tokens.iter().map(|t| self.token(*t)).collect(),
            generated: traj.suffix().iter().map(|t| self.token(*t)).collect(),
            keyword_counts: self.lm.strategies.iter().map(|s| s.count_keywords(traj.suffix())).collect(),
            repetitive: is_repetitive(&traj, &RepetitionRule::default()),
        })
    }

    /// Top tokens of `Uᵀ g_s`.
    pub fn lens_view(&self, strategy: usize, top: usize) -> Result<Vec<LensRow>, String> {
        self.check_strategy(strategy)?;
        let delta = logit_delta_oracle(&self.lm.unembed, &self.lm.strategy_dir(strategy), 1.0).map_err(|e| e.to_string())?;
        Ok(topk_indices(delta.as_slice(), top)
            .into_iter()
            .map(|t| LensRow { token: self.token(t), logit: delta.as_slice()[t] })
            .collect())
    }

    /// One flawed problem for `target`, continued after WAIT with and
    /// without steering along the target's direction.
    pub fn correction_view(&self, target: usize, alpha: f64, seed: u64) -> Result<CorrectionView, String> {
        self.check_strategy(target)?;
        let err = |e: sae_steering::error::Error| e.to_string();
        let problems = make_problem_set(&self.lm, target + 1, &ProblemConfig::default(), seed).map_err(err)?;
        let p = &problems[target];
        let entry = PoolEntry {
            strategy: target,
            feature_id: target,
            alpha,
            vector: self.lm.strategy_dir(target),
        };
        let plain = budget_force(&self.lm, p, CORRECTION_HORIZON, seed, target).map_err(err)?;
        let steered = steer_with(&self.lm, p, &entry, CORRECTION_HORIZON, seed, target, "steered").map_err(err)?;
        let tail = p.prefix.tokens.len().saturating_sub(12);
        Ok(CorrectionView {
            prefix_tail: p.prefix.tokens[tail..].iter().map(|t| self.token(*t)).collect(),
            target,
            wrong: p.wrong_strategy,
            unsteered: plain.answer.map(|t| self.token(t)),
            steered: steered.answer.map(|t| self.token(t)),
            unsteered_ok: plain.corrected,
            steered_ok: steered.corrected,
        })
    }
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Demo, JsError> {
        Demo::build(seed).map_err(|e| JsError::new(&e))
    }

    pub fn strategies(&self) -> Result<String, JsError> {
        json(Ok(self.strategy_views()))
    }

    pub fn steer(&self, strategy: usize, alpha: f64, horizon: usize, noise_seed: u64) -> Result<String, JsError> {
        json(self.steer_view(strategy, alpha, horizon, noise_seed))
    }

    pub fn lens(&self, strategy: usize, top: usize) -> Result<String, JsError> {
        json(self.lens_view(strategy, top))
    }

    pub fn correct(&self, target: usize, alpha: f64, seed: u64) -> Result<String, JsError> {
        json(self.correction_view(target, alpha, seed))
    }
}
