//! Two-stage feature identification: keyword extraction, logit-lens recall
//! and judged steering effectiveness.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::judge::{Judge, Judgment};
use crate::numerics::{topk_indices, Matrix, Rng, Vector};
use crate::sae::{FeatureId, SaeParams};
use crate::steering::{paired_rng, search_alpha, steer_generate, AlphaSearchConfig, SteeringConfig};
use crate::toylm::{StrategySpec, TokenId, ToyLm, Trajectory};

/// Most frequent tokens per strategy, with counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordTable {
    pub top_n: usize,
    pub per_strategy: Vec<Vec<(TokenId, usize)>>,
}

impl KeywordTable {
    pub fn tokens(&self, strategy: usize) -> Vec<TokenId> {
        self.per_strategy[strategy].iter().map(|(t, _)| *t).collect()
    }

    /// Keep only entries that are keywords of the matching strategy spec.
    pub fn curated(&self, specs: &[StrategySpec]) -> KeywordTable {
        KeywordTable {
            top_n: self.top_n,
            per_strategy: self
                .per_strategy
                .iter()
                .zip(specs)
                .map(|(list, spec)| list.iter().copied().filter(|(t, _)| spec.is_keyword(*t)).collect())
                .collect(),
        }
    }
}

/// Per strategy, the `top_n` most frequent tokens outside `stop_tokens`,
/// ties broken by lower token id.
pub fn extract_keywords(corpus: &[Vec<TokenId>], top_n: usize, stop_tokens: &[TokenId]) -> Result<KeywordTable> {
    let stop: BTreeSet<TokenId> = stop_tokens.iter().copied().collect();
    let per_strategy = corpus
        .iter()
        .enumerate()
        .map(|(s, tokens)| {
            if tokens.is_empty() {
                return Err(invalid(format!("empty corpus for strategy {s}")));
            }
            let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
            for t in tokens.iter().filter(|t| !stop.contains(t)) {
                *counts.entry(*t).or_default() += 1;
            }
            let mut ranked: Vec<(TokenId, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(top_n);
            Ok(ranked)
        })
        .collect::<Result<_>>()?;
    Ok(KeywordTable { top_n, per_strategy })
}

/// Concatenate corpus segments by strategy label (unlabelled segments are
/// dropped).
pub fn group_segments(segments: &[(Option<usize>, Vec<TokenId>)], n_strategies: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new(); n_strategies];
    for (label, tokens) in segments {
        if let Some(s) = label {
            out[*s].extend_from_slice(tokens);
        }
    }
    out
}

/// `L = W_decᵀ · U`: row `i` holds the logit contribution of feature `i`.
pub fn logit_contribution_matrix(w_dec: &Matrix, u: &Matrix) -> Result<Matrix> {
    if w_dec.rows() != u.rows() {
        return Err(invalid(format!(
            "decoder has {} rows but unembedding has {}",
            w_dec.rows(),
            u.rows()
        )));
    }
    w_dec.transpose().matmul(u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFeature {
    pub feature_id: FeatureId,
    pub top_tokens: Vec<TokenId>,
    pub contributions: Vec<f64>,
    pub matched_keywords: Vec<TokenId>,
    pub strategy_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub per_strategy: Vec<Vec<CandidateFeature>>,
    pub total_features: usize,
    /// Distinct recalled features over `total_features`.
    pub recall_fraction: f64,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.per_strategy.iter().all(Vec::is_empty)
    }

    /// All (strategy, feature) pairs in strategy order.
    pub fn pairs(&self) -> Vec<(usize, FeatureId)> {
        self.per_strategy
            .iter()
            .flat_map(|list| list.iter().map(|c| (c.strategy_id, c.feature_id)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecallConfig {
    /// Minimum number of matched keywords.
    pub n: usize,
    /// Contribution every matched keyword must exceed.
    pub tau: f64,
    pub top_m: usize,
}

impl Default for RecallConfig {
    fn default() -> Self {
        Self {
            n: 2,
            tau: 0.1,
            top_m: 10,
        }
    }
}

impl RecallConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.top_m < self.n {
            return Err(invalid("recall needs n >= 1 and top_m >= n"));
        }
        Ok(())
    }
}

/// A feature is recalled for strategy `s` when at least `n` of its `top_m`
/// tokens are keywords of `s` and each of those contributes more than `tau`.
pub fn recall_stage1(l: &Matrix, keywords: &[Vec<TokenId>], config: &RecallConfig) -> Result<CandidateSet> {
    config.validate()?;
    let sets: Vec<BTreeSet<TokenId>> = keywords.iter().map(|k| k.iter().copied().collect()).collect();
    let mut per_strategy = vec![Vec::new(); keywords.len()];
    let mut recalled = BTreeSet::new();
    for i in 0..l.rows() {
        let row = l.row(i);
        let top = topk_indices(row, config.top_m.min(row.len()));
        for (s, set) in sets.iter().enumerate() {
            let matched: Vec<TokenId> = top.iter().copied().filter(|t| set.contains(t)).collect();
            if matched.len() >= config.n && matched.iter().all(|t| row[*t] > config.tau) {
                recalled.insert(i);
                per_strategy[s].push(CandidateFeature {
                    feature_id: i,
                    contributions: top.iter().map(|t| row[*t]).collect(),
                    top_tokens: top.clone(),
                    matched_keywords: matched,
                    strategy_id: s,
                });
            }
        }
    }
    Ok(CandidateSet {
        per_strategy,
        total_features: l.rows(),
        recall_fraction: if l.rows() == 0 { 0.0 } else { recalled.len() as f64 / l.rows() as f64 },
    })
}

/// `count` prefixes of `len` tokens: BOS followed by tokens sampled at
/// temperature 1.
pub fn validation_prefixes(lm: &ToyLm, count: usize, len: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if len < 2 {
        return Err(invalid("validation prefixes need at least two tokens"));
    }
    (0..count)
        .map(|i| {
            let mut rng = Rng::derive(seed, i as u64);
            let start = lm.start(Some(&mut rng), false)?;
            Ok(lm.generate(&start, len - 1, 1.0, None, Some(&mut rng), false)?.into_prefix())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessEntry {
    pub strategy_id: usize,
    pub feature_id: FeatureId,
    pub alpha: f64,
    pub alpha_per_prefix: Vec<f64>,
    pub judgments: Vec<Judgment>,
    pub success_rate: f64,
}

impl EffectivenessEntry {
    pub fn successes(&self) -> usize {
        self.judgments.iter().filter(|j| j.value).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessReport {
    /// Per strategy, sorted by rate (descending) then feature id.
    pub per_strategy: Vec<Vec<EffectivenessEntry>>,
    pub validation_size: usize,
}

/// Evaluation settings shared by every candidate.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Settings<'a> {
    pub horizon: usize,
    pub alpha_search: &'a AlphaSearchConfig,
    pub noise_seed: u64,
}

/// Baseline continuations of the validation prefixes.
pub fn baselines(lm: &ToyLm, prefixes: &[Trajectory], horizon: usize, noise_seed: u64) -> Result<Vec<Trajectory>> {
    prefixes
        .par_iter()
        .enumerate()
        .map(|(i, p)| lm.generate(p, horizon, 0.0, None, Some(&mut paired_rng(noise_seed, i)), false))
        .collect()
}

/// Search α for one steering vector and judge it on every prefix.
pub fn evaluate_feature(
    lm: &ToyLm,
    feature: &Vector,
    strategy: &StrategySpec,
    prefixes: &[Trajectory],
    baselines: &[Trajectory],
    judge: &dyn Judge,
    settings: &Stage2Settings<'_>,
) -> Result<(f64, Vec<f64>, Vec<Judgment>)> {
    let search = search_alpha(lm, feature, prefixes, settings.alpha_search, settings.noise_seed)?;
    let cfg = SteeringConfig::new(feature.clone(), search.mean, settings.horizon);
    let judgments = prefixes
        .par_iter()
        .zip(baselines)
        .enumerate()
        .map(|(i, (p, base))| {
            let steered = steer_generate(lm, p, &cfg, 0.0, Some(&mut paired_rng(settings.noise_seed, i)))?;
            judge.judge(base, &steered, strategy)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((search.mean, search.per_prefix, judgments))
}

/// Rank every recalled candidate by its judged success rate.
pub fn rank_stage2(
    candidates: &CandidateSet,
    sae: &SaeParams,
    lm: &ToyLm,
    validation: &[Trajectory],
    judge: &dyn Judge,
    settings: &Stage2Settings<'_>,
) -> Result<EffectivenessReport> {
    if validation.is_empty() {
        return Err(invalid("stage 2 needs validation prefixes"));
    }
    if candidates.is_empty() {
        return Err(invalid("stage 2 needs at least one candidate"));
    }
    if settings.horizon != settings.alpha_search.horizon {
        return Err(invalid("alpha search and evaluation must share the horizon"));
    }
    let base = baselines(lm, validation, settings.horizon, settings.noise_seed)?;
    let mut per_strategy = Vec::with_capacity(candidates.per_strategy.len());
    for (s, list) in candidates.per_strategy.iter().enumerate() {
        let spec = lm
            .strategies
            .get(s)
            .ok_or_else(|| invalid(format!("candidate strategy {s} unknown to the model")))?;
        let mut entries = list
            .iter()
            .map(|c| {
                let f = sae.feature(c.feature_id)?;
                let (alpha, alpha_per_prefix, judgments) =
                    evaluate_feature(lm, &f, spec, validation, &base, judge, settings)?;
                let success_rate = judgments.iter().filter(|j| j.value).count() as f64 / judgments.len() as f64;
                Ok(EffectivenessEntry {
                    strategy_id: s,
                    feature_id: c.feature_id,
                    alpha,
                    alpha_per_prefix,
                    judgments,
                    success_rate,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.sort_by(|a, b| b.success_rate.total_cmp(&a.success_rate).then(a.feature_id.cmp(&b.feature_id)));
        per_strategy.push(entries);
    }
    Ok(EffectivenessReport {
        per_strategy,
        validation_size: validation.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Per strategy, the chosen entries (best first).
    pub per_strategy: Vec<Vec<EffectivenessEntry>>,
    /// Strategies that had fewer candidates than requested.
    pub shortfall: Vec<usize>,
}

impl Selection {
    pub fn top(&self, strategy: usize) -> Option<&EffectivenessEntry> {
        self.per_strategy.get(strategy).and_then(|l| l.first())
    }

    pub fn total(&self) -> usize {
        self.per_strategy.iter().map(Vec::len).sum()
    }
}

/// The `per_strategy` best-ranked features of each strategy.
pub fn select_top(report: &EffectivenessReport, per_strategy: usize) -> Result<Selection> {
    if per_strategy == 0 {
        return Err(invalid("select at least one feature per strategy"));
    }
    let mut shortfall = Vec::new();
    let chosen = report
        .per_strategy
        .iter()
        .enumerate()
        .map(|(s, list)| {
            if list.len() < per_strategy {
                shortfall.push(s);
            }
            list.iter().take(per_strategy).cloned().collect()
        })
        .collect();
    Ok(Selection {
        per_strategy: chosen,
        shortfall,
    })
}
