//! Keyword-count judge comparing a steered continuation against its
//! baseline.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::toylm::{StrategySpec, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub value: bool,
    pub baseline_count: usize,
    pub steered_count: usize,
}

/// Anything that can decide whether `steered` shows `strategy` more
/// explicitly than `baseline`.
pub trait Judge: Sync {
    fn judge(&self, baseline: &Trajectory, steered: &Trajectory, strategy: &StrategySpec) -> Result<Judgment>;
}

/// Counts strategy keywords in the generated suffixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordJudge {
    pub m_min: usize,
}

impl Default for KeywordJudge {
    fn default() -> Self {
        Self { m_min: 3 }
    }
}

impl Judge for KeywordJudge {
    fn judge(&self, baseline: &Trajectory, steered: &Trajectory, strategy: &StrategySpec) -> Result<Judgment> {
        keyword_judge(baseline, steered, strategy, self.m_min)
    }
}

pub fn keyword_judge(
    baseline: &Trajectory,
    steered: &Trajectory,
    strategy: &StrategySpec,
    m_min: usize,
) -> Result<Judgment> {
    let (b, s) = (baseline.suffix(), steered.suffix());
    if b.len() != s.len() {
        return Err(invalid(format!(
            "generated lengths differ: baseline {} vs steered {}",
            b.len(),
            s.len()
        )));
    }
    let baseline_count = strategy.count_keywords(b);
    let steered_count = strategy.count_keywords(s);
    Ok(Judgment {
        value: steered_count > baseline_count && steered_count >= m_min,
        baseline_count,
        steered_count,
    })
}

/// Strict majority over an odd number of binary votes.
pub fn majority_vote(votes: &[bool]) -> Result<bool> {
    if votes.is_empty() || votes.len() % 2 == 0 {
        return Err(invalid(format!("majority vote needs an odd, non-empty list, got {}", votes.len())));
    }
    let yes = votes.iter().filter(|v| **v).count();
    Ok(2 * yes > votes.len())
}
