//! Stage summaries, the combined run report and its CSV summary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::toylm::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyInfo {
    pub id: usize,
    pub name: String,
    pub keywords: Vec<TokenId>,
    pub answer_token: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub n_dim: usize,
    pub vocab: usize,
    pub strategies: Vec<StrategyInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub strategy_id: usize,
    pub feature_id: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub samples: usize,
    pub m_dim: usize,
    pub k: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub dead_features: Option<usize>,
    /// Best decoder-column cosine with each planted direction.
    pub recovery: Vec<Recovery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSummary {
    pub top_n: usize,
    /// Fraction of planted keywords present in the extracted lists.
    pub planted_recovery: f64,
    pub curated_per_strategy: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub total_features: usize,
    pub recalled: usize,
    pub recall_fraction: f64,
    pub per_strategy: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessRow {
    pub feature_id: usize,
    pub alpha: f64,
    pub success_rate: f64,
    pub successes: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTable {
    pub strategy_id: usize,
    pub name: String,
    pub rows: Vec<EffectivenessRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub strategy_id: usize,
    pub feature_id: usize,
    pub alpha: f64,
    /// Fraction of router training problems this entry corrects.
    pub train_fix_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSummary {
    pub pool: Vec<PoolSummary>,
    pub training_pairs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub heldout_contexts: usize,
    pub accuracy: f64,
    /// Agreement of the routed index with exhaustive scoring.
    pub argmax_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub problems: usize,
    pub horizon: usize,
    pub rates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: RunConfig,
    pub model: ModelSummary,
    pub sae: SaeSummary,
    pub keywords: KeywordSummary,
    pub recall: RecallSummary,
    pub effectiveness: Vec<StrategyTable>,
    pub routing: RoutingSummary,
    pub correction: CorrectionSummary,
}

/// Wall-clock seconds per stage. Kept out of the report so reports of
/// identical runs compare equal byte for byte.
pub type Timings = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy_id: usize,
    pub strategy: String,
    pub rank: usize,
    pub feature_id: usize,
    pub alpha: f64,
    pub success_rate: f64,
}

/// One row per selected feature.
pub fn summary_rows(report: &RunReport) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for table in &report.effectiveness {
        for (rank, row) in table.rows.iter().filter(|r| r.selected).enumerate() {
            out.push(SummaryRow {
                strategy_id: table.strategy_id,
                strategy: table.name.clone(),
                rank: rank + 1,
                feature_id: row.feature_id,
                alpha: row.alpha,
                success_rate: row.success_rate,
            });
        }
    }
    out
}

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Write `report.json` and `summary.csv` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    write_json(&dir.join(REPORT_FILE), report)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let rows = summary_rows(report);
    if rows.is_empty() {
        w.write_record(["strategy_id", "strategy", "rank", "feature_id", "alpha", "success_rate"])
            .map_err(csv_err)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join(SUMMARY_FILE), &bytes)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Write via a temporary sibling and rename, so a crash never leaves a
/// half-written file that looks complete.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample_report(tables: Vec<StrategyTable>) -> RunReport {
        RunReport {
            seed: 3,
            config: RunConfig::default(),
            model: ModelSummary {
                n_dim: 64,
                vocab: 96,
                strategies: vec![],
            },
            sae: SaeSummary {
                samples: 10,
                m_dim: 512,
                k: 8,
                steps: 0,
                initial_loss: 1.25,
                final_loss: 0.1,
                dead_features: None,
                recovery: vec![Recovery {
                    strategy_id: 0,
                    feature_id: 4,
                    cosine: 0.1 + 0.2,
                }],
            },
            keywords: KeywordSummary {
                top_n: 20,
                planted_recovery: 0.88,
                curated_per_strategy: vec![4, 5],
            },
            recall: RecallSummary {
                total_features: 512,
                recalled: 7,
                recall_fraction: 7.0 / 512.0,
                per_strategy: vec![vec![1, 2], vec![3]],
            },
            effectiveness: tables,
            routing: RoutingSummary {
                pool: vec![],
                training_pairs: 0,
                initial_loss: f64::MIN_POSITIVE,
                final_loss: 1e-300,
                heldout_contexts: 200,
                accuracy: 1.0 / 3.0,
                argmax_agreement: 1.0,
            },
            correction: CorrectionSummary {
                problems: 500,
                horizon: 128,
                rates: [("budget_forcing".to_string(), 0.18)].into_iter().collect(),
            },
        }
    }

    fn table(s: usize, selected: &[bool]) -> StrategyTable {
        StrategyTable {
            strategy_id: s,
            name: format!("s{s}"),
            rows: selected
                .iter()
                .enumerate()
                .map(|(i, sel)| EffectivenessRow {
                    feature_id: 10 * s + i,
                    alpha: 6.5,
                    success_rate: 1.0 - i as f64 / 16.0,
                    successes: 16 - i,
                    selected: *sel,
                })
                .collect(),
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report(vec![table(0, &[true, false]), table(1, &[true])]);
        emit_report(&r, dir.path()).unwrap();
        let back: RunReport = read_json(&dir.path().join(REPORT_FILE)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn summary_has_one_row_per_selected_feature() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report(vec![table(0, &[true, true, true, false]), table(1, &[true, true, true]), table(2, &[])]);
        emit_report(&r, dir.path()).unwrap();
        let rows = read_summary(&dir.path().join(SUMMARY_FILE)).unwrap();
        let selected: usize = r.effectiveness.iter().map(|t| t.rows.iter().filter(|x| x.selected).count()).sum();
        assert_eq!(rows.len(), selected);
        assert_eq!(rows, summary_rows(&r));
        assert_eq!(rows[2].rank, 3);
    }

    #[test]
    fn empty_effectiveness_gives_valid_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report(vec![]);
        emit_report(&r, dir.path()).unwrap();
        let back: RunReport = read_json(&dir.path().join(REPORT_FILE)).unwrap();
        assert!(back.effectiveness.is_empty());
        assert!(read_summary(&dir.path().join(SUMMARY_FILE)).unwrap().is_empty());
        let text = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert!(text.starts_with("strategy_id,strategy,rank"));
    }

    #[test]
    fn malformed_json_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        fs::write(&p, "{").unwrap();
        assert!(matches!(read_json::<RunReport>(&p), Err(Error::Format(_))));
    }
}
