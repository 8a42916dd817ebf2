//! Stage orchestration over a run directory.
//!
//! Each stage reads its inputs from files written by earlier stages and
//! writes its own outputs atomically, so a run can resume after any stage
//! and a resumed run produces the same bytes as an uninterrupted one.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stream};
use crate::correct::{
    budget_force, fix_rates, label_pool, make_problem_set, oracle_choice, oracle_correct, router_pairs, routing_accuracy, steered_correct,
    candidates as pool_candidates, correction_rate, CorrectionResult, PoolEntry,
};
use crate::dump::{self, Tensor};
use crate::error::{Error, Result};
use crate::identify::{
    extract_keywords, group_segments, logit_contribution_matrix, rank_stage2, recall_stage1, select_top,
    validation_prefixes, CandidateSet, EffectivenessReport, KeywordTable, Selection, Stage2Settings,
};
use crate::judge::KeywordJudge;
use crate::numerics::{Matrix, Vector};
use crate::report::{
    emit_report, read_json, write_json, CorrectionSummary, EffectivenessRow, KeywordSummary, ModelSummary,
    PoolSummary, RecallSummary, Recovery, RoutingSummary, RunReport, SaeSummary, StrategyInfo, StrategyTable,
    Timings,
};
use crate::router::{route, score, train_router};
use crate::sae::{train_sae, SaeParams};
use crate::toylm::{alternating_schedule, LabeledActivationSet, TokenId, ToyLm};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SAE_STEER_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOCK_FILE: &str = ".lock";
pub const TIMINGS_FILE: &str = "timings.json";
/// Stage-2 ranking kept for inspection when no feature is recovered.
pub const REJECTED_RANKING: &str = "effectiveness.rejected.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Build,
    Sample,
    TrainSae,
    Keywords,
    Recall,
    Rank,
    Select,
    TrainRouter,
    Correct,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Build,
        Stage::Sample,
        Stage::TrainSae,
        Stage::Keywords,
        Stage::Recall,
        Stage::Rank,
        Stage::Select,
        Stage::TrainRouter,
        Stage::Correct,
        Stage::Report,
    ];

    /// Name used in diagnostics and timings.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Build => "build-toylm",
            Stage::Sample => "sample-corpus",
            Stage::TrainSae => "train-sae",
            Stage::Keywords => "extract-keywords",
            Stage::Recall => "stage1-recall",
            Stage::Rank => "stage2-rank",
            Stage::Select => "select",
            Stage::TrainRouter => "route-train",
            Stage::Correct => "correct",
            Stage::Report => "report",
        }
    }

    /// Files whose presence marks the stage as done.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Build => &["model.json", "model.bin"],
            Stage::Sample => &["corpus.bin", "segments.json"],
            Stage::TrainSae => &["sae.bin", "sae.json"],
            Stage::Keywords => &["keywords.json"],
            Stage::Recall => &["candidates.json"],
            Stage::Rank => &["effectiveness.json"],
            Stage::Select => &["selection.json"],
            Stage::TrainRouter => &["router.bin", "router.json"],
            Stage::Correct => &["correction.json"],
            Stage::Report => &["report.json", "summary.csv"],
        }
    }
}

/// Directory lock held for the lifetime of a [`RunDir`].
#[derive(Debug)]
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "{} is locked by another process (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// An output directory owned by this process.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    config: RunConfig,
    _lock: DirLock,
}

/// Output root: explicit path, else the environment variable, else `runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

impl RunDir {
    /// Open `root`, creating it. With a config, the directory adopts it (or
    /// must already hold the same one); without, the stored config is used.
    pub fn open(root: &Path, config: Option<&RunConfig>) -> Result<Self> {
        fs::create_dir_all(root)?;
        let lock = DirLock::acquire(root)?;
        let path = root.join(CONFIG_FILE);
        let config = match (config, path.exists()) {
            (Some(c), true) => {
                let stored = RunConfig::load(&path)?;
                if stored != normalized(c) {
                    return Err(Error::InvalidArgument(format!(
                        "{} already holds a different config; use a fresh directory",
                        root.display()
                    )));
                }
                stored
            }
            (Some(c), false) => {
                c.validate()?;
                let c = normalized(c);
                crate::report::write_atomic(&path, c.to_toml().as_bytes())?;
                c
            }
            (None, true) => RunConfig::load(&path)?,
            (None, false) => {
                return Err(Error::InvalidArgument(format!(
                    "{} has no {CONFIG_FILE}; start with `build` or `run`",
                    root.display()
                )))
            }
        };
        Ok(Self {
            root: root.to_path_buf(),
            config,
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        stage.outputs().iter().all(|f| self.path(f).exists())
    }

    fn require(&self, stage: Stage) -> Result<()> {
        if self.is_done(stage) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "missing outputs of `{}`; run that stage first",
                stage.name()
            )))
        }
    }

    fn record_timing(&self, stage: Stage, seconds: f64) -> Result<()> {
        let path = self.path(TIMINGS_FILE);
        let mut t: Timings = if path.exists() { read_json(&path)? } else { Timings::new() };
        t.insert(stage.name().to_string(), seconds);
        write_json(&path, &t)
    }
}

/// The run directory never stores an output path inside its own config.
fn normalized(c: &RunConfig) -> RunConfig {
    RunConfig {
        output_dir: None,
        ..c.clone()
    }
}

/// Run one stage. Failures come back as [`Error::Stage`] naming it.
pub fn run_stage(dir: &RunDir, stage: Stage) -> Result<()> {
    let t = Instant::now();
    let out = match stage {
        Stage::Build => build(dir),
        Stage::Sample => sample(dir),
        Stage::TrainSae => train(dir),
        Stage::Keywords => keywords(dir),
        Stage::Recall => recall(dir),
        Stage::Rank => rank(dir),
        Stage::Select => select(dir),
        Stage::TrainRouter => train_routing(dir),
        Stage::Correct => correct(dir),
        Stage::Report => report(dir).map(|_| ()),
    };
    out.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.name().into(),
            message: e.to_string(),
        },
    })?;
    dir.record_timing(stage, t.elapsed().as_secs_f64())
}

/// Run every stage in order. With `resume`, stages whose outputs already
/// exist are skipped.
pub fn run_pipeline(dir: &RunDir, resume: bool) -> Result<RunReport> {
    for stage in Stage::ALL {
        if resume && stage != Stage::Report && dir.is_done(stage) {
            continue;
        }
        run_stage(dir, stage)?;
    }
    read_json(&dir.path(crate::report::REPORT_FILE))
}

fn model(dir: &RunDir) -> Result<ToyLm> {
    ToyLm::build(&dir.config.model_config())
}

fn build(dir: &RunDir) -> Result<()> {
    let lm = model(dir)?;
    let summary = ModelSummary {
        n_dim: lm.n_dim(),
        vocab: lm.vocab(),
        strategies: lm
            .strategies
            .iter()
            .map(|s| StrategyInfo {
                id: s.id,
                name: s.name.clone(),
                keywords: s.keywords.clone(),
                answer_token: s.answer_token,
            })
            .collect(),
    };
    dump::dump_tensors(
        &dir.path("model.bin"),
        &[
            Tensor::from_matrix("embed", &lm.embed),
            Tensor::from_matrix("transition", &lm.transition),
            Tensor::from_matrix("unembed", &lm.unembed),
            Tensor::from_matrix("strategy_dirs", &lm.strategy_dirs),
            Tensor::from_matrix("cue_dirs", &lm.cue_dirs),
            Tensor::from_vector("clock_dir", &lm.clock_dir),
        ],
    )?;
    write_json(&dir.path("model.json"), &summary)
}

fn sample(dir: &RunDir) -> Result<()> {
    dir.require(Stage::Build)?;
    let cfg = &dir.config;
    let lm = model(dir)?;
    let schedule = alternating_schedule(lm.n_strategies(), cfg.corpus.rounds, cfg.corpus.segment_len);
    let (set, segments) = lm.sample_strategy_corpus(&schedule, cfg.stream_seed(Stream::Corpus))?;
    let rows: Vec<Vector> = set.samples.iter().map(|(v, _)| v.clone()).collect();
    let labels: Vec<f32> = set.samples.iter().map(|(_, l)| l.map_or(-1.0, |s| s as f32)).collect();
    dump::dump_tensors(
        &dir.path("corpus.bin"),
        &[
            Tensor::from_matrix("activations", &Matrix::from_rows(&rows)?),
            Tensor::new("labels", vec![labels.len()], labels)?,
        ],
    )?;
    write_json(&dir.path("segments.json"), &segments)
}

fn load_corpus(dir: &RunDir) -> Result<LabeledActivationSet> {
    let t = dump::load_tensors(&dir.path("corpus.bin"))?;
    let acts = dump::find(&t, "activations")?.to_matrix()?;
    let labels = dump::find(&t, "labels")?;
    if labels.data.len() != acts.rows() {
        return Err(Error::Format("corpus labels and activations disagree".into()));
    }
    let samples = (0..acts.rows())
        .map(|i| {
            let l = labels.data[i];
            (acts.row_vector(i), (l >= 0.0).then_some(l as usize))
        })
        .collect();
    Ok(LabeledActivationSet {
        samples,
        source_seed: dir.config.stream_seed(Stream::Corpus),
    })
}

fn load_sae(dir: &RunDir) -> Result<SaeParams> {
    dump::sae_from_tensors(&dump::load_tensors(&dir.path("sae.bin"))?)
}

fn train(dir: &RunDir) -> Result<()> {
    dir.require(Stage::Sample)?;
    let lm = model(dir)?;
    let corpus = load_corpus(dir)?;
    let cfg = dir.config.sae_config();
    let (params, log) = train_sae(&corpus, &cfg)?;
    dump::dump_tensors(&dir.path("sae.bin"), &dump::sae_tensors(&params))?;
    // recovery is measured on the stored (quantized) parameters
    let stored = load_sae(dir)?;
    let recovery = (0..lm.n_strategies())
        .map(|s| {
            let (feature_id, cosine) = stored.best_cosine(&lm.strategy_dir(s));
            Recovery {
                strategy_id: s,
                feature_id,
                cosine,
            }
        })
        .collect();
    write_json(
        &dir.path("sae.json"),
        &SaeSummary {
            samples: corpus.len(),
            m_dim: cfg.m_dim,
            k: cfg.k,
            steps: cfg.steps,
            initial_loss: log.initial_loss,
            final_loss: log.final_loss,
            dead_features: log.dead_features.last().map(|d| d.1),
            recovery,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordFile {
    pub summary: KeywordSummary,
    pub extracted: KeywordTable,
    /// Extracted tokens confirmed against the strategy specs.
    pub curated: KeywordTable,
}

fn keywords(dir: &RunDir) -> Result<()> {
    dir.require(Stage::Sample)?;
    let lm = model(dir)?;
    let segments: Vec<(Option<usize>, Vec<TokenId>)> = read_json(&dir.path("segments.json"))?;
    let grouped = group_segments(&segments, lm.n_strategies());
    let extracted = extract_keywords(&grouped, dir.config.keywords.top_n, &lm.control_tokens())?;
    let curated = extracted.curated(&lm.strategies);
    let planted: usize = lm.strategies.iter().map(|s| s.keywords.len()).sum();
    let found: usize = curated.per_strategy.iter().map(Vec::len).sum();
    let summary = KeywordSummary {
        top_n: extracted.top_n,
        planted_recovery: found as f64 / planted as f64,
        curated_per_strategy: curated.per_strategy.iter().map(Vec::len).collect(),
    };
    write_json(
        &dir.path("keywords.json"),
        &KeywordFile {
            summary,
            extracted,
            curated,
        },
    )
}

fn recall(dir: &RunDir) -> Result<()> {
    dir.require(Stage::TrainSae)?;
    dir.require(Stage::Keywords)?;
    let lm = model(dir)?;
    let sae = load_sae(dir)?;
    let kw: KeywordFile = read_json(&dir.path("keywords.json"))?;
    let lists: Vec<Vec<TokenId>> = (0..lm.n_strategies()).map(|s| kw.curated.tokens(s)).collect();
    let l = logit_contribution_matrix(&sae.w_dec, &lm.unembed)?;
    let set = recall_stage1(&l, &lists, &dir.config.recall)?;
    write_json(&dir.path("candidates.json"), &set)
}

fn no_recovered(message: String) -> Error {
    Error::Stage {
        stage: Stage::Rank.name().into(),
        message: format!("no-recovered-features: {message}"),
    }
}

fn rank(dir: &RunDir) -> Result<()> {
    dir.require(Stage::Recall)?;
    let cfg = &dir.config;
    let candidates: CandidateSet = read_json(&dir.path("candidates.json"))?;
    if candidates.is_empty() {
        write_json(
            &dir.path(REJECTED_RANKING),
            &EffectivenessReport {
                per_strategy: vec![Vec::new(); candidates.per_strategy.len()],
                validation_size: cfg.stage2.validation_size,
            },
        )?;
        return Err(no_recovered("stage 1 recalled no candidate features".into()));
    }
    let lm = model(dir)?;
    let sae = load_sae(dir)?;
    let validation = validation_prefixes(
        &lm,
        cfg.stage2.validation_size,
        cfg.stage2.prefix_len,
        cfg.stream_seed(Stream::Validation),
    )?;
    let search = cfg.stage2.alpha_search();
    let settings = Stage2Settings {
        horizon: cfg.stage2.horizon,
        alpha_search: &search,
        noise_seed: cfg.stream_seed(Stream::Stage2Noise),
    };
    let judge = KeywordJudge { m_min: cfg.stage2.m_min };
    let report = rank_stage2(&candidates, &sae, &lm, &validation, &judge, &settings)?;
    let recovered = report
        .per_strategy
        .iter()
        .flatten()
        .filter(|e| e.success_rate >= cfg.stage2.min_success)
        .count();
    if recovered == 0 {
        write_json(&dir.path(REJECTED_RANKING), &report)?;
        let best = report.per_strategy.iter().flatten().map(|e| e.success_rate).fold(0.0, f64::max);
        return Err(no_recovered(format!(
            "{} candidates evaluated, best success rate {best} is below {}",
            candidates.pairs().len(),
            cfg.stage2.min_success
        )));
    }
    write_json(&dir.path("effectiveness.json"), &report)
}

fn select(dir: &RunDir) -> Result<()> {
    dir.require(Stage::Rank)?;
    let min = dir.config.stage2.min_success;
    let mut report: EffectivenessReport = read_json(&dir.path("effectiveness.json"))?;
    for list in &mut report.per_strategy {
        list.retain(|e| e.success_rate >= min);
    }
    let selection = select_top(&report, dir.config.select.per_strategy)?;
    write_json(&dir.path("selection.json"), &selection)
}

fn pool(dir: &RunDir, sae: &SaeParams) -> Result<Vec<PoolEntry>> {
    let selection: Selection = read_json(&dir.path("selection.json"))?;
    selection
        .per_strategy
        .iter()
        .flatten()
        .map(|e| {
            Ok(PoolEntry {
                strategy: e.strategy_id,
                feature_id: e.feature_id,
                alpha: e.alpha,
                vector: sae.feature(e.feature_id)?,
            })
        })
        .collect()
}

fn train_routing(dir: &RunDir) -> Result<()> {
    dir.require(Stage::Select)?;
    let cfg = &dir.config;
    let lm = model(dir)?;
    let sae = load_sae(dir)?;
    let pool = pool(dir, &sae)?;
    if pool.is_empty() {
        return Err(Error::DegenerateInput("the selection is empty".into()));
    }
    let problems = cfg.correct.problem_config();
    let train = make_problem_set(&lm, cfg.router.train_problems, &problems, cfg.stream_seed(Stream::TrainProblems))?;
    let labels = label_pool(&lm, &train, &pool, cfg.correct.horizon, cfg.stream_seed(Stream::LabelNoise))?;
    let pairs = router_pairs(&train, &pool, &labels);
    if pairs.is_empty() {
        return Err(Error::DegenerateInput(
            "no training problem separates a fixing feature from a non-fixing one".into(),
        ));
    }
    let (router, log) = train_router(&pairs, &cfg.router_config())?;
    dump::dump_tensors(&dir.path("router.bin"), &dump::router_tensors(&router))?;
    let router = dump::router_from_tensors(&dump::load_tensors(&dir.path("router.bin"))?)?;
    let heldout = make_problem_set(&lm, cfg.router.heldout_contexts, &problems, cfg.stream_seed(Stream::Heldout))?;
    let accuracy = routing_accuracy(&router, &heldout, &pool)?;
    let cands = pool_candidates(&pool);
    let mut agree = 0;
    for p in &heldout {
        let routed = route(&router, &p.context, &cands)?.index;
        let scores = cands
            .iter()
            .map(|(_, f)| score(&router, &p.context, f))
            .collect::<Result<Vec<_>>>()?;
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });
        agree += usize::from(best == routed);
    }
    write_json(
        &dir.path("router.json"),
        &RoutingSummary {
            pool: pool
                .iter()
                .zip(fix_rates(&labels))
                .map(|(e, rate)| PoolSummary {
                    strategy_id: e.strategy,
                    feature_id: e.feature_id,
                    alpha: e.alpha,
                    train_fix_rate: rate,
                })
                .collect(),
            training_pairs: pairs.len(),
            initial_loss: log.initial_loss,
            final_loss: log.final_loss,
            heldout_contexts: heldout.len(),
            accuracy,
            argmax_agreement: agree as f64 / heldout.len() as f64,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemOutcome {
    pub target_strategy: usize,
    pub wrong_strategy: usize,
    pub arms: Vec<CorrectionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionFile {
    pub summary: CorrectionSummary,
    pub problems: Vec<ProblemOutcome>,
}

fn correct(dir: &RunDir) -> Result<()> {
    dir.require(Stage::TrainRouter)?;
    let cfg = &dir.config;
    let lm = model(dir)?;
    let sae = load_sae(dir)?;
    let pool = pool(dir, &sae)?;
    let router = dump::router_from_tensors(&dump::load_tensors(&dir.path("router.bin"))?)?;
    let routing: RoutingSummary = read_json(&dir.path("router.json"))?;
    let rates: Vec<f64> = routing.pool.iter().map(|e| e.train_fix_rate).collect();
    let top = oracle_choice(&pool, &rates, lm.n_strategies())?;
    let problems = make_problem_set(
        &lm,
        cfg.correct.problems,
        &cfg.correct.problem_config(),
        cfg.stream_seed(Stream::EvalProblems),
    )?;
    let (h, noise) = (cfg.correct.horizon, cfg.stream_seed(Stream::EvalNoise));
    let outcomes = problems
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(ProblemOutcome {
                target_strategy: p.target_strategy,
                wrong_strategy: p.wrong_strategy,
                arms: vec![
                    budget_force(&lm, p, h, noise, i)?,
                    steered_correct(&lm, p, &router, &pool, h, noise, i)?,
                    oracle_correct(&lm, p, &top, h, noise, i)?,
                ],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<CorrectionResult> = outcomes.iter().flat_map(|o| o.arms.iter().cloned()).collect();
    write_json(
        &dir.path("correction.json"),
        &CorrectionFile {
            summary: CorrectionSummary {
                problems: problems.len(),
                horizon: h,
                rates: correction_rate(&all)?,
            },
            problems: outcomes,
        },
    )
}

/// Assemble the run report from the stage outputs and write it.
pub fn report(dir: &RunDir) -> Result<RunReport> {
    for stage in &Stage::ALL[..Stage::ALL.len() - 1] {
        dir.require(*stage)?;
    }
    let model: ModelSummary = read_json(&dir.path("model.json"))?;
    let effectiveness: EffectivenessReport = read_json(&dir.path("effectiveness.json"))?;
    let selection: Selection = read_json(&dir.path("selection.json"))?;
    let candidates: CandidateSet = read_json(&dir.path("candidates.json"))?;
    let kw: KeywordFile = read_json(&dir.path("keywords.json"))?;
    let corr: CorrectionFile = read_json(&dir.path("correction.json"))?;
    let tables = effectiveness
        .per_strategy
        .iter()
        .enumerate()
        .map(|(s, list)| {
            let chosen: Vec<usize> = selection
                .per_strategy
                .get(s)
                .map(|l| l.iter().map(|e| e.feature_id).collect())
                .unwrap_or_default();
            StrategyTable {
                strategy_id: s,
                name: model.strategies.get(s).map(|i| i.name.clone()).unwrap_or_default(),
                rows: list
                    .iter()
                    .map(|e| EffectivenessRow {
                        feature_id: e.feature_id,
                        alpha: e.alpha,
                        success_rate: e.success_rate,
                        successes: e.successes(),
                        selected: chosen.contains(&e.feature_id),
                    })
                    .collect(),
            }
        })
        .collect();
    let per_strategy: Vec<Vec<usize>> = candidates
        .per_strategy
        .iter()
        .map(|l| l.iter().map(|c| c.feature_id).collect())
        .collect();
    let mut distinct: Vec<usize> = per_strategy.iter().flatten().copied().collect();
    distinct.sort_unstable();
    distinct.dedup();
    let report = RunReport {
        seed: dir.config.seed,
        config: dir.config.clone(),
        model,
        sae: read_json(&dir.path("sae.json"))?,
        keywords: kw.summary,
        recall: RecallSummary {
            total_features: candidates.total_features,
            recalled: distinct.len(),
            recall_fraction: candidates.recall_fraction,
            per_strategy,
        },
        effectiveness: tables,
        routing: read_json(&dir.path("router.json"))?,
        correction: corr.summary,
    };
    emit_report(&report, dir.root())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_excludes_a_second_owner() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let dir = RunDir::open(tmp.path(), Some(&cfg)).unwrap();
        assert!(tmp.path().join(LOCK_FILE).exists());
        assert!(RunDir::open(tmp.path(), None).is_err());
        drop(dir);
        assert!(!tmp.path().join(LOCK_FILE).exists());
        let again = RunDir::open(tmp.path(), None).unwrap();
        assert_eq!(again.config(), &cfg);
    }

    #[test]
    fn config_mismatch_and_missing_config() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(RunDir::open(tmp.path(), None).is_err());
        drop(RunDir::open(tmp.path(), Some(&RunConfig::default())).unwrap());
        let other = RunConfig {
            seed: 5,
            ..RunConfig::default()
        };
        assert!(RunDir::open(tmp.path(), Some(&other)).is_err());
    }

    #[test]
    fn stages_refuse_to_run_out_of_order() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::open(tmp.path(), Some(&RunConfig::default())).unwrap();
        for stage in [Stage::Sample, Stage::TrainSae, Stage::Rank, Stage::Report] {
            match run_stage(&dir, stage) {
                Err(Error::Stage { stage: s, .. }) => assert_eq!(s, stage.name()),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn output_root_precedence() {
        assert_eq!(output_root(Some(Path::new("/x"))), PathBuf::from("/x"));
    }
}
