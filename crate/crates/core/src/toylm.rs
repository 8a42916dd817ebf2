//! Constructed, steerable toy language model.
//!
//! The model is a linear recurrent generator with one residual site:
//!
//! ```text
//! x_t    = A · x_{t-1} + E[y_t] + noise           (carried residual)
//! hook_t = x_t + planted + α · v                  (steering site)
//! logits = Uᵀ · hook_t                            (predicts y_{t+1})
//! ```
//!
//! An orthonormal frame splits the residual space into strategy directions
//! `g_s`, problem-cue directions, one clock direction, a small "texture"
//! subspace and a background subspace. Strategy keyword columns of `U`
//! carry `c · g_s` (plus a small per-token gain jitter); the answer token
//! of strategy `s` is wired the same way. Ordinary token columns also carry
//! `-λ · E[w]`, which discourages re-emitting recent tokens.
//!
//! Token embeddings live in the background subspace plus a small drive on
//! the clock direction, which the answer marker reads out: control tokens
//! reset the clock, ordinary tokens wind it back up, so the model
//! periodically concludes with `ANSWER_MARKER` followed by one answer token.
//!
//! Planted components (corpus segments, problem prefixes) and steering
//! injections both act at the hook and are not fed back into the
//! recurrence.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{argmax, gram_schmidt, softmax, spectral_norm_estimate, Matrix, Rng, Vector};

pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const WAIT: TokenId = 1;
pub const ANSWER_MARKER: TokenId = 2;
pub const RESERVED_TOKENS: usize = 3;

const STRATEGY_NAMES: [&str; 5] = [
    "problem_understanding",
    "procedural_planning",
    "backtracking",
    "multi_perspective_verification",
    "hypothesis_reasoning",
];

/// Temperature used when sampling the activation corpus.
pub const CORPUS_TEMPERATURE: f64 = 1.0;

/// Planted strategy amplitude range for corpus segments.
pub const PLANTED_AMPLITUDE: (f64, f64) = (2.0, 6.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyLmConfig {
    pub n_dim: usize,
    pub vocab: usize,
    pub n_strategies: usize,
    pub keywords_per_strategy: usize,
    /// `c`: gain of the strategy direction inside keyword/answer columns.
    pub keyword_gain: f64,
    /// `ρ`: diagonal of the transition matrix.
    pub leak: f64,
    pub noise_sigma: f64,
    /// Spectral norm of the background perturbation added to `ρ·I`.
    pub perturbation_norm: f64,
    /// Per-direction scale of filler columns of `U`.
    pub filler_scale: f64,
    /// Per-direction scale of the texture part of keyword/answer columns.
    pub texture_scale: f64,
    /// Clock component of ordinary token embeddings.
    pub clock_drive: f64,
    /// Gain of the clock direction in the marker column.
    pub marker_gain: f64,
    /// Weight of `-E[w]` (background part) in the column of ordinary token `w`.
    pub self_inhibition: f64,
    /// Same, for keyword tokens.
    pub keyword_inhibition: f64,
    /// Scale of the Gaussian part along `g_s` in keyword columns.
    pub gain_jitter: f64,
    /// Set by the pipeline from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            n_dim: 64,
            vocab: 96,
            n_strategies: 5,
            keywords_per_strategy: 5,
            keyword_gain: 4.0,
            leak: 0.8,
            noise_sigma: 0.05,
            perturbation_norm: 0.05,
            filler_scale: 2.0,
            texture_scale: 0.3,
            clock_drive: 0.05,
            marker_gain: 3000.0,
            self_inhibition: 4.0,
            keyword_inhibition: 1.0,
            gain_jitter: 0.7,
            seed: 0,
        }
    }
}

/// Which residual site steering acts on. The toy model has exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HookPoint {
    PreUnembed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub id: usize,
    pub name: String,
    pub keywords: Vec<TokenId>,
    pub answer_token: TokenId,
}

impl StrategySpec {
    pub fn is_keyword(&self, token: TokenId) -> bool {
        self.keywords.contains(&token)
    }

    pub fn count_keywords(&self, tokens: &[TokenId]) -> usize {
        tokens.iter().filter(|t| self.is_keyword(**t)).count()
    }
}

/// A steering injection `α · v` applied at the hook point.
#[derive(Debug, Clone, Copy)]
pub struct Injection<'a> {
    pub vector: &'a Vector,
    pub alpha: f64,
}

impl<'a> Injection<'a> {
    pub fn new(vector: &'a Vector, alpha: f64) -> Self {
        Self { vector, alpha }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Carried residual `x_t` (pre-hook).
    pub state: Vector,
    /// Activation at the hook point, `x_t + α·v`.
    pub activation: Vector,
    pub logits: Vector,
}

/// Token sequence with the carried residual at its last position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    /// Number of leading tokens that belong to the prompt/prefix.
    pub prefix_len: usize,
    /// Hook activations, one per token, when captured.
    pub activations: Option<Vec<Vector>>,
    /// Raw residual at the last position; generation continues from here.
    pub state: Vector,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens generated after the prefix.
    pub fn suffix(&self) -> &[TokenId] {
        &self.tokens[self.prefix_len..]
    }

    /// Treat everything generated so far as prefix.
    pub fn into_prefix(mut self) -> Self {
        self.prefix_len = self.tokens.len();
        self
    }

    pub fn last_token(&self) -> TokenId {
        *self.tokens.last().expect("trajectories are never empty")
    }
}

/// Activation samples with the strategy that was active when they were
/// produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledActivationSet {
    pub samples: Vec<(Vector, Option<usize>)>,
    pub source_seed: u64,
}

impl LabeledActivationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One segment of a corpus schedule: a strategy (or none) and its length.
pub type Segment = (Option<usize>, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    pub config: ToyLmConfig,
    pub embed: Matrix,
    pub transition: Matrix,
    pub unembed: Matrix,
    pub strategy_dirs: Matrix,
    pub cue_dirs: Matrix,
    pub clock_dir: Vector,
    pub strategies: Vec<StrategySpec>,
    pub hook_point: HookPoint,
}

struct Frame {
    strategy: Matrix,
    cue: Matrix,
    clock: Vector,
    texture: Vec<Vector>,
    background: Vec<Vector>,
}

fn texture_dim(cfg: &ToyLmConfig) -> usize {
    (cfg.n_dim.saturating_sub(2 * cfg.n_strategies + 1) / 5).max(1)
}

fn combination(basis: &[Vector], scale: f64, n: usize, rng: &mut Rng) -> Vector {
    let mut out = Vector::zeros(n);
    for b in basis {
        out.axpy(scale * rng.normal(), b);
    }
    out
}

fn unit(v: Vector) -> Vector {
    let n = v.norm();
    v.scaled(1.0 / n)
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let (n, s, k) = (self.n_dim, self.n_strategies, self.keywords_per_strategy);
        if s == 0 || k == 0 {
            return Err(invalid("need at least one strategy and one keyword per strategy"));
        }
        if RESERVED_TOKENS + s + s * k >= self.vocab {
            return Err(invalid(format!(
                "vocab {} cannot hold {} reserved, {s} answer and {} keyword tokens plus fillers",
                self.vocab,
                RESERVED_TOKENS,
                s * k
            )));
        }
        if n < 2 * s + 3 {
            return Err(invalid(format!(
                "n_dim {n} too small for {s} strategy and cue directions plus clock, texture and background"
            )));
        }
        if !(0.0..1.0).contains(&self.leak) || self.leak + self.perturbation_norm >= 1.0 {
            return Err(invalid("leak + perturbation_norm must stay below 1"));
        }
        if self.noise_sigma < 0.0 || !(0.0..1.0).contains(&self.clock_drive) {
            return Err(invalid("noise_sigma must be >= 0 and clock_drive in [0, 1)"));
        }
        Ok(())
    }
}

impl ToyLm {
    pub fn build(cfg: &ToyLmConfig) -> Result<Self> {
        let n = cfg.n_dim;
        let s = cfg.n_strategies;
        let k = cfg.keywords_per_strategy;
        cfg.validate()?;

        let mut rng = Rng::seed(cfg.seed);
        let frame = {
            let q = gram_schmidt(&Matrix::gaussian(n, n, 1.0, &mut rng))?;
            let rows: Vec<Vector> = (0..n).map(|i| q.row_vector(i)).collect();
            let t = texture_dim(cfg);
            Frame {
                strategy: Matrix::from_rows(&rows[..s])?,
                cue: Matrix::from_rows(&rows[s..2 * s])?,
                clock: rows[2 * s].clone(),
                texture: rows[2 * s + 1..2 * s + 1 + t].to_vec(),
                background: rows[2 * s + 1 + t..].to_vec(),
            }
        };

        let strategies: Vec<StrategySpec> = (0..s)
            .map(|id| StrategySpec {
                id,
                name: STRATEGY_NAMES
                    .get(id)
                    .map_or_else(|| format!("strategy_{id}"), |n| n.to_string()),
                keywords: (0..k).map(|j| RESERVED_TOKENS + s + id * k + j).collect(),
                answer_token: RESERVED_TOKENS + id,
            })
            .collect();

        // embeddings
        let mut embed = Matrix::zeros(cfg.vocab, n);
        let mut embed_bg = vec![Vector::zeros(n); cfg.vocab];
        let drive = cfg.clock_drive;
        for w in 0..cfg.vocab {
            let row = match w {
                WAIT | ANSWER_MARKER => frame.clock.scaled(-1.0),
                _ if (RESERVED_TOKENS..RESERVED_TOKENS + s).contains(&w) => frame.clock.scaled(-1.0),
                _ => {
                    let bg = unit(combination(&frame.background, 1.0, n, &mut rng));
                    embed_bg[w] = bg.clone();
                    if w == BOS {
                        bg
                    } else {
                        let mut e = bg.scaled((1.0 - drive * drive).sqrt());
                        e.axpy(drive, &frame.clock);
                        e
                    }
                }
            };
            embed.row_mut(w).copy_from_slice(row.as_slice());
        }

        // transition: ρ·I plus a perturbation confined to the background
        let nb = frame.background.len();
        let mut transition = Matrix::identity(n);
        for x in transition.as_mut_slice() {
            *x *= cfg.leak;
        }
        if nb > 0 && cfg.perturbation_norm > 0.0 {
            let r = Matrix::gaussian(nb, nb, 1.0, &mut rng);
            let sigma = spectral_norm_estimate(&r, 100, &mut rng);
            let basis = Matrix::from_rows(&frame.background)?;
            // Bᵀ R B, scaled to the requested spectral norm
            let p = basis.transpose().matmul(&r)?.matmul(&basis)?;
            let scale = cfg.perturbation_norm / sigma;
            for (a, b) in transition.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *a += scale * b;
            }
        }

        // unembedding, one column per token
        let mut unembed = Matrix::zeros(n, cfg.vocab);
        let mut filler_basis = frame.background.clone();
        filler_basis.extend(frame.texture.iter().cloned());
        for w in 0..cfg.vocab {
            let col = if w == BOS || w == WAIT {
                Vector::zeros(n)
            } else if w == ANSWER_MARKER {
                frame.clock.scaled(cfg.marker_gain)
            } else if w < RESERVED_TOKENS + s {
                let sid = w - RESERVED_TOKENS;
                let mut c = combination(&frame.texture, cfg.texture_scale, n, &mut rng);
                c.axpy(cfg.keyword_gain, &frame.strategy.row_vector(sid));
                c
            } else if w < RESERVED_TOKENS + s + s * k {
                let sid = (w - RESERVED_TOKENS - s) / k;
                let mut c = combination(&frame.texture, cfg.texture_scale, n, &mut rng);
                let gain = cfg.keyword_gain + cfg.gain_jitter * rng.normal();
                c.axpy(gain, &frame.strategy.row_vector(sid));
                c.axpy(-cfg.keyword_inhibition, &embed_bg[w]);
                c
            } else {
                let mut c = combination(&filler_basis, cfg.filler_scale, n, &mut rng);
                c.axpy(-cfg.self_inhibition, &embed_bg[w]);
                c
            };
            unembed.set_col(w, &col);
        }

        Ok(Self {
            config: cfg.clone(),
            embed,
            transition,
            unembed,
            strategy_dirs: frame.strategy,
            cue_dirs: frame.cue,
            clock_dir: frame.clock,
            strategies,
            hook_point: HookPoint::PreUnembed,
        })
    }

    pub fn n_dim(&self) -> usize {
        self.config.n_dim
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn n_strategies(&self) -> usize {
        self.strategies.len()
    }

    /// The planted strategy directions `G` (rows orthonormal).
    pub fn planted_directions(&self) -> Matrix {
        self.strategy_dirs.clone()
    }

    pub fn strategy_dir(&self, s: usize) -> Vector {
        self.strategy_dirs.row_vector(s)
    }

    pub fn cue_dir(&self, s: usize) -> Vector {
        self.cue_dirs.row_vector(s)
    }

    pub fn is_answer(&self, token: TokenId) -> bool {
        (RESERVED_TOKENS..RESERVED_TOKENS + self.n_strategies()).contains(&token)
    }

    /// Strategy whose answer token this is.
    pub fn answer_strategy(&self, token: TokenId) -> Option<usize> {
        self.is_answer(token).then(|| token - RESERVED_TOKENS)
    }

    /// Tokens that are never counted as content: BOS, WAIT, the marker and
    /// the answer tokens.
    pub fn control_tokens(&self) -> Vec<TokenId> {
        (0..RESERVED_TOKENS + self.n_strategies()).collect()
    }

    pub fn token_label(&self, token: TokenId) -> String {
        match token {
            BOS => "<bos>".into(),
            WAIT => "<wait>".into(),
            ANSWER_MARKER => "<answer>".into(),
            t if self.is_answer(t) => format!("ans:{}", t - RESERVED_TOKENS),
            t => match self.strategies.iter().find(|s| s.is_keyword(t)) {
                Some(s) => format!("kw{}:{}", s.id, s.keywords.iter().position(|k| *k == t).unwrap()),
                None => format!("t{t}"),
            },
        }
    }

    /// Upper bound on the carried residual norm for noise of norm at most
    /// `noise` per step; hook activations add at most the planted and
    /// injected norms on top.
    pub fn state_norm_bound(&self, noise: f64) -> f64 {
        let a_norm = self.config.leak + self.config.perturbation_norm;
        let e_max = (0..self.vocab())
            .map(|w| crate::numerics::dot(self.embed.row(w), self.embed.row(w)).sqrt())
            .fold(0.0, f64::max);
        (e_max + noise) / (1.0 - a_norm)
    }

    /// One recurrence step.
    pub fn step(
        &self,
        prev_state: &Vector,
        token: TokenId,
        injection: Option<Injection<'_>>,
        planted: Option<&Vector>,
        rng: Option<&mut Rng>,
    ) -> Result<StepOutput> {
        let n = self.n_dim();
        if token >= self.vocab() {
            return Err(invalid(format!("token {token} outside vocab {}", self.vocab())));
        }
        if prev_state.dim() != n {
            return Err(invalid(format!("state dim {} != n_dim {n}", prev_state.dim())));
        }
        let mut state = self.transition.matvec(prev_state)?;
        for (x, e) in state.as_mut_slice().iter_mut().zip(self.embed.row(token)) {
            *x += e;
        }
        if let Some(rng) = rng {
            let sigma = self.config.noise_sigma;
            if sigma > 0.0 {
                for x in state.as_mut_slice() {
                    *x += sigma * rng.normal();
                }
            }
        }
        let activation = self.hook(&state, injection, planted)?;
        let logits = self.unembed.matvec_t(&activation)?;
        Ok(StepOutput {
            state,
            activation,
            logits,
        })
    }

    /// Hook-point activation for a carried residual.
    pub fn hook(&self, state: &Vector, injection: Option<Injection<'_>>, planted: Option<&Vector>) -> Result<Vector> {
        let mut activation = state.clone();
        if let Some(p) = planted {
            if p.dim() != self.n_dim() {
                return Err(invalid("planted component has wrong dimension"));
            }
            activation.axpy(1.0, p);
        }
        if let Some(inj) = injection {
            if inj.vector.dim() != self.n_dim() {
                return Err(invalid(format!(
                    "injection dim {} != n_dim {}",
                    inj.vector.dim(),
                    self.n_dim()
                )));
            }
            activation.axpy(inj.alpha, inj.vector);
        }
        Ok(activation)
    }

    pub fn logits(&self, activation: &Vector) -> Result<Vector> {
        self.unembed.matvec_t(activation)
    }

    /// Pick the next token under the decoding grammar: BOS and WAIT are
    /// never produced, answer tokens only directly after the marker, and
    /// the marker is always followed by an answer.
    pub fn decode(
        &self,
        logits: &Vector,
        prev_token: TokenId,
        temperature: f64,
        rng: Option<&mut Rng>,
    ) -> Result<TokenId> {
        let after_marker = prev_token == ANSWER_MARKER;
        let mut masked = logits.clone();
        for w in 0..self.vocab() {
            let allowed = w != BOS && w != WAIT && (self.is_answer(w) == after_marker);
            if !allowed {
                masked[w] = f64::NEG_INFINITY;
            }
        }
        if temperature <= 0.0 {
            return Ok(argmax(masked.as_slice()));
        }
        let rng = rng.ok_or_else(|| invalid("sampling at temperature > 0 needs an rng"))?;
        let probs = softmax_masked(&masked, temperature);
        let u = rng.uniform(0.0, 1.0);
        let mut acc = 0.0;
        let mut last_allowed = 0;
        for (w, p) in probs.iter().enumerate() {
            if *p > 0.0 {
                last_allowed = w;
                acc += p;
                if u < acc {
                    return Ok(w);
                }
            }
        }
        Ok(last_allowed)
    }

    /// Start a trajectory at BOS.
    pub fn start(&self, rng: Option<&mut Rng>, capture: bool) -> Result<Trajectory> {
        let out = self.step(&Vector::zeros(self.n_dim()), BOS, None, None, rng)?;
        Ok(Trajectory {
            tokens: vec![BOS],
            prefix_len: 1,
            activations: capture.then(|| vec![out.activation]),
            state: out.state,
        })
    }

    /// Append a forced token (WAIT, marker, answer) without sampling.
    pub fn feed(
        &self,
        traj: &mut Trajectory,
        token: TokenId,
        planted: Option<&Vector>,
        rng: Option<&mut Rng>,
    ) -> Result<()> {
        let out = self.step(&traj.state, token, None, planted, rng)?;
        traj.tokens.push(token);
        traj.state = out.state;
        if let Some(acts) = traj.activations.as_mut() {
            acts.push(out.activation);
        }
        Ok(())
    }

    /// Generate exactly `horizon` tokens after `prefix`.
    ///
    /// The injection, when present, is applied at every position whose
    /// logits produce one of the new tokens.
    pub fn generate(
        &self,
        prefix: &Trajectory,
        horizon: usize,
        temperature: f64,
        injection: Option<Injection<'_>>,
        rng: Option<&mut Rng>,
        capture: bool,
    ) -> Result<Trajectory> {
        self.generate_planted(prefix, horizon, temperature, injection, None, rng, capture)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn generate_planted(
        &self,
        prefix: &Trajectory,
        horizon: usize,
        temperature: f64,
        injection: Option<Injection<'_>>,
        planted: Option<&Vector>,
        mut rng: Option<&mut Rng>,
        capture: bool,
    ) -> Result<Trajectory> {
        if horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if prefix.is_empty() {
            return Err(invalid("prefix must contain at least BOS"));
        }
        if capture && prefix.activations.is_none() {
            return Err(invalid("capture requested but the prefix has no activations"));
        }
        let mut traj = prefix.clone();
        if !capture {
            traj.activations = None;
        }
        let mut prev_token = traj.last_token();
        let mut activation = self.hook(&traj.state, injection, planted)?;
        for _ in 0..horizon {
            let logits = self.logits(&activation)?;
            let token = self.decode(&logits, prev_token, temperature, rng.as_deref_mut())?;
            let out = self.step(&traj.state, token, injection, planted, rng.as_deref_mut())?;
            traj.tokens.push(token);
            traj.state = out.state;
            if let Some(acts) = traj.activations.as_mut() {
                acts.push(out.activation.clone());
            }
            activation = out.activation;
            prev_token = token;
        }
        Ok(traj)
    }

    /// Sample a labelled activation corpus following `schedule`.
    ///
    /// During a segment labelled `s` the hook activation receives
    /// `a · g_s` at every step with `a ~ U[2, 6]` drawn per segment.
    pub fn sample_strategy_corpus(
        &self,
        schedule: &[Segment],
        seed: u64,
    ) -> Result<(LabeledActivationSet, Vec<(Option<usize>, Vec<TokenId>)>)> {
        for (label, len) in schedule {
            if *len == 0 {
                return Err(invalid("schedule segments need length >= 1"));
            }
            if let Some(s) = label {
                if *s >= self.n_strategies() {
                    return Err(invalid(format!("unknown strategy id {s}")));
                }
            }
        }
        let mut rng = Rng::seed(seed);
        let start = self.step(&Vector::zeros(self.n_dim()), BOS, None, None, Some(&mut rng))?;
        let mut state = start.state;
        let mut activation = start.activation;
        let mut prev = BOS;
        let mut samples = Vec::new();
        let mut segments = Vec::with_capacity(schedule.len());
        for (label, len) in schedule {
            let planted = label.map(|s| {
                let a = rng.uniform(PLANTED_AMPLITUDE.0, PLANTED_AMPLITUDE.1);
                self.strategy_dir(s).scaled(a)
            });
            let mut tokens = Vec::with_capacity(*len);
            for _ in 0..*len {
                let logits = self.logits(&activation)?;
                let token = self.decode(&logits, prev, CORPUS_TEMPERATURE, Some(&mut rng))?;
                let out = self.step(&state, token, None, planted.as_ref(), Some(&mut rng))?;
                state = out.state;
                activation = out.activation;
                prev = token;
                samples.push((activation.clone(), *label));
                tokens.push(token);
            }
            segments.push((*label, tokens));
        }
        Ok((
            LabeledActivationSet {
                samples,
                source_seed: seed,
            },
            segments,
        ))
    }
}

fn softmax_masked(masked: &Vector, temperature: f64) -> Vec<f64> {
    // exp(-inf) = 0, so masked entries get zero mass
    softmax(masked, temperature).into_vec()
}

/// Alternating schedule used for the default corpus: each strategy segment
/// is followed by an unlabelled segment.
pub fn alternating_schedule(n_strategies: usize, rounds: usize, segment_len: usize) -> Vec<Segment> {
    let mut out = Vec::with_capacity(2 * n_strategies * rounds);
    for r in 0..rounds {
        for s in 0..n_strategies {
            out.push((Some((s + r) % n_strategies), segment_len));
            out.push((None, segment_len));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyLm {
        ToyLm::build(&ToyLmConfig::default()).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(model(), model());
        let other = ToyLm::build(&ToyLmConfig {
            seed: 1,
            ..ToyLmConfig::default()
        })
        .unwrap();
        assert_ne!(model().unembed, other.unembed);
    }

    #[test]
    fn planted_directions_are_orthonormal() {
        let g = model().planted_directions();
        assert_eq!(g.rows(), 5);
        assert!(g.gram().max_abs_diff(&Matrix::identity(5)) < 1e-9);
    }

    #[test]
    fn keyword_columns_carry_strategy_direction() {
        let lm = model();
        let c = lm.config.keyword_gain;
        for spec in &lm.strategies {
            let g = lm.strategy_dir(spec.id);
            for &w in spec.keywords.iter().chain(std::iter::once(&spec.answer_token)) {
                let proj = lm.unembed.col_vector(w).dot(&g);
                assert!(proj >= c - 3.0 * lm.config.gain_jitter, "{proj}");
            }
        }
    }

    #[test]
    fn own_direction_maximises_keyword_logits() {
        let lm = model();
        let g = lm.planted_directions();
        let l = g.matmul(&lm.unembed).unwrap();
        for spec in &lm.strategies {
            for &w in &spec.keywords {
                let best = argmax(&(0..g.rows()).map(|t| l.get(t, w)).collect::<Vec<_>>());
                assert_eq!(best, spec.id);
            }
        }
    }

    #[test]
    fn transition_is_contractive() {
        let lm = model();
        let mut rng = Rng::seed(3);
        let norm = spectral_norm_estimate(&lm.transition, 200, &mut rng);
        assert!(norm < 1.0, "{norm}");
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let lm = model();
        for w in 0..lm.vocab() {
            let n = crate::numerics::dot(lm.embed.row(w), lm.embed.row(w)).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_violation_rejected() {
        let cfg = ToyLmConfig {
            vocab: 20,
            ..ToyLmConfig::default()
        };
        assert!(ToyLm::build(&cfg).is_err());
        let cfg = ToyLmConfig {
            n_dim: 8,
            ..ToyLmConfig::default()
        };
        assert!(ToyLm::build(&cfg).is_err());
    }

    #[test]
    fn zero_alpha_injection_is_identity() {
        let lm = model();
        let v = lm.strategy_dir(0);
        let x = Rng::seed(5).gaussian_vector(64, 1.0);
        let a = lm.step(&x, 40, Some(Injection::new(&v, 0.0)), None, Some(&mut Rng::seed(9))).unwrap();
        let b = lm.step(&x, 40, None, None, Some(&mut Rng::seed(9))).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn step_logit_shift_is_linear() {
        let lm = model();
        let x = Rng::seed(5).gaussian_vector(64, 1.0);
        let g = lm.strategy_dir(2);
        let a = lm.step(&x, 40, Some(Injection::new(&g, 2.5)), None, None).unwrap();
        let b = lm.step(&x, 40, None, None, None).unwrap();
        let expected = lm.unembed.matvec_t(&g).unwrap().scaled(2.5);
        for w in 0..lm.vocab() {
            assert!((a.logits[w] - b.logits[w] - expected[w]).abs() < 1e-12);
        }
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let lm = model();
        assert!(lm.step(&Vector::zeros(3), 4, None, None, None).is_err());
        assert!(lm.step(&Vector::zeros(64), 500, None, None, None).is_err());
    }

    #[test]
    fn decoding_grammar() {
        let lm = model();
        let mut logits = Vector::zeros(lm.vocab());
        logits[WAIT] = 100.0;
        logits[lm.strategies[1].answer_token] = 50.0;
        logits[60] = 1.0;
        assert_eq!(lm.decode(&logits, 60, 0.0, None).unwrap(), 60);
        assert_eq!(
            lm.decode(&logits, ANSWER_MARKER, 0.0, None).unwrap(),
            lm.strategies[1].answer_token
        );
    }

    #[test]
    fn generate_rejects_zero_horizon() {
        let lm = model();
        let start = lm.start(None, false).unwrap();
        assert!(lm.generate(&start, 0, 0.0, None, None, false).is_err());
    }

    #[test]
    fn corpus_rejects_unknown_strategy() {
        let lm = model();
        assert!(lm.sample_strategy_corpus(&[(Some(9), 4)], 1).is_err());
        assert!(lm.sample_strategy_corpus(&[(None, 0)], 1).is_err());
    }

    #[test]
    fn corpus_labels_follow_schedule() {
        let lm = model();
        let (set, segs) = lm.sample_strategy_corpus(&[(None, 30)], 1).unwrap();
        assert!(set.samples.iter().all(|(_, l)| l.is_none()));
        assert_eq!(segs.len(), 1);
        let sched: Vec<Segment> = (0..4).flat_map(|_| [(Some(0), 50), (None, 50)]).collect();
        let (set, _) = lm.sample_strategy_corpus(&sched, 2).unwrap();
        let labelled = set.samples.iter().filter(|(_, l)| *l == Some(0)).count();
        assert_eq!(labelled * 2, set.len());
    }
}
