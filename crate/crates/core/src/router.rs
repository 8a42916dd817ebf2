//! Bi-encoder router: two tanh MLPs embed a reasoning context and a
//! candidate feature; their dot product scores the pair.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{adam_step, dot, AdamConfig, AdamState, Matrix, Rng, Vector};

/// `x ↦ W2 · tanh(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

struct MlpTrace {
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl Mlp {
    pub fn new(n_in: usize, hidden: usize, n_out: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Matrix::gaussian(hidden, n_in, 1.0 / (n_in as f64).sqrt(), rng),
            b1: Vector::zeros(hidden),
            w2: Matrix::gaussian(n_out, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Vector::zeros(n_out),
        }
    }

    pub fn zeros(n_in: usize, hidden: usize, n_out: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, n_in),
            b1: Vector::zeros(hidden),
            w2: Matrix::zeros(n_out, hidden),
            b2: Vector::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn n_out(&self) -> usize {
        self.w2.rows()
    }

    fn trace(&self, x: &[f64]) -> MlpTrace {
        let hidden: Vec<f64> = (0..self.w1.rows())
            .map(|i| (dot(self.w1.row(i), x) + self.b1[i]).tanh())
            .collect();
        let out = (0..self.w2.rows()).map(|i| dot(self.w2.row(i), &hidden) + self.b2[i]).collect();
        MlpTrace { hidden, out }
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.n_in() {
            return Err(invalid(format!("encoder input dim {} != {}", x.dim(), self.n_in())));
        }
        Vector::new(self.trace(x.as_slice()).out)
    }

    /// Accumulate `∂/∂θ` given `∂L/∂out` into `g`.
    fn backward(&self, x: &[f64], t: &MlpTrace, d_out: &[f64], g: &mut Mlp) {
        let h = t.hidden.len();
        let mut d_hidden = vec![0.0; h];
        for (o, d) in d_out.iter().enumerate() {
            g.b2[o] += d;
            let row = g.w2.row_mut(o);
            for j in 0..h {
                row[j] += d * t.hidden[j];
            }
            for (j, w) in self.w2.row(o).iter().enumerate() {
                d_hidden[j] += d * w;
            }
        }
        for j in 0..h {
            let da = d_hidden[j] * (1.0 - t.hidden[j] * t.hidden[j]);
            g.b1[j] += da;
            for (w, xi) in g.w1.row_mut(j).iter_mut().zip(x) {
                *w += da * xi;
            }
        }
    }

    fn buffers(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), self.b1.as_slice(), self.w2.as_slice(), self.b2.as_slice()]
    }

    fn buffers_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub context_encoder: Mlp,
    pub feature_encoder: Mlp,
}

impl RouterParams {
    pub fn new(n_dim: usize, hidden: usize, embed: usize, rng: &mut Rng) -> Self {
        Self {
            context_encoder: Mlp::new(n_dim, hidden, embed, rng),
            feature_encoder: Mlp::new(n_dim, hidden, embed, rng),
        }
    }

    pub fn zeros(n_dim: usize, hidden: usize, embed: usize) -> Self {
        Self {
            context_encoder: Mlp::zeros(n_dim, hidden, embed),
            feature_encoder: Mlp::zeros(n_dim, hidden, embed),
        }
    }

    pub fn n_dim(&self) -> usize {
        self.context_encoder.n_in()
    }

    /// Parameter buffers in a fixed order: context w1, b1, w2, b2, then the
    /// same for the feature encoder.
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = self.context_encoder.buffers().to_vec();
        out.extend(self.feature_encoder.buffers());
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.context_encoder.buffers_mut().into_iter().collect();
        out.extend(self.feature_encoder.buffers_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    fn check_inputs(&self, context: &Vector, feature: &Vector) -> Result<()> {
        let n = self.n_dim();
        if context.dim() != n || feature.dim() != self.feature_encoder.n_in() {
            return Err(invalid(format!(
                "router expects dim {n}, got context {} and feature {}",
                context.dim(),
                feature.dim()
            )));
        }
        Ok(())
    }
}

/// `⟨E_c(context), E_f(feature)⟩`.
pub fn score(router: &RouterParams, context: &Vector, feature: &Vector) -> Result<f64> {
    router.check_inputs(context, feature)?;
    let c = router.context_encoder.forward(context)?;
    let f = router.feature_encoder.forward(feature)?;
    Ok(c.dot(&f))
}

/// One context with a positive feature and at least one negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainingPair {
    pub context_activation: Vector,
    pub positive_feature: Vector,
    pub negative_features: Vec<Vector>,
}

impl RouterTrainingPair {
    pub fn validate(&self, n_dim: usize) -> Result<()> {
        if self.negative_features.is_empty() {
            return Err(invalid("a training pair needs at least one negative"));
        }
        let ok = self.context_activation.dim() == n_dim
            && self.positive_feature.dim() == n_dim
            && self.negative_features.iter().all(|v| v.dim() == n_dim);
        if !ok {
            return Err(invalid(format!("training pair vectors must have dim {n_dim}")));
        }
        Ok(())
    }
}

/// `-log softmax(scores)[0]` with max subtraction.
pub fn infonce_from_scores(scores: &[f64]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    lse - scores[0]
}

/// InfoNCE loss of one pair and its gradient with respect to every router
/// parameter.
pub fn infonce_loss(router: &RouterParams, pair: &RouterTrainingPair) -> Result<(f64, RouterParams)> {
    pair.validate(router.n_dim())?;
    let mut grads = zero_like(router);
    let loss = accumulate(router, pair, 1.0, &mut grads);
    Ok((loss, grads))
}

fn zero_like(r: &RouterParams) -> RouterParams {
    let c = &r.context_encoder;
    RouterParams::zeros(c.n_in(), c.w1.rows(), c.n_out())
}

/// Adds `weight · ∂loss/∂θ` into `grads` and returns the loss.
fn accumulate(router: &RouterParams, pair: &RouterTrainingPair, weight: f64, grads: &mut RouterParams) -> f64 {
    let cx = pair.context_activation.as_slice();
    let ct = router.context_encoder.trace(cx);
    let feats: Vec<&Vector> = std::iter::once(&pair.positive_feature).chain(&pair.negative_features).collect();
    let fts: Vec<MlpTrace> = feats.iter().map(|f| router.feature_encoder.trace(f.as_slice())).collect();
    let scores: Vec<f64> = fts.iter().map(|t| dot(&ct.out, &t.out)).collect();
    let loss = infonce_from_scores(&scores);
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    let d = ct.out.len();
    let mut d_ctx = vec![0.0; d];
    for (j, (f, t)) in feats.iter().zip(&fts).enumerate() {
        let g = weight * ((scores[j] - m).exp() / z - if j == 0 { 1.0 } else { 0.0 });
        for i in 0..d {
            d_ctx[i] += g * t.out[i];
        }
        let d_f: Vec<f64> = ct.out.iter().map(|c| g * c).collect();
        router.feature_encoder.backward(f.as_slice(), t, &d_f, &mut grads.feature_encoder);
    }
    router.context_encoder.backward(cx, &ct, &d_ctx, &mut grads.context_encoder);
    loss
}

/// Mean loss and gradient over a set of pairs, reduced in input order.
pub fn batch_loss_and_grads(router: &RouterParams, pairs: &[&RouterTrainingPair]) -> Result<(f64, RouterParams)> {
    if pairs.is_empty() {
        return Err(invalid("empty router batch"));
    }
    for p in pairs {
        p.validate(router.n_dim())?;
    }
    let w = 1.0 / pairs.len() as f64;
    let parts: Vec<(f64, RouterParams)> = pairs
        .par_iter()
        .map(|p| {
            let mut g = zero_like(router);
            let l = accumulate(router, p, w, &mut g);
            (l, g)
        })
        .collect();
    let mut total = zero_like(router);
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += w * l;
        for (t, s) in total.buffers_mut().into_iter().zip(g.buffers()) {
            for (a, b) in t.iter_mut().zip(s) {
                *a += b;
            }
        }
    }
    Ok((loss, total))
}

pub fn mean_loss(router: &RouterParams, pairs: &[RouterTrainingPair]) -> Result<f64> {
    let refs: Vec<&RouterTrainingPair> = pairs.iter().collect();
    Ok(batch_loss_and_grads(router, &refs)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub hidden: usize,
    pub embed: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Set by the pipeline from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 32,
            steps: 1_500,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 || self.batch_size == 0 {
            return Err(invalid("router hidden, embed and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("router learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainLog {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn init_router(n_dim: usize, config: &RouterConfig) -> RouterParams {
    RouterParams::new(n_dim, config.hidden, config.embed, &mut Rng::derive(config.seed, 0))
}

pub fn train_router(pairs: &[RouterTrainingPair], config: &RouterConfig) -> Result<(RouterParams, RouterTrainLog)> {
    config.validate()?;
    let first = pairs.first().ok_or_else(|| invalid("router training needs at least one pair"))?;
    let n = first.context_activation.dim();
    for p in pairs {
        p.validate(n)?;
    }
    let mut router = init_router(n, config);
    let initial_loss = mean_loss(&router, pairs)?;
    let sizes: Vec<usize> = router.buffers().iter().map(|b| b.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let adam_cfg = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut rng = Rng::derive(config.seed, 1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(pairs.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&pairs[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_loss_and_grads(&router, &batch)?;
        losses.push(loss);
        let g = grads.buffers();
        adam_step(&mut router.buffers_mut(), &g, &mut adam, &adam_cfg)?;
    }
    let final_loss = mean_loss(&router, pairs)?;
    Ok((
        router,
        RouterTrainLog {
            losses,
            initial_loss,
            final_loss,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Routed {
    pub index: usize,
    pub strategy: usize,
    pub score: f64,
}

/// Highest-scoring candidate; ties go to the lowest index.
pub fn route(router: &RouterParams, context: &Vector, candidates: &[(usize, Vector)]) -> Result<Routed> {
    if candidates.is_empty() {
        return Err(invalid("routing needs at least one candidate"));
    }
    let c = router.context_encoder.forward(context)?;
    let mut best: Option<Routed> = None;
    for (index, (strategy, f)) in candidates.iter().enumerate() {
        router.check_inputs(context, f)?;
        let s = c.dot(&router.feature_encoder.forward(f)?);
        if best.map_or(true, |b| s > b.score) {
            best = Some(Routed {
                index,
                strategy: *strategy,
                score: s,
            });
        }
    }
    Ok(best.expect("candidates are non-empty"))
}

/// Central-difference check of `batch_loss_and_grads` at the given flat
/// coordinates (indices into the concatenated buffers). Returns the largest
/// `|a - f| / max(|a|, |f|, floor)`.
pub fn grad_check(router: &RouterParams, pairs: &[RouterTrainingPair], eps: f64, coords: &[usize]) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(invalid("eps must be positive"));
    }
    let refs: Vec<&RouterTrainingPair> = pairs.iter().collect();
    let (_, grads) = batch_loss_and_grads(router, &refs)?;
    let flat_g: Vec<f64> = grads.buffers().concat();
    let mut worst: f64 = 0.0;
    for &c in coords {
        if c >= flat_g.len() {
            return Err(invalid(format!("coordinate {c} out of range")));
        }
        let eval = |delta: f64| -> Result<f64> {
            let mut r = router.clone();
            let mut off = c;
            for b in r.buffers_mut() {
                if off < b.len() {
                    b[off] += delta;
                    break;
                }
                off -= b.len();
            }
            Ok(batch_loss_and_grads(&r, &refs)?.0)
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let a = flat_g[c];
        let denom = a.abs().max(numeric.abs()).max(crate::sae::GRAD_CHECK_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
