//! TopK sparse autoencoder with hand-derived gradients.
//!
//! ```text
//! z  = topk(relu(W_enc (x - b_dec) + b_enc))
//! x̂  = W_dec z + b_dec
//! ```
//!
//! Decoder columns are kept at unit norm. Gradients treat the TopK/ReLU
//! selection as a fixed mask at the current point.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{adam_step, dot, topk_indices, AdamConfig, AdamState, Matrix, Rng, Vector};
use crate::toylm::LabeledActivationSet;

pub type FeatureId = usize;

/// Denominator floor for relative gradient errors.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// M×N, row j is the encoder vector of feature j.
    pub w_enc: Matrix,
    pub b_enc: Vector,
    /// N×M, column j is feature j.
    pub w_dec: Matrix,
    pub b_dec: Vector,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Matrix,
    pub b_enc: Vector,
    pub w_dec: Matrix,
    pub b_dec: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeTrainConfig {
    pub m_dim: usize,
    pub k: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Set by the pipeline from the run seed.
    #[serde(skip)]
    pub seed: u64,
    pub dead_feature_window: usize,
    /// Samples used for the decoder-bias initialisation.
    pub init_samples: usize,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            m_dim: 512,
            k: 8,
            steps: 20_000,
            batch_size: 256,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            dead_feature_window: 1_000,
            init_samples: 1_000,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_dim == 0 || self.k == 0 || self.batch_size == 0 || self.dead_feature_window == 0 {
            return Err(invalid("m_dim, k, batch_size and dead_feature_window must be positive"));
        }
        if self.k > self.m_dim {
            return Err(invalid(format!("k={} exceeds m_dim={}", self.k, self.m_dim)));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("learning_rate must be > 0 and betas in [0, 1)"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainLog {
    pub losses: Vec<f64>,
    /// (window end step, features with no activation during the window)
    pub dead_features: Vec<(usize, usize)>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl SaeParams {
    pub fn n_dim(&self) -> usize {
        self.b_dec.dim()
    }

    pub fn m_dim(&self) -> usize {
        self.b_enc.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_dim(), self.m_dim());
        if self.w_enc.shape() != (m, n) || self.w_dec.shape() != (n, m) {
            return Err(invalid("sae parameter shapes disagree"));
        }
        if self.k == 0 || self.k > m {
            return Err(invalid(format!("k={} outside 1..={m}", self.k)));
        }
        Ok(())
    }

    fn check_x(&self, x: &Vector) -> Result<()> {
        if x.dim() != self.n_dim() {
            return Err(invalid(format!("input dim {} != {}", x.dim(), self.n_dim())));
        }
        Ok(())
    }

    /// Pre-activations `W_enc (x - b_dec) + b_enc`.
    pub fn pre_activations(&self, x: &Vector) -> Result<Vector> {
        self.check_x(x)?;
        let centered = x.sub(&self.b_dec);
        let mut pre = self.w_enc.matvec(&centered)?;
        pre.axpy(1.0, &self.b_enc);
        Ok(pre)
    }

    pub fn encode(&self, x: &Vector) -> Result<Vector> {
        let pre = self.pre_activations(x)?;
        let mut z = Vector::zeros(self.m_dim());
        for j in support(pre.as_slice(), self.k) {
            z[j] = pre[j];
        }
        Ok(z)
    }

    pub fn decode(&self, z: &Vector) -> Result<Vector> {
        if z.dim() != self.m_dim() {
            return Err(invalid(format!("code dim {} != {}", z.dim(), self.m_dim())));
        }
        let mut x = self.w_dec.matvec(z)?;
        x.axpy(1.0, &self.b_dec);
        Ok(x)
    }

    pub fn feature(&self, i: FeatureId) -> Result<Vector> {
        if i >= self.m_dim() {
            return Err(invalid(format!("feature {i} out of range {}", self.m_dim())));
        }
        Ok(self.w_dec.col_vector(i))
    }

    /// Reconstruction loss `mean ‖x - x̂‖²` and its gradients.
    pub fn loss_and_grads(&self, batch: &[Vector]) -> Result<(f64, SaeGrads)> {
        self.validate()?;
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        for x in batch {
            self.check_x(x)?;
        }
        let fm = FeatureMajor::from_params(self);
        let mut acc = Accum::new(self.m_dim(), self.n_dim());
        let scale = 1.0 / batch.len() as f64;
        for x in batch {
            fm.apply(&fm.trace(x.as_slice(), scale), &mut acc);
        }
        Ok((acc.loss, acc.into_grads(self.n_dim(), self.m_dim())))
    }

    pub fn loss(&self, batch: &[Vector]) -> Result<f64> {
        self.validate()?;
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let mut total = 0.0;
        for x in batch {
            let r = self.decode(&self.encode(x)?)?.sub(x);
            total += r.dot(&r);
        }
        Ok(total / batch.len() as f64)
    }

    /// Active coordinates of the code for each sample.
    fn supports(&self, batch: &[Vector]) -> Result<Vec<Vec<usize>>> {
        batch
            .iter()
            .map(|x| Ok(support(self.pre_activations(x)?.as_slice(), self.k)))
            .collect()
    }

    fn buffers_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_enc.as_mut_slice(),
            self.b_enc.as_mut_slice(),
            self.w_dec.as_mut_slice(),
            self.b_dec.as_mut_slice(),
        ]
    }

    pub fn max_decoder_norm_error(&self) -> f64 {
        (0..self.m_dim())
            .map(|j| (self.w_dec.col_vector(j).norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `cos(f_i, target)` over features, with the feature id.
    pub fn best_cosine(&self, target: &Vector) -> (FeatureId, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for j in 0..self.m_dim() {
            let c = self.w_dec.col_vector(j).cosine(target);
            if c > best.1 {
                best = (j, c);
            }
        }
        best
    }
}

impl SaeGrads {
    fn buffers(&self) -> [&[f64]; 4] {
        [
            self.w_enc.as_slice(),
            self.b_enc.as_slice(),
            self.w_dec.as_slice(),
            self.b_dec.as_slice(),
        ]
    }
}

/// Indices kept by ReLU followed by TopK: the `k` largest positive entries.
fn support(pre: &[f64], k: usize) -> Vec<usize> {
    let mut idx = topk_indices(pre, k);
    idx.retain(|&j| pre[j] > 0.0);
    idx
}

/// Parameters with the decoder stored feature-major for contiguous access.
struct FeatureMajor {
    n: usize,
    k: usize,
    w_enc: Vec<f64>,
    b_enc: Vec<f64>,
    dec: Vec<f64>,
    b_dec: Vec<f64>,
}

struct SampleTrace {
    loss: f64,
    centered: Vec<f64>,
    /// dL/dx̂
    g: Vec<f64>,
    /// (feature, code value, dL/dz)
    active: Vec<(usize, f64, f64)>,
}

struct Accum {
    loss: f64,
    w_enc: Vec<f64>,
    b_enc: Vec<f64>,
    dec: Vec<f64>,
    b_dec: Vec<f64>,
}

impl Accum {
    fn new(m: usize, n: usize) -> Self {
        Self {
            loss: 0.0,
            w_enc: vec![0.0; m * n],
            b_enc: vec![0.0; m],
            dec: vec![0.0; m * n],
            b_dec: vec![0.0; n],
        }
    }

    fn clear(&mut self) {
        self.loss = 0.0;
        for buf in [&mut self.w_enc, &mut self.b_enc, &mut self.dec, &mut self.b_dec] {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn into_grads(self, n: usize, m: usize) -> SaeGrads {
        let dec_fm = Matrix::new(m, n, self.dec).expect("accumulator shape");
        SaeGrads {
            w_enc: Matrix::new(m, n, self.w_enc).expect("accumulator shape"),
            b_enc: Vector::new(self.b_enc).expect("finite gradient"),
            w_dec: dec_fm.transpose(),
            b_dec: Vector::new(self.b_dec).expect("finite gradient"),
        }
    }
}

impl FeatureMajor {
    fn from_params(p: &SaeParams) -> Self {
        Self {
            n: p.n_dim(),
            k: p.k,
            w_enc: p.w_enc.as_slice().to_vec(),
            b_enc: p.b_enc.as_slice().to_vec(),
            dec: p.w_dec.transpose().as_slice().to_vec(),
            b_dec: p.b_dec.as_slice().to_vec(),
        }
    }

    fn m(&self) -> usize {
        self.b_enc.len()
    }

    /// Forward pass and the sparse part of the backward pass for one
    /// sample; gradients are scaled by `scale`.
    fn trace(&self, x: &[f64], scale: f64) -> SampleTrace {
        let n = self.n;
        let centered: Vec<f64> = x.iter().zip(&self.b_dec).map(|(a, b)| a - b).collect();
        let pre: Vec<f64> = (0..self.m())
            .map(|j| dot(&self.w_enc[j * n..(j + 1) * n], &centered) + self.b_enc[j])
            .collect();
        let active = support(&pre, self.k);
        // residual r = x̂ - x
        let mut r: Vec<f64> = self.b_dec.iter().zip(x).map(|(b, a)| b - a).collect();
        for &j in &active {
            for (ri, di) in r.iter_mut().zip(&self.dec[j * n..(j + 1) * n]) {
                *ri += pre[j] * di;
            }
        }
        let loss = scale * dot(&r, &r);
        let g: Vec<f64> = r.iter().map(|v| 2.0 * scale * v).collect();
        let active = active
            .into_iter()
            .map(|j| (j, pre[j], dot(&self.dec[j * n..(j + 1) * n], &g)))
            .collect();
        SampleTrace {
            loss,
            centered,
            g,
            active,
        }
    }

    fn apply(&self, t: &SampleTrace, acc: &mut Accum) {
        let n = self.n;
        acc.loss += t.loss;
        for (a, gi) in acc.b_dec.iter_mut().zip(&t.g) {
            *a += gi;
        }
        for &(j, z, dz) in &t.active {
            let row = j * n..(j + 1) * n;
            for (a, gi) in acc.dec[row.clone()].iter_mut().zip(&t.g) {
                *a += z * gi;
            }
            acc.b_enc[j] += dz;
            for (a, c) in acc.w_enc[row.clone()].iter_mut().zip(&t.centered) {
                *a += dz * c;
            }
            for (a, w) in acc.b_dec.iter_mut().zip(&self.w_enc[row]) {
                *a -= dz * w;
            }
        }
    }

    /// Batch gradient into `acc` (cleared first). Samples are traced in
    /// parallel and folded in batch order, so the sum is thread-count
    /// independent.
    fn batch(&self, data: &[Vector], idx: &[usize], acc: &mut Accum, fired: &mut [bool]) {
        use rayon::prelude::*;
        let scale = 1.0 / idx.len() as f64;
        let traces: Vec<SampleTrace> = idx
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| chunk.iter().map(|&i| self.trace(data[i].as_slice(), scale)).collect::<Vec<_>>())
            .collect();
        acc.clear();
        for t in &traces {
            for &(j, _, _) in &t.active {
                fired[j] = true;
            }
            self.apply(t, acc);
        }
    }

    fn normalize_decoder(&mut self) {
        let n = self.n;
        for j in 0..self.m() {
            let col = &mut self.dec[j * n..(j + 1) * n];
            let norm = dot(col, col).sqrt();
            if norm > 0.0 {
                for v in col.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }

    /// Remove the radial component of each decoder gradient column.
    fn project_decoder_grad(&self, grad: &mut [f64]) {
        let n = self.n;
        for j in 0..self.m() {
            let d = &self.dec[j * n..(j + 1) * n];
            let g = &mut grad[j * n..(j + 1) * n];
            let radial = dot(d, g);
            for (gi, di) in g.iter_mut().zip(d) {
                *gi -= radial * di;
            }
        }
    }

    fn into_params(self) -> SaeParams {
        let (n, m, k) = (self.n, self.m(), self.k);
        SaeParams {
            w_enc: Matrix::new(m, n, self.w_enc).expect("shape"),
            b_enc: Vector::new(self.b_enc).expect("finite parameters"),
            w_dec: Matrix::new(m, n, self.dec).expect("shape").transpose(),
            b_dec: Vector::new(self.b_dec).expect("finite parameters"),
            k,
        }
    }
}

/// Initialisation: `b_dec` is the mean of a seeded data subset, decoder
/// columns are unit-norm Gaussians, `W_enc = W_decᵀ`, `b_enc = 0`.
pub fn init_params(data: &[Vector], config: &SaeTrainConfig) -> Result<SaeParams> {
    config.validate()?;
    let first = data.first().ok_or_else(|| invalid("empty training data"))?;
    let n = first.dim();
    if config.m_dim <= n {
        return Err(invalid(format!("m_dim {} must exceed n_dim {n}", config.m_dim)));
    }
    let mut rng = Rng::derive(config.seed, 0);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(config.init_samples.max(1));
    let mut b_dec = Vector::zeros(n);
    for &i in &idx {
        b_dec.axpy(1.0 / idx.len() as f64, &data[i]);
    }
    let mut dec_fm = Matrix::gaussian(config.m_dim, n, 1.0, &mut rng);
    for j in 0..config.m_dim {
        let row = dec_fm.row_mut(j);
        let norm = dot(row, row).sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(SaeParams {
        w_enc: dec_fm.clone(),
        b_enc: Vector::zeros(config.m_dim),
        w_dec: dec_fm.transpose(),
        b_dec,
        k: config.k,
    })
}

pub fn train_sae(data: &LabeledActivationSet, config: &SaeTrainConfig) -> Result<(SaeParams, SaeTrainLog)> {
    let xs: Vec<Vector> = data.samples.iter().map(|(x, _)| x.clone()).collect();
    train_on(&xs, config)
}

pub fn train_on(data: &[Vector], config: &SaeTrainConfig) -> Result<(SaeParams, SaeTrainLog)> {
    config.validate()?;
    if data.len() < config.batch_size {
        return Err(invalid(format!(
            "{} samples is fewer than batch_size {}",
            data.len(),
            config.batch_size
        )));
    }
    let n = data[0].dim();
    if data.iter().any(|x| x.dim() != n) {
        return Err(invalid("training samples differ in dimension"));
    }
    let init = init_params(data, config)?;
    let initial_loss = full_loss(&init, data);
    let mut fm = FeatureMajor::from_params(&init);
    let m = config.m_dim;
    let mut adam = AdamState::new(&[m * n, m, m * n, n]);
    let adam_cfg = config.adam();
    let mut rng = Rng::derive(config.seed, 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut fired = vec![false; m];
    let mut acc = Accum::new(m, n);
    let mut log = SaeTrainLog {
        losses: Vec::with_capacity(config.steps),
        dead_features: Vec::new(),
        initial_loss,
        final_loss: initial_loss,
    };

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        fm.batch(data, &batch, &mut acc, &mut fired);
        log.losses.push(acc.loss);
        fm.project_decoder_grad(&mut acc.dec);
        {
            let FeatureMajor {
                w_enc, b_enc, dec, b_dec, ..
            } = &mut fm;
            let mut params: [&mut [f64]; 4] = [w_enc, b_enc, dec, b_dec];
            let grads: [&[f64]; 4] = [&acc.w_enc, &acc.b_enc, &acc.dec, &acc.b_dec];
            adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
        }
        fm.normalize_decoder();
        if (step + 1) % config.dead_feature_window == 0 {
            let dead = fired.iter().filter(|f| !**f).count();
            log.dead_features.push((step + 1, dead));
            fired.iter_mut().for_each(|f| *f = false);
        }
    }
    let params = fm.into_params();
    log.final_loss = full_loss(&params, data);
    Ok((params, log))
}

fn full_loss(params: &SaeParams, data: &[Vector]) -> f64 {
    params.loss(data).expect("validated shapes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    WEnc,
    BEnc,
    WDec,
    BDec,
}

/// Central-difference check of `loss_and_grads`.
///
/// Returns the largest relative error `|a - f| / max(|a|, |f|, floor)`
/// over the checked coordinates, skipping coordinates whose ±eps
/// perturbation changes any sample's active set. `coords = None` checks
/// every parameter.
pub fn grad_check(
    params: &SaeParams,
    batch: &[Vector],
    eps: f64,
    coords: Option<&[(ParamSlot, usize)]>,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(invalid("eps must be positive"));
    }
    let (_, grads) = params.loss_and_grads(batch)?;
    let base_support = params.supports(batch)?;
    let all: Vec<(ParamSlot, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = all_coords(params);
            &all
        }
    };
    let mut report = GradCheckReport::default();
    for &(slot, i) in coords {
        let analytic = grads.buffers()[slot as usize][i];
        let mut plus = params.clone();
        plus.buffers_mut()[slot as usize][i] += eps;
        let mut minus = params.clone();
        minus.buffers_mut()[slot as usize][i] -= eps;
        if plus.supports(batch)? != base_support || minus.supports(batch)? != base_support {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.loss(batch)? - minus.loss(batch)?) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.max_rel_error = report.max_rel_error.max((analytic - numeric).abs() / denom);
        report.checked += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn all_coords(p: &SaeParams) -> Vec<(ParamSlot, usize)> {
    let (n, m) = (p.n_dim(), p.m_dim());
    let mut out = Vec::new();
    for (slot, len) in [
        (ParamSlot::WEnc, m * n),
        (ParamSlot::BEnc, m),
        (ParamSlot::WDec, m * n),
        (ParamSlot::BDec, n),
    ] {
        out.extend((0..len).map(|i| (slot, i)));
    }
    out
}

/// `count` coordinates drawn uniformly (with replacement) across slots.
pub fn sample_coords(p: &SaeParams, count: usize, rng: &mut Rng) -> Vec<(ParamSlot, usize)> {
    let all = all_coords(p);
    (0..count).map(|_| all[rng.below(all.len())]).collect()
}

/// Seeded parameters with unit decoder columns, for tests and checks.
pub fn random_params(n: usize, m: usize, k: usize, rng: &mut Rng) -> SaeParams {
    let mut dec_fm = Matrix::gaussian(m, n, 1.0, rng);
    for j in 0..m {
        let row = dec_fm.row_mut(j);
        let norm = dot(row, row).sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    SaeParams {
        w_enc: Matrix::gaussian(m, n, 1.0, rng),
        b_enc: rng.gaussian_vector(m, 0.1),
        w_dec: dec_fm.transpose(),
        b_dec: rng.gaussian_vector(n, 0.1),
        k,
    }
}
