//! Small deterministic linear-algebra and optimisation kernel.
//!
//! Everything here works on row-major `f64` storage. Ties in any selection
//! (TopK, argmax) resolve toward the lowest index so that every run is
//! reproducible bit for bit.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense vector of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("vector contains non-finite entries"));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Unit basis vector `e_i`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[i] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * alpha).collect())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Vector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn nonzero_count(&self) -> usize {
        self.0.iter().filter(|x| **x != 0.0).count()
    }

    pub fn cosine(&self, other: &Vector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four independent partial sums so the loop vectorises
    let mut acc = [0.0f64; 4];
    let (ca, ra) = (a.chunks_exact(4), a.len() / 4 * 4);
    for (x, y) in ca.zip(b.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in a[ra..].iter().zip(&b[ra..]) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("matrix contains non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vector::dim);
        if rows.iter().any(|r| r.dim() != cols) {
            return Err(invalid("rows have differing lengths"));
        }
        let data = rows.iter().flat_map(|r| r.as_slice().iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    /// Seeded matrix with i.i.d. `N(0, scale^2)` entries.
    pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector(self.row(r).to_vec())
    }

    pub fn col_vector(&self, c: usize) -> Vector {
        Vector((0..self.rows).map(|r| self.get(r, c)).collect())
    }

    pub fn set_col(&mut self, c: usize, v: &Vector) {
        for r in 0..self.rows {
            self.set(r, c, v[r]);
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · x`.
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.cols {
            return Err(invalid(format!(
                "matvec: matrix has {} columns, vector has dim {}",
                self.cols,
                x.dim()
            )));
        }
        Ok(Vector(
            (0..self.rows).map(|r| dot(self.row(r), x.as_slice())).collect(),
        ))
    }

    /// `selfᵀ · x` without materialising the transpose.
    pub fn matvec_t(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.rows {
            return Err(invalid(format!(
                "matvec_t: matrix has {} rows, vector has dim {}",
                self.rows,
                x.dim()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += xr * a;
            }
        }
        Ok(Vector(out))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "matmul: inner dimensions {} and {} differ",
                self.cols, other.rows
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · selfᵀ`.
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..self.rows {
                g.data[i * self.rows + j] = dot(self.row(i), self.row(j));
            }
        }
        g
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Seeded ChaCha8 stream.
///
/// ChaCha8 has a published, platform-independent output sequence, so a
/// seed pins every draw on every target. Gaussian draws use the
/// `rand_distr` ziggurat sampler on top of that stream.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream; `(seed, stream)` pairs never overlap.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn gaussian_vector(&mut self, dim: usize, scale: f64) -> Vector {
        Vector((0..dim).map(|_| scale * self.normal()).collect())
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Indices of the `k` largest entries, ordered by value descending and then
/// by index ascending.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Keep the `k` largest entries of `v` and zero the rest.
pub fn topk_mask(v: &Vector, k: usize) -> Result<Vector> {
    if k == 0 || k > v.dim() {
        return Err(invalid(format!("topk_mask: k={k} outside 1..={}", v.dim())));
    }
    let mut out = Vector::zeros(v.dim());
    for i in topk_indices(v.as_slice(), k) {
        out[i] = v[i];
    }
    Ok(out)
}

/// Index of the largest entry; lowest index among ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Orthonormalise the rows of `rows` (modified Gram–Schmidt with one
/// re-orthogonalisation pass).
pub fn gram_schmidt(rows: &Matrix) -> Result<Matrix> {
    if rows.rows() > rows.cols() {
        return Err(Error::DegenerateInput(format!(
            "{} rows cannot be independent in dimension {}",
            rows.rows(),
            rows.cols()
        )));
    }
    let mut out = rows.clone();
    let cols = rows.cols();
    for i in 0..rows.rows() {
        let mut v = out.row(i).to_vec();
        for _pass in 0..2 {
            for j in 0..i {
                let q = &out.data[j * cols..(j + 1) * cols];
                let p = dot(&v, q);
                for (a, b) in v.iter_mut().zip(q) {
                    *a -= p * b;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-10 {
            return Err(Error::DegenerateInput(format!(
                "row {i} is linearly dependent on earlier rows"
            )));
        }
        for (dst, a) in out.row_mut(i).iter_mut().zip(&v) {
            *dst = a / norm;
        }
    }
    Ok(out)
}

/// Temperature softmax; temperature 0 gives the argmax one-hot.
pub fn softmax(logits: &Vector, temperature: f64) -> Vector {
    let n = logits.dim();
    if n == 0 {
        return Vector::zeros(0);
    }
    if temperature <= 0.0 {
        return Vector::basis(n, argmax(logits.as_slice()));
    }
    let max = logits.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .as_slice()
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Vector(exps.into_iter().map(|e| e / sum).collect())
}

/// Largest singular value estimate by power iteration on `MᵀM`.
pub fn spectral_norm_estimate(m: &Matrix, iters: usize, rng: &mut Rng) -> f64 {
    let mut v = rng.gaussian_vector(m.cols(), 1.0);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let n = v.norm();
        if n == 0.0 {
            return 0.0;
        }
        v = v.scaled(1.0 / n);
        let mv = m.matvec(&v).expect("shape checked by construction");
        sigma = mv.norm();
        v = m.matvec_t(&mv).expect("shape checked by construction");
    }
    sigma
}

/// Adaptive-moment optimiser hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update applied elementwise to every tensor.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid("adam_step: tensor counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(invalid(format!("adam_step: tensor {i} shape mismatch")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_mask(&v(&[3.0, 1.0, 2.0]), 2).unwrap(), v(&[3.0, 0.0, 2.0]));
        assert_eq!(topk_mask(&v(&[5.0, -1.0, 4.0]), 3).unwrap(), v(&[5.0, -1.0, 4.0]));
        assert_eq!(topk_mask(&v(&[1.0, 1.0, 0.0]), 1).unwrap(), v(&[1.0, 0.0, 0.0]));
    }

    #[test]
    fn topk_rejects_bad_k() {
        assert!(matches!(topk_mask(&v(&[1.0]), 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(topk_mask(&v(&[1.0]), 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gram_schmidt_examples() {
        let id = Matrix::identity(2);
        assert_eq!(gram_schmidt(&id).unwrap(), id);
        let m = Matrix::new(2, 2, vec![2.0, 0.0, 1.0, 1.0]).unwrap();
        let q = gram_schmidt(&m).unwrap();
        assert!(q.max_abs_diff(&id) < 1e-15);
    }

    #[test]
    fn gram_schmidt_random_is_orthonormal() {
        let mut rng = Rng::seed(11);
        let m = Matrix::gaussian(5, 32, 1.0, &mut rng);
        let q = gram_schmidt(&m).unwrap();
        assert!(q.gram().max_abs_diff(&Matrix::identity(5)) < 1e-9);
    }

    #[test]
    fn gram_schmidt_detects_rank_deficiency() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
        assert!(matches!(gram_schmidt(&m), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&v(&[0.0, 0.0]), 1.0), v(&[0.5, 0.5]));
        assert_eq!(softmax(&v(&[10.0, 0.0]), 0.0), v(&[1.0, 0.0]));
        assert_eq!(softmax(&v(&[2.0, 2.0]), 0.0), v(&[1.0, 0.0]));
        // scalar reference: e^k / (e + e^2 + e^3)
        let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let z = e[0] + e[1] + e[2];
        let p = softmax(&v(&[1.0, 2.0, 3.0]), 1.0);
        for i in 0..3 {
            assert!((p[i] - e[i] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.5, -2.0];
        let mut st = AdamState::new(&[2]);
        st.m[0] = vec![0.2, 0.1];
        st.v[0] = vec![0.04, 0.01];
        let cfg = AdamConfig::default();
        let zero = [0.0, 0.0];
        // a nonzero first moment still moves params; with m = 0 they stay put
        let mut fresh = AdamState::new(&[2]);
        adam_step(&mut [&mut p[..]], &[&zero[..]], &mut fresh, &cfg).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        adam_step(&mut [&mut p[..]], &[&zero[..]], &mut st, &cfg).unwrap();
        assert!((st.m[0][0] - 0.18).abs() < 1e-15);
        assert!((st.v[0][0] - 0.04 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        let mut p = [0.5];
        let mut st = AdamState::new(&[1]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut [&mut p[..]], &[&[1.0][..]], &mut st, &cfg).unwrap();
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1
        let expected = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_symmetric_params_stay_equal() {
        let mut p = [0.3, 0.3];
        let mut st = AdamState::new(&[2]);
        let cfg = AdamConfig::default();
        for g in [0.7, -0.2, 1.1] {
            adam_step(&mut [&mut p[..]], &[&[g, g][..]], &mut st, &cfg).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = [0.0; 2];
        let mut st = AdamState::new(&[2]);
        let r = adam_step(&mut [&mut p[..]], &[&[1.0][..]], &mut st, &AdamConfig::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let a: Vec<f64> = (0..5).map({
            let mut r = Rng::seed(7);
            move |_| r.normal()
        }).collect();
        let b: Vec<f64> = (0..5).map({
            let mut r = Rng::seed(7);
            move |_| r.normal()
        }).collect();
        assert_eq!(a, b);
        let mut c = Rng::derive(7, 1);
        assert_ne!(a[0], c.normal());
    }

    proptest! {
        #[test]
        fn topk_idempotent_and_preserving(xs in prop::collection::vec(0.0f64..10.0, 1..24), k in 1usize..24) {
            let k = k.min(xs.len());
            let x = Vector::new(xs.clone()).unwrap();
            let once = topk_mask(&x, k).unwrap();
            prop_assert_eq!(topk_mask(&once, k).unwrap(), once.clone());
            for i in 0..xs.len() {
                prop_assert!(once[i] == 0.0 || once[i] == xs[i]);
            }
            prop_assert!(once.nonzero_count() <= k);
        }

        #[test]
        fn softmax_shift_invariant(xs in prop::collection::vec(-20.0f64..20.0, 1..12), shift in -50.0f64..50.0) {
            let a = softmax(&Vector::new(xs.clone()).unwrap(), 1.0);
            let b = softmax(&Vector::new(xs.iter().map(|x| x + shift).collect()).unwrap(), 1.0);
            let sum: f64 = a.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for i in 0..xs.len() {
                prop_assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_permutation_equivariant(xs in prop::collection::vec(-20.0f64..20.0, 2..12)) {
            let a = softmax(&Vector::new(xs.clone()).unwrap(), 0.7);
            let mut rev = xs.clone();
            rev.reverse();
            let b = softmax(&Vector::new(rev).unwrap(), 0.7);
            let n = xs.len();
            for i in 0..n {
                prop_assert!((a[i] - b[n - 1 - i]).abs() < 1e-15);
            }
        }
    }
}
