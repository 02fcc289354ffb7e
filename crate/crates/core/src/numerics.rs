//! Dense row-major matrices, the losses used for training, Adam, and a
//! central-difference gradient checker.
//!
//! Every learnable component in the crate implements an explicit backward
//! pass; [`finite_difference_check`] is how those passes are verified.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector.
    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, the layout used for `inputs · weightsᵀ` with `(out × in)` weights.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_nt: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`, used for weight gradients.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul_tn: {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let ar = a.row(k);
        let br = b.row(k);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Inner product over the common prefix, with four interleaved partial sums.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits.
pub fn softmax_rows_backward(probs: &Matrix, grad_probs: &Matrix) -> Result<Matrix> {
    probs.check_same_shape(grad_probs, "softmax_rows_backward")?;
    let mut out = Matrix::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let p = probs.row(r);
        let g = grad_probs.row(r);
        let inner = dot(p, g);
        for (o, (pv, gv)) in out.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
            *o = pv * (gv - inner);
        }
    }
    Ok(out)
}

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of `labels` under row-probabilities `probs`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows != labels.len() {
        return Err(Error::shape(format!(
            "cross_entropy: {} rows vs {} labels",
            probs.rows,
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Domain("cross_entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= probs.cols {
            return Err(Error::Domain(format!(
                "label {y} out of range for {} classes",
                probs.cols
            )));
        }
        total -= probs.get(r, y).max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// One named learnable tensor. `grad` is `None` until a backward pass
/// writes it and is cleared again by [`adam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Option<Matrix>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::State(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Matrix> {
        self.params[id.0].grad.as_ref()
    }

    /// Adds `g` into the gradient slot, creating it if empty.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &Matrix) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for `{}`: {:?} vs value {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        match &mut p.grad {
            Some(acc) => acc.add_assign(g)?,
            None => p.grad = Some(g.clone()),
        }
        Ok(())
    }

    /// Sets every gradient slot to an explicit zero matrix.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Matrix::zeros(p.value.rows, p.value.cols));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn scale_grads(&mut self, k: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.scale(k);
            }
        }
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates for every entry of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows, p.value.cols))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one bias-corrected Adam update and clears every gradient.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} parameters, set has {}",
            state.first.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.first) {
        match &p.grad {
            None => return Err(Error::State(format!("missing gradient for `{}`", p.name))),
            Some(_) if m.shape() != p.value.shape() => {
                return Err(Error::State(format!("moment shape mismatch for `{}`", p.name)))
            }
            Some(_) => {}
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    for ((p, m), v) in params
        .iter_mut()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let g = p.grad.take().expect("checked above");
        for (((w, gi), mi), vi) in p
            .value
            .data
            .iter_mut()
            .zip(&g.data)
            .zip(m.data.iter_mut())
            .zip(v.data.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares the analytic gradients stored in `params` against central
/// differences of `loss_fn` and returns the worst relative error, using
/// `max(|a|, |n|, 1e-8)` as the denominator.
///
/// `params` values are restored before returning.
pub fn finite_difference_check<F>(mut loss_fn: F, params: &mut ParamSet, h: f64) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        let id = ParamId(pi);
        let analytic = params
            .grad(id)
            .cloned()
            .ok_or_else(|| Error::State(format!("missing gradient for `{}`", params.param(id).name)))?;
        for k in 0..analytic.data.len() {
            let orig = params.value(id).data[k];
            params.value_mut(id).data[k] = orig + h;
            let plus = loss_fn(params);
            params.value_mut(id).data[k] = orig - h;
            let minus = loss_fn(params);
            params.value_mut(id).data[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while perturbing `{}`[{k}]",
                    params.param(id).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(3, 3, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let six = matmul(&Matrix::column(vec![2.0]), &Matrix::column(vec![3.0])).unwrap();
        assert_eq!(six.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(5, 4, &mut rng);
        let b = random(4, 3, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        let slow = triple_loop(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        for ((x, y), z) in nt.data().iter().zip(tn.data()).zip(slow.data()) {
            assert!((x - z).abs() < 1e-12 && (y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1000.0, 1000.0],
            vec![1f64.ln(), 3f64.ln()],
        ])
        .unwrap();
        let p = softmax_rows(&m);
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert_eq!(p.row(1), &[0.5, 0.5]);
        assert!((p.get(2, 0) - 0.25).abs() < 1e-12);
        assert!((p.get(2, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let p = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(cross_entropy(&p, &[0]).unwrap() < 1e-11);
        let p = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!((cross_entropy(&p, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let p = Matrix::from_rows(&[vec![0.2, 0.8], vec![0.9, 0.1]]).unwrap();
        let expected = (-(0.8f64).ln() - (0.1f64).ln()) / 2.0;
        assert!((cross_entropy(&p, &[1, 1]).unwrap() - expected).abs() < 1e-12);

        assert!(matches!(cross_entropy(&p, &[0, 2]), Err(Error::Domain(_))));
    }

    fn scalar_set(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Matrix::column(vec![v])).unwrap();
        ps
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut ps = scalar_set(0.7);
        let mut st = AdamState::new(&ps, AdamConfig::default());
        for _ in 0..3 {
            ps.zero_grads();
            adam_step(&mut ps, &mut st).unwrap();
        }
        assert_eq!(ps.value(ParamId(0)).data(), &[0.7]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = scalar_set(1.0);
        let mut st = AdamState::new(&ps, AdamConfig::with_lr(0.1));
        ps.accumulate_grad(ParamId(0), &Matrix::column(vec![1.0])).unwrap();
        adam_step(&mut ps, &mut st).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps.value(ParamId(0)).data()[0] - expected).abs() < 1e-15);
        assert!(ps.grad(ParamId(0)).is_none(), "gradients cleared after step");
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_identical_params_identical_updates() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Matrix::column(vec![0.3, -0.2])).unwrap();
        let b = ps.add("b", Matrix::column(vec![0.3, -0.2])).unwrap();
        let mut st = AdamState::new(&ps, AdamConfig::default());
        for step in 0..5 {
            let g = Matrix::column(vec![0.1 * step as f64, -0.4]);
            ps.accumulate_grad(a, &g).unwrap();
            ps.accumulate_grad(b, &g).unwrap();
            adam_step(&mut ps, &mut st).unwrap();
        }
        assert_eq!(ps.value(a), ps.value(b));
    }

    #[test]
    fn adam_missing_gradient_errors() {
        let mut ps = scalar_set(1.0);
        let mut st = AdamState::new(&ps, AdamConfig::default());
        assert!(matches!(adam_step(&mut ps, &mut st), Err(Error::State(_))));
    }

    #[test]
    fn duplicate_param_name_rejected() {
        let mut ps = scalar_set(1.0);
        assert!(ps.add("w", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn fd_quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(3, 4, &mut rng);
        let mut ps = ParamSet::new();
        let id = ps.add("w", w.clone()).unwrap();
        ps.accumulate_grad(id, &w).unwrap();
        let loss = |p: &ParamSet| Ok(0.5 * p.value(id).data().iter().map(|x| x * x).sum::<f64>());
        let err = finite_difference_check(loss, &mut ps, DEFAULT_FD_STEP).unwrap();
        assert!(err < 1e-8, "err = {err}");
        assert_eq!(ps.value(id), &w, "values restored");
    }

    fn softmax_direction_setup() -> (ParamSet, ParamId, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(3, 5, &mut rng);
        let dir = random(3, 5, &mut rng);
        let probs = softmax_rows(&w);
        let grad = softmax_rows_backward(&probs, &dir).unwrap();
        let mut ps = ParamSet::new();
        let id = ps.add("w", w).unwrap();
        ps.accumulate_grad(id, &grad).unwrap();
        (ps, id, dir)
    }

    fn softmax_direction_loss(p: &ParamSet, id: ParamId, dir: &Matrix) -> Result<f64> {
        let probs = softmax_rows(p.value(id));
        Ok(dot(probs.data(), dir.data()))
    }

    #[test]
    fn fd_softmax_along_direction() {
        let (mut ps, id, dir) = softmax_direction_setup();
        let err =
            finite_difference_check(|p| softmax_direction_loss(p, id, &dir), &mut ps, DEFAULT_FD_STEP)
                .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn fd_detects_corrupted_gradient() {
        let (mut ps, id, dir) = softmax_direction_setup();
        let mut doubled = ps.grad(id).unwrap().clone();
        doubled.scale(2.0);
        ps.iter_mut().next().unwrap().grad = Some(doubled);
        let err =
            finite_difference_check(|p| softmax_direction_loss(p, id, &dir), &mut ps, DEFAULT_FD_STEP)
                .unwrap();
        assert!(err > 0.3, "err = {err}");
    }

    #[test]
    fn fd_rejects_non_finite_loss() {
        let mut ps = scalar_set(1.0);
        ps.zero_grads();
        let err = finite_difference_check(|_| Ok(f64::NAN), &mut ps, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
            proptest::collection::vec(-3.0f64..3.0, rows * cols)
                .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
        }

        proptest! {
            #[test]
            fn matmul_is_associative(a in mat(3, 4), b in mat(4, 2), c in mat(2, 5)) {
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                for (x, y) in left.data().iter().zip(right.data()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }

            #[test]
            fn softmax_shift_invariant(row in proptest::collection::vec(-20.0f64..20.0, 1..8), shift in -50.0f64..50.0) {
                let m = Matrix::from_rows(&[row.clone()]).unwrap();
                let shifted = Matrix::from_rows(&[row.iter().map(|v| v + shift).collect()]).unwrap();
                let (p, q) = (softmax_rows(&m), softmax_rows(&shifted));
                prop_assert!((p.sum() - 1.0).abs() < 1e-9);
                for (x, y) in p.data().iter().zip(q.data()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn cross_entropy_nonnegative(row in proptest::collection::vec(-5.0f64..5.0, 2..6), pick in 0usize..6) {
                let label = pick % row.len();
                let p = softmax_rows(&Matrix::from_rows(&[row]).unwrap());
                let ce = cross_entropy(&p, &[label]).unwrap();
                prop_assert!(ce >= 0.0);
            }
        }
    }
}
