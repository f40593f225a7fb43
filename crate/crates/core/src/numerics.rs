//! Dense tensors, stable nonlinearities, the RMSProp update and
//! finite-difference gradient verification.
//!
//! Everything here is double precision and row-major. Problem sizes are
//! small enough that plain loops over `Vec<f64>` are the right tool.

use rand::Rng;

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::arg(format!(
                "tensor of shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite tensor entry at {pos}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Matrix with entries drawn uniformly from `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                if scale > 0.0 {
                    rng.random_range(-scale..=scale)
                } else {
                    0.0
                }
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn identity(size: usize) -> Self {
        let mut t = Tensor::zeros(&[size, size]);
        for i in 0..size {
            t.set(i, i, 1.0);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.cols();
        self.data[row * cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · x` for a matrix `self`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (rows, cols) = (self.rows(), self.cols());
        if x.len() != cols {
            return Err(Error::arg(format!(
                "matvec: matrix has {cols} columns, vector has {} entries",
                x.len()
            )));
        }
        Ok((0..rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y` for a matrix `self`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        let (rows, cols) = (self.rows(), self.cols());
        if y.len() != rows {
            return Err(Error::arg(format!(
                "matvec_t: matrix has {rows} rows, vector has {} entries",
                y.len()
            )));
        }
        let mut out = vec![0.0; cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            axpy(&mut out, yr, self.row(r));
        }
        Ok(out)
    }

    /// `self += scale · a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        let cols = self.cols();
        debug_assert_eq!(a.len(), self.rows());
        debug_assert_eq!(b.len(), cols);
        for (r, &ar) in a.iter().enumerate() {
            let coeff = scale * ar;
            if coeff == 0.0 {
                continue;
            }
            axpy(&mut self.data[r * cols..(r + 1) * cols], coeff, b);
        }
    }

    /// Adds `scale · v` to column `col`.
    pub fn add_to_column(&mut self, col: usize, v: &[f64], scale: f64) {
        let cols = self.cols();
        for (r, &x) in v.iter().enumerate() {
            self.data[r * cols + col] += scale * x;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Backward pass of softmax: given output `p` and `dL/dp`, returns `dL/dscores`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner = dot(p, grad_p);
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

/// Optimizer state for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub cache: Tensor,
    pub decay: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl RmsPropState {
    pub fn new(shape: &[usize], decay: f64, learning_rate: f64, epsilon: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::arg(format!("rmsprop decay {decay} not in (0,1)")));
        }
        if !(learning_rate > 0.0) {
            return Err(Error::arg("rmsprop learning rate must be positive"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::arg("rmsprop epsilon must be positive"));
        }
        Ok(RmsPropState {
            cache: Tensor::zeros(shape),
            decay,
            learning_rate,
            epsilon,
        })
    }
}

/// One RMSProp update, in place:
/// `cache ← decay·cache + (1−decay)·g²`, `param ← param − lr·g/(√cache + ε)`.
pub fn rmsprop_step(param: &mut Tensor, grad: &Tensor, state: &mut RmsPropState) -> Result<()> {
    if !param.same_shape(grad) || !param.same_shape(&state.cache) {
        return Err(Error::arg(format!(
            "rmsprop shape mismatch: param {:?}, grad {:?}, cache {:?}",
            param.shape(),
            grad.shape(),
            state.cache.shape()
        )));
    }
    let (decay, lr, eps) = (state.decay, state.learning_rate, state.epsilon);
    for ((p, &g), c) in param
        .data
        .iter_mut()
        .zip(&grad.data)
        .zip(state.cache.data.iter_mut())
    {
        *c = decay * *c + (1.0 - decay) * g * g;
        *p -= lr * g / (c.sqrt() + eps);
    }
    Ok(())
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_gradient<F>(mut loss: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = loss(&probe);
        probe[i] = orig - h;
        let minus = loss(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
}

/// Per-coordinate `|a−n| / max(|a|, |n|, 1e-8)`; reports the worst.
pub fn gradient_check(analytic: &[f64], numeric: &[f64]) -> Result<GradientReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::arg(format!(
            "gradient length mismatch: {} vs {}",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut report = GradientReport {
        max_relative_error: 0.0,
        worst_index: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-8);
        let err = (a - n).abs() / denom;
        if err > report.max_relative_error {
            report = GradientReport {
                max_relative_error: err,
                worst_index: i,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(softmax(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let scores = [0.3, -1.2, 2.0];
        let weights = [1.0, -2.0, 0.5];
        let f = |s: &[f64]| dot(&softmax(s).unwrap(), &weights);
        let numeric = finite_diff_gradient(f, &scores, 1e-6).unwrap();
        let p = softmax(&scores).unwrap();
        let analytic = softmax_backward(&p, &weights);
        let report = gradient_check(&analytic, &numeric).unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
    }

    #[test]
    fn rmsprop_zero_gradient_is_identity_on_params() {
        let mut p = Tensor::from_vec(&[3], vec![0.1, -2.5, 7.0]).unwrap();
        let before = p.clone();
        let mut st = RmsPropState::new(&[3], 0.9, 0.1, 1e-8).unwrap();
        st.cache = Tensor::from_vec(&[3], vec![1.0, 0.5, 0.0]).unwrap();
        rmsprop_step(&mut p, &Tensor::zeros(&[3]), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.cache.data(), &[0.9, 0.45, 0.0]);
    }

    #[test]
    fn rmsprop_scalar_update() {
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut st = RmsPropState::new(&[1], 0.9, 0.1, 1e-8).unwrap();
        rmsprop_step(&mut p, &Tensor::from_vec(&[1], vec![1.0]).unwrap(), &mut st).unwrap();
        let expected = -0.1 / (0.1f64.sqrt() + 1e-8);
        assert_abs_diff_eq!(p.data()[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(p.data()[0], -0.31623, epsilon = 1e-5);
    }

    #[test]
    fn rmsprop_is_deterministic_and_checks_shapes() {
        let g = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        let mut a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        let mut sa = RmsPropState::new(&[2], 0.9, 0.01, 1e-8).unwrap();
        let mut sb = sa.clone();
        rmsprop_step(&mut a, &g, &mut sa).unwrap();
        rmsprop_step(&mut b, &g, &mut sb).unwrap();
        assert_eq!(a, b);
        let bad = Tensor::zeros(&[3]);
        assert!(rmsprop_step(&mut a, &bad, &mut sa).is_err());
    }

    #[test]
    fn finite_differences_on_simple_functions() {
        let g = finite_diff_gradient(|_| 4.2, &[1.0, -3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 6.0, epsilon = 1e-8);
        let err = finite_diff_gradient(|x| if x[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3)
            .unwrap_err();
        assert!(matches!(err, Error::Evaluation { coordinate: 1 }));
        assert!(finite_diff_gradient(|_| 0.0, &[0.0], 0.0).is_err());
    }

    #[test]
    fn gradient_check_examples() {
        let r = gradient_check(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
        let r = gradient_check(&[1.0, 2.0], &[1.0, 2.0002]).unwrap();
        assert_eq!(r.worst_index, 1);
        assert_abs_diff_eq!(r.max_relative_error, 0.0002 / 2.0002, epsilon = 1e-12);
        assert_abs_diff_eq!(r.max_relative_error, 1e-4, epsilon = 1e-7);
        let r = gradient_check(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
        assert!(gradient_check(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matvec_shapes() {
        let m = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]).unwrap(), vec![5.0, 7.0, 9.0]);
        assert!(m.matvec(&[1.0]).is_err());
        assert!(Tensor::from_vec(&[2], vec![f64::NAN, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            scores in prop::collection::vec(-50.0f64..50.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&scores).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn finite_differences_exact_up_to_rounding_on_quadratics(
            a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, x in -3.0f64..3.0,
        ) {
            let g = finite_diff_gradient(|v| a * v[0] * v[0] + b * v[0] + c, &[x], 1e-4).unwrap();
            prop_assert!((g[0] - (2.0 * a * x + b)).abs() < 1e-8);
        }
    }
}
