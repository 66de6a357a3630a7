//! Dense row-major `f64` tensors.

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    /// Row count when viewed as a matrix; vectors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!("tensor of shape {:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match self.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `c = a · b` for row-major `a: [n×k]`, `b: [k×m]`, with optional transposes
/// given as strides. `c` is overwritten when `accumulate` is false.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is n×k logically; stored either as n×k (rs=k, cs=1) or k×n transposed.
    let (rsa, csa) = if a_t { (1, n as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (m as isize, 1) };
    debug_assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the logical extents, and
    // the strides describe in-bounds row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `op(a)·op(b)` into a fresh buffer.
pub(crate) fn gemm_alloc(n: usize, k: usize, m: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n * m);
    let (rsa, csa) = if a_t { (1, n as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (m as isize, 1) };
    assert!(a.len() >= n * k && b.len() >= k * m);
    // SAFETY: with beta = 0 dgemm only writes C, so the uninitialised
    // capacity is fully written before `set_len` exposes it.
    unsafe {
        matrixmultiply::dgemm(n, k, m, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, out.as_mut_ptr(), m as isize, 1);
        out.set_len(n * m);
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(shape_err(format!("matmul of {:?} and {:?}", a.shape, b.shape)));
    }
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    Tensor::new(vec![n, m], gemm_alloc(n, k, m, &a.data, false, &b.data, false))
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in softmax input".into()));
    }
    let cols = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(shape_err(format!(
            "layer_norm of {:?} with gain {:?} and bias {:?}",
            x.shape, gain.shape, bias.shape
        )));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        normalize_in_place(row);
        for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = *v * g + b;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Normalises `row` to zero mean and unit variance; returns (mean, 1/std).
pub(crate) fn normalize_in_place(row: &mut [f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv;
    }
    (mean, inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let m = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap().data(), m.data());
    }

    #[test]
    fn small_product() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let z = softmax_rows(&Tensor::zeros(&[1, 4])).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let big = softmax_rows(&Tensor::from_rows(&[&[1000.0, 1000.0]]).unwrap()).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        let l3 = softmax_rows(&Tensor::from_rows(&[&[0.0, 3f64.ln()]]).unwrap()).unwrap();
        assert!((l3.data()[0] - 0.25).abs() < 1e-15 && (l3.data()[1] - 0.75).abs() < 1e-15);
        let nan = Tensor::from_rows(&[&[0.0, f64::NAN]]).unwrap();
        assert!(matches!(softmax_rows(&nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::vector(vec![1.0; 4]);
        let zero = Tensor::vector(vec![0.0; 4]);
        let c = layer_norm(&Tensor::vector(vec![3.0; 4]), &ones, &zero).unwrap();
        assert!(c.data().iter().all(|v| v.abs() < 1e-12));

        let g = Tensor::vector(vec![1.0; 2]);
        let b = Tensor::vector(vec![0.0; 2]);
        let y = layer_norm(&Tensor::vector(vec![1.0, -1.0]), &g, &b).unwrap();
        // mean 0, var 1 -> x / sqrt(1 + eps)
        let expect = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15 && (y.data()[1] + expect).abs() < 1e-15);

        let bias = Tensor::vector(vec![0.3, -0.7, 2.0]);
        let y = layer_norm(&Tensor::vector(vec![5.0, -2.0, 9.0]), &Tensor::vector(vec![0.0; 3]), &bias).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        let mut t = Tensor::zeros(&[3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 4.0, 6.0][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0; 3][..]));
    }
}
