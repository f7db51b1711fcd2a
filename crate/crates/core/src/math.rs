//! Dense numerical kernels shared by every layer.
//!
//! Everything here is row-major `f64`. Kernels are deliberately plain loops:
//! the engine is meant to be read and checked, not to win benchmarks.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;
pub const CONV_WIDTH: usize = 4;
/// Number of past input rows a width-4 causal conv must carry between calls.
pub const CONV_TAIL: usize = CONV_WIDTH - 1;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Mat::from_vec",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(shape_err(
                    "Mat::from_rows",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn random_uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
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

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Mat {
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Mat {
        let w = end - start;
        let mut out = Mat::zeros(self.rows, w);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "Mat::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "Mat::sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "Mat::hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        max_abs_diff(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(shape_err(
            "matmul",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            axpy(aik, b.row(k), out_row);
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x · w` where `w` is `x.len() × out`.
pub fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows);
    let mut out = vec![0.0; w.cols];
    for (k, &xk) in x.iter().enumerate() {
        if xk != 0.0 {
            axpy(xk, w.row(k), &mut out);
        }
    }
    out
}

/// Matrix times column vector: `m · x`.
pub fn mat_vec(m: &Mat, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), m.cols);
    m.iter_rows().map(|r| dot(r, x)).collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// In-place softmax of one row, shifted by the row max.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// `ln Σ exp(x_i)` with max shift.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
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

#[inline]
pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow for large x
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu(x: &Mat) -> Mat {
    x.map(silu_scalar)
}

pub fn silu_in_place(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = silu_scalar(*v);
    }
}

/// RMS-normalize one vector and multiply by `gain`.
pub fn rms_norm_vec(x: &[f64], gain: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), gain.len());
    let ms = dot(x, x) / x.len().max(1) as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

pub fn rms_norm(x: &Mat, gain: &[f64]) -> Result<Mat> {
    if gain.len() != x.cols {
        return Err(shape_err(
            "rms_norm",
            format!("gain length {} for {} columns", gain.len(), x.cols),
        ));
    }
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(&rms_norm_vec(x.row(r), gain));
    }
    Ok(out)
}

/// Rotate adjacent pairs `(2i, 2i+1)` of one vector by `position · base^(−2i/d)`.
pub fn rope_in_place(x: &mut [f64], position: usize, base: f64) {
    let d = x.len();
    debug_assert!(d % 2 == 0);
    let pos = position as f64;
    for i in 0..d / 2 {
        let theta = pos * base.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos - b * sin;
        x[2 * i + 1] = a * sin + b * cos;
    }
}

/// Apply rotary embedding to every row of `x` at the same absolute position.
pub fn rope(x: &Mat, position: usize, base: f64) -> Result<Mat> {
    if x.cols % 2 != 0 {
        return Err(shape_err("rope", format!("odd head dimension {}", x.cols)));
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        rope_in_place(out.row_mut(r), position, base);
    }
    Ok(out)
}

/// Depthwise causal convolution of width 4.
///
/// `x` is `L × C`, `kernel` is `C × 4` with taps ordered oldest to newest
/// (tap 3 multiplies the current input), and `tail` is the `3 × C` window
/// of inputs preceding `x` (zeros at stream start, oldest first). Returns
/// the output sequence and the tail to use for the next call.
pub fn causal_conv(x: &Mat, kernel: &Mat, tail: &Mat) -> Result<(Mat, Mat)> {
    let c = x.cols;
    if kernel.rows != c || kernel.cols != CONV_WIDTH {
        return Err(shape_err(
            "causal_conv",
            format!("kernel {:?} for {c} channels", kernel.shape()),
        ));
    }
    if tail.rows != CONV_TAIL || tail.cols != c {
        return Err(shape_err(
            "causal_conv",
            format!("tail {:?} for {c} channels", tail.shape()),
        ));
    }
    let mut hist = tail.clone();
    let mut out = Mat::zeros(x.rows, c);
    for t in 0..x.rows {
        let y = conv_step(x.row(t), kernel, &mut hist);
        out.row_mut(t).copy_from_slice(&y);
    }
    Ok((out, hist))
}

/// One streaming step of [`causal_conv`]; `tail` is updated in place.
pub fn conv_step(x_t: &[f64], kernel: &Mat, tail: &mut Mat) -> Vec<f64> {
    let c = x_t.len();
    let mut y = vec![0.0; c];
    for (ch, yc) in y.iter_mut().enumerate() {
        let w = kernel.row(ch);
        let mut acc = w[CONV_TAIL] * x_t[ch];
        for j in 0..CONV_TAIL {
            acc += w[j] * tail.get(j, ch);
        }
        *yc = acc;
    }
    // shift oldest out
    tail.data.copy_within(c.., 0);
    tail.row_mut(CONV_TAIL - 1).copy_from_slice(x_t);
    y
}

/// Seeded, platform-independent random source.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for sub-component `stream` of this seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = 1.0 - self.inner.gen::<f64>();
        let u2: f64 = self.inner.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn unit_vec(&mut self, n: usize) -> Vec<f64> {
        let mut v = self.normal_vec(n);
        let norm = l2_norm(&v);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut rng = Rng::new(1);
        let m = Mat::random_uniform(&mut rng, 3, 4, -1.0, 1.0);
        assert_eq!(matmul(&Mat::identity(3), &m).unwrap(), m);

        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = Mat::random_uniform(&mut rng, 7, 5, -1.0, 1.0);
        let b = Mat::random_uniform(&mut rng, 5, 3, -1.0, 1.0);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let m = Mat::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&m);
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 1.0).abs() <= 1e-12 && s.get(1, 1).abs() <= 1e-12);

        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&m);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.get(0, i) - x.exp() / z).abs() <= 1e-15);
        }
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(50.0) - 50.0).abs() < 1e-12);
        assert!((silu_scalar(1.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((silu_scalar(1.0) - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn rms_norm_cases() {
        let gain = vec![1.0; 4];
        let z = rms_norm(&Mat::zeros(1, 4), &gain).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);

        // already unit RMS: ε shifts the result by ~ε/2 relative
        let unit = Mat::from_rows(&[vec![1.0, -1.0, 1.0, -1.0]]).unwrap();
        let u = rms_norm(&unit, &gain).unwrap();
        let expect = 1.0 / (1.0 + RMS_EPS).sqrt();
        for &v in u.data() {
            assert!((v.abs() - expect).abs() < 1e-15);
        }

        let mut rng = Rng::new(3);
        let x = Mat::random_uniform(&mut rng, 1, 64, -5.0, 5.0);
        let y = rms_norm(&x, &vec![1.0; 64]).unwrap();
        let rms = (dot(y.row(0), y.row(0)) / 64.0).sqrt();
        let ms = dot(x.row(0), x.row(0)) / 64.0;
        assert!((rms - (ms / (ms + RMS_EPS)).sqrt()).abs() < 1e-12, "rms {rms}");
        assert!((rms - 1.0).abs() < 1e-6);

        assert!(rms_norm(&x, &gain).is_err());
    }

    #[test]
    fn rope_identity_norm_and_relative_shift() {
        let mut rng = Rng::new(11);
        let x = Mat::random_uniform(&mut rng, 3, 8, -1.0, 1.0);
        assert_eq!(rope(&x, 0, ROPE_BASE).unwrap(), x);
        let r = rope(&x, 37, ROPE_BASE).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let n0 = x.get(i, 2 * p).hypot(x.get(i, 2 * p + 1));
                let n1 = r.get(i, 2 * p).hypot(r.get(i, 2 * p + 1));
                assert!((n0 - n1).abs() < 1e-12);
            }
        }
        assert!(rope(&Mat::zeros(1, 3), 1, ROPE_BASE).is_err());

        for _ in 0..50 {
            let q = rng.normal_vec(16);
            let k = rng.normal_vec(16);
            let (m, n, s) = (rng.index(500), rng.index(500), rng.index(500));
            let rot = |v: &[f64], p| {
                let mut v = v.to_vec();
                rope_in_place(&mut v, p, ROPE_BASE);
                v
            };
            let a = dot(&rot(&q, m), &rot(&k, n));
            let b = dot(&rot(&q, m + s), &rot(&k, n + s));
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_conv_identity_zero_and_streaming() {
        let mut rng = Rng::new(5);
        let c = 6;
        let x = Mat::random_uniform(&mut rng, 32, c, -1.0, 1.0);
        let tail = Mat::zeros(CONV_TAIL, c);

        let mut ident = Mat::zeros(c, CONV_WIDTH);
        for ch in 0..c {
            ident.set(ch, CONV_WIDTH - 1, 1.0);
        }
        let (y, _) = causal_conv(&x, &ident, &tail).unwrap();
        assert_eq!(y, x);

        let kernel = Mat::random_uniform(&mut rng, c, CONV_WIDTH, -1.0, 1.0);
        let (y0, _) = causal_conv(&Mat::zeros(32, c), &kernel, &tail).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));

        let (whole, whole_tail) = causal_conv(&x, &kernel, &tail).unwrap();
        let mut t = tail.clone();
        for step in 0..32 {
            let (y, nt) = causal_conv(&x.slice_rows(step, step + 1), &kernel, &t).unwrap();
            assert!(max_abs_diff(y.row(0), whole.row(step)) <= 1e-12);
            t = nt;
        }
        assert_eq!(t, whole_tail);

        // strictly causal: y_t = Σ_j w[3-j] x_{t-j}
        let t5: f64 = (0..CONV_WIDTH)
            .map(|j| kernel.get(2, CONV_TAIL - j) * x.get(5 - j, 2))
            .sum();
        assert!((whole.get(5, 2) - t5).abs() < 1e-14);

        assert!(causal_conv(&x, &Mat::zeros(c + 1, CONV_WIDTH), &tail).is_err());
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform(-1.0, 1.0).to_bits(), b.uniform(-1.0, 1.0).to_bits());
        }
        let mut f1 = a.fork(3);
        let mut f2 = b.fork(3);
        assert_eq!(f1.normal().to_bits(), f2.normal().to_bits());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::math::Rng;

        proptest! {
            #[test]
            fn matmul_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, p in 1usize..6, q in 1usize..6) {
                let mut rng = Rng::new(seed);
                let a = Mat::random_uniform(&mut rng, n, m, -1.0, 1.0);
                let b = Mat::random_uniform(&mut rng, m, p, -1.0, 1.0);
                let c = Mat::random_uniform(&mut rng, p, q, -1.0, 1.0);
                let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                let scale = l.frobenius().max(1.0);
                prop_assert!(l.max_abs_diff(&r) / scale <= 1e-9);
            }

            #[test]
            fn softmax_sums_and_shift_invariance(row in proptest::collection::vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
                let m = Mat::from_rows(&[row.clone()]).unwrap();
                let s = softmax_rows(&m);
                prop_assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(0).iter().all(|&p| p >= 0.0));
                let shifted = Mat::from_rows(&[row.iter().map(|x| x + shift).collect()]).unwrap();
                prop_assert!(softmax_rows(&shifted).max_abs_diff(&s) <= 1e-12);
            }

            #[test]
            fn conv_streaming_any_split(seed in any::<u64>(), split in 0usize..=20) {
                let mut rng = Rng::new(seed);
                let x = Mat::random_uniform(&mut rng, 20, 3, -1.0, 1.0);
                let kernel = Mat::random_uniform(&mut rng, 3, CONV_WIDTH, -1.0, 1.0);
                let tail = Mat::zeros(CONV_TAIL, 3);
                let (whole, _) = causal_conv(&x, &kernel, &tail).unwrap();
                let (a, t) = causal_conv(&x.slice_rows(0, split), &kernel, &tail).unwrap();
                let (b, _) = causal_conv(&x.slice_rows(split, 20), &kernel, &t).unwrap();
                let mut joined = a.data().to_vec();
                joined.extend_from_slice(b.data());
                prop_assert!(max_abs_diff(&joined, whole.data()) <= 1e-12);
            }

            #[test]
            fn rope_preserves_pair_norms(seed in any::<u64>(), pos in 0usize..100_000) {
                let mut rng = Rng::new(seed);
                let x = rng.normal_vec(32);
                let mut y = x.clone();
                rope_in_place(&mut y, pos, ROPE_BASE);
                for p in 0..16 {
                    let n0 = x[2*p].hypot(x[2*p+1]);
                    let n1 = y[2*p].hypot(y[2*p+1]);
                    prop_assert!((n0 - n1).abs() <= 1e-12);
                }
            }
        }
    }
}
