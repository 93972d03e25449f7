//! Dense matrices, binary label matrices and the split-stream generator
//! shared by every other module.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower/upper clamp applied to every probability before a logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-major dense matrix of finite `f64`s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(
                "data",
                format!("expected {} values for {rows}x{cols}, got {}", rows * cols, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::invalid(
                    format!("row {i}"),
                    format!("expected {cols} columns, got {}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Matrix::new(rows.len(), cols, data)
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so empty-column matrices yield nothing.
        self.data.chunks_exact(self.cols.max(1)).take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    /// Gathers the given rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    /// Column means; zeros for an empty matrix.
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        if self.rows > 0 {
            for o in &mut out {
                *o /= self.rows as f64;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, p);
        for i in 0..n {
            let out_row = &mut out.data[i * p..(i + 1) * p];
            for k in 0..m {
                let a = self.data[i * m + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * p..(k + 1) * p];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                op: "t_matmul",
                left: (self.cols, self.rows),
                right: other.shape(),
            });
        }
        let (m, p) = (self.cols, other.cols);
        let mut out = Matrix::zeros(m, p);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[k * p..(k + 1) * p];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: (other.cols, other.rows),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Binary (0/1) matrix used for true labels, candidate sets and weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<u8>>", try_from = "Vec<Vec<u8>>")]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl LabelMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        LabelMatrix {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        LabelMatrix { rows, cols, data }
    }

    /// Parses rows of 0/1 values. Any other value is rejected.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::invalid(
                    format!("row {i}"),
                    format!("expected {cols} columns, got {}", row.len()),
                ));
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => data.push(false),
                    1 => data.push(true),
                    _ => {
                        return Err(Error::invalid(
                            format!("entry ({i}, {j})"),
                            format!("expected 0 or 1, got {v}"),
                        ))
                    }
                }
            }
        }
        Ok(LabelMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries are `true` wherever the value is exactly 1.0; anything other
    /// than 0.0 or 1.0 is rejected.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let mut data = Vec::with_capacity(m.data().len());
        for (pos, &v) in m.data().iter().enumerate() {
            if v == 1.0 {
                data.push(true);
            } else if v == 0.0 {
                data.push(false);
            } else {
                return Err(Error::invalid(
                    format!("entry ({}, {})", pos / m.cols(), pos % m.cols()),
                    format!("expected 0 or 1, got {v}"),
                ));
            }
        }
        Ok(LabelMatrix {
            rows: m.rows(),
            cols: m.cols(),
            data,
        })
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let mut out = vec![0; self.cols];
        for i in 0..self.rows {
            for (o, &b) in out.iter_mut().zip(self.row(i)) {
                *o += usize::from(b);
            }
        }
        out
    }

    pub fn select_rows(&self, indices: &[usize]) -> LabelMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        LabelMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `true` when every set entry of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &LabelMatrix) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Flat row-major indices of the set entries.
    pub fn ones_indices(&self) -> Vec<u32> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(k, _)| k as u32)
            .collect()
    }

    pub fn from_ones_indices(rows: usize, cols: usize, indices: &[u32]) -> Result<Self> {
        let mut m = LabelMatrix::zeros(rows, cols);
        for &k in indices {
            let k = k as usize;
            if k >= rows * cols {
                return Err(Error::invalid(
                    "indices",
                    format!("flat index {k} outside a {rows}x{cols} matrix"),
                ));
            }
            m.data[k] = true;
        }
        Ok(m)
    }
}

impl From<LabelMatrix> for Vec<Vec<u8>> {
    fn from(m: LabelMatrix) -> Self {
        (0..m.rows)
            .map(|i| m.row(i).iter().map(|&b| u8::from(b)).collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<u8>>> for LabelMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        LabelMatrix::from_rows(&rows)
    }
}

/// Deterministic generator addressed by `(seed, stream)`.
///
/// Each stream is an independent ChaCha8 keystream, so work can be split per
/// sample (or per epoch) and drawn in any order without changing results.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    /// Generator for a stream addressed by a path of labels, e.g.
    /// `[AUGMENT, epoch, sample]`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let stream = path
            .iter()
            .fold(0x243F_6A88_85A3_08D3_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)));
        Rng::new(seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn sample_gaussian(rng: &mut Rng, n: usize, mean: f64, std: f64) -> Result<Vec<f64>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid("std", format!("must be finite and >= 0, got {std}")));
    }
    if !mean.is_finite() {
        return Err(Error::invalid("mean", format!("must be finite, got {mean}")));
    }
    Ok((0..n).map(|_| mean + std * rng.standard_normal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, sample_gaussian(rng, rows * cols, 0.0, 1.0).unwrap()).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.data()[i * a.cols() + k] * b.data()[k * b.cols() + j];
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_m_is_m() {
        let m = Matrix::from_rows(&[[1.5, -2.0], [0.25, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7, 0);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() < 1e-12);
        }
        let t = a.transpose().t_matmul(&b.transpose().transpose()).unwrap();
        assert!(t.max_abs_diff(&got) < 1e-12);
        let u = a.matmul_t(&b.transpose()).unwrap();
        assert!(u.max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn gaussian_zero_std_is_constant() {
        let v = sample_gaussian(&mut Rng::new(1, 0), 50, 2.5, 0.0).unwrap();
        assert!(v.iter().all(|&x| x == 2.5));
    }

    #[test]
    fn gaussian_rejects_negative_std() {
        assert!(sample_gaussian(&mut Rng::new(1, 0), 5, 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = sample_gaussian(&mut Rng::new(42, 3), 100, 0.0, 1.0).unwrap();
        let b = sample_gaussian(&mut Rng::new(42, 3), 100, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        let c = sample_gaussian(&mut Rng::new(42, 4), 100, 0.0, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let v = sample_gaussian(&mut Rng::new(2024, 0), 100_000, 0.0, 1.0).unwrap();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((std - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn streams_are_uncorrelated() {
        let n = 20_000;
        let a = sample_gaussian(&mut Rng::derive(9, &[1, 0]), n, 0.0, 1.0).unwrap();
        let b = sample_gaussian(&mut Rng::derive(9, &[1, 1]), n, 0.0, 1.0).unwrap();
        let corr = dot(&a, &b) / n as f64;
        // 4 standard errors of a null correlation.
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn label_matrix_rejects_non_binary() {
        assert!(LabelMatrix::from_rows(&[[0u8, 2]]).is_err());
        let m = LabelMatrix::from_rows(&[[0u8, 1], [1, 1]]).unwrap();
        assert_eq!(m.count_ones(), 3);
        assert_eq!(m.column_sums(), vec![1, 2]);
        let back = LabelMatrix::from_ones_indices(2, 2, &m.ones_indices()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = Rng::new(seed, 0);
            let a = random_matrix(&mut rng, n, m);
            let b = random_matrix(&mut rng, m, p);
            let c = random_matrix(&mut rng, p, q);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
            prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
        }

        #[test]
        fn shuffle_is_a_permutation(seed in any::<u64>(), n in 0usize..50) {
            let mut v: Vec<usize> = (0..n).collect();
            Rng::new(seed, 1).shuffle(&mut v);
            let mut sorted = v.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }
}
