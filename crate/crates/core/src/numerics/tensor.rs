use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from U[lo, hi).
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Gathers the given rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other, op)?;
        Ok(Tensor {
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

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Row-wise sums as an `rows x 1` column.
    pub fn row_sums(&self) -> Tensor {
        let data = (0..self.rows).map(|r| self.row(r).iter().sum()).collect();
        Tensor {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Euclidean norm of every row as an `rows x 1` column.
    pub fn row_norms(&self) -> Tensor {
        let data = (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Tensor {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        rows: m,
        cols: n,
        data: out,
    })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows != b.rows {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        rows: m,
        cols: n,
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.cols {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor {
        rows: m,
        cols: n,
        data: out,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
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
    out
}

/// Squared Euclidean distances between every row of `a` and every row of `b`.
pub fn pairwise_sq_dists(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.cols {
        return Err(Error::dim("pairwise_sq_dists", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            let d: f64 = ai
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            out.data[i * b.rows + j] = d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_times_m() {
        let m = Tensor::from_rows(&[[1.5, -2.0, 3.0], [0.0, 4.0, -1.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn small_product() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Tensor::from_rows(&[[1.0], [1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Tensor::from_rows(&[[3.0], [7.0]]));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 2);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(2, 2)"), "{msg}");
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(4, 3, 1.0, &mut rng);
        let b = Tensor::randn(4, 5, 1.0, &mut rng);
        let c = Tensor::randn(6, 3, 1.0, &mut rng);
        let tn = matmul_tn(&a, &b).unwrap();
        let tn_ref = matmul(&a.transpose(), &b).unwrap();
        assert!(tn.sub(&tn_ref).unwrap().max_abs() < 1e-12);
        let nt = matmul_nt(&a, &c).unwrap();
        let nt_ref = matmul(&a, &c.transpose()).unwrap();
        assert!(nt.sub(&nt_ref).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [1000.0, 0.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 0.73106).abs() < 1e-5);
        assert!((s.get(1, 1) - 0.26894).abs() < 1e-5);
        assert!(s.is_finite());
        assert!((s.get(2, 0) - 1.0).abs() < 1e-12 && s.get(2, 1) < 1e-300);
    }

    proptest! {
        #[test]
        fn softmax_is_row_stochastic(
            rows in 1usize..6,
            cols in 1usize..8,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Tensor::uniform(rows, cols, -50.0, 50.0, &mut rng);
            let s = softmax_rows(&m);
            for r in 0..rows {
                let total: f64 = s.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(r).iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(n, k, 1.0, &mut rng);
            let b = Tensor::randn(k, p, 1.0, &mut rng);
            let c = Tensor::randn(p, q, 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let rel = left.sub(&right).unwrap().frobenius() / left.frobenius().max(1e-300);
            prop_assert!(rel <= 1e-9);
        }
    }
}
