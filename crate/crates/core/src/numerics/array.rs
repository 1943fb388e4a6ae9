use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major array. Immutable in spirit: operations return new values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, S::one())
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::lit(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim().max(1)
    }

    pub fn row(&self, i: usize) -> &[S] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    /// Largest element-wise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> S {
        if self.shape != other.shape {
            return S::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::lit(x.as_f64())).collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![S::zero(); plan.out_shape.iter().product()];
        plan.forward(&self.data, &other.data, &mut out);
        Tensor::new(plan.out_shape, out)
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Self {
        let r = self.rank();
        assert!(r >= 2, "transpose_last2 needs rank >= 2");
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes).expect("valid permutation")
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let (shape, data) = permute_data(&self.shape, &self.data, axes)?;
        Ok(Tensor { shape, data })
    }

    pub fn softmax_lastdim(&self) -> Self {
        let mut out = self.clone();
        let w = self.last_dim();
        if w > 0 {
            for row in out.data.chunks_mut(w) {
                softmax_in_place(row);
            }
        }
        out
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    /// Index of the largest element in each row (first one on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        let w = self.last_dim();
        self.data.chunks(w).map(argmax).collect()
    }
}

pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn permute_data<S: Scalar>(
    shape: &[usize],
    data: &[S],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<S>)> {
    let r = shape.len();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::ShapeMismatch {
            op: "permute",
            lhs: shape.to_vec(),
            rhs: axes.to_vec(),
        });
    }
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; r];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok((out_shape, out))
}

/// Batched matrix product with broadcasting over leading batch axes.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// (lhs matrix index, rhs matrix index) per output matrix.
    pub pairs: Vec<(usize, usize)>,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1usize; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch());
            }
            batch.push(x.max(y));
        }
        let count: usize = batch.iter().product();
        let mut pairs = Vec::with_capacity(count);
        let mut idx = vec![0usize; rank];
        for _ in 0..count {
            let (mut ia, mut ib) = (0usize, 0usize);
            for ax in 0..rank {
                ia = ia * pa[ax] + if pa[ax] == 1 { 0 } else { idx[ax] };
                ib = ib * pb[ax] + if pb[ax] == 1 { 0 } else { idx[ax] };
            }
            pairs.push((ia, ib));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < batch[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        Ok(MatmulPlan { m, k, n, pairs, out_shape })
    }

    pub fn flops(&self) -> u64 {
        2 * (self.pairs.len() * self.m * self.k * self.n) as u64
    }

    pub fn forward<S: Scalar>(&self, a: &[S], b: &[S], out: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for (p, &(ia, ib)) in self.pairs.iter().enumerate() {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                &a[ia * m * k..(ia + 1) * m * k],
                (k, 1),
                &b[ib * k * n..(ib + 1) * k * n],
                (n, 1),
                S::zero(),
                &mut out[p * m * n..(p + 1) * m * n],
                (n, 1),
            );
        }
    }

    /// Accumulates `dA += dC·Bᵀ` and `dB += Aᵀ·dC`, summing over broadcast axes.
    pub fn backward<S: Scalar>(
        &self,
        a: &[S],
        b: &[S],
        grad: &[S],
        da: Option<&mut [S]>,
        db: Option<&mut [S]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(da) = da {
            for (p, &(ia, ib)) in self.pairs.iter().enumerate() {
                S::gemm(
                    m,
                    n,
                    k,
                    S::one(),
                    &grad[p * m * n..(p + 1) * m * n],
                    (n, 1),
                    &b[ib * k * n..(ib + 1) * k * n],
                    (1, n),
                    S::one(),
                    &mut da[ia * m * k..(ia + 1) * m * k],
                    (k, 1),
                );
            }
        }
        if let Some(db) = db {
            for (p, &(ia, ib)) in self.pairs.iter().enumerate() {
                S::gemm(
                    k,
                    m,
                    n,
                    S::one(),
                    &a[ia * m * k..(ia + 1) * m * k],
                    (1, k),
                    &grad[p * m * n..(p + 1) * m * n],
                    (n, 1),
                    S::one(),
                    &mut db[ib * k * n..(ib + 1) * k * n],
                    (n, 1),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn loop_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn(vec![m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            acc
        })
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(eye.matmul(&col).unwrap(), col);
        let row = t(&[1, 2], &[1.0, 2.0]);
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        assert!(got.max_abs_diff(&loop_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_rejects_inner_mismatch_and_reports_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_leading_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(vec![2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![4, 5], 1.0, &mut rng);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 3, 5]);
        for batch in 0..2 {
            let slice = t(&[3, 4], &a.data()[batch * 12..(batch + 1) * 12]);
            let want = loop_matmul(&slice, &b);
            let got = t(&[3, 5], &out.data()[batch * 15..(batch + 1) * 15]);
            assert!(got.max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let u = t(&[3], &[0.0, 0.0, 0.0]).softmax_lastdim();
        for &p in u.data() {
            assert!((p - 1.0 / 3.0).abs() <= 1e-15);
        }
        let s = t(&[2], &[1000.0, 0.0]).softmax_lastdim();
        assert!((s.data()[0] - 1.0).abs() <= 1e-12 && s.data()[1].abs() <= 1e-12);
        let l = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).softmax_lastdim();
        for (p, want) in l.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() <= 1e-15);
        for x in [-30.0f64, -2.5, 0.3, 7.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn permute_round_trip() {
        let a = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        let p = a.permute(&[1, 2, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 4, 2]);
        let back = p.permute(&[2, 0, 1]).unwrap();
        assert_eq!(back, a);
        assert!(a.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::randn(vec![5, 6], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![6, 3], 1.0, &mut rng);
        let wide = a.matmul(&b).unwrap();
        let narrow = a.cast::<f32>().matmul(&b.cast::<f32>()).unwrap().cast::<f64>();
        assert!(wide.max_abs_diff(&narrow) < 1e-5);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::randn(vec![m, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(vec![k, n], 1.0, &mut rng);
            let c = Tensor::<f64>::randn(vec![n, p], 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            prop_assert!(left.max_abs_diff(&right) / scale <= 1e-10);
        }

        #[test]
        fn softmax_rows_normalized_and_shift_invariant(xs in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
            let x = Tensor::new(vec![xs.len()], xs.clone()).unwrap();
            let s = x.softmax_lastdim();
            prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|&p| p > 0.0));
            let shifted = x.map(|v| v + shift).softmax_lastdim();
            prop_assert!(s.max_abs_diff(&shifted) <= 1e-12);
        }
    }
}
