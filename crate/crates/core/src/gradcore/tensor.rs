use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. Scalars use shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::of(x)).collect())
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flatten().map(|&x| S::of(x)).collect();
        Self::new(&[r, c], data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix view: leading dimension, or 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count of a matrix view: product of the trailing dimensions.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.data.len()
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm_sq(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &x| acc + x * x)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }
}

const TR: usize = 4;
const TC: usize = 16;

/// `out[M×N] += a[M×K] · b[K×N]`. Each output element accumulates its `K`
/// products in increasing `p` onto its prior value; the register tiling below
/// does not change that order.
pub(crate) fn gemm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    gemm_tiled(a, b, out, m, k, n, false);
}

/// `out[M×K] += g[M×N] · bᵀ` where `b` is `K×N`. Each dot product is summed
/// from zero in increasing column order, then added to the output.
pub(crate) fn gemm_nt_acc<S: Scalar>(g: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let mut bt = vec![S::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    gemm_tiled(g, &bt, out, m, n, k, true);
}

/// `out[M×N] += a[M×K] · b[K×N]`; with `fresh` the sum over `K` starts from
/// zero and is added to `out` at the end, otherwise it starts from `out`.
fn gemm_tiled<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, fresh: bool) {
    let mut i = 0;
    while i < m {
        let rows = TR.min(m - i);
        let mut j = 0;
        while j < n {
            let cols = TC.min(n - j);
            if rows == TR && cols == TC {
                let mut acc = [[S::zero(); TC]; TR];
                if !fresh {
                    for (r, row) in acc.iter_mut().enumerate() {
                        row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + TC]);
                    }
                }
                for p in 0..k {
                    let bp: &[S; TC] = b[p * n + j..p * n + j + TC].try_into().expect("tile");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * k + p];
                        for (o, &bv) in row.iter_mut().zip(bp) {
                            *o = *o + av * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    let dst = &mut out[(i + r) * n + j..(i + r) * n + j + TC];
                    if fresh {
                        for (o, &v) in dst.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    } else {
                        dst.copy_from_slice(row);
                    }
                }
            } else {
                for r in i..i + rows {
                    for c in j..j + cols {
                        let mut o = if fresh { S::zero() } else { out[r * n + c] };
                        for p in 0..k {
                            o = o + a[r * k + p] * b[p * n + c];
                        }
                        out[r * n + c] = if fresh { out[r * n + c] + o } else { o };
                    }
                }
            }
            j += cols;
        }
        i += rows;
    }
}

/// `out[K×N] += aᵀ · g` where `a` is `M×K` and `g` is `M×N`. Each output
/// element accumulates over rows `i` in increasing order onto its prior value.
pub(crate) fn gemm_tn_acc<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    let mut p = 0;
    while p < k {
        let rows = TR.min(k - p);
        let mut j = 0;
        while j < n {
            let cols = TC.min(n - j);
            if rows == TR && cols == TC {
                let mut acc = [[S::zero(); TC]; TR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(p + r) * n + j..(p + r) * n + j + TC]);
                }
                for i in 0..m {
                    let gi: &[S; TC] = g[i * n + j..i * n + j + TC].try_into().expect("tile");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[i * k + p + r];
                        for (o, &gv) in row.iter_mut().zip(gi) {
                            *o = *o + av * gv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(p + r) * n + j..(p + r) * n + j + TC].copy_from_slice(row);
                }
            } else {
                for r in p..p + rows {
                    for c in j..j + cols {
                        let mut o = out[r * n + c];
                        for i in 0..m {
                            o = o + a[i * k + r] * g[i * n + c];
                        }
                        out[r * n + c] = o;
                    }
                }
            }
            j += cols;
        }
        p += rows;
    }
}
