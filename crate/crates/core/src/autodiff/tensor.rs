use crate::scalar::Scalar;

use super::AutodiffError;

/// Dense row-major tensor.
///
/// Only rank 0, 1 and 2 are exercised by the models in this crate, but the
/// storage itself is rank-agnostic. Constructors reject NaN and infinities.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// element count matches the shape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn vector(values: Vec<T>) -> Result<Self, AutodiffError> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    /// Builds an `r×c` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AutodiffError::Shape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Converts every element from `f64`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, AutodiffError> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading dimension; 1 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing dimension of a matrix; 1 for vectors and scalars.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, AutodiffError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        Ok(Self::from_parts(shape, self.data.clone()))
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(AutodiffError::Shape {
                op,
                detail: format!("expected a matrix, got shape {other:?}"),
            }),
        }
    }

    pub fn transpose(&self) -> Result<Self, AutodiffError> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, AutodiffError> {
        let (n, d) = self.matrix_dims("matmul")?;
        let (d2, h) = other.matrix_dims("matmul")?;
        if d != d2 {
            return Err(AutodiffError::Shape {
                op: "matmul",
                detail: format!("inner dimensions {d} and {d2} differ"),
            });
        }
        let mut out = vec![T::zero(); n * h];
        for i in 0..n {
            let out_row = &mut out[i * h..(i + 1) * h];
            for k in 0..d {
                let a = self.data[i * d + k];
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[k * h..(k + 1) * h];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(vec![n, h], out))
    }

    /// Adds `bias` (length `h`) to every row of an `n×h` matrix.
    pub fn add_bias(&self, bias: &Self) -> Result<Self, AutodiffError> {
        let (n, h) = self.matrix_dims("add_bias")?;
        if bias.shape() != [h] {
            return Err(AutodiffError::Shape {
                op: "add_bias",
                detail: format!("bias shape {:?} does not match width {h}", bias.shape()),
            });
        }
        let mut out = self.data.clone();
        for i in 0..n {
            for (o, &b) in out[i * h..(i + 1) * h].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Self::from_parts(vec![n, h], out))
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(stable_sigmoid)
    }

    /// Column-wise concatenation of `n×p` and `n×q` matrices.
    pub fn concat_cols(&self, other: &Self) -> Result<Self, AutodiffError> {
        let (n, p) = self.matrix_dims("concat")?;
        let (n2, q) = other.matrix_dims("concat")?;
        if n != n2 {
            return Err(AutodiffError::Shape {
                op: "concat",
                detail: format!("leading dimensions {n} and {n2} differ"),
            });
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&self.data[i * p..(i + 1) * p]);
            out.extend_from_slice(&other.data[i * q..(i + 1) * q]);
        }
        Ok(Self::from_parts(vec![n, p + q], out))
    }

    /// Inverse of [`Tensor::concat_cols`]: first `p` columns, then the rest.
    pub fn split_cols(&self, p: usize) -> Result<(Self, Self), AutodiffError> {
        let (n, w) = self.matrix_dims("split")?;
        if p > w {
            return Err(AutodiffError::Shape {
                op: "split",
                detail: format!("split point {p} beyond width {w}"),
            });
        }
        let q = w - p;
        let mut left = Vec::with_capacity(n * p);
        let mut right = Vec::with_capacity(n * q);
        for i in 0..n {
            let row = &self.data[i * w..(i + 1) * w];
            left.extend_from_slice(&row[..p]);
            right.extend_from_slice(&row[p..]);
        }
        Ok((
            Self::from_parts(vec![n, p], left),
            Self::from_parts(vec![n, q], right),
        ))
    }

    /// Index of the largest entry in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// `1 / (1 + e^-x)` evaluated without overflowing `exp` for large `|x|`.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
