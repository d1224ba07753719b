//! Dense row-major f64 tensor.

use super::NdError;

/// Dense real array with an explicit shape. Data is row-major and always
/// `f64`; gradient checks at the tolerances used in this crate are not
/// feasible in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NdError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NdError::ZeroDim(shape.to_vec()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NdError::ShapeData {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-d tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NdError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(NdError::EmptySequence);
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NdError::DimMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self, NdError> {
        let n = data.len();
        Tensor::new(&[n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows and columns of a 2-d tensor; 1-d tensors are treated as a single
    /// row, which is the layout every row-wise op in this crate assumes.
    pub fn dims2(&self) -> Result<(usize, usize), NdError> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(NdError::BadShape {
                op: "dims2",
                expect: "a 1-d or 2-d tensor",
                got: self.shape.clone(),
            }),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2().expect("get2 on non-matrix");
        self.data[r * cols + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let (_, cols) = self.dims2().expect("set2 on non-matrix");
        self.data[r * cols + c] = v;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, NdError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NdError> {
        if self.shape != other.shape {
            return Err(NdError::DimMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<(), NdError> {
        if self.shape != other.shape {
            return Err(NdError::DimMismatch {
                op: "add_scaled",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Standard matrix product for 2-d tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NdError> {
        let (r, k) = self.dims2()?;
        let (k2, c) = other.dims2()?;
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(NdError::BadShape {
                op: "matmul",
                expect: "2-d operands",
                got: if self.shape.len() != 2 {
                    self.shape.clone()
                } else {
                    other.shape.clone()
                },
            });
        }
        if k != k2 {
            return Err(NdError::DimMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; r * c];
        // i-k-j order keeps the inner loop contiguous in both operands.
        for i in 0..r {
            for kk in 0..k {
                let a = self.data[i * k + kk];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[kk * c..(kk + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += a * brow[j];
                }
            }
        }
        Tensor::new(&[r, c], out)
    }

    pub fn transpose2(&self) -> Result<Tensor, NdError> {
        if self.shape.len() != 2 {
            return Err(NdError::BadShape {
                op: "transpose2",
                expect: "a 2-d tensor",
                got: self.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], data)
    }
}
