//! Dense row-major f64 tensors.
//!
//! Every op validates shapes and rejects non-finite results; the rest of the
//! crate relies on tensors being finite at all times. These raw kernels are
//! also what the tape replays, so a plain forward pass and a traced forward
//! pass produce bit-identical values.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, VsError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(VsError::InvalidArgument(format!(
                "tensor: shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A 1×n row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn randn<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor { shape, data }
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

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(VsError::InvalidArgument(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    /// Same data, different shape. Element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(VsError::InvalidArgument(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(VsError::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(VsError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.check_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| c * v).collect(),
        };
        out.check_finite("scale")?;
        Ok(out)
    }

    pub fn map_tanh(&self) -> Result<Tensor> {
        let out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.tanh()).collect(),
        };
        out.check_finite("tanh")?;
        Ok(out)
    }

    pub fn map_relu(&self) -> Result<Tensor> {
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        })
    }

    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    pub fn mean(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }

    pub fn sqnorm(&self) -> Tensor {
        Tensor::scalar(self.data.iter().map(|&v| v * v).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(VsError::InvalidArgument(format!(
                "{op}: expected rank-2 tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// self (m×k) @ other (k×n) -> (m×n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_2d("matmul")?;
        let (k2, n) = other.require_2d("matmul")?;
        if k != k2 {
            return Err(VsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let c_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        let out = Tensor {
            shape: vec![m, n],
            data: out,
        };
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// self (m×k) @ otherᵀ with other (n×k) -> (m×n).
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_2d("matmul_nt")?;
        let (n, k2) = other.require_2d("matmul_nt")?;
        if k != k2 {
            return Err(VsError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(&a, &b)| a * b).sum();
            }
        }
        let out = Tensor {
            shape: vec![m, n],
            data: out,
        };
        out.check_finite("matmul_nt")?;
        Ok(out)
    }

    /// selfᵀ @ other with self (k×m), other (k×n) -> (m×n).
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.require_2d("matmul_tn")?;
        let (k2, n) = other.require_2d("matmul_tn")?;
        if k != k2 {
            return Err(VsError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let c_row = &mut out[i * n..(i + 1) * n];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        let out = Tensor {
            shape: vec![m, n],
            data: out,
        };
        out.check_finite("matmul_tn")?;
        Ok(out)
    }

    /// self (r×k) @ w (k×c) + b (len c), bias broadcast over rows.
    pub fn affine(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut out = self.matmul(w)?;
        let c = out.cols();
        if b.shape() != [c] {
            return Err(VsError::ShapeMismatch {
                op: "affine",
                lhs: out.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        for row in out.data.chunks_mut(c) {
            for (v, &bias) in row.iter_mut().zip(&b.data) {
                *v += bias;
            }
        }
        out.check_finite("affine")?;
        Ok(out)
    }

    /// Column sums of a rank-2 tensor -> rank-1 of length cols.
    pub fn col_sum(&self) -> Result<Tensor> {
        let (r, c) = self.require_2d("col_sum")?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Ok(Tensor {
            shape: vec![c],
            data: out,
        })
    }

    /// Column means of a rank-2 tensor -> 1×cols row.
    pub fn col_mean(&self) -> Result<Tensor> {
        let (r, c) = self.require_2d("col_mean")?;
        let mut out = self.col_sum()?;
        for v in out.data.iter_mut() {
            *v /= r as f64;
        }
        out.shape = vec![1, c];
        Ok(out)
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(VsError::InvalidArgument("concat_cols: no inputs".into()));
        }
        let r = parts[0].require_2d("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.require_2d("concat_cols")?;
            if pr != r {
                return Err(VsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Ok(Tensor {
            shape: vec![r, total],
            data,
        })
    }

    /// Accumulate `other` into self elementwise (used by the backward pass).
    pub(crate) fn acc(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "acc")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&id).unwrap(), a);
    }

    #[test]
    fn sqnorm_and_mean() {
        let w = Tensor::row(vec![3.0, 4.0]);
        assert_eq!(w.sqnorm().scalar_value().unwrap(), 25.0);
        let m = Tensor::row(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m.mean().scalar_value().unwrap(), 3.0);
    }

    #[test]
    fn shape_mismatch_reports_op_and_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 3]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_rejected() {
        let a = Tensor::row(vec![1.0e308, 1.0]);
        let err = a.scale(10.0).unwrap_err();
        assert!(matches!(err, VsError::NonFinite { op: "scale" }));
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn transposed_matmuls_agree_with_plain() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![4, 3], vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0, -0.5, 1.5, 2.5, 0.25, -0.75, 1.0]).unwrap();
        // a @ bᵀ vs manual transpose
        let mut bt = Tensor::zeros(vec![3, 4]);
        for i in 0..4 {
            for j in 0..3 {
                bt.data_mut()[j * 4 + i] = b.data()[i * 3 + j];
            }
        }
        assert_eq!(a.matmul_nt(&b).unwrap(), a.matmul(&bt).unwrap());
        // aᵀ'd product
        let c = Tensor::new(vec![2, 4], (0..8).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let mut at = Tensor::zeros(vec![3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                at.data_mut()[j * 2 + i] = a.data()[i * 3 + j];
            }
        }
        assert_eq!(a.matmul_tn(&c).unwrap(), at.matmul(&c).unwrap());
    }

    #[test]
    fn concat_cols_layout() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 7.0]).unwrap();
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
    }
}
