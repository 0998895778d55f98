use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Vectors are represented as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: [rows, cols],
            data,
        })
    }

    /// A `1 x n` row vector.
    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: [1, data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::row_vector(vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![i, cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: [rows.len(), cols],
            data,
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor {
            shape: [rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: [rows.len(), c],
            data,
        }
    }

    pub fn transpose(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let [m, k] = self.shape;
        let [k2, n] = rhs.shape;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.to_vec(),
                rhs: rhs.shape.to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: [m, n],
            data: out,
        })
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let [k, m] = self.shape;
        let [k2, n] = rhs.shape;
        if k != k2 {
            return Err(Error::Shape {
                op: "t_matmul",
                lhs: self.shape.to_vec(),
                rhs: rhs.shape.to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let brow = &rhs.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: [m, n],
            data: out,
        })
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let [m, k] = self.shape;
        let [n, k2] = rhs.shape;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: self.shape.to_vec(),
                rhs: rhs.shape.to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &rhs.data[j * k..(j + 1) * k];
                out[i * n + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(Tensor {
            shape: [m, n],
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(rhs, op)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, rhs: &Tensor) {
        debug_assert_eq!(self.shape, rhs.shape);
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Column means, `1 x cols`. Zero rows give a zero vector.
    pub fn mean_rows(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        if r > 0 {
            out.iter_mut().for_each(|o| *o /= r as f64);
        }
        Tensor {
            shape: [1, c],
            data: out,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub(crate) fn same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.to_vec(),
                rhs: rhs.shape.to_vec(),
            });
        }
        Ok(())
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, -1.0], vec![2.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[8.0, 1.0, 18.5, 1.0]);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn softmax_and_cosine() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), None);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_rows_of_empty_is_zero() {
        let t = Tensor::zeros(0, 3);
        assert_eq!(t.mean_rows().data(), &[0.0, 0.0, 0.0]);
    }
}
