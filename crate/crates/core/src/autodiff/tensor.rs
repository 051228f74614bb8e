//! Dense tensors used by the tape. Only the ranks the architecture needs:
//! scalars, vectors and row-major matrices.

use super::real::Real;
use super::AutodiffError;

/// Logical shape of a [`Tensor`]. Matrices are row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(_) => 1,
            Shape::Matrix(r, _) => r,
        }
    }

    pub fn cols(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(_, c) => c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::ZERO; shape.len()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Shape::Scalar,
            data: vec![v],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, AutodiffError> {
        if shape.len() != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                context: "from_vec",
                expected: shape,
                got: Shape::Vector(data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: Shape::Vector(data.len()),
            data,
        }
    }

    /// Row-major matrix from 3-component rows in `f64` (the geometry side).
    pub fn from_points(points: &[[f64; 3]]) -> Self {
        let mut data = Vec::with_capacity(points.len() * 3);
        for p in points {
            data.push(T::from_f64(p[0]));
            data.push(T::from_f64(p[1]));
            data.push(T::from_f64(p[2]));
        }
        Tensor {
            shape: Shape::Matrix(points.len(), 3),
            data,
        }
    }

    /// Destination tensor whose contents will be fully overwritten by a
    /// `beta = 0` gemm before first read.
    pub(crate) fn uninit_for_gemm(shape: Shape) -> Self {
        let len = shape.len();
        let mut data = Vec::with_capacity(len);
        // SAFETY: every element is written by the subsequent gemm/fill before
        // the tensor is read; T is a plain Copy float with no drop glue.
        unsafe { data.set_len(len) };
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Sole element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.shape, Shape::Scalar);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_val())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_accessors() {
        assert_eq!(Shape::Scalar.len(), 1);
        assert_eq!(Shape::Vector(5).len(), 5);
        assert_eq!(Shape::Matrix(3, 4).len(), 12);
        assert_eq!(Shape::Matrix(3, 4).rows(), 3);
        assert_eq!(Shape::Matrix(3, 4).cols(), 4);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f64>::from_vec(Shape::Vector(3), vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn rows_are_row_major() {
        let t = Tensor::from_vec(Shape::Matrix(2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn cast_roundtrip_exact_for_small_values() {
        let t = Tensor::<f32>::vector(vec![1.5, -0.25, 3.0]);
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }
}
