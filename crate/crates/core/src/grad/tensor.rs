use num_complex::Complex64;

use crate::error::{Error, Result};

/// Dense row-major `f64` array. Complex tensors carry a trailing axis of
/// length 2 holding `(re, im)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: "shape must have at least one dimension".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty(), "tensor shape must be non-empty");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Single-channel image plane `[1, h, w]`.
    pub fn from_plane(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(h * w, data.len(), "plane size mismatch");
        Self {
            shape: vec![1, h, w],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_complex(&self) -> bool {
        self.shape.last() == Some(&2) && self.shape.len() >= 2
    }

    pub(crate) fn to_complex_vec(&self) -> Vec<Complex64> {
        self.data
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect()
    }

    pub(crate) fn from_complex_vec(shape: Vec<usize>, values: &[Complex64]) -> Self {
        let mut data = Vec::with_capacity(values.len() * 2);
        for v in values {
            data.push(v.re);
            data.push(v.im);
        }
        Self { shape, data }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
