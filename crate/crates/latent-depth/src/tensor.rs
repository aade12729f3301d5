//! Dense row-major tensors over f64.
//!
//! All training and verification runs at 64-bit precision so that gradient
//! audits against central finite differences are meaningful.

use serde::{Deserialize, Serialize};

/// A dense row-major tensor. Shape extents are positive; `data.len()` always
/// equals the product of the extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&e| e > 0),
            "tensor: shape extents must be positive, got {:?}",
            shape
        );
        assert_eq!(
            numel,
            data.len(),
            "tensor: shape {:?} implies {} values, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    /// A single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    /// A rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
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

    /// Extent of axis `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    /// Value of a `[1]`-shaped tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item: tensor has shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference against `other`.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_numel() {
        let t = Tensor::zeros(vec![2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic(expected = "implies 6 values")]
    fn shape_data_mismatch_rejected() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    #[should_panic(expected = "extents must be positive")]
    fn zero_extent_rejected() {
        Tensor::new(vec![2, 0], vec![]);
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(4.5).item(), 4.5);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let t = Tensor::vector(vec![0.1, -1.0 / 3.0, 1e-17, 6.02e23]);
        let s = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
    }
}
