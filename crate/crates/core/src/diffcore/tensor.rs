use std::fmt;
use std::sync::Arc;

/// Index of a node on a [`Tape`](super::Tape).
pub type NodeId = usize;

/// Dense row-major tensor of 64-bit floats.
///
/// Storage is shared (`Arc`), so clones are cheap; mutation copies on write
/// and detaches the tensor from any tape it was recorded on.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    /// `(tape id, node id)` when this tensor is the output of a recorded op.
    pub(crate) origin: Option<(u64, NodeId)>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    ///
    /// Panics if the shape is empty, has a zero dimension, or does not match
    /// the data length; those are programming errors, not runtime inputs.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert!(!shape.is_empty(), "tensor shape must be non-empty");
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} implies {numel} elements, data has {}",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            origin: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(&[data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar-shaped tensor. Panics on non-scalars.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on non-scalar tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Rows of a rank-2 tensor. Panics if the tensor is not rank 2.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor. Panics if the tensor is not rank 2.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    /// Element at a multi-index (row-major). Panics on rank or bounds errors.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub(crate) fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(
            index.len(),
            self.shape.len(),
            "index rank {} vs tensor rank {}",
            index.len(),
            self.shape.len()
        );
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for shape {:?}", self.shape);
            flat = flat * d + i;
        }
        flat
    }

    /// Copy of this tensor with no tape association.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            origin: None,
        }
    }

    /// Mutable view of the data. Copies if the storage is shared and detaches
    /// the tensor from any tape, since its value no longer matches the record.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.origin = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn with_origin(mut self, tape_id: u64, node: NodeId) -> Tensor {
        self.origin = Some((tape_id, node));
        self
    }
}

/// Value equality: shape and data, ignoring tape association.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.numel() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{}, {}, .. {} elems]",
                self.shape,
                self.data[0],
                self.data[1],
                self.numel()
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_is_enforced() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.at(&[1, 2]), 6.0);
    }

    #[test]
    #[should_panic]
    fn mismatched_data_length_panics() {
        let _ = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    #[should_panic]
    fn zero_dimension_panics() {
        let _ = Tensor::new(&[0, 3], vec![]);
    }

    #[test]
    fn mutation_detaches_and_does_not_alias() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[9.0, 2.0]);
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor>();
    }
}
