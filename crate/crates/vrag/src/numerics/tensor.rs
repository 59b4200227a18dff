use crate::error::{Error, Result};

/// Dense f64 tensor with row-major storage.
///
/// Scalars are rank 0 (empty shape, one element). Invariants: the number of
/// stored values equals the product of the shape (empty product is 1), and
/// constructors reject non-finite values, so a tensor built through this
/// API never holds a NaN or infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("tensor holds a non-finite value"));
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        assert!(v.is_finite(), "scalar must be finite");
        Tensor {
            shape: vec![],
            values: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        assert!(
            values.iter().all(|v| v.is_finite()),
            "vector must be finite"
        );
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The single element of a rank-0 tensor.
    pub fn as_scalar(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> Result<&[f64]> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "expected matrix, got shape {:?}",
                self.shape
            )));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        if i >= rows {
            return Err(Error::invalid(format!("row {} out of {}", i, rows)));
        }
        Ok(&self.values[i * cols..(i + 1) * cols])
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero_with_one_element() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.as_scalar().unwrap(), 3.5);
        assert!(Tensor::vector(vec![3.5]).as_scalar().is_err());
    }

    #[test]
    fn row_indexes_row_major_storage() {
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.row(1).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(m.row(2).is_err());
    }
}
