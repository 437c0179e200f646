use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use super::RuntimeError;

/// Element type of the runtime: f32 for training, f64 for gradient checks.
pub trait Scalar:
    Float + Default + Debug + Sum + Send + Sync + std::ops::AddAssign + std::ops::SubAssign + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Dense row-major array, NCHW or (N, F).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self, RuntimeError> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(RuntimeError::ShapeMismatch(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: (0..dims.iter().product()).map(f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn nchw(&self) -> Result<[usize; 4], RuntimeError> {
        match self.dims[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(RuntimeError::ShapeMismatch(format!(
                "expected NCHW, got {:?}",
                self.dims
            ))),
        }
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self, RuntimeError> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(RuntimeError::ShapeMismatch(format!(
                "cannot reshape {:?} to {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, RuntimeError> {
        if self.dims != other.dims {
            return Err(RuntimeError::ShapeMismatch(format!(
                "add {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a + *b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), RuntimeError> {
        if self.dims != other.dims {
            return Err(RuntimeError::ShapeMismatch(format!(
                "accumulate {:?} into {:?}",
                other.dims, self.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Samples `[start, start + count)` along the batch dimension.
    pub fn batch_slice(&self, start: usize, count: usize) -> Self {
        let per: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = count;
        Tensor {
            dims,
            data: self.data[start * per..(start + count) * per].to_vec(),
        }
    }

    /// Gathers the listed samples into a new batch.
    pub fn gather_batch(&self, indices: &[usize]) -> Self {
        let per: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor { dims, data }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.batch(), 2);
        assert!(t.nchw().is_err());
    }

    #[test]
    fn batch_gather() {
        let t = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64);
        assert_eq!(t.gather_batch(&[2, 0]).data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(t.batch_slice(1, 1).data(), &[2.0, 3.0]);
    }
}
