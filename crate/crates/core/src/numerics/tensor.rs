use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Dense row-major `f32` array.
///
/// Every extent is positive and `data.len()` equals the product of the
/// extents. Constructors reject non-finite values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "dims {:?} hold {} values, got {}",
                dims,
                numel,
                data.len()
            ));
        }
        let t = Tensor {
            dims: dims.to_vec(),
            data,
        };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// shape invariant; used by kernels whose outputs are checked later.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        assert!(
            check_dims(dims).is_ok(),
            "tensor extents must be positive: {dims:?}"
        );
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// 2-D identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        check_dims(dims)?;
        if dims.iter().product::<usize>() != self.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.dims, dims));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{context}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    /// `self += factor * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f32) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!(
                "add_scaled: {:?} vs {:?}",
                self.dims,
                other.dims
            ));
        }
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += factor * s;
        }
        Ok(())
    }

    pub(crate) fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += s;
        }
    }

    /// `(channels, height, width)` of a 3-D tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected a [c, h, w] tensor, got {:?}", self.dims)),
        }
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn rc(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected a 2-D tensor, got {:?}", self.dims)),
        }
    }

    /// Max absolute difference divided by the max absolute entry of `reference`.
    pub fn relative_error(&self, reference: &Tensor) -> Result<f32> {
        if self.dims != reference.dims {
            return Err(shape_err!(
                "relative_error: {:?} vs {:?}",
                self.dims,
                reference.dims
            ));
        }
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        let scale = reference.max_abs().max(f32::MIN_POSITIVE);
        Ok(diff / scale)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.dims)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, " {head:?}")?;
        if self.data.len() > PREVIEW {
            write!(f, " ..")?;
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(shape_err!("extents must be non-empty and positive: {:?}", dims));
    }
    Ok(())
}
