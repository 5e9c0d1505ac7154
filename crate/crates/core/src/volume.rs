//! Plain dense containers for images and vector fields on a regular grid.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense scalar image on a regular D-dimensional grid, D in {1, 2, 3}.
///
/// Intensities are expected (not enforced) to live in [0, 1] for
/// registration inputs; arbitrary values are fine for intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Volume::new",
                format!("shape {:?} implies {} values, got {}", shape, n, data.len()),
            ));
        }
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid(
                "Volume::new",
                format!("extents must be positive, got {:?}", shape),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            // odometer increment, last axis fastest
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn min_max(&self) -> (T, T) {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element precision (used when file precision differs from the
    /// requested compute precision).
    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Dense D-component field on the grid, one displacement vector per voxel.
///
/// Layout is component-major: `data[ c * nvox + voxel ]`, voxel indices in
/// row-major order over the spatial shape. Units are voxels, displacement
/// convention `phi(p) = p + u(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField<T: Scalar> {
    spatial_shape: Vec<usize>,
    components: usize,
    data: Vec<T>,
}

impl<T: Scalar> VectorField<T> {
    pub fn new(spatial_shape: Vec<usize>, components: usize, data: Vec<T>) -> Result<Self> {
        let nvox: usize = spatial_shape.iter().product();
        if nvox * components != data.len() {
            return Err(Error::shape(
                "VectorField::new",
                format!(
                    "{} components on {:?} implies {} values, got {}",
                    components,
                    spatial_shape,
                    nvox * components,
                    data.len()
                ),
            ));
        }
        if spatial_shape.is_empty() || spatial_shape.iter().any(|&e| e == 0) || components == 0 {
            return Err(Error::invalid(
                "VectorField::new",
                format!("bad shape {:?} x {}", spatial_shape, components),
            ));
        }
        Ok(Self {
            spatial_shape,
            components,
            data,
        })
    }

    pub fn zeros(spatial_shape: Vec<usize>, components: usize) -> Self {
        let n: usize = spatial_shape.iter().product::<usize>() * components;
        Self {
            spatial_shape,
            components,
            data: vec![T::zero(); n],
        }
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.spatial_shape
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn voxels(&self) -> usize {
        self.spatial_shape.iter().product()
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

    /// Component `c` as a flat voxel-ordered slice.
    pub fn component(&self, comp: usize) -> &[T] {
        let n = self.voxels();
        &self.data[comp * n..(comp + 1) * n]
    }

    pub fn component_mut(&mut self, comp: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[comp * n..(comp + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> VectorField<U> {
        VectorField {
            spatial_shape: self.spatial_shape.clone(),
            components: self.components,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Row-major strides for a shape (last axis contiguous).
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_rejects_length_mismatch() {
        assert!(Volume::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Volume::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn field_component_layout() {
        let f = VectorField::<f64>::new(vec![2, 2], 2, (0..8).map(|i| i as f64).collect()).unwrap();
        assert_eq!(f.component(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(f.component(1), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[4, 5, 6]), vec![30, 6, 1]);
        assert_eq!(strides(&[7]), vec![1]);
    }
}
