//! Exponentiation of stationary velocity fields and spatial warping.
//!
//! A velocity field `V` (units: voxels) is turned into a diffeomorphic
//! deformation `phi = exp(V)` by scaling and squaring: scale the field by
//! `1/2^T`, take that as a small deformation, and square (self-compose) it
//! `T` times. Deformations are stored as displacement fields with the
//! convention `phi(p) = p + u(p)`, so the zero field is the identity.
//!
//! Everything here also exists as tape operations so the training loss can
//! differentiate through integration and warping; the plain functions below
//! share the same sampling kernel and are bit-identical to the tape path.

use crate::error::{Error, Result};
use crate::sampling::sample_displaced;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};
use crate::volume::{VectorField, Volume};

/// Number of scaling-and-squaring steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegrationConfig {
    pub steps: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        IntegrationConfig { steps: 6 }
    }
}

impl IntegrationConfig {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("IntegrationConfig", "steps must be >= 1"));
        }
        Ok(IntegrationConfig { steps })
    }
}

fn check_same_grid<T: Scalar>(
    op: &'static str,
    a: &VectorField<T>,
    b: &VectorField<T>,
) -> Result<()> {
    if a.spatial_shape() != b.spatial_shape() || a.components() != b.components() {
        return Err(Error::shape(
            op,
            format!(
                "{:?}x{} vs {:?}x{}",
                a.spatial_shape(),
                a.components(),
                b.spatial_shape(),
                b.components()
            ),
        ));
    }
    if a.components() != a.spatial_shape().len() {
        return Err(Error::shape(
            op,
            format!(
                "field must have one component per spatial axis, got {} on {:?}",
                a.components(),
                a.spatial_shape()
            ),
        ));
    }
    Ok(())
}

/// Composition of two deformations: `(phi1 . phi2)(p) = phi1(phi2(p))`.
///
/// In displacement form: `u(p) = u2(p) + u1(p + u2(p))`, with `u1` sampled by
/// linear interpolation (out-of-grid lookups clamped to the border).
pub fn compose<T: Scalar>(phi1: &VectorField<T>, phi2: &VectorField<T>) -> Result<VectorField<T>> {
    check_same_grid("compose", phi1, phi2)?;
    let spatial = phi2.spatial_shape().to_vec();
    let comps = phi2.components();
    let mut sampled = vec![T::zero(); phi2.data().len()];
    sample_displaced(phi1.data(), comps, &spatial, phi2.data(), &mut sampled);
    let out: Vec<T> = phi2
        .data()
        .iter()
        .zip(&sampled)
        .map(|(&u2, &u1)| u2 + u1)
        .collect();
    VectorField::new(spatial, comps, out)
}

/// Time-1 flow of the stationary velocity field `v` via scaling and squaring.
pub fn integrate<T: Scalar>(v: &VectorField<T>, steps: usize) -> Result<VectorField<T>> {
    if steps == 0 {
        return Err(Error::invalid("integrate", "steps must be >= 1"));
    }
    check_same_grid("integrate", v, v)?;
    let scale = T::from_f64(0.5).powi(steps as i32);
    let mut phi = VectorField::new(
        v.spatial_shape().to_vec(),
        v.components(),
        v.data().iter().map(|&x| x * scale).collect(),
    )?;
    for _ in 0..steps {
        phi = compose(&phi, &phi)?;
    }
    Ok(phi)
}

/// Resample `image` through the deformation: `out(p) = image(phi(p))`.
pub fn warp<T: Scalar>(image: &Volume<T>, phi: &VectorField<T>) -> Result<Volume<T>> {
    if image.shape() != phi.spatial_shape() || phi.components() != image.ndim() {
        return Err(Error::shape(
            "warp",
            format!(
                "image {:?} vs deformation {:?}x{}",
                image.shape(),
                phi.spatial_shape(),
                phi.components()
            ),
        ));
    }
    let mut out = vec![T::zero(); image.len()];
    sample_displaced(image.data(), 1, image.shape(), phi.data(), &mut out);
    Volume::new(image.shape().to_vec(), out)
}

// ── tape versions (differentiable) ───────────────────────────────────

/// Tape form of [`compose`]; `phi1` and `phi2` are `[D, spatial..]` tensors.
pub fn compose_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    phi1: TensorId,
    phi2: TensorId,
) -> Result<TensorId> {
    let sampled = tape.warp(phi1, phi2)?;
    tape.add(phi2, sampled)
}

/// Tape form of [`integrate`]; differentiable w.r.t. the velocity tensor.
pub fn integrate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    velocity: TensorId,
    steps: usize,
) -> Result<TensorId> {
    if steps == 0 {
        return Err(Error::invalid("integrate", "steps must be >= 1"));
    }
    let scale = T::from_f64(0.5).powi(steps as i32);
    let mut phi = tape.scale(velocity, scale);
    for _ in 0..steps {
        phi = compose_on_tape(tape, phi, phi)?;
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_field(shape: &[usize], value: &[f64]) -> VectorField<f64> {
        let nvox: usize = shape.iter().product();
        let mut data = Vec::with_capacity(nvox * value.len());
        for &v in value {
            data.extend(std::iter::repeat(v).take(nvox));
        }
        VectorField::new(shape.to_vec(), value.len(), data).unwrap()
    }

    #[test]
    fn zero_velocity_integrates_to_identity() {
        let v = VectorField::<f64>::zeros(vec![8, 8], 2);
        let phi = integrate(&v, 6).unwrap();
        assert!(phi.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_velocity_is_exact_translation() {
        let v = constant_field(&[9, 9], &[0.7, -0.3]);
        let phi = integrate(&v, 6).unwrap();
        // constant fields resample to themselves, so each squaring doubles
        // the displacement exactly, including at the border
        for &x in phi.component(0) {
            assert!((x - 0.7).abs() < 1e-12);
        }
        for &x in phi.component(1) {
            assert!((x + 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_identity_is_neutral() {
        let id = VectorField::<f64>::zeros(vec![6, 6], 2);
        let mut phi = VectorField::<f64>::zeros(vec![6, 6], 2);
        for (i, x) in phi.data_mut().iter_mut().enumerate() {
            *x = 0.01 * (i as f64).sin();
        }
        let left = compose(&id, &phi).unwrap();
        let right = compose(&phi, &id).unwrap();
        for (a, b) in left.data().iter().zip(phi.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in right.data().iter().zip(phi.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn translations_add_on_the_interior() {
        let p1 = constant_field(&[12], &[1.0]);
        let p2 = constant_field(&[12], &[2.0]);
        let c = compose(&p1, &p2).unwrap();
        for &x in &c.component(0)[..9] {
            assert!((x - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_matches_naive_per_voxel_oracle() {
        // brute-force 1D oracle with explicit interpolation arithmetic
        let n = 17usize;
        let u1: Vec<f64> = (0..n).map(|i| 0.4 * ((i as f64) * 0.7).sin()).collect();
        let u2: Vec<f64> = (0..n).map(|i| 0.5 * ((i as f64) * 0.3).cos()).collect();
        let f1 = VectorField::new(vec![n], 1, u1.clone()).unwrap();
        let f2 = VectorField::new(vec![n], 1, u2.clone()).unwrap();
        let got = compose(&f1, &f2).unwrap();

        for p in 0..n {
            let x = p as f64 + u2[p];
            let xc = x.max(0.0).min((n - 1) as f64);
            let i0 = (xc.floor() as usize).min(n - 2);
            let f = xc - i0 as f64;
            let interp = (1.0 - f) * u1[i0] + f * u1[i0 + 1];
            let expect = u2[p] + interp;
            assert!(
                (got.component(0)[p] - expect).abs() < 1e-10,
                "voxel {}: {} vs {}",
                p,
                got.component(0)[p],
                expect
            );
        }
    }

    #[test]
    fn warp_identity_and_midpoint() {
        let img = Volume::new(vec![2], vec![0.0, 10.0]).unwrap();
        let id = VectorField::<f64>::zeros(vec![2], 1);
        let same = warp(&img, &id).unwrap();
        assert_eq!(same.data(), img.data());

        let half = VectorField::new(vec![2], 1, vec![0.5, -0.5]).unwrap();
        let mid = warp(&img, &half).unwrap();
        assert!((mid.data()[0] - 5.0).abs() < 1e-12);
        assert!((mid.data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn tape_and_plain_integration_agree_bitwise() {
        let n = 11usize;
        let data: Vec<f64> = (0..2 * n * n)
            .map(|i| 0.3 * ((i as f64) * 0.13).sin())
            .collect();
        let field = VectorField::new(vec![n, n], 2, data.clone()).unwrap();
        let plain = integrate(&field, 4).unwrap();

        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(vec![2, n, n], data, false).unwrap();
        let phi = integrate_on_tape(&mut tape, v, 4).unwrap();
        assert_eq!(tape.data(phi), plain.data());
    }
}
