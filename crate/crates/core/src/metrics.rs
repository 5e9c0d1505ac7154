//! Evaluation measures: Dice overlap, Jacobian-determinant fold percentage,
//! and Pearson correlation.

use crate::diffeo::warp;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{strides, VectorField, Volume};

/// Binary mask for one label; values are 0 or 1.
pub type LabelMask<T> = Volume<T>;

/// Dice overlap `2|A and B| / (|A| + |B|)`; two empty masks count as a
/// perfect match.
pub fn dice<T: Scalar>(a: &LabelMask<T>, b: &LabelMask<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "dice",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let half = T::from_f64(0.5);
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let xa = x > half;
        let yb = y > half;
        if xa && yb {
            inter += 1;
        }
        if xa {
            total += 1;
        }
        if yb {
            total += 1;
        }
    }
    if total == 0 {
        return Ok(T::one());
    }
    Ok(T::from_f64(2.0 * inter as f64 / total as f64))
}

/// Propagate a mask through a deformation: linear interpolation followed by
/// thresholding at 0.5.
pub fn warp_mask<T: Scalar>(mask: &LabelMask<T>, phi: &VectorField<T>) -> Result<LabelMask<T>> {
    let warped = warp(mask, phi)?;
    let half = T::from_f64(0.5);
    let data: Vec<T> = warped
        .data()
        .iter()
        .map(|&v| if v > half { T::one() } else { T::zero() })
        .collect();
    Volume::new(mask.shape().to_vec(), data)
}

/// Per-voxel determinant of the forward-difference Jacobian of the mapping
/// `p + u(p)`. One-sided (backward) differences at the upper boundary.
pub fn jacobian_det<T: Scalar>(phi: &VectorField<T>) -> Result<Volume<T>> {
    let dim = phi.spatial_shape().len();
    if phi.components() != dim {
        return Err(Error::shape(
            "jacobian_det",
            format!(
                "{} components on a {}-dimensional grid",
                phi.components(),
                dim
            ),
        ));
    }
    let spatial = phi.spatial_shape().to_vec();
    let nvox = phi.voxels();
    let st = strides(&spatial);
    let mut out = vec![T::zero(); nvox];
    let mut p = vec![0usize; dim];
    let mut jac = [[T::zero(); 3]; 3];
    for v in 0..nvox {
        // J[c][d] = d(p_c + u_c)/d x_d = delta(c, d) + du_c/dx_d
        for c in 0..dim {
            let comp = phi.component(c);
            for d in 0..dim {
                let du = if p[d] + 1 < spatial[d] {
                    comp[v + st[d]] - comp[v]
                } else if spatial[d] >= 2 {
                    comp[v] - comp[v - st[d]]
                } else {
                    T::zero()
                };
                jac[c][d] = du + if c == d { T::one() } else { T::zero() };
            }
        }
        out[v] = match dim {
            1 => jac[0][0],
            2 => jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0],
            3 => {
                jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                    - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                    + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
            }
            _ => {
                return Err(Error::invalid(
                    "jacobian_det",
                    "only 1, 2 or 3 dimensional fields are supported",
                ))
            }
        };
        for d in (0..dim).rev() {
            p[d] += 1;
            if p[d] < spatial[d] {
                break;
            }
            p[d] = 0;
        }
    }
    Volume::new(spatial, out)
}

/// Percentage of voxels whose Jacobian determinant is strictly negative.
pub fn fold_percentage<T: Scalar>(phi: &VectorField<T>) -> Result<f64> {
    let dets = jacobian_det(phi)?;
    let folds = dets.data().iter().filter(|&&d| d < T::zero()).count();
    Ok(100.0 * folds as f64 / dets.len() as f64)
}

/// Sample Pearson correlation coefficient.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "pearson",
            format!("{} vs {} samples", x.len(), y.len()),
        ));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate {
            op: "pearson",
            detail: "need at least two samples".into(),
        });
    }
    let n = T::from_f64(x.len() as f64);
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::Degenerate {
            op: "pearson",
            detail: "constant series has no defined correlation".into(),
        });
    }
    Ok(sxy / (sxx * syy).sqrt())
}
