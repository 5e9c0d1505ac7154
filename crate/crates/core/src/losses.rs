//! Registration objective: local cross-correlation dissimilarity plus
//! deformation-gradient smoothness plus weight decay.
//!
//! The similarity term is the mean over voxels of the squared local
//! normalized cross-correlation inside a sliding window; the training loss
//! negates it, so perfectly matched images score -1. Window statistics near
//! the border use zero padding with a constant window size, the usual
//! convention for this loss.

use crate::diffeo::{integrate_on_tape, IntegrationConfig};
use crate::error::{Error, Result};
use crate::network::{stack_pair, BackboneConfig, WeightSet};
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tape, TensorId};
use crate::volume::Volume;

/// Loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Window extent per dimension for the local cross-correlation; odd.
    pub lcc_window: usize,
    /// Weight of the smoothness regularizer.
    pub lambda_smooth: f64,
    /// Weight of the L2 penalty on network weights and biases.
    pub weight_decay: f64,
    /// Guard for the variance-product denominator of the correlation.
    pub epsilon_var: f64,
    /// Regularize the integrated deformation instead of the raw velocity.
    pub regularize_deformation: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lcc_window: 9,
            lambda_smooth: 0.1,
            weight_decay: 1e-7,
            epsilon_var: 1e-5,
            regularize_deformation: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lcc_window == 0 || self.lcc_window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "lcc_window must be odd and positive, got {}",
                self.lcc_window
            )));
        }
        if self.lambda_smooth < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.epsilon_var <= 0.0 {
            return Err(Error::InvalidConfig("epsilon_var must be positive".into()));
        }
        Ok(())
    }
}

/// Tape form of the local cross-correlation similarity.
///
/// `a` and `b` are `[1, spatial..]` tensors of equal shape; the result is a
/// scalar in `[0, 1]`.
pub fn lcc_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    a: TensorId,
    b: TensorId,
    window: usize,
    epsilon_var: T,
) -> Result<TensorId> {
    let shape = tape.shape(a).to_vec();
    if shape != tape.shape(b) {
        return Err(Error::shape(
            "lcc",
            format!("{:?} vs {:?}", shape, tape.shape(b)),
        ));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid("lcc", "window must be odd and positive"));
    }
    let dim = shape.len() - 1;
    if shape[0] != 1 {
        return Err(Error::shape("lcc", "expected a single-channel volume"));
    }
    if shape[1..].iter().any(|&e| e < window) {
        return Err(Error::invalid(
            "lcc",
            format!("window {} exceeds volume extents {:?}", window, &shape[1..]),
        ));
    }

    // box filter as a constant ones kernel; window means divide by the
    // number of in-bounds voxels so border windows stay exact
    let k_elems = window.pow(dim as u32);
    let mut kshape = vec![1usize, 1];
    kshape.extend(std::iter::repeat(window).take(dim));
    let ones_kernel = tape.leaf(kshape, vec![T::one(); k_elems], false)?;
    let zero_bias = tape.leaf(vec![1], vec![T::zero()], false)?;
    let nvox: usize = shape[1..].iter().product();
    let ones_img = tape.leaf(shape.clone(), vec![T::one(); nvox], false)?;
    let count = tape.conv(ones_img, ones_kernel, zero_bias, 1, Padding::Same)?;
    let inv_count = tape.div_guard(ones_img, count, T::from_f64(0.5))?;

    let boxed = |tape: &mut Tape<T>, x: TensorId| -> Result<TensorId> {
        let s = tape.conv(x, ones_kernel, zero_bias, 1, Padding::Same)?;
        tape.mul(s, inv_count)
    };

    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let mean_a = boxed(tape, a)?;
    let mean_b = boxed(tape, b)?;
    let mean_aa = boxed(tape, aa)?;
    let mean_bb = boxed(tape, bb)?;
    let mean_ab = boxed(tape, ab)?;

    // cov = E[ab] - E[a]E[b]; var = E[x^2] - E[x]^2
    let ma_mb = tape.mul(mean_a, mean_b)?;
    let cov = tape.sub(mean_ab, ma_mb)?;
    let ma2 = tape.mul(mean_a, mean_a)?;
    let var_a = tape.sub(mean_aa, ma2)?;
    let mb2 = tape.mul(mean_b, mean_b)?;
    let var_b = tape.sub(mean_bb, mb2)?;

    let cov2 = tape.mul(cov, cov)?;
    let var_prod = tape.mul(var_a, var_b)?;
    let cc = tape.div_guard(cov2, var_prod, epsilon_var)?;
    Ok(tape.mean_all(cc))
}

/// Mean over voxels of the squared local normalized cross-correlation.
pub fn lcc<T: Scalar>(a: &Volume<T>, b: &Volume<T>, window: usize) -> Result<T> {
    lcc_with_guard(a, b, window, T::from_f64(LossConfig::default().epsilon_var))
}

pub fn lcc_with_guard<T: Scalar>(
    a: &Volume<T>,
    b: &Volume<T>,
    window: usize,
    epsilon_var: T,
) -> Result<T> {
    let mut tape = Tape::new();
    let mut shape = vec![1usize];
    shape.extend_from_slice(a.shape());
    let ta = tape.leaf(shape.clone(), a.data().to_vec(), false)?;
    let mut shape_b = vec![1usize];
    shape_b.extend_from_slice(b.shape());
    let tb = tape.leaf(shape_b, b.data().to_vec(), false)?;
    let out = lcc_on_tape(&mut tape, ta, tb, window, epsilon_var)?;
    Ok(tape.scalar_value(out))
}

/// Mean squared forward-difference gradient magnitude of a field, over all
/// components and directions.
pub fn smoothness<T: Scalar>(field: &crate::volume::VectorField<T>) -> T {
    let mut tape = Tape::new();
    let mut shape = vec![field.components()];
    shape.extend_from_slice(field.spatial_shape());
    let id = tape
        .leaf(shape, field.data().to_vec(), false)
        .expect("field data length matches its shape");
    let out = tape.grad_sq_mean(id).expect("field has spatial axes");
    tape.scalar_value(out)
}

/// Everything the training step needs from one loss evaluation.
pub struct LossGraph {
    /// Scalar loss node.
    pub loss: TensorId,
    /// Parameter leaf ids in weight-set order.
    pub weight_ids: Vec<TensorId>,
    /// Predicted velocity node.
    pub velocity: TensorId,
    /// Similarity term (the lcc value, before negation).
    pub lcc_value: f64,
}

/// Build the full registration objective on a tape:
/// `-lcc(fixed, moving . exp(v)) + lambda * smoothness + decay * |theta|^2`.
pub fn total_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &BackboneConfig,
    moving: &Volume<T>,
    fixed: &Volume<T>,
    weights: &WeightSet<T>,
    loss_cfg: &LossConfig,
    integration: &IntegrationConfig,
    requires_grad: bool,
) -> Result<LossGraph> {
    loss_cfg.validate()?;
    let (shape, data) = stack_pair(moving, fixed)?;
    let input = tape.leaf(shape, data, false)?;
    let (velocity, weight_ids) =
        crate::network::forward_with_weights(tape, config, input, weights, requires_grad)?;
    let graph = loss_from_velocity(
        tape,
        moving,
        fixed,
        velocity,
        &weight_ids,
        loss_cfg,
        integration,
    )?;
    Ok(LossGraph {
        weight_ids,
        ..graph
    })
}

/// Loss terms downstream of an already-computed velocity node. Separated so
/// gradients w.r.t. the velocity itself can be checked directly.
pub fn loss_from_velocity<T: Scalar>(
    tape: &mut Tape<T>,
    moving: &Volume<T>,
    fixed: &Volume<T>,
    velocity: TensorId,
    weight_ids: &[TensorId],
    loss_cfg: &LossConfig,
    integration: &IntegrationConfig,
) -> Result<LossGraph> {
    loss_cfg.validate()?;
    let phi = integrate_on_tape(tape, velocity, integration.steps)?;

    let mut img_shape = vec![1usize];
    img_shape.extend_from_slice(moving.shape());
    let moving_id = tape.leaf(img_shape.clone(), moving.data().to_vec(), false)?;
    let fixed_id = tape.leaf(img_shape, fixed.data().to_vec(), false)?;
    let warped = tape.warp(moving_id, phi)?;

    let sim = lcc_on_tape(
        tape,
        fixed_id,
        warped,
        loss_cfg.lcc_window,
        T::from_f64(loss_cfg.epsilon_var),
    )?;
    let mut loss = tape.scale(sim, -T::one());

    if loss_cfg.lambda_smooth > 0.0 {
        let reg_target = if loss_cfg.regularize_deformation {
            phi
        } else {
            velocity
        };
        let smooth = tape.grad_sq_mean(reg_target)?;
        let weighted = tape.scale(smooth, T::from_f64(loss_cfg.lambda_smooth));
        loss = tape.add(loss, weighted)?;
    }
    if loss_cfg.weight_decay > 0.0 && !weight_ids.is_empty() {
        let mut decay_sum: Option<TensorId> = None;
        for &w in weight_ids {
            let ss = tape.sum_squares(w);
            decay_sum = Some(match decay_sum {
                None => ss,
                Some(acc) => tape.add(acc, ss)?,
            });
        }
        let weighted = tape.scale(decay_sum.unwrap(), T::from_f64(loss_cfg.weight_decay));
        loss = tape.add(loss, weighted)?;
    }

    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "total loss",
            iteration: None,
        });
    }
    Ok(LossGraph {
        loss,
        weight_ids: weight_ids.to_vec(),
        velocity,
        lcc_value: tape.scalar_value(sim).as_f64(),
    })
}

/// Plain scalar value of the full objective (no gradients).
pub fn total_loss<T: Scalar>(
    config: &BackboneConfig,
    moving: &Volume<T>,
    fixed: &Volume<T>,
    weights: &WeightSet<T>,
    loss_cfg: &LossConfig,
    integration: &IntegrationConfig,
) -> Result<T> {
    let mut tape = Tape::new();
    let graph = total_loss_on_tape(
        &mut tape,
        config,
        moving,
        fixed,
        weights,
        loss_cfg,
        integration,
        false,
    )?;
    Ok(tape.scalar_value(graph.loss))
}

/// Objective for an externally supplied velocity field (no network).
pub fn loss_for_velocity<T: Scalar>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    velocity: &crate::volume::VectorField<T>,
    loss_cfg: &LossConfig,
    integration: &IntegrationConfig,
) -> Result<T> {
    let mut tape = Tape::new();
    let mut shape = vec![velocity.components()];
    shape.extend_from_slice(velocity.spatial_shape());
    let v = tape.leaf(shape, velocity.data().to_vec(), false)?;
    let graph = loss_from_velocity(&mut tape, moving, fixed, v, &[], loss_cfg, integration)?;
    Ok(tape.scalar_value(graph.loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VectorField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_volume(shape: Vec<usize>, seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Volume::new(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn lcc_self_correlation_is_one() {
        let img = noise_volume(vec![32, 32], 5);
        let v = lcc(&img, &img, 9).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "lcc(I, I) = {}", v);
    }

    #[test]
    fn lcc_is_invariant_to_local_affine_intensity() {
        let img = noise_volume(vec![32, 32], 6);
        let scaled = Volume::new(
            vec![32, 32],
            img.data().iter().map(|&x| 2.0 * x + 0.1).collect(),
        )
        .unwrap();
        let v = lcc(&img, &scaled, 9).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "lcc(I, 2I+0.1) = {}", v);
    }

    #[test]
    fn lcc_of_independent_noise_is_small() {
        let mut worst: f64 = 0.0;
        for trial in 0..20 {
            let a = noise_volume(vec![64, 64], 100 + trial);
            let b = noise_volume(vec![64, 64], 200 + trial);
            worst = worst.max(lcc(&a, &b, 9).unwrap());
        }
        assert!(worst < 0.1, "worst lcc over 20 trials: {}", worst);
    }

    #[test]
    fn lcc_window_larger_than_volume_errors() {
        let img = noise_volume(vec![8, 8], 7);
        assert!(lcc(&img, &img, 9).is_err());
    }

    #[test]
    fn lcc_symmetry() {
        let a = noise_volume(vec![24, 24], 8);
        let b = noise_volume(vec![24, 24], 9);
        let ab = lcc(&a, &b, 5).unwrap();
        let ba = lcc(&b, &a, 5).unwrap();
        assert!((ab - ba).abs() < 1e-10);
    }

    #[test]
    fn smoothness_constant_field_is_zero() {
        let mut f = VectorField::<f64>::zeros(vec![10, 10], 2);
        f.data_mut().fill(3.25);
        assert_eq!(smoothness(&f), 0.0);
    }

    #[test]
    fn smoothness_unit_ramp_is_one() {
        let f = VectorField::new(vec![8], 1, (0..8).map(|i| i as f64).collect()).unwrap();
        assert!((smoothness(&f) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothness_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (9usize, 7usize);
        let data: Vec<f64> = (0..2 * h * w).map(|_| rng.gen::<f64>()).collect();
        let f = VectorField::new(vec![h, w], 2, data.clone()).unwrap();

        let mut sum = 0.0;
        let mut count = 0usize;
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let at = |yy: usize, xx: usize| data[c * h * w + yy * w + xx];
                    if y + 1 < h {
                        sum += (at(y + 1, x) - at(y, x)).powi(2);
                        count += 1;
                    }
                    if x + 1 < w {
                        sum += (at(y, x + 1) - at(y, x)).powi(2);
                        count += 1;
                    }
                }
            }
        }
        let expect = sum / count as f64;
        assert!((smoothness(&f) - expect).abs() < 1e-10);
    }

    #[test]
    fn smoothness_scales_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f64> = (0..128).map(|_| rng.gen::<f64>()).collect();
        let f = VectorField::new(vec![8, 8], 2, data.clone()).unwrap();
        let scaled =
            VectorField::new(vec![8, 8], 2, data.iter().map(|&x| 3.0 * x).collect()).unwrap();
        assert!((smoothness(&scaled) - 9.0 * smoothness(&f)).abs() < 1e-10);
    }

    #[test]
    fn matched_pair_with_zero_velocity_scores_minus_one() {
        let img = noise_volume(vec![16, 16], 13);
        let v = VectorField::<f64>::zeros(vec![16, 16], 2);
        let cfg = LossConfig {
            weight_decay: 0.0,
            ..LossConfig::default()
        };
        let loss = loss_for_velocity(&img, &img, &v, &cfg, &IntegrationConfig::default()).unwrap();
        assert!((loss + 1.0).abs() < 1e-6, "loss = {}", loss);
    }

    #[test]
    fn loss_reduces_to_similarity_without_regularizers() {
        let moving = noise_volume(vec![16, 16], 14);
        let fixed = noise_volume(vec![16, 16], 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let vdata: Vec<f64> = (0..512).map(|_| rng.gen::<f64>() - 0.5).collect();
        let v = VectorField::new(vec![16, 16], 2, vdata).unwrap();
        let cfg = LossConfig {
            lambda_smooth: 0.0,
            weight_decay: 0.0,
            ..LossConfig::default()
        };
        let ic = IntegrationConfig::default();
        let loss = loss_for_velocity(&moving, &fixed, &v, &cfg, &ic).unwrap();

        let phi = crate::diffeo::integrate(&v, ic.steps).unwrap();
        let warped = crate::diffeo::warp(&moving, &phi).unwrap();
        let expect = -lcc(&fixed, &warped, cfg.lcc_window).unwrap();
        assert!((loss - expect).abs() < 1e-12);
    }
}
