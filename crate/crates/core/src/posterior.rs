//! Posterior predictive over velocity fields from weight snapshots.
//!
//! Every snapshot kept after burn-in predicts one velocity field for the
//! input pair. Snapshots with better (more negative) validation losses get
//! larger weights; the weighted per-voxel mean is the registration estimate
//! and the weighted per-voxel variance feeds the uncertainty map
//! `H = 1/2 log(2 pi Sigma)`.

use crate::diffeo::{integrate, warp, IntegrationConfig};
use crate::error::{Error, Result};
use crate::network::{forward, BackboneConfig};
use crate::optimizer::SnapshotStore;
use crate::scalar::Scalar;
use crate::volume::{VectorField, Volume};

/// How snapshot validation losses become aggregation weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingMode {
    /// `w = max(-val_loss, eps)`; the training loss is negative once the
    /// similarity term dominates, so lower loss means larger weight.
    NegLoss,
    /// `w = softmax(-val_loss)`, a smoother alternative.
    SoftmaxNegLoss,
}

/// Aggregation and uncertainty-map parameters.
#[derive(Debug, Clone)]
pub struct PosteriorConfig {
    pub weighting: WeightingMode,
    /// Lower bound keeping aggregation weights positive.
    pub eps_weight: f64,
    /// Variance floor inside the log of the uncertainty map.
    pub eps_floor: f64,
    /// Use the entropy-complete form `1/2 log(2 pi e Sigma)` instead of
    /// `1/2 log(2 pi Sigma)`.
    pub entropy_constant: bool,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        PosteriorConfig {
            weighting: WeightingMode::NegLoss,
            eps_weight: 1e-12,
            eps_floor: 1e-12,
            entropy_constant: false,
        }
    }
}

/// Mean velocity, per-voxel variance and uncertainty map.
#[derive(Debug, Clone)]
pub struct PosteriorSummary<T: Scalar> {
    pub mean_velocity: VectorField<T>,
    pub variance: VectorField<T>,
    pub uncertainty: VectorField<T>,
}

/// Full registration output.
#[derive(Debug, Clone)]
pub struct RegistrationResult<T: Scalar> {
    pub registered: Volume<T>,
    pub deformation: VectorField<T>,
    pub summary: PosteriorSummary<T>,
}

/// Aggregation weights for the snapshots in store order.
pub fn snapshot_weights<T: Scalar>(store: &SnapshotStore<T>, cfg: &PosteriorConfig) -> Result<Vec<T>> {
    if store.is_empty() {
        return Err(Error::Degenerate {
            op: "snapshot_weights",
            detail: "snapshot store is empty".into(),
        });
    }
    let losses: Vec<f64> = store.snapshots.iter().map(|s| s.val_loss).collect();
    let w: Vec<f64> = match cfg.weighting {
        WeightingMode::NegLoss => losses.iter().map(|&l| (-l).max(cfg.eps_weight)).collect(),
        WeightingMode::SoftmaxNegLoss => {
            let m = losses.iter().cloned().fold(f64::INFINITY, f64::min);
            losses.iter().map(|&l| (m - l).exp()).collect()
        }
    };
    Ok(w.into_iter().map(T::from_f64).collect())
}

/// One velocity field per snapshot, in store order.
pub fn sample_velocities<T: Scalar>(
    backbone: &BackboneConfig,
    moving: &Volume<T>,
    fixed: &Volume<T>,
    store: &SnapshotStore<T>,
) -> Result<Vec<VectorField<T>>> {
    if store.is_empty() {
        return Err(Error::Degenerate {
            op: "sample_velocities",
            detail: "snapshot store is empty".into(),
        });
    }
    store
        .snapshots
        .iter()
        .map(|s| forward(backbone, moving, fixed, &s.weights))
        .collect()
}

fn check_fields<T: Scalar>(
    op: &'static str,
    fields: &[VectorField<T>],
    weights: &[T],
) -> Result<()> {
    if fields.is_empty() {
        return Err(Error::Degenerate {
            op,
            detail: "no fields".into(),
        });
    }
    if fields.len() != weights.len() {
        return Err(Error::shape(
            op,
            format!("{} fields vs {} weights", fields.len(), weights.len()),
        ));
    }
    let first = &fields[0];
    for f in fields {
        if f.spatial_shape() != first.spatial_shape() || f.components() != first.components() {
            return Err(Error::shape(op, "fields disagree on grid".to_string()));
        }
    }
    if weights.iter().any(|w| *w < T::zero()) {
        return Err(Error::invalid(op, "weights must be non-negative"));
    }
    if weights.iter().copied().sum::<T>() <= T::zero() {
        return Err(Error::invalid(op, "weights sum to zero"));
    }
    Ok(())
}

/// Per-voxel convex combination of the fields.
pub fn weighted_mean<T: Scalar>(fields: &[VectorField<T>], weights: &[T]) -> Result<VectorField<T>> {
    check_fields("weighted_mean", fields, weights)?;
    let wsum: T = weights.iter().copied().sum();
    let mut out = vec![T::zero(); fields[0].data().len()];
    for (f, &w) in fields.iter().zip(weights) {
        for (o, &x) in out.iter_mut().zip(f.data()) {
            *o += w * x;
        }
    }
    for o in out.iter_mut() {
        *o /= wsum;
    }
    VectorField::new(
        fields[0].spatial_shape().to_vec(),
        fields[0].components(),
        out,
    )
}

/// Weighted per-voxel per-component variance about the weighted mean
/// (diagonal covariance).
pub fn variance<T: Scalar>(fields: &[VectorField<T>], weights: &[T]) -> Result<VectorField<T>> {
    let mean = weighted_mean(fields, weights)?;
    let wsum: T = weights.iter().copied().sum();
    let mut out = vec![T::zero(); mean.data().len()];
    for (f, &w) in fields.iter().zip(weights) {
        for ((o, &x), &m) in out.iter_mut().zip(f.data()).zip(mean.data()) {
            let d = x - m;
            *o += w * d * d;
        }
    }
    for o in out.iter_mut() {
        *o /= wsum;
    }
    VectorField::new(mean.spatial_shape().to_vec(), mean.components(), out)
}

/// Elementwise uncertainty `1/2 log(2 pi Sigma)` with the variance floored
/// at `eps_floor` so exact agreement stays finite.
pub fn uncertainty<T: Scalar>(sigma: &VectorField<T>, cfg: &PosteriorConfig) -> VectorField<T> {
    let floor = T::from_f64(cfg.eps_floor);
    let two_pi = T::from_f64(2.0 * std::f64::consts::PI);
    let half = T::from_f64(0.5);
    let offset = if cfg.entropy_constant {
        half // 1/2 log e
    } else {
        T::zero()
    };
    let data: Vec<T> = sigma
        .data()
        .iter()
        .map(|&s| half * (two_pi * s.max(floor)).ln() + offset)
        .collect();
    VectorField::new(sigma.spatial_shape().to_vec(), sigma.components(), data)
        .expect("same shape as input")
}

/// Weighted diagonal covariance of the integrated deformations.
pub fn deformation_variance<T: Scalar>(
    fields: &[VectorField<T>],
    weights: &[T],
    steps: usize,
) -> Result<VectorField<T>> {
    check_fields("deformation_variance", fields, weights)?;
    let deformations: Vec<VectorField<T>> = fields
        .iter()
        .map(|v| integrate(v, steps))
        .collect::<Result<_>>()?;
    variance(&deformations, weights)
}

/// Uncertainty map of the deformation: integrate each sampled velocity and
/// apply the uncertainty formula to the deformation covariance.
pub fn deformation_uncertainty<T: Scalar>(
    fields: &[VectorField<T>],
    weights: &[T],
    steps: usize,
    cfg: &PosteriorConfig,
) -> Result<VectorField<T>> {
    Ok(uncertainty(
        &deformation_variance(fields, weights, steps)?,
        cfg,
    ))
}

/// Register a pair: aggregate the snapshot ensemble, exponentiate the mean
/// velocity, and warp the moving image.
///
/// Runs one forward pass per snapshot, so a store of K snapshots costs about
/// K times a single prediction.
pub fn register<T: Scalar>(
    backbone: &BackboneConfig,
    moving: &Volume<T>,
    fixed: &Volume<T>,
    store: &SnapshotStore<T>,
    integration: &IntegrationConfig,
    cfg: &PosteriorConfig,
) -> Result<RegistrationResult<T>> {
    let fields = sample_velocities(backbone, moving, fixed, store)?;
    let weights = snapshot_weights(store, cfg)?;
    let mean_velocity = weighted_mean(&fields, &weights)?;
    let var = variance(&fields, &weights)?;
    let unc = uncertainty(&var, cfg);
    let deformation = integrate(&mean_velocity, integration.steps)?;
    let registered = warp(moving, &deformation)?;
    Ok(RegistrationResult {
        registered,
        deformation,
        summary: PosteriorSummary {
            mean_velocity,
            variance: var,
            uncertainty: unc,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_weights;
    use crate::optimizer::Snapshot;

    fn field(shape: &[usize], comps: usize, data: Vec<f64>) -> VectorField<f64> {
        VectorField::new(shape.to_vec(), comps, data).unwrap()
    }

    #[test]
    fn equal_weights_give_arithmetic_mean() {
        let f1 = field(&[2], 1, vec![0.0, 2.0]);
        let f2 = field(&[2], 1, vec![4.0, 6.0]);
        let m = weighted_mean(&[f1, f2], &[1.0, 1.0]).unwrap();
        assert_eq!(m.data(), &[2.0, 4.0]);
    }

    #[test]
    fn weighted_mean_matches_direct_convex_combination() {
        let fields: Vec<VectorField<f64>> = (0..3)
            .map(|k| {
                field(
                    &[3, 3],
                    2,
                    (0..18).map(|i| ((i + k * 7) as f64 * 0.37).sin()).collect(),
                )
            })
            .collect();
        let w = [1.0, 2.0, 3.0];
        let m = weighted_mean(&fields, &w).unwrap();
        for i in 0..18 {
            let expect = (1.0 * fields[0].data()[i]
                + 2.0 * fields[1].data()[i]
                + 3.0 * fields[2].data()[i])
                / 6.0;
            assert!((m.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn near_zero_weight_selects_the_other_field() {
        let f1 = field(&[2], 1, vec![1.0, 1.0]);
        let f2 = field(&[2], 1, vec![100.0, 100.0]);
        let m = weighted_mean(&[f1, f2], &[1.0, 1e-15]).unwrap();
        assert!((m.data()[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_weights_error() {
        let f1 = field(&[2], 1, vec![1.0, 1.0]);
        assert!(weighted_mean(&[f1], &[0.0]).is_err());
    }

    #[test]
    fn single_or_identical_fields_have_zero_variance() {
        let f1 = field(&[2], 1, vec![3.0, -1.0]);
        let v1 = variance(&[f1.clone()], &[2.5]).unwrap();
        assert_eq!(v1.data(), &[0.0, 0.0]);
        let v2 = variance(&[f1.clone(), f1], &[1.0, 4.0]).unwrap();
        assert_eq!(v2.data(), &[0.0, 0.0]);
    }

    #[test]
    fn two_point_variance_hand_case() {
        let f1 = field(&[1], 1, vec![0.0]);
        let f2 = field(&[1], 1, vec![2.0]);
        let v = variance(&[f1, f2], &[1.0, 1.0]).unwrap();
        assert_eq!(v.data(), &[1.0]);
    }

    #[test]
    fn uncertainty_fixed_points_and_monotonicity() {
        let cfg = PosteriorConfig::default();
        let inv_2pi = 1.0 / (2.0 * std::f64::consts::PI);
        let s = field(&[2], 1, vec![inv_2pi, std::f64::consts::E * inv_2pi]);
        let h = uncertainty(&s, &cfg);
        assert!(h.data()[0].abs() < 1e-12);
        assert!((h.data()[1] - 0.5).abs() < 1e-12);

        let bigger = field(&[2], 1, vec![inv_2pi * 2.0, std::f64::consts::E * inv_2pi * 2.0]);
        let hb = uncertainty(&bigger, &cfg);
        assert!(hb.data()[0] > h.data()[0]);
        assert!(hb.data()[1] > h.data()[1]);
    }

    #[test]
    fn identical_fields_put_deformation_uncertainty_at_the_floor() {
        let cfg = PosteriorConfig::default();
        let f = field(&[8, 8], 2, vec![0.25; 128]);
        let h = deformation_uncertainty(&[f.clone(), f], &[1.0, 1.0], 4, &cfg).unwrap();
        let floor_h = 0.5 * (2.0 * std::f64::consts::PI * cfg.eps_floor).ln();
        assert!(h.data().iter().all(|&x| (x - floor_h).abs() < 1e-12));
    }

    #[test]
    fn zero_fields_have_zero_deformation_covariance() {
        let z = VectorField::<f64>::zeros(vec![6, 6], 2);
        let v = deformation_variance(&[z.clone(), z], &[1.0, 1.0], 6).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn opposite_translations_give_c_squared_covariance_inside() {
        let c = 0.8;
        let n = 16usize;
        let plus = field(&[n, n], 2, vec![c; 2 * n * n]);
        let minus = field(&[n, n], 2, vec![-c; 2 * n * n]);
        let v = deformation_variance(&[plus, minus], &[1.0, 1.0], 6).unwrap();
        let nv = n * n;
        for y in 2..n - 2 {
            for x in 2..n - 2 {
                for comp in 0..2 {
                    let val = v.data()[comp * nv + y * n + x];
                    assert!(
                        (val - c * c).abs() < 1e-10,
                        "covariance at ({}, {}) comp {} = {}",
                        y,
                        x,
                        comp,
                        val
                    );
                }
            }
        }
    }

    #[test]
    fn single_snapshot_register_equals_plain_pipeline() {
        let backbone = BackboneConfig {
            spatial_dims: 2,
            encoder_channels: vec![4, 8, 8],
            decoder_channels: vec![8, 4],
            leaky_slope: 0.2,
            kernel_size: 3,
        };
        let weights = init_weights::<f64>(&backbone, 11).unwrap();
        let moving = Volume::from_fn(vec![16, 16], |p| ((p[0] + p[1]) as f64 * 0.11).sin().abs());
        let fixed = Volume::from_fn(vec![16, 16], |p| ((p[0] * 2 + p[1]) as f64 * 0.05).cos().abs());
        let store = SnapshotStore {
            snapshots: vec![Snapshot {
                iteration: 1,
                val_loss: -0.5,
                weights: weights.clone(),
            }],
        };
        let ic = IntegrationConfig::default();
        let out = register(
            &backbone,
            &moving,
            &fixed,
            &store,
            &ic,
            &PosteriorConfig::default(),
        )
        .unwrap();

        let v = forward(&backbone, &moving, &fixed, &weights).unwrap();
        let phi = integrate(&v, ic.steps).unwrap();
        let reg = warp(&moving, &phi).unwrap();
        assert_eq!(out.summary.mean_velocity.data(), v.data());
        assert_eq!(out.deformation.data(), phi.data());
        assert_eq!(out.registered.data(), reg.data());
        assert!(out.summary.variance.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_snapshots_sample_identical_fields() {
        let backbone = BackboneConfig {
            spatial_dims: 2,
            encoder_channels: vec![4, 8, 8],
            decoder_channels: vec![8, 4],
            leaky_slope: 0.2,
            kernel_size: 3,
        };
        let weights = init_weights::<f64>(&backbone, 3).unwrap();
        let snap = Snapshot {
            iteration: 1,
            val_loss: -0.4,
            weights,
        };
        let store = SnapshotStore {
            snapshots: vec![snap.clone(), snap.clone(), snap],
        };
        let moving = Volume::from_fn(vec![16, 16], |p| (p[0] as f64 * 0.09).sin().abs());
        let fixed = Volume::from_fn(vec![16, 16], |p| (p[1] as f64 * 0.12).cos().abs());
        let fields = sample_velocities(&backbone, &moving, &fixed, &store).unwrap();
        assert_eq!(fields.len(), 3);
        assert_eq!(fields[0].data(), fields[1].data());
        assert_eq!(fields[1].data(), fields[2].data());
    }
}
