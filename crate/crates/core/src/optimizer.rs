//! Adam with schedule-controlled Gaussian gradient noise, plus the
//! step-size convergence validator and the training loop.
//!
//! Each iteration adds independent zero-mean Gaussian noise to the loss
//! gradients before the bias-corrected Adam update; the weights visited
//! after burn-in are kept as posterior samples together with their
//! validation losses.

use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_on_tape, LossConfig};
use crate::diffeo::IntegrationConfig;
use crate::network::{init_weights, BackboneConfig, WeightSet};
use crate::scalar::Scalar;
use crate::tensor::Tape;
use crate::volume::Volume;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Adam moment estimates and hyperparameters. Moment tensors mirror the
/// weight-set layout.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Completed update count.
    pub t: usize,
    pub beta1: T,
    pub beta2: T,
    pub eta: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(weights: &WeightSet<T>, eta: T, beta1: T, beta2: T, eps: T) -> Self {
        AdamState {
            m: weights.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: weights.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            t: 0,
            beta1,
            beta2,
            eta,
            eps,
        }
    }
}

/// One bias-corrected Adam update with the step size `eta / sqrt(vhat + eps)`.
///
/// Returns the mean per-parameter step size of this iteration.
pub fn adam_step<T: Scalar>(
    weights: &mut WeightSet<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
) -> Result<T> {
    if grads.len() != weights.params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                weights.params.len()
            ),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let one = T::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    let mut step_sum = T::zero();
    let mut count = 0usize;
    for (pi, param) in weights.params.iter_mut().enumerate() {
        let g = &grads[pi];
        if g.len() != param.data.len() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient {} has wrong length", pi),
            ));
        }
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (one - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (one - state.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let s = state.eta / (vhat + state.eps).sqrt();
            param.data[i] = param.data[i] - s * mhat;
            step_sum += s;
        }
        count += g.len();
    }
    Ok(step_sum / T::from_f64(count as f64))
}

/// Per-iteration standard deviation of the injected gradient noise.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSchedule {
    /// Constant std.
    Fixed { target_std: f64 },
    /// `std(t) = a / (b + t)^gamma`, `t` counted from zero.
    Decaying { gamma: f64, a: f64, b: f64 },
}

impl NoiseSchedule {
    /// Fixed schedule at the conventional `lr / 50`.
    pub fn fixed_from_lr(lr: f64) -> Self {
        NoiseSchedule::Fixed { target_std: lr / 50.0 }
    }

    /// Decaying schedule `lr / (1 + t)^0.55`.
    pub fn decaying_from_lr(lr: f64) -> Self {
        NoiseSchedule::Decaying { gamma: 0.55, a: lr, b: 1.0 }
    }

    /// Noise std at iteration `t` (zero-based).
    pub fn std_at(&self, t: usize) -> f64 {
        match *self {
            NoiseSchedule::Fixed { target_std } => target_std,
            NoiseSchedule::Decaying { gamma, a, b } => a / (b + t as f64).powf(gamma),
        }
    }

    pub fn validate_params(&self) -> Result<()> {
        match *self {
            NoiseSchedule::Fixed { target_std } => {
                if target_std < 0.0 || !target_std.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "fixed noise std must be finite and >= 0, got {}",
                        target_std
                    )));
                }
            }
            NoiseSchedule::Decaying { gamma, a, b } => {
                if !(gamma.is_finite() && a.is_finite() && b.is_finite()) || gamma <= 0.0 || a < 0.0 || b <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "decaying schedule needs gamma > 0, a >= 0, b > 0, got gamma={} a={} b={}",
                        gamma, a, b
                    )));
                }
            }
        }
        Ok(())
    }

    /// The paper parameterizes the noise as `N(0, s/alpha)`; with the
    /// schedule specifying the std directly, the implied `alpha` at a given
    /// Adam step size is `s / std^2`.
    pub fn derived_alpha(&self, adam_step_size: f64, t: usize) -> f64 {
        let std = self.std_at(t);
        if std == 0.0 {
            f64::INFINITY
        } else {
            adam_step_size / (std * std)
        }
    }
}

/// Add independent `N(0, std(t)^2)` noise to every gradient element.
///
/// Draws come from `rng` in deterministic traversal order (tensor by tensor,
/// element by element). A zero std leaves the gradients bit-identical.
pub fn inject_noise<T: Scalar, R: Rng + ?Sized>(
    grads: &mut [Vec<T>],
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut R,
) -> Result<f64> {
    for g in grads.iter() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "gradients before noise injection",
                iteration: Some(t),
            });
        }
    }
    let std = schedule.std_at(t);
    if std == 0.0 {
        return Ok(0.0);
    }
    let std_t = T::from_f64(std);
    for g in grads.iter_mut() {
        for x in g.iter_mut() {
            *x += T::standard_normal(rng) * std_t;
        }
    }
    Ok(std)
}

/// Seeded convenience wrapper around [`inject_noise`].
pub fn inject_noise_seeded<T: Scalar>(
    grads: &mut [Vec<T>],
    schedule: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inject_noise(grads, schedule, t, &mut rng)
}

/// Least-squares fit of observed step sizes against the polynomial envelope
/// `a / (b + t)^gamma`.
#[derive(Debug, Clone)]
pub struct EnvelopeFit {
    pub gamma: f64,
    pub a: f64,
    pub b: f64,
    /// Smallest observed ratio `s_t / reference_t`.
    pub c1: f64,
    /// Largest observed ratio.
    pub c2: f64,
    /// Least-squares scale factor.
    pub c_ls: f64,
    /// `c2 / c1`; near 1 means the trajectory tracks the envelope shape.
    pub spread: f64,
}

/// Outcome of the step-size convergence check.
#[derive(Debug, Clone)]
pub struct ScheduleReport {
    pub passes: bool,
    pub reasons: Vec<String>,
    /// Partial sums of the step sizes and squared step sizes up to the
    /// horizon, as numeric evidence for the stated conditions.
    pub partial_sum: f64,
    pub partial_sum_sq: f64,
    pub envelope: Option<EnvelopeFit>,
}

/// Check a schedule against the step-size convergence conditions: the step
/// sizes must sum to infinity while their squares stay summable. Polynomial
/// decay `a/(b+t)^gamma` satisfies both exactly when `gamma` lies in
/// `(0.5, 1]`. When an observed step-size trajectory is supplied for a
/// decaying schedule, the report also fits envelope constants `c1 <= c2`
/// with `c1 * a/(b+t)^gamma <= s_t <= c2 * a/(b+t)^gamma`.
pub fn validate_schedule(
    schedule: &NoiseSchedule,
    horizon: usize,
    observed_steps: Option<&[f64]>,
) -> ScheduleReport {
    let mut partial_sum = 0.0;
    let mut partial_sum_sq = 0.0;
    for t in 0..horizon {
        let s = schedule.std_at(t);
        partial_sum += s;
        partial_sum_sq += s * s;
    }
    let (passes, reasons) = match *schedule {
        NoiseSchedule::Fixed { target_std } => {
            if target_std == 0.0 {
                (
                    false,
                    vec!["zero step size: the step-size sum stays 0, not infinity".to_string()],
                )
            } else {
                (
                    false,
                    vec![
                        "fixed step size: the sum of squared step sizes diverges".to_string(),
                    ],
                )
            }
        }
        NoiseSchedule::Decaying { gamma, .. } => {
            let mut reasons = Vec::new();
            if gamma <= 0.5 {
                reasons.push(format!(
                    "gamma = {} <= 0.5: the sum of squared step sizes diverges",
                    gamma
                ));
            }
            if gamma > 1.0 {
                reasons.push(format!(
                    "gamma = {} > 1: the step-size sum converges instead of diverging",
                    gamma
                ));
            }
            (reasons.is_empty(), reasons)
        }
    };
    let envelope = match (*&schedule, observed_steps) {
        (NoiseSchedule::Decaying { gamma, a, b }, Some(steps)) if !steps.is_empty() => {
            let mut c1 = f64::INFINITY;
            let mut c2 = f64::NEG_INFINITY;
            let mut num = 0.0;
            let mut den = 0.0;
            for (t, &s) in steps.iter().enumerate() {
                let reference = a / (b + t as f64).powf(*gamma);
                let ratio = s / reference;
                c1 = c1.min(ratio);
                c2 = c2.max(ratio);
                num += s * reference;
                den += reference * reference;
            }
            Some(EnvelopeFit {
                gamma: *gamma,
                a: *a,
                b: *b,
                c1,
                c2,
                c_ls: num / den,
                spread: c2 / c1,
            })
        }
        _ => None,
    };
    ScheduleReport {
        passes,
        reasons,
        partial_sum,
        partial_sum_sq,
        envelope,
    }
}

/// Supplies (moving, fixed) pairs by index.
pub trait PairProvider<T: Scalar> {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn pair(&self, index: usize) -> (&Volume<T>, &Volume<T>);
}

impl<T: Scalar> PairProvider<T> for [(Volume<T>, Volume<T>)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }
    fn pair(&self, index: usize) -> (&Volume<T>, &Volume<T>) {
        let (m, f) = &self[index];
        (m, f)
    }
}

impl<T: Scalar> PairProvider<T> for Vec<(Volume<T>, Volume<T>)> {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }
    fn pair(&self, index: usize) -> (&Volume<T>, &Volume<T>) {
        let (m, f) = &self[index];
        (m, f)
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Total iterations N; one optimizer update per iteration.
    pub iterations: usize,
    /// Burn-in `t_b`; weights are snapshotted for iterations `t_b < t <= N`,
    /// so the store holds `N - t_b` snapshots.
    pub burn_in: usize,
    pub seed: u64,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: NoiseSchedule,
    /// Validation pairs used per evaluation (0 means all).
    pub val_subset: usize,
    /// Evaluate the validation loss every this many iterations (it is always
    /// evaluated inside the snapshot window); rows in between repeat the most
    /// recent value.
    pub val_every: usize,
}

impl TrainConfig {
    pub fn desk_default(iterations: usize) -> Self {
        let eta = 1e-3;
        TrainConfig {
            iterations,
            burn_in: iterations.saturating_sub(8),
            seed: 0,
            eta,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: NoiseSchedule::fixed_from_lr(eta),
            val_subset: 3,
            val_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::InvalidConfig(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.eta <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::InvalidConfig(
                "need eta > 0, beta1/beta2 in [0, 1), eps > 0".into(),
            ));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidConfig("val_every must be >= 1".into()));
        }
        self.schedule.validate_params()
    }
}

/// One saved posterior draw.
#[derive(Debug, Clone)]
pub struct Snapshot<T: Scalar> {
    pub iteration: usize,
    pub val_loss: f64,
    pub weights: WeightSet<T>,
}

/// Weight snapshots from the final training iterations.
#[derive(Debug, Clone)]
pub struct SnapshotStore<T: Scalar> {
    pub snapshots: Vec<Snapshot<T>>,
}

impl<T: Scalar> SnapshotStore<T> {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }
    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

/// One row of the loss curves.
#[derive(Debug, Clone, Copy)]
pub struct TrainRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub noise_std: f64,
    pub step_size: f64,
}

pub struct TrainOutput<T: Scalar> {
    pub store: SnapshotStore<T>,
    pub curves: Vec<TrainRecord>,
    pub schedule_report: ScheduleReport,
}

/// Offline training: iterate noisy-gradient Adam updates over the dataset
/// and keep the post-burn-in weights with their validation losses.
pub fn train<T: Scalar, P: PairProvider<T> + ?Sized, Q: PairProvider<T> + ?Sized>(
    backbone: &BackboneConfig,
    train_pairs: &P,
    val_pairs: &Q,
    loss_cfg: &LossConfig,
    integration: &IntegrationConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if val_pairs.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }

    let mut weights: WeightSet<T> = init_weights(backbone, cfg.seed)?;
    let mut adam = AdamState::new(
        &weights,
        T::from_f64(cfg.eta),
        T::from_f64(cfg.beta1),
        T::from_f64(cfg.beta2),
        T::from_f64(cfg.eps),
    );
    let mut rng_order = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_0001));
    let mut rng_noise = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_0002));

    let n_val = if cfg.val_subset == 0 {
        val_pairs.len()
    } else {
        cfg.val_subset.min(val_pairs.len())
    };

    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    order.shuffle(&mut rng_order);
    let mut cursor = 0usize;

    let mut curves = Vec::with_capacity(cfg.iterations);
    let mut snapshots = Vec::new();
    let mut observed_steps = Vec::with_capacity(cfg.iterations);
    let mut last_val = f64::NAN;

    for t in 1..=cfg.iterations {
        if cursor == order.len() {
            order.shuffle(&mut rng_order);
            cursor = 0;
        }
        let (moving, fixed) = train_pairs.pair(order[cursor]);
        cursor += 1;

        let mut tape = Tape::new();
        let graph = total_loss_on_tape(
            &mut tape,
            backbone,
            moving,
            fixed,
            &weights,
            loss_cfg,
            integration,
            true,
        )
        .map_err(|e| at_iteration(e, t))?;
        let train_loss = tape.scalar_value(graph.loss).as_f64();
        if !train_loss.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss",
                iteration: Some(t),
            });
        }
        let gm = tape.backward(graph.loss)?;
        let mut grads: Vec<Vec<T>> = graph
            .weight_ids
            .iter()
            .map(|&id| gm.grad(id).expect("weights require grad").to_vec())
            .collect();
        drop(tape);

        let noise_std = inject_noise(&mut grads, &cfg.schedule, t - 1, &mut rng_noise)
            .map_err(|e| at_iteration(e, t))?;
        let step = adam_step(&mut weights, &grads, &mut adam)?.as_f64();
        observed_steps.push(step);

        let in_snapshot_window = t > cfg.burn_in;
        let val_loss = if in_snapshot_window || t % cfg.val_every == 0 || t == 1 {
            let mut val_sum = 0.0;
            for vi in 0..n_val {
                let (vm, vf) = val_pairs.pair(vi);
                let l = total_loss(backbone, vm, vf, &weights, loss_cfg, integration)
                    .map_err(|e| at_iteration(e, t))?
                    .as_f64();
                val_sum += l;
            }
            val_sum / n_val as f64
        } else {
            last_val
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                context: "validation loss",
                iteration: Some(t),
            });
        }
        last_val = val_loss;

        curves.push(TrainRecord {
            iteration: t,
            train_loss,
            val_loss,
            noise_std,
            step_size: step,
        });
        if t > cfg.burn_in {
            snapshots.push(Snapshot {
                iteration: t,
                val_loss,
                weights: weights.clone(),
            });
        }
    }

    let schedule_report = validate_schedule(&cfg.schedule, cfg.iterations, Some(&observed_steps));
    Ok(TrainOutput {
        store: SnapshotStore { snapshots },
        curves,
        schedule_report,
    })
}

fn at_iteration(e: Error, t: usize) -> Error {
    match e {
        Error::NonFinite { context, .. } => Error::NonFinite {
            context,
            iteration: Some(t),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_weights(values: &[f64]) -> WeightSet<f64> {
        WeightSet {
            params: vec![crate::network::Param {
                name: "w".into(),
                shape: vec![values.len()],
                data: values.to_vec(),
            }],
        }
    }

    #[test]
    fn first_adam_step_matches_hand_computation() {
        // t=1, g=1, beta1=0.9, beta2=0.999, eta=1e-3, eps=1e-8:
        // mhat = 1, vhat = 1, delta = -eta / sqrt(1 + eps) ~ -9.99999995e-4
        let mut w = scalar_weights(&[0.0]);
        let mut st = AdamState::new(&w, 1e-3, 0.9, 0.999, 1e-8);
        adam_step(&mut w, &[vec![1.0]], &mut st).unwrap();
        let expected = -1e-3 / (1.0f64 + 1e-8).sqrt();
        assert!((w.params[0].data[0] - expected).abs() < 1e-12);
        assert!((w.params[0].data[0] + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn bias_correction_makes_mhat_equal_g_at_t1() {
        for beta1 in [0.5, 0.9, 0.99] {
            let mut w = scalar_weights(&[0.0]);
            let mut st = AdamState::new(&w, 1.0, beta1, 0.999, 1e-8);
            adam_step(&mut w, &[vec![0.3]], &mut st).unwrap();
            // mhat = (1-beta1)*g / (1-beta1) = g exactly; the update direction
            // is g / sqrt(ghat^2 + eps), independent of beta1
            let mhat = st.m[0][0] / (1.0 - beta1);
            assert_eq!(mhat, 0.3);
        }
    }

    #[test]
    fn zero_gradients_leave_weights_unchanged() {
        let mut w = scalar_weights(&[0.7, -0.2]);
        let before = w.clone();
        let mut st = AdamState::new(&w, 1e-3, 0.9, 0.999, 1e-8);
        for _ in 0..10 {
            adam_step(&mut w, &[vec![0.0, 0.0]], &mut st).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn zero_noise_schedule_is_a_no_op() {
        let mut grads = vec![vec![1.0f64, -2.0, 3.0]];
        let sched = NoiseSchedule::Fixed { target_std: 0.0 };
        let std = inject_noise_seeded(&mut grads, &sched, 5, 42).unwrap();
        assert_eq!(std, 0.0);
        assert_eq!(grads[0], vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn noise_injection_rejects_non_finite_gradients() {
        let mut grads = vec![vec![f64::NAN]];
        let sched = NoiseSchedule::fixed_from_lr(1e-3);
        assert!(inject_noise_seeded(&mut grads, &sched, 0, 1).is_err());
    }

    #[test]
    fn decaying_schedule_starts_at_lr() {
        let sched = NoiseSchedule::decaying_from_lr(2e-4);
        assert_eq!(sched.std_at(0), 2e-4);
        let expect = 2e-4 / (1.0 + 100.0f64).powf(0.55);
        assert!((sched.std_at(100) - expect).abs() < 1e-18);
    }

    #[test]
    fn validator_accepts_gamma_in_range_and_rejects_outside() {
        let ok = |gamma: f64| NoiseSchedule::Decaying { gamma, a: 1e-3, b: 1.0 };
        assert!(validate_schedule(&ok(0.55), 1000, None).passes);
        assert!(validate_schedule(&ok(1.0), 1000, None).passes);

        let low = validate_schedule(&ok(0.4), 1000, None);
        assert!(!low.passes);
        assert!(low.reasons[0].contains("squared step sizes diverges"));

        let fixed = validate_schedule(&NoiseSchedule::fixed_from_lr(1e-3), 1000, None);
        assert!(!fixed.passes);
        assert!(fixed.reasons[0].contains("diverges"));
    }

    #[test]
    fn envelope_fit_brackets_a_matching_trajectory() {
        let sched = NoiseSchedule::Decaying { gamma: 0.55, a: 1e-3, b: 1.0 };
        let steps: Vec<f64> = (0..200).map(|t| 1.3 * sched.std_at(t)).collect();
        let report = validate_schedule(&sched, 200, Some(&steps));
        let env = report.envelope.unwrap();
        assert!((env.c1 - 1.3).abs() < 1e-12);
        assert!((env.c2 - 1.3).abs() < 1e-12);
        assert!((env.spread - 1.0).abs() < 1e-12);
    }

    #[test]
    fn burn_in_controls_snapshot_count() {
        // pure bookkeeping check on a tiny training run
        let backbone = tiny_backbone();
        let pairs = tiny_pairs();
        let loss_cfg = LossConfig {
            lcc_window: 3,
            ..LossConfig::default()
        };
        let mut cfg = TrainConfig::desk_default(6);
        cfg.burn_in = 5;
        cfg.val_subset = 1;
        let out = train::<f64, _, _>(
            &backbone,
            pairs.as_slice(),
            pairs.as_slice(),
            &loss_cfg,
            &IntegrationConfig::new(4).unwrap(),
            &cfg,
        )
        .unwrap();
        assert_eq!(out.store.len(), 1);
        assert_eq!(out.curves.len(), 6);

        cfg.burn_in = 6;
        assert!(train::<f64, _, _>(
            &backbone,
            pairs.as_slice(),
            pairs.as_slice(),
            &loss_cfg,
            &IntegrationConfig::new(4).unwrap(),
            &cfg,
        )
        .is_err());
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let backbone = tiny_backbone();
        let pairs = tiny_pairs();
        let loss_cfg = LossConfig {
            lcc_window: 3,
            ..LossConfig::default()
        };
        let mut cfg = TrainConfig::desk_default(4);
        cfg.burn_in = 2;
        cfg.val_subset = 1;
        let ic = IntegrationConfig::new(4).unwrap();
        let a = train::<f64, _, _>(&backbone, pairs.as_slice(), pairs.as_slice(), &loss_cfg, &ic, &cfg).unwrap();
        let b = train::<f64, _, _>(&backbone, pairs.as_slice(), pairs.as_slice(), &loss_cfg, &ic, &cfg).unwrap();
        for (sa, sb) in a.store.snapshots.iter().zip(&b.store.snapshots) {
            assert_eq!(sa.weights, sb.weights);
            assert_eq!(sa.val_loss, sb.val_loss);
        }
    }

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            spatial_dims: 2,
            encoder_channels: vec![4, 8, 8],
            decoder_channels: vec![8, 4],
            leaky_slope: 0.2,
            kernel_size: 3,
        }
    }

    fn tiny_pairs() -> Vec<(Volume<f64>, Volume<f64>)> {
        let moving = Volume::from_fn(vec![8, 8], |p| ((p[0] * 3 + p[1]) as f64 * 0.05).sin().abs());
        let fixed = Volume::from_fn(vec![8, 8], |p| ((p[0] + 2 * p[1]) as f64 * 0.07).cos().abs());
        vec![(moving, fixed)]
    }
}
