//! Data provisioning and experiment orchestration: synthetic pair
//! generation with known ground-truth deformations, noise corruption,
//! preprocessing, and the uncertainty-vs-noise experiment.

use crate::diffeo::{warp, IntegrationConfig};
use crate::error::{Error, Result};
use crate::metrics::{dice, fold_percentage, pearson, warp_mask, LabelMask};
use crate::network::BackboneConfig;
use crate::optimizer::SnapshotStore;
use crate::posterior::{register, PosteriorConfig};
use crate::scalar::Scalar;
use crate::volume::{strides, VectorField, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Shape families for synthetic images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    /// Textured elliptical blobs, one label each.
    Blobs,
    /// Annuli, one label each.
    Rings,
    /// Concentric phantom slices, one label per shell.
    Phantom,
}

/// Recipe for one synthetic registration pair.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub grid: Vec<usize>,
    pub family: ShapeFamily,
    pub num_shapes: usize,
    /// Peak displacement magnitude of the ground-truth deformation, voxels.
    pub deform_max: f64,
    /// Gaussian smoothing sigma of the deformation noise, voxels.
    pub deform_smooth: f64,
    /// When set, regenerate until the mean pre-registration Dice over labels
    /// drops to this value or below.
    pub max_initial_dice: Option<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Desk-scale default: 64x64 textured blobs under a smooth deformation
    /// strong enough to push the initial Dice below 0.6.
    pub fn desk(seed: u64) -> Self {
        SyntheticSpec {
            grid: vec![64, 64],
            family: ShapeFamily::Blobs,
            num_shapes: 3,
            deform_max: 8.0,
            deform_smooth: 9.0,
            max_initial_dice: Some(0.6),
            seed,
        }
    }
}

/// A generated pair with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticPair<T: Scalar> {
    pub moving: Volume<T>,
    pub fixed: Volume<T>,
    pub moving_masks: Vec<LabelMask<T>>,
    pub fixed_masks: Vec<LabelMask<T>>,
    pub ground_truth: VectorField<T>,
}

/// Separable Gaussian smoothing with border replication.
fn gaussian_smooth(data: &mut Vec<f64>, shape: &[usize], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut ksum = 0.0;
    for i in -radius..=radius {
        let w = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        ksum += w;
    }
    for w in kernel.iter_mut() {
        *w /= ksum;
    }
    let st = strides(shape);
    let n: usize = shape.iter().product();
    let mut tmp = vec![0.0f64; n];
    for axis in 0..shape.len() {
        let extent = shape[axis] as isize;
        for flat in 0..n {
            let pos = ((flat / st[axis]) % shape[axis]) as isize;
            let base = flat - (pos as usize) * st[axis];
            let mut acc = 0.0;
            for (ki, &w) in kernel.iter().enumerate() {
                let q = (pos + ki as isize - radius).clamp(0, extent - 1) as usize;
                acc += w * data[base + q * st[axis]];
            }
            tmp[flat] = acc;
        }
        std::mem::swap(data, &mut tmp);
    }
}

/// Smooth noise field in [-1, 1] with unit-scale typical amplitude:
/// std-normalized (not max-normalized, which would crush the local
/// variance), clipped at two sigma.
fn smooth_noise(shape: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    gaussian_smooth(&mut data, shape, sigma);
    let mean = data.iter().sum::<f64>() / n as f64;
    let std = (data.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64)
        .sqrt()
        .max(1e-12);
    for x in data.iter_mut() {
        *x = ((*x - mean) / std).clamp(-2.0, 2.0) / 2.0;
    }
    data
}

struct Shape {
    center: Vec<f64>,
    radii: Vec<f64>,
    intensity: f64,
    /// Annulus inner fraction; 0 for solid shapes.
    inner: f64,
}

impl Shape {
    fn contains(&self, p: &[usize]) -> bool {
        let r = self.radial(p);
        r <= 1.0 && r >= self.inner
    }

    fn radial(&self, p: &[usize]) -> f64 {
        let mut s = 0.0;
        for d in 0..self.center.len() {
            let dx = (p[d] as f64 - self.center[d]) / self.radii[d];
            s += dx * dx;
        }
        s.sqrt()
    }
}

fn draw_shapes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let dim = spec.grid.len();
    let mut shapes = Vec::with_capacity(spec.num_shapes);
    match spec.family {
        ShapeFamily::Blobs | ShapeFamily::Rings => {
            let inner = if spec.family == ShapeFamily::Rings { 0.55 } else { 0.0 };
            for _ in 0..spec.num_shapes {
                let mut center = Vec::with_capacity(dim);
                let mut radii = Vec::with_capacity(dim);
                for d in 0..dim {
                    let e = spec.grid[d] as f64;
                    // keep shapes away from the border so deformations stay visible
                    center.push(e * (0.32 + 0.36 * rng.gen::<f64>()));
                    radii.push(e * (0.09 + 0.05 * rng.gen::<f64>()));
                }
                shapes.push(Shape {
                    center,
                    radii,
                    intensity: 0.55 + 0.4 * rng.gen::<f64>(),
                    inner,
                });
            }
        }
        ShapeFamily::Phantom => {
            let center: Vec<f64> = spec.grid.iter().map(|&e| e as f64 / 2.0).collect();
            for k in 0..spec.num_shapes {
                let scale = 0.38 * (1.0 - k as f64 / (spec.num_shapes as f64 + 0.5));
                let radii: Vec<f64> = spec
                    .grid
                    .iter()
                    .map(|&e| e as f64 * scale * (0.9 + 0.2 * rng.gen::<f64>()))
                    .collect();
                shapes.push(Shape {
                    center: center.clone(),
                    radii,
                    intensity: 0.35 + 0.6 * (k as f64 + 1.0) / spec.num_shapes as f64,
                    inner: 0.0,
                });
            }
        }
    }
    shapes
}

fn render<T: Scalar>(
    spec: &SyntheticSpec,
    shapes: &[Shape],
    rng: &mut ChaCha8Rng,
) -> (Volume<T>, Vec<LabelMask<T>>) {
    // two texture scales: fine detail for window-level contrast, a coarse
    // component so misalignments beyond the window still produce gradient
    let fine = smooth_noise(&spec.grid, 2.5, rng);
    let coarse = smooth_noise(&spec.grid, 9.0, rng);
    let texture: Vec<f64> = fine
        .iter()
        .zip(&coarse)
        .map(|(&f, &c)| 0.7 * f + 0.7 * c)
        .collect();
    let background = smooth_noise(&spec.grid, 3.0, rng);
    let n: usize = spec.grid.iter().product();
    let mut img = vec![0.0f64; n];
    let mut masks: Vec<Vec<T>> = vec![vec![T::zero(); n]; shapes.len()];

    let st = strides(&spec.grid);
    let dim = spec.grid.len();
    let mut p = vec![0usize; dim];
    for flat in 0..n {
        // strong local contrast everywhere: windowed correlation needs the
        // local variance product to clear its guard
        let mut value = 0.3 + 0.35 * background[flat];
        for (si, shape) in shapes.iter().enumerate() {
            if shape.contains(&p) {
                value = shape.intensity * (0.6 + 0.5 * texture[flat]);
                masks[si][flat] = T::one();
            }
        }
        img[flat] = value.clamp(0.0, 1.0);
        for d in (0..dim).rev() {
            p[d] += 1;
            if p[d] < spec.grid[d] {
                break;
            }
            p[d] = 0;
        }
    }
    let _ = st;
    let volume = Volume::new(spec.grid.clone(), img.into_iter().map(T::from_f64).collect())
        .expect("rendered image matches grid");
    let masks = masks
        .into_iter()
        .map(|m| Volume::new(spec.grid.clone(), m).expect("mask matches grid"))
        .collect();
    (volume, masks)
}

/// Random smooth deformation: a gentle affine flow (translation plus a
/// small linear part about the grid center) with smoothed noise on top.
/// The pieces are scaled so structures in the central region move by
/// roughly `magnitude` voxels while displacement gradients stay well below
/// the folding limit.
fn random_deformation<T: Scalar>(
    grid: &[usize],
    magnitude: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> VectorField<T> {
    let dim = grid.len();
    let nvox: usize = grid.iter().product();
    let center: Vec<f64> = grid.iter().map(|&e| (e - 1) as f64 / 2.0).collect();
    let r_ref = grid.iter().map(|&e| e as f64 / 4.0).fold(f64::INFINITY, f64::min);

    // translation with a guaranteed magnitude in a random direction
    let t_mag = (0.55 + 0.4 * rng.gen::<f64>()) * magnitude;
    let mut direction: Vec<f64> = (0..dim).map(|_| T::standard_normal(rng).as_f64()).collect();
    let d_norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in direction.iter_mut() {
        *x /= d_norm;
    }
    let translation: Vec<f64> = direction.iter().map(|&x| x * t_mag).collect();
    let a_scale = 0.3 * magnitude / r_ref;
    let linear: Vec<f64> = (0..dim * dim)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * a_scale)
        .collect();

    let noise_peak = 0.3 * magnitude;
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut c: Vec<f64> = (0..nvox).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        gaussian_smooth(&mut c, grid, sigma);
        comps.push(c);
    }
    let mut max_norm = 1e-12f64;
    for v in 0..nvox {
        let norm: f64 = comps.iter().map(|c| c[v] * c[v]).sum::<f64>().sqrt();
        max_norm = max_norm.max(norm);
    }
    let noise_scale = noise_peak / max_norm;

    let st = strides(grid);
    let mut all = Vec::with_capacity(dim * nvox);
    for c in 0..dim {
        for v in 0..nvox {
            let mut u = translation[c] + comps[c][v] * noise_scale;
            for d in 0..dim {
                let pd = ((v / st[d]) % grid[d]) as f64;
                u += linear[c * dim + d] * (pd - center[d]);
            }
            all.push(T::from_f64(u));
        }
    }
    VectorField::new(grid.to_vec(), dim, all).expect("field matches grid")
}

/// Generate a synthetic pair: render a moving image, draw a smooth fold-free
/// ground-truth deformation, and warp image and masks to produce the fixed
/// side. Retries with reduced magnitude when the draw folds; errors after 10
/// attempts.
pub fn generate_pair<T: Scalar>(spec: &SyntheticSpec) -> Result<SyntheticPair<T>> {
    if spec.grid.is_empty() || spec.grid.iter().any(|&e| e < 4) {
        return Err(Error::InvalidConfig(format!(
            "grid too small: {:?}",
            spec.grid
        )));
    }
    if spec.num_shapes == 0 {
        return Err(Error::InvalidConfig("num_shapes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes = draw_shapes(spec, &mut rng);
    let (moving, moving_masks) = render::<T>(spec, &shapes, &mut rng);

    let mut magnitude = spec.deform_max;
    for _attempt in 0..10 {
        let ground_truth = if magnitude == 0.0 {
            VectorField::zeros(spec.grid.clone(), spec.grid.len())
        } else {
            random_deformation::<T>(&spec.grid, magnitude, spec.deform_smooth, &mut rng)
        };
        if fold_percentage(&ground_truth)? > 0.0 {
            magnitude *= 0.8;
            continue;
        }
        let fixed = warp(&moving, &ground_truth)?;
        let fixed_masks: Vec<LabelMask<T>> = moving_masks
            .iter()
            .map(|m| warp_mask(m, &ground_truth))
            .collect::<Result<_>>()?;
        if let Some(max_dice) = spec.max_initial_dice {
            if magnitude > 0.0 {
                let mut sum = 0.0;
                for (mm, fm) in moving_masks.iter().zip(&fixed_masks) {
                    sum += dice(mm, fm)?.as_f64();
                }
                let mean = sum / moving_masks.len() as f64;
                if mean > max_dice {
                    continue; // new draw from the advanced stream
                }
            }
        }
        return Ok(SyntheticPair {
            moving,
            fixed,
            moving_masks,
            fixed_masks,
            ground_truth,
        });
    }
    Err(Error::Degenerate {
        op: "generate_pair",
        detail: format!(
            "no fold-free deformation meeting the Dice bound after 10 attempts (seed {})",
            spec.seed
        ),
    })
}

/// Generate `count` pairs with per-pair derived seeds.
pub fn generate_dataset<T: Scalar>(base: &SyntheticSpec, count: usize) -> Result<Vec<SyntheticPair<T>>> {
    (0..count)
        .map(|i| {
            let mut spec = base.clone();
            spec.seed = base.seed.wrapping_add(1 + i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            generate_pair(&spec)
        })
        .collect()
}

/// Train/validation/test sizes for the default 56/30/14 split.
pub fn split_counts(total: usize) -> (usize, usize, usize) {
    let train = (total as f64 * 0.56).round() as usize;
    let val = (total as f64 * 0.30).round() as usize;
    let train = train.min(total);
    let val = val.min(total - train);
    (train, val, total - train - val)
}

/// Add `N(0, sigma^2)` noise per voxel and clip to [0, 1].
pub fn corrupt_gaussian<T: Scalar>(image: &Volume<T>, sigma: f64, seed: u64) -> Result<Volume<T>> {
    if sigma < 0.0 {
        return Err(Error::invalid("corrupt_gaussian", "sigma must be >= 0"));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = T::from_f64(sigma);
    let data: Vec<T> = image
        .data()
        .iter()
        .map(|&x| (x + T::standard_normal(&mut rng) * s).max(T::zero()).min(T::one()))
        .collect();
    Volume::new(image.shape().to_vec(), data)
}

/// Exact convex combination `alpha * other + (1 - alpha) * image`.
pub fn corrupt_mixed<T: Scalar>(image: &Volume<T>, other: &Volume<T>, alpha: f64) -> Result<Volume<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("corrupt_mixed", "alpha must lie in [0, 1]"));
    }
    if image.shape() != other.shape() {
        return Err(Error::shape(
            "corrupt_mixed",
            format!("{:?} vs {:?}", image.shape(), other.shape()),
        ));
    }
    let a = T::from_f64(alpha);
    let one_minus = T::one() - a;
    let data: Vec<T> = image
        .data()
        .iter()
        .zip(other.data())
        .map(|(&i, &j)| a * j + one_minus * i)
        .collect();
    Volume::new(image.shape().to_vec(), data)
}

/// Zero-pad or center-crop to `target_shape`, then min-max normalize to
/// [0, 1]. A constant volume normalizes to all zeros with a warning.
pub fn preprocess<T: Scalar>(volume: &Volume<T>, target_shape: &[usize]) -> Result<Volume<T>> {
    if target_shape.len() != volume.ndim() || target_shape.iter().any(|&e| e == 0) {
        return Err(Error::shape(
            "preprocess",
            format!("target {:?} for input {:?}", target_shape, volume.shape()),
        ));
    }
    let src_shape = volume.shape();
    let dim = src_shape.len();
    let out_n: usize = target_shape.iter().product();
    let sst = strides(src_shape);
    let tst = strides(target_shape);
    let mut out = vec![T::zero(); out_n];
    // offset of the copied window inside source (crop) and target (pad)
    let mut src_off = vec![0usize; dim];
    let mut dst_off = vec![0usize; dim];
    let mut span = vec![0usize; dim];
    for d in 0..dim {
        if src_shape[d] >= target_shape[d] {
            src_off[d] = (src_shape[d] - target_shape[d]) / 2;
            span[d] = target_shape[d];
        } else {
            dst_off[d] = (target_shape[d] - src_shape[d]) / 2;
            span[d] = src_shape[d];
        }
    }
    let span_n: usize = span.iter().product();
    let mut q = vec![0usize; dim];
    for _ in 0..span_n {
        let mut si = 0usize;
        let mut ti = 0usize;
        for d in 0..dim {
            si += (src_off[d] + q[d]) * sst[d];
            ti += (dst_off[d] + q[d]) * tst[d];
        }
        out[ti] = volume.data()[si];
        for d in (0..dim).rev() {
            q[d] += 1;
            if q[d] < span[d] {
                break;
            }
            q[d] = 0;
        }
    }
    let mut v = Volume::new(target_shape.to_vec(), out)?;
    let (lo, hi) = v.min_max();
    if hi <= lo {
        log::warn!("preprocess: constant volume normalized to all zeros");
        v.data_mut().fill(T::zero());
        return Ok(v);
    }
    let range = hi - lo;
    for x in v.data_mut() {
        *x = (*x - lo) / range;
    }
    Ok(v)
}

/// One aggregated row of the uncertainty-vs-noise experiment.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentRow {
    pub sigma: f64,
    pub mean_uncertainty: f64,
}

/// Per-pair data point for scatter plots.
#[derive(Debug, Clone, Copy)]
pub struct ScatterPoint {
    pub pair: usize,
    pub sigma: f64,
    pub mean_uncertainty: f64,
}

#[derive(Debug, Clone)]
pub struct UncertaintyExperiment {
    pub rows: Vec<ExperimentRow>,
    pub scatter: Vec<ScatterPoint>,
    /// Pearson correlation between noise level and mean uncertainty over the
    /// scatter points; `None` when the uncertainty never left its floor.
    pub pearson_r: Option<f64>,
    pub degenerate: bool,
}

/// Corrupt the test pairs at each noise level, register them with the
/// snapshot ensemble, and correlate the mean voxel-wise uncertainty with the
/// noise level.
pub fn uncertainty_noise_experiment<T: Scalar>(
    backbone: &BackboneConfig,
    store: &SnapshotStore<T>,
    pairs: &[(Volume<T>, Volume<T>)],
    sigmas: &[f64],
    integration: &IntegrationConfig,
    posterior_cfg: &PosteriorConfig,
    seed: u64,
) -> Result<UncertaintyExperiment> {
    if sigmas.len() < 2 {
        return Err(Error::Degenerate {
            op: "uncertainty_noise_experiment",
            detail: "need at least two noise levels for a correlation".into(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("no test pairs supplied".into()));
    }
    let mut rows = Vec::with_capacity(sigmas.len());
    let mut scatter = Vec::with_capacity(sigmas.len() * pairs.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        if sigma < 0.0 {
            return Err(Error::invalid("uncertainty_noise_experiment", "sigma must be >= 0"));
        }
        let mut level_sum = 0.0;
        for (pi, (moving, fixed)) in pairs.iter().enumerate() {
            let salt = (si as u64) << 32 | pi as u64;
            let m = corrupt_gaussian(moving, sigma, seed ^ salt.wrapping_mul(0x9e37_79b9))?;
            let f = corrupt_gaussian(fixed, sigma, seed ^ salt.wrapping_mul(0x85eb_ca6b).wrapping_add(1))?;
            let result = register(backbone, &m, &f, store, integration, posterior_cfg)?;
            let h = &result.summary.uncertainty;
            let mean_h =
                h.data().iter().map(|x| x.as_f64()).sum::<f64>() / h.data().len() as f64;
            scatter.push(ScatterPoint {
                pair: pi,
                sigma,
                mean_uncertainty: mean_h,
            });
            level_sum += mean_h;
        }
        rows.push(ExperimentRow {
            sigma,
            mean_uncertainty: level_sum / pairs.len() as f64,
        });
    }
    let xs: Vec<f64> = scatter.iter().map(|p| p.sigma).collect();
    let ys: Vec<f64> = scatter.iter().map(|p| p.mean_uncertainty).collect();
    let y_lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // an ensemble with zero spread pins every uncertainty at the floor value
    let flat = y_hi - y_lo <= 1e-9 * y_hi.abs().max(1.0);
    let (pearson_r, degenerate) = if flat {
        (None, true)
    } else {
        match pearson(&xs, &ys) {
            Ok(r) => (Some(r), false),
            Err(_) => (None, true),
        }
    };
    if degenerate {
        log::warn!("uncertainty experiment degenerate: the uncertainty did not vary with noise");
    }
    Ok(UncertaintyExperiment {
        rows,
        scatter,
        pearson_r,
        degenerate,
    })
}

/// Registration quality of one (pair, label) combination.
#[derive(Debug, Clone, Copy)]
pub struct EvalRow {
    pub pair: usize,
    pub label: usize,
    pub dice_before: f64,
    pub dice_after: f64,
    /// Fold percentage of the pair's predicted deformation (repeated on
    /// every label row of the pair).
    pub fold_pct: f64,
}

/// Register every pair with the snapshot ensemble and measure Dice overlap
/// per label before and after, plus deformation smoothness.
pub fn evaluate_pairs<T: Scalar>(
    backbone: &BackboneConfig,
    store: &SnapshotStore<T>,
    pairs: &[SyntheticPair<T>],
    integration: &IntegrationConfig,
    posterior_cfg: &PosteriorConfig,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (pi, pair) in pairs.iter().enumerate() {
        let result = register(
            backbone,
            &pair.moving,
            &pair.fixed,
            store,
            integration,
            posterior_cfg,
        )?;
        let fold_pct = fold_percentage(&result.deformation)?;
        for (li, (mm, fm)) in pair.moving_masks.iter().zip(&pair.fixed_masks).enumerate() {
            let before = dice(mm, fm)?.as_f64();
            let propagated = warp_mask(mm, &result.deformation)?;
            let after = dice(&propagated, fm)?.as_f64();
            rows.push(EvalRow {
                pair: pi,
                label: li,
                dice_before: before,
                dice_after: after,
                fold_pct,
            });
        }
    }
    Ok(rows)
}

/// Two-sided paired t-test p-value.
pub fn paired_ttest(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "paired_ttest",
            format!("{} vs {} samples", x.len(), y.len()),
        ));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Degenerate {
            op: "paired_ttest",
            detail: "need at least two pairs".into(),
        });
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Degenerate {
        op: "paired_ttest",
        detail: e.to_string(),
    })?;
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_magnitude_pair_is_identical() {
        let mut spec = SyntheticSpec::desk(4);
        spec.deform_max = 0.0;
        spec.max_initial_dice = None;
        let pair = generate_pair::<f64>(&spec).unwrap();
        assert_eq!(pair.moving.data(), pair.fixed.data());
        assert!(pair.ground_truth.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn same_seed_reproduces_the_pair() {
        let spec = SyntheticSpec::desk(7);
        let a = generate_pair::<f64>(&spec).unwrap();
        let b = generate_pair::<f64>(&spec).unwrap();
        assert_eq!(a.moving.data(), b.moving.data());
        assert_eq!(a.fixed.data(), b.fixed.data());
        assert_eq!(a.ground_truth.data(), b.ground_truth.data());
    }

    #[test]
    fn ground_truth_is_fold_free_and_masks_propagate() {
        for seed in [1u64, 2, 3] {
            let pair = generate_pair::<f64>(&SyntheticSpec::desk(seed)).unwrap();
            assert_eq!(fold_percentage(&pair.ground_truth).unwrap(), 0.0);
            for (mm, fm) in pair.moving_masks.iter().zip(&pair.fixed_masks) {
                let propagated = warp_mask(mm, &pair.ground_truth).unwrap();
                let d = dice(&propagated, fm).unwrap();
                assert!(d > 0.95, "propagated mask dice {}", d);
            }
        }
    }

    #[test]
    fn initial_dice_constraint_is_enforced() {
        let pair = generate_pair::<f64>(&SyntheticSpec::desk(11)).unwrap();
        let mut sum = 0.0;
        for (mm, fm) in pair.moving_masks.iter().zip(&pair.fixed_masks) {
            sum += dice(mm, fm).unwrap();
        }
        let mean = sum / pair.moving_masks.len() as f64;
        assert!(mean <= 0.6, "initial dice {}", mean);
    }

    #[test]
    fn gaussian_corruption_statistics_and_clipping() {
        let img = Volume::new(vec![256, 256], vec![0.5f64; 256 * 256]).unwrap();
        let sigma = 0.05;
        let noisy = corrupt_gaussian(&img, sigma, 99).unwrap();
        let diffs: Vec<f64> = noisy
            .data()
            .iter()
            .zip(img.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|&d| (d - mean) * (d - mean)).sum::<f64>()
            / (diffs.len() as f64 - 1.0);
        let std = var.sqrt();
        assert!((std - sigma).abs() / sigma < 0.02, "std {}", std);
        assert!(noisy.data().iter().all(|&x| (0.0..=1.0).contains(&x)));

        let same = corrupt_gaussian(&img, 0.0, 99).unwrap();
        assert_eq!(same.data(), img.data());
    }

    #[test]
    fn mixed_corruption_is_exactly_linear() {
        let a = Volume::new(vec![4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = Volume::new(vec![4], vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert_eq!(corrupt_mixed(&a, &b, 0.0).unwrap().data(), a.data());
        assert_eq!(corrupt_mixed(&a, &b, 1.0).unwrap().data(), b.data());
        let half = corrupt_mixed(&a, &b, 0.5).unwrap();
        assert_eq!(half.data(), &[0.5, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn preprocess_normalizes_crops_and_pads() {
        let v = Volume::new(vec![4], vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let n = preprocess(&v, &[4]).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);

        // center crop keeps the middle window
        let big = Volume::new(vec![6], (0..6).map(|i| i as f64).collect()).unwrap();
        let cropped = preprocess(&big, &[4]).unwrap();
        assert_eq!(cropped.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]); // values 1..=4 rescaled

        // padding centers the original; min-max runs over the padded grid
        let small = Volume::new(vec![2], vec![1.0, 3.0]).unwrap();
        let padded = preprocess(&small, &[4]).unwrap();
        assert_eq!(padded.data(), &[0.0, 1.0 / 3.0, 1.0, 0.0]);

        let flat = Volume::new(vec![3], vec![5.0; 3]).unwrap();
        let zeroed = preprocess(&flat, &[3]).unwrap();
        assert_eq!(zeroed.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn ttest_hand_cases() {
        let x = vec![1.0, 2.0, 3.0];
        assert_eq!(paired_ttest(&x, &x).unwrap(), 1.0);

        // d = [1, 1, 2]: t = 4, two-sided p with 2 dof = 1 - 4/sqrt(18)
        let y = vec![2.0, 3.0, 5.0];
        let p = paired_ttest(&y, &x).unwrap();
        let expect = 1.0 - 4.0 / 18.0f64.sqrt();
        assert!((p - expect).abs() < 1e-4, "p = {}, expect {}", p, expect);

        // wide separation, tiny variance
        let a = vec![0.0, 0.001, -0.001, 0.0005, 0.0, 0.0002, -0.0004, 0.0001];
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        assert!(paired_ttest(&a, &b).unwrap() < 1e-6);

        assert!(paired_ttest(&[1.0], &[2.0]).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn split_ratios_cover_everything() {
        let (tr, va, te) = split_counts(100);
        assert_eq!((tr, va, te), (56, 30, 14));
        for n in [1usize, 2, 3, 7, 10, 33, 250] {
            let (a, b, c) = split_counts(n);
            assert_eq!(a + b + c, n);
        }
    }

    #[test]
    fn experiment_rejects_single_sigma() {
        let backbone = BackboneConfig {
            spatial_dims: 2,
            encoder_channels: vec![4, 8, 8],
            decoder_channels: vec![8, 4],
            leaky_slope: 0.2,
            kernel_size: 3,
        };
        let weights = crate::network::init_weights::<f64>(&backbone, 1).unwrap();
        let store = SnapshotStore {
            snapshots: vec![crate::optimizer::Snapshot {
                iteration: 1,
                val_loss: -0.1,
                weights,
            }],
        };
        let img = Volume::from_fn(vec![16, 16], |p| (p[0] as f64 * 0.1).fract());
        let pairs = vec![(img.clone(), img)];
        let err = uncertainty_noise_experiment(
            &backbone,
            &store,
            &pairs,
            &[0.1],
            &IntegrationConfig::default(),
            &PosteriorConfig::default(),
            5,
        );
        assert!(err.is_err());
    }

    #[test]
    fn experiment_with_duplicated_snapshots_is_degenerate() {
        let backbone = BackboneConfig {
            spatial_dims: 2,
            encoder_channels: vec![4, 8, 8],
            decoder_channels: vec![8, 4],
            leaky_slope: 0.2,
            kernel_size: 3,
        };
        let weights = crate::network::init_weights::<f64>(&backbone, 1).unwrap();
        // identical snapshots: zero ensemble spread at every noise level
        let snap = crate::optimizer::Snapshot {
            iteration: 1,
            val_loss: -0.1,
            weights,
        };
        let store = SnapshotStore {
            snapshots: vec![snap.clone(), snap],
        };
        let img = Volume::from_fn(vec![16, 16], |p| ((p[0] + p[1]) as f64 * 0.07).fract());
        let pairs = vec![(img.clone(), img)];
        let out = uncertainty_noise_experiment(
            &backbone,
            &store,
            &pairs,
            &[0.0, 0.1, 0.2],
            &IntegrationConfig::default(),
            &PosteriorConfig::default(),
            5,
        )
        .unwrap();
        assert!(out.degenerate);
        assert!(out.pearson_r.is_none());
    }
}
