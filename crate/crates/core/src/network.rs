//! Encoder-decoder backbone predicting a stationary velocity field from a
//! concatenated (moving, fixed) image pair.
//!
//! All convolutions share one kernel extent (default 3 per axis) and are
//! followed by a leaky ReLU, except the final velocity-producing layer.
//! Every encoder conv except the last downsamples with stride 2; the last is
//! a stride-1 conv at the coarsest scale. Each decoder conv follows a
//! nearest-neighbor upsample, with encoder skip connections concatenated at
//! the matching resolutions; the input pair is concatenated once more before
//! the final layer. With the default 3-D configuration this backbone has
//! exactly 265,237 trainable parameters.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tape, TensorId};
use crate::volume::{VectorField, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// 2 or 3.
    pub spatial_dims: usize,
    /// Widths of the encoder convs; all but the last use stride 2, the last
    /// is the stride-1 bottleneck. Downsample count = `len - 1`.
    pub encoder_channels: Vec<usize>,
    /// Widths of the decoder convs, one per upsample; must have
    /// `encoder_channels.len() - 1` entries.
    pub decoder_channels: Vec<usize>,
    /// Negative slope of the leaky ReLU activations.
    pub leaky_slope: f64,
    /// Kernel extent per spatial axis.
    pub kernel_size: usize,
}

impl BackboneConfig {
    pub fn default_2d() -> Self {
        BackboneConfig {
            spatial_dims: 2,
            encoder_channels: vec![16, 32, 32, 32, 32],
            decoder_channels: vec![32, 32, 32, 16],
            leaky_slope: 0.2,
            kernel_size: 3,
        }
    }

    pub fn default_3d() -> Self {
        BackboneConfig {
            spatial_dims: 3,
            ..Self::default_2d()
        }
    }

    /// Velocity components produced by the final layer.
    pub fn output_channels(&self) -> usize {
        self.spatial_dims
    }

    pub fn downsamples(&self) -> usize {
        self.encoder_channels.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_dims < 1 || self.spatial_dims > 3 {
            return Err(Error::InvalidConfig(format!(
                "spatial_dims must be 1, 2 or 3, got {}",
                self.spatial_dims
            )));
        }
        if self.encoder_channels.len() < 2 || self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(format!(
                "encoder_channels needs >= 2 positive entries, got {:?}",
                self.encoder_channels
            )));
        }
        if self.decoder_channels.len() != self.encoder_channels.len() - 1
            || self.decoder_channels.iter().any(|&c| c == 0)
        {
            return Err(Error::InvalidConfig(format!(
                "decoder_channels needs {} positive entries (one per upsample), got {:?}",
                self.encoder_channels.len() - 1,
                self.decoder_channels
            )));
        }
        if self.leaky_slope <= 0.0 || self.leaky_slope >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Conv layers in execution order.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let enc = &self.encoder_channels;
        let dec = &self.decoder_channels;
        let n_enc = enc.len();
        let n_skips = n_enc - 2; // every stride-2 conv except the deepest
        let mut layers = Vec::new();
        let mut cin = 2usize;
        for (i, &cout) in enc.iter().enumerate() {
            let stride = if i + 1 < n_enc { 2 } else { 1 };
            layers.push(LayerSpec {
                name: format!("enc{}", i),
                cin,
                cout,
                stride,
                activated: true,
            });
            cin = cout;
        }
        for (j, &cout) in dec.iter().enumerate() {
            // skips are consumed from the deepest available outwards
            let skip = if j < n_skips {
                enc[n_skips - 1 - j]
            } else {
                0
            };
            layers.push(LayerSpec {
                name: format!("dec{}", j),
                cin: cin + skip,
                cout,
                stride: 1,
                activated: true,
            });
            cin = cout;
        }
        layers.push(LayerSpec {
            name: "flow".to_string(),
            cin: cin + 2,
            cout: self.output_channels(),
            stride: 1,
            activated: false,
        });
        Ok(layers)
    }

    /// Total trainable parameter count (kernels + biases).
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.parameter_breakdown()?.iter().map(|(_, n)| n).sum())
    }

    /// Per-layer parameter counts, for reporting.
    pub fn parameter_breakdown(&self) -> Result<Vec<(String, usize)>> {
        let k_elems = self.kernel_size.pow(self.spatial_dims as u32);
        Ok(self
            .layers()?
            .iter()
            .map(|l| (l.name.clone(), l.cout * l.cin * k_elems + l.cout))
            .collect())
    }
}

/// One convolution layer of the backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub activated: bool,
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of kernel/bias tensors for all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<T: Scalar> {
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> WeightSet<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Check that the tensor shapes match the architecture.
    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        let layers = config.layers()?;
        if self.params.len() != layers.len() * 2 {
            return Err(Error::InvalidConfig(format!(
                "weight set has {} tensors, architecture expects {}",
                self.params.len(),
                layers.len() * 2
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            let kernel = &self.params[2 * i];
            let bias = &self.params[2 * i + 1];
            let mut kshape = vec![layer.cout, layer.cin];
            kshape.extend(std::iter::repeat(config.kernel_size).take(config.spatial_dims));
            if kernel.shape != kshape || bias.shape != [layer.cout] {
                return Err(Error::InvalidConfig(format!(
                    "tensor shapes for layer {} do not match the configuration",
                    layer.name
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        WeightSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Reproducible weight initialization.
///
/// Hidden kernels draw from a He-style normal scaled for the leaky ReLU;
/// the final velocity layer draws from a tiny-variance normal (std 1e-5) so
/// a fresh network starts near the identity deformation. Biases are zero.
pub fn init_weights<T: Scalar>(config: &BackboneConfig, seed: u64) -> Result<WeightSet<T>> {
    let layers = config.layers()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k_elems = config.kernel_size.pow(config.spatial_dims as u32);
    let mut params = Vec::with_capacity(layers.len() * 2);
    for layer in &layers {
        let fan_in = (layer.cin * k_elems) as f64;
        let std = if layer.activated {
            (2.0 / ((1.0 + config.leaky_slope * config.leaky_slope) * fan_in)).sqrt()
        } else {
            1e-5
        };
        let mut kshape = vec![layer.cout, layer.cin];
        kshape.extend(std::iter::repeat(config.kernel_size).take(config.spatial_dims));
        let n: usize = kshape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::standard_normal(&mut rng) * T::from_f64(std))
            .collect();
        params.push(Param {
            name: format!("{}.kernel", layer.name),
            shape: kshape,
            data,
        });
        params.push(Param {
            name: format!("{}.bias", layer.name),
            shape: vec![layer.cout],
            data: vec![T::zero(); layer.cout],
        });
    }
    Ok(WeightSet { params })
}

/// Stack a (moving, fixed) pair into the `[2, spatial..]` network input.
pub fn stack_pair<T: Scalar>(moving: &Volume<T>, fixed: &Volume<T>) -> Result<(Vec<usize>, Vec<T>)> {
    if moving.shape() != fixed.shape() {
        return Err(Error::shape(
            "stack_pair",
            format!("moving {:?} vs fixed {:?}", moving.shape(), fixed.shape()),
        ));
    }
    let mut shape = vec![2usize];
    shape.extend_from_slice(moving.shape());
    let mut data = Vec::with_capacity(2 * moving.len());
    data.extend_from_slice(moving.data());
    data.extend_from_slice(fixed.data());
    Ok((shape, data))
}

/// Shape check shared by forward passes: every spatial extent must be
/// divisible by `2^downsamples`.
pub fn check_divisible(config: &BackboneConfig, spatial: &[usize]) -> Result<()> {
    if spatial.len() != config.spatial_dims {
        return Err(Error::shape(
            "forward",
            format!(
                "configuration is {}-dimensional but input is {:?}",
                config.spatial_dims, spatial
            ),
        ));
    }
    let div = 1usize << config.downsamples();
    if spatial.iter().any(|&e| e % div != 0 || e == 0) {
        let hint: Vec<usize> = spatial.iter().map(|&e| e.div_ceil(div).max(1) * div).collect();
        return Err(Error::shape(
            "forward",
            format!(
                "spatial shape {:?} must be divisible by {} (pad to {:?})",
                spatial, div, hint
            ),
        ));
    }
    Ok(())
}

/// Run the backbone on a tape. `input` is the `[2, spatial..]` image pair;
/// `weight_ids` holds the leaf ids of every parameter in [`WeightSet`] order.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &BackboneConfig,
    input: TensorId,
    weight_ids: &[TensorId],
) -> Result<TensorId> {
    let layers = config.layers()?;
    if weight_ids.len() != layers.len() * 2 {
        return Err(Error::InvalidConfig(format!(
            "expected {} parameter tensors, got {}",
            layers.len() * 2,
            weight_ids.len()
        )));
    }
    check_divisible(config, &tape.shape(input)[1..].to_vec())?;
    let slope = T::from_f64(config.leaky_slope);
    let n_enc = config.encoder_channels.len();
    let n_skips = n_enc - 2;

    let mut skips: Vec<TensorId> = Vec::with_capacity(n_skips);
    let mut x = input;
    let mut li = 0usize;
    for i in 0..n_enc {
        let layer = &layers[li];
        x = tape.conv(x, weight_ids[2 * li], weight_ids[2 * li + 1], layer.stride, Padding::Same)?;
        x = tape.leaky_relu(x, slope)?;
        if i < n_skips {
            skips.push(x);
        }
        li += 1;
    }
    for j in 0..config.decoder_channels.len() {
        x = tape.upsample_nearest(x, 2)?;
        if j < n_skips {
            x = tape.concat_channels(x, skips[n_skips - 1 - j])?;
        }
        let layer = &layers[li];
        x = tape.conv(x, weight_ids[2 * li], weight_ids[2 * li + 1], layer.stride, Padding::Same)?;
        x = tape.leaky_relu(x, slope)?;
        li += 1;
    }
    x = tape.concat_channels(x, input)?;
    let v = tape.conv(x, weight_ids[2 * li], weight_ids[2 * li + 1], 1, Padding::Same)?;
    Ok(v)
}

/// Load a weight set onto a tape as leaves and run the backbone.
pub fn forward_with_weights<T: Scalar>(
    tape: &mut Tape<T>,
    config: &BackboneConfig,
    input: TensorId,
    weights: &WeightSet<T>,
    requires_grad: bool,
) -> Result<(TensorId, Vec<TensorId>)> {
    weights.validate(config)?;
    let mut ids = Vec::with_capacity(weights.params.len());
    for p in &weights.params {
        ids.push(tape.leaf(p.shape.clone(), p.data.clone(), requires_grad)?);
    }
    let v = forward_on_tape(tape, config, input, &ids)?;
    Ok((v, ids))
}

/// Predict the velocity field for an image pair.
pub fn forward<T: Scalar>(
    config: &BackboneConfig,
    moving: &Volume<T>,
    fixed: &Volume<T>,
    weights: &WeightSet<T>,
) -> Result<VectorField<T>> {
    let (shape, data) = stack_pair(moving, fixed)?;
    let spatial = shape[1..].to_vec();
    let mut tape = Tape::new();
    let input = tape.leaf(shape, data, false)?;
    let (v, _) = forward_with_weights(&mut tape, config, input, weights, false)?;
    let out = tape.data(v).to_vec();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "network forward",
            iteration: None,
        });
    }
    VectorField::new(spatial, config.output_channels(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_3d_has_the_published_parameter_count() {
        let cfg = BackboneConfig::default_3d();
        assert_eq!(cfg.parameter_count().unwrap(), 265_237);
    }

    #[test]
    fn forward_shape_matches_input_grid() {
        let cfg = BackboneConfig::default_2d();
        let w = init_weights::<f64>(&cfg, 7).unwrap();
        let m = Volume::zeros(vec![32, 32]);
        let f = Volume::zeros(vec![32, 32]);
        let v = forward(&cfg, &m, &f, &w).unwrap();
        assert_eq!(v.spatial_shape(), &[32, 32]);
        assert_eq!(v.components(), 2);
    }

    #[test]
    fn indivisible_shape_errors_with_padding_hint() {
        let cfg = BackboneConfig::default_2d();
        let w = init_weights::<f64>(&cfg, 7).unwrap();
        let m = Volume::zeros(vec![30, 32]);
        let f = Volume::zeros(vec![30, 32]);
        let err = forward(&cfg, &m, &f, &w).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pad to [32, 32]"), "got: {}", msg);
    }

    #[test]
    fn zero_weights_give_zero_velocity() {
        let cfg = BackboneConfig::default_2d();
        let mut w = init_weights::<f64>(&cfg, 7).unwrap();
        for p in &mut w.params {
            p.data.fill(0.0);
        }
        let m = Volume::from_fn(vec![16, 16], |p| (p[0] as f64 * 0.1).sin().abs());
        let f = Volume::from_fn(vec![16, 16], |p| (p[1] as f64 * 0.2).cos().abs());
        let v = forward(&cfg, &m, &f, &w).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn same_seed_reproduces_weights_different_seed_does_not() {
        let cfg = BackboneConfig::default_2d();
        let a = init_weights::<f64>(&cfg, 42).unwrap();
        let b = init_weights::<f64>(&cfg, 42).unwrap();
        let c = init_weights::<f64>(&cfg, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fresh_networks_start_near_identity() {
        let cfg = BackboneConfig::default_2d();
        let m = Volume::from_fn(vec![16, 16], |p| ((p[0] + p[1]) as f64 * 0.07).sin().abs());
        let f = Volume::from_fn(vec![16, 16], |p| ((p[0] * p[1]) as f64 * 0.03).cos().abs());
        for seed in 0..100 {
            let w = init_weights::<f64>(&cfg, seed).unwrap();
            let v = forward(&cfg, &m, &f, &w).unwrap();
            assert!(
                v.max_abs() < 0.5,
                "seed {} produced velocity magnitude {}",
                seed,
                v.max_abs()
            );
        }
    }

    #[test]
    fn swapping_the_pair_changes_the_output() {
        let cfg = BackboneConfig::default_2d();
        let w = init_weights::<f64>(&cfg, 3).unwrap();
        let m = Volume::from_fn(vec![16, 16], |p| (p[0] as f64 * 0.13).sin().abs());
        let f = Volume::from_fn(vec![16, 16], |p| (p[1] as f64 * 0.11).cos().abs());
        let v_mf = forward(&cfg, &m, &f, &w).unwrap();
        let v_fm = forward(&cfg, &f, &m, &w).unwrap();
        let diff = v_mf
            .data()
            .iter()
            .zip(v_fm.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-12);
    }
}
