//! Diffeomorphic deformable image registration with posterior-sampled
//! uncertainty maps.
//!
//! The crate trains an encoder-decoder velocity-field predictor with a
//! noise-injected Adam optimizer, keeps the weight snapshots from the final
//! training iterations, and at registration time aggregates the snapshot
//! ensemble into a mean velocity field, a voxel-wise variance, and an
//! uncertainty map. Velocity fields are exponentiated into diffeomorphic
//! deformations by scaling and squaring.
//!
//! All numerics are generic over the scalar type ([`Scalar`]); tests and
//! oracles run at `f64`, training may run at `f32`. Concrete aliases for the
//! main domain types are exported below.

pub mod diffeo;
pub mod harness;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optimizer;
pub mod posterior;
pub mod error;
mod sampling;
pub mod scalar;
pub mod tensor;
pub mod volume;

pub use diffeo::{compose, compose_on_tape, integrate, integrate_on_tape, warp, IntegrationConfig};
pub use losses::{lcc, smoothness, total_loss, LossConfig};
pub use metrics::{dice, fold_percentage, jacobian_det, pearson, warp_mask};
pub use network::{forward, init_weights, BackboneConfig, WeightSet};
pub use optimizer::{adam_step, inject_noise, train, validate_schedule, AdamState, NoiseSchedule, SnapshotStore, TrainConfig};
pub use posterior::{register, PosteriorConfig, PosteriorSummary, RegistrationResult};
pub use harness::{corrupt_gaussian, corrupt_mixed, generate_pair, paired_ttest, preprocess, uncertainty_noise_experiment, SyntheticSpec};
pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{GradMap, Padding, Tape, TensorId};
pub use volume::{VectorField, Volume};

pub type Volume32 = Volume<f32>;
pub type Volume64 = Volume<f64>;
pub type VectorField32 = VectorField<f32>;
pub type VectorField64 = VectorField<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
