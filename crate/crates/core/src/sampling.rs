//! Multilinear sampling of channel-major grids at displaced positions.
//!
//! Shared by the differentiable warp op and the plain field/volume
//! transforms. Sample coordinates are clamped to the grid (border
//! replication); the coordinate derivative is zero where the clamp is
//! active.

use crate::scalar::Scalar;
use crate::volume::strides;

const MAX_DIM: usize = 3;

struct AxisSample<T> {
    i0: usize,
    frac: T,
    /// false when the raw coordinate fell outside the grid; the sampled
    /// value is then constant in the coordinate.
    live: bool,
}

#[inline]
fn axis_sample<T: Scalar>(pos: T, extent: usize) -> AxisSample<T> {
    let max = T::from_f64((extent - 1) as f64);
    let clamped = pos.max(T::zero()).min(max);
    let live = pos >= T::zero() && pos <= max;
    let mut i0 = clamped.floor().as_f64() as usize;
    if extent >= 2 && i0 > extent - 2 {
        i0 = extent - 2;
    }
    if extent == 1 {
        i0 = 0;
    }
    let frac = clamped - T::from_f64(i0 as f64);
    AxisSample { i0, frac, live }
}

/// `out[c][p] = input[c]` sampled at `p + disp(p)` for every voxel `p`.
///
/// `input` is `[channels, spatial]` flat, `disp` is `[spatial.len(), spatial]`
/// flat, `out` must have `channels * nvox` elements.
pub(crate) fn sample_displaced<T: Scalar>(
    input: &[T],
    channels: usize,
    spatial: &[usize],
    disp: &[T],
    out: &mut [T],
) {
    let dim = spatial.len();
    debug_assert!(dim >= 1 && dim <= MAX_DIM);
    let nvox: usize = spatial.iter().product();
    let st = strides(spatial);
    let corners = 1usize << dim;

    let mut p = [0usize; MAX_DIM];
    for v in 0..nvox {
        let mut i0 = [0usize; MAX_DIM];
        let mut frac = [T::zero(); MAX_DIM];
        for d in 0..dim {
            let pos = T::from_f64(p[d] as f64) + disp[d * nvox + v];
            let s = axis_sample(pos, spatial[d]);
            i0[d] = s.i0;
            frac[d] = s.frac;
        }
        for mask in 0..corners {
            let mut w = T::one();
            let mut idx = 0usize;
            for d in 0..dim {
                if mask & (1 << d) != 0 {
                    w = w * frac[d];
                    idx += (i0[d] + 1).min(spatial[d] - 1) * st[d];
                } else {
                    w = w * (T::one() - frac[d]);
                    idx += i0[d] * st[d];
                }
            }
            for c in 0..channels {
                out[c * nvox + v] += w * input[c * nvox + idx];
            }
        }
        for d in (0..dim).rev() {
            p[d] += 1;
            if p[d] < spatial[d] {
                break;
            }
            p[d] = 0;
        }
    }
}

/// Adjoint of [`sample_displaced`].
///
/// Accumulates into `grad_input` (same layout as `input`) and `grad_disp`
/// (same layout as `disp`); either may be `None` to skip.
pub(crate) fn sample_displaced_backward<T: Scalar>(
    input: &[T],
    channels: usize,
    spatial: &[usize],
    disp: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_disp: Option<&mut [T]>,
) {
    let dim = spatial.len();
    let nvox: usize = spatial.iter().product();
    let st = strides(spatial);
    let corners = 1usize << dim;

    let mut p = [0usize; MAX_DIM];
    for v in 0..nvox {
        let mut i0 = [0usize; MAX_DIM];
        let mut frac = [T::zero(); MAX_DIM];
        let mut live = [false; MAX_DIM];
        for d in 0..dim {
            let pos = T::from_f64(p[d] as f64) + disp[d * nvox + v];
            let s = axis_sample(pos, spatial[d]);
            i0[d] = s.i0;
            frac[d] = s.frac;
            live[d] = s.live;
        }
        for mask in 0..corners {
            let mut idx = 0usize;
            for d in 0..dim {
                if mask & (1 << d) != 0 {
                    idx += (i0[d] + 1).min(spatial[d] - 1) * st[d];
                } else {
                    idx += i0[d] * st[d];
                }
            }
            // weight and its per-axis partials
            let mut w = T::one();
            for d in 0..dim {
                let f = if mask & (1 << d) != 0 {
                    frac[d]
                } else {
                    T::one() - frac[d]
                };
                w = w * f;
            }
            if let Some(gin) = grad_input.as_deref_mut() {
                for c in 0..channels {
                    gin[c * nvox + idx] += w * grad_out[c * nvox + v];
                }
            }
            if let Some(gd) = grad_disp.as_deref_mut() {
                for d in 0..dim {
                    if !live[d] || spatial[d] == 1 {
                        continue;
                    }
                    // d w / d frac[d]: product of the other factors, signed
                    let mut dw = T::one();
                    for e in 0..dim {
                        if e == d {
                            continue;
                        }
                        let f = if mask & (1 << e) != 0 {
                            frac[e]
                        } else {
                            T::one() - frac[e]
                        };
                        dw = dw * f;
                    }
                    if mask & (1 << d) == 0 {
                        dw = -dw;
                    }
                    let mut acc = T::zero();
                    for c in 0..channels {
                        acc += grad_out[c * nvox + v] * input[c * nvox + idx];
                    }
                    gd[d * nvox + v] += dw * acc;
                }
            }
        }
        for d in (0..dim).rev() {
            p[d] += 1;
            if p[d] < spatial[d] {
                break;
            }
            p[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_displacement_reproduces_input() {
        let input = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let disp = vec![0.0; 12];
        let mut out = vec![0.0; 6];
        sample_displaced(&input, 1, &[2, 3], &disp, &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn midpoint_linear_interpolation_1d() {
        // image [0, 10], sample at 0.5 -> 5
        let input = vec![0.0f64, 10.0];
        let disp = vec![0.5, -0.5];
        let mut out = vec![0.0; 2];
        sample_displaced(&input, 1, &[2], &disp, &mut out);
        assert!((out[0] - 5.0).abs() < 1e-12);
        assert!((out[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_grid_clamps_to_border() {
        let input = vec![1.0, 2.0, 3.0];
        let disp = vec![-5.0, 0.0, 5.0];
        let mut out = vec![0.0; 3];
        sample_displaced(&input, 1, &[3], &disp, &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }
}
