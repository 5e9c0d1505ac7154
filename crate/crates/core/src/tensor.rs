//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] in topological order; [`Tape::backward`]
//! walks the records once in reverse and returns a gradient map over the
//! leaves that requested gradients. All numerics are single-threaded and
//! deterministic: identical inputs produce bitwise-identical results.

use crate::error::{Error, Result};
use crate::sampling::{sample_displaced, sample_displaced_backward};
use crate::scalar::Scalar;
use crate::volume::strides;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Spatial padding mode for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so the output extent is `ceil(input / stride)`.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Conv {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        pad_begin: Vec<isize>,
    },
    LeakyRelu {
        input: TensorId,
        slope: T,
    },
    UpsampleNearest {
        input: TensorId,
        factor: usize,
    },
    ConcatCh {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    /// `out = num / max(den, eps)`; the denominator branch is flat where the
    /// guard is active.
    DivGuard {
        num: TensorId,
        den: TensorId,
        eps: T,
    },
    Scale {
        input: TensorId,
        factor: T,
    },
    AddScalar {
        input: TensorId,
    },
    MeanAll {
        input: TensorId,
    },
    SumSquares {
        input: TensorId,
    },
    /// Mean of squared forward differences over the spatial axes of a
    /// `[channels, spatial..]` tensor.
    GradSqMean {
        input: TensorId,
    },
    /// `out[c](p) = input[c]` sampled at `p + disp(p)`.
    Warp {
        input: TensorId,
        disp: TensorId,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by a backward pass, indexed by [`TensorId`].
#[derive(Debug)]
pub struct GradMap<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradMap<T> {
    /// Gradient of the loss w.r.t. the given tensor. Zero-filled for tensors
    /// that require grad but did not influence the loss; `None` for tensors
    /// that never requested gradients.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Record of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Value of a scalar (single-element) tensor.
    pub fn scalar_value(&self, id: TensorId) -> T {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} implies {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        id
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Cross-correlation style convolution over `[cin, spatial..]` input with
    /// a `[cout, cin, k..]` kernel and `[cout]` bias.
    pub fn conv(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        let geom = ConvGeom::resolve(
            self.shape(input),
            self.shape(kernel),
            self.shape(bias),
            stride,
            padding,
        )?;
        let mut out = vec![T::zero(); geom.cout * geom.out_vox];
        {
            let bias_data = self.data(bias);
            for co in 0..geom.cout {
                out[co * geom.out_vox..(co + 1) * geom.out_vox].fill(bias_data[co]);
            }
        }
        conv_forward(&geom, self.data(input), self.data(kernel), &mut out);
        let mut shape = Vec::with_capacity(geom.dim + 1);
        shape.push(geom.cout);
        shape.extend_from_slice(&geom.out_spatial);
        let rg = self.requires_grad(input) || self.requires_grad(kernel) || self.requires_grad(bias);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Conv {
                input,
                kernel,
                bias,
                stride,
                pad_begin: geom.pad_begin.clone(),
            },
        ))
    }

    pub fn leaky_relu(&mut self, input: TensorId, slope: T) -> Result<TensorId> {
        if slope <= T::zero() || slope >= T::one() {
            return Err(Error::invalid(
                "leaky_relu",
                format!("slope must lie in (0, 1), got {}", slope),
            ));
        }
        let data: Vec<T> = self
            .data(input)
            .iter()
            .map(|&x| if x >= T::zero() { x } else { slope * x })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(shape, data, rg, Op::LeakyRelu { input, slope }))
    }

    /// Replicate each voxel `factor` times along every spatial axis of a
    /// `[channels, spatial..]` tensor.
    pub fn upsample_nearest(&mut self, input: TensorId, factor: usize) -> Result<TensorId> {
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be >= 1"));
        }
        let in_shape = self.shape(input).to_vec();
        if in_shape.len() < 2 {
            return Err(Error::shape(
                "upsample_nearest",
                format!("need [channels, spatial..], got {:?}", in_shape),
            ));
        }
        let channels = in_shape[0];
        let in_sp = &in_shape[1..];
        let out_sp: Vec<usize> = in_sp.iter().map(|&e| e * factor).collect();
        let in_vox: usize = in_sp.iter().product();
        let out_vox: usize = out_sp.iter().product();
        let ist = strides(in_sp);
        let ost = strides(&out_sp);
        let dim = in_sp.len();

        let src = self.data(input);
        let mut out = vec![T::zero(); channels * out_vox];
        let mut q = vec![0usize; dim];
        for vo in 0..out_vox {
            let mut vi = 0usize;
            for d in 0..dim {
                vi += (q[d] / factor) * ist[d];
            }
            for c in 0..channels {
                out[c * out_vox + vo] = src[c * in_vox + vi];
            }
            for d in (0..dim).rev() {
                q[d] += 1;
                if q[d] < out_sp[d] {
                    break;
                }
                q[d] = 0;
            }
        }
        let _ = ost;
        let mut shape = Vec::with_capacity(dim + 1);
        shape.push(channels);
        shape.extend_from_slice(&out_sp);
        let rg = self.requires_grad(input);
        Ok(self.push(shape, out, rg, Op::UpsampleNearest { input, factor }))
    }

    /// Concatenate two `[channels, spatial..]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial shapes differ: {:?} vs {:?}", sa, sb),
            ));
        }
        if sb[0] == 0 {
            return Ok(a);
        }
        if sa[0] == 0 {
            return Ok(b);
        }
        let mut data = Vec::with_capacity(self.data(a).len() + self.data(b).len());
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        let mut shape = sa.clone();
        shape[0] = sa[0] + sb[0];
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, data, rg, Op::ConcatCh { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Elementwise `num / max(den, eps)` with `eps > 0`.
    pub fn div_guard(&mut self, num: TensorId, den: TensorId, eps: T) -> Result<TensorId> {
        if eps <= T::zero() {
            return Err(Error::invalid("div_guard", "eps must be positive"));
        }
        self.zip(
            "div_guard",
            num,
            den,
            |n, d| n / d.max(eps),
            |num, den| Op::DivGuard { num, den, eps },
        )
    }

    fn zip(
        &mut self,
        opname: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(TensorId, TensorId) -> Op<T>,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                opname,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, data, rg, make(a, b)))
    }

    pub fn scale(&mut self, input: TensorId, factor: T) -> TensorId {
        let data: Vec<T> = self.data(input).iter().map(|&x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, data, rg, Op::Scale { input, factor })
    }

    pub fn add_scalar(&mut self, input: TensorId, offset: T) -> TensorId {
        let data: Vec<T> = self.data(input).iter().map(|&x| x + offset).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, data, rg, Op::AddScalar { input })
    }

    /// Mean over all elements; returns a scalar tensor.
    pub fn mean_all(&mut self, input: TensorId) -> TensorId {
        let n = T::from_f64(self.data(input).len() as f64);
        let s: T = self.data(input).iter().copied().sum();
        let rg = self.requires_grad(input);
        self.push(vec![1], vec![s / n], rg, Op::MeanAll { input })
    }

    /// Sum of squared elements; returns a scalar tensor.
    pub fn sum_squares(&mut self, input: TensorId) -> TensorId {
        let s: T = self.data(input).iter().map(|&x| x * x).sum();
        let rg = self.requires_grad(input);
        self.push(vec![1], vec![s], rg, Op::SumSquares { input })
    }

    /// Mean squared forward-difference gradient magnitude of a
    /// `[channels, spatial..]` tensor, over all components and directions.
    pub fn grad_sq_mean(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "grad_sq_mean",
                format!("need [channels, spatial..], got {:?}", shape),
            ));
        }
        let (value, _count) = grad_sq_mean_forward(self.data(input), &shape);
        let rg = self.requires_grad(input);
        Ok(self.push(vec![1], vec![value], rg, Op::GradSqMean { input }))
    }

    /// Sample `input` (`[channels, spatial..]`) at positions displaced by
    /// `disp` (`[spatial.len(), spatial..]`), multilinear with clamping.
    pub fn warp(&mut self, input: TensorId, disp: TensorId) -> Result<TensorId> {
        let in_shape = self.shape(input).to_vec();
        let d_shape = self.shape(disp).to_vec();
        if in_shape.len() < 2 || d_shape.len() != in_shape.len() {
            return Err(Error::shape(
                "warp",
                format!("input {:?} vs displacement {:?}", in_shape, d_shape),
            ));
        }
        let spatial = in_shape[1..].to_vec();
        if d_shape[1..] != spatial[..] || d_shape[0] != spatial.len() {
            return Err(Error::shape(
                "warp",
                format!(
                    "displacement must be [{}, {:?}], got {:?}",
                    spatial.len(),
                    spatial,
                    d_shape
                ),
            ));
        }
        let channels = in_shape[0];
        let nvox: usize = spatial.iter().product();
        let mut out = vec![T::zero(); channels * nvox];
        sample_displaced(self.data(input), channels, &spatial, self.data(disp), &mut out);
        let rg = self.requires_grad(input) || self.requires_grad(disp);
        Ok(self.push(in_shape, out, rg, Op::Warp { input, disp }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss over every tensor that
    /// requested gradients. The tape itself is unchanged and reusable.
    pub fn backward(&self, loss: TensorId) -> Result<GradMap<T>> {
        if self.data(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        // zero-filled slots for every grad-requesting tensor so a constant
        // loss still reports all-zero gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad {
                grads[i] = Some(vec![T::zero(); node.data.len()]);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(GradMap { grads });
        }
        grads[loss.0].as_mut().unwrap()[0] = T::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            // temporarily take this node's gradient to appease the borrow
            // checker while we scatter into input slots
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(GradMap { grads })
    }

    fn accumulate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |grads: &[Option<Vec<T>>], id: TensorId| grads[id.0].is_some();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv {
                input,
                kernel,
                bias,
                stride,
                pad_begin,
            } => {
                let geom = ConvGeom {
                    dim: self.shape(*kernel).len() - 2,
                    cin: self.shape(*kernel)[1],
                    cout: self.shape(*kernel)[0],
                    in_spatial: self.shape(*input)[1..].to_vec(),
                    out_spatial: self.nodes[i].shape[1..].to_vec(),
                    k_spatial: self.shape(*kernel)[2..].to_vec(),
                    stride: *stride,
                    pad_begin: pad_begin.clone(),
                    in_vox: self.shape(*input)[1..].iter().product(),
                    out_vox: self.nodes[i].shape[1..].iter().product(),
                };
                if needs(grads, *bias) {
                    let gb = grads[bias.0].as_mut().unwrap();
                    for co in 0..geom.cout {
                        let mut acc = T::zero();
                        for x in &g[co * geom.out_vox..(co + 1) * geom.out_vox] {
                            acc += *x;
                        }
                        gb[co] += acc;
                    }
                }
                if needs(grads, *kernel) {
                    let input_data = self.data(*input);
                    let gk = grads[kernel.0].as_mut().unwrap();
                    conv_backward_kernel(&geom, input_data, g, gk);
                }
                if needs(grads, *input) {
                    let kernel_data = self.data(*kernel);
                    let gi = grads[input.0].as_mut().unwrap();
                    conv_backward_input(&geom, kernel_data, g, gi);
                }
            }
            Op::LeakyRelu { input, slope } => {
                if needs(grads, *input) {
                    let x = self.data(*input);
                    let gi = grads[input.0].as_mut().unwrap();
                    for ((gi, &gv), &xv) in gi.iter_mut().zip(g).zip(x) {
                        *gi += if xv >= T::zero() { gv } else { *slope * gv };
                    }
                }
            }
            Op::UpsampleNearest { input, factor } => {
                if needs(grads, *input) {
                    let in_shape = self.shape(*input).to_vec();
                    let channels = in_shape[0];
                    let in_sp = &in_shape[1..];
                    let out_sp: Vec<usize> = in_sp.iter().map(|&e| e * factor).collect();
                    let in_vox: usize = in_sp.iter().product();
                    let out_vox: usize = out_sp.iter().product();
                    let ist = strides(in_sp);
                    let dim = in_sp.len();
                    let gi = grads[input.0].as_mut().unwrap();
                    let mut q = vec![0usize; dim];
                    for vo in 0..out_vox {
                        let mut vi = 0usize;
                        for d in 0..dim {
                            vi += (q[d] / factor) * ist[d];
                        }
                        for c in 0..channels {
                            gi[c * in_vox + vi] += g[c * out_vox + vo];
                        }
                        for d in (0..dim).rev() {
                            q[d] += 1;
                            if q[d] < out_sp[d] {
                                break;
                            }
                            q[d] = 0;
                        }
                    }
                }
            }
            Op::ConcatCh { a, b } => {
                let na = self.data(*a).len();
                if needs(grads, *a) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (gv, &gx) in ga.iter_mut().zip(&g[..na]) {
                        *gv += gx;
                    }
                }
                if needs(grads, *b) {
                    let gb = grads[b.0].as_mut().unwrap();
                    for (gv, &gx) in gb.iter_mut().zip(&g[na..]) {
                        *gv += gx;
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if needs(grads, *id) {
                        let gt = grads[id.0].as_mut().unwrap();
                        for (gv, &gx) in gt.iter_mut().zip(g) {
                            *gv += gx;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(grads, *a) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (gv, &gx) in ga.iter_mut().zip(g) {
                        *gv += gx;
                    }
                }
                if needs(grads, *b) {
                    let gb = grads[b.0].as_mut().unwrap();
                    for (gv, &gx) in gb.iter_mut().zip(g) {
                        *gv -= gx;
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(grads, *a) {
                    let bd = self.data(*b);
                    let ga = grads[a.0].as_mut().unwrap();
                    for ((gv, &gx), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *gv += gx * bv;
                    }
                }
                if needs(grads, *b) {
                    let ad = self.data(*a);
                    let gb = grads[b.0].as_mut().unwrap();
                    for ((gv, &gx), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *gv += gx * av;
                    }
                }
            }
            Op::DivGuard { num, den, eps } => {
                let dd = self.data(*den);
                if needs(grads, *num) {
                    let gn = grads[num.0].as_mut().unwrap();
                    for ((gv, &gx), &dv) in gn.iter_mut().zip(g).zip(dd) {
                        *gv += gx / dv.max(*eps);
                    }
                }
                if needs(grads, *den) {
                    let nd = self.data(*num);
                    let gd = grads[den.0].as_mut().unwrap();
                    for (((gv, &gx), &dv), &nv) in gd.iter_mut().zip(g).zip(dd).zip(nd) {
                        if dv > *eps {
                            *gv -= gx * nv / (dv * dv);
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                if needs(grads, *input) {
                    let gi = grads[input.0].as_mut().unwrap();
                    for (gv, &gx) in gi.iter_mut().zip(g) {
                        *gv += *factor * gx;
                    }
                }
            }
            Op::AddScalar { input } => {
                if needs(grads, *input) {
                    let gi = grads[input.0].as_mut().unwrap();
                    for (gv, &gx) in gi.iter_mut().zip(g) {
                        *gv += gx;
                    }
                }
            }
            Op::MeanAll { input } => {
                if needs(grads, *input) {
                    let gi = grads[input.0].as_mut().unwrap();
                    let n = T::from_f64(gi.len() as f64);
                    let gv = g[0] / n;
                    for gt in gi.iter_mut() {
                        *gt += gv;
                    }
                }
            }
            Op::SumSquares { input } => {
                if needs(grads, *input) {
                    let x = self.data(*input);
                    let gi = grads[input.0].as_mut().unwrap();
                    let two = T::from_f64(2.0);
                    for (gt, &xv) in gi.iter_mut().zip(x) {
                        *gt += two * xv * g[0];
                    }
                }
            }
            Op::GradSqMean { input } => {
                if needs(grads, *input) {
                    let shape = self.shape(*input).to_vec();
                    let x = self.data(*input);
                    let gi = grads[input.0].as_mut().unwrap();
                    grad_sq_mean_backward(x, &shape, g[0], gi);
                }
            }
            Op::Warp { input, disp } => {
                let in_shape = self.shape(*input);
                let channels = in_shape[0];
                let spatial = in_shape[1..].to_vec();
                let input_data = self.data(*input);
                let disp_data = self.data(*disp);
                let need_in = needs(grads, *input);
                let need_disp = needs(grads, *disp);
                if !need_in && !need_disp {
                    return;
                }
                // split borrows: take both out, put back after
                let mut gin_buf = if need_in { grads[input.0].take() } else { None };
                let mut gd_buf = if need_disp { grads[disp.0].take() } else { None };
                sample_displaced_backward(
                    input_data,
                    channels,
                    &spatial,
                    disp_data,
                    g,
                    gin_buf.as_deref_mut(),
                    gd_buf.as_deref_mut(),
                );
                if let Some(b) = gin_buf {
                    grads[input.0] = Some(b);
                }
                if let Some(b) = gd_buf {
                    grads[disp.0] = Some(b);
                }
            }
        }
    }
}

// ── convolution internals ────────────────────────────────────────────

struct ConvGeom {
    dim: usize,
    cin: usize,
    cout: usize,
    in_spatial: Vec<usize>,
    out_spatial: Vec<usize>,
    k_spatial: Vec<usize>,
    stride: usize,
    pad_begin: Vec<isize>,
    in_vox: usize,
    out_vox: usize,
}

impl ConvGeom {
    fn resolve(
        in_shape: &[usize],
        k_shape: &[usize],
        b_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeom> {
        if k_shape.len() < 3 {
            return Err(Error::shape(
                "conv",
                format!("kernel must be [cout, cin, k..], got {:?}", k_shape),
            ));
        }
        let dim = k_shape.len() - 2;
        if in_shape.len() != dim + 1 {
            return Err(Error::shape(
                "conv",
                format!(
                    "input must be [cin, {} spatial axes], got {:?}",
                    dim, in_shape
                ),
            ));
        }
        if in_shape[0] != k_shape[1] {
            return Err(Error::shape(
                "conv",
                format!(
                    "input has {} channels but kernel expects {}",
                    in_shape[0], k_shape[1]
                ),
            ));
        }
        if b_shape != [k_shape[0]] {
            return Err(Error::shape(
                "conv",
                format!("bias must be [{}], got {:?}", k_shape[0], b_shape),
            ));
        }
        if in_shape.iter().any(|&e| e == 0) || k_shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid("conv", "zero-extent input or kernel"));
        }
        if stride == 0 {
            return Err(Error::invalid("conv", "stride must be >= 1"));
        }
        let in_spatial = in_shape[1..].to_vec();
        let k_spatial = k_shape[2..].to_vec();
        let mut out_spatial = Vec::with_capacity(dim);
        let mut pad_begin = Vec::with_capacity(dim);
        for d in 0..dim {
            let s = in_spatial[d];
            let k = k_spatial[d];
            match padding {
                Padding::Same => {
                    let o = s.div_ceil(stride);
                    let pad_total = ((o - 1) * stride + k).saturating_sub(s);
                    out_spatial.push(o);
                    pad_begin.push((pad_total / 2) as isize);
                }
                Padding::Valid => {
                    if k > s {
                        return Err(Error::shape(
                            "conv",
                            format!("kernel extent {} exceeds input extent {} (valid padding)", k, s),
                        ));
                    }
                    out_spatial.push((s - k) / stride + 1);
                    pad_begin.push(0);
                }
            }
        }
        Ok(ConvGeom {
            dim,
            cin: k_shape[1],
            cout: k_shape[0],
            in_vox: in_spatial.iter().product(),
            out_vox: out_spatial.iter().product(),
            in_spatial,
            out_spatial,
            k_spatial,
            stride,
            pad_begin,
        })
    }

    /// Output-index rectangle `[lo, hi)` per axis on which the kernel tap at
    /// `k` lands inside the input, plus the input offset of the tap.
    fn tap_rect(&self, k: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<isize>)> {
        let mut lo = Vec::with_capacity(self.dim);
        let mut hi = Vec::with_capacity(self.dim);
        let mut off = Vec::with_capacity(self.dim);
        for d in 0..self.dim {
            let o = k[d] as isize - self.pad_begin[d];
            let l = if o >= 0 {
                0
            } else {
                ((-o) as usize).div_ceil(self.stride)
            };
            let max_in = self.in_spatial[d] as isize - 1 - o;
            if max_in < 0 {
                return None;
            }
            let h = (max_in as usize / self.stride + 1).min(self.out_spatial[d]);
            if l >= h {
                return None;
            }
            lo.push(l);
            hi.push(h);
            off.push(o);
        }
        Some((lo, hi, off))
    }
}

/// Visit a tap rectangle, invoking `row` with (out flat base, in flat base,
/// row length) for each innermost-axis run.
fn for_each_row(
    geom: &ConvGeom,
    lo: &[usize],
    hi: &[usize],
    off: &[isize],
    mut row: impl FnMut(usize, usize, usize),
) {
    let dim = geom.dim;
    let ist = strides(&geom.in_spatial);
    let ost = strides(&geom.out_spatial);
    let last = dim - 1;
    let row_len = hi[last] - lo[last];
    let in_last_start = (lo[last] * geom.stride) as isize + off[last];

    let mut idx = lo[..last].to_vec();
    loop {
        let mut ob = lo[last] * ost[last];
        let mut ib = in_last_start as usize * ist[last];
        for d in 0..last {
            ob += idx[d] * ost[d];
            ib += ((idx[d] * geom.stride) as isize + off[d]) as usize * ist[d];
        }
        row(ob, ib, row_len);
        // odometer over the outer axes
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < hi[d] {
                break;
            }
            idx[d] = lo[d];
        }
    }
}

fn conv_forward<T: Scalar>(geom: &ConvGeom, input: &[T], kernel: &[T], out: &mut [T]) {
    let ktotal: usize = geom.k_spatial.iter().product();
    let kst = strides(&geom.k_spatial);
    let stride = geom.stride;
    let mut ktap = vec![0usize; geom.dim];
    for kflat in 0..ktotal {
        if let Some((lo, hi, off)) = geom.tap_rect(&ktap) {
            for co in 0..geom.cout {
                for ci in 0..geom.cin {
                    let w = kernel[(co * geom.cin + ci) * ktotal + kflat];
                    let in_ch = &input[ci * geom.in_vox..(ci + 1) * geom.in_vox];
                    let out_ch = &mut out[co * geom.out_vox..(co + 1) * geom.out_vox];
                    for_each_row(geom, &lo, &hi, &off, |ob, ib, len| {
                        if stride == 1 {
                            let src = &in_ch[ib..ib + len];
                            let dst = &mut out_ch[ob..ob + len];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += w * *s;
                            }
                        } else {
                            for j in 0..len {
                                out_ch[ob + j] += w * in_ch[ib + j * stride];
                            }
                        }
                    });
                }
            }
        }
        let _ = &kst;
        for d in (0..geom.dim).rev() {
            ktap[d] += 1;
            if ktap[d] < geom.k_spatial[d] {
                break;
            }
            ktap[d] = 0;
        }
    }
}

fn conv_backward_kernel<T: Scalar>(geom: &ConvGeom, input: &[T], gout: &[T], gkernel: &mut [T]) {
    let ktotal: usize = geom.k_spatial.iter().product();
    let stride = geom.stride;
    let mut ktap = vec![0usize; geom.dim];
    for kflat in 0..ktotal {
        if let Some((lo, hi, off)) = geom.tap_rect(&ktap) {
            for co in 0..geom.cout {
                for ci in 0..geom.cin {
                    let in_ch = &input[ci * geom.in_vox..(ci + 1) * geom.in_vox];
                    let g_ch = &gout[co * geom.out_vox..(co + 1) * geom.out_vox];
                    let mut acc = T::zero();
                    for_each_row(geom, &lo, &hi, &off, |ob, ib, len| {
                        if stride == 1 {
                            for (gv, iv) in g_ch[ob..ob + len].iter().zip(&in_ch[ib..ib + len]) {
                                acc += *gv * *iv;
                            }
                        } else {
                            for j in 0..len {
                                acc += g_ch[ob + j] * in_ch[ib + j * stride];
                            }
                        }
                    });
                    gkernel[(co * geom.cin + ci) * ktotal + kflat] += acc;
                }
            }
        }
        for d in (0..geom.dim).rev() {
            ktap[d] += 1;
            if ktap[d] < geom.k_spatial[d] {
                break;
            }
            ktap[d] = 0;
        }
    }
}

fn conv_backward_input<T: Scalar>(geom: &ConvGeom, kernel: &[T], gout: &[T], ginput: &mut [T]) {
    let ktotal: usize = geom.k_spatial.iter().product();
    let stride = geom.stride;
    let mut ktap = vec![0usize; geom.dim];
    for kflat in 0..ktotal {
        if let Some((lo, hi, off)) = geom.tap_rect(&ktap) {
            for co in 0..geom.cout {
                for ci in 0..geom.cin {
                    let w = kernel[(co * geom.cin + ci) * ktotal + kflat];
                    let g_ch = &gout[co * geom.out_vox..(co + 1) * geom.out_vox];
                    let gi_ch = &mut ginput[ci * geom.in_vox..(ci + 1) * geom.in_vox];
                    for_each_row(geom, &lo, &hi, &off, |ob, ib, len| {
                        if stride == 1 {
                            let src = &g_ch[ob..ob + len];
                            let dst = &mut gi_ch[ib..ib + len];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += w * *s;
                            }
                        } else {
                            for j in 0..len {
                                gi_ch[ib + j * stride] += w * g_ch[ob + j];
                            }
                        }
                    });
                }
            }
        }
        for d in (0..geom.dim).rev() {
            ktap[d] += 1;
            if ktap[d] < geom.k_spatial[d] {
                break;
            }
            ktap[d] = 0;
        }
    }
}

// ── gradient-magnitude internals ─────────────────────────────────────

fn grad_sq_mean_forward<T: Scalar>(data: &[T], shape: &[usize]) -> (T, usize) {
    let channels = shape[0];
    let spatial = &shape[1..];
    let nvox: usize = spatial.iter().product();
    let st = strides(spatial);
    let dim = spatial.len();
    let mut count = 0usize;
    for d in 0..dim {
        if spatial[d] > 1 {
            count += (spatial[d] - 1) * nvox / spatial[d];
        }
    }
    count *= channels;
    if count == 0 {
        return (T::zero(), 0);
    }
    let mut sum = T::zero();
    let mut p = vec![0usize; dim];
    for v in 0..nvox {
        for c in 0..channels {
            let base = c * nvox + v;
            for d in 0..dim {
                if p[d] + 1 < spatial[d] {
                    let diff = data[base + st[d]] - data[base];
                    sum += diff * diff;
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
    (sum / T::from_f64(count as f64), count)
}

fn grad_sq_mean_backward<T: Scalar>(data: &[T], shape: &[usize], gout: T, gin: &mut [T]) {
    let channels = shape[0];
    let spatial = &shape[1..];
    let nvox: usize = spatial.iter().product();
    let st = strides(spatial);
    let dim = spatial.len();
    let mut count = 0usize;
    for d in 0..dim {
        if spatial[d] > 1 {
            count += (spatial[d] - 1) * nvox / spatial[d];
        }
    }
    count *= channels;
    if count == 0 {
        return;
    }
    let scale = T::from_f64(2.0) * gout / T::from_f64(count as f64);
    let mut p = vec![0usize; dim];
    for v in 0..nvox {
        for c in 0..channels {
            let base = c * nvox + v;
            for d in 0..dim {
                if p[d] + 1 < spatial[d] {
                    let diff = data[base + st[d]] - data[base];
                    gin[base + st[d]] += scale * diff;
                    gin[base] -= scale * diff;
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
