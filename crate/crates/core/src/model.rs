//! The capsule network: Conv1 → primary capsules → projection → routing →
//! output capsules, plus the optional fully connected reconstruction decoder.
//!
//! Every layer has a hand-written backward pass; the graph is fixed, so there
//! is no tape. Capsule `i` of the primary layer is laid out as
//! `i = t·H₂·W₂ + y·W₂ + x` for capsule type `t` at grid cell `(y, x)`, taking
//! channels `t·d₁ .. (t+1)·d₁` of the primary convolution.

use rand_distr::{Distribution, Normal};

use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::data::LabelSet;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::routing::{
    dynamic_route, dynamic_route_backward, weighted_sum, DynamicRouting, RoutingCoefficients,
};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

pub const LEAKY_SLOPE: f64 = 0.1;

/// `s = (‖v‖² / (1 + ‖v‖²)) · v / ‖v‖`, with `squash(0) = 0`.
pub fn squash_into<T: Scalar>(v: &[T], out: &mut [T]) {
    let n2: T = v.iter().map(|&x| x * x).sum();
    if n2 == T::zero() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let n = n2.sqrt();
    let scale = n / (T::one() + n2);
    for (o, &x) in out.iter_mut().zip(v) {
        *o = scale * x;
    }
}

/// Vector-Jacobian product of squash at `v`: writes `Jᵀ ds` into `dv`.
/// The Jacobian at `v = 0` is taken to be zero.
pub fn squash_backward_into<T: Scalar>(v: &[T], ds: &[T], dv: &mut [T]) {
    let n2: T = v.iter().map(|&x| x * x).sum();
    if n2 == T::zero() {
        dv.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let n = n2.sqrt();
    let one = T::one();
    let g = n / (one + n2);
    let h = (one - n2) / ((one + n2) * (one + n2) * n);
    let proj: T = v.iter().zip(ds).map(|(&a, &b)| a * b).sum();
    for ((o, &x), &d) in dv.iter_mut().zip(v).zip(ds) {
        *o = g * d + h * proj * x;
    }
}

/// Squashes every trailing-axis vector of `t`.
pub fn squash<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let d = *t.shape().last().expect("rank >= 1");
    let mut out = Tensor::zeros_like(t);
    for (v, o) in t
        .data()
        .chunks_exact(d)
        .zip(out.data_mut().chunks_exact_mut(d))
    {
        squash_into(v, o);
    }
    out
}

pub fn squash_backward<T: Scalar>(v: &Tensor<T>, ds: &Tensor<T>) -> Result<Tensor<T>> {
    ds.expect_shape("squash_backward", v.shape())?;
    let d = *v.shape().last().expect("rank >= 1");
    let mut dv = Tensor::zeros_like(v);
    for ((vi, di), o) in v
        .data()
        .chunks_exact(d)
        .zip(ds.data().chunks_exact(d))
        .zip(dv.data_mut().chunks_exact_mut(d))
    {
        squash_backward_into(vi, di, o);
    }
    Ok(dv)
}

/// L2 norm of every trailing-axis vector.
pub fn lengths<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    let shape = s.shape();
    let d = shape[shape.len() - 1];
    let lead = &shape[..shape.len() - 1];
    let data = s
        .data()
        .chunks_exact(d)
        .map(|v| v.iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    Tensor::new(if lead.is_empty() { &[1] } else { lead }, data).expect("same element count")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    fn slope<T: Scalar>(self) -> T {
        match self {
            Activation::Relu => T::zero(),
            Activation::LeakyRelu => T::lit(LEAKY_SLOPE),
        }
    }
}

/// Network geometry. The defaults are the full MNIST architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_channels: usize,
    pub kernel: usize,
    pub primary_stride: usize,
    pub primary_types: usize,
    pub primary_dim: usize,
    pub output_dim: usize,
    pub classes: usize,
    pub activation: Activation,
    pub recon: bool,
    pub recon_hidden: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            height: 28,
            width: 28,
            conv1_channels: 256,
            kernel: 9,
            primary_stride: 2,
            primary_types: 32,
            primary_dim: 8,
            output_dim: 16,
            classes: 10,
            activation: Activation::Relu,
            recon: true,
            recon_hidden: [512, 1024],
        }
    }
}

impl ModelConfig {
    /// The reduced architecture used for quick runs: 32 Conv1 filters, 8 capsule types.
    pub fn reduced() -> Self {
        ModelConfig {
            conv1_channels: 32,
            primary_types: 8,
            ..ModelConfig::default()
        }
    }

    pub fn conv1_spec(&self) -> ConvSpec {
        ConvSpec::square(self.in_channels, self.conv1_channels, self.kernel, 1)
    }

    /// Strided capsule convolution; a trailing row/column that does not fill
    /// a stride is dropped (20×20 → 6×6 for a 9×9 kernel at stride 2).
    pub fn primary_spec(&self) -> ConvSpec {
        ConvSpec {
            truncate: true,
            ..ConvSpec::square(
                self.conv1_channels,
                self.primary_types * self.primary_dim,
                self.kernel,
                self.primary_stride,
            )
        }
    }

    /// Primary-capsule grid `(H₂, W₂)`.
    pub fn primary_grid(&self) -> Result<(usize, usize)> {
        let (h1, w1) = self.conv1_spec().output_hw(self.height, self.width)?;
        self.primary_spec().output_hw(h1, w1)
    }

    /// Number of primary capsules m.
    pub fn num_primary(&self) -> Result<usize> {
        let (h2, w2) = self.primary_grid()?;
        Ok(self.primary_types * h2 * w2)
    }

    pub fn pixels(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("conv1_channels", self.conv1_channels),
            ("kernel", self.kernel),
            ("primary_stride", self.primary_stride),
            ("primary_types", self.primary_types),
            ("primary_dim", self.primary_dim),
            ("output_dim", self.output_dim),
            ("classes", self.classes),
            ("recon_hidden[0]", self.recon_hidden[0]),
            ("recon_hidden[1]", self.recon_hidden[1]),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        self.primary_grid().map(|_| ())
    }
}

/// Weights of the three-layer decoder: hidden₁, hidden₂, pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
}

/// All trainable tensors. `coefficients` is the persistent routing matrix B;
/// it is absent in dynamic-routing models. Gradients reuse this type with
/// `coefficients = None`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsNetParams<T> {
    pub conv1_kernels: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub primary_kernels: Tensor<T>,
    pub primary_bias: Tensor<T>,
    /// m × n_d × d₂ × d₁
    pub weights: Tensor<T>,
    pub recon: Option<ReconParams<T>>,
    pub coefficients: Option<RoutingCoefficients<T>>,
}

fn normal_tensor<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    seeds: SeedStream,
    label: &str,
) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    let mut rng = seeds.split(label).rng();
    Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)))
}

impl<T: Scalar> CapsNetParams<T> {
    /// Normal(0, 1/sqrt(fan_in)) weights, zero biases; B ~ Normal(0, 1/m) when requested.
    pub fn init(cfg: &ModelConfig, with_coefficients: bool, seeds: SeedStream) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.num_primary()?;
        let c1 = cfg.conv1_spec();
        let pc = cfg.primary_spec();
        let k2 = cfg.kernel * cfg.kernel;
        let recon = cfg.recon.then(|| {
            let [h1, h2] = cfg.recon_hidden;
            let input = cfg.classes * cfg.output_dim;
            ReconParams {
                w1: normal_tensor(&[h1, input], input, seeds, "init.recon.w1"),
                b1: Tensor::zeros(&[h1]),
                w2: normal_tensor(&[h2, h1], h1, seeds, "init.recon.w2"),
                b2: Tensor::zeros(&[h2]),
                w3: normal_tensor(&[cfg.pixels(), h2], h2, seeds, "init.recon.w3"),
                b3: Tensor::zeros(&[cfg.pixels()]),
            }
        });
        Ok(CapsNetParams {
            conv1_kernels: normal_tensor(
                &c1.kernel_shape(),
                cfg.in_channels * k2,
                seeds,
                "init.conv1",
            ),
            conv1_bias: Tensor::zeros(&[cfg.conv1_channels]),
            primary_kernels: normal_tensor(
                &pc.kernel_shape(),
                cfg.conv1_channels * k2,
                seeds,
                "init.primary",
            ),
            primary_bias: Tensor::zeros(&[pc.out_channels]),
            weights: normal_tensor(
                &[m, cfg.classes, cfg.output_dim, cfg.primary_dim],
                cfg.primary_dim,
                seeds,
                "init.weights",
            ),
            recon,
            coefficients: with_coefficients
                .then(|| RoutingCoefficients::init(m, cfg.classes, seeds)),
        })
    }

    /// Zero tensors shaped like every trainable weight (no coefficients).
    pub fn zeros_like(&self) -> Self {
        CapsNetParams {
            conv1_kernels: Tensor::zeros_like(&self.conv1_kernels),
            conv1_bias: Tensor::zeros_like(&self.conv1_bias),
            primary_kernels: Tensor::zeros_like(&self.primary_kernels),
            primary_bias: Tensor::zeros_like(&self.primary_bias),
            weights: Tensor::zeros_like(&self.weights),
            recon: self.recon.as_ref().map(|r| ReconParams {
                w1: Tensor::zeros_like(&r.w1),
                b1: Tensor::zeros_like(&r.b1),
                w2: Tensor::zeros_like(&r.w2),
                b2: Tensor::zeros_like(&r.b2),
                w3: Tensor::zeros_like(&r.w3),
                b3: Tensor::zeros_like(&r.b3),
            }),
            coefficients: None,
        }
    }

    /// Named view of the gradient-trained tensors (everything but B), in a fixed order.
    pub fn weight_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("conv1.kernels", &self.conv1_kernels),
            ("conv1.bias", &self.conv1_bias),
            ("primary.kernels", &self.primary_kernels),
            ("primary.bias", &self.primary_bias),
            ("capsules.weights", &self.weights),
        ];
        if let Some(r) = &self.recon {
            out.extend([
                ("recon.w1", &r.w1),
                ("recon.b1", &r.b1),
                ("recon.w2", &r.w2),
                ("recon.b2", &r.b2),
                ("recon.w3", &r.w3),
                ("recon.b3", &r.b3),
            ]);
        }
        out
    }

    pub fn weight_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.conv1_kernels,
            &mut self.conv1_bias,
            &mut self.primary_kernels,
            &mut self.primary_bias,
            &mut self.weights,
        ];
        if let Some(r) = &mut self.recon {
            out.extend([
                &mut r.w1, &mut r.b1, &mut r.w2, &mut r.b2, &mut r.w3, &mut r.b3,
            ]);
        }
        out
    }

    pub fn num_primary(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn is_finite(&self) -> bool {
        self.weight_tensors().iter().all(|(_, t)| t.is_finite())
            && self
                .coefficients
                .as_ref()
                .is_none_or(|b| b.tensor().is_finite())
    }
}

/// Intermediates of Conv1 and the primary-capsule layer.
#[derive(Debug, Clone)]
pub struct PrimaryTrace<T> {
    pub conv1_pre: Tensor<T>,
    pub conv1: Tensor<T>,
    /// p × m × d₁ before squashing.
    pub caps_pre: Tensor<T>,
    /// p × m × d₁ primary capsules u.
    pub caps: Tensor<T>,
}

fn activate<T: Scalar>(x: &Tensor<T>, act: Activation) -> Tensor<T> {
    let slope = act.slope::<T>();
    x.map(|v| if v > T::zero() { v } else { slope * v })
}

fn activate_backward<T: Scalar>(pre: &Tensor<T>, d: &Tensor<T>, act: Activation) -> Tensor<T> {
    let slope = act.slope::<T>();
    let mut out = d.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        if p <= T::zero() {
            *o *= slope;
        }
    }
    out
}

/// Reorders primary-conv output (p × T·d₁ × H₂ × W₂) into capsules (p × m × d₁).
fn to_capsules<T: Scalar>(conv: &Tensor<T>, dim: usize) -> Tensor<T> {
    let [p, ch, h, w] = [
        conv.shape()[0],
        conv.shape()[1],
        conv.shape()[2],
        conv.shape()[3],
    ];
    let types = ch / dim;
    let plane = h * w;
    let m = types * plane;
    let mut out = Tensor::zeros(&[p, m, dim]);
    let (src, dst) = (conv.data(), out.data_mut());
    for k in 0..p {
        for t in 0..types {
            for d in 0..dim {
                let s = &src[(k * ch + t * dim + d) * plane..][..plane];
                for (cell, &v) in s.iter().enumerate() {
                    dst[(k * m + t * plane + cell) * dim + d] = v;
                }
            }
        }
    }
    out
}

fn from_capsules<T: Scalar>(caps: &Tensor<T>, conv_shape: &[usize]) -> Tensor<T> {
    let [p, ch, h, w] = [conv_shape[0], conv_shape[1], conv_shape[2], conv_shape[3]];
    let dim = caps.shape()[2];
    let types = ch / dim;
    let plane = h * w;
    let m = types * plane;
    let mut out = Tensor::zeros(conv_shape);
    let (src, dst) = (caps.data(), out.data_mut());
    for k in 0..p {
        for t in 0..types {
            for d in 0..dim {
                let o = &mut dst[(k * ch + t * dim + d) * plane..][..plane];
                for (cell, v) in o.iter_mut().enumerate() {
                    *v = src[(k * m + t * plane + cell) * dim + d];
                }
            }
        }
    }
    out
}

fn check_images<T: Scalar>(x: &Tensor<T>, cfg: &ModelConfig) -> Result<()> {
    if x.rank() != 4 || x.shape()[1..] != [cfg.in_channels, cfg.height, cfg.width] {
        return Err(Error::dim(
            "primary_capsules",
            format!(
                "images {:?} do not match model input {}×{}×{}",
                x.shape(),
                cfg.in_channels,
                cfg.height,
                cfg.width
            ),
        ));
    }
    Ok(())
}

/// Conv1 + activation, then the strided capsule convolution, regrouped into
/// `m = T·H₂·W₂` capsules of dimension d₁ and squashed.
pub fn primary_capsules<T: Scalar>(
    x: &Tensor<T>,
    params: &CapsNetParams<T>,
    cfg: &ModelConfig,
) -> Result<PrimaryTrace<T>> {
    check_images(x, cfg)?;
    let conv1_pre = conv2d_forward(
        x,
        &params.conv1_kernels,
        Some(&params.conv1_bias),
        &cfg.conv1_spec(),
    )?;
    let conv1 = activate(&conv1_pre, cfg.activation);
    let prim = conv2d_forward(
        &conv1,
        &params.primary_kernels,
        Some(&params.primary_bias),
        &cfg.primary_spec(),
    )?;
    let caps_pre = to_capsules(&prim, cfg.primary_dim);
    let caps = squash(&caps_pre);
    Ok(PrimaryTrace {
        conv1_pre,
        conv1,
        caps_pre,
        caps,
    })
}

/// Accumulates Conv1 and primary-conv gradients into `grads` given `d_caps` (p × m × d₁).
pub fn primary_capsules_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &CapsNetParams<T>,
    cfg: &ModelConfig,
    trace: &PrimaryTrace<T>,
    d_caps: &Tensor<T>,
    grads: &mut CapsNetParams<T>,
) -> Result<()> {
    let d_pre = squash_backward(&trace.caps_pre, d_caps)?;
    let (h2, w2) = cfg.primary_grid()?;
    let conv_shape = [x.shape()[0], cfg.primary_types * cfg.primary_dim, h2, w2];
    let d_prim = from_capsules(&d_pre, &conv_shape);
    let g2 = conv2d_backward(
        &trace.conv1,
        &params.primary_kernels,
        &d_prim,
        &cfg.primary_spec(),
        true,
    )?;
    grads.primary_kernels.axpy(T::one(), &g2.kernels)?;
    grads.primary_bias.axpy(T::one(), &g2.bias)?;
    let d_conv1 = activate_backward(
        &trace.conv1_pre,
        &g2.input.expect("requested"),
        cfg.activation,
    );
    let g1 = conv2d_backward(x, &params.conv1_kernels, &d_conv1, &cfg.conv1_spec(), false)?;
    grads.conv1_kernels.axpy(T::one(), &g1.kernels)?;
    grads.conv1_bias.axpy(T::one(), &g1.bias)?;
    Ok(())
}

fn project_dims<T: Scalar>(u: &Tensor<T>, w: &Tensor<T>) -> Result<[usize; 5]> {
    if u.rank() != 3 || w.rank() != 4 {
        return Err(Error::dim(
            "project",
            format!("u {:?}, W {:?}", u.shape(), w.shape()),
        ));
    }
    let [p, m, d1] = [u.shape()[0], u.shape()[1], u.shape()[2]];
    let [wm, nd, d2, wd1] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    if wm != m || wd1 != d1 {
        return Err(Error::dim(
            "project",
            format!("u is {p}×{m}×{d1} but W is {wm}×{nd}×{d2}×{wd1}"),
        ));
    }
    Ok([p, m, d1, nd, d2])
}

/// Copies u (p × m × d₁) into capsule-major order (m × p × d₁).
fn capsule_major<T: Scalar>(u: &[T], p: usize, m: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); u.len()];
    for k in 0..p {
        for i in 0..m {
            out[(i * p + k) * d..][..d].copy_from_slice(&u[(k * m + i) * d..][..d]);
        }
    }
    out
}

/// `û_{j|i} = W_ij u_i` for every observation: p × m × n_d × d₂.
pub fn project<T: Scalar>(u: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let [p, m, d1, nd, d2] = project_dims(u, w)?;
    let width = nd * d2;
    let ut = capsule_major(u.data(), p, m, d1);
    let mut out = Tensor::zeros(&[p, m, nd, d2]);
    let mut block = vec![T::zero(); p * width];
    for i in 0..m {
        let wi = &w.data()[i * width * d1..][..width * d1];
        gemm(
            p,
            d1,
            width,
            &ut[i * p * d1..],
            Trans::No,
            wi,
            Trans::Yes,
            T::zero(),
            &mut block,
        );
        for k in 0..p {
            out.data_mut()[(k * m + i) * width..][..width]
                .copy_from_slice(&block[k * width..][..width]);
        }
    }
    Ok(out)
}

/// Returns `(du, dW)` for the projection given `d_hat` (p × m × n_d × d₂).
pub fn project_backward<T: Scalar>(
    u: &Tensor<T>,
    w: &Tensor<T>,
    d_hat: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [p, m, d1, nd, d2] = project_dims(u, w)?;
    d_hat.expect_shape("project_backward", &[p, m, nd, d2])?;
    let width = nd * d2;
    let ut = capsule_major(u.data(), p, m, d1);
    let dt = capsule_major(d_hat.data(), p, m, width);
    let mut du_t = vec![T::zero(); p * m * d1];
    let mut dw = Tensor::zeros(w.shape());
    for i in 0..m {
        let wi = &w.data()[i * width * d1..][..width * d1];
        let di = &dt[i * p * width..][..p * width];
        gemm(
            width,
            p,
            d1,
            di,
            Trans::Yes,
            &ut[i * p * d1..],
            Trans::No,
            T::zero(),
            &mut dw.data_mut()[i * width * d1..],
        );
        gemm(
            p,
            width,
            d1,
            di,
            Trans::No,
            wi,
            Trans::No,
            T::zero(),
            &mut du_t[i * p * d1..],
        );
    }
    let mut du = Tensor::zeros(u.shape());
    for k in 0..p {
        for i in 0..m {
            du.data_mut()[(k * m + i) * d1..][..d1]
                .copy_from_slice(&du_t[(i * p + k) * d1..][..d1]);
        }
    }
    Ok((du, dw))
}

/// How output capsules are formed from the projections.
#[derive(Debug, Clone, Copy)]
pub enum RouteWith<'a, T> {
    Dynamic { iters: usize },
    Coefficients(&'a RoutingCoefficients<T>),
}

#[derive(Debug, Clone)]
pub enum RoutingTrace<T> {
    Dynamic(DynamicRouting<T>),
    Coefficients,
}

/// Output-capsule stage of the forward pass.
#[derive(Debug, Clone)]
pub struct DigitCaps<T> {
    pub routing: RoutingTrace<T>,
    /// p × n_d × d₂ before squashing.
    pub pre_squash: Tensor<T>,
    /// p × n_d × d₂
    pub output: Tensor<T>,
    /// p × n_d
    pub lengths: Tensor<T>,
}

pub fn digit_caps_from_routing<T: Scalar>(
    projected: &Tensor<T>,
    route: RouteWith<'_, T>,
) -> Result<DigitCaps<T>> {
    let (routing, pre_squash) = match route {
        RouteWith::Dynamic { iters } => {
            let r = dynamic_route(projected, iters)?;
            let v = r.pre_squash().clone();
            (RoutingTrace::Dynamic(r), v)
        }
        RouteWith::Coefficients(b) => (RoutingTrace::Coefficients, weighted_sum(projected, b)?),
    };
    let output = squash(&pre_squash);
    let lengths = lengths(&output);
    Ok(DigitCaps {
        routing,
        pre_squash,
        output,
        lengths,
    })
}

/// Gradient w.r.t. the projections given `d_output` (p × n_d × d₂).
pub fn digit_caps_backward<T: Scalar>(
    projected: &Tensor<T>,
    route: RouteWith<'_, T>,
    caps: &DigitCaps<T>,
    d_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    match (&caps.routing, route) {
        (RoutingTrace::Dynamic(r), RouteWith::Dynamic { .. }) => {
            dynamic_route_backward(projected, r, d_output)
        }
        (RoutingTrace::Coefficients, RouteWith::Coefficients(b)) => {
            let dv = squash_backward(&caps.pre_squash, d_output)?;
            let [p, m, nd, d2] = crate::routing::projected_dims(projected)?;
            let mut du = Tensor::zeros(projected.shape());
            let bd = b.tensor().data();
            for k in 0..p {
                for i in 0..m {
                    for j in 0..nd {
                        let coef = bd[i * nd + j];
                        let src = &dv.data()[(k * nd + j) * d2..][..d2];
                        let dst = &mut du.data_mut()[((k * m + i) * nd + j) * d2..][..d2];
                        for (o, &g) in dst.iter_mut().zip(src) {
                            *o = coef * g;
                        }
                    }
                }
            }
            Ok(du)
        }
        _ => Err(Error::Config(
            "routing mode does not match the forward pass".into(),
        )),
    }
}

/// Zeroes every output capsule whose class is not in the observation's label set,
/// then flattens to p × (n_d·d₂).
pub fn mask_capsules<T: Scalar>(s: &Tensor<T>, labels: &[LabelSet]) -> Result<Tensor<T>> {
    if s.rank() != 3 || s.shape()[0] != labels.len() {
        return Err(Error::dim(
            "mask_capsules",
            format!("{:?} vs {} labels", s.shape(), labels.len()),
        ));
    }
    let [p, nd, d2] = [s.shape()[0], s.shape()[1], s.shape()[2]];
    if let Some(bad) = labels.iter().find(|l| l.max_class() >= nd) {
        return Err(Error::LabelRange {
            label: bad.max_class(),
            classes: nd,
        });
    }
    let mut out = Tensor::zeros(&[p, nd * d2]);
    for (k, l) in labels.iter().enumerate() {
        for j in l.iter() {
            let off = (k * nd + j) * d2;
            out.data_mut()[off..off + d2].copy_from_slice(&s.data()[off..off + d2]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ReconTrace<T> {
    pub input: Tensor<T>,
    pub h1_pre: Tensor<T>,
    pub h1: Tensor<T>,
    pub h2_pre: Tensor<T>,
    pub h2: Tensor<T>,
    /// p × pixels, in (0, 1).
    pub output: Tensor<T>,
}

fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [p, n_in] = [x.shape()[0], x.shape()[1]];
    let n_out = w.shape()[0];
    w.expect_shape("dense weights", &[n_out, n_in])?;
    b.expect_shape("dense bias", &[n_out])?;
    let mut y = Tensor::zeros(&[p, n_out]);
    gemm(
        p,
        n_in,
        n_out,
        x.data(),
        Trans::No,
        w.data(),
        Trans::Yes,
        T::zero(),
        y.data_mut(),
    );
    for row in y.data_mut().chunks_exact_mut(n_out) {
        for (o, &bb) in row.iter_mut().zip(b.data()) {
            *o += bb;
        }
    }
    Ok(y)
}

/// Returns dx and accumulates dW, db.
fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Tensor<T> {
    let [p, n_in] = [x.shape()[0], x.shape()[1]];
    let n_out = w.shape()[0];
    gemm(
        n_out,
        p,
        n_in,
        dy.data(),
        Trans::Yes,
        x.data(),
        Trans::No,
        T::one(),
        dw.data_mut(),
    );
    for row in dy.data().chunks_exact(n_out) {
        for (o, &g) in db.data_mut().iter_mut().zip(row) {
            *o += g;
        }
    }
    let mut dx = Tensor::zeros(&[p, n_in]);
    gemm(
        p,
        n_out,
        n_in,
        dy.data(),
        Trans::No,
        w.data(),
        Trans::No,
        T::zero(),
        dx.data_mut(),
    );
    dx
}

fn recon_params<T>(params: &CapsNetParams<T>) -> Result<&ReconParams<T>> {
    params.recon.as_ref().ok_or_else(|| {
        Error::Config("reconstruction requested but the model has no decoder (recon=off)".into())
    })
}

/// Decodes the label-masked output capsules back to pixels.
pub fn reconstruct<T: Scalar>(
    s: &Tensor<T>,
    labels: &[LabelSet],
    params: &CapsNetParams<T>,
) -> Result<ReconTrace<T>> {
    let r = recon_params(params)?;
    let input = mask_capsules(s, labels)?;
    let relu = |t: &Tensor<T>| t.map(|v| v.max(T::zero()));
    let h1_pre = dense(&input, &r.w1, &r.b1)?;
    let h1 = relu(&h1_pre);
    let h2_pre = dense(&h1, &r.w2, &r.b2)?;
    let h2 = relu(&h2_pre);
    let output = dense(&h2, &r.w3, &r.b3)?.map(|v| T::one() / (T::one() + (-v).exp()));
    Ok(ReconTrace {
        input,
        h1_pre,
        h1,
        h2_pre,
        h2,
        output,
    })
}

/// Gradient w.r.t. the (unmasked) output capsules; decoder gradients accumulate into `grads`.
pub fn reconstruct_backward<T: Scalar>(
    s: &Tensor<T>,
    labels: &[LabelSet],
    params: &CapsNetParams<T>,
    trace: &ReconTrace<T>,
    d_output: &Tensor<T>,
    grads: &mut CapsNetParams<T>,
) -> Result<Tensor<T>> {
    let r = recon_params(params)?;
    let g = grads
        .recon
        .as_mut()
        .ok_or_else(|| Error::Config("gradient buffer has no decoder".into()))?;
    d_output.expect_shape("reconstruct_backward", trace.output.shape())?;
    let mut d3 = d_output.clone();
    for (d, &y) in d3.data_mut().iter_mut().zip(trace.output.data()) {
        *d *= y * (T::one() - y);
    }
    let relu_back = |pre: &Tensor<T>, mut d: Tensor<T>| {
        for (o, &p) in d.data_mut().iter_mut().zip(pre.data()) {
            if p <= T::zero() {
                *o = T::zero();
            }
        }
        d
    };
    let dh2 = relu_back(
        &trace.h2_pre,
        dense_backward(&trace.h2, &r.w3, &d3, &mut g.w3, &mut g.b3),
    );
    let dh1 = relu_back(
        &trace.h1_pre,
        dense_backward(&trace.h1, &r.w2, &dh2, &mut g.w2, &mut g.b2),
    );
    let d_in = dense_backward(&trace.input, &r.w1, &dh1, &mut g.w1, &mut g.b1);
    // the mask passes gradient only to the label capsules
    let d_in = d_in.reshape(s.shape())?;
    let mut ds = Tensor::zeros(s.shape());
    let [nd, d2] = [s.shape()[1], s.shape()[2]];
    for (k, l) in labels.iter().enumerate() {
        for j in l.iter() {
            let off = (k * nd + j) * d2;
            ds.data_mut()[off..off + d2].copy_from_slice(&d_in.data()[off..off + d2]);
        }
    }
    Ok(ds)
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub images: Tensor<T>,
    pub primary: PrimaryTrace<T>,
    /// p × m × n_d × d₂
    pub projected: Tensor<T>,
    pub digits: DigitCaps<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn lengths(&self) -> &Tensor<T> {
        &self.digits.lengths
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.digits.output
    }
}

/// Full forward pass through the output capsules (the decoder is run separately).
pub fn forward<T: Scalar>(
    images: &Tensor<T>,
    params: &CapsNetParams<T>,
    cfg: &ModelConfig,
    route: RouteWith<'_, T>,
) -> Result<ForwardTrace<T>> {
    let primary = primary_capsules(images, params, cfg)?;
    let projected = project(&primary.caps, &params.weights)?;
    let digits = digit_caps_from_routing(&projected, route)?;
    if !digits.output.is_finite() {
        return Err(Error::NonFinite("forward pass"));
    }
    Ok(ForwardTrace {
        images: images.clone(),
        primary,
        projected,
        digits,
    })
}

/// Back-propagates `d_output` (gradient w.r.t. the output capsules) to every weight.
pub fn backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &CapsNetParams<T>,
    cfg: &ModelConfig,
    route: RouteWith<'_, T>,
    d_output: &Tensor<T>,
    grads: &mut CapsNetParams<T>,
) -> Result<()> {
    let d_hat = digit_caps_backward(&trace.projected, route, &trace.digits, d_output)?;
    let (du, dw) = project_backward(&trace.primary.caps, &params.weights, &d_hat)?;
    grads.weights.axpy(T::one(), &dw)?;
    primary_capsules_backward(&trace.images, params, cfg, &trace.primary, &du, grads)
}
