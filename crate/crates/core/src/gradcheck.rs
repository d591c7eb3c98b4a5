//! Central-difference gradient checks for every hand-written backward pass.
//!
//! Each component is a scalar function of one or more input tensors with a
//! known analytic gradient. The numeric side always runs in f64; the analytic
//! side runs in the requested precision.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::data::LabelSet;
use crate::error::{Error, Result};
use crate::loss::{margin_loss, margin_loss_grad, recon_loss, recon_loss_grad, MarginConfig};
use crate::model::{
    lengths, primary_capsules, primary_capsules_backward, project, project_backward, reconstruct,
    reconstruct_backward, squash, squash_backward, CapsNetParams, ModelConfig, RouteWith,
};
use crate::rng::SeedStream;
use crate::routing::{
    delta_signs, dynamic_route, dynamic_route_backward, routing_objective, routing_objective_grad,
    Penalty, RoutingCoefficients,
};
use crate::tensor::{Scalar, Tensor};
use crate::train::loss_and_grads;

pub const F64_THRESHOLD: f64 = 1e-6;
pub const F32_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_EPS: f64 = 1e-7;

/// Max over coordinates of `|a − n| / max(1, |a|, |n|)`, where `n` is the
/// central difference `(f(x + εe_i) − f(x − εe_i)) / 2ε`.
pub fn grad_check(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    params: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
) -> Result<f64> {
    analytic.expect_shape("grad_check", params.shape())?;
    let mut x = params.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x)?;
        x[i] = orig - eps;
        let down = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn threshold(self) -> f64 {
        match self {
            Precision::F32 => F32_THRESHOLD,
            Precision::F64 => F64_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Conv,
    PrimaryCapsules,
    Projection,
    Squash,
    MarginLoss,
    Reconstruction,
    RoutingObjectiveL2,
    RoutingObjectiveL1,
    DynamicRouting,
    NetworkCoefficients,
    NetworkDynamic,
}

impl Component {
    pub const ALL: [Component; 11] = [
        Component::Conv,
        Component::PrimaryCapsules,
        Component::Projection,
        Component::Squash,
        Component::MarginLoss,
        Component::Reconstruction,
        Component::RoutingObjectiveL2,
        Component::RoutingObjectiveL1,
        Component::DynamicRouting,
        Component::NetworkCoefficients,
        Component::NetworkDynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Conv => "conv",
            Component::PrimaryCapsules => "primary_capsules",
            Component::Projection => "projection",
            Component::Squash => "squash",
            Component::MarginLoss => "margin_loss",
            Component::Reconstruction => "reconstruction",
            Component::RoutingObjectiveL2 => "routing_objective_l2",
            Component::RoutingObjectiveL1 => "routing_objective_l1",
            Component::DynamicRouting => "dynamic_routing",
            Component::NetworkCoefficients => "network_coefficients",
            Component::NetworkDynamic => "network_dynamic",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Component::ALL.iter().map(|c| c.name()).collect();
                Error::Config(format!(
                    "unknown component `{s}`; valid: {}",
                    names.join("|")
                ))
            })
    }
}

/// The small network every network-level check runs on: 12×12 input,
/// 5×5 kernels, 2×2 capsule grid, m = 8 primary capsules, 3 classes.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        height: 12,
        width: 12,
        kernel: 5,
        conv1_channels: 3,
        primary_types: 2,
        primary_dim: 4,
        output_dim: 4,
        classes: 3,
        recon_hidden: [6, 8],
        ..ModelConfig::default()
    }
}

const BATCH: usize = 2;

/// Everything a component needs besides the tensors under test, in f64.
struct Fixture {
    probe: Tensor<f64>,
    labels: Vec<LabelSet>,
    images: Tensor<f64>,
    params: CapsNetParams<f64>,
    coefficients: RoutingCoefficients<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn conv_spec() -> ConvSpec {
    ConvSpec {
        padding: 1,
        ..ConvSpec::square(2, 3, 3, 2)
    }
}

fn label_pair(rng: &mut ChaCha8Rng, classes: usize) -> Vec<LabelSet> {
    let a = rng.gen_range(0..classes) as u8;
    let b = ((a as usize + rng.gen_range(1..classes)) % classes) as u8;
    vec![LabelSet::single(a), LabelSet::pair(a, b).expect("distinct")]
}

/// Returns the inputs under test plus the fixture for `component`.
fn setup(component: Component, seed: u64) -> Result<(Vec<Tensor<f64>>, Fixture)> {
    let seeds = SeedStream::new(seed).split(component.name());
    let mut rng = seeds.rng();
    let cfg = tiny_model();
    let m = cfg.num_primary()?;
    let (nd, d1, d2) = (cfg.classes, cfg.primary_dim, cfg.output_dim);
    let mut params = CapsNetParams::<f64>::init(&cfg, false, seeds)?;
    // non-zero biases keep ReLU inputs off the kink when a whole layer is dead
    params.conv1_bias = uniform(&mut rng, &[cfg.conv1_channels], 0.1);
    params.primary_bias = uniform(&mut rng, params.primary_bias.shape(), 0.1);
    if let Some(r) = params.recon.as_mut() {
        r.b1 = uniform(&mut rng, r.b1.shape(), 0.1);
        r.b2 = uniform(&mut rng, r.b2.shape(), 0.1);
        r.b3 = uniform(&mut rng, r.b3.shape(), 0.1);
    }
    let coefficients = RoutingCoefficients::new(uniform(&mut rng, &[m, nd], 1.0))?;
    let images = Tensor::from_fn(&[BATCH, 1, cfg.height, cfg.width], |_| {
        rng.gen_range(0.0..1.0)
    });
    let labels = label_pair(&mut rng, nd);
    let mut fx = Fixture {
        probe: Tensor::zeros(&[1]),
        labels,
        images,
        params,
        coefficients,
    };
    let inputs = match component {
        Component::Conv => {
            let spec = conv_spec();
            let x = uniform(&mut rng, &[2, 2, 7, 7], 1.0);
            let k = uniform(&mut rng, &spec.kernel_shape(), 1.0);
            let b = uniform(&mut rng, &[3], 1.0);
            fx.probe = uniform(&mut rng, &[2, 3, 4, 4], 1.0);
            vec![x, k, b]
        }
        Component::PrimaryCapsules => {
            fx.probe = uniform(&mut rng, &[BATCH, m, d1], 1.0);
            let p = &fx.params;
            vec![
                p.conv1_kernels.clone(),
                p.conv1_bias.clone(),
                p.primary_kernels.clone(),
                p.primary_bias.clone(),
            ]
        }
        Component::Projection => {
            fx.probe = uniform(&mut rng, &[BATCH, m, nd, d2], 1.0);
            vec![
                uniform(&mut rng, &[BATCH, m, d1], 1.0),
                uniform(&mut rng, &[m, nd, d2, d1], 1.0),
            ]
        }
        Component::Squash => {
            fx.probe = uniform(&mut rng, &[BATCH, nd, d2], 1.0);
            vec![uniform(&mut rng, &[BATCH, nd, d2], 2.0)]
        }
        Component::MarginLoss => vec![uniform(&mut rng, &[BATCH, nd, d2], 0.5)],
        Component::Reconstruction => {
            let r = fx.params.recon.as_ref().expect("tiny model has a decoder");
            vec![
                uniform(&mut rng, &[BATCH, nd, d2], 0.5),
                r.w1.clone(),
                r.b1.clone(),
                r.w2.clone(),
                r.b2.clone(),
                r.w3.clone(),
                r.b3.clone(),
            ]
        }
        Component::RoutingObjectiveL2 | Component::RoutingObjectiveL1 => {
            fx.probe = uniform(&mut rng, &[BATCH, m, nd, d2], 1.0);
            vec![fx.coefficients.tensor().clone()]
        }
        Component::DynamicRouting => {
            fx.probe = uniform(&mut rng, &[BATCH, nd, d2], 1.0);
            vec![uniform(&mut rng, &[BATCH, m, nd, d2], 1.0)]
        }
        Component::NetworkCoefficients | Component::NetworkDynamic => fx
            .params
            .weight_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect(),
    };
    Ok((inputs, fx))
}

fn with_weights<T: Scalar>(
    template: &CapsNetParams<f64>,
    weights: &[Tensor<T>],
) -> CapsNetParams<T> {
    let mut p = CapsNetParams {
        conv1_kernels: template.conv1_kernels.cast(),
        conv1_bias: template.conv1_bias.cast(),
        primary_kernels: template.primary_kernels.cast(),
        primary_bias: template.primary_bias.cast(),
        weights: template.weights.cast(),
        recon: template.recon.as_ref().map(|r| crate::model::ReconParams {
            w1: r.w1.cast(),
            b1: r.b1.cast(),
            w2: r.w2.cast(),
            b2: r.b2.cast(),
            w3: r.w3.cast(),
            b3: r.b3.cast(),
        }),
        coefficients: None,
    };
    for (slot, w) in p.weight_tensors_mut().into_iter().zip(weights) {
        *slot = w.clone();
    }
    p
}

/// Value and analytic gradients of `component` at `inputs`, in precision `T`.
fn evaluate<T: Scalar>(
    component: Component,
    fx: &Fixture,
    inputs: &[Tensor<T>],
) -> Result<(T, Vec<Tensor<T>>)> {
    let cfg = tiny_model();
    let probe: Tensor<T> = fx.probe.cast();
    match component {
        Component::Conv => {
            let spec = conv_spec();
            let out = conv2d_forward(&inputs[0], &inputs[1], Some(&inputs[2]), &spec)?;
            let g = conv2d_backward(&inputs[0], &inputs[1], &probe, &spec, true)?;
            Ok((
                out.dot(&probe)?,
                vec![g.input.expect("requested"), g.kernels, g.bias],
            ))
        }
        Component::PrimaryCapsules => {
            let params = with_weights(&fx.params, inputs);
            let x: Tensor<T> = fx.images.cast();
            let trace = primary_capsules(&x, &params, &cfg)?;
            let mut grads = params.zeros_like();
            primary_capsules_backward(&x, &params, &cfg, &trace, &probe, &mut grads)?;
            Ok((
                trace.caps.dot(&probe)?,
                vec![
                    grads.conv1_kernels,
                    grads.conv1_bias,
                    grads.primary_kernels,
                    grads.primary_bias,
                ],
            ))
        }
        Component::Projection => {
            let out = project(&inputs[0], &inputs[1])?;
            let (du, dw) = project_backward(&inputs[0], &inputs[1], &probe)?;
            Ok((out.dot(&probe)?, vec![du, dw]))
        }
        Component::Squash => {
            let out = squash(&inputs[0]);
            Ok((out.dot(&probe)?, vec![squash_backward(&inputs[0], &probe)?]))
        }
        Component::MarginLoss => {
            let s = &inputs[0];
            let targets = delta_signs(&fx.labels, cfg.classes)?.targets::<T>();
            let l = lengths(s);
            let m = MarginConfig::default();
            Ok((
                margin_loss(&l, &targets, &m)?,
                vec![margin_loss_grad(&l, s, &targets, &m)?],
            ))
        }
        Component::Reconstruction => {
            let s = &inputs[0];
            let mut weights = with_weights::<T>(&fx.params, &[])
                .weight_tensors()
                .iter()
                .map(|(_, t)| (*t).clone())
                .collect::<Vec<_>>();
            weights.truncate(5);
            weights.extend(inputs[1..].iter().cloned());
            let params = with_weights(&fx.params, &weights);
            let target: Tensor<T> = fx.images.cast::<T>().reshape(&[BATCH, cfg.pixels()])?;
            let trace = reconstruct(s, &fx.labels, &params)?;
            let value = recon_loss(&trace.output, &target, 1.0)?;
            let d = recon_loss_grad(&trace.output, &target, 1.0)?;
            let mut grads = params.zeros_like();
            let ds = reconstruct_backward(s, &fx.labels, &params, &trace, &d, &mut grads)?;
            let r = grads.recon.expect("decoder");
            Ok((value, vec![ds, r.w1, r.b1, r.w2, r.b2, r.w3, r.b3]))
        }
        Component::RoutingObjectiveL2 | Component::RoutingObjectiveL1 => {
            let penalty = if component == Component::RoutingObjectiveL2 {
                Penalty::L2
            } else {
                Penalty::L1
            };
            let b = RoutingCoefficients::new(inputs[0].clone())?;
            let signs = delta_signs(&fx.labels, cfg.classes)?;
            let r = routing_objective(&b, &probe, &signs, 0.01, penalty)?;
            let g = routing_objective_grad(&b, &probe, &signs, 0.01, penalty)?;
            Ok((r.into_iter().sum(), vec![g]))
        }
        Component::DynamicRouting => {
            let r = dynamic_route(&inputs[0], 3)?;
            let g = dynamic_route_backward(&inputs[0], &r, &probe)?;
            Ok((r.output().dot(&probe)?, vec![g]))
        }
        Component::NetworkCoefficients | Component::NetworkDynamic => {
            let params = with_weights(&fx.params, inputs);
            let b: RoutingCoefficients<T> =
                RoutingCoefficients::new(fx.coefficients.tensor().cast())?;
            let route = if component == Component::NetworkDynamic {
                RouteWith::Dynamic { iters: 3 }
            } else {
                RouteWith::Coefficients(&b)
            };
            let x: Tensor<T> = fx.images.cast();
            let e = loss_and_grads(
                &params,
                &cfg,
                &x,
                &fx.labels,
                route,
                &MarginConfig::default(),
                0.05,
            )?;
            let grads = e
                .grads
                .weight_tensors()
                .into_iter()
                .map(|(_, t)| t.clone())
                .collect();
            Ok((e.loss, grads))
        }
    }
}

/// Worst relative error of `component` for one seed.
pub fn check_component(
    component: Component,
    seed: u64,
    precision: Precision,
    corrupt: bool,
) -> Result<f64> {
    let (inputs, fx) = setup(component, seed)?;
    let mut analytic: Vec<Tensor<f64>> = match precision {
        Precision::F64 => evaluate::<f64>(component, &fx, &inputs)?.1,
        Precision::F32 => {
            let cast: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast).collect();
            evaluate::<f32>(component, &fx, &cast)?
                .1
                .iter()
                .map(Tensor::cast)
                .collect()
        }
    };
    if corrupt {
        // fault injection: bias one coordinate of the first gradient
        analytic[0][0] += 0.1;
    }
    let mut worst = 0.0f64;
    for (idx, (x, a)) in inputs.iter().zip(&analytic).enumerate() {
        let f = |t: &Tensor<f64>| {
            let mut all = inputs.clone();
            all[idx] = t.clone();
            evaluate::<f64>(component, &fx, &all).map(|(v, _)| v)
        };
        worst = worst.max(grad_check(f, x, a, DEFAULT_EPS)?);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub component: Component,
    pub max_error: f64,
    pub threshold: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

/// Runs every component over `seeds`; `corrupt` injects a fault into one component.
pub fn run_suite(
    seeds: impl IntoIterator<Item = u64> + Clone,
    precision: Precision,
    corrupt: Option<Component>,
) -> Result<Vec<ComponentReport>> {
    Component::ALL
        .iter()
        .map(|&c| {
            let mut worst = 0.0f64;
            for seed in seeds.clone() {
                worst = worst.max(check_component(c, seed, precision, corrupt == Some(c))?);
            }
            Ok(ComponentReport {
                component: c,
                max_error: worst,
                threshold: precision.threshold(),
            })
        })
        .collect()
}
