//! Routing between primary capsules and output capsules.
//!
//! Two families live here:
//!
//! * dynamic routing-by-agreement, where per-example coupling coefficients are
//!   a softmax over output capsules and therefore strictly positive;
//! * discriminative routing, where a persistent, possibly negative coefficient
//!   matrix `B` (m × n_d) is trained by gradient ascent on
//!   `r_j = Σ_k δ_kj ‖Û_kjᵀ b_j‖² − λ·pen(b_j)` with `pen` either the squared
//!   ℓ2 norm or the ℓ1 norm.
//!
//! Projected predictions are always laid out as `p × m × n_d × d₂`; the slice
//! `Û_kj` is the m × d₂ block for observation `k` and output capsule `j`.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::data::LabelSet;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::model::{squash_backward_into, squash_into};
use crate::rng::SeedStream;
use crate::tensor::{Scalar, Tensor};

/// Largest m the dense definiteness probe accepts.
pub const PROBE_MAX_CAPSULES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Routing-by-agreement with softmax couplings; nothing persists between batches.
    Dynamic,
    /// Persistent `B` trained with the ℓ2-regularized objective.
    L2,
    /// Persistent `B` trained with the ℓ1-regularized objective.
    L1,
    /// Persistent `B` that is never updated (plain supervised baseline).
    Fixed,
}

impl RoutingMode {
    pub const NAMES: &'static str = "dr|l2|l1|none";

    pub fn uses_coefficients(self) -> bool {
        !matches!(self, RoutingMode::Dynamic)
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::Dynamic => "dr",
            RoutingMode::L2 => "l2",
            RoutingMode::L1 => "l1",
            RoutingMode::Fixed => "none",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dr" | "dynamic" => Ok(RoutingMode::Dynamic),
            "l2" => Ok(RoutingMode::L2),
            "l1" => Ok(RoutingMode::L1),
            "none" | "fixed" => Ok(RoutingMode::Fixed),
            other => Err(Error::Config(format!(
                "invalid routing mode `{other}`; valid modes: {}",
                RoutingMode::NAMES
            ))),
        }
    }
}

/// Regularizer on the coefficient columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Penalty {
    L2,
    L1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingConfig {
    pub mode: RoutingMode,
    pub lambda: f64,
    pub gamma: f64,
    /// Ascent steps on `B` per training iteration; 0 leaves B fixed.
    pub steps: usize,
    pub dynamic_iters: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            mode: RoutingMode::L2,
            lambda: 1e-3,
            gamma: 1e-3,
            steps: 1,
            dynamic_iters: 3,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "routing.gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if self.dynamic_iters == 0 {
            return Err(Error::Config("routing.dynamic_iters must be >= 1".into()));
        }
        Ok(())
    }

    pub fn penalty(&self) -> Option<Penalty> {
        match self.mode {
            RoutingMode::L2 => Some(Penalty::L2),
            RoutingMode::L1 => Some(Penalty::L1),
            _ => None,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "routing.lambda must be >= 0, got {lambda}"
        )));
    }
    Ok(())
}

/// The persistent coefficient matrix `B`, m × n_d; column `j` is `b_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingCoefficients<T> {
    b: Tensor<T>,
}

impl<T: Scalar> RoutingCoefficients<T> {
    pub fn new(b: Tensor<T>) -> Result<Self> {
        if b.rank() != 2 {
            return Err(Error::dim(
                "routing coefficients",
                format!("need m×n_d, got {:?}", b.shape()),
            ));
        }
        Ok(RoutingCoefficients {
            b: b.ensure_finite("routing coefficients")?,
        })
    }

    /// Zero-mean normal entries with standard deviation `1/m`.
    pub fn init(m: usize, classes: usize, seeds: SeedStream) -> Self {
        let normal = Normal::new(0.0, 1.0 / m as f64).expect("positive std");
        let mut rng = seeds.split("routing.b").rng();
        RoutingCoefficients {
            b: Tensor::from_fn(&[m, classes], |_| T::lit(normal.sample(&mut rng))),
        }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.b
    }

    pub fn num_primary(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.b[i * self.num_classes() + j]
    }

    /// Fraction of entries with `|b| < threshold`.
    pub fn sparsity(&self, threshold: f64) -> f64 {
        let t = T::lit(threshold);
        self.b.data().iter().filter(|v| v.abs() < t).count() as f64 / self.b.len() as f64
    }
}

/// δ_kj = +1 when class j is among the labels of observation k, −1 otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignIndicator {
    signs: Vec<i8>,
    classes: usize,
}

impl SignIndicator {
    pub fn from_rows(rows: Vec<Vec<i8>>) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if classes == 0
            || rows
                .iter()
                .any(|r| r.len() != classes || r.iter().any(|&s| s != 1 && s != -1))
        {
            return Err(Error::dim(
                "sign indicator",
                "rows must be equal-length ±1 vectors",
            ));
        }
        Ok(SignIndicator {
            signs: rows.concat(),
            classes,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.signs.len() / self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, k: usize, j: usize) -> i8 {
        self.signs[k * self.classes + j]
    }

    pub fn row(&self, k: usize) -> &[i8] {
        &self.signs[k * self.classes..(k + 1) * self.classes]
    }

    /// Margin-loss targets `T = (δ + 1) / 2` as a p × n_d tensor.
    pub fn targets<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.batch_size(), self.classes],
            self.signs
                .iter()
                .map(|&s| if s > 0 { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("non-empty indicator")
    }
}

pub fn delta_signs(labels: &[LabelSet], classes: usize) -> Result<SignIndicator> {
    if labels.is_empty() || classes == 0 {
        return Err(Error::dim("delta_signs", "empty batch or zero classes"));
    }
    let mut signs = Vec::with_capacity(labels.len() * classes);
    for l in labels {
        if l.max_class() >= classes {
            return Err(Error::LabelRange {
                label: l.max_class(),
                classes,
            });
        }
        signs.extend((0..classes).map(|j| if l.contains(j) { 1i8 } else { -1 }));
    }
    Ok(SignIndicator { signs, classes })
}

/// `[p, m, n_d, d₂]` of a projected tensor.
pub(crate) fn projected_dims<T: Scalar>(projected: &Tensor<T>) -> Result<[usize; 4]> {
    if projected.rank() != 4 {
        return Err(Error::dim(
            "routing",
            format!("projected must be p×m×n_d×d₂, got {:?}", projected.shape()),
        ));
    }
    let s = projected.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

fn check_operands<T: Scalar>(
    b: &RoutingCoefficients<T>,
    projected: &Tensor<T>,
    signs: &SignIndicator,
) -> Result<[usize; 4]> {
    let dims = projected_dims(projected)?;
    let [p, m, nd, _] = dims;
    if b.num_primary() != m || b.num_classes() != nd {
        return Err(Error::dim(
            "routing",
            format!(
                "B is {:?} but projections imply {m}×{nd}",
                b.tensor().shape()
            ),
        ));
    }
    if signs.batch_size() != p || signs.num_classes() != nd {
        return Err(Error::dim(
            "routing",
            format!(
                "sign indicator is {}×{}, projections imply {p}×{nd}",
                signs.batch_size(),
                signs.num_classes()
            ),
        ));
    }
    Ok(dims)
}

/// Pre-squash outputs `v_kj = Û_kjᵀ b_j = Σ_i b_ij û_{j|i}` as p × n_d × d₂.
pub fn weighted_sum<T: Scalar>(
    projected: &Tensor<T>,
    b: &RoutingCoefficients<T>,
) -> Result<Tensor<T>> {
    let [p, m, nd, d2] = projected_dims(projected)?;
    if b.num_primary() != m || b.num_classes() != nd {
        return Err(Error::dim(
            "weighted_sum",
            format!(
                "B is {:?} but projections imply {m}×{nd}",
                b.tensor().shape()
            ),
        ));
    }
    let u = projected.data();
    let bd = b.tensor().data();
    let mut v = Tensor::zeros(&[p, nd, d2]);
    let vd = v.data_mut();
    for k in 0..p {
        for i in 0..m {
            let base = (k * m + i) * nd;
            for j in 0..nd {
                let coef = bd[i * nd + j];
                let src = &u[(base + j) * d2..][..d2];
                let dst = &mut vd[(k * nd + j) * d2..][..d2];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += coef * x;
                }
            }
        }
    }
    Ok(v)
}

/// Per-capsule objective values `r_j`.
pub fn routing_objective<T: Scalar>(
    b: &RoutingCoefficients<T>,
    projected: &Tensor<T>,
    signs: &SignIndicator,
    lambda: f64,
    penalty: Penalty,
) -> Result<Vec<T>> {
    check_lambda(lambda)?;
    let [p, _, nd, d2] = check_operands(b, projected, signs)?;
    let v = weighted_sum(projected, b)?;
    let lam = T::lit(lambda);
    let m = b.num_primary();
    Ok((0..nd)
        .map(|j| {
            let fit: T = (0..p)
                .map(|k| {
                    let vk = &v.data()[(k * nd + j) * d2..][..d2];
                    let sq: T = vk.iter().map(|&x| x * x).sum();
                    if signs.get(k, j) > 0 {
                        sq
                    } else {
                        -sq
                    }
                })
                .sum();
            let col = (0..m).map(|i| b.get(i, j));
            let reg: T = match penalty {
                Penalty::L2 => col.map(|x| x * x).sum(),
                Penalty::L1 => col.map(|x| x.abs()).sum(),
            };
            fit - lam * reg
        })
        .collect())
}

/// Subgradient sign with `sign(0) = 0`.
fn sign0<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `∂r_j/∂b_j` for every column, as an m × n_d tensor. The quadratic part
/// is `2 Σ_k δ_kj Û_kj (Û_kjᵀ b_j)`; the m × m product is never formed.
pub fn routing_objective_grad<T: Scalar>(
    b: &RoutingCoefficients<T>,
    projected: &Tensor<T>,
    signs: &SignIndicator,
    lambda: f64,
    penalty: Penalty,
) -> Result<Tensor<T>> {
    check_lambda(lambda)?;
    let [p, m, nd, d2] = check_operands(b, projected, signs)?;
    let v = weighted_sum(projected, b)?;
    let u = projected.data();
    let two = T::lit(2.0);
    let lam = T::lit(lambda);
    let mut g = Tensor::zeros(&[m, nd]);
    let gd = g.data_mut();
    for k in 0..p {
        for i in 0..m {
            for j in 0..nd {
                let uk = &u[((k * m + i) * nd + j) * d2..][..d2];
                let vk = &v.data()[(k * nd + j) * d2..][..d2];
                let dot: T = uk.iter().zip(vk).map(|(&a, &c)| a * c).sum();
                let s = if signs.get(k, j) > 0 { two } else { -two };
                gd[i * nd + j] += s * dot;
            }
        }
    }
    for (gij, &bij) in gd.iter_mut().zip(b.tensor().data()) {
        *gij -= match penalty {
            Penalty::L2 => two * lam * bij,
            Penalty::L1 => lam * sign0(bij),
        };
    }
    Ok(g)
}

fn ascend<T: Scalar>(
    b: &RoutingCoefficients<T>,
    grad: &Tensor<T>,
    gamma: f64,
) -> Result<RoutingCoefficients<T>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!(
            "routing.gamma must be >= 0, got {gamma}"
        )));
    }
    let mut next = b.b.clone();
    next.axpy(T::lit(gamma), grad)?;
    if !next.is_finite() {
        return Err(Error::Divergence(
            "routing update produced non-finite coefficients; reduce routing.gamma".into(),
        ));
    }
    Ok(RoutingCoefficients { b: next })
}

/// One ℓ2 ascent step: `b_j ← b_j + 2γ Σ_k (δ_kj Û_kjÛ_kjᵀ − (λ/p) I) b_j`.
pub fn update_l2<T: Scalar>(
    b: &RoutingCoefficients<T>,
    projected: &Tensor<T>,
    signs: &SignIndicator,
    lambda: f64,
    gamma: f64,
) -> Result<RoutingCoefficients<T>> {
    let grad = routing_objective_grad(b, projected, signs, lambda, Penalty::L2)?;
    ascend(b, &grad, gamma)
}

/// One ℓ1 ascent step: `b_j ← b_j + γ (2 Σ_k δ_kj Û_kjÛ_kjᵀ b_j − λ sign(b_j))`.
///
/// This is the exact subgradient of the ℓ1 objective with `∂|x|/∂x = 0` at
/// zero; the step size γ multiplies the quadratic and penalty terms alike.
pub fn update_l1<T: Scalar>(
    b: &RoutingCoefficients<T>,
    projected: &Tensor<T>,
    signs: &SignIndicator,
    lambda: f64,
    gamma: f64,
) -> Result<RoutingCoefficients<T>> {
    let grad = routing_objective_grad(b, projected, signs, lambda, Penalty::L1)?;
    ascend(b, &grad, gamma)
}

/// Upper bound on the spectral norm of `Σ_k δ_kj Û_kjÛ_kjᵀ − λI` per capsule:
/// `Σ_k ‖Û_kj‖_F² + λ`.
pub fn spectral_bound<T: Scalar>(projected: &Tensor<T>, lambda: f64) -> Result<Vec<f64>> {
    let [p, m, nd, d2] = projected_dims(projected)?;
    let u = projected.data();
    let mut bound = vec![lambda; nd];
    for k in 0..p {
        for i in 0..m {
            for (j, bj) in bound.iter_mut().enumerate() {
                let s = &u[((k * m + i) * nd + j) * d2..][..d2];
                *bj += s
                    .iter()
                    .map(|x| x.to_f64().unwrap_or(f64::INFINITY).powi(2))
                    .sum::<f64>();
            }
        }
    }
    Ok(bound)
}

/// Dense `Σ_k δ_kj Û_kjÛ_kjᵀ − λI` for one output capsule `j` (m × m).
pub fn routing_quadratic_form<T: Scalar>(
    projected: &Tensor<T>,
    signs: &SignIndicator,
    capsule: usize,
    lambda: f64,
) -> Result<Vec<f64>> {
    let [p, m, nd, d2] = projected_dims(projected)?;
    if capsule >= nd || signs.batch_size() != p || signs.num_classes() != nd {
        return Err(Error::dim(
            "routing_quadratic_form",
            "capsule or sign shape mismatch",
        ));
    }
    if m > PROBE_MAX_CAPSULES {
        return Err(Error::Config(format!(
            "dense probe limited to m <= {PROBE_MAX_CAPSULES}, got {m}"
        )));
    }
    let u = projected.data();
    let at = |k: usize, i: usize| -> &[T] { &u[((k * m + i) * nd + capsule) * d2..][..d2] };
    let mut a = vec![0.0; m * m];
    for k in 0..p {
        let s = signs.get(k, capsule) as f64;
        for r in 0..m {
            for c in 0..=r {
                let dot: f64 = at(k, r)
                    .iter()
                    .zip(at(k, c))
                    .map(|(x, y)| x.to_f64().unwrap_or(f64::NAN) * y.to_f64().unwrap_or(f64::NAN))
                    .sum();
                a[r * m + c] += s * dot;
                if r != c {
                    a[c * m + r] += s * dot;
                }
            }
        }
    }
    for r in 0..m {
        a[r * m + r] -= lambda;
    }
    Ok(a)
}

/// Reports whether `Σ_k δ_kj Û_kjÛ_kjᵀ − λI` has a positive and/or a negative eigenvalue.
/// Eigenvalues within `1e-12 · scale` of zero count as neither.
pub fn definiteness_probe<T: Scalar>(
    projected: &Tensor<T>,
    signs: &SignIndicator,
    capsule: usize,
    lambda: f64,
) -> Result<(bool, bool)> {
    check_lambda(lambda)?;
    let [_, m, _, _] = projected_dims(projected)?;
    let a = routing_quadratic_form(projected, signs, capsule, lambda)?;
    let eig = symmetric_eigenvalues(&a, m)?;
    let scale = eig.iter().fold(0.0f64, |acc, e| acc.max(e.abs()));
    let tol = 1e-12 * scale.max(1e-300);
    Ok((eig.iter().any(|&e| e > tol), eig.iter().any(|&e| e < -tol)))
}

/// One routing-by-agreement iteration's intermediates.
#[derive(Debug, Clone)]
pub struct AgreementStep<T> {
    /// p × m × n_d softmax couplings.
    pub coupling: Tensor<T>,
    /// p × n_d × d₂ weighted sums.
    pub pre_squash: Tensor<T>,
    /// p × n_d × d₂ squashed outputs.
    pub output: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DynamicRouting<T> {
    pub steps: Vec<AgreementStep<T>>,
}

impl<T: Scalar> DynamicRouting<T> {
    fn last(&self) -> &AgreementStep<T> {
        self.steps.last().expect("at least one iteration")
    }

    pub fn coupling(&self) -> &Tensor<T> {
        &self.last().coupling
    }

    pub fn pre_squash(&self) -> &Tensor<T> {
        &self.last().pre_squash
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.last().output
    }
}

fn softmax_rows<T: Scalar>(logits: &[T], out: &mut [T], width: usize) {
    for (row, o) in logits.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for (oi, &x) in o.iter_mut().zip(row) {
            *oi = (x - max).exp();
            total += *oi;
        }
        for oi in o.iter_mut() {
            *oi = *oi / total;
        }
    }
}

/// Routing-by-agreement: logits start at zero; each iteration takes a softmax
/// over output capsules, forms `v_j = Σ_i c_ij û_{j|i}`, squashes, and (except
/// after the last iteration) adds the agreement `û_{j|i} · s_j` to the logits.
pub fn dynamic_route<T: Scalar>(projected: &Tensor<T>, iters: usize) -> Result<DynamicRouting<T>> {
    if iters == 0 {
        return Err(Error::Config(
            "dynamic routing needs at least one iteration".into(),
        ));
    }
    let [p, m, nd, d2] = projected_dims(projected)?;
    let u = projected.data();
    let mut logits = vec![T::zero(); p * m * nd];
    let mut steps = Vec::with_capacity(iters);
    for it in 0..iters {
        let mut coupling = Tensor::zeros(&[p, m, nd]);
        softmax_rows(&logits, coupling.data_mut(), nd);
        let mut v = Tensor::zeros(&[p, nd, d2]);
        {
            let c = coupling.data();
            let vd = v.data_mut();
            for k in 0..p {
                for i in 0..m {
                    for j in 0..nd {
                        let w = c[(k * m + i) * nd + j];
                        let src = &u[((k * m + i) * nd + j) * d2..][..d2];
                        let dst = &mut vd[(k * nd + j) * d2..][..d2];
                        for (o, &x) in dst.iter_mut().zip(src) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let mut s = Tensor::zeros(&[p, nd, d2]);
        for (vi, si) in v
            .data()
            .chunks_exact(d2)
            .zip(s.data_mut().chunks_exact_mut(d2))
        {
            squash_into(vi, si);
        }
        if it + 1 < iters {
            for k in 0..p {
                for i in 0..m {
                    for j in 0..nd {
                        let src = &u[((k * m + i) * nd + j) * d2..][..d2];
                        let out = &s.data()[(k * nd + j) * d2..][..d2];
                        logits[(k * m + i) * nd + j] +=
                            src.iter().zip(out).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
        }
        steps.push(AgreementStep {
            coupling,
            pre_squash: v,
            output: s,
        });
    }
    Ok(DynamicRouting { steps })
}

/// Gradient with respect to the projections, back-propagating through every
/// routing iteration (softmax, weighted sum, squash and agreement updates).
pub fn dynamic_route_backward<T: Scalar>(
    projected: &Tensor<T>,
    routing: &DynamicRouting<T>,
    d_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [p, m, nd, d2] = projected_dims(projected)?;
    d_output.expect_shape("dynamic_route_backward", &[p, nd, d2])?;
    let u = projected.data();
    let mut du = Tensor::zeros(projected.shape());
    let dud = du.data_mut();
    // gradient w.r.t. the logits entering the step after `t`
    let mut d_logits_next = vec![T::zero(); p * m * nd];
    let mut ds = vec![T::zero(); p * nd * d2];
    let mut dv = vec![T::zero(); p * nd * d2];
    let iters = routing.steps.len();
    for t in (0..iters).rev() {
        let step = &routing.steps[t];
        if t + 1 == iters {
            ds.copy_from_slice(d_output.data());
        } else {
            ds.iter_mut().for_each(|x| *x = T::zero());
            let s = step.output.data();
            for k in 0..p {
                for i in 0..m {
                    for j in 0..nd {
                        let g = d_logits_next[(k * m + i) * nd + j];
                        if g == T::zero() {
                            continue;
                        }
                        let off = ((k * m + i) * nd + j) * d2;
                        let so = (k * nd + j) * d2;
                        for e in 0..d2 {
                            ds[so + e] += g * u[off + e];
                            dud[off + e] += g * s[so + e];
                        }
                    }
                }
            }
        }
        for ((vi, dsi), dvi) in step
            .pre_squash
            .data()
            .chunks_exact(d2)
            .zip(ds.chunks_exact(d2))
            .zip(dv.chunks_exact_mut(d2))
        {
            squash_backward_into(vi, dsi, dvi);
        }
        // logits at step t feed both the softmax here and (identity) the next step
        let c = step.coupling.data();
        let mut dc = vec![T::zero(); nd];
        for k in 0..p {
            for i in 0..m {
                let row = (k * m + i) * nd;
                for j in 0..nd {
                    let off = (row + j) * d2;
                    let dvo = &dv[(k * nd + j) * d2..][..d2];
                    dc[j] = u[off..off + d2].iter().zip(dvo).map(|(&a, &b)| a * b).sum();
                    let w = c[row + j];
                    for e in 0..d2 {
                        dud[off + e] += w * dvo[e];
                    }
                }
                let inner: T = (0..nd).map(|j| c[row + j] * dc[j]).sum();
                for j in 0..nd {
                    d_logits_next[row + j] += c[row + j] * (dc[j] - inner);
                }
            }
        }
    }
    Ok(du)
}
