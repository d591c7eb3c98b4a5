//! Margin loss on capsule lengths and the squared-error reconstruction loss.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_prime: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_prime: 0.5,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(Error::Config(format!(
                "margins must satisfy 0 < m_minus < m_plus < 1, got {} and {}",
                self.m_minus, self.m_plus
            )));
        }
        if self.lambda_prime.is_nan() || self.lambda_prime <= 0.0 {
            return Err(Error::Config(format!(
                "margin.lambda_prime must be > 0, got {}",
                self.lambda_prime
            )));
        }
        Ok(())
    }
}

fn check<T: Scalar>(lengths: &Tensor<T>, targets: &Tensor<T>) -> Result<(usize, usize)> {
    if lengths.rank() != 2 {
        return Err(Error::dim(
            "margin_loss",
            format!("lengths must be p×n_d, got {:?}", lengths.shape()),
        ));
    }
    targets.expect_shape("margin_loss targets", lengths.shape())?;
    Ok((lengths.shape()[0], lengths.shape()[1]))
}

/// `mean_k Σ_j [T·max(0, m⁺−ℓ)² + λ′(1−T)·max(0, ℓ−m⁻)²]`.
pub fn margin_loss<T: Scalar>(
    lengths: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &MarginConfig,
) -> Result<T> {
    let (p, _) = check(lengths, targets)?;
    let (mp, mm, lp) = (
        T::lit(cfg.m_plus),
        T::lit(cfg.m_minus),
        T::lit(cfg.lambda_prime),
    );
    let total: T = lengths
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&l, &t)| {
            let up = (mp - l).max(T::zero());
            let down = (l - mm).max(T::zero());
            t * up * up + lp * (T::one() - t) * down * down
        })
        .sum();
    Ok(total / T::lit(p as f64))
}

/// Gradient of the margin loss w.r.t. the lengths (p × n_d).
pub fn margin_loss_length_grad<T: Scalar>(
    lengths: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &MarginConfig,
) -> Result<Tensor<T>> {
    let (p, _) = check(lengths, targets)?;
    let (mp, mm, lp) = (
        T::lit(cfg.m_plus),
        T::lit(cfg.m_minus),
        T::lit(cfg.lambda_prime),
    );
    let two_over_p = T::lit(2.0 / p as f64);
    let mut g = Tensor::zeros_like(lengths);
    for ((o, &l), &t) in g
        .data_mut()
        .iter_mut()
        .zip(lengths.data())
        .zip(targets.data())
    {
        let up = (mp - l).max(T::zero());
        let down = (l - mm).max(T::zero());
        *o = two_over_p * (lp * (T::one() - t) * down - t * up);
    }
    Ok(g)
}

/// Gradient of the margin loss w.r.t. the output capsules `s` (p × n_d × d₂),
/// via `∂ℓ/∂s = s/ℓ` (zero where ℓ = 0).
pub fn margin_loss_grad<T: Scalar>(
    lengths: &Tensor<T>,
    s: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &MarginConfig,
) -> Result<Tensor<T>> {
    let (p, nd) = check(lengths, targets)?;
    if s.rank() != 3 || s.shape()[..2] != [p, nd] {
        return Err(Error::dim(
            "margin_loss_grad",
            format!("capsules {:?} vs lengths {p}×{nd}", s.shape()),
        ));
    }
    let d = s.shape()[2];
    let gl = margin_loss_length_grad(lengths, targets, cfg)?;
    let mut g = Tensor::zeros_like(s);
    for (((out, cap), &l), &dl) in g
        .data_mut()
        .chunks_exact_mut(d)
        .zip(s.data().chunks_exact(d))
        .zip(lengths.data())
        .zip(gl.data())
    {
        if l > T::zero() && dl != T::zero() {
            for (o, &x) in out.iter_mut().zip(cap) {
                *o = dl * x / l;
            }
        }
    }
    Ok(g)
}

fn check_recon<T: Scalar>(recon: &Tensor<T>, target: &Tensor<T>) -> Result<usize> {
    if recon.rank() != 2 || recon.len() != target.len() || target.shape()[0] != recon.shape()[0] {
        return Err(Error::dim(
            "recon_loss",
            format!(
                "reconstruction {:?} vs target {:?}",
                recon.shape(),
                target.shape()
            ),
        ));
    }
    Ok(recon.shape()[0])
}

/// `weight · mean_k ‖recon_k − target_k‖²`. `target` may keep its image shape.
pub fn recon_loss<T: Scalar>(recon: &Tensor<T>, target: &Tensor<T>, weight: f64) -> Result<T> {
    let p = check_recon(recon, target)?;
    let sse: T = recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(&r, &t)| (r - t) * (r - t))
        .sum();
    Ok(T::lit(weight) * sse / T::lit(p as f64))
}

pub fn recon_loss_grad<T: Scalar>(
    recon: &Tensor<T>,
    target: &Tensor<T>,
    weight: f64,
) -> Result<Tensor<T>> {
    let p = check_recon(recon, target)?;
    let scale = T::lit(2.0 * weight / p as f64);
    let mut g = Tensor::zeros_like(recon);
    for ((o, &r), &t) in g.data_mut().iter_mut().zip(recon.data()).zip(target.data()) {
        *o = scale * (r - t);
    }
    Ok(g)
}
