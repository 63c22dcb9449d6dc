//! Geometric diagnostics of a criterion's estimating equation: statistical
//! curvature and the reversal statistic.
//!
//! Writing the first-order condition as `η̇ᵀ(u − μ) = 0`, the curvature
//! measures how fast the direction `η̇_λ` turns as `λ` moves; the reversal
//! statistic `R₀ = l̈ − β l̇` at the ideal parameter is negative on the part
//! of sample space where nearby normal-equation hyperplanes cross and
//! selection becomes unstable.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::criteria::Criterion;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::oracle::{mean_and_se, TruthSpectrum};
use crate::rng::{standard_normals, Purpose};
use crate::specfun::{moment_set, normal_cdf};
use crate::spectrum::{DesignSpectrum, SmootherWeights};

/// `η̇`, `η̈`, `μ` and the squared curvature at one `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionGeometry {
    pub lambda: f64,
    pub eta_dot: Vec<f64>,
    pub eta_ddot: Vec<f64>,
    pub mu: Vec<f64>,
    pub gamma_sq: f64,
}

fn positive_weights(spec: &DesignSpectrum, lambda: f64) -> Result<SmootherWeights> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::domain(format!("λ must be finite and > 0, got {lambda}")));
    }
    spec.weights(lambda)
}

/// Squared statistical curvature in closed form:
/// `((p+q)²/(p c_q^{p−1})) · {S₄/S₂² − S₃²/S₂³}` with
/// `S_j = Σ a^j b^{(p−1)/q}` over penalized indices.
pub fn curvature_sq(criterion: Criterion, spec: &DesignSpectrum, lambda: f64) -> Result<f64> {
    let w = positive_weights(spec, lambda)?;
    let (p, q, c) = (criterion.p(), criterion.q(), criterion.c_q());
    let e = (p - 1.0) / q;
    let (mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0);
    for (a, b) in w.penalized() {
        let base = a * a * b.powf(e);
        s2 += base;
        s3 += base * a;
        s4 += base * a * a;
    }
    let bracket = s4 / (s2 * s2) - s3 * s3 / (s2 * s2 * s2);
    Ok(((p + q).powi(2) / (p * c.powf(p - 1.0)) * bracket).max(0.0))
}

/// Full geometry, with the curvature computed from
/// `det(M)/(η̇ᵀVη̇)³`, `V = diag(c_q^{−(p+1)} b^{−(p+1)/q}/p)`.
pub fn criterion_geometry(criterion: Criterion, spec: &DesignSpectrum, lambda: f64) -> Result<CriterionGeometry> {
    let w = positive_weights(spec, lambda)?;
    let (p, q, c) = (criterion.p(), criterion.q(), criterion.c_q());
    let n = w.len();
    let mut eta_dot = vec![0.0; n];
    let mut eta_ddot = vec![0.0; n];
    let mut mu = vec![0.0; n];
    let (mut m11, mut m12, mut m22) = (0.0, 0.0, 0.0);
    for i in w.null_dim..n {
        let (a, b) = (w.a[i], w.b[i]);
        let t = c * b.powf(1.0 / q);
        let tp = t.powf(p);
        let d1 = -p / (q * lambda) * a * tp;
        let d2 = -p / (q * lambda * lambda) * a * tp * (p / q * a - (1.0 + b));
        let v = c.powf(-(p + 1.0)) * b.powf(-(p + 1.0) / q) / p;
        eta_dot[i] = d1;
        eta_ddot[i] = d2;
        mu[i] = 1.0 / t;
        m11 += d1 * v * d1;
        m12 += d2 * v * d1;
        m22 += d2 * v * d2;
    }
    let det = Matrix2::new(m11, m12, m12, m22).determinant();
    Ok(CriterionGeometry {
        lambda,
        eta_dot,
        eta_ddot,
        mu,
        gamma_sq: det / m11.powi(3),
    })
}

pub fn curvature_via_matrix(criterion: Criterion, spec: &DesignSpectrum, lambda: f64) -> Result<f64> {
    Ok(criterion_geometry(criterion, spec, lambda)?.gamma_sq)
}

/// The weight ratio `ρ = Σ a³ b^{−2/q} / Σ a² b^{−2/q}` (penalized indices).
pub fn reversal_ratio(criterion: Criterion, w: &SmootherWeights) -> f64 {
    let e = -2.0 / criterion.q();
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in w.penalized() {
        let base = a * a * b.powf(e);
        num += base * a;
        den += base;
    }
    num / den
}

/// `β = −(1/λ₀)[2 − (1 + p/q) ρ]`.
pub fn reversal_beta(criterion: Criterion, spec: &DesignSpectrum, lambda0: f64) -> Result<f64> {
    let w = positive_weights(spec, lambda0)?;
    let rho = reversal_ratio(criterion, &w);
    Ok(beta_from(criterion, lambda0, rho))
}

fn beta_from(criterion: Criterion, lambda0: f64, rho: f64) -> f64 {
    -(2.0 - (1.0 + criterion.p() / criterion.q()) * rho) / lambda0
}

/// `R₀(z) = l̈ − β l̇` at `λ₀`.
pub fn reversal_stat(criterion: Criterion, spec: &DesignSpectrum, lambda0: f64, z: &[f64]) -> Result<f64> {
    let beta = reversal_beta(criterion, spec, lambda0)?;
    let u = criterion.transform(z);
    let (d1, d2) = criterion.loss_derivs(spec, lambda0, &u)?;
    Ok(d2 - beta * d1)
}

/// Reversal diagnostics at the ideal parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReversalSummary {
    pub lambda0: f64,
    pub beta: f64,
    /// The weight ratio entering `β` and the moments.
    pub rho: f64,
    /// Mean of `R₀`.
    pub mean: f64,
    /// Variance of `R₀`.
    pub variance: f64,
    /// `−mean/√variance`, so that `P(R₀ < 0) ≈ Φ(t_n)`.
    pub t_n: f64,
    pub prob_normal: f64,
    pub prob_mc: f64,
    pub mc_se: f64,
}

/// Mean and variance of `R₀` from the truth's moments, and the normal
/// approximation to `P(R₀ < 0)`. The Monte Carlo fields are left as NaN.
pub fn reversal_moments(
    criterion: Criterion,
    spec: &DesignSpectrum,
    truth: &TruthSpectrum,
    lambda0: f64,
) -> Result<ReversalSummary> {
    let w = positive_weights(spec, lambda0)?;
    let (p, q, c) = (criterion.p(), criterion.q(), criterion.c_q());
    let rho = reversal_ratio(criterion, &w);
    let e = (p - 1.0) / q;
    let mut level = 0.0;
    let mut tilt = 0.0;
    let mut spread = 0.0;
    for (i, (a, b)) in w.penalized().enumerate() {
        let i = i + w.null_dim;
        let ms = moment_set(truth.g[i], q)?;
        let be = b.powf(e);
        level += a * a * be;
        tilt += a * be * (a - rho) * (c * b.powf(1.0 / q) * ms.m1 - 1.0);
        spread += a * a * b.powf(2.0 * p / q) * (a - rho).powi(2) * ms.var_w;
    }
    // Both moments carry powers of 1/λ₀ from the λ-derivatives.
    let l2 = lambda0 * lambda0;
    let mean = p / (q * q) * (p + q) * c.powf(p - 1.0) * (level / (p + q) + tilt) / l2;
    let variance = p * p / q.powi(4) * (p + q).powi(2) * c.powf(2.0 * p) * spread / (l2 * l2);
    if !(variance > 0.0) {
        return Err(Error::numeric(
            "reversal_moments",
            format!("nonpositive variance {variance:e}"),
        ));
    }
    let t_n = -mean / variance.sqrt();
    Ok(ReversalSummary {
        lambda0,
        beta: beta_from(criterion, lambda0, rho),
        rho,
        mean,
        variance,
        t_n,
        prob_normal: normal_cdf(t_n),
        prob_mc: f64::NAN,
        mc_se: f64::NAN,
    })
}

/// Fraction of draws `z ~ Normal(g, I)` with `R₀(z) < 0`, and its binomial
/// standard error.
pub fn reversal_prob_mc(
    criterion: Criterion,
    spec: &DesignSpectrum,
    truth: &TruthSpectrum,
    lambda0: f64,
    replicates: usize,
    seed: u64,
    exec: &Executor,
) -> Result<(f64, f64)> {
    if replicates == 0 {
        return Err(Error::domain("reversal Monte Carlo needs replicates > 0"));
    }
    let beta = reversal_beta(criterion, spec, lambda0)?;
    let n = spec.n();
    let hits: Vec<Result<f64>> = exec.map(replicates, |r| {
        let mut z = standard_normals(seed, n, r as u64, Purpose::Reversal, n);
        for (zi, gi) in z.iter_mut().zip(&truth.g) {
            *zi += gi;
        }
        let u = criterion.transform(&z);
        let (d1, d2) = criterion.loss_derivs(spec, lambda0, &u)?;
        Ok(if d2 - beta * d1 < 0.0 { 1.0 } else { 0.0 })
    });
    let hits = hits.into_iter().collect::<Result<Vec<_>>>()?;
    let (prob, _) = mean_and_se(&hits);
    Ok((prob, (prob * (1.0 - prob) / replicates as f64).sqrt()))
}

/// Moments plus Monte Carlo in one summary.
pub fn reversal_summary(
    criterion: Criterion,
    spec: &DesignSpectrum,
    truth: &TruthSpectrum,
    lambda0: f64,
    replicates: usize,
    seed: u64,
    exec: &Executor,
) -> Result<ReversalSummary> {
    let mut summary = reversal_moments(criterion, spec, truth, lambda0)?;
    let (prob, se) = reversal_prob_mc(criterion, spec, truth, lambda0, replicates, seed, exec)?;
    summary.prob_mc = prob;
    summary.mc_se = se;
    Ok(summary)
}
