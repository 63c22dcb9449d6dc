//! Quantities that need the true curve: risk, the ideal and central
//! smoothing parameters, and the decomposition of a criterion's extra risk
//! into bias, covariance and variability terms.

use serde::{Deserialize, Serialize};

use crate::criteria::Criterion;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::rng::{standard_normals, Purpose};
use crate::search::{minimize, Boundary, SearchGrid};
use crate::specfun::{abs_moment, moment_set};
use crate::spectrum::{DesignKind, DesignSpectrum, SpectrumStore};

/// The true curve in spectral coordinates, `g = Uᵀf/σ`.
#[derive(Debug, Clone)]
pub struct TruthSpectrum {
    pub f: Vec<f64>,
    pub sigma: f64,
    pub g: Vec<f64>,
}

impl TruthSpectrum {
    pub fn new(spec: &DesignSpectrum, f: Vec<f64>, sigma: f64) -> Result<Self> {
        let g = spec.rotate(&f, sigma)?;
        Ok(TruthSpectrum { f, sigma, g })
    }

    /// `Σ k_i g_i²`, the roughness of the truth in spectral units.
    pub fn roughness(&self, spec: &DesignSpectrum) -> f64 {
        spec.k().iter().zip(&self.g).map(|(k, g)| k * g * g).sum()
    }

    /// `E u_i = E|z_i|^{2/q}` for `z_i ~ Normal(g_i, 1)`.
    pub fn expected_transform(&self, q: f64) -> Result<Vec<f64>> {
        if q == 1.0 {
            return Ok(self.g.iter().map(|g| 1.0 + g * g).collect());
        }
        self.g.iter().map(|&g| abs_moment(g, 1.0 / q)).collect()
    }
}

/// A minimiser of a truth-dependent objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OraclePoint {
    pub lambda: f64,
    pub df: f64,
    pub at_boundary: Boundary,
}

/// `E‖ĝ_λ − g‖² = Σ (b_i² g_i² + a_i²)` over all indices.
pub fn risk(spec: &DesignSpectrum, truth: &TruthSpectrum, lambda: f64) -> Result<f64> {
    let w = spec.weights(lambda)?;
    Ok(risk_from(&w.a, &w.b, &truth.g))
}

fn risk_from(a: &[f64], b: &[f64], g: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(g)
        .map(|((a, b), g)| b * b * g * g + a * a)
        .sum()
}

fn risk_slope(spec: &DesignSpectrum, truth: &TruthSpectrum, lambda: f64) -> f64 {
    // d/dλ Σ(b²g² + a²) = (2/λ) Σ a b (b g² − a)
    let nd = spec.null_dim();
    let s: f64 = spec.k()[nd..]
        .iter()
        .zip(&truth.g[nd..])
        .map(|(&k, &g)| {
            let lk = lambda * k;
            let a = 1.0 / (1.0 + lk);
            let b = lk * a;
            a * b * (b * g * g - a)
        })
        .sum();
    2.0 * s / lambda
}

/// `λ₀`, the minimiser of the risk over the search window.
pub fn ideal_lambda(spec: &DesignSpectrum, truth: &TruthSpectrum, grid: &SearchGrid) -> Result<OraclePoint> {
    check_truth(spec, truth)?;
    let value = |l: f64| risk(spec, truth, l).unwrap_or(f64::INFINITY);
    let slope = |l: f64| risk_slope(spec, truth, l);
    let coarse: Vec<f64> = grid.lambdas().iter().map(|&l| value(l)).collect();
    let opt = minimize(grid, &coarse, &value, Some(&slope))?;
    Ok(OraclePoint {
        lambda: opt.lambda,
        df: spec.df(opt.lambda)?,
        at_boundary: opt.boundary,
    })
}

/// `λ_c`, the minimiser of the criterion's expected loss.
pub fn central_lambda(
    criterion: Criterion,
    spec: &DesignSpectrum,
    truth: &TruthSpectrum,
    grid: &SearchGrid,
) -> Result<OraclePoint> {
    check_truth(spec, truth)?;
    let m = truth.expected_transform(criterion.q())?;
    let sel = criterion.minimize_loss(spec, grid, &m)?;
    Ok(OraclePoint {
        lambda: sel.lambda,
        df: sel.df,
        at_boundary: sel.at_boundary,
    })
}

/// Both sides of the central normal equation
/// `Σ a b^{p/q}(c_q E u − 1) = Σ a b^{(p−1)/q} − Σ a b^{p/q}`,
/// summed over penalized indices. At `λ_c` they agree.
pub fn normal_equation_sides(
    criterion: Criterion,
    spec: &DesignSpectrum,
    truth: &TruthSpectrum,
    lambda: f64,
) -> Result<(f64, f64)> {
    let (p, q, c) = (criterion.p(), criterion.q(), criterion.c_q());
    let m = truth.expected_transform(q)?;
    let w = spec.weights(lambda)?;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for (i, (a, b)) in w.penalized().enumerate() {
        let i = i + w.null_dim;
        let bp = b.powf(p / q);
        lhs += a * bp * (c * m[i] - 1.0);
        rhs += a * b.powf((p - 1.0) / q) - a * bp;
    }
    Ok((lhs, rhs))
}

/// Monte Carlo estimate of the extra-risk decomposition for one criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub lambda0: f64,
    pub df0: f64,
    pub lambda_c: f64,
    pub df_c: f64,
    /// `risk(λ_c) − risk(λ₀)`, computed exactly.
    pub bias_term: f64,
    /// `E(ĝ_{λc} − g)ᵀ(ĝ_{λ̂} − ĝ_{λc})`
    pub covariance_term: f64,
    /// `E‖ĝ_{λ̂} − ĝ_{λc}‖²`
    pub variability_term: f64,
    /// `E‖ĝ_{λ̂} − g‖² − risk(λ₀)`
    pub extra_risk: f64,
    pub mc_replicates: usize,
    /// Standard errors of the covariance, variability and extra-risk
    /// estimates, in that order.
    pub mc_standard_errors: [f64; 3],
}

impl DecompositionReport {
    /// `extra_risk − (bias + 2·cov + var)`; zero in expectation.
    pub fn identity_gap(&self) -> f64 {
        self.extra_risk - (self.bias_term + 2.0 * self.covariance_term + self.variability_term)
    }
}

/// Per-replicate sample of the decomposition for one criterion.
#[derive(Debug, Clone, Copy)]
struct DecompositionSample {
    covariance: f64,
    variability: f64,
    sqerr: f64,
}

/// Estimates the decomposition for each criterion. Every replicate draws one
/// `z ~ Normal(g, I)` shared by all criteria.
pub fn decomposition_mc(
    criteria: &[Criterion],
    spec: &DesignSpectrum,
    truth: &TruthSpectrum,
    replicates: usize,
    seed: u64,
    exec: &Executor,
) -> Result<Vec<DecompositionReport>> {
    if replicates < 2 {
        return Err(Error::domain("decomposition needs at least 2 replicates"));
    }
    let grid = SearchGrid::standard(spec)?;
    let ideal = ideal_lambda(spec, truth, &grid)?;
    let risk0 = risk(spec, truth, ideal.lambda)?;
    let centrals = criteria
        .iter()
        .map(|&c| central_lambda(c, spec, truth, &grid))
        .collect::<Result<Vec<_>>>()?;
    let central_weights = centrals
        .iter()
        .map(|c| spec.weights(c.lambda).map(|w| w.a))
        .collect::<Result<Vec<_>>>()?;
    let selectors: Vec<_> = criteria
        .iter()
        .map(|&c| crate::criteria::Selector::new(c, spec, &grid))
        .collect();
    let n = spec.n();

    let samples: Vec<Result<Vec<DecompositionSample>>> = exec.map(replicates, |r| {
        let mut z = standard_normals(seed, n, r as u64, Purpose::Spectral, n);
        for (zi, gi) in z.iter_mut().zip(&truth.g) {
            *zi += gi;
        }
        selectors
            .iter()
            .zip(&central_weights)
            .map(|(sel, a_c)| {
                let chosen = sel.select(&z)?;
                let a_hat = spec.weights(chosen.lambda)?.a;
                let mut covariance = 0.0;
                let mut variability = 0.0;
                let mut sqerr = 0.0;
                for i in 0..n {
                    let centre_err = a_c[i] * z[i] - truth.g[i];
                    let spread = (a_hat[i] - a_c[i]) * z[i];
                    covariance += centre_err * spread;
                    variability += spread * spread;
                    sqerr += (a_hat[i] * z[i] - truth.g[i]).powi(2);
                }
                Ok(DecompositionSample {
                    covariance,
                    variability,
                    sqerr,
                })
            })
            .collect()
    });
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::with_capacity(criteria.len());
    for (ci, central) in centrals.iter().enumerate() {
        let column = |f: fn(&DecompositionSample) -> f64| -> (f64, f64) {
            let vals: Vec<f64> = samples.iter().map(|s| f(&s[ci])).collect();
            mean_and_se(&vals)
        };
        let (cov, cov_se) = column(|s| s.covariance);
        let (var, var_se) = column(|s| s.variability);
        let (sq, sq_se) = column(|s| s.sqerr);
        reports.push(DecompositionReport {
            lambda0: ideal.lambda,
            df0: ideal.df,
            lambda_c: central.lambda,
            df_c: central.df,
            bias_term: risk(spec, truth, central.lambda)? - risk0,
            covariance_term: cov,
            variability_term: var,
            extra_risk: sq - risk0,
            mc_replicates: replicates,
            mc_standard_errors: [cov_se, var_se, sq_se],
        });
    }
    Ok(reports)
}

/// Sample mean and its standard error.
pub fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// First-order approximations of the variability and covariance terms at
/// the central parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionApprox {
    pub variability_approx: f64,
    pub covariance_approx: f64,
    /// The linearisation denominator `Q_{λc}(E u)`.
    pub q_denominator: f64,
}

/// `Q_λ(u) = Σ a b^{(p−1)/q} { a/q + [(1 + p/q) a − 2](c_q b^{1/q} u − 1) }`
/// over penalized indices.
pub fn linearisation_denominator(criterion: Criterion, spec: &DesignSpectrum, lambda: f64, u: &[f64]) -> Result<f64> {
    let (p, q, c) = (criterion.p(), criterion.q(), criterion.c_q());
    let w = spec.weights(lambda)?;
    if u.len() != w.len() {
        return Err(Error::domain("u has the wrong length"));
    }
    let e = (p - 1.0) / q;
    Ok(w
        .penalized()
        .zip(&u[w.null_dim..])
        .map(|((a, b), &ui)| {
            a * b.powf(e) * (a / q + ((1.0 + p / q) * a - 2.0) * (c * b.powf(1.0 / q) * ui - 1.0))
        })
        .sum())
}

pub fn decomposition_approx(
    criterion: Criterion,
    spec: &DesignSpectrum,
    truth: &TruthSpectrum,
    lambda_c: f64,
) -> Result<DecompositionApprox> {
    let (p, q, c) = (criterion.p(), criterion.q(), criterion.c_q());
    let w = spec.weights(lambda_c)?;
    let m = truth.expected_transform(q)?;
    let qd = linearisation_denominator(criterion, spec, lambda_c, &m)?;

    let mut scale = 0.0;
    let mut noise_energy = 0.0;
    let mut weighted_var = 0.0;
    let mut third = 0.0;
    let mut cov = 0.0;
    for (i, (a, b)) in w.penalized().enumerate() {
        let i = i + w.null_dim;
        let g = truth.g[i];
        let ms = moment_set(g, q)?;
        let bpq = b.powf(p / q);
        noise_energy += a * a * b * b * (g * g + 1.0);
        weighted_var += a * a * bpq * bpq * ms.var_w;
        third += a.powi(4) * b * b * bpq * bpq * ms.third_mixed;
        cov += a * a * b * bpq * (a * ms.cov_z2_w - g * ms.cov_z_w);
        scale += (a * b.powf((p - 1.0) / q)).abs();
    }
    if !(qd.abs() > 1e-12 * scale) {
        return Err(Error::numeric(
            "decomposition_approx",
            format!("degenerate linearisation denominator Q = {qd:e}"),
        ));
    }
    Ok(DecompositionApprox {
        variability_approx: c * c / (qd * qd) * (noise_energy * weighted_var + third),
        covariance_approx: c / qd * cov,
        q_denominator: qd,
    })
}

/// One row of a rate probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub lambda_c: f64,
    pub df_c: f64,
    pub at_boundary: Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProbe {
    pub criterion: Criterion,
    pub rows: Vec<RateRow>,
    /// Least-squares slope of `log λ_c` against `log n` (interior rows).
    pub lambda_slope: f64,
    /// Least-squares slope of `log df_c` against `log n` (interior rows).
    pub df_slope: f64,
    /// Sample sizes whose `λ_c` hit the window boundary.
    pub excluded: Vec<usize>,
}

/// `λ_c` and `df_c` across sample sizes, with fitted log-log slopes.
pub fn rate_probe(
    criterion: Criterion,
    kind: &DesignKind,
    n_list: &[usize],
    truth: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    sigma: f64,
    store: &SpectrumStore,
) -> Result<RateProbe> {
    if n_list.len() < 2 || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("rate probes need an increasing list of sample sizes"));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let spec = store.design(kind, n)?;
        let ts = TruthSpectrum::new(&spec, truth(spec.x())?, sigma)?;
        let grid = SearchGrid::standard(&spec)?;
        let central = central_lambda(criterion, &spec, &ts, &grid)?;
        rows.push(RateRow {
            n,
            lambda_c: central.lambda,
            df_c: central.df,
            at_boundary: central.at_boundary,
        });
    }
    let excluded: Vec<usize> = rows.iter().filter(|r| r.at_boundary.is_boundary()).map(|r| r.n).collect();
    let interior: Vec<&RateRow> = rows.iter().filter(|r| !r.at_boundary.is_boundary()).collect();
    let ns: Vec<f64> = interior.iter().map(|r| r.n as f64).collect();
    let lambda_slope = log_log_slope(&ns, &interior.iter().map(|r| r.lambda_c).collect::<Vec<_>>());
    let df_slope = log_log_slope(&ns, &interior.iter().map(|r| r.df_c).collect::<Vec<_>>());
    Ok(RateProbe {
        criterion,
        rows,
        lambda_slope,
        df_slope,
        excluded,
    })
}

/// Least-squares slope of `log y` on `log x`; NaN with fewer than two points.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    if lx.len() < 2 {
        return f64::NAN;
    }
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn check_truth(spec: &DesignSpectrum, truth: &TruthSpectrum) -> Result<()> {
    if truth.g.len() != spec.n() {
        return Err(Error::domain(format!(
            "truth has {} points, design has {}",
            truth.g.len(),
            spec.n()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{build_design, decompose};

    fn setup(n: usize) -> (DesignSpectrum, TruthSpectrum) {
        let spec = decompose(&build_design(&DesignKind::default(), n).unwrap()).unwrap();
        let f: Vec<f64> = spec
            .x()
            .iter()
            .map(|&x| (std::f64::consts::PI * (x + 1.0)).sin() / (x / 2.0 + 1.0))
            .collect();
        let truth = TruthSpectrum::new(&spec, f, 1.0).unwrap();
        (spec, truth)
    }

    #[test]
    fn risk_limits() {
        let (spec, truth) = setup(30);
        assert!((risk(&spec, &truth, 0.0).unwrap() - 30.0).abs() < 1e-12);
        let zero = TruthSpectrum::new(&spec, vec![0.0; 30], 1.0).unwrap();
        assert!((risk(&spec, &zero, 1e12).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn risk_rewrite_via_penalty_identity() {
        let (spec, truth) = setup(40);
        let lambda = 2e-3;
        let w = spec.weights(lambda).unwrap();
        let rewritten: f64 = (0..40)
            .map(|i| lambda * w.a[i] * w.b[i] * spec.k()[i] * truth.g[i].powi(2) + w.a[i].powi(2))
            .sum();
        let direct = risk(&spec, &truth, lambda).unwrap();
        assert!((rewritten - direct).abs() <= 1e-10 * direct);
    }

    #[test]
    fn cp_centre_is_ideal() {
        let (spec, truth) = setup(61);
        let grid = SearchGrid::standard(&spec).unwrap();
        let ideal = ideal_lambda(&spec, &truth, &grid).unwrap();
        let cp = central_lambda(Criterion::cp(), &spec, &truth, &grid).unwrap();
        assert!((cp.lambda - ideal.lambda).abs() <= 1e-6 * ideal.lambda);
        assert_eq!(ideal.at_boundary, Boundary::None);
    }

    #[test]
    fn normal_equation_holds_at_centre() {
        let (spec, truth) = setup(61);
        let grid = SearchGrid::standard(&spec).unwrap();
        for c in [Criterion::cp(), Criterion::gml(), Criterion::ee()] {
            let central = central_lambda(c, &spec, &truth, &grid).unwrap();
            let (lhs, rhs) = normal_equation_sides(c, &spec, &truth, central.lambda).unwrap();
            assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs(), "{c}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_truth_goes_to_smooth_boundary() {
        let (spec, _) = setup(30);
        let zero = TruthSpectrum::new(&spec, vec![0.0; 30], 1.0).unwrap();
        let grid = SearchGrid::standard(&spec).unwrap();
        assert_eq!(ideal_lambda(&spec, &zero, &grid).unwrap().at_boundary, Boundary::High);
        for c in [Criterion::cp(), Criterion::gml(), Criterion::ee()] {
            assert_eq!(
                central_lambda(c, &spec, &zero, &grid).unwrap().at_boundary,
                Boundary::High
            );
        }
    }

    #[test]
    fn denominator_at_centre_of_transform() {
        let (spec, _) = setup(30);
        let c = Criterion::ee();
        let lambda = 1e-3;
        let w = spec.weights(lambda).unwrap();
        // u = μ zeroes the second summand.
        let mut u = vec![0.0; 30];
        for i in 2..30 {
            u[i] = 1.0 / (c.c_q() * w.b[i].powf(1.0 / c.q()));
        }
        let e = (c.p() - 1.0) / c.q();
        let expected: f64 = w.penalized().map(|(a, b)| a * a * b.powf(e) / c.q()).sum();
        let got = linearisation_denominator(c, &spec, lambda, &u).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn slope_fit() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.2)).collect();
        assert!((log_log_slope(&x, &y) - 0.2).abs() < 1e-12);
    }
}
