//! The `(p, q)` family of smoothing-parameter criteria.
//!
//! With `t_i = c_q b_i^{1/q}` and `u_i = |z_i|^{2/q}`, the loss at `λ` is
//!
//! ```text
//! p > 1:  Σ [ t_i^p u_i − p/(p−1) (t_i^{p−1} − 1) ]
//! p = 1:  Σ [ t_i u_i − (1/q) log b_i ]
//! ```
//!
//! summed over penalized indices only. Cp is `(2, 1)`, GML `(1, 1)` and EE
//! `(3/2, 3/2)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::{minimize, Boundary, SearchGrid};
use crate::specfun::c_q;
use crate::spectrum::{DesignSpectrum, SmootherWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Criterion {
    p: f64,
    q: f64,
    c_q: f64,
}

/// Per-index pieces of the loss at one `λ`: the loss is `Σ slope·u + offset`.
#[derive(Debug, Clone, Copy)]
struct Terms {
    a: f64,
    b: f64,
    /// `t = c_q b^{1/q}`
    t: f64,
    slope: f64,
    offset: f64,
}

impl Criterion {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        if !(p >= 1.0 && q >= 1.0) || !p.is_finite() || !q.is_finite() {
            return Err(Error::domain(format!(
                "criteria need p >= 1 and q >= 1, got ({p}, {q})"
            )));
        }
        Ok(Criterion { p, q, c_q: c_q(q)? })
    }

    pub fn cp() -> Self {
        Criterion::new(2.0, 1.0).expect("valid parameters")
    }

    pub fn gml() -> Self {
        Criterion::new(1.0, 1.0).expect("valid parameters")
    }

    pub fn ee() -> Self {
        Criterion::new(1.5, 1.5).expect("valid parameters")
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn c_q(&self) -> f64 {
        self.c_q
    }

    /// `cp`, `gml`, `ee`, or `P:Q` for other members.
    pub fn label(&self) -> String {
        match (self.p, self.q) {
            (p, q) if p == 2.0 && q == 1.0 => "cp".into(),
            (p, q) if p == 1.0 && q == 1.0 => "gml".into(),
            (p, q) if p == 1.5 && q == 1.5 => "ee".into(),
            (p, q) => format!("{p}:{q}"),
        }
    }

    /// `u = |z|^{2/q}`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        if self.q == 1.0 {
            z.iter().map(|v| v * v).collect()
        } else {
            let e = 2.0 / self.q;
            z.iter().map(|v| v.abs().powf(e)).collect()
        }
    }

    fn terms(&self, lambda: f64, k: f64) -> Terms {
        let lk = lambda * k;
        let a = 1.0 / (1.0 + lk);
        let b = lk * a;
        let t = if self.q == 1.0 {
            self.c_q * b
        } else {
            self.c_q * b.powf(1.0 / self.q)
        };
        self.terms_from(a, b, t, lk)
    }

    fn terms_from(&self, a: f64, b: f64, t: f64, lk: f64) -> Terms {
        let (slope, offset) = if self.p == 1.0 {
            // log b = log(λk) − log(1 + λk), accurate for small b too.
            (t, -(lk.ln() - lk.ln_1p()) / self.q)
        } else if self.p == 2.0 {
            (t * t, -2.0 * (t - 1.0))
        } else {
            let tp1 = t.powf(self.p - 1.0);
            (tp1 * t, -self.p / (self.p - 1.0) * (tp1 - 1.0))
        };
        Terms {
            a,
            b,
            t,
            slope,
            offset,
        }
    }

    /// The criterion at the weights' `λ`, for transformed data `u`.
    pub fn loss(&self, w: &SmootherWeights, u: &[f64]) -> Result<f64> {
        check_len(u, w.len())?;
        if self.p == 1.0 && w.lambda == 0.0 {
            return Err(Error::domain("p = 1 criteria are undefined at λ = 0"));
        }
        let mut total = 0.0;
        for i in w.null_dim..w.len() {
            let (a, b) = (w.a[i], w.b[i]);
            let t = if self.q == 1.0 {
                self.c_q * b
            } else {
                self.c_q * b.powf(1.0 / self.q)
            };
            // b/a = λk exactly by construction.
            let terms = self.terms_from(a, b, t, b / a);
            total += terms.slope * u[i] + terms.offset;
        }
        Ok(total)
    }

    /// The criterion at `λ`, straight from the spectrum.
    pub fn loss_at(&self, spec: &DesignSpectrum, lambda: f64, u: &[f64]) -> Result<f64> {
        check_len(u, spec.n())?;
        check_positive(lambda)?;
        Ok(self.loss_unchecked(spec, lambda, u))
    }

    fn loss_unchecked(&self, spec: &DesignSpectrum, lambda: f64, u: &[f64]) -> f64 {
        let nd = spec.null_dim();
        spec.k()[nd..]
            .iter()
            .zip(&u[nd..])
            .map(|(&k, &ui)| {
                let t = self.terms(lambda, k);
                t.slope * ui + t.offset
            })
            .sum()
    }

    /// First and second derivatives of the loss in `λ`.
    pub fn loss_derivs(&self, spec: &DesignSpectrum, lambda: f64, u: &[f64]) -> Result<(f64, f64)> {
        check_len(u, spec.n())?;
        check_positive(lambda)?;
        Ok(self.derivs_unchecked(spec, lambda, u))
    }

    fn derivs_unchecked(&self, spec: &DesignSpectrum, lambda: f64, u: &[f64]) -> (f64, f64) {
        let (p, q) = (self.p, self.q);
        let nd = spec.null_dim();
        let mut first = 0.0;
        let mut second = 0.0;
        for (&k, &ui) in spec.k()[nd..].iter().zip(&u[nd..]) {
            let Terms { a, b, t, slope, .. } = self.terms(lambda, k);
            let tp = slope;
            let tp1 = tp / t;
            let resid = tp * ui - tp1;
            first += a * resid;
            second += -a * (1.0 + b) / lambda * resid
                + a * a / (q * lambda) * (p * tp * ui - (p - 1.0) * tp1);
        }
        let scale = p / (q * lambda);
        (scale * first, scale * second)
    }

    /// `η̇_i = −(p/(qλ)) a_i t_i^p` on penalized indices, zero elsewhere.
    pub fn eta_dot(&self, w: &SmootherWeights) -> Result<Vec<f64>> {
        check_positive(w.lambda)?;
        let scale = -self.p / (self.q * w.lambda);
        Ok(self.per_penalized(w, |a, t| scale * a * t.powf(self.p)))
    }

    /// `μ_i = 1/t_i` on penalized indices, zero elsewhere.
    pub fn mu(&self, w: &SmootherWeights) -> Result<Vec<f64>> {
        check_positive(w.lambda)?;
        Ok(self.per_penalized(w, |_, t| 1.0 / t))
    }

    fn per_penalized(&self, w: &SmootherWeights, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        for i in w.null_dim..w.len() {
            let t = self.c_q * w.b[i].powf(1.0 / self.q);
            out[i] = f(w.a[i], t);
        }
        out
    }

    /// Minimises the loss for transformed data `u` (or expected values of
    /// it) over `grid`.
    pub fn minimize_loss(
        &self,
        spec: &DesignSpectrum,
        grid: &SearchGrid,
        u: &[f64],
    ) -> Result<SelectionResult> {
        check_len(u, spec.n())?;
        let coarse: Vec<f64> = grid
            .lambdas()
            .iter()
            .map(|&l| self.loss_unchecked(spec, l, u))
            .collect();
        self.finish(spec, grid, &coarse, u)
    }

    fn finish(
        &self,
        spec: &DesignSpectrum,
        grid: &SearchGrid,
        coarse: &[f64],
        u: &[f64],
    ) -> Result<SelectionResult> {
        let value = |l: f64| self.loss_unchecked(spec, l, u);
        let slope = |l: f64| self.derivs_unchecked(spec, l, u).0;
        let opt = minimize(grid, coarse, &value, Some(&slope))?;
        Ok(SelectionResult {
            lambda: opt.lambda,
            df: spec.df(opt.lambda)?,
            loss: opt.value,
            at_boundary: opt.boundary,
        })
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cp" => Ok(Criterion::cp()),
            "gml" => Ok(Criterion::gml()),
            "ee" => Ok(Criterion::ee()),
            other => {
                let (p, q) = other
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("unknown criterion {s:?}")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("unknown criterion {s:?}")))
                };
                Criterion::new(parse(p)?, parse(q)?)
            }
        }
    }
}

impl TryFrom<String> for Criterion {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Criterion> for String {
    fn from(c: Criterion) -> String {
        c.label()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub lambda: f64,
    pub df: f64,
    pub loss: f64,
    pub at_boundary: Boundary,
}

/// Selection for one criterion on one spectrum, with the coarse-stage
/// coefficients precomputed so each dataset costs one pass over the table.
#[derive(Debug, Clone)]
pub struct Selector<'a> {
    criterion: Criterion,
    spec: &'a DesignSpectrum,
    grid: &'a SearchGrid,
    /// Row `j` holds the loss slopes at candidate `j` over penalized indices.
    slopes: Vec<f64>,
    offsets: Vec<f64>,
}

impl<'a> Selector<'a> {
    pub fn new(criterion: Criterion, spec: &'a DesignSpectrum, grid: &'a SearchGrid) -> Self {
        let nd = spec.null_dim();
        let width = spec.n() - nd;
        let mut slopes = Vec::with_capacity(width * grid.len());
        let mut offsets = Vec::with_capacity(grid.len());
        for &lambda in grid.lambdas() {
            let mut offset = 0.0;
            for &k in &spec.k()[nd..] {
                let t = criterion.terms(lambda, k);
                slopes.push(t.slope);
                offset += t.offset;
            }
            offsets.push(offset);
        }
        Selector {
            criterion,
            spec,
            grid,
            slopes,
            offsets,
        }
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    /// Selects `λ̂` for spectral data `z = Uᵀy/σ`.
    pub fn select(&self, z: &[f64]) -> Result<SelectionResult> {
        check_len(z, self.spec.n())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("spectral data must be finite"));
        }
        let u = self.criterion.transform(z);
        let nd = self.spec.null_dim();
        let width = self.spec.n() - nd;
        let pen = &u[nd..];
        let coarse: Vec<f64> = self
            .slopes
            .chunks_exact(width)
            .zip(&self.offsets)
            .map(|(row, off)| row.iter().zip(pen).map(|(s, v)| s * v).sum::<f64>() + off)
            .collect();
        self.criterion.finish(self.spec, self.grid, &coarse, &u)
    }
}

/// One-shot selection on the standard search window.
pub fn select(criterion: Criterion, spec: &DesignSpectrum, z: &[f64]) -> Result<SelectionResult> {
    let grid = SearchGrid::standard(spec)?;
    Selector::new(criterion, spec, &grid).select(z)
}

/// Classic Cp and GCV statistics with inflation factor `ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassicStatistics {
    /// `‖y − f̂‖² + 2ωσ² df − nσ²`
    pub cp: f64,
    /// `‖y − f̂‖² / (1 − ω df / n)²`
    pub gcv: f64,
}

pub fn classic_statistics(
    spec: &DesignSpectrum,
    lambda: f64,
    y: &[f64],
    sigma: f64,
    omega: f64,
) -> Result<ClassicStatistics> {
    if !(sigma > 0.0) || !(omega > 0.0) {
        return Err(Error::domain("σ and ω must be positive"));
    }
    let fit = spec.smooth(lambda, y)?;
    let rss: f64 = y.iter().zip(&fit).map(|(a, b)| (a - b).powi(2)).sum();
    let df = spec.df(lambda)?;
    let n = spec.n() as f64;
    if omega * df >= n {
        return Err(Error::domain(format!(
            "GCV is undefined when ω·df ({}) >= n ({n})",
            omega * df
        )));
    }
    let var = sigma * sigma;
    Ok(ClassicStatistics {
        cp: rss + 2.0 * omega * var * df - n * var,
        gcv: rss / (1.0 - omega * df / n).powi(2),
    })
}

/// Default number of high-frequency components for [`sigma_estimate`]:
/// `max(20, n/10)` rounded, capped at `n − 5`.
pub fn default_sigma_window(n: usize) -> usize {
    (((n as f64) / 10.0).round() as usize).max(20).min(n.saturating_sub(5))
}

/// Noise variance from the highest components of `Uᵀy`:
/// the sum of the last `M + 2` squared coefficients divided by `M − 2`.
/// Returns `σ̃` (the square root).
pub fn sigma_estimate(spec: &DesignSpectrum, y: &[f64], window: usize) -> Result<f64> {
    let n = spec.n();
    if window < 5 || window + 5 > n {
        return Err(Error::domain(format!(
            "sigma window M = {window} must satisfy 5 <= M <= n - 5 = {}",
            n as i64 - 5
        )));
    }
    let coef = spec.rotate(y, 1.0)?;
    let tail: f64 = coef[n - window - 2..].iter().map(|c| c * c).sum();
    Ok((tail / (window as f64 - 2.0)).sqrt())
}

fn check_len(v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::domain(format!(
            "expected {n} values, got {}",
            v.len()
        )));
    }
    Ok(())
}

fn check_positive(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::domain(format!("λ must be finite and > 0, got {lambda}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{build_design, decompose, DesignKind};

    fn spec(n: usize) -> DesignSpectrum {
        decompose(&build_design(&DesignKind::default(), n).unwrap()).unwrap()
    }

    fn pseudo_z(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 113) as f64 / 113.0 - 0.5) * 3.0 + 0.1).collect()
    }

    #[test]
    fn named_members() {
        assert_eq!(Criterion::cp().c_q(), 1.0);
        assert_eq!("EE".parse::<Criterion>().unwrap(), Criterion::ee());
        assert_eq!("2:1".parse::<Criterion>().unwrap().label(), "cp");
        assert_eq!("3:1.5".parse::<Criterion>().unwrap().label(), "3:1.5");
        assert!("0.5:1".parse::<Criterion>().is_err());
        assert!("aic".parse::<Criterion>().is_err());
        let json = serde_json::to_string(&Criterion::gml()).unwrap();
        assert_eq!(json, "\"gml\"");
        assert_eq!(serde_json::from_str::<Criterion>(&json).unwrap(), Criterion::gml());
    }

    #[test]
    fn cp_and_gml_reduce_to_classical_forms() {
        let s = spec(25);
        let z = pseudo_z(25);
        let w = s.weights(0.01).unwrap();
        let cp_u = Criterion::cp().transform(&z);
        let expected: f64 = (2..25).map(|i| w.b[i] * w.b[i] * cp_u[i] - 2.0 * w.b[i]).sum();
        let got = Criterion::cp().loss(&w, &cp_u).unwrap() - 2.0 * 23.0;
        assert!((got - expected).abs() < 1e-10 * expected.abs().max(1.0));
        let gml: f64 = (2..25).map(|i| w.b[i] * z[i] * z[i] - w.b[i].ln()).sum();
        let got = Criterion::gml().loss(&w, &cp_u).unwrap();
        assert!((got - gml).abs() < 1e-10 * gml.abs());
    }

    #[test]
    fn ee_matches_textbook_form_up_to_affine_map() {
        let s = spec(25);
        let z = pseudo_z(25);
        let ee = Criterion::ee();
        let u = ee.transform(&z);
        let c = ee.c_q();
        let textbook = |l: f64| {
            let w = s.weights(l).unwrap();
            (2..25).map(|i| c * w.b[i] * u[i] - 3.0 * w.b[i].powf(1.0 / 3.0)).sum::<f64>()
        };
        for l in [1e-4, 1e-2, 1.0] {
            let ours = ee.loss(&s.weights(l).unwrap(), &u).unwrap();
            // ours = √c · textbook + 3·23
            let mapped = c.sqrt() * textbook(l) + 3.0 * 23.0;
            assert!((ours - mapped).abs() < 1e-10 * ours.abs().max(1.0));
        }
    }

    #[test]
    fn gml_undefined_at_zero() {
        let s = spec(10);
        let w = s.weights(0.0).unwrap();
        assert!(Criterion::gml().loss(&w, &[1.0; 10]).is_err());
        assert!(Criterion::cp().loss(&w, &[1.0; 10]).unwrap().is_finite());
    }

    #[test]
    fn eta_dot_and_mu_reproduce_first_derivative() {
        let s = spec(30);
        let z = pseudo_z(30);
        for c in [Criterion::cp(), Criterion::gml(), Criterion::ee()] {
            let u = c.transform(&z);
            let lambda = 3e-3;
            let w = s.weights(lambda).unwrap();
            let eta = c.eta_dot(&w).unwrap();
            let mu = c.mu(&w).unwrap();
            let via: f64 = -(2..30).map(|i| eta[i] * (u[i] - mu[i])).sum::<f64>();
            let (d1, _) = c.loss_derivs(&s, lambda, &u).unwrap();
            assert!((via - d1).abs() <= 1e-10 * d1.abs(), "{c}: {via} vs {d1}");
        }
    }

    #[test]
    fn sign_flip_does_not_change_selection() {
        let s = spec(40);
        let z = pseudo_z(40);
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        for c in [Criterion::cp(), Criterion::ee()] {
            assert_eq!(select(c, &s, &z).unwrap(), select(c, &s, &neg).unwrap());
        }
    }

    #[test]
    fn sigma_window() {
        assert_eq!(default_sigma_window(961), 96);
        assert_eq!(default_sigma_window(61), 20);
        let s = spec(30);
        assert!(sigma_estimate(&s, &vec![0.0; 30], 30).is_err());
        assert!(sigma_estimate(&s, &vec![0.0; 30], 4).is_err());
    }

    #[test]
    fn classic_statistics_edges() {
        let s = spec(20);
        let y: Vec<f64> = (0..20).map(|i| (i as f64 * 0.4).sin()).collect();
        assert!(classic_statistics(&s, 0.0, &y, 1.0, 1.0).is_err());
        let lambda = 0.05;
        let fit = s.smooth(lambda, &y).unwrap();
        let st = classic_statistics(&s, lambda, &fit, 0.5, 1.0).unwrap();
        let df = s.df(lambda).unwrap();
        // smoothing a fit again changes it slightly, so compare with its RSS
        let refit = s.smooth(lambda, &fit).unwrap();
        let rss: f64 = fit.iter().zip(&refit).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((st.cp - (rss + 2.0 * 0.25 * df - 20.0 * 0.25)).abs() < 1e-12);
    }
}
