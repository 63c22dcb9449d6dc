//! Two-stage minimisation over the smoothing parameter.
//!
//! A coarse pass evaluates the objective on a fixed candidate grid (spaced
//! evenly in degrees of freedom by default), then golden-section search in
//! `log λ` refines around the best candidate. When the objective's
//! derivative is available the result is polished by bisection on its sign.
//! Selection, the ideal parameter and the central parameters all share this
//! optimiser.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::DesignSpectrum;

pub const COARSE_CANDIDATES: usize = 201;
/// Smallest df in the search window.
pub const WINDOW_DF_LOW: f64 = 2.1;
/// The largest df in the window is `n − WINDOW_DF_GAP`.
pub const WINDOW_DF_GAP: f64 = 0.5;
/// Golden-section stops once the `log λ` bracket is narrower than this.
pub const REFINE_TOL: f64 = 1e-9;

/// Which end of the search window a minimiser landed on, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    None,
    /// Smallest λ (roughest fit, df near n).
    Low,
    /// Largest λ (smoothest fit, df near 2).
    High,
}

impl Boundary {
    pub fn as_str(self) -> &'static str {
        match self {
            Boundary::None => "none",
            Boundary::Low => "low",
            Boundary::High => "high",
        }
    }

    pub fn is_boundary(self) -> bool {
        self != Boundary::None
    }
}

/// Candidate λ values in ascending order.
#[derive(Debug, Clone)]
pub struct SearchGrid {
    lambdas: Vec<f64>,
}

impl SearchGrid {
    /// The default window: candidates evenly spaced in df.
    pub fn standard(spec: &DesignSpectrum) -> Result<Self> {
        Self::df_spaced(spec, COARSE_CANDIDATES)
    }

    pub fn df_spaced(spec: &DesignSpectrum, count: usize) -> Result<Self> {
        let (df_lo, df_hi) = window_df(spec, count)?;
        let mut lambdas = (0..count)
            .map(|j| {
                // j = 0 is the largest df, i.e. the smallest λ.
                let target = df_hi - (df_hi - df_lo) * j as f64 / (count - 1) as f64;
                spec.lambda_for_df(target)
            })
            .collect::<Result<Vec<_>>>()?;
        dedup_ascending(&mut lambdas);
        Ok(SearchGrid { lambdas })
    }

    /// Same window, candidates evenly spaced in `log λ`.
    pub fn log_spaced(spec: &DesignSpectrum, count: usize) -> Result<Self> {
        let (df_lo, df_hi) = window_df(spec, count)?;
        let lo = spec.lambda_for_df(df_hi)?.ln();
        let hi = spec.lambda_for_df(df_lo)?.ln();
        let mut lambdas: Vec<f64> = (0..count)
            .map(|j| (lo + (hi - lo) * j as f64 / (count - 1) as f64).exp())
            .collect();
        dedup_ascending(&mut lambdas);
        Ok(SearchGrid { lambdas })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

fn window_df(spec: &DesignSpectrum, count: usize) -> Result<(f64, f64)> {
    if count < 3 {
        return Err(Error::domain("a search grid needs at least 3 candidates"));
    }
    let df_hi = spec.n() as f64 - WINDOW_DF_GAP;
    if df_hi <= WINDOW_DF_LOW {
        return Err(Error::domain(format!(
            "design with n = {} is too small for the search window",
            spec.n()
        )));
    }
    Ok((WINDOW_DF_LOW, df_hi))
}

fn dedup_ascending(v: &mut Vec<f64>) {
    v.sort_by(f64::total_cmp);
    v.dedup();
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimum {
    pub lambda: f64,
    pub value: f64,
    pub boundary: Boundary,
}

/// Minimises `value(λ)` given its values `coarse` on `grid`.
///
/// Non-finite values count as `+∞`. On exact ties the larger λ wins.
pub fn minimize(
    grid: &SearchGrid,
    coarse: &[f64],
    value: &dyn Fn(f64) -> f64,
    slope: Option<&dyn Fn(f64) -> f64>,
) -> Result<Optimum> {
    let lambdas = grid.lambdas();
    assert_eq!(lambdas.len(), coarse.len(), "one coarse value per candidate");
    let last = lambdas.len() - 1;

    let mut best: Option<(usize, f64)> = None;
    for j in (0..=last).rev() {
        let v = coarse[j];
        if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
            best = Some((j, v));
        }
    }
    let (j, coarse_best) = best.ok_or_else(|| {
        Error::numeric("minimize", "objective is non-finite at every candidate")
    })?;

    let edge_lo = lambdas[j.saturating_sub(1)].ln();
    let edge_hi = lambdas[(j + 1).min(last)].ln();
    let eval = |t: f64| {
        let v = value(t.exp());
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut best_t = lambdas[j].ln();
    let mut best_v = coarse_best;
    let record = |t: f64, v: f64, best_t: &mut f64, best_v: &mut f64| {
        if v < *best_v || (v == *best_v && t > *best_t) {
            *best_t = t;
            *best_v = v;
        }
    };

    // Golden-section search on [edge_lo, edge_hi].
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (edge_lo, edge_hi);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    record(x1, f1, &mut best_t, &mut best_v);
    record(x2, f2, &mut best_t, &mut best_v);
    while hi - lo > REFINE_TOL {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = eval(x1);
            record(x1, f1, &mut best_t, &mut best_v);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = eval(x2);
            record(x2, f2, &mut best_t, &mut best_v);
        }
    }
    for t in [edge_lo, edge_hi] {
        record(t, eval(t), &mut best_t, &mut best_v);
    }

    if let Some(slope) = slope {
        if let Some(t) = polish(best_t, edge_lo, edge_hi, &|t| slope(t.exp())) {
            let v = eval(t);
            // The polished root is accepted unless it is visibly worse; near
            // the minimum values agree to rounding.
            if v <= best_v + 1e-13 * best_v.abs().max(1.0) {
                best_t = t;
                best_v = v.min(best_v);
            }
        }
    }

    let boundary = if j == 0 && best_t - lambdas[0].ln() <= REFINE_TOL {
        Boundary::Low
    } else if j == last && lambdas[last].ln() - best_t <= REFINE_TOL {
        Boundary::High
    } else {
        Boundary::None
    };
    Ok(Optimum {
        lambda: best_t.exp(),
        value: best_v,
        boundary,
    })
}

/// Bisection on the sign of `slope` (in `t = log λ`) in a small bracket
/// around `t0`, growing it until the slope changes sign from − to +.
fn polish(t0: f64, edge_lo: f64, edge_hi: f64, slope: &dyn Fn(f64) -> f64) -> Option<f64> {
    let mut delta = 1e-7;
    let (mut lo, mut hi);
    loop {
        lo = (t0 - delta).max(edge_lo);
        hi = (t0 + delta).min(edge_hi);
        let (sl, sh) = (slope(lo), slope(hi));
        if !(sl.is_finite() && sh.is_finite()) {
            return None;
        }
        if sl < 0.0 && sh > 0.0 {
            break;
        }
        if lo == edge_lo && hi == edge_hi {
            return None;
        }
        delta *= 4.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{build_design, decompose, DesignKind};

    fn spec(n: usize) -> DesignSpectrum {
        decompose(&build_design(&DesignKind::default(), n).unwrap()).unwrap()
    }

    #[test]
    fn grid_spans_window() {
        let s = spec(61);
        let grid = SearchGrid::standard(&s).unwrap();
        assert_eq!(grid.len(), COARSE_CANDIDATES);
        let l = grid.lambdas();
        assert!(l.windows(2).all(|w| w[1] > w[0]));
        assert!((s.df(l[0]).unwrap() - 60.5).abs() < 1e-9);
        assert!((s.df(l[l.len() - 1]).unwrap() - 2.1).abs() < 1e-9);
    }

    #[test]
    fn finds_interior_quadratic_minimum() {
        let s = spec(30);
        let grid = SearchGrid::standard(&s).unwrap();
        let target = grid.lambdas()[77] * 1.013;
        let f = move |l: f64| (l.ln() - target.ln()).powi(2);
        let d = move |l: f64| 2.0 * (l.ln() - target.ln()) / l;
        let coarse: Vec<f64> = grid.lambdas().iter().map(|&l| f(l)).collect();
        let opt = minimize(&grid, &coarse, &f, Some(&d)).unwrap();
        assert!((opt.lambda / target - 1.0).abs() < 1e-12);
        assert_eq!(opt.boundary, Boundary::None);
    }

    #[test]
    fn monotone_objective_hits_boundary() {
        let s = spec(30);
        let grid = SearchGrid::standard(&s).unwrap();
        let f = |l: f64| -l.ln();
        let coarse: Vec<f64> = grid.lambdas().iter().map(|&l| f(l)).collect();
        let opt = minimize(&grid, &coarse, &f, None).unwrap();
        assert_eq!(opt.boundary, Boundary::High);
        assert_eq!(opt.lambda, *grid.lambdas().last().unwrap());
        let g = |l: f64| l.ln();
        let coarse: Vec<f64> = grid.lambdas().iter().map(|&l| g(l)).collect();
        assert_eq!(minimize(&grid, &coarse, &g, None).unwrap().boundary, Boundary::Low);
    }

    #[test]
    fn ties_prefer_larger_lambda() {
        let s = spec(30);
        let grid = SearchGrid::standard(&s).unwrap();
        let f = |_: f64| 1.0;
        let coarse = vec![1.0; grid.len()];
        let opt = minimize(&grid, &coarse, &f, None).unwrap();
        assert_eq!(opt.lambda, *grid.lambdas().last().unwrap());
    }

    #[test]
    fn all_nonfinite_is_an_error() {
        let s = spec(30);
        let grid = SearchGrid::standard(&s).unwrap();
        let f = |_: f64| f64::NAN;
        let coarse = vec![f64::NAN; grid.len()];
        assert!(matches!(minimize(&grid, &coarse, &f, None), Err(Error::Numeric { .. })));
    }
}
