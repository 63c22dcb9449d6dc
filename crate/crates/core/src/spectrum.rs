//! Cubic smoothing-spline penalty and its Demmler–Reinsch decomposition.
//!
//! The penalty is the natural cubic spline roughness matrix
//! `K = Q R⁻¹ Qᵀ` (so `fᵀ K f = ∫ f''²` for the interpolating natural spline).
//! Its eigendecomposition `K = U diag(k) Uᵀ` diagonalises every smoother
//! `A_λ = (I + λK)⁻¹ = U diag(a_λ) Uᵀ`, `a_λi = 1/(1 + λ k_i)`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::banded::TridiagCholesky;
use crate::error::{Error, Result};

/// Dimension of the penalty null space (constants and linear functions).
pub const NULL_DIM: usize = 2;

/// Supported range of `n` for the dense decomposition.
pub const MAX_DESIGN_POINTS: usize = 4096;

/// Distribution whose quantiles place design points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
    Beta { alpha: f64, beta: f64 },
}

impl Distribution {
    fn quantile(&self, p: f64) -> Result<f64> {
        match *self {
            Distribution::Uniform { lo, hi } => {
                if !(hi > lo) {
                    return Err(Error::domain("uniform distribution needs lo < hi"));
                }
                Ok(lo + p * (hi - lo))
            }
            Distribution::Normal { mean, sd } => Normal::new(mean, sd)
                .map(|d| d.inverse_cdf(p))
                .map_err(|e| Error::domain(format!("normal distribution: {e}"))),
            Distribution::Beta { alpha, beta } => Beta::new(alpha, beta)
                .map(|d| d.inverse_cdf(p))
                .map_err(|e| Error::domain(format!("beta distribution: {e}"))),
        }
    }
}

/// A design family; the number of points is supplied separately so one
/// family can be instantiated at many `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignKind {
    /// `x_i = lo + (i − 1)(hi − lo)/(n − 1)`
    Equispaced { lo: f64, hi: f64 },
    /// `x_i = G⁻¹((2i − 1)/(2n))`
    Quantile { distribution: Distribution },
    Explicit { x: Vec<f64> },
}

impl Default for DesignKind {
    fn default() -> Self {
        DesignKind::Equispaced { lo: -1.0, hi: 1.0 }
    }
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DesignKind::Equispaced { lo, hi } => write!(f, "equispaced:{lo},{hi}"),
            DesignKind::Quantile { distribution } => match distribution {
                Distribution::Uniform { lo, hi } => write!(f, "quantile:uniform({lo},{hi})"),
                Distribution::Normal { mean, sd } => write!(f, "quantile:normal({mean},{sd})"),
                Distribution::Beta { alpha, beta } => write!(f, "quantile:beta({alpha},{beta})"),
            },
            DesignKind::Explicit { x } => write!(f, "explicit:{} points", x.len()),
        }
    }
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("not a number: {t:?}")))
        })
        .collect()
}

impl FromStr for DesignKind {
    type Err = Error;

    /// `equispaced:LO,HI`, `quantile:uniform(A,B)`, `quantile:normal(M,S)`,
    /// `quantile:beta(A,B)` or `explicit:X1,X2,...`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("design {s:?}: expected KIND:ARGS")))?;
        match head.trim() {
            "equispaced" => match parse_floats(rest)?.as_slice() {
                [lo, hi] => Ok(DesignKind::Equispaced { lo: *lo, hi: *hi }),
                _ => Err(Error::Config("equispaced takes LO,HI".into())),
            },
            "quantile" => {
                let rest = rest.trim();
                let open = rest.find('(').ok_or_else(|| {
                    Error::Config(format!("quantile design {rest:?}: expected NAME(ARGS)"))
                })?;
                let name = &rest[..open];
                let args = rest[open + 1..].trim_end_matches(')');
                let v = parse_floats(args)?;
                let distribution = match (name, v.as_slice()) {
                    ("uniform", [lo, hi]) => Distribution::Uniform { lo: *lo, hi: *hi },
                    ("normal", [mean, sd]) => Distribution::Normal { mean: *mean, sd: *sd },
                    ("beta", [alpha, beta]) => Distribution::Beta {
                        alpha: *alpha,
                        beta: *beta,
                    },
                    _ => return Err(Error::Config(format!("unknown distribution {rest:?}"))),
                };
                Ok(DesignKind::Quantile { distribution })
            }
            "explicit" => Ok(DesignKind::Explicit {
                x: parse_floats(rest)?,
            }),
            other => Err(Error::Config(format!("unknown design kind {other:?}"))),
        }
    }
}

/// Strictly increasing design points, at least four of them.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignGrid {
    x: Vec<f64>,
}

impl DesignGrid {
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.len() < 4 {
            return Err(Error::domain(format!(
                "a design needs at least 4 points, got {}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("design points must be finite"));
        }
        if let Some(i) = x.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::domain(format!(
                "design points must be strictly increasing (x[{}] = {}, x[{}] = {})",
                i,
                x[i],
                i + 1,
                x[i + 1]
            )));
        }
        Ok(DesignGrid { x })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

pub fn build_design(kind: &DesignKind, n: usize) -> Result<DesignGrid> {
    if n < 4 {
        return Err(Error::domain(format!("a design needs n >= 4, got {n}")));
    }
    let x = match kind {
        DesignKind::Equispaced { lo, hi } => {
            if !(hi > lo) {
                return Err(Error::domain("equispaced design needs lo < hi"));
            }
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i + 1 == n { *hi } else { lo + i as f64 * step })
                .collect()
        }
        DesignKind::Quantile { distribution } => (0..n)
            .map(|i| distribution.quantile((2 * i + 1) as f64 / (2 * n) as f64))
            .collect::<Result<Vec<_>>>()?,
        DesignKind::Explicit { x } => {
            if x.len() != n {
                return Err(Error::domain(format!(
                    "explicit design has {} points but n = {n} was requested",
                    x.len()
                )));
            }
            x.clone()
        }
    };
    DesignGrid::new(x)
}

/// The natural cubic spline roughness matrix `K = Q R⁻¹ Qᵀ`.
pub fn penalty_matrix(grid: &DesignGrid) -> Result<DMatrix<f64>> {
    let x = grid.x();
    let n = x.len();
    let m = n - 2;
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    // Column j of Q (interior knot j + 1) has nonzeros in rows j, j+1, j+2.
    let qcol = |j: usize| -> [f64; 3] {
        let (hl, hr) = (h[j], h[j + 1]);
        [1.0 / hl, -1.0 / hl - 1.0 / hr, 1.0 / hr]
    };
    let diag: Vec<f64> = (0..m).map(|j| (h[j] + h[j + 1]) / 3.0).collect();
    let off: Vec<f64> = (0..m.saturating_sub(1)).map(|j| h[j + 1] / 6.0).collect();
    let chol = TridiagCholesky::factor(&diag, &off)?;

    // X = R⁻¹ Qᵀ, one column of Qᵀ (row of Q) at a time.
    let mut xmat = DMatrix::<f64>::zeros(m, n);
    let mut rhs = vec![0.0; m];
    for r in 0..n {
        rhs.iter_mut().for_each(|v| *v = 0.0);
        for j in r.saturating_sub(2)..=r.min(m - 1) {
            rhs[j] = qcol(j)[r - j];
        }
        chol.solve_in_place(&mut rhs);
        for (j, v) in rhs.iter().enumerate() {
            xmat[(j, r)] = *v;
        }
    }
    let mut k = DMatrix::<f64>::zeros(n, n);
    for r in 0..n {
        for j in r.saturating_sub(2)..=r.min(m - 1) {
            let qv = qcol(j)[r - j];
            for c in 0..n {
                k[(r, c)] += qv * xmat[(j, c)];
            }
        }
    }
    // Symmetrise away rounding asymmetry.
    let kt = k.transpose();
    Ok((k + kt) * 0.5)
}

/// Orthonormal basis of the penalty null space: the normalised constant and
/// centred linear vectors.
fn null_basis(x: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let n = x.len() as f64;
    let ones = DVector::from_element(x.len(), 1.0 / n.sqrt());
    let mean = x.iter().sum::<f64>() / n;
    let centred = DVector::from_iterator(x.len(), x.iter().map(|v| v - mean));
    let norm = centred.norm();
    (ones, centred / norm)
}

/// Applies `H = I − 2 v vᵀ / vᵀv` to both sides of `m`: `m ← H m H`.
fn reflect_both_sides(m: &mut DMatrix<f64>, v: &DVector<f64>) {
    let vv = v.dot(v);
    if vv == 0.0 {
        return;
    }
    let beta = 2.0 / vv;
    // H M H = M − β v wᵀ − β w vᵀ + β² (vᵀ M v) v vᵀ with w = M v.
    let w = &*m * v;
    let vmv = v.dot(&w);
    let c = beta * beta * vmv;
    let n = m.nrows();
    for j in 0..n {
        for i in 0..n {
            m[(i, j)] += -beta * (v[i] * w[j] + w[i] * v[j]) + c * v[i] * v[j];
        }
    }
}

/// Applies `H` from the right to `m`: `m ← m H`.
fn reflect_right(m: &mut DMatrix<f64>, v: &DVector<f64>) {
    let vv = v.dot(v);
    if vv == 0.0 {
        return;
    }
    let beta = 2.0 / vv;
    let w = &*m * v;
    m.ger(-beta, &w, v, 1.0);
}

/// Householder vector mapping `u` (zero before `start`) onto `±‖u‖ e_start`.
fn householder(u: &DVector<f64>, start: usize) -> (DVector<f64>, f64) {
    let norm = u.rows(start, u.len() - start).norm();
    let alpha = if u[start] >= 0.0 { -norm } else { norm };
    let mut v = u.clone();
    for i in 0..start {
        v[i] = 0.0;
    }
    v[start] -= alpha;
    (v, alpha)
}

/// Demmler–Reinsch decomposition of a design.
#[derive(Debug, Clone)]
pub struct DesignSpectrum {
    x: Vec<f64>,
    u: DMatrix<f64>,
    k: Vec<f64>,
    null_dim: usize,
}

/// Shrinkage factors `a_i = 1/(1 + λk_i)` and `b_i = 1 − a_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherWeights {
    pub lambda: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Leading indices with `k_i = 0`; sums over penalized indices skip them.
    pub null_dim: usize,
}

impl SmootherWeights {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn df(&self) -> f64 {
        self.a.iter().sum()
    }

    /// `(a_i, b_i)` over penalized indices.
    pub fn penalized(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.a[self.null_dim..]
            .iter()
            .copied()
            .zip(self.b[self.null_dim..].iter().copied())
    }
}

pub fn decompose(grid: &DesignGrid) -> Result<DesignSpectrum> {
    let n = grid.len();
    if n > MAX_DESIGN_POINTS {
        return Err(Error::domain(format!(
            "dense decomposition supports n <= {MAX_DESIGN_POINTS}, got {n}"
        )));
    }
    let mut kmat = penalty_matrix(grid)?;

    // Rotate the known null space onto the first two coordinates so the
    // eigenproblem only sees the positive-definite block.
    let (e1, e2) = null_basis(grid.x());
    let (v1, alpha1) = householder(&e1, 0);
    let beta1 = 2.0 / v1.dot(&v1);
    let w = &e2 - &v1 * (beta1 * v1.dot(&e2));
    let (v2, alpha2) = householder(&w, 1);
    reflect_both_sides(&mut kmat, &v1);
    reflect_both_sides(&mut kmat, &v2);

    let m = n - NULL_DIM;
    let block = kmat.view((NULL_DIM, NULL_DIM), (m, m)).clone_owned();
    let block = (&block + block.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(block, f64::EPSILON, 0).ok_or_else(|| {
        Error::numeric("symmetric eigensolver", format!("no convergence for n = {n}"))
    })?;

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    if let Some(&first) = order.first() {
        let smallest = eig.eigenvalues[first];
        if !(smallest > 0.0) {
            return Err(Error::numeric(
                "decompose",
                format!("penalty is not positive definite off its null space (k = {smallest:e})"),
            ));
        }
    }

    // G = H1 H2 has ±e1, ±e2 as its first columns; U = G · diag(I₂, V).
    let mut g = DMatrix::<f64>::identity(n, n);
    reflect_right(&mut g, &v1);
    reflect_right(&mut g, &v2);
    let mut inner = DMatrix::<f64>::zeros(n, n);
    inner[(0, 0)] = alpha1.signum();
    inner[(1, 1)] = alpha2.signum();
    let mut k = vec![0.0; n];
    for (col, &src) in order.iter().enumerate() {
        k[NULL_DIM + col] = eig.eigenvalues[src];
        for r in 0..m {
            inner[(NULL_DIM + r, NULL_DIM + col)] = eig.eigenvectors[(r, src)];
        }
    }
    let mut u = g * inner;
    // Canonical sign: first nonnegligible entry of each column positive.
    for mut col in u.column_iter_mut() {
        if let Some(v) = col.iter().copied().find(|v| v.abs() > 1e-8) {
            if v < 0.0 {
                col.neg_mut();
            }
        }
    }
    Ok(DesignSpectrum {
        x: grid.x().to_vec(),
        u,
        k,
        null_dim: NULL_DIM,
    })
}

impl DesignSpectrum {
    /// Assembles a spectrum from stored parts, checking shapes and ordering.
    pub fn from_parts(x: Vec<f64>, k: Vec<f64>, u: DMatrix<f64>, null_dim: usize) -> Result<Self> {
        let n = x.len();
        if k.len() != n || u.nrows() != n || u.ncols() != n {
            return Err(Error::domain("spectrum parts have inconsistent sizes"));
        }
        if null_dim != NULL_DIM
            || k[..null_dim].iter().any(|&v| v != 0.0)
            || k[null_dim..].iter().any(|&v| !(v > 0.0))
            || k.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::domain(
                "spectrum eigenvalues must be two zeros followed by positive nondecreasing values",
            ));
        }
        Ok(DesignSpectrum { x, u, k, null_dim })
    }

    pub fn n(&self) -> usize {
        self.k.len()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn null_dim(&self) -> usize {
        self.null_dim
    }

    pub fn weights(&self, lambda: f64) -> Result<SmootherWeights> {
        check_lambda(lambda)?;
        let mut a = Vec::with_capacity(self.n());
        let mut b = Vec::with_capacity(self.n());
        for &ki in &self.k {
            let t = lambda * ki;
            let ai = 1.0 / (1.0 + t);
            a.push(ai);
            // b = λk a, computed directly to keep full relative precision.
            b.push(t * ai);
        }
        Ok(SmootherWeights {
            lambda,
            a,
            b,
            null_dim: self.null_dim,
        })
    }

    /// `tr A_λ = Σ a_i`.
    pub fn df(&self, lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        Ok(self.df_unchecked(lambda))
    }

    fn df_unchecked(&self, lambda: f64) -> f64 {
        self.null_dim as f64
            + self.k[self.null_dim..]
                .iter()
                .map(|&ki| 1.0 / (1.0 + lambda * ki))
                .sum::<f64>()
    }

    /// Inverts the monotone map `λ ↦ df(λ)` by bisection on `log λ`.
    pub fn lambda_for_df(&self, target: f64) -> Result<f64> {
        let n = self.n() as f64;
        let lo_df = self.null_dim as f64;
        if !(target > lo_df && target < n) {
            return Err(Error::domain(format!(
                "target df {target} outside ({lo_df}, {n})"
            )));
        }
        let kmax = self.k[self.n() - 1];
        let kmin = self.k[self.null_dim];
        let mut lo = (1.0 / kmax).ln();
        let mut hi = (1.0 / kmin).ln();
        while self.df_unchecked(lo.exp()) <= target {
            lo -= 5.0;
            if lo < -700.0 {
                return Err(Error::numeric("lambda_for_df", "lower bracket underflow"));
            }
        }
        while self.df_unchecked(hi.exp()) >= target {
            hi += 5.0;
            if hi > 700.0 {
                return Err(Error::numeric("lambda_for_df", "upper bracket overflow"));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let d = self.df_unchecked(mid.exp());
            if (d - target).abs() <= 1e-12 * n || hi - lo < 1e-15 {
                return Ok(mid.exp());
            }
            if d > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((0.5 * (lo + hi)).exp())
    }

    /// `f̂ = U diag(a_λ) Uᵀ y`.
    pub fn smooth(&self, lambda: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len(y)?;
        let w = self.weights(lambda)?;
        let mut coef = self.u.tr_mul(&DVector::from_column_slice(y));
        for (c, a) in coef.iter_mut().zip(&w.a) {
            *c *= a;
        }
        Ok((&self.u * coef).as_slice().to_vec())
    }

    /// `Uᵀ v / σ`.
    pub fn rotate(&self, v: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_len(v)?;
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::domain(format!("σ must be positive, got {sigma}")));
        }
        let c = self.u.tr_mul(&DVector::from_column_slice(v));
        Ok(c.iter().map(|x| x / sigma).collect())
    }

    /// `σ U c`, the inverse of [`rotate`](Self::rotate).
    pub fn unrotate(&self, coef: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_len(coef)?;
        let v = &self.u * DVector::from_column_slice(coef);
        Ok(v.iter().map(|x| x * sigma).collect())
    }

    /// `U diag(k) Uᵀ`.
    pub fn reconstruct_penalty(&self) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.k[j];
        }
        scaled * self.u.transpose()
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n() {
            return Err(Error::domain(format!(
                "vector has length {}, design has {} points",
                v.len(),
                self.n()
            )));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::domain(format!("λ must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

// Cache file layout (all little endian):
//   magic     8 bytes  "SPLSPEC\0"
//   version   u32
//   null_dim  u32
//   n         u64
//   x         n × f64
//   k         n × f64
//   U         n × n × f64, row-major
const CACHE_MAGIC: &[u8; 8] = b"SPLSPEC\0";
pub const CACHE_FORMAT_VERSION: u32 = 1;

impl DesignSpectrum {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.n();
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.null_dim as u32).to_le_bytes())?;
        w.write_all(&(n as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * (2 * n + n * n));
        for v in self.x.iter().chain(&self.k) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for r in 0..n {
            for c in 0..n {
                buf.extend_from_slice(&self.u[(r, c)].to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Cache {
            path: origin.to_path_buf(),
            detail,
        };
        let mut head = [0u8; 24];
        r.read_exact(&mut head)?;
        if &head[..8] != CACHE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
        if version != CACHE_FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let null_dim = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
        if !(4..=MAX_DESIGN_POINTS).contains(&n) {
            return Err(bad(format!("implausible n = {n}")));
        }
        let mut body = vec![0u8; 8 * (2 * n + n * n)];
        r.read_exact(&mut body).map_err(|e| bad(format!("truncated body: {e}")))?;
        let mut vals = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let x: Vec<f64> = vals.by_ref().take(n).collect();
        let k: Vec<f64> = vals.by_ref().take(n).collect();
        let u = DMatrix::from_row_iterator(n, n, vals);
        DesignSpectrum::from_parts(x, k, u, null_dim).map_err(|e| bad(e.to_string()))
    }
}

/// On-disk cache of decompositions keyed by the exact design points.
#[derive(Debug, Clone)]
pub struct SpectrumCache {
    dir: PathBuf,
}

impl SpectrumCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SpectrumCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, grid: &DesignGrid) -> PathBuf {
        // FNV-1a over the bit patterns of x.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in grid.x() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        self.dir.join(format!("spectrum-n{}-{h:016x}.bin", grid.len()))
    }

    /// Loads the cached decomposition for `grid`, or computes and stores it.
    pub fn get_or_build(&self, grid: &DesignGrid) -> Result<DesignSpectrum> {
        let path = self.path_for(grid);
        if path.exists() {
            match fs::File::open(&path)
                .map_err(Error::from)
                .and_then(|f| DesignSpectrum::read_from(std::io::BufReader::new(f), &path))
            {
                Ok(spec) if spec.x() == grid.x() => return Ok(spec),
                Ok(_) => log::warn!("{}: design mismatch, rebuilding", path.display()),
                Err(e) => log::warn!("{e}; rebuilding"),
            }
        }
        let spec = decompose(grid)?;
        fs::create_dir_all(&self.dir)?;
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(f);
            spec.write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(spec)
    }
}

/// Shared source of decompositions: an in-memory memo in front of an
/// optional on-disk cache.
#[derive(Debug, Default)]
pub struct SpectrumStore {
    disk: Option<SpectrumCache>,
    memo: Mutex<HashMap<Vec<u64>, Arc<DesignSpectrum>>>,
}

impl SpectrumStore {
    pub fn in_memory() -> Self {
        SpectrumStore::default()
    }

    pub fn with_cache(cache: SpectrumCache) -> Self {
        SpectrumStore {
            disk: Some(cache),
            memo: Mutex::default(),
        }
    }

    pub fn get(&self, grid: &DesignGrid) -> Result<Arc<DesignSpectrum>> {
        let key: Vec<u64> = grid.x().iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let spec = Arc::new(match &self.disk {
            Some(cache) => cache.get_or_build(grid)?,
            None => decompose(grid)?,
        });
        self.memo
            .lock()
            .expect("memo lock")
            .insert(key, Arc::clone(&spec));
        Ok(spec)
    }

    pub fn design(&self, kind: &DesignKind, n: usize) -> Result<Arc<DesignSpectrum>> {
        self.get(&build_design(kind, n)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn equi(lo: f64, hi: f64, n: usize) -> DesignGrid {
        build_design(&DesignKind::Equispaced { lo, hi }, n).unwrap()
    }

    #[test]
    fn equispaced_points() {
        let g = equi(0.0, 1.0, 5);
        assert_eq!(g.x(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = equi(-1.0, 1.0, 61);
        assert_eq!(g.x()[0], -1.0);
        assert_eq!(g.x()[60], 1.0);
        assert!((g.x()[1] - g.x()[0] - 1.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_quantile_points() {
        let kind = DesignKind::Quantile {
            distribution: Distribution::Uniform { lo: 0.0, hi: 1.0 },
        };
        let g = build_design(&kind, 4).unwrap();
        assert_eq!(g.x(), &[0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn design_errors() {
        assert!(build_design(&DesignKind::default(), 3).is_err());
        let bad = DesignKind::Explicit {
            x: vec![0.0, 1.0, 0.5, 2.0],
        };
        assert!(matches!(build_design(&bad, 4), Err(Error::Domain(_))));
        assert!(DesignGrid::new(vec![0.0, 1.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn parse_design_kinds() {
        assert_eq!(
            "equispaced:-1,1".parse::<DesignKind>().unwrap(),
            DesignKind::Equispaced { lo: -1.0, hi: 1.0 }
        );
        assert_eq!(
            "quantile:normal(0,2)".parse::<DesignKind>().unwrap(),
            DesignKind::Quantile {
                distribution: Distribution::Normal { mean: 0.0, sd: 2.0 }
            }
        );
        assert!("wobbly:1".parse::<DesignKind>().is_err());
    }

    #[test]
    fn smallest_design_has_rank_two_penalty() {
        let spec = decompose(&equi(0.0, 1.0, 4)).unwrap();
        assert_eq!(spec.k()[..2], [0.0, 0.0]);
        assert!(spec.k()[2] > 0.0 && spec.k()[3] > 0.0);
    }

    #[test]
    fn weights_edge_cases() {
        let spec = decompose(&equi(-1.0, 1.0, 20)).unwrap();
        let w = spec.weights(0.0).unwrap();
        assert!(w.a.iter().all(|&a| a == 1.0));
        let w = spec.weights(3.7).unwrap();
        assert_eq!(&w.a[..2], &[1.0, 1.0]);
        let lam = 1.0 / spec.k()[5];
        let w = spec.weights(lam).unwrap();
        assert!((w.a[5] - 0.5).abs() < 1e-15 && (w.b[5] - 0.5).abs() < 1e-15);
        assert!(spec.weights(-1.0).is_err());
    }

    #[test]
    fn df_limits() {
        let spec = decompose(&equi(-1.0, 1.0, 30)).unwrap();
        assert_eq!(spec.df(0.0).unwrap(), 30.0);
        assert!(spec.k()[29] >= 1.0);
        assert!((spec.df(1e12).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let spec = decompose(&equi(-1.0, 1.0, 12)).unwrap();
        let mut buf = Vec::new();
        spec.write_to(&mut buf).unwrap();
        let back = DesignSpectrum::read_from(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back.k(), spec.k());
        assert_eq!(back.x(), spec.x());
        assert_eq!(back.u(), spec.u());
        buf[0] = b'X';
        assert!(matches!(
            DesignSpectrum::read_from(&buf[..], Path::new("mem")),
            Err(Error::Cache { .. })
        ));
    }
}
