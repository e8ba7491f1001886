//! Open-uniform (clamped) B-spline bases on a closed interval.
//!
//! The estimator and the synthetic ground truths both represent the scalar
//! interaction kernel as `φ(u) = Σ_k θ_k B_k(u)` over a clamped uniform knot
//! vector. Evaluation uses the Cox–de Boor triangular table restricted to the
//! `P + 1` basis functions that are nonzero on the knot span containing `u`,
//! so a point costs O(P²) and never allocates.
//!
//! Inputs outside the domain are clamped to the nearest endpoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest supported spline degree. Bounds the stack scratch space.
pub const MAX_DEGREE: usize = 15;
const MAX_ORDER: usize = MAX_DEGREE + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("basis size {basis_size} is below degree + 1 = {min}")]
    BasisTooSmall { basis_size: usize, min: usize },
    #[error("degree {0} exceeds the supported maximum {MAX_DEGREE}")]
    DegreeTooLarge(usize),
    #[error("domain [{lo}, {hi}] is empty or not finite")]
    EmptyDomain { lo: f64, hi: f64 },
    #[error("coefficient vector has length {got}, basis size is {expected}")]
    CoefficientLength { got: usize, expected: usize },
    #[error("derivative requested for a degree-0 spline")]
    DegreeZeroDerivative,
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    /// `[-radius, radius]`.
    pub fn symmetric(radius: f64) -> Self {
        Self { lo: -radius, hi: radius }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.lo && u <= self.hi
    }
}

/// Compact description of a clamped uniform knot vector; this is what gets
/// serialized, the knots themselves are rebuilt on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnotSpec {
    pub degree: usize,
    pub basis_size: usize,
    pub domain: Interval,
}

/// Clamped uniform knot vector: both endpoints repeated `degree + 1` times,
/// `basis_size - degree - 1` equally spaced interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KnotSpec", into = "KnotSpec")]
pub struct KnotVector {
    degree: usize,
    basis_size: usize,
    domain: Interval,
    spacing: f64,
    knots: Vec<f64>,
}

impl TryFrom<KnotSpec> for KnotVector {
    type Error = SplineError;

    fn try_from(spec: KnotSpec) -> Result<Self, Self::Error> {
        build_knots(spec.degree, spec.basis_size, spec.domain)
    }
}

impl From<KnotVector> for KnotSpec {
    fn from(kv: KnotVector) -> Self {
        kv.spec()
    }
}

/// Build the clamped uniform knot vector with `basis_size` basis functions.
pub fn build_knots(
    degree: usize,
    basis_size: usize,
    domain: Interval,
) -> Result<KnotVector, SplineError> {
    if degree > MAX_DEGREE {
        return Err(SplineError::DegreeTooLarge(degree));
    }
    if basis_size < degree + 1 {
        return Err(SplineError::BasisTooSmall {
            basis_size,
            min: degree + 1,
        });
    }
    if !(domain.lo.is_finite() && domain.hi.is_finite() && domain.hi > domain.lo) {
        return Err(SplineError::EmptyDomain {
            lo: domain.lo,
            hi: domain.hi,
        });
    }
    let cells = basis_size - degree;
    let spacing = domain.width() / cells as f64;
    let mut knots = Vec::with_capacity(basis_size + degree + 1);
    knots.extend(std::iter::repeat_n(domain.lo, degree + 1));
    for c in 1..cells {
        knots.push(domain.lo + c as f64 * spacing);
    }
    knots.extend(std::iter::repeat_n(domain.hi, degree + 1));
    Ok(KnotVector {
        degree,
        basis_size,
        domain,
        spacing,
        knots,
    })
}

impl KnotVector {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn basis_size(&self) -> usize {
        self.basis_size
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Distance between consecutive distinct knots.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Number of non-degenerate knot spans, `K - P`.
    pub fn cells(&self) -> usize {
        self.basis_size - self.degree
    }

    pub fn spec(&self) -> KnotSpec {
        KnotSpec {
            degree: self.degree,
            basis_size: self.basis_size,
            domain: self.domain,
        }
    }

    /// Index `μ` with `t_μ ≤ u < t_{μ+1}`, using the right-closed last span
    /// for `u = hi`. `u` must already be clamped.
    fn find_span(&self, u: f64) -> usize {
        let cell = ((u - self.domain.lo) / self.spacing).floor();
        let last = self.cells() - 1;
        let cell = if cell.is_nan() || cell < 0.0 {
            0
        } else {
            (cell as usize).min(last)
        };
        self.degree + cell
    }

    /// Evaluate the nonzero basis functions at `u` into `out[..=P]`, returning
    /// the global index of `out[0]`.
    pub fn eval_nonzero(&self, u: f64, out: &mut [f64]) -> usize {
        let u = self.domain.clamp(u);
        let span = self.find_span(u);
        basis_funs(&self.knots, span, u, self.degree, out);
        span - self.degree
    }

    /// Dense vector `(B_1(u), …, B_K(u))`.
    pub fn eval_basis(&self, u: f64) -> Vec<f64> {
        let mut local = [0.0; MAX_ORDER];
        let first = self.eval_nonzero(u, &mut local);
        let mut dense = vec![0.0; self.basis_size];
        dense[first..=first + self.degree].copy_from_slice(&local[..=self.degree]);
        dense
    }
}

/// Cox–de Boor triangular table (Piegl & Tiller A2.2) for the `degree + 1`
/// functions of the given degree that are nonzero on `span`.
fn basis_funs(knots: &[f64], span: usize, u: f64, degree: usize, out: &mut [f64]) {
    let mut left = [0.0; MAX_ORDER];
    let mut right = [0.0; MAX_ORDER];
    out[0] = 1.0;
    for j in 1..=degree {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// `φ(u) = Σ_k θ_k B_k(u)` on a clamped uniform knot vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRepr")]
pub struct SplineKernel {
    knots: KnotVector,
    theta: Vec<f64>,
}

#[derive(Deserialize)]
struct KernelRepr {
    knots: KnotVector,
    theta: Vec<f64>,
}

impl TryFrom<KernelRepr> for SplineKernel {
    type Error = SplineError;

    fn try_from(r: KernelRepr) -> Result<Self, Self::Error> {
        SplineKernel::new(r.knots, r.theta)
    }
}

impl SplineKernel {
    pub fn new(knots: KnotVector, theta: Vec<f64>) -> Result<Self, SplineError> {
        if theta.len() != knots.basis_size() {
            return Err(SplineError::CoefficientLength {
                got: theta.len(),
                expected: knots.basis_size(),
            });
        }
        Ok(Self { knots, theta })
    }

    /// The kernel that is identically `value`.
    pub fn constant(knots: KnotVector, value: f64) -> Self {
        let theta = vec![value; knots.basis_size()];
        Self { knots, theta }
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn degree(&self) -> usize {
        self.knots.degree
    }

    pub fn eval(&self, u: f64) -> f64 {
        let mut local = [0.0; MAX_ORDER];
        let first = self.knots.eval_nonzero(u, &mut local);
        let p = self.knots.degree;
        self.theta[first..=first + p]
            .iter()
            .zip(&local[..=p])
            .map(|(t, b)| t * b)
            .sum()
    }

    /// `φ'(u)` from the degree-(P−1) basis on the scaled coefficient
    /// differences. At the clamped endpoints this is the one-sided derivative
    /// from inside the domain.
    pub fn eval_deriv(&self, u: f64) -> Result<f64, SplineError> {
        if self.knots.degree == 0 {
            return Err(SplineError::DegreeZeroDerivative);
        }
        Ok(self.eval_with_deriv(u).1)
    }

    /// `(φ(u), φ'(u))`. Requires degree ≥ 1; for degree 0 the derivative
    /// slot is 0.
    pub fn eval_with_deriv(&self, u: f64) -> (f64, f64) {
        let kv = &self.knots;
        let p = kv.degree;
        let u = kv.domain.clamp(u);
        let span = kv.find_span(u);
        let mut full = [0.0; MAX_ORDER];
        basis_funs(&kv.knots, span, u, p, &mut full);
        let first = span - p;
        let value: f64 = self.theta[first..=span]
            .iter()
            .zip(&full[..=p])
            .map(|(t, b)| t * b)
            .sum();
        if p == 0 {
            return (value, 0.0);
        }
        // Degree P-1 functions N_{j,P-1}, j = span-P+1..=span.
        let mut lower = [0.0; MAX_ORDER];
        basis_funs(&kv.knots, span, u, p - 1, &mut lower);
        let mut deriv = 0.0;
        for (r, &b) in lower[..p].iter().enumerate() {
            let j = span + 1 - p + r;
            let denom = kv.knots[j + p] - kv.knots[j];
            deriv += (self.theta[j] - self.theta[j - 1]) / denom * b;
        }
        (value, p as f64 * deriv)
    }
}
