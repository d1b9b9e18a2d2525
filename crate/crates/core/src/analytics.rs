//! Exact checks on finite supports and Gaussian closed forms.
//!
//! Discrete distributions stand in for continuous policies: the KL
//! decomposition, the compensating cost and the dependence-ratio factorization
//! are measure-level identities and can be evaluated by direct summation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::stats::log_sum_exp;

/// Probability vector over a finite support `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty support"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("probabilities must sum to one"));
        }
        Ok(Self { probs })
    }

    /// Normalize nonnegative masses.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::invalid("masses must have positive finite total"));
        }
        Self::new(masses.iter().map(|m| m / total).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_masses(&vec![1.0; n])
    }

    /// Draw from a flat Dirichlet over `n` points.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        let masses: Vec<f64> = (0..n).map(|_| -libm::log(1.0 - rng.random::<f64>())).collect();
        Self::from_masses(&masses)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn expect(&self, f: &[f64]) -> f64 {
        self.probs.iter().zip(f).filter(|(p, _)| **p > 0.0).map(|(p, v)| p * v).sum()
    }
}

fn check_continuity(target: &DiscreteDist, prior: &DiscreteDist) -> Result<()> {
    check_dim(prior.len(), target.len())?;
    match target.probs.iter().zip(&prior.probs).position(|(t, p)| *t > 0.0 && *p == 0.0) {
        Some(index) => Err(Error::AbsoluteContinuity { index }),
        None => Ok(()),
    }
}

/// `KL(p‖q)`; infinite when `p` has mass where `q` has none.
pub fn kl_divergence(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    check_dim(q.len(), p.len())?;
    let mut kl = 0.0;
    for (a, b) in p.probs.iter().zip(&q.probs) {
        if *a == 0.0 {
            continue;
        }
        if *b == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += a * (libm::log(*a) - libm::log(*b));
    }
    Ok(kl)
}

pub fn total_variation(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    check_dim(q.len(), p.len())?;
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `log Z` for `Z = Σ prior · exp(-J/λ)`.
pub fn log_normalizer(prior: &DiscreteDist, cost: &[f64], lambda: f64) -> Result<f64> {
    check_dim(prior.len(), cost.len())?;
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    let logs: Vec<f64> = prior.probs.iter().zip(cost).map(|(p, j)| libm::log(*p) - j / lambda).collect();
    let lz = log_sum_exp(&logs);
    if !lz.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(lz)
}

/// `π ∝ prior · exp(-J/λ)`; `J = +∞` removes a point.
pub fn tilt(prior: &DiscreteDist, cost: &[f64], lambda: f64) -> Result<DiscreteDist> {
    let lz = log_normalizer(prior, cost, lambda)?;
    let probs: Vec<f64> = prior.probs.iter().zip(cost).map(|(p, j)| libm::exp(libm::log(*p) - j / lambda - lz)).collect();
    DiscreteDist::from_masses(&probs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlCheck {
    /// `KL(π*‖π)` by direct summation.
    pub lhs: f64,
    /// `KL(π*‖p) + log Z + E_π*[J/λ]`.
    pub rhs: f64,
    pub gap: f64,
}

pub fn kl_decomposition_check(target: &DiscreteDist, prior: &DiscreteDist, cost: &[f64], lambda: f64) -> Result<KlCheck> {
    check_continuity(target, prior)?;
    let tilted = tilt(prior, cost, lambda)?;
    let lhs = kl_divergence(target, &tilted)?;
    let scaled: Vec<f64> = cost.iter().map(|j| j / lambda).collect();
    let rhs = kl_divergence(target, prior)? + log_normalizer(prior, cost, lambda)? + target.expect(&scaled);
    Ok(KlCheck { lhs, rhs, gap: (lhs - rhs).abs() })
}

/// Cost whose tilt of `prior` reproduces `target`: `J* = λ log(p/π*)`
/// (the normalizer constant is dropped). Points outside the target's support
/// get `+∞`.
pub fn optimal_cost(target: &DiscreteDist, prior: &DiscreteDist, lambda: f64) -> Result<Vec<f64>> {
    check_continuity(target, prior)?;
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    Ok(target
        .probs
        .iter()
        .zip(&prior.probs)
        .map(|(t, p)| if *t > 0.0 { lambda * (libm::log(*p) - libm::log(*t)) } else { f64::INFINITY })
        .collect())
}

/// Mean and row-major covariance of a Gaussian in one or two dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || d > 2 {
            return Err(Error::invalid("only one- and two-dimensional Gaussians are supported"));
        }
        check_dim(d * d, cov.len())?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `J(a) = ½ aᵀQa − bᵀa`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: Vec<f64>,
    pub b: Vec<f64>,
}

impl QuadraticCost {
    pub fn eval(&self, a: &[f64]) -> f64 {
        let d = a.len();
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                quad += a[i] * self.q[i * d + j] * a[j];
            }
        }
        0.5 * quad - a.iter().zip(&self.b).map(|(x, y)| x * y).sum::<f64>()
    }
}

fn inverse(m: &[f64]) -> Option<Vec<f64>> {
    match m.len() {
        1 => (m[0] != 0.0).then(|| vec![1.0 / m[0]]),
        4 => {
            let det = m[0] * m[3] - m[1] * m[2];
            (det != 0.0).then(|| vec![m[3] / det, -m[1] / det, -m[2] / det, m[0] / det])
        }
        _ => None,
    }
}

fn positive_definite(m: &[f64]) -> bool {
    match m.len() {
        1 => m[0] > 0.0,
        4 => m[0] > 0.0 && m[0] * m[3] - m[1] * m[2] > 0.0,
        _ => false,
    }
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum()).collect()
}

/// Closed-form moments of `π ∝ exp(-J/λ) · N(μ, Σ)`: precision
/// `Σ⁻¹ + Q/λ`, mean `P⁻¹(Σ⁻¹μ + b/λ)`.
pub fn tilted_moments(prior: &GaussianMoments, cost: &QuadraticCost, lambda: f64) -> Result<GaussianMoments> {
    let d = prior.dim();
    check_dim(d * d, cost.q.len())?;
    check_dim(d, cost.b.len())?;
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    if !positive_definite(&prior.cov) {
        return Err(Error::invalid("prior covariance must be positive definite"));
    }
    let prior_prec = inverse(&prior.cov).ok_or_else(|| Error::invalid("singular prior covariance"))?;
    let prec: Vec<f64> = prior_prec.iter().zip(&cost.q).map(|(p, q)| p + q / lambda).collect();
    if !positive_definite(&prec) {
        return Err(Error::invalid("tilted precision is not positive definite"));
    }
    let cov = inverse(&prec).ok_or_else(|| Error::invalid("singular tilted precision"))?;
    let rhs: Vec<f64> = mat_vec(&prior_prec, &prior.mean).iter().zip(&cost.b).map(|(a, b)| a + b / lambda).collect();
    GaussianMoments::new(mat_vec(&cov, &rhs), cov)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const K15_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const G7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = K15_WEIGHTS[7] * fc;
    let mut gauss = G7_WEIGHTS[3] * fc;
    for (i, x) in GK_NODES[..7].iter().enumerate() {
        let s = f(c - h * x) + f(c + h * x);
        kronrod += K15_WEIGHTS[i] * s;
        if i % 2 == 1 {
            gauss += G7_WEIGHTS[i / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) quadrature with absolute tolerance `tol`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    let mut total = 0.0;
    let mut stack = vec![(a, b, tol, 0u32)];
    while let Some((lo, hi, eps, depth)) = stack.pop() {
        let (v, err) = gk15(&mut f, lo, hi);
        if err <= eps || depth >= 40 {
            total += v;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, 0.5 * eps, depth + 1));
            stack.push((mid, hi, 0.5 * eps, depth + 1));
        }
    }
    total
}

/// Moments of the tilted density by adaptive quadrature over a box of
/// twelve standard deviations.
pub fn quadrature_moments(prior: &GaussianMoments, cost: &QuadraticCost, lambda: f64) -> Result<GaussianMoments> {
    let closed = tilted_moments(prior, cost, lambda)?;
    let d = prior.dim();
    let prior_prec = inverse(&prior.cov).ok_or_else(|| Error::invalid("singular prior covariance"))?;
    let log_density = |a: &[f64]| {
        let diff: Vec<f64> = a.iter().zip(&prior.mean).map(|(x, m)| x - m).collect();
        let q: f64 = diff.iter().zip(mat_vec(&prior_prec, &diff)).map(|(x, y)| x * y).sum();
        -0.5 * q - cost.eval(a) / lambda
    };
    // shift the exponent by its value at the closed-form mode for stability
    let shift = log_density(&closed.mean);
    let bounds: Vec<(f64, f64)> = (0..d)
        .map(|i| {
            let sd = libm::sqrt(prior.cov[i * d + i].max(closed.cov[i * d + i]));
            let lo = prior.mean[i].min(closed.mean[i]) - 12.0 * sd;
            let hi = prior.mean[i].max(closed.mean[i]) + 12.0 * sd;
            (lo, hi)
        })
        .collect();
    let tol = 1e-13;
    if d == 1 {
        let m = |k: i32| integrate(|x| libm::pow(x, k as f64) * libm::exp(log_density(&[x]) - shift), bounds[0].0, bounds[0].1, tol);
        let (z, m1, m2) = (m(0), m(1), m(2));
        let mean = m1 / z;
        return GaussianMoments::new(vec![mean], vec![m2 / z - mean * mean]);
    }
    let moment = |g: &dyn Fn(f64, f64) -> f64| {
        integrate(
            |x| integrate(|y| g(x, y) * libm::exp(log_density(&[x, y]) - shift), bounds[1].0, bounds[1].1, tol),
            bounds[0].0,
            bounds[0].1,
            tol,
        )
    };
    let z = moment(&|_, _| 1.0);
    let mx = moment(&|x, _| x) / z;
    let my = moment(&|_, y| y) / z;
    let sxx = moment(&|x, _| (x - mx) * (x - mx)) / z;
    let syy = moment(&|_, y| (y - my) * (y - my)) / z;
    let sxy = moment(&|x, y| (x - mx) * (y - my)) / z;
    GaussianMoments::new(vec![mx, my], vec![sxx, sxy, sxy, syy])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltOracle {
    pub closed_form: GaussianMoments,
    pub quadrature: GaussianMoments,
    /// Largest relative disagreement over mean and covariance entries,
    /// relative to the covariance scale.
    pub relative_error: f64,
}

pub fn tilted_oracle_moments(prior: &GaussianMoments, cost: &QuadraticCost, lambda: f64) -> Result<TiltOracle> {
    let closed_form = tilted_moments(prior, cost, lambda)?;
    let quadrature = quadrature_moments(prior, cost, lambda)?;
    let d = prior.dim();
    let scale = (0..d).map(|i| closed_form.cov[i * d + i]).fold(0.0, f64::max);
    let mean_err = closed_form
        .mean
        .iter()
        .zip(&quadrature.mean)
        .map(|(a, b)| (a - b).abs() / libm::sqrt(scale))
        .fold(0.0, f64::max);
    let cov_err = closed_form.cov.iter().zip(&quadrature.cov).map(|(a, b)| (a - b).abs() / scale).fold(0.0, f64::max);
    Ok(TiltOracle { closed_form, quadrature, relative_error: mean_err.max(cov_err) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependenceReport {
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    /// `joint / (row ⊗ col)`, row-major.
    pub ratio: Vec<f64>,
    /// Max pointwise `|ratio · row · col − joint|`.
    pub reconstruction_error: f64,
}

/// Discrete dependence-ratio factorization of a `rows × cols` joint table.
pub fn dependence_ratio_check(joint: &DiscreteDist, rows: usize, cols: usize) -> Result<DependenceReport> {
    check_dim(rows * cols, joint.len())?;
    let p = joint.probs();
    let row_marginal: Vec<f64> = (0..rows).map(|i| p[i * cols..(i + 1) * cols].iter().sum()).collect();
    let col_marginal: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| p[i * cols + j]).sum()).collect();
    if row_marginal.iter().chain(&col_marginal).any(|m| *m <= 0.0) {
        return Err(Error::invalid("marginals must be strictly positive"));
    }
    let mut ratio = Vec::with_capacity(rows * cols);
    let mut reconstruction_error: f64 = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let r = p[i * cols + j] / (row_marginal[i] * col_marginal[j]);
            ratio.push(r);
            reconstruction_error = reconstruction_error.max((r * row_marginal[i] * col_marginal[j] - p[i * cols + j]).abs());
        }
    }
    Ok(DependenceReport { row_marginal, col_marginal, ratio, reconstruction_error })
}

/// One line of the identity report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IdentityResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl IdentityResult {
    fn new(name: &str, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), measured, tolerance, passed: measured < tolerance }
    }
}

/// Worst-case gaps of the discrete identities over `instances` random
/// 8-point problems plus random 6×6 joints, and the Gaussian tilt oracle.
pub fn identity_suite<R: Rng + ?Sized>(instances: usize, rng: &mut R) -> Result<Vec<IdentityResult>> {
    let mut kl_gap: f64 = 0.0;
    let mut recovery_tv: f64 = 0.0;
    let mut ratio_err: f64 = 0.0;
    for _ in 0..instances {
        let target = DiscreteDist::random(8, rng)?;
        let prior = DiscreteDist::random(8, rng)?;
        let cost: Vec<f64> = (0..8).map(|_| crate::rng::uniform(rng, -2.0, 2.0)).collect();
        kl_gap = kl_gap.max(kl_decomposition_check(&target, &prior, &cost, 1.0)?.gap);
        let j_star = optimal_cost(&target, &prior, 1.0)?;
        recovery_tv = recovery_tv.max(total_variation(&tilt(&prior, &j_star, 1.0)?, &target)?);
        let joint = DiscreteDist::random(36, rng)?;
        ratio_err = ratio_err.max(dependence_ratio_check(&joint, 6, 6)?.reconstruction_error);
    }
    let one = tilted_oracle_moments(
        &GaussianMoments::new(vec![0.0], vec![1.0])?,
        &QuadraticCost { q: vec![1.0], b: vec![0.0] },
        1.0,
    )?;
    let two = tilted_oracle_moments(
        &GaussianMoments::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0])?,
        &QuadraticCost { q: vec![1.0, -1.0, -1.0, 1.0], b: vec![0.0, 0.0] },
        1.0,
    )?;
    Ok(vec![
        IdentityResult::new("kl-decomposition-gap", kl_gap, 1e-10),
        IdentityResult::new("optimal-cost-recovery-tv", recovery_tv, 1e-10),
        IdentityResult::new("dependence-ratio-reconstruction", ratio_err, 1e-12),
        IdentityResult::new("gaussian-tilt-1d-quadrature", one.relative_error, 1e-6),
        IdentityResult::new("gaussian-tilt-2d-quadrature", two.relative_error, 1e-6),
    ])
}
