//! Forward perturbation, noise-time sampling and reverse-time SDE integration.
//!
//! The forward process is the variance-exploding kernel `x(t) = x + t·ε`, so
//! noisy marginals are data convolved with `N(0, t²I)`. Samples are drawn by
//! Euler–Maruyama integration of
//!
//! ```text
//! dx = -2t · score(x, t) dt + sqrt(2t) dW̄
//! ```
//!
//! backwards from `x(T) ~ N(0, T²I)` over a geometric (Karras) time grid.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::rng;

/// Noise-time grid and training-time distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSchedule {
    /// Largest noise time `T`, where sampling starts.
    pub terminal_time: f64,
    /// Smallest nonzero grid time; training draws are clamped below by it.
    pub min_time: f64,
    /// Number of integration steps (grid has `step_count + 1` points).
    pub step_count: usize,
    /// Grid spacing exponent.
    pub rho: f64,
    /// Mean of `ln(t / time_scale)` for training draws.
    pub log_mean: f64,
    /// Std of `ln(t / time_scale)` for training draws.
    pub log_std: f64,
    /// Data scale multiplying the log-normal training draws.
    pub time_scale: f64,
}

impl NoiseSchedule {
    /// EDM grid constants for data with standard deviation `data_std`, with
    /// 100 Euler–Maruyama steps.
    pub fn for_data_std(data_std: f64) -> Self {
        Self {
            terminal_time: 80.0 * data_std,
            min_time: 0.002,
            step_count: 100,
            rho: 7.0,
            log_mean: -1.2,
            log_std: 1.2,
            time_scale: data_std,
        }
    }

    pub fn with_steps(mut self, step_count: usize) -> Self {
        self.step_count = step_count;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.terminal_time,
            self.min_time,
            self.rho,
            self.log_mean,
            self.log_std,
            self.time_scale,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("schedule parameters must be finite"));
        }
        if self.terminal_time <= 0.0 || self.min_time <= 0.0 {
            return Err(Error::invalid("terminal and minimum times must be positive"));
        }
        if self.step_count == 0 {
            return Err(Error::invalid("step_count must be at least 1"));
        }
        if self.step_count > 1 && self.terminal_time <= self.min_time {
            return Err(Error::invalid("terminal_time must exceed min_time"));
        }
        if self.rho <= 0.0 || self.log_std < 0.0 || self.time_scale <= 0.0 {
            return Err(Error::invalid("rho and time_scale must be positive, log_std nonnegative"));
        }
        Ok(())
    }

    /// Strictly decreasing grid `T = t_0 > … > t_{N-1} = t_min > t_N = 0`.
    ///
    /// With a single step the grid is `[T, 0]`.
    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.step_count;
        let mut grid = Vec::with_capacity(n + 1);
        if n == 1 {
            grid.push(self.terminal_time);
        } else {
            let inv = 1.0 / self.rho;
            let hi = libm::pow(self.terminal_time, inv);
            let lo = libm::pow(self.min_time, inv);
            for i in 0..n {
                let frac = i as f64 / (n - 1) as f64;
                grid.push(libm::pow(hi + frac * (lo - hi), self.rho));
            }
            // pin the endpoints against pow round-off
            grid[0] = self.terminal_time;
            grid[n - 1] = self.min_time;
        }
        grid.push(0.0);
        grid
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::for_data_std(1.0)
    }
}

/// A noisy datum together with the noise time it was produced at.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePoint {
    pub value: Vec<f64>,
    pub noise_time: f64,
}

/// A vector field approximating `∇ log p_t(x | cond)`.
///
/// Implementations must be deterministic and return a vector with the same
/// dimension as `x`.
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    /// Width of the conditioning vector the field expects (0 if ignored).
    fn cond_dim(&self) -> usize {
        0
    }

    fn score_into(&self, x: &[f64], t: f64, cond: &[f64], out: &mut [f64]) -> Result<()>;

    fn score(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, t, cond, &mut out)?;
        Ok(out)
    }

    /// Diagonal of `∂score/∂x`. The default uses central differences.
    fn jacobian_diag_into(&self, x: &[f64], t: f64, cond: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        check_dim(d, x.len())?;
        check_dim(d, out.len())?;
        let mut probe = x.to_vec();
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        for j in 0..d {
            let h = 1e-5 * x[j].abs().max(1.0);
            probe[j] = x[j] + h;
            self.score_into(&probe, t, cond, &mut plus)?;
            probe[j] = x[j] - h;
            self.score_into(&probe, t, cond, &mut minus)?;
            probe[j] = x[j];
            out[j] = (plus[j] - minus[j]) / (2.0 * h);
        }
        Ok(())
    }
}

impl<S: ScoreField + ?Sized> ScoreField for alloc::sync::Arc<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }
    fn score_into(&self, x: &[f64], t: f64, cond: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).score_into(x, t, cond, out)
    }
    fn jacobian_diag_into(&self, x: &[f64], t: f64, cond: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).jacobian_diag_into(x, t, cond, out)
    }
}

/// `x + t·eps` at noise time `t`.
pub fn perturb(x: &[f64], t: f64, eps: &[f64]) -> Result<NoisePoint> {
    check_dim(x.len(), eps.len())?;
    if !(t >= 0.0) {
        return Err(Error::invalid("noise time must be nonnegative"));
    }
    let value = x.iter().zip(eps).map(|(xi, ei)| xi + t * ei).collect();
    Ok(NoisePoint { value, noise_time: t })
}

/// Draw a training noise time `t = scale · exp(g)`, `g ~ N(P_mean, P_std²)`,
/// clamped to `[t_min, T]`.
pub fn noise_time_sample<R: Rng + ?Sized>(schedule: &NoiseSchedule, rng: &mut R) -> f64 {
    let g = schedule.log_mean + schedule.log_std * rng::normal(rng);
    let t = schedule.time_scale * libm::exp(g);
    t.clamp(schedule.min_time, schedule.terminal_time)
}

/// Euler–Maruyama integration of the reverse-time SDE with an arbitrary score
/// callback `score(x, t, step, out)`.
///
/// The final step onto `t = 0` is deterministic. A non-finite score at grid
/// step `i` yields [`Error::NumericDivergence`] with `step = i`.
pub fn reverse_sde_with<R, F>(
    dim: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
    mut score: F,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], f64, usize, &mut [f64]) -> Result<()>,
{
    schedule.validate()?;
    let grid = schedule.time_grid();
    let mut x = vec![0.0; dim];
    rng::fill_normal(rng, &mut x);
    for v in x.iter_mut() {
        *v *= schedule.terminal_time;
    }
    let mut s = vec![0.0; dim];
    let steps = grid.len() - 1;
    for i in 0..steps {
        let (t, t_next) = (grid[i], grid[i + 1]);
        let dt = t - t_next;
        score(&x, t, i, &mut s)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDivergence { step: i });
        }
        let drift = 2.0 * t * dt;
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += drift * si;
        }
        if t_next > 0.0 {
            let sd = libm::sqrt(2.0 * t * dt);
            for xi in x.iter_mut() {
                *xi += sd * rng::normal(rng);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDivergence { step: i });
        }
    }
    Ok(x)
}

/// Sample `x(0)` by integrating the reverse SDE against `score`.
pub fn reverse_sde_sample<R: Rng + ?Sized>(
    score: &dyn ScoreField,
    schedule: &NoiseSchedule,
    cond: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    reverse_sde_with(score.dim(), schedule, rng, |x, t, _, out| {
        score.score_into(x, t, cond, out)
    })
}

/// Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != vars.len() {
            return Err(Error::invalid("mixture needs matching, nonempty weights/means/vars"));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mixture weights must sum to 1"));
        }
        let d = means[0].len();
        for (m, v) in means.iter().zip(&vars) {
            check_dim(d, m.len())?;
            check_dim(d, v.len())?;
            if v.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::invalid("mixture variances must be positive"));
            }
        }
        Ok(Self { weights, means, vars })
    }

    /// Single Gaussian `N(mean, diag(var))`.
    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![var])
    }

    /// Equal-weight 1-D mixture of `N(m, std²)` for each `m` in `centers`.
    pub fn symmetric_1d(centers: &[f64], std: f64) -> Result<Self> {
        let w = 1.0 / centers.len() as f64;
        Self::new(
            vec![w; centers.len()],
            centers.iter().map(|m| vec![*m]).collect(),
            vec![vec![std * std]; centers.len()],
        )
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn vars(&self) -> &[Vec<f64>] {
        &self.vars
    }

    fn component_logs(&self, x: &[f64], t: f64) -> Vec<f64> {
        let t2 = t * t;
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.vars))
            .map(|(w, (m, v))| {
                let mut acc = libm::log(*w);
                for ((xi, mi), vi) in x.iter().zip(m).zip(v) {
                    let var = vi + t2;
                    let r = xi - mi;
                    acc -= 0.5 * (r * r / var + libm::log(2.0 * core::f64::consts::PI * var));
                }
                acc
            })
            .collect()
    }

    /// Posterior component responsibilities at `(x, t)`.
    fn responsibilities(&self, x: &[f64], t: f64) -> Vec<f64> {
        let logs = self.component_logs(x, t);
        let lse = crate::stats::log_sum_exp(&logs);
        logs.iter().map(|l| libm::exp(l - lse)).collect()
    }

    /// `ln p_t(x)` of the noised mixture.
    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(crate::stats::log_sum_exp(&self.component_logs(x, t)))
    }

    /// Samples from the clean mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .zip(&self.vars[k])
            .map(|(m, v)| m + libm::sqrt(*v) * rng::normal(rng))
            .collect()
    }
}

/// `∇_x ln Σ_k w_k N(x; μ_k, Σ_k + t²I)`, stabilized with log-sum-exp.
pub fn analytic_score_gmm(params: &Gmm, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(params.dim(), x.len())?;
    let resp = params.responsibilities(x, t);
    let t2 = t * t;
    let mut out = vec![0.0; x.len()];
    for (r, (m, v)) in resp.iter().zip(params.means.iter().zip(&params.vars)) {
        for j in 0..x.len() {
            out[j] += r * (m[j] - x[j]) / (v[j] + t2);
        }
    }
    Ok(out)
}

/// Exact score field of a diagonal Gaussian mixture target. Ignores conditioning.
#[derive(Debug, Clone)]
pub struct GmmScore(pub Gmm);

impl ScoreField for GmmScore {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn score_into(&self, x: &[f64], t: f64, _cond: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), out.len())?;
        out.copy_from_slice(&analytic_score_gmm(&self.0, x, t)?);
        Ok(())
    }

    fn jacobian_diag_into(&self, x: &[f64], t: f64, _cond: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        check_dim(d, x.len())?;
        check_dim(d, out.len())?;
        let resp = self.0.responsibilities(x, t);
        let t2 = t * t;
        for j in 0..d {
            let (mut s, mut s2, mut curv) = (0.0, 0.0, 0.0);
            for (r, (m, v)) in resp.iter().zip(self.0.means.iter().zip(&self.0.vars)) {
                let var = v[j] + t2;
                let mkj = (m[j] - x[j]) / var;
                s += r * mkj;
                s2 += r * mkj * mkj;
                curv += r / var;
            }
            out[j] = s2 - s * s - curv;
        }
        Ok(())
    }
}

/// The identically-zero field.
#[derive(Debug, Clone, Copy)]
pub struct ZeroScore(pub usize);

impl ScoreField for ZeroScore {
    fn dim(&self) -> usize {
        self.0
    }

    fn score_into(&self, x: &[f64], _t: f64, _cond: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.0, x.len())?;
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    fn jacobian_diag_into(&self, _x: &[f64], _t: f64, _cond: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::stats;

    #[test]
    fn perturb_examples() {
        let p = perturb(&[1.0, 2.0], 0.0, &[0.7, -0.3]).unwrap();
        assert_eq!(p.value, vec![1.0, 2.0]);
        let p = perturb(&[0.0], 2.0, &[1.5]).unwrap();
        assert_eq!(p.value, vec![3.0]);
        assert_eq!(p.noise_time, 2.0);
        assert!(matches!(
            perturb(&[0.0, 1.0], 1.0, &[0.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn perturb_variance_matches_kernel() {
        let mut rng = seeded(11);
        let t = 0.5;
        let x = [0.3, -1.2];
        let mut cols = [Vec::new(), Vec::new()];
        for _ in 0..100_000 {
            let mut eps = [0.0; 2];
            rng::fill_normal(&mut rng, &mut eps);
            let p = perturb(&x, t, &eps).unwrap();
            for j in 0..2 {
                cols[j].push(p.value[j] - x[j]);
            }
        }
        for c in &cols {
            let v = stats::variance(c);
            assert!((0.24..=0.26).contains(&v), "variance {v}");
            assert!((v - 0.25).abs() / 0.25 < 0.02);
        }
    }

    #[test]
    fn degenerate_lognormal_is_constant() {
        let s = NoiseSchedule { log_mean: 0.0, log_std: 0.0, ..NoiseSchedule::default() };
        let mut rng = seeded(1);
        for _ in 0..10 {
            assert_eq!(noise_time_sample(&s, &mut rng), 1.0);
        }
    }

    #[test]
    fn lognormal_median_and_clamp() {
        let s = NoiseSchedule::default();
        let mut rng = seeded(2);
        let draws: Vec<f64> = (0..100_000).map(|_| noise_time_sample(&s, &mut rng)).collect();
        let med = stats::median(&draws);
        assert!((0.27..=0.34).contains(&med), "median {med}");
        assert!(draws.iter().all(|t| *t <= s.terminal_time && *t >= s.min_time));
    }

    #[test]
    fn grid_is_strictly_decreasing_and_ends_at_zero() {
        for n in [1, 2, 5, 50, 256] {
            let s = NoiseSchedule::default().with_steps(n);
            let g = s.time_grid();
            assert_eq!(g.len(), n + 1);
            assert_eq!(g[0], s.terminal_time);
            assert_eq!(*g.last().unwrap(), 0.0);
            assert!(g.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn vanishing_dynamics_returns_initial_noise() {
        let s = NoiseSchedule {
            terminal_time: 1e-6,
            ..NoiseSchedule::default().with_steps(1)
        };
        let mut rng = seeded(3);
        let x = reverse_sde_sample(&ZeroScore(3), &s, &[], &mut rng).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn non_finite_score_reports_step() {
        let s = NoiseSchedule::default().with_steps(10);
        let mut rng = seeded(4);
        let err = reverse_sde_with(1, &s, &mut rng, |_, _, step, out| {
            out[0] = if step == 3 { f64::NAN } else { 0.0 };
            Ok(())
        })
        .unwrap_err();
        assert_eq!(err, Error::NumericDivergence { step: 3 });
    }

    #[test]
    fn gmm_validation() {
        assert!(Gmm::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![vec![1.0]; 2]).is_err());
        assert!(Gmm::new(vec![1.0], vec![vec![0.0]], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn single_gaussian_score_is_closed_form() {
        let g = Gmm::gaussian(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        let x = [0.3, 0.7];
        let t = 0.8;
        let s = analytic_score_gmm(&g, &x, t).unwrap();
        assert!((s[0] - (1.0 - 0.3) / (0.5 + 0.64)).abs() < 1e-14);
        assert!((s[1] - (-2.0 - 0.7) / (2.0 + 0.64)).abs() < 1e-14);
    }

    #[test]
    fn symmetric_mixture_score_vanishes_at_origin() {
        let g = Gmm::symmetric_1d(&[-1.5, 1.5], 0.4).unwrap();
        for t in [0.0, 0.3, 3.0] {
            assert_eq!(analytic_score_gmm(&g, &[0.0], t).unwrap()[0], 0.0);
        }
    }

    // Independent log-density of a 1-D two-component mixture, written out by hand.
    fn mixture_logpdf(x: f64, t: f64) -> f64 {
        let var = 0.25f64 * 0.25 + t * t;
        let norm = 1.0 / libm::sqrt(2.0 * core::f64::consts::PI * var);
        let a = norm * libm::exp(-(x - 2.0) * (x - 2.0) / (2.0 * var));
        let b = norm * libm::exp(-(x + 2.0) * (x + 2.0) / (2.0 * var));
        libm::log(0.5 * a + 0.5 * b)
    }

    #[test]
    fn mixture_score_matches_finite_differences() {
        let g = Gmm::symmetric_1d(&[-2.0, 2.0], 0.25).unwrap();
        let h = 1e-5;
        let fd = (mixture_logpdf(1.9 + h, 0.0) - mixture_logpdf(1.9 - h, 0.0)) / (2.0 * h);
        let s = analytic_score_gmm(&g, &[1.9], 0.0).unwrap()[0];
        assert!((s - fd).abs() < 1e-6, "{s} vs {fd}");

        let mut rng = seeded(5);
        for _ in 0..20 {
            let x = rng::uniform(&mut rng, -3.0, 3.0);
            let t = rng::uniform(&mut rng, 0.2, 2.0);
            let fd = (mixture_logpdf(x + h, t) - mixture_logpdf(x - h, t)) / (2.0 * h);
            let s = analytic_score_gmm(&g, &[x], t).unwrap()[0];
            assert!((s - fd).abs() <= 1e-5 * fd.abs().max(1.0), "x={x} t={t}: {s} vs {fd}");
        }
    }

    #[test]
    fn analytic_jacobian_matches_default_finite_differences() {
        struct Plain(GmmScore);
        impl ScoreField for Plain {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn score_into(&self, x: &[f64], t: f64, c: &[f64], o: &mut [f64]) -> Result<()> {
                self.0.score_into(x, t, c, o)
            }
        }
        let g = GmmScore(
            Gmm::new(
                vec![0.3, 0.7],
                vec![vec![-1.0, 0.5], vec![1.0, -0.2]],
                vec![vec![0.2, 0.3], vec![0.4, 0.1]],
            )
            .unwrap(),
        );
        let x = [0.2, 0.1];
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        g.jacobian_diag_into(&x, 0.4, &[], &mut a).unwrap();
        Plain(g).jacobian_diag_into(&x, 0.4, &[], &mut b).unwrap();
        for j in 0..2 {
            assert!((a[j] - b[j]).abs() < 1e-6, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn gaussian_target_moments_by_reverse_sde() {
        let target = GmmScore(Gmm::gaussian(vec![0.0], vec![1.0]).unwrap());
        let s = NoiseSchedule::default();
        let mut rng = seeded(6);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| reverse_sde_sample(&target, &s, &[], &mut rng).unwrap()[0])
            .collect();
        let (m, v) = (stats::mean(&xs), stats::variance(&xs));
        assert!(m.abs() < 0.05, "mean {m}");
        assert!((0.9..=1.1).contains(&v), "variance {v}");
    }
}
