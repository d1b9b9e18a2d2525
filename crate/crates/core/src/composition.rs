//! Product-of-marginals score and gradient-free cost guidance.
//!
//! Independently trained single-agent score models are stacked into a joint
//! score ([`ProductPolicy`]). Sampling from the cost-tilted joint
//! `π(a|s) ∝ p_prod(a|s)·exp(-J(s,a)/λ)` adds a guidance score estimated by
//! Monte Carlo from a Gaussian (Tweedie) posterior over clean actions:
//!
//! ```text
//! a_m ~ N(a_t + t²·score, Σ),   w_m = exp(-J_m/λ) / mean_k exp(-J_k/λ) - 1
//! guidance = (1/M) Σ_m w_m (a_m - a_t) / t²
//! ```

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::diffusion::{reverse_sde_with, NoiseSchedule, ScoreField};
use crate::error::{check_dim, Error, Result};
use crate::rng;

/// Projection `σ⁽ⁱ⁾` of a joint state onto the view agent `i` conditions on.
pub trait StateDecomposer: Send + Sync {
    fn agent_count(&self) -> usize;

    fn project(&self, state: &[f64], agent: usize, out: &mut Vec<f64>) -> Result<()>;
}

/// Every agent sees the full state.
#[derive(Debug, Clone, Copy)]
pub struct SharedView(pub usize);

impl StateDecomposer for SharedView {
    fn agent_count(&self) -> usize {
        self.0
    }

    fn project(&self, state: &[f64], agent: usize, out: &mut Vec<f64>) -> Result<()> {
        if agent >= self.0 {
            return Err(Error::invalid("agent index out of range"));
        }
        out.clear();
        out.extend_from_slice(state);
        Ok(())
    }
}

/// Joint policy whose score is the block stack of per-agent scores.
#[derive(Clone)]
pub struct ProductPolicy {
    agents: Vec<Arc<dyn ScoreField>>,
    decomposer: Arc<dyn StateDecomposer>,
    offsets: Vec<usize>,
}

impl core::fmt::Debug for ProductPolicy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ProductPolicy").field("offsets", &self.offsets).finish()
    }
}

impl ProductPolicy {
    pub fn new(agents: Vec<Arc<dyn ScoreField>>, decomposer: Arc<dyn StateDecomposer>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::invalid("product policy needs at least one agent"));
        }
        check_dim(agents.len(), decomposer.agent_count())?;
        let mut offsets = vec![0];
        for a in &agents {
            offsets.push(offsets.last().unwrap() + a.dim());
        }
        Ok(Self { agents, decomposer, offsets })
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn joint_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Index range of agent `i`'s chunk inside the joint action.
    pub fn block(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn agent(&self, i: usize) -> &Arc<dyn ScoreField> {
        &self.agents[i]
    }

    /// Per-agent conditioning vectors `σ⁽ⁱ⁾(s)`.
    pub fn views(&self, state: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..self.agents.len())
            .map(|i| {
                let mut v = Vec::new();
                self.decomposer.project(state, i, &mut v)?;
                Ok(v)
            })
            .collect()
    }

    /// Stacked score with views already projected.
    pub fn score_with_views(&self, a_t: &[f64], t: f64, views: &[Vec<f64>], out: &mut [f64]) -> Result<()> {
        check_dim(self.joint_dim(), a_t.len())?;
        check_dim(self.joint_dim(), out.len())?;
        for (i, agent) in self.agents.iter().enumerate() {
            let r = self.block(i);
            agent.score_into(&a_t[r.clone()], t, &views[i], &mut out[r])?;
        }
        Ok(())
    }

    pub fn product_score(&self, a_t: &[f64], t: f64, state: &[f64]) -> Result<Vec<f64>> {
        let views = self.views(state)?;
        let mut out = vec![0.0; self.joint_dim()];
        self.score_with_views(a_t, t, &views, &mut out)?;
        Ok(out)
    }

    fn jacobian_with_views(&self, a_t: &[f64], t: f64, views: &[Vec<f64>], out: &mut [f64]) -> Result<()> {
        for (i, agent) in self.agents.iter().enumerate() {
            let r = self.block(i);
            agent.jacobian_diag_into(&a_t[r.clone()], t, &views[i], &mut out[r])?;
        }
        Ok(())
    }
}

/// The product policy is itself a score field conditioned on the joint state.
impl ScoreField for ProductPolicy {
    fn dim(&self) -> usize {
        self.joint_dim()
    }

    fn score_into(&self, x: &[f64], t: f64, cond: &[f64], out: &mut [f64]) -> Result<()> {
        let views = self.views(cond)?;
        self.score_with_views(x, t, &views, out)
    }

    fn jacobian_diag_into(&self, x: &[f64], t: f64, cond: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.joint_dim(), out.len())?;
        let views = self.views(cond)?;
        self.jacobian_with_views(x, t, &views, out)
    }
}

/// Diagonal Gaussian approximation of `p(a_0 | a_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TweediePosterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Posterior from a precomputed score: mean `a_t + t²·score`, variance `t²`
/// or, given the score Jacobian diagonal, `t² + t⁴·∂s_j/∂a_j` (floored at a
/// tiny positive value).
pub fn tweedie_from_score(a_t: &[f64], t: f64, score: &[f64], jacobian_diag: Option<&[f64]>) -> Result<TweediePosterior> {
    check_dim(a_t.len(), score.len())?;
    if !(t > 0.0) {
        return Err(Error::invalid("posterior needs t > 0"));
    }
    if score.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score"));
    }
    let t2 = t * t;
    let mean = a_t.iter().zip(score).map(|(a, s)| a + t2 * s).collect();
    let variance = match jacobian_diag {
        None => vec![t2; a_t.len()],
        Some(jd) => {
            check_dim(a_t.len(), jd.len())?;
            if jd.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("score jacobian"));
            }
            jd.iter().map(|j| (t2 + t2 * t2 * j).max(1e-12 * t2)).collect()
        }
    };
    Ok(TweediePosterior { mean, variance })
}

pub fn tweedie_posterior(
    score: &dyn ScoreField,
    a_t: &[f64],
    t: f64,
    cond: &[f64],
    full_covariance: bool,
) -> Result<TweediePosterior> {
    let s = score.score(a_t, t, cond)?;
    if full_covariance {
        let mut jd = vec![0.0; a_t.len()];
        score.jacobian_diag_into(a_t, t, cond, &mut jd)?;
        tweedie_from_score(a_t, t, &s, Some(&jd))
    } else {
        tweedie_from_score(a_t, t, &s, None)
    }
}

/// Self-normalized tilt weights minus one.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceWeights {
    pub weights: Vec<f64>,
    /// `ln μ_w`, with `μ_w = mean exp(-J_m/λ)`.
    pub log_normalizer: f64,
}

impl GuidanceWeights {
    pub fn normalizer(&self) -> f64 {
        libm::exp(self.log_normalizer)
    }
}

pub fn codi_weights(costs: &[f64], lambda: f64) -> Result<GuidanceWeights> {
    if costs.is_empty() {
        return Err(Error::invalid("need at least one cost sample"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    if costs.iter().any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
        return Err(Error::NonFinite("cost"));
    }
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    if min == f64::INFINITY {
        return Err(Error::DegenerateWeights);
    }
    let m = costs.len() as f64;
    // shifted exponents lie in (-inf, 0] with at least one equal to 0
    let shifted: Vec<f64> = costs.iter().map(|c| libm::exp(-(c - min) / lambda)).collect();
    let mean = shifted.iter().sum::<f64>() / m;
    Ok(GuidanceWeights {
        weights: shifted.iter().map(|e| e / mean - 1.0).collect(),
        log_normalizer: -min / lambda + libm::log(mean),
    })
}

/// Batched joint cost `J(s, a)`.
///
/// A cost may report several groups: group `g` then guides agent `g`'s block
/// only. A single group guides every block.
pub trait JointCost: Send + Sync {
    fn groups(&self) -> usize {
        1
    }

    /// Evaluate `out.len() / groups()` candidates stored back to back in
    /// `candidates`; `out[m * groups + g]` receives group `g` of candidate `m`.
    fn costs(&self, state: &[f64], candidates: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Cost given by a closure over a single joint action.
pub struct FnCost<F>(pub F);

impl<F> JointCost for FnCost<F>
where
    F: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
{
    fn costs(&self, state: &[f64], candidates: &[f64], out: &mut [f64]) -> Result<()> {
        let n = out.len();
        if n == 0 || candidates.len() % n != 0 {
            return Err(Error::invalid("candidate buffer does not divide into out.len() rows"));
        }
        let d = candidates.len() / n;
        for (m, o) in out.iter_mut().enumerate() {
            *o = (self.0)(state, &candidates[m * d..(m + 1) * d]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub mc_samples: usize,
    pub enabled: bool,
    /// Include the score-Jacobian term in the posterior covariance.
    pub full_covariance: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda: 0.1, mc_samples: 64, enabled: true, full_covariance: false }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(Error::invalid("mc_samples must be at least 1"));
        }
        Ok(())
    }
}

/// Monte-Carlo guidance score from a precomputed product score.
#[allow(clippy::too_many_arguments)]
pub fn guidance_from_score<R: Rng + ?Sized>(
    policy: &ProductPolicy,
    a_t: &[f64],
    t: f64,
    state: &[f64],
    score: &[f64],
    jacobian_diag: Option<&[f64]>,
    cfg: &GuidanceConfig,
    cost: &dyn JointCost,
    rng: &mut R,
    out: &mut [f64],
) -> Result<()> {
    cfg.validate()?;
    let d = policy.joint_dim();
    check_dim(d, out.len())?;
    let groups = cost.groups();
    if groups != 1 && groups != policy.agent_count() {
        return Err(Error::invalid("cost groups must be 1 or one per agent"));
    }
    let post = tweedie_from_score(a_t, t, score, jacobian_diag)?;
    let m = cfg.mc_samples;
    let sd: Vec<f64> = post.variance.iter().map(|v| libm::sqrt(*v)).collect();
    let mut candidates = vec![0.0; m * d];
    for row in candidates.chunks_exact_mut(d) {
        for j in 0..d {
            row[j] = post.mean[j] + sd[j] * rng::normal(rng);
        }
    }
    let mut costs = vec![0.0; m * groups];
    cost.costs(state, &candidates, &mut costs)?;
    out.iter_mut().for_each(|v| *v = 0.0);
    let inv = 1.0 / (m as f64 * t * t);
    let mut group_costs = vec![0.0; m];
    for g in 0..groups {
        for k in 0..m {
            group_costs[k] = costs[k * groups + g];
        }
        let w = codi_weights(&group_costs, cfg.lambda)?;
        let range = if groups == 1 { 0..d } else { policy.block(g) };
        for (k, row) in candidates.chunks_exact(d).enumerate() {
            let wk = w.weights[k] * inv;
            if wk == 0.0 {
                continue;
            }
            for j in range.clone() {
                out[j] += wk * (row[j] - a_t[j]);
            }
        }
    }
    Ok(())
}

/// Guidance score `(1/M) Σ w_m (a_m - a_t)/t²` at `(a_t, t)`.
pub fn codi_guidance_score<R: Rng + ?Sized>(
    policy: &ProductPolicy,
    a_t: &[f64],
    t: f64,
    state: &[f64],
    cfg: &GuidanceConfig,
    cost: &dyn JointCost,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let views = policy.views(state)?;
    let mut score = vec![0.0; policy.joint_dim()];
    policy.score_with_views(a_t, t, &views, &mut score)?;
    let jd = if cfg.full_covariance {
        let mut jd = vec![0.0; score.len()];
        policy.jacobian_with_views(a_t, t, &views, &mut jd)?;
        Some(jd)
    } else {
        None
    };
    let mut out = vec![0.0; score.len()];
    guidance_from_score(policy, a_t, t, state, &score, jd.as_deref(), cfg, cost, rng, &mut out)?;
    Ok(out)
}

/// Sample a joint action chunk from the cost-tilted product policy.
///
/// Guidance noise comes from a generator forked off `rng` before integration,
/// so the SDE noise path is the same whether guidance is enabled or not.
pub fn codi_sample<R: Rng + ?Sized>(
    policy: &ProductPolicy,
    state: &[f64],
    cfg: &GuidanceConfig,
    cost: &dyn JointCost,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let views = policy.views(state)?;
    let mut guide_rng = rng::fork(rng);
    let d = policy.joint_dim();
    let mut g = vec![0.0; d];
    let mut jd = vec![0.0; d];
    reverse_sde_with(d, schedule, rng, |x, t, _, out| {
        policy.score_with_views(x, t, &views, out)?;
        if cfg.enabled {
            let jac = if cfg.full_covariance {
                policy.jacobian_with_views(x, t, &views, &mut jd)?;
                Some(&jd[..])
            } else {
                None
            };
            guidance_from_score(policy, x, t, state, out, jac, cfg, cost, &mut guide_rng, &mut g)?;
            for (o, gi) in out.iter_mut().zip(&g) {
                *o += gi;
            }
        }
        Ok(())
    })
}
