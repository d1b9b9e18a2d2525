//! Comparison methods: classifier guidance with a learned noise-conditioned
//! cost, and three fine-tuning schemes (DPMD, SDAC, EXPO).
//!
//! Fine-tuned policies keep the pre-trained score frozen and learn an additive
//! residual network that starts as the zero map ([`ResidualScore`]).

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::composition::JointCost;
use crate::diffusion::{noise_time_sample, reverse_sde_sample, reverse_sde_with, NoiseSchedule, ScoreField};
use crate::error::{check_dim, Error, Result};
use crate::nn::{mlp_gradients, Adam, GradAccumulator, Mlp, Tape};
use crate::rng::{self, CodiRng};
use crate::score_net::{fit_rows, time_features, DemoDataset, DsmRow, MlpScoreModel, Preconditioning, TrainConfig, DIVERGENCE_LOSS, TIME_FEATURES};
use crate::stats;

/// `base(x, t, c) + g_ψ(x, t, c)` with `base` frozen.
#[derive(Clone)]
pub struct ResidualScore {
    base: Arc<dyn ScoreField>,
    residual: MlpScoreModel,
}

impl core::fmt::Debug for ResidualScore {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ResidualScore").field("residual", &self.residual).finish()
    }
}

impl ResidualScore {
    /// Residual with LeCun-initialized hidden layers and a zero output layer.
    pub fn new(base: Arc<dyn ScoreField>, cond_dim: usize, config: &TrainConfig, rng: &mut CodiRng) -> Result<Self> {
        let mut residual = MlpScoreModel::init(
            base.dim(),
            cond_dim,
            &config.hidden(),
            config.activation,
            config.schedule.time_scale,
            rng,
        )?
        .with_preconditioning(Preconditioning::Noise);
        residual.net_mut().zero_output_layer();
        Ok(Self { base, residual })
    }

    pub fn from_parts(base: Arc<dyn ScoreField>, residual: MlpScoreModel) -> Result<Self> {
        check_dim(base.dim(), residual.action_dim())?;
        Ok(Self { base, residual })
    }

    pub fn base(&self) -> &Arc<dyn ScoreField> {
        &self.base
    }

    pub fn residual(&self) -> &MlpScoreModel {
        &self.residual
    }
}

impl ScoreField for ResidualScore {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn cond_dim(&self) -> usize {
        self.residual.cond_dim()
    }

    fn score_into(&self, x: &[f64], t: f64, cond: &[f64], out: &mut [f64]) -> Result<()> {
        self.base.score_into(x, t, cond, out)?;
        let mut r = vec![0.0; out.len()];
        self.residual.score_into(x, t, cond, &mut r)?;
        for (o, ri) in out.iter_mut().zip(&r) {
            *o += ri;
        }
        Ok(())
    }
}

/// A differentiable noise-conditioned cost `J_ψ(s, a_t; t)`.
pub trait NoiseCondCost: Send + Sync {
    /// Returns `J_ψ` and writes `∇_{a_t} J_ψ` into `grad`.
    fn value_and_grad(&self, state: &[f64], a_t: &[f64], t: f64, grad: &mut [f64]) -> Result<f64>;
}

/// MLP cost regressor over `[c_in·a_t, time features, state]`, trained on
/// standardized targets.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCondCostModel {
    net: Mlp,
    action_dim: usize,
    cond_dim: usize,
    data_std: f64,
    cost_mean: f64,
    cost_scale: f64,
}

impl NoiseCondCostModel {
    pub fn from_parts(net: Mlp, action_dim: usize, cond_dim: usize, data_std: f64, cost_mean: f64, cost_scale: f64) -> Result<Self> {
        check_dim(action_dim + TIME_FEATURES + cond_dim, net.input_dim())?;
        check_dim(1, net.output_dim())?;
        if !(data_std > 0.0 && cost_scale > 0.0) || !cost_mean.is_finite() {
            return Err(Error::invalid("cost model scales must be positive and finite"));
        }
        Ok(Self { net, action_dim, cond_dim, data_std, cost_mean, cost_scale })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn data_std(&self) -> f64 {
        self.data_std
    }

    /// `(mean, scale)` used to standardize training targets.
    pub fn cost_normalization(&self) -> (f64, f64) {
        (self.cost_mean, self.cost_scale)
    }

    fn c_in(&self, t: f64) -> f64 {
        1.0 / libm::sqrt(self.data_std * self.data_std + t * t)
    }

    fn input_row(&self, state: &[f64], a_t: &[f64], t: f64, row: &mut Vec<f64>) -> Result<()> {
        check_dim(self.action_dim, a_t.len())?;
        check_dim(self.cond_dim, state.len())?;
        let c = self.c_in(t);
        row.clear();
        row.extend(a_t.iter().map(|v| c * v));
        row.extend_from_slice(&time_features(t));
        row.extend_from_slice(state);
        Ok(())
    }

    pub fn predict(&self, state: &[f64], a_t: &[f64], t: f64) -> Result<f64> {
        let mut row = Vec::new();
        self.input_row(state, a_t, t, &mut row)?;
        let mut out = [0.0];
        self.net.forward(&row, &mut out)?;
        Ok(self.cost_mean + self.cost_scale * out[0])
    }
}

impl NoiseCondCost for NoiseCondCostModel {
    fn value_and_grad(&self, state: &[f64], a_t: &[f64], t: f64, grad: &mut [f64]) -> Result<f64> {
        check_dim(self.action_dim, grad.len())?;
        let mut row = Vec::new();
        self.input_row(state, a_t, t, &mut row)?;
        let mut tape = Tape::default();
        self.net.forward_tape(&row, &mut tape)?;
        let value = self.cost_mean + self.cost_scale * tape.output()[0];
        let mut d_params = vec![0.0; self.net.params().len()];
        let mut d_input = vec![0.0; row.len()];
        self.net.backward(&tape, &[1.0], &mut d_params, Some(&mut d_input))?;
        let c = self.cost_scale * self.c_in(t);
        for (g, d) in grad.iter_mut().zip(&d_input) {
            *g = c * d;
        }
        Ok(value)
    }
}

/// Classifier-guidance score `-∇_{a_t} J_ψ(s, a_t; t) / λ`.
pub fn cg_guidance_score(model: &dyn NoiseCondCost, a_t: &[f64], t: f64, state: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    let mut grad = vec![0.0; a_t.len()];
    model.value_and_grad(state, a_t, t, &mut grad)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("cost gradient"));
    }
    Ok(grad.iter().map(|g| -g / lambda).collect())
}

/// Reverse-SDE sample with the base score plus classifier guidance.
pub fn cg_sample<R: Rng + ?Sized>(
    base: &dyn ScoreField,
    model: &dyn NoiseCondCost,
    state: &[f64],
    lambda: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; base.dim()];
    reverse_sde_with(base.dim(), schedule, rng, |x, t, _, out| {
        base.score_into(x, t, state, out)?;
        model.value_and_grad(state, x, t, &mut g)?;
        for (o, gi) in out.iter_mut().zip(&g) {
            *o -= gi / lambda;
        }
        Ok(())
    })
}

/// Fit `J_ψ` by regressing `J(s, a)` from `(s, a + tε, t)` over `dataset`,
/// whose chunks are joint actions. Returns the model and its loss trace
/// (in standardized cost units).
pub fn train_noise_cond_cost(
    dataset: &DemoDataset,
    cost: &dyn JointCost,
    config: &TrainConfig,
) -> Result<(NoiseCondCostModel, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if cost.groups() != 1 {
        return Err(Error::invalid("cost model regresses a single cost group"));
    }
    config.validate()?;
    let n = dataset.len();
    let mut targets = vec![0.0; n];
    for i in 0..n {
        cost.costs(dataset.state(i), dataset.chunk(i), &mut targets[i..i + 1])?;
    }
    if targets.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("training cost"));
    }
    let mean = stats::mean(&targets);
    let spread = if n > 1 { libm::sqrt(stats::variance(&targets)) } else { 0.0 };
    let scale = if spread > 1e-9 * mean.abs().max(1.0) { spread } else { 1.0 };
    let meta = dataset.meta();
    let action_dim = meta.chunk_width();
    let mut rng = rng::seeded(config.seed);
    let mut sizes = vec![action_dim + TIME_FEATURES + meta.state_dim];
    sizes.extend(config.hidden());
    sizes.push(1);
    let net = Mlp::init(&sizes, config.activation, &mut rng)?;
    let mut model = NoiseCondCostModel::from_parts(net, action_dim, meta.state_dim, config.schedule.time_scale, mean, scale)?;
    let mut opt = Adam::new(model.net.params().len(), config.learning_rate);
    let mut trace = Vec::with_capacity(config.step_count);
    let mut row = Vec::new();
    let mut eps = vec![0.0; action_dim];
    let mut noisy = vec![0.0; action_dim];
    let inv_b = 1.0 / config.batch_size as f64;
    for step in 0..config.step_count {
        let (loss, grad) = mlp_gradients(&model.net, |acc: &mut GradAccumulator<'_>| {
            let mut total = 0.0;
            for _ in 0..config.batch_size {
                let i = rng.random_range(0..n);
                let t = noise_time_sample(&config.schedule, &mut rng);
                rng::fill_normal(&mut rng, &mut eps);
                for (j, a) in dataset.chunk(i).iter().enumerate() {
                    noisy[j] = a + t * eps[j];
                }
                model.input_row(dataset.state(i), &noisy, t, &mut row)?;
                let y = (targets[i] - mean) / scale;
                let r = acc.forward(&row)?[0] - y;
                total += r * r;
                acc.backward(&[2.0 * r * inv_b])?;
            }
            Ok(total * inv_b)
        })
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::TrainingDivergence { step, loss: f64::INFINITY },
            other => other,
        })?;
        if loss > DIVERGENCE_LOSS {
            return Err(Error::TrainingDivergence { step, loss });
        }
        opt.step(model.net.params_mut(), &grad);
        trace.push(loss);
    }
    Ok((model, trace))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FinetuneConfig {
    pub iterations: usize,
    /// States drawn from the dataset per iteration.
    pub states_per_iteration: usize,
    pub rollouts_per_state: usize,
    pub lambda: f64,
    /// Use the current policy (rather than the frozen base) as the rollout
    /// policy of each iteration.
    pub refresh_reference: bool,
    pub inner: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            states_per_iteration: 64,
            rollouts_per_state: 8,
            lambda: 1.0,
            refresh_reference: false,
            inner: TrainConfig { step_count: 200, ..TrainConfig::default() },
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.states_per_iteration == 0 || self.rollouts_per_state == 0 {
            return Err(Error::invalid("iteration, state and rollout counts must be positive"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        self.inner.validate()
    }
}

/// Outcome of one fine-tuning pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PassReport {
    pub losses: Vec<f64>,
    /// True when every weight underflowed and the pass was skipped.
    pub skipped: bool,
}

/// Clean `(state, action, weight)` targets refit by weighted DSM.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub weight: f64,
}

/// `exp(-J/λ)` normalized to mean one, or `None` if every raw weight
/// underflows to zero.
fn tilt_weights(costs: &[f64], lambda: f64) -> Result<Option<Vec<f64>>> {
    if costs.iter().any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
        return Err(Error::NonFinite("cost"));
    }
    if costs.iter().all(|c| libm::exp(-c / lambda) == 0.0) {
        return Ok(None);
    }
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = costs.iter().map(|c| libm::exp(-(c - min) / lambda)).collect();
    let mean = shifted.iter().sum::<f64>() / shifted.len() as f64;
    Ok(Some(shifted.iter().map(|w| w / mean).collect()))
}

fn draw_states<'a>(dataset: &'a DemoDataset, count: usize, rng: &mut CodiRng) -> Result<Vec<&'a [f64]>> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty state dataset"));
    }
    Ok((0..count).map(|_| dataset.state(rng.random_range(0..dataset.len()))).collect())
}

fn rollouts(
    reference: &dyn ScoreField,
    states: &[&[f64]],
    per_state: usize,
    schedule: &NoiseSchedule,
    rng: &mut CodiRng,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(states.len() * per_state);
    for s in states {
        for _ in 0..per_state {
            out.push((s.to_vec(), reverse_sde_sample(reference, schedule, s, rng)?));
        }
    }
    Ok(out)
}

fn batch_costs(cost: &dyn JointCost, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; pairs.len()];
    for (i, (s, a)) in pairs.iter().enumerate() {
        cost.costs(s, a, &mut out[i..i + 1])?;
    }
    Ok(out)
}

/// Weighted DSM on clean targets: rows `w·‖t²(base + g)(a + tε) + tε‖²`.
pub fn fit_weighted_dsm(
    policy: &mut ResidualScore,
    samples: &[WeightedSample],
    config: &TrainConfig,
    rng: &mut CodiRng,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to fit"));
    }
    let base = policy.base.clone();
    let schedule = config.schedule.clone();
    let batch = config.batch_size;
    fit_rows(&mut policy.residual, config, rng, |_, rng, rows| {
        for _ in 0..batch {
            let item = &samples[rng.random_range(0..samples.len())];
            let t = noise_time_sample(&schedule, rng);
            let mut eps = vec![0.0; item.action.len()];
            rng::fill_normal(rng, &mut eps);
            let noisy: Vec<f64> = item.action.iter().zip(&eps).map(|(a, e)| a + t * e).collect();
            let b = base.score(&noisy, t, &item.state)?;
            let offset = b.iter().zip(&eps).map(|(bi, e)| t * t * bi + t * e).collect();
            rows.push(DsmRow { noisy, t, cond: item.state.clone(), offset, weight: item.weight });
        }
        Ok(())
    })
}

fn reference_of(policy: &ResidualScore, refresh: bool) -> Arc<dyn ScoreField> {
    if refresh {
        Arc::new(policy.clone())
    } else {
        policy.base.clone()
    }
}

/// DPMD targets: rollouts of the reference policy weighted by `exp(-J/λ)`.
/// `None` when every weight underflows.
pub fn dpmd_samples(
    reference: &dyn ScoreField,
    dataset: &DemoDataset,
    cost: &dyn JointCost,
    config: &FinetuneConfig,
    rng: &mut CodiRng,
) -> Result<Option<Vec<WeightedSample>>> {
    let states = draw_states(dataset, config.states_per_iteration, rng)?;
    let pairs = rollouts(reference, &states, config.rollouts_per_state, &config.inner.schedule, rng)?;
    let costs = batch_costs(cost, &pairs)?;
    Ok(tilt_weights(&costs, config.lambda)?.map(|w| {
        pairs
            .into_iter()
            .zip(w)
            .map(|((state, action), weight)| WeightedSample { state, action, weight })
            .collect()
    }))
}

/// One DPMD pass: rollouts from the frozen reference, then cost-weighted DSM.
pub fn dpmd_finetune_step(
    policy: &mut ResidualScore,
    dataset: &DemoDataset,
    cost: &dyn JointCost,
    config: &FinetuneConfig,
    rng: &mut CodiRng,
) -> Result<PassReport> {
    config.validate()?;
    let reference = reference_of(policy, config.refresh_reference);
    match dpmd_samples(reference.as_ref(), dataset, cost, config, rng)? {
        None => {
            log::warn!("dpmd: all tilt weights underflowed; pass skipped");
            Ok(PassReport { losses: Vec::new(), skipped: true })
        }
        Some(samples) => Ok(PassReport { losses: fit_weighted_dsm(policy, &samples, &config.inner, rng)?, skipped: false }),
    }
}

/// SDAC rows: `a_t = a + tε` from forward-corrupted reference rollouts,
/// `ã = a_t + tε̃`, row `exp(-J(s, ã)/λ)·‖t²(base + g)(a_t) - tε̃‖²`.
/// `None` when every weight underflows.
pub fn sdac_rows(
    base: &dyn ScoreField,
    reference: &dyn ScoreField,
    dataset: &DemoDataset,
    cost: &dyn JointCost,
    config: &FinetuneConfig,
    rng: &mut CodiRng,
) -> Result<Option<Vec<DsmRow>>> {
    let states = draw_states(dataset, config.states_per_iteration, rng)?;
    let pairs = rollouts(reference, &states, config.rollouts_per_state, &config.inner.schedule, rng)?;
    let mut rows = Vec::with_capacity(pairs.len());
    let mut proposals = Vec::with_capacity(pairs.len());
    for (state, action) in pairs {
        let d = action.len();
        let t = noise_time_sample(&config.inner.schedule, rng);
        let mut eps = vec![0.0; d];
        let mut eps_tilde = vec![0.0; d];
        rng::fill_normal(rng, &mut eps);
        rng::fill_normal(rng, &mut eps_tilde);
        let noisy: Vec<f64> = action.iter().zip(&eps).map(|(a, e)| a + t * e).collect();
        let proposal: Vec<f64> = noisy.iter().zip(&eps_tilde).map(|(a, e)| a + t * e).collect();
        let b = base.score(&noisy, t, &state)?;
        let offset = b.iter().zip(&eps_tilde).map(|(bi, e)| t * t * bi - t * e).collect();
        proposals.push((state.clone(), proposal));
        rows.push(DsmRow { noisy, t, cond: state, offset, weight: 1.0 });
    }
    let costs = batch_costs(cost, &proposals)?;
    Ok(tilt_weights(&costs, config.lambda)?.map(|w| {
        for (row, wi) in rows.iter_mut().zip(w) {
            row.weight = wi;
        }
        rows
    }))
}

/// One SDAC pass over a freshly generated row pool.
pub fn sdac_finetune_step(
    policy: &mut ResidualScore,
    dataset: &DemoDataset,
    cost: &dyn JointCost,
    config: &FinetuneConfig,
    rng: &mut CodiRng,
) -> Result<PassReport> {
    config.validate()?;
    let reference = reference_of(policy, config.refresh_reference);
    let base = policy.base.clone();
    let pool = match sdac_rows(base.as_ref(), reference.as_ref(), dataset, cost, config, rng)? {
        None => {
            log::warn!("sdac: all tilt weights underflowed; pass skipped");
            return Ok(PassReport { losses: Vec::new(), skipped: true });
        }
        Some(pool) => pool,
    };
    let batch = config.inner.batch_size;
    let losses = fit_rows(&mut policy.residual, &config.inner, rng, |_, rng, rows| {
        for _ in 0..batch {
            rows.push(pool[rng.random_range(0..pool.len())].clone());
        }
        Ok(())
    })?;
    Ok(PassReport { losses, skipped: false })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EditPolicyConfig {
    pub perturbation_count: usize,
    /// Diagonal of the perturbation covariance; a single entry is broadcast.
    pub perturbation_variance: Vec<f64>,
    pub lambda: f64,
}

impl Default for EditPolicyConfig {
    fn default() -> Self {
        Self { perturbation_count: 64, perturbation_variance: vec![0.01], lambda: 0.1 }
    }
}

impl EditPolicyConfig {
    fn std_for(&self, dim: usize) -> Result<Vec<f64>> {
        if self.perturbation_count == 0 {
            return Err(Error::invalid("perturbation_count must be positive"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        let v = &self.perturbation_variance;
        if v.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::invalid("perturbation variances must be positive"));
        }
        match v.len() {
            1 => Ok(vec![libm::sqrt(v[0]); dim]),
            n if n == dim => Ok(v.iter().map(|x| libm::sqrt(*x)).collect()),
            n => Err(Error::Dimension { expected: dim, got: n }),
        }
    }
}

/// An MPPI edit and the softmax weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Edit {
    pub edited: Vec<f64>,
    pub perturbations: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// `a + Σ_i w_i â_i` with `â_i ~ N(0, Σ)` and `w ∝ exp(-J(s, a + â_i)/λ)`.
pub fn expo_edit<R: Rng + ?Sized>(
    a: &[f64],
    state: &[f64],
    cost: &dyn JointCost,
    cfg: &EditPolicyConfig,
    rng: &mut R,
) -> Result<Edit> {
    let d = a.len();
    let sd = cfg.std_for(d)?;
    let m = cfg.perturbation_count;
    let mut perturbations = Vec::with_capacity(m);
    let mut candidates = Vec::with_capacity(m * d);
    for _ in 0..m {
        let p: Vec<f64> = sd.iter().map(|s| s * rng::normal(rng)).collect();
        candidates.extend(a.iter().zip(&p).map(|(x, y)| x + y));
        perturbations.push(p);
    }
    let mut costs = vec![0.0; m];
    cost.costs(state, &candidates, &mut costs)?;
    if costs.iter().any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
        return Err(Error::NonFinite("cost"));
    }
    let logits: Vec<f64> = costs.iter().map(|c| -c / cfg.lambda).collect();
    let lse = stats::log_sum_exp(&logits);
    let weights: Vec<f64> = if lse == f64::NEG_INFINITY {
        vec![1.0 / m as f64; m]
    } else {
        logits.iter().map(|l| libm::exp(l - lse)).collect()
    };
    let mut edited = a.to_vec();
    for (w, p) in weights.iter().zip(&perturbations) {
        for (e, pi) in edited.iter_mut().zip(p) {
            *e += w * pi;
        }
    }
    Ok(Edit { edited, perturbations, weights })
}

/// EXPO distillation targets: edited reference rollouts with unit weight.
pub fn expo_samples(
    reference: &dyn ScoreField,
    dataset: &DemoDataset,
    cost: &dyn JointCost,
    edit: &EditPolicyConfig,
    config: &FinetuneConfig,
    rng: &mut CodiRng,
) -> Result<Vec<WeightedSample>> {
    let states = draw_states(dataset, config.states_per_iteration, rng)?;
    let pairs = rollouts(reference, &states, config.rollouts_per_state, &config.inner.schedule, rng)?;
    pairs
        .into_iter()
        .map(|(state, action)| {
            let e = expo_edit(&action, &state, cost, edit, rng)?;
            Ok(WeightedSample { state, action: e.edited, weight: 1.0 })
        })
        .collect()
}

/// One EXPO pass: edit reference rollouts, then distill them by DSM.
pub fn expo_distill_step(
    policy: &mut ResidualScore,
    dataset: &DemoDataset,
    cost: &dyn JointCost,
    edit: &EditPolicyConfig,
    config: &FinetuneConfig,
    rng: &mut CodiRng,
) -> Result<PassReport> {
    config.validate()?;
    let reference = reference_of(policy, config.refresh_reference);
    let samples = expo_samples(reference.as_ref(), dataset, cost, edit, config, rng)?;
    Ok(PassReport { losses: fit_weighted_dsm(policy, &samples, &config.inner, rng)?, skipped: false })
}

/// Which fine-tuning update to iterate.
#[derive(Debug, Clone, PartialEq)]
pub enum Finetune {
    Dpmd,
    Sdac,
    Expo(EditPolicyConfig),
}

/// Run `config.iterations` passes starting from a zero residual over `base`.
pub fn finetune(
    base: Arc<dyn ScoreField>,
    dataset: &DemoDataset,
    cost: &dyn JointCost,
    method: &Finetune,
    config: &FinetuneConfig,
    rng: &mut CodiRng,
) -> Result<(ResidualScore, Vec<PassReport>)> {
    config.validate()?;
    let mut policy = ResidualScore::new(base, dataset.meta().state_dim, &config.inner, rng)?;
    let mut reports = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let report = match method {
            Finetune::Dpmd => dpmd_finetune_step(&mut policy, dataset, cost, config, rng)?,
            Finetune::Sdac => sdac_finetune_step(&mut policy, dataset, cost, config, rng)?,
            Finetune::Expo(edit) => expo_distill_step(&mut policy, dataset, cost, edit, config, rng)?,
        };
        reports.push(report);
    }
    Ok((policy, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::FnCost;
    use crate::diffusion::{Gmm, GmmScore};
    use crate::nn::Activation;
    use crate::rng::seeded;
    use crate::score_net::DatasetMeta;
    use proptest::prelude::*;

    fn standard_prior() -> Arc<dyn ScoreField> {
        Arc::new(GmmScore(Gmm::gaussian(vec![0.0], vec![1.0]).unwrap()))
    }

    fn stateless_dataset() -> DemoDataset {
        let meta = DatasetMeta { state_dim: 0, chunk_len: 1, action_width: 1, control_rate: 1.0, agent: 0 };
        let mut ds = DemoDataset::new(meta).unwrap();
        ds.push(&[], &[0.0]).unwrap();
        ds
    }

    struct Linear(Vec<f64>);
    impl NoiseCondCost for Linear {
        fn value_and_grad(&self, _: &[f64], a: &[f64], _: f64, g: &mut [f64]) -> Result<f64> {
            g.copy_from_slice(&self.0);
            Ok(a.iter().zip(&self.0).map(|(x, c)| x * c).sum())
        }
    }

    struct HalfNorm;
    impl NoiseCondCost for HalfNorm {
        fn value_and_grad(&self, _: &[f64], a: &[f64], _: f64, g: &mut [f64]) -> Result<f64> {
            g.copy_from_slice(a);
            Ok(0.5 * a.iter().map(|x| x * x).sum::<f64>())
        }
    }

    #[test]
    fn cg_guidance_hand_wired_costs() {
        let g = cg_guidance_score(&Linear(vec![2.0, -1.0]), &[0.3, 0.4], 0.5, &[], 4.0).unwrap();
        assert_eq!(g, vec![-0.5, 0.25]);
        let g = cg_guidance_score(&HalfNorm, &[0.3, -1.2], 0.5, &[], 1.0).unwrap();
        assert_eq!(g, vec![-0.3, 1.2]);
        let g = cg_guidance_score(&HalfNorm, &[0.9, -1.0], 0.5, &[], 1e6).unwrap();
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-3);
    }

    #[test]
    fn cost_model_gradient_matches_finite_differences() {
        let mut rng = seeded(1);
        let net = Mlp::init(&[2 + TIME_FEATURES + 1, 12, 1], Activation::Silu, &mut rng).unwrap();
        let model = NoiseCondCostModel::from_parts(net, 2, 1, 0.7, 0.3, 2.0).unwrap();
        let (s, a, t) = ([0.4], [0.2, -0.9], 0.3);
        let mut g = [0.0; 2];
        model.value_and_grad(&s, &a, t, &mut g).unwrap();
        for j in 0..2 {
            let (mut p, mut m) = (a, a);
            p[j] += 1e-5;
            m[j] -= 1e-5;
            let fd = (model.predict(&s, &p, t).unwrap() - model.predict(&s, &m, t).unwrap()) / 2e-5;
            assert!((fd - g[j]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {}", g[j]);
        }
    }

    fn gaussian_pairs(n: usize, seed: u64) -> DemoDataset {
        let meta = DatasetMeta { state_dim: 0, chunk_len: 1, action_width: 1, control_rate: 1.0, agent: 0 };
        let mut ds = DemoDataset::new(meta).unwrap();
        let mut rng = seeded(seed);
        for _ in 0..n {
            ds.push(&[], &[rng::normal(&mut rng)]).unwrap();
        }
        ds
    }

    fn small_inner(steps: usize) -> TrainConfig {
        TrainConfig { step_count: steps, batch_size: 64, hidden_width: 32, hidden_layers: 2, ..TrainConfig::default() }
    }

    #[test]
    fn constant_cost_model_predicts_constant() {
        let ds = gaussian_pairs(200, 2);
        let cost = FnCost(|_: &[f64], _: &[f64]| 3.0);
        let (model, trace) = train_noise_cond_cost(&ds, &cost, &small_inner(50)).unwrap();
        for a in [-1.0, 0.0, 2.0] {
            let p = model.predict(&[], &[a], 0.01).unwrap();
            assert!((p - 3.0).abs() < 0.15, "{p}");
        }
        assert_eq!(trace.len(), 50);
    }

    #[test]
    fn cost_model_fits_held_out_pairs_at_small_t() {
        let train = gaussian_pairs(2000, 3);
        let held = gaussian_pairs(200, 4);
        let cost = FnCost(|_: &[f64], a: &[f64]| 0.5 * a[0] * a[0]);
        let inner = TrainConfig { hidden_width: 64, ..small_inner(3000) };
        let (model, trace) = train_noise_cond_cost(&train, &cost, &inner).unwrap();
        let head = stats::mean(&trace[..50]);
        let tail = stats::mean(&trace[trace.len() - 50..]);
        assert!(tail < head);
        let mut se = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..held.len() {
            let a = held.chunk(i)[0];
            let j = 0.5 * a * a;
            lo = lo.min(j);
            hi = hi.max(j);
            se += (model.predict(&[], &[a], 0.002).unwrap() - j).powi(2);
        }
        let rms = libm::sqrt(se / held.len() as f64);
        assert!(rms < 0.1 * (hi - lo), "rms {rms} range {}", hi - lo);
    }

    #[test]
    fn tilt_weights_edge_cases() {
        assert_eq!(tilt_weights(&[1e6, 2e6], 1.0).unwrap(), None);
        let w = tilt_weights(&[0.0, 1.0], 1.0).unwrap().unwrap();
        assert!(w.iter().all(|x| x.is_finite() && *x > 0.0));
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dpmd_constant_cost_equals_unweighted_dsm() {
        let ds = stateless_dataset();
        let cfg = FinetuneConfig { iterations: 1, states_per_iteration: 4, rollouts_per_state: 4, inner: small_inner(20), ..FinetuneConfig::default() };
        let run = |c: f64| {
            let mut rng = seeded(5);
            let mut p = ResidualScore::new(standard_prior(), 0, &cfg.inner, &mut rng).unwrap();
            dpmd_finetune_step(&mut p, &ds, &FnCost(move |_: &[f64], _: &[f64]| c), &cfg, &mut rng).unwrap();
            p.residual().clone()
        };
        assert_eq!(run(0.0), run(7.5));
    }

    #[test]
    fn dpmd_degenerate_batch_is_skipped() {
        let ds = stateless_dataset();
        let cfg = FinetuneConfig { iterations: 1, states_per_iteration: 2, rollouts_per_state: 2, lambda: 1e-3, inner: small_inner(5), ..FinetuneConfig::default() };
        let mut rng = seeded(6);
        let mut p = ResidualScore::new(standard_prior(), 0, &cfg.inner, &mut rng).unwrap();
        let before = p.residual().clone();
        let r = dpmd_finetune_step(&mut p, &ds, &FnCost(|_: &[f64], _: &[f64]| 10.0), &cfg, &mut rng).unwrap();
        assert!(r.skipped);
        assert_eq!(&before, p.residual());
    }

    #[test]
    fn dpmd_weights_are_positive_and_finite() {
        let ds = stateless_dataset();
        let cfg = FinetuneConfig { states_per_iteration: 8, rollouts_per_state: 8, inner: small_inner(1), ..FinetuneConfig::default() };
        let cost = FnCost(|_: &[f64], a: &[f64]| 0.5 * a[0] * a[0]);
        let samples = dpmd_samples(standard_prior().as_ref(), &ds, &cost, &cfg, &mut seeded(7)).unwrap().unwrap();
        assert!(samples.iter().all(|s| s.weight.is_finite() && s.weight > 0.0));
    }

    #[test]
    fn sdac_constant_cost_equals_unweighted() {
        let ds = stateless_dataset();
        let cfg = FinetuneConfig { iterations: 1, states_per_iteration: 4, rollouts_per_state: 4, inner: small_inner(20), ..FinetuneConfig::default() };
        let run = |c: f64| {
            let mut rng = seeded(8);
            let mut p = ResidualScore::new(standard_prior(), 0, &cfg.inner, &mut rng).unwrap();
            let r = sdac_finetune_step(&mut p, &ds, &FnCost(move |_: &[f64], _: &[f64]| c), &cfg, &mut rng).unwrap();
            assert!(r.losses.iter().all(|l| *l >= 0.0));
            p.residual().clone()
        };
        assert_eq!(run(0.0), run(-3.0));
    }

    #[test]
    fn expo_single_perturbation_is_taken_whole() {
        let cost = FnCost(|_: &[f64], a: &[f64]| a[0] * 100.0);
        let cfg = EditPolicyConfig { perturbation_count: 1, perturbation_variance: vec![0.3], lambda: 0.1 };
        let e = expo_edit(&[1.0, 2.0], &[], &cost, &cfg, &mut seeded(9)).unwrap();
        assert_eq!(e.weights, vec![1.0]);
        assert_eq!(e.edited, vec![1.0 + e.perturbations[0][0], 2.0 + e.perturbations[0][1]]);
    }

    #[test]
    fn expo_constant_cost_averages_perturbations() {
        let cost = FnCost(|_: &[f64], _: &[f64]| 2.0);
        let cfg = EditPolicyConfig { perturbation_count: 10, perturbation_variance: vec![0.3], lambda: 0.1 };
        let e = expo_edit(&[0.5], &[], &cost, &cfg, &mut seeded(10)).unwrap();
        let mean = e.perturbations.iter().map(|p| p[0]).sum::<f64>() / 10.0;
        assert!((e.edited[0] - 0.5 - mean).abs() < 1e-12);
    }

    #[test]
    fn expo_edit_beats_raw_perturbations() {
        let cost = FnCost(|_: &[f64], a: &[f64]| a.iter().map(|x| x * x).sum::<f64>());
        let cfg = EditPolicyConfig { perturbation_count: 4096, perturbation_variance: vec![0.25], lambda: 0.1 };
        let a = [0.0, 0.0];
        let e = expo_edit(&a, &[], &cost, &cfg, &mut seeded(11)).unwrap();
        let raw: Vec<f64> = e.perturbations.iter().map(|p| p[0] * p[0] + p[1] * p[1]).collect();
        let edited_cost = e.edited[0] * e.edited[0] + e.edited[1] * e.edited[1];
        assert!(edited_cost < stats::median(&raw));
        let rms = libm::sqrt(stats::mean(&raw));
        assert!(libm::sqrt(edited_cost) < rms);
    }

    #[test]
    fn expo_tiny_covariance_reproduces_reference_rollouts() {
        let ds = stateless_dataset();
        let cfg = FinetuneConfig { states_per_iteration: 3, rollouts_per_state: 3, inner: small_inner(1), ..FinetuneConfig::default() };
        let edit = EditPolicyConfig { perturbation_count: 8, perturbation_variance: vec![1e-300], lambda: 0.1 };
        let cost = FnCost(|_: &[f64], a: &[f64]| a[0]);
        let prior = standard_prior();
        let edited = expo_samples(prior.as_ref(), &ds, &cost, &edit, &cfg, &mut seeded(12)).unwrap();
        let mut rng = seeded(12);
        let states = draw_states(&ds, 3, &mut rng).unwrap();
        let raw = rollouts(prior.as_ref(), &states, 3, &cfg.inner.schedule, &mut rng).unwrap();
        for (e, (_, a)) in edited.iter().zip(&raw) {
            assert_eq!(&e.action, a);
        }
    }

    proptest! {
        #[test]
        fn expo_weights_form_a_distribution(seed in 0u64..200, lambda in 0.01f64..5.0) {
            let cost = FnCost(|_: &[f64], a: &[f64]| (a[0] - 1.0).powi(2));
            let cfg = EditPolicyConfig { perturbation_count: 32, perturbation_variance: vec![0.5], lambda };
            let e = expo_edit(&[0.0], &[], &cost, &cfg, &mut seeded(seed)).unwrap();
            prop_assert!(e.weights.iter().all(|w| *w >= 0.0));
            prop_assert!((e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
