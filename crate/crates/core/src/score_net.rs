//! MLP score model, demonstration datasets and denoising score matching.
//!
//! The network sees `[c_in(t)·x, time features, cond]` and its output `F` is
//! read as a scaled noise prediction, `score = -F / t`, with
//! `c_in(t) = 1 / sqrt(σ_data² + t²)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::{noise_time_sample, NoiseSchedule, ScoreField};
use crate::error::{check_dim, Error, Result};
use crate::nn::{mlp_gradients, Activation, Adam, Mlp, Tape};
use crate::rng::{self, CodiRng};

/// Width of the noise-time embedding.
pub const TIME_FEATURES: usize = 7;

/// `[ln t / 4, sin(k·ln t / 4), cos(k·ln t / 4)]` for `k = 1, 2, 4`.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let u = 0.25 * libm::log(t.max(1e-12));
    let mut f = [u, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for (i, k) in [1.0, 2.0, 4.0].iter().enumerate() {
        f[1 + 2 * i] = libm::sin(k * u);
        f[2 + 2 * i] = libm::cos(k * u);
    }
    f
}

/// Shape information shared by every record of a [`DemoDataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetMeta {
    pub state_dim: usize,
    /// Actions per chunk, `K`.
    pub chunk_len: usize,
    /// Width of a single action.
    pub action_width: usize,
    /// Control rate in Hz.
    pub control_rate: f64,
    pub agent: u32,
}

impl DatasetMeta {
    pub fn chunk_width(&self) -> usize {
        self.chunk_len * self.action_width
    }
}

/// Flat store of `(state, action chunk)` records.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    meta: DatasetMeta,
    states: Vec<f64>,
    actions: Vec<f64>,
}

impl DemoDataset {
    pub fn new(meta: DatasetMeta) -> Result<Self> {
        if meta.chunk_len == 0 || meta.action_width == 0 {
            return Err(Error::invalid("chunk length and action width must be positive"));
        }
        Ok(Self { meta, states: Vec::new(), actions: Vec::new() })
    }

    /// Rebuild from flat record storage.
    pub fn from_raw(meta: DatasetMeta, states: Vec<f64>, actions: Vec<f64>) -> Result<Self> {
        let mut ds = Self::new(meta)?;
        let n = actions.len() / meta.chunk_width();
        if actions.len() != n * meta.chunk_width() || states.len() != n * meta.state_dim {
            return Err(Error::invalid("record storage does not match metadata"));
        }
        ds.states = states;
        ds.actions = actions;
        Ok(ds)
    }

    pub fn push(&mut self, state: &[f64], chunk: &[f64]) -> Result<()> {
        check_dim(self.meta.state_dim, state.len())?;
        check_dim(self.meta.chunk_width(), chunk.len())?;
        self.states.extend_from_slice(state);
        self.actions.extend_from_slice(chunk);
        Ok(())
    }

    pub fn append(&mut self, other: &DemoDataset) -> Result<()> {
        if other.meta.state_dim != self.meta.state_dim
            || other.meta.chunk_width() != self.meta.chunk_width()
        {
            return Err(Error::invalid("datasets have different record shapes"));
        }
        self.states.extend_from_slice(&other.states);
        self.actions.extend_from_slice(&other.actions);
        Ok(())
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.actions.len() / self.meta.chunk_width()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        let d = self.meta.state_dim;
        &self.states[i * d..(i + 1) * d]
    }

    pub fn chunk(&self, i: usize) -> &[f64] {
        let w = self.meta.chunk_width();
        &self.actions[i * w..(i + 1) * w]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    /// Pooled standard deviation of all action coordinates.
    pub fn action_std(&self) -> f64 {
        libm::sqrt(crate::stats::variance(&self.actions).max(0.0))
    }
}

/// Score network over action chunks conditioned on a state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScoreModel {
    net: Mlp,
    action_dim: usize,
    cond_dim: usize,
    data_std: f64,
    preconditioning: Preconditioning,
}

/// How the network output `F` maps to a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Preconditioning {
    /// `F` predicts the denoised action through skip and output scalings:
    /// `D = c_skip·x + c_out·F`, `s = (D - x) / t²`. A zero network
    /// denoises to the origin, which keeps high noise levels well behaved.
    Denoiser,
    /// `s = -F / t`; a zero network is a zero score.
    Noise,
}

impl Preconditioning {
    pub fn tag(self) -> u8 {
        match self {
            Preconditioning::Denoiser => 0,
            Preconditioning::Noise => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Preconditioning::Denoiser),
            1 => Some(Preconditioning::Noise),
            _ => None,
        }
    }
}

impl MlpScoreModel {
    pub fn layer_sizes(action_dim: usize, cond_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut sizes = vec![action_dim + TIME_FEATURES + cond_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        sizes
    }

    pub fn init<R: Rng + ?Sized>(
        action_dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        activation: Activation,
        data_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Mlp::init(&Self::layer_sizes(action_dim, cond_dim, hidden), activation, rng)?;
        Self::from_net(net, action_dim, cond_dim, data_std)
    }

    pub fn from_net(net: Mlp, action_dim: usize, cond_dim: usize, data_std: f64) -> Result<Self> {
        check_dim(action_dim + TIME_FEATURES + cond_dim, net.input_dim())?;
        check_dim(action_dim, net.output_dim())?;
        if !(data_std > 0.0) {
            return Err(Error::invalid("data_std must be positive"));
        }
        Ok(Self { net, action_dim, cond_dim, data_std, preconditioning: Preconditioning::Denoiser })
    }

    pub fn with_preconditioning(mut self, preconditioning: Preconditioning) -> Self {
        self.preconditioning = preconditioning;
        self
    }

    pub fn preconditioning(&self) -> Preconditioning {
        self.preconditioning
    }

    /// `(a, b)` with `t²·s = a·x + b·F`.
    fn output_map(&self, t: f64) -> (f64, f64) {
        match self.preconditioning {
            Preconditioning::Noise => (0.0, -t),
            Preconditioning::Denoiser => {
                let sd2 = self.data_std * self.data_std;
                let r = t * t + sd2;
                (-t * t / r, t * self.data_std / libm::sqrt(r))
            }
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn data_std(&self) -> f64 {
        self.data_std
    }

    /// Write the network input for `(x, t, cond)` into `row`.
    pub fn input_row(&self, x: &[f64], t: f64, cond: &[f64], row: &mut Vec<f64>) -> Result<()> {
        check_dim(self.action_dim, x.len())?;
        check_dim(self.cond_dim, cond.len())?;
        let c_in = 1.0 / libm::sqrt(self.data_std * self.data_std + t * t);
        row.clear();
        row.extend(x.iter().map(|v| c_in * v));
        row.extend_from_slice(&time_features(t));
        row.extend_from_slice(cond);
        Ok(())
    }

    /// Raw network output `F`.
    pub fn mlp_forward(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        let mut row = Vec::new();
        self.input_row(x, t, cond, &mut row)?;
        let mut out = vec![0.0; self.action_dim];
        self.net.forward(&row, &mut out)?;
        Ok(out)
    }
}

impl ScoreField for MlpScoreModel {
    fn dim(&self) -> usize {
        self.action_dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn score_into(&self, x: &[f64], t: f64, cond: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.action_dim, out.len())?;
        if !(t > 0.0) {
            return Err(Error::invalid("score network needs t > 0"));
        }
        let mut row = Vec::with_capacity(self.net.input_dim());
        self.input_row(x, t, cond, &mut row)?;
        let mut tape = Tape::default();
        self.net.forward_tape(&row, &mut tape)?;
        let (a, b) = self.output_map(t);
        let inv = 1.0 / (t * t);
        for ((o, f), xi) in out.iter_mut().zip(tape.output()).zip(x) {
            *o = (a * xi + b * f) * inv;
        }
        Ok(())
    }
}

/// One term `weight · ‖t²·s_θ(noisy, t, cond) + offset‖²` of a score-matching
/// objective. Plain DSM uses `offset = t·ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmRow {
    pub noisy: Vec<f64>,
    pub t: f64,
    pub cond: Vec<f64>,
    pub offset: Vec<f64>,
    pub weight: f64,
}

/// Mean of the weighted row losses and its gradient in the model parameters.
pub fn dsm_objective(model: &MlpScoreModel, rows: &[DsmRow]) -> Result<(f64, Vec<f64>)> {
    if rows.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let inv_n = 1.0 / rows.len() as f64;
    let mut input = Vec::with_capacity(model.net.input_dim());
    let mut d_out = vec![0.0; model.action_dim];
    mlp_gradients(&model.net, |acc| {
        let mut total = 0.0;
        for row in rows {
            model.input_row(&row.noisy, row.t, &row.cond, &mut input)?;
            check_dim(model.action_dim, row.offset.len())?;
            let f = acc.forward(&input)?;
            let (a, b) = model.output_map(row.t);
            let mut sq = 0.0;
            for (((d, fi), off), xi) in d_out.iter_mut().zip(f).zip(&row.offset).zip(&row.noisy) {
                let r = a * xi + b * fi + off;
                sq += r * r;
                *d = 2.0 * row.weight * inv_n * b * r;
            }
            total += row.weight * sq;
            acc.backward(&d_out)?;
        }
        Ok(total * inv_n)
    })
}

/// Monte-Carlo DSM loss `mean ‖t²·s(a + tε; t, s) + tε‖²` over `(state, action)`
/// pairs, drawing one `(t, ε)` per record.
pub fn dsm_loss<R: Rng + ?Sized>(
    score: &dyn ScoreField,
    batch: &[(&[f64], &[f64])],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let d = score.dim();
    let mut eps = vec![0.0; d];
    let mut noisy = vec![0.0; d];
    let mut s = vec![0.0; d];
    let mut total = 0.0;
    for (state, action) in batch {
        check_dim(d, action.len())?;
        let t = noise_time_sample(schedule, rng);
        rng::fill_normal(rng, &mut eps);
        for j in 0..d {
            noisy[j] = action[j] + t * eps[j];
        }
        score.score_into(&noisy, t, state, &mut s)?;
        total += s
            .iter()
            .zip(&eps)
            .map(|(si, ei)| {
                let r = t * t * si + t * ei;
                r * r
            })
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub step_count: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            step_count: 4000,
            learning_rate: 1e-3,
            seed: 0,
            schedule: NoiseSchedule::default(),
            hidden_width: 128,
            hidden_layers: 3,
            activation: Activation::Silu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.step_count == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("batch_size, step_count and hidden_width must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        self.schedule.validate()
    }

    pub fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_width; self.hidden_layers]
    }
}

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Run `config.step_count` Adam steps on batches produced by `make_rows`.
/// Returns the per-step loss trace.
pub fn fit_rows<F>(
    model: &mut MlpScoreModel,
    config: &TrainConfig,
    rng: &mut CodiRng,
    mut make_rows: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&MlpScoreModel, &mut CodiRng, &mut Vec<DsmRow>) -> Result<()>,
{
    config.validate()?;
    let mut opt = Adam::new(model.net.params().len(), config.learning_rate);
    let mut rows = Vec::with_capacity(config.batch_size);
    let mut trace = Vec::with_capacity(config.step_count);
    for step in 0..config.step_count {
        rows.clear();
        make_rows(model, rng, &mut rows)?;
        if rows.is_empty() {
            log::warn!("step {step}: empty batch skipped");
            continue;
        }
        let (loss, grad) = match dsm_objective(model, &rows) {
            Err(Error::NonFinite(_)) => {
                return Err(Error::TrainingDivergence { step, loss: f64::INFINITY })
            }
            other => other?,
        };
        if loss > DIVERGENCE_LOSS {
            return Err(Error::TrainingDivergence { step, loss });
        }
        opt.step(model.net.params_mut(), &grad);
        trace.push(loss);
    }
    Ok(trace)
}

/// Plain DSM rows for `batch_size` records drawn uniformly from `dataset`.
pub fn sample_dsm_rows(
    dataset: &DemoDataset,
    schedule: &NoiseSchedule,
    batch_size: usize,
    rng: &mut CodiRng,
    rows: &mut Vec<DsmRow>,
) {
    let w = dataset.meta().chunk_width();
    for _ in 0..batch_size {
        let i = rng.random_range(0..dataset.len());
        let t = noise_time_sample(schedule, rng);
        let mut eps = vec![0.0; w];
        rng::fill_normal(rng, &mut eps);
        let noisy = dataset.chunk(i).iter().zip(&eps).map(|(a, e)| a + t * e).collect();
        let offset = eps.iter().map(|e| t * e).collect();
        rows.push(DsmRow { noisy, t, cond: dataset.state(i).to_vec(), offset, weight: 1.0 });
    }
}

/// A trained model together with its loss trace.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: MlpScoreModel,
    pub losses: Vec<f64>,
}

/// Train a fresh score model on `dataset` by denoising score matching.
///
/// The data scale used for input normalization is `config.schedule.time_scale`.
pub fn train_dsm(dataset: &DemoDataset, config: &TrainConfig) -> Result<Trained> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let meta = *dataset.meta();
    let mut model = MlpScoreModel::init(
        meta.chunk_width(),
        meta.state_dim,
        &config.hidden(),
        config.activation,
        config.schedule.time_scale,
        &mut rng,
    )?;
    let losses = fit_rows(&mut model, config, &mut rng, |_, rng, rows| {
        sample_dsm_rows(dataset, &config.schedule, config.batch_size, rng, rows);
        Ok(())
    })?;
    Ok(Trained { model, losses })
}
