//! Demonstrations, closed-loop evaluation and metrics for the hand-off task.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::baselines::{cg_sample, EditPolicyConfig, FinetuneConfig, NoiseCondCost};
use crate::composition::{codi_sample, GuidanceConfig, ProductPolicy};
use crate::diffusion::{reverse_sde_sample, NoiseSchedule, ScoreField};
use crate::env::{
    self, placement_target, state_decompose, step_dynamics, team_expert_commands, Command, CostMode,
    CostSpec, EnvConfig, HandoffCost, HandoffDecomposer, Role, WorldState, ACTION_WIDTH, AGENTS, STATE_DIM, VIEW_DIM,
};
use crate::error::{Error, Result};
use crate::rng::{self, CodiRng};
use crate::score_net::{DatasetMeta, DemoDataset, TrainConfig};
use crate::stats;

/// Evaluated methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Method {
    Codi,
    CodiIndep,
    CgJoint,
    CgProduct,
    Dpmd,
    Sdac,
    Expo,
    Unguided,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Codi,
        Method::CodiIndep,
        Method::CgJoint,
        Method::CgProduct,
        Method::Dpmd,
        Method::Sdac,
        Method::Expo,
        Method::Unguided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Codi => "codi",
            Method::CodiIndep => "codi-indep",
            Method::CgJoint => "cg-joint",
            Method::CgProduct => "cg-product",
            Method::Dpmd => "dpmd",
            Method::Sdac => "sdac",
            Method::Expo => "expo",
            Method::Unguided => "unguided",
        }
    }

    /// Methods sampling from the product of the shared single-agent policy.
    pub fn uses_product(self) -> bool {
        matches!(self, Method::Codi | Method::CodiIndep | Method::CgProduct | Method::Unguided)
    }

    /// Methods built on the jointly trained policy.
    pub fn uses_joint(self) -> bool {
        !self.uses_product() || self == Method::CgProduct
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown method `{s}`")))
    }
}

/// Everything a run needs besides trained artifacts.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub cost: CostSpec,
    pub guidance: GuidanceConfig,
    pub method: Method,
    pub episodes: usize,
    pub max_steps: usize,
    /// Actions executed from each chunk before replanning.
    pub replan_stride: usize,
    /// Guide with the goal term alone.
    pub goal_only_cost: bool,
    /// Reverse-SDE steps used when sampling chunks.
    pub sample_steps: usize,
    pub demo_episodes: usize,
    pub pick_fraction: f64,
    pub joint_demo_episodes: usize,
    pub train: TrainConfig,
    pub cost_model: TrainConfig,
    /// Guidance temperature of the classifier-guided baselines.
    pub cg_lambda: f64,
    pub finetune: FinetuneConfig,
    pub edit: EditPolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = NoiseSchedule::for_data_std(0.5);
        Self {
            seed: 0,
            env: EnvConfig::default(),
            cost: CostSpec::default(),
            guidance: GuidanceConfig::default(),
            method: Method::Codi,
            episodes: 50,
            max_steps: 300,
            replan_stride: 8,
            goal_only_cost: false,
            sample_steps: 50,
            demo_episodes: 1000,
            pick_fraction: 0.5,
            joint_demo_episodes: 1000,
            train: TrainConfig { schedule, ..TrainConfig::default() },
            cost_model: TrainConfig { schedule, step_count: 3000, ..TrainConfig::default() },
            cg_lambda: 0.1,
            finetune: FinetuneConfig {
                inner: TrainConfig { schedule, step_count: 200, ..TrainConfig::default() },
                ..FinetuneConfig::default()
            },
            edit: EditPolicyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.cost.validate()?;
        self.guidance.validate()?;
        if self.episodes == 0 || self.max_steps == 0 || self.sample_steps == 0 {
            return Err(Error::invalid("episodes, max_steps and sample_steps must be positive"));
        }
        if self.replan_stride == 0 || self.replan_stride > self.env.chunk_len {
            return Err(Error::invalid("replan_stride must be in 1..=chunk_len"));
        }
        if !(0.0..=1.0).contains(&self.pick_fraction) {
            return Err(Error::invalid("pick_fraction must be in [0, 1]"));
        }
        if !(self.cg_lambda > 0.0) {
            return Err(Error::invalid("cg_lambda must be positive"));
        }
        self.train.validate()?;
        self.cost_model.validate()?;
        self.finetune.validate()
    }

    /// Sampling schedule: the training schedule at `sample_steps` steps.
    pub fn sample_schedule(&self) -> NoiseSchedule {
        self.train.schedule.with_steps(self.sample_steps)
    }

    /// Cost used for guidance by `method`.
    pub fn guidance_cost(&self) -> HandoffCost {
        let mode = match self.method {
            Method::CodiIndep => CostMode::Independent,
            _ if self.goal_only_cost => CostMode::GoalOnly,
            _ => CostMode::Joint,
        };
        HandoffCost { spec: self.cost.clone(), env: self.env.clone(), mode }
    }

    /// The full joint cost, independent of the method.
    pub fn joint_cost(&self) -> HandoffCost {
        HandoffCost { spec: self.cost.clone(), env: self.env.clone(), mode: CostMode::Joint }
    }
}

/// Steps per demonstration episode.
pub const DEMO_STEPS: usize = 160;
/// Pick demos are graded only if no reset happened in this many final steps.
const GRADE_WINDOW: usize = 80;

fn random_start<R: Rng + ?Sized>(env: &EnvConfig, rng: &mut R) -> WorldState {
    let object = env.random_table_point(rng);
    let goal = env.random_table_point(rng);
    let mut s = WorldState::at_home(env, object, goal);
    for i in 0..AGENTS {
        s.grippers[i] = env.random_reachable_point(i, rng);
    }
    s
}

/// Fraction of demonstrations starting with both arms at home; the rest
/// start anywhere in reach.
const HOME_START_FRACTION: f64 = 0.8;

fn demo_start<R: Rng + ?Sized>(env: &EnvConfig, rng: &mut R) -> WorldState {
    let s = random_start(env, rng);
    if rng.random::<f64>() < HOME_START_FRACTION {
        WorldState::at_home(env, s.object, s.goal)
    } else {
        s
    }
}

/// Normalized speed below which a planned step counts as standing still.
const IDLE_SPEED: f64 = 0.01;

/// An open gripper standing still for the whole plan. Only the first record
/// of each idle stretch is kept, so waiting does not outweigh acting at the
/// same state.
fn is_idle(chunk: &[f64]) -> bool {
    chunk.chunks(ACTION_WIDTH).all(|a| a[0].abs() < IDLE_SPEED && a[1].abs() < IDLE_SPEED && a[2] <= 0.0)
}

fn maybe_reset<R: Rng + ?Sized>(s: &mut WorldState, env: &EnvConfig, rng: &mut R) -> bool {
    if rng.random::<f64>() < env.reset_probability {
        s.object = env.random_table_point(rng);
        s.held_by = None;
        true
    } else {
        false
    }
}

/// Single-agent demonstrations of the scripted expert, recorded in the
/// canonical frame of agent 0 with the other arm parked at home. Each
/// episode is sliced into one `(view, K-step plan)` record per step.
pub fn generate_demos<R: Rng + ?Sized>(episodes: usize, pick_fraction: f64, env: &EnvConfig, rng: &mut R) -> Result<DemoDataset> {
    if episodes == 0 {
        return Err(Error::invalid("demo count must be positive"));
    }
    env.validate()?;
    let meta = DatasetMeta {
        state_dim: VIEW_DIM,
        chunk_len: env.chunk_len,
        action_width: ACTION_WIDTH,
        control_rate: 1.0 / env.dt,
        agent: 0,
    };
    let mut data = DemoDataset::new(meta)?;
    let (mut graded, mut failed) = (0usize, 0usize);
    for _ in 0..episodes {
        let role = if rng.random::<f64>() < pick_fraction { Role::Pick } else { Role::Yield };
        let mut s = demo_start(env, rng);
        s.grippers[1] = env.home(1);
        let mut last_reset = 0;
        let mut spawn = s.object;
        let mut was_idle = false;
        for step in 0..DEMO_STEPS {
            if maybe_reset(&mut s, env, rng) {
                last_reset = step;
                spawn = s.object;
            }
            let view = state_decompose(&s, 0)?;
            let chunk = env::scripted_expert_chunk(&s, 0, role, env)?;
            let idle = is_idle(&chunk) && !view.holding;
            if !(idle && was_idle) {
                data.push(&view.features(env), &chunk)?;
            }
            was_idle = idle;
            let cmd = env::expert_command(&view, role, env);
            s = step_dynamics(&s, &[cmd, Command::hold(false)], env);
        }
        if role == Role::Pick && last_reset + GRADE_WINDOW <= DEMO_STEPS && env.reachable(0, spawn) {
            graded += 1;
            let target = placement_target(&state_decompose(&s, 0)?, env);
            if libm::hypot(s.object[0] - target[0], s.object[1] - target[1]) > 0.03 {
                failed += 1;
            }
        }
    }
    if graded > 0 && failed * 5 > graded {
        return Err(Error::Validation(format!("scripted expert failed {failed} of {graded} graded pick demonstrations")));
    }
    Ok(data)
}

/// Next `K` joint actions of the coordinated expert.
pub fn team_expert_chunk(state: &WorldState, env: &EnvConfig, priority: usize) -> Vec<f64> {
    let w = env.agent_width();
    let mut chunk = vec![0.0; env.joint_width()];
    let mut s = *state;
    for k in 0..env.chunk_len {
        let cmds = team_expert_commands(&s, env, priority);
        for i in 0..AGENTS {
            chunk[i * w + k * ACTION_WIDTH..i * w + (k + 1) * ACTION_WIDTH]
                .copy_from_slice(&env::encode_command(&cmds[i], i, env));
        }
        s = step_dynamics(&s, &cmds, env);
    }
    chunk
}

/// Joint demonstrations of the coordinated expert, which picks one arm at
/// random when both could make progress. Records are `(world state, joint plan)`.
pub fn generate_joint_demos<R: Rng + ?Sized>(episodes: usize, env: &EnvConfig, rng: &mut R) -> Result<DemoDataset> {
    if episodes == 0 {
        return Err(Error::invalid("demo count must be positive"));
    }
    env.validate()?;
    let meta = DatasetMeta {
        state_dim: STATE_DIM,
        chunk_len: env.chunk_len,
        action_width: AGENTS * ACTION_WIDTH,
        control_rate: 1.0 / env.dt,
        agent: u32::MAX,
    };
    let mut data = DemoDataset::new(meta)?;
    for _ in 0..episodes {
        let priority = rng.random_range(0..AGENTS);
        let mut s = demo_start(env, rng);
        let mut was_idle = false;
        for _ in 0..DEMO_STEPS {
            maybe_reset(&mut s, env, rng);
            let chunk = team_expert_chunk(&s, env, priority);
            let idle = is_idle(&chunk) && s.held_by.is_none();
            if !(idle && was_idle) {
                data.push(&s.to_vec(), &chunk)?;
            }
            was_idle = idle;
            s = step_dynamics(&s, &team_expert_commands(&s, env, priority), env);
        }
    }
    Ok(data)
}

/// Evaluation start: grippers home, object uniform over the left half,
/// goal near the right edge.
pub fn eval_initial_state<R: Rng + ?Sized>(env: &EnvConfig, rng: &mut R) -> WorldState {
    let object = [rng::uniform(rng, 0.0, 0.5 * env.table_width), rng::uniform(rng, 0.0, env.table_depth)];
    WorldState::at_home(env, object, [env.table_width - 0.15, 0.5 * env.table_depth])
}

/// Produces joint action chunks from world states.
pub trait ChunkSampler {
    fn sample(&self, state: &WorldState, rng: &mut CodiRng) -> Result<Vec<f64>>;
}

/// Sampler for one evaluated method.
#[derive(Clone)]
pub enum Planner {
    /// Product of per-agent policies, optionally cost-guided.
    Product { policy: ProductPolicy, cost: HandoffCost, guidance: GuidanceConfig, schedule: NoiseSchedule },
    /// A base score plus gradients of a learned noise-conditioned cost.
    Classifier { base: Arc<dyn ScoreField>, cost_model: Arc<dyn NoiseCondCost + Send + Sync>, lambda: f64, schedule: NoiseSchedule },
    /// Plain reverse-SDE sampling of a joint score conditioned on the state.
    Direct { policy: Arc<dyn ScoreField>, schedule: NoiseSchedule },
    /// The coordinated scripted expert.
    Scripted { env: EnvConfig, priority: usize },
}

/// The product of the shared canonical policy placed at both arms. Each
/// arm's block of the joint chunk is in that arm's own frame.
pub fn product_policy(shared: Arc<dyn ScoreField>, env: &EnvConfig) -> Result<ProductPolicy> {
    let agents = (0..AGENTS).map(|_| shared.clone()).collect();
    ProductPolicy::new(agents, Arc::new(HandoffDecomposer(env.clone())))
}

/// Trained artifacts a [`Planner`] can be assembled from.
#[derive(Clone, Default)]
pub struct Artifacts {
    /// Canonical single-agent policy.
    pub shared: Option<Arc<dyn ScoreField>>,
    /// Joint policy conditioned on the world state.
    pub joint: Option<Arc<dyn ScoreField>>,
    pub cost_model: Option<Arc<dyn NoiseCondCost + Send + Sync>>,
    /// Fine-tuned joint policy of the selected fine-tuning method.
    pub finetuned: Option<Arc<dyn ScoreField>>,
}

fn need<T: Clone>(x: &Option<T>, what: &str, method: Method) -> Result<T> {
    x.clone().ok_or_else(|| Error::Validation(format!("method `{method}` needs a {what}")))
}

impl Planner {
    /// Assemble the sampler of `run.method`.
    pub fn build(run: &RunConfig, artifacts: &Artifacts) -> Result<Self> {
        let schedule = run.sample_schedule();
        let m = run.method;
        Ok(match m {
            Method::Codi | Method::CodiIndep | Method::Unguided => {
                let policy = product_policy(need(&artifacts.shared, "single-agent policy", m)?, &run.env)?;
                let guidance = GuidanceConfig { enabled: m != Method::Unguided, ..run.guidance.clone() };
                Planner::Product { policy, cost: run.guidance_cost(), guidance, schedule }
            }
            Method::CgProduct => {
                let policy = product_policy(need(&artifacts.shared, "single-agent policy", m)?, &run.env)?;
                Planner::Classifier {
                    base: Arc::new(policy),
                    cost_model: need(&artifacts.cost_model, "cost model", m)?,
                    lambda: run.cg_lambda,
                    schedule,
                }
            }
            Method::CgJoint => Planner::Classifier {
                base: need(&artifacts.joint, "joint policy", m)?,
                cost_model: need(&artifacts.cost_model, "cost model", m)?,
                lambda: run.cg_lambda,
                schedule,
            },
            Method::Dpmd | Method::Sdac | Method::Expo => {
                Planner::Direct { policy: need(&artifacts.finetuned, "fine-tuned policy", m)?, schedule }
            }
        })
    }
}

impl ChunkSampler for Planner {
    fn sample(&self, state: &WorldState, rng: &mut CodiRng) -> Result<Vec<f64>> {
        let s = state.to_vec();
        match self {
            Planner::Product { policy, cost, guidance, schedule } => codi_sample(policy, &s, guidance, cost, schedule, rng),
            Planner::Classifier { base, cost_model, lambda, schedule } => {
                cg_sample(base.as_ref(), cost_model.as_ref(), &s, *lambda, schedule, rng)
            }
            Planner::Direct { policy, schedule } => reverse_sde_sample(policy.as_ref(), schedule, &s, rng),
            Planner::Scripted { env, priority } => Ok(team_expert_chunk(state, env, *priority)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpisodeResult {
    pub success: bool,
    /// Seconds until success; the step budget for failures.
    pub completion_time: f64,
    pub min_goal_distance: f64,
    /// Steps with the grippers closer than the collision threshold.
    pub collision_steps: usize,
    pub steps: usize,
    /// Ended by gripper contact.
    pub crashed: bool,
    /// Sampler error that aborted the episode.
    pub error: Option<String>,
    /// States `0..=steps`.
    pub trace: Vec<WorldState>,
    /// Executed joint actions, one per step.
    pub actions: Vec<[f64; AGENTS * ACTION_WIDTH]>,
}

/// Run one episode: sample a chunk, execute `replan_stride` actions, repeat
/// until the object is within tolerance of the goal, the arms touch, or
/// the step budget runs out.
pub fn closed_loop_episode(sampler: &dyn ChunkSampler, init: &WorldState, run: &RunConfig, rng: &mut CodiRng) -> EpisodeResult {
    let env = &run.env;
    let w = env.agent_width();
    let mut s = *init;
    let mut trace = vec![s];
    let mut result = EpisodeResult {
        success: false,
        completion_time: run.max_steps as f64 * env.dt,
        min_goal_distance: s.goal_distance(),
        collision_steps: 0,
        steps: 0,
        crashed: false,
        error: None,
        trace: Vec::new(),
        actions: Vec::new(),
    };
    let mut actions = Vec::new();
    let mut steps = 0;
    let done = |s: &WorldState| s.goal_distance() <= env.goal_tolerance;
    if done(&s) {
        result.success = true;
        result.completion_time = 0.0;
    }
    'outer: while !result.success && steps < run.max_steps {
        let chunk = match sampler.sample(&s, rng) {
            Ok(c) if c.len() == env.joint_width() => c,
            Ok(c) => {
                result.error = Some(format!("sampler returned {} values, expected {}", c.len(), env.joint_width()));
                break;
            }
            Err(e) => {
                result.error = Some(e.to_string());
                break;
            }
        };
        for k in 0..run.replan_stride {
            let mut joint = [0.0; AGENTS * ACTION_WIDTH];
            for i in 0..AGENTS {
                joint[i * ACTION_WIDTH..(i + 1) * ACTION_WIDTH]
                    .copy_from_slice(&chunk[i * w + k * ACTION_WIDTH..i * w + (k + 1) * ACTION_WIDTH]);
            }
            s = step_dynamics(&s, &decode_joint(&joint, env), env);
            actions.push(joint);
            steps += 1;
            trace.push(s);
            result.min_goal_distance = result.min_goal_distance.min(s.goal_distance());
            let gap = s.gripper_distance();
            if gap < run.cost.collision_threshold {
                result.collision_steps += 1;
            }
            if gap < env.contact_radius {
                result.crashed = true;
                break 'outer;
            }
            if done(&s) {
                result.success = true;
                result.completion_time = steps as f64 * env.dt;
                break 'outer;
            }
            if steps >= run.max_steps {
                break 'outer;
            }
        }
    }
    result.steps = steps;
    result.trace = trace;
    result.actions = actions;
    result
}

fn decode_joint(joint: &[f64; AGENTS * ACTION_WIDTH], env: &EnvConfig) -> [Command; AGENTS] {
    core::array::from_fn(|i| env::decode_action(&joint[i * ACTION_WIDTH..(i + 1) * ACTION_WIDTH], i, env))
}

/// Re-execute the recorded actions of an episode from its first state.
pub fn replay(result: &EpisodeResult, env: &EnvConfig) -> Result<WorldState> {
    let mut s = *result.trace.first().ok_or_else(|| Error::invalid("empty trace"))?;
    for a in &result.actions {
        s = step_dynamics(&s, &decode_joint(a, env), env);
    }
    Ok(s)
}

/// Episode `index` of an evaluation: its own generator, derived from the
/// master seed as `stream_seed(seed, index)`, draws the start state and
/// then drives sampling.
pub fn run_episode(sampler: &dyn ChunkSampler, run: &RunConfig, index: usize) -> EpisodeResult {
    let mut rng = rng::seeded(rng::stream_seed(run.seed, index as u64));
    let init = eval_initial_state(&run.env, &mut rng);
    closed_loop_episode(sampler, &init, run, &mut rng)
}

/// Aggregates over the episodes of one method.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MethodMetrics {
    pub method: String,
    pub episodes: usize,
    pub success_rate: f64,
    /// Median over all episodes, failures counted at the step budget.
    pub median_completion_time: f64,
    pub median_min_distance: f64,
    /// Fraction of executed steps with the grippers closer than the
    /// collision threshold.
    pub collision_rate: f64,
    pub crash_rate: f64,
    pub error_count: usize,
}

/// Per-method rows.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsTable {
    pub rows: Vec<MethodMetrics>,
}

impl MetricsTable {
    pub fn get(&self, method: &str) -> Option<&MethodMetrics> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub fn compute_metrics(method: &str, results: &[EpisodeResult]) -> Result<MethodMetrics> {
    if results.is_empty() {
        return Err(Error::invalid("no episodes to aggregate"));
    }
    let n = results.len() as f64;
    let times: Vec<f64> = results.iter().map(|r| r.completion_time).collect();
    let dists: Vec<f64> = results.iter().map(|r| r.min_goal_distance).collect();
    let steps: usize = results.iter().map(|r| r.steps).sum();
    let collisions: usize = results.iter().map(|r| r.collision_steps).sum();
    Ok(MethodMetrics {
        method: method.into(),
        episodes: results.len(),
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
        median_completion_time: stats::median(&times),
        median_min_distance: stats::median(&dists),
        collision_rate: if steps == 0 { 0.0 } else { collisions as f64 / steps as f64 },
        crash_rate: results.iter().filter(|r| r.crashed).count() as f64 / n,
        error_count: results.iter().filter(|r| r.error.is_some()).count(),
    })
}
