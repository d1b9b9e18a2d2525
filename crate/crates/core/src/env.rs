//! Planar two-arm hand-off surrogate.
//!
//! Two point grippers share a `1.8 m × 1.2 m` table. Each can only move
//! inside its own reach disk, so objects spawned on the left must be handed
//! over to reach goals on the right. Actions are normalized: per step an agent
//! emits `[vx / v_max, vy / v_max, grip]` (`grip > 0` closes). Agent 1 acts in
//! a mirrored frame (`x ↦ width - x`) so both agents can share one policy.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::composition::{JointCost, StateDecomposer};
use crate::error::{check_dim, Error, Result};
use crate::rng;

pub const AGENTS: usize = 2;
/// Width of one per-step action.
pub const ACTION_WIDTH: usize = 3;
/// Width of [`WorldState::to_vec`].
pub const STATE_DIM: usize = 12;
/// Width of [`AgentView::features`].
pub const VIEW_DIM: usize = 10;

type P2 = [f64; 2];

#[inline]
fn dist(a: P2, b: P2) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EnvConfig {
    pub table_width: f64,
    pub table_depth: f64,
    pub reach_radius: f64,
    pub reach_centers: [P2; AGENTS],
    pub grasp_radius: f64,
    pub dt: f64,
    pub v_max: f64,
    pub goal_tolerance: f64,
    /// Per-step probability of teleporting the object during demonstrations.
    pub reset_probability: f64,
    pub chunk_len: usize,
    /// Gripper separation below which an episode counts as a crash (0 disables).
    pub contact_radius: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            table_width: 1.8,
            table_depth: 1.2,
            reach_radius: 1.1,
            reach_centers: [[0.0, 0.6], [1.8, 0.6]],
            grasp_radius: 0.05,
            dt: 0.1,
            v_max: 1.0,
            goal_tolerance: 0.15,
            reset_probability: 0.01,
            chunk_len: 16,
            contact_radius: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.table_width,
            self.table_depth,
            self.reach_radius,
            self.grasp_radius,
            self.dt,
            self.v_max,
            self.goal_tolerance,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("environment lengths, dt and v_max must be positive"));
        }
        if self.reach_radius >= self.table_width {
            return Err(Error::invalid("reach radius must be smaller than the table width"));
        }
        if !(0.0..=1.0).contains(&self.reset_probability) || self.contact_radius < 0.0 {
            return Err(Error::invalid("reset probability must be in [0, 1], contact radius nonnegative"));
        }
        if self.chunk_len == 0 {
            return Err(Error::invalid("chunk_len must be positive"));
        }
        Ok(())
    }

    pub fn home(&self, agent: usize) -> P2 {
        self.reach_centers[agent]
    }

    pub fn reachable(&self, agent: usize, p: P2) -> bool {
        dist(p, self.reach_centers[agent]) <= self.reach_radius
    }

    /// Closest point to `p` inside agent's reach disk shrunk by `margin`.
    pub fn project_to_reach(&self, agent: usize, p: P2, margin: f64) -> P2 {
        let c = self.reach_centers[agent];
        let r = (self.reach_radius - margin).max(0.0);
        let d = dist(p, c);
        if d <= r {
            p
        } else {
            [c[0] + (p[0] - c[0]) * r / d, c[1] + (p[1] - c[1]) * r / d]
        }
    }

    fn clamp_table(&self, p: P2) -> P2 {
        [p[0].clamp(0.0, self.table_width), p[1].clamp(0.0, self.table_depth)]
    }

    pub fn random_table_point<R: Rng + ?Sized>(&self, rng: &mut R) -> P2 {
        [rng::uniform(rng, 0.0, self.table_width), rng::uniform(rng, 0.0, self.table_depth)]
    }

    /// Uniform point of the table inside agent's reach disk.
    pub fn random_reachable_point<R: Rng + ?Sized>(&self, agent: usize, rng: &mut R) -> P2 {
        loop {
            let p = self.random_table_point(rng);
            if self.reachable(agent, p) {
                return p;
            }
        }
    }

    /// Joint chunk width: `AGENTS · chunk_len · ACTION_WIDTH`.
    pub fn joint_width(&self) -> usize {
        AGENTS * self.agent_width()
    }

    pub fn agent_width(&self) -> usize {
        self.chunk_len * ACTION_WIDTH
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorldState {
    pub grippers: [P2; AGENTS],
    pub closed: [bool; AGENTS],
    pub object: P2,
    pub goal: P2,
    pub held_by: Option<usize>,
}

impl WorldState {
    /// Both grippers open at their home poses.
    pub fn at_home(cfg: &EnvConfig, object: P2, goal: P2) -> Self {
        Self { grippers: [cfg.home(0), cfg.home(1)], closed: [false; AGENTS], object, goal, held_by: None }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        vec![
            self.grippers[0][0],
            self.grippers[0][1],
            flag(self.closed[0]),
            self.grippers[1][0],
            self.grippers[1][1],
            flag(self.closed[1]),
            self.object[0],
            self.object[1],
            self.goal[0],
            self.goal[1],
            flag(self.held_by == Some(0)),
            flag(self.held_by == Some(1)),
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        check_dim(STATE_DIM, v.len())?;
        let held_by = match (v[10] > 0.5, v[11] > 0.5) {
            (false, false) => None,
            (true, false) => Some(0),
            (false, true) => Some(1),
            _ => return Err(Error::invalid("object cannot be held by both agents")),
        };
        Ok(Self {
            grippers: [[v[0], v[1]], [v[3], v[4]]],
            closed: [v[2] > 0.5, v[5] > 0.5],
            object: [v[6], v[7]],
            goal: [v[8], v[9]],
            held_by,
        })
    }

    pub fn gripper_distance(&self) -> f64 {
        dist(self.grippers[0], self.grippers[1])
    }

    pub fn goal_distance(&self) -> f64 {
        dist(self.object, self.goal)
    }
}

/// World-frame command of one agent for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Command {
    /// Velocity in m/s.
    pub velocity: P2,
    pub close: bool,
}

impl Command {
    pub fn hold(closed: bool) -> Self {
        Self { velocity: [0.0, 0.0], close: closed }
    }
}

/// Normalized per-step action of `agent` (its own frame) to a world command.
pub fn decode_action(action: &[f64], agent: usize, cfg: &EnvConfig) -> Command {
    let mut vx = cfg.v_max * action[0];
    let vy = cfg.v_max * action[1];
    if agent == 1 {
        vx = -vx;
    }
    Command { velocity: [vx, vy], close: action[2] > 0.0 }
}

/// Inverse of [`decode_action`] (grip encoded as ±1).
pub fn encode_command(cmd: &Command, agent: usize, cfg: &EnvConfig) -> [f64; ACTION_WIDTH] {
    let mut vx = cmd.velocity[0] / cfg.v_max;
    if agent == 1 {
        vx = -vx;
    }
    [vx, cmd.velocity[1] / cfg.v_max, if cmd.close { 1.0 } else { -1.0 }]
}

/// Advance one step: move (speed capped at `v_max`, clamped to reach disk and
/// table), apply gripper commands, resolve grasps (lower index first) and
/// carry a held object with its holder.
pub fn step_dynamics(state: &WorldState, commands: &[Command; AGENTS], cfg: &EnvConfig) -> WorldState {
    let mut next = *state;
    for i in 0..AGENTS {
        let mut v = commands[i].velocity;
        if !(v[0].is_finite() && v[1].is_finite()) {
            v = [0.0, 0.0];
        }
        let speed = libm::hypot(v[0], v[1]);
        if speed > cfg.v_max {
            v = [v[0] * cfg.v_max / speed, v[1] * cfg.v_max / speed];
        }
        let p = state.grippers[i];
        let moved = [p[0] + cfg.dt * v[0], p[1] + cfg.dt * v[1]];
        next.grippers[i] = cfg.clamp_table(cfg.project_to_reach(i, moved, 0.0));
        next.closed[i] = commands[i].close;
    }
    if let Some(h) = next.held_by {
        if !next.closed[h] {
            next.held_by = None;
        }
    }
    if next.held_by.is_none() {
        next.held_by = (0..AGENTS).find(|&i| next.closed[i] && dist(next.grippers[i], next.object) <= cfg.grasp_radius);
    }
    if let Some(h) = next.held_by {
        next.object = next.grippers[h];
    }
    next
}

fn joint_commands(joint: &[f64], k: usize, cfg: &EnvConfig) -> [Command; AGENTS] {
    let w = cfg.agent_width();
    core::array::from_fn(|i| {
        let a = &joint[i * w + k * ACTION_WIDTH..i * w + (k + 1) * ACTION_WIDTH];
        decode_action(a, i, cfg)
    })
}

/// Apply a joint chunk, returning the `K + 1` states including the start.
pub fn rollout_chunk(state: &WorldState, joint: &[f64], cfg: &EnvConfig) -> Result<Vec<WorldState>> {
    check_dim(cfg.joint_width(), joint.len())?;
    let mut traj = Vec::with_capacity(cfg.chunk_len + 1);
    traj.push(*state);
    for k in 0..cfg.chunk_len {
        let next = step_dynamics(traj.last().unwrap(), &joint_commands(joint, k, cfg), cfg);
        traj.push(next);
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum CostVariant {
    /// Hinged components `min{d - Δ, 0}` exactly as tabulated.
    Appendix,
    /// Plain object-goal distance and a 0/1 collision indicator.
    MainText,
    /// Hinges flipped to penalties: `max{d - Δ, 0}` for goal and engagement,
    /// `max{Δ - d, 0}` for collision.
    Penalty,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CostSpec {
    pub goal_threshold: f64,
    pub goal_weight: f64,
    pub engage_threshold: f64,
    pub engage_weight: f64,
    pub collision_threshold: f64,
    pub collision_weight: f64,
    pub variant: CostVariant,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            goal_threshold: 0.01,
            goal_weight: 1.0,
            engage_threshold: 0.20,
            engage_weight: 10.0,
            collision_threshold: 0.30,
            collision_weight: 10.0,
            variant: CostVariant::Penalty,
        }
    }
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.goal_threshold > 0.0 && self.engage_threshold > 0.0 && self.collision_threshold > 0.0) {
            return Err(Error::invalid("cost thresholds must be positive"));
        }
        if [self.goal_weight, self.engage_weight, self.collision_weight].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("cost weights must be nonnegative"));
        }
        Ok(())
    }

    fn goal_term(&self, d: f64) -> f64 {
        match self.variant {
            CostVariant::Appendix => (d - self.goal_threshold).min(0.0),
            CostVariant::MainText => d,
            CostVariant::Penalty => (d - self.goal_threshold).max(0.0),
        }
    }

    fn collision_term(&self, d: f64) -> f64 {
        match self.variant {
            CostVariant::Appendix => (self.collision_threshold - d).min(0.0),
            CostVariant::MainText => {
                if d < self.collision_threshold {
                    1.0
                } else {
                    0.0
                }
            }
            CostVariant::Penalty => (self.collision_threshold - d).max(0.0),
        }
    }

    fn engage_term(&self, d: f64) -> f64 {
        match self.variant {
            CostVariant::Penalty => (d - self.engage_threshold).max(0.0),
            _ => (d - self.engage_threshold).min(0.0),
        }
    }
}

/// Unweighted components and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostBreakdown {
    pub total: f64,
    pub goal: f64,
    pub collision: f64,
    pub engage: f64,
}

/// Trajectory minima over steps `1..=K` of a rollout.
#[derive(Debug, Clone, Copy)]
struct Minima {
    object_goal: f64,
    gripper_gap: f64,
    gripper_object: [f64; AGENTS],
    first_gripper_object: [f64; AGENTS],
}

fn rollout_minima(state: &WorldState, joint: &[f64], cfg: &EnvConfig) -> Minima {
    let mut s = *state;
    let mut m = Minima {
        object_goal: f64::INFINITY,
        gripper_gap: f64::INFINITY,
        gripper_object: [f64::INFINITY; AGENTS],
        first_gripper_object: [0.0; AGENTS],
    };
    for k in 0..cfg.chunk_len {
        s = step_dynamics(&s, &joint_commands(joint, k, cfg), cfg);
        m.object_goal = m.object_goal.min(dist(s.object, s.goal));
        m.gripper_gap = m.gripper_gap.min(s.gripper_distance());
        for i in 0..AGENTS {
            let d = dist(s.grippers[i], s.object);
            m.gripper_object[i] = m.gripper_object[i].min(d);
            if k == 0 {
                m.first_gripper_object[i] = d;
            }
        }
    }
    m
}

/// Joint cost of applying `joint` from `state`, by simulation.
pub fn evaluate_cost(state: &WorldState, joint: &[f64], spec: &CostSpec, cfg: &EnvConfig) -> Result<CostBreakdown> {
    check_dim(cfg.joint_width(), joint.len())?;
    let m = rollout_minima(state, joint, cfg);
    let goal = spec.goal_term(m.object_goal);
    let collision = spec.collision_term(m.gripper_gap);
    let closer = if m.first_gripper_object[0] < m.first_gripper_object[1] { 0 } else { 1 };
    let engage = spec.engage_term(m.gripper_object[closer]);
    Ok(CostBreakdown {
        total: spec.goal_weight * goal + spec.collision_weight * collision + spec.engage_weight * engage,
        goal,
        collision,
        engage,
    })
}

/// Which agents a [`HandoffCost`] couples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum CostMode {
    /// Goal, collision and closer-agent engagement on the joint rollout.
    Joint,
    /// Per-agent goal and engagement, each simulated with the other agent
    /// holding still; no collision term.
    Independent,
    /// Goal term only.
    GoalOnly,
}

/// Simulation-based hand-off cost usable as a guidance cost.
#[derive(Debug, Clone, PartialEq)]
pub struct HandoffCost {
    pub spec: CostSpec,
    pub env: EnvConfig,
    pub mode: CostMode,
}

impl HandoffCost {
    fn agent_cost(&self, state: &WorldState, joint: &[f64], agent: usize, scratch: &mut Vec<f64>) -> f64 {
        let w = self.env.agent_width();
        scratch.clear();
        scratch.extend_from_slice(joint);
        let other = 1 - agent;
        let hold = encode_command(&Command::hold(state.closed[other]), other, &self.env);
        for k in 0..self.env.chunk_len {
            scratch[other * w + k * ACTION_WIDTH..other * w + (k + 1) * ACTION_WIDTH].copy_from_slice(&hold);
        }
        let m = rollout_minima(state, scratch, &self.env);
        self.spec.goal_weight * self.spec.goal_term(m.object_goal)
            + self.spec.engage_weight * self.spec.engage_term(m.gripper_object[agent])
    }
}

impl JointCost for HandoffCost {
    fn groups(&self) -> usize {
        match self.mode {
            CostMode::Independent => AGENTS,
            _ => 1,
        }
    }

    fn costs(&self, state: &[f64], candidates: &[f64], out: &mut [f64]) -> Result<()> {
        let s = WorldState::from_slice(state)?;
        let w = self.env.joint_width();
        let g = self.groups();
        check_dim(out.len() / g * w, candidates.len())?;
        let mut scratch = Vec::with_capacity(w);
        for (m, joint) in candidates.chunks_exact(w).enumerate() {
            match self.mode {
                CostMode::Joint => out[m] = evaluate_cost(&s, joint, &self.spec, &self.env)?.total,
                CostMode::GoalOnly => {
                    let mm = rollout_minima(&s, joint, &self.env);
                    out[m] = self.spec.goal_weight * self.spec.goal_term(mm.object_goal);
                }
                CostMode::Independent => {
                    for a in 0..AGENTS {
                        out[m * g + a] = self.agent_cost(&s, joint, a, &mut scratch);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ego-centric view `σ⁽ⁱ⁾(s)`: the other agent is excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentView {
    pub agent: usize,
    pub ego: P2,
    pub closed: bool,
    pub holding: bool,
    pub object: P2,
    pub goal: P2,
}

impl AgentView {
    /// Canonical-frame feature vector (agent 1 mirrored onto agent 0's side).
    pub fn features(&self, cfg: &EnvConfig) -> [f64; VIEW_DIM] {
        let c = cfg.reach_centers[0][1];
        let canon = |p: P2| if self.agent == 1 { [cfg.table_width - p[0], p[1]] } else { p };
        let (e, o, g) = (canon(self.ego), canon(self.object), canon(self.goal));
        [
            e[0],
            e[1] - c,
            if self.closed { 1.0 } else { 0.0 },
            if self.holding { 1.0 } else { 0.0 },
            o[0],
            o[1] - c,
            g[0],
            g[1] - c,
            o[0] - e[0],
            o[1] - e[1],
        ]
    }

    /// Write the ego fields back into a world state.
    pub fn embed(&self, state: &mut WorldState) {
        state.grippers[self.agent] = self.ego;
        state.closed[self.agent] = self.closed;
    }
}

pub fn state_decompose(state: &WorldState, agent: usize) -> Result<AgentView> {
    if agent >= AGENTS {
        return Err(Error::invalid("agent index out of range"));
    }
    Ok(AgentView {
        agent,
        ego: state.grippers[agent],
        closed: state.closed[agent],
        holding: state.held_by == Some(agent),
        object: state.object,
        goal: state.goal,
    })
}

/// [`StateDecomposer`] over [`WorldState::to_vec`] encodings.
#[derive(Debug, Clone)]
pub struct HandoffDecomposer(pub EnvConfig);

impl StateDecomposer for HandoffDecomposer {
    fn agent_count(&self) -> usize {
        AGENTS
    }

    fn project(&self, state: &[f64], agent: usize, out: &mut Vec<f64>) -> Result<()> {
        let view = state_decompose(&WorldState::from_slice(state)?, agent)?;
        out.clear();
        out.extend_from_slice(&view.features(&self.0));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Role {
    Pick,
    Yield,
}

/// Proportional gain of the scripted controller (1/s).
pub const EXPERT_GAIN: f64 = 4.0;
/// Release once the carried object is this close to its placement target.
pub const PLACE_TOLERANCE: f64 = 0.01;
/// A free object this close to the placement target counts as delivered.
pub const DELIVERED_TOLERANCE: f64 = 0.1;
/// Placement targets and waiting points stay this far inside the reach disk.
pub const REACH_MARGIN: f64 = 0.05;

fn p_control(from: P2, to: P2, cfg: &EnvConfig) -> P2 {
    let mut v = [EXPERT_GAIN * (to[0] - from[0]), EXPERT_GAIN * (to[1] - from[1])];
    let s = libm::hypot(v[0], v[1]);
    if s > cfg.v_max {
        v = [v[0] * cfg.v_max / s, v[1] * cfg.v_max / s];
    }
    v
}

/// Where a picking agent places the object: the goal, pulled into reach.
pub fn placement_target(view: &AgentView, cfg: &EnvConfig) -> P2 {
    cfg.project_to_reach(view.agent, view.goal, REACH_MARGIN)
}

/// One world-frame command of the single-agent scripted expert.
pub fn expert_command(view: &AgentView, role: Role, cfg: &EnvConfig) -> Command {
    let home = cfg.home(view.agent);
    if role == Role::Yield {
        return Command { velocity: p_control(view.ego, home, cfg), close: false };
    }
    let place = placement_target(view, cfg);
    if view.holding {
        let release = dist(view.ego, place) <= PLACE_TOLERANCE;
        return Command { velocity: p_control(view.ego, place, cfg), close: !release };
    }
    if dist(view.object, place) <= DELIVERED_TOLERANCE {
        return Command { velocity: p_control(view.ego, home, cfg), close: false };
    }
    if cfg.reachable(view.agent, view.object) {
        let close = dist(view.ego, view.object) < 0.8 * cfg.grasp_radius;
        return Command { velocity: p_control(view.ego, view.object, cfg), close };
    }
    let wait = cfg.project_to_reach(view.agent, view.object, REACH_MARGIN);
    Command { velocity: p_control(view.ego, wait, cfg), close: false }
}

/// Normalized action of the scripted expert in the agent's own frame.
pub fn scripted_expert_action(view: &AgentView, role: Role, cfg: &EnvConfig) -> [f64; ACTION_WIDTH] {
    encode_command(&expert_command(view, role, cfg), view.agent, cfg)
}

/// The expert's next `K` actions from `state`, simulated with the other
/// agent holding still.
pub fn scripted_expert_chunk(state: &WorldState, agent: usize, role: Role, cfg: &EnvConfig) -> Result<Vec<f64>> {
    let mut s = *state;
    let mut chunk = Vec::with_capacity(cfg.agent_width());
    for _ in 0..cfg.chunk_len {
        let view = state_decompose(&s, agent)?;
        let cmd = expert_command(&view, role, cfg);
        chunk.extend_from_slice(&encode_command(&cmd, agent, cfg));
        let mut cmds = [Command::hold(s.closed[0]), Command::hold(s.closed[1])];
        cmds[agent] = cmd;
        s = step_dynamics(&s, &cmds, cfg);
    }
    Ok(chunk)
}

/// Roles chosen by the coordinated two-agent expert: the holder keeps
/// picking; otherwise the agent that can make progress picks, preferring the
/// one whose placement target is closer to the goal (ties broken by
/// `priority`), and the other yields.
pub fn team_roles(state: &WorldState, cfg: &EnvConfig, priority: usize) -> [Role; AGENTS] {
    let mut roles = [Role::Yield; AGENTS];
    if let Some(h) = state.held_by {
        roles[h] = Role::Pick;
        return roles;
    }
    let views: [AgentView; AGENTS] = core::array::from_fn(|i| state_decompose(state, i).unwrap());
    let useful = |i: usize| {
        let place = placement_target(&views[i], cfg);
        cfg.reachable(i, state.object) && dist(state.object, place) > DELIVERED_TOLERANCE
    };
    let gain = |i: usize| dist(state.object, state.goal) - dist(placement_target(&views[i], cfg), state.goal);
    let candidates: Vec<usize> = (0..AGENTS).filter(|&i| useful(i) && gain(i) > DELIVERED_TOLERANCE).collect();
    let pick = match candidates.as_slice() {
        [] => None,
        [one] => Some(*one),
        _ => {
            let (g0, g1) = (gain(0), gain(1));
            if (g0 - g1).abs() > 1e-9 {
                Some(if g0 > g1 { 0 } else { 1 })
            } else {
                Some(priority)
            }
        }
    };
    if let Some(p) = pick {
        roles[p] = Role::Pick;
    }
    roles
}

/// Joint command of the coordinated expert.
pub fn team_expert_commands(state: &WorldState, cfg: &EnvConfig, priority: usize) -> [Command; AGENTS] {
    let roles = team_roles(state, cfg, priority);
    core::array::from_fn(|i| expert_command(&state_decompose(state, i).unwrap(), roles[i], cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    fn free_state() -> WorldState {
        WorldState {
            grippers: [[0.5, 0.5], [1.5, 0.7]],
            closed: [false, false],
            object: [0.3, 0.9],
            goal: [1.65, 0.6],
            held_by: None,
        }
    }

    #[test]
    fn zero_velocity_leaves_state_unchanged() {
        let s = free_state();
        let next = step_dynamics(&s, &[Command::default(); 2], &cfg());
        assert_eq!(next, s);
    }

    #[test]
    fn euler_step() {
        let s = free_state();
        let cmds = [Command { velocity: [1.0, 0.0], close: false }, Command::default()];
        let next = step_dynamics(&s, &cmds, &cfg());
        assert!((next.grippers[0][0] - 0.6).abs() < 1e-15);
        assert_eq!(next.grippers[0][1], 0.5);
    }

    #[test]
    fn simultaneous_grasp_goes_to_lower_index() {
        let mut s = free_state();
        s.object = [0.9, 0.6];
        s.grippers = [[0.88, 0.6], [0.92, 0.6]];
        let close = Command { velocity: [0.0, 0.0], close: true };
        let next = step_dynamics(&s, &[close, close], &cfg());
        assert_eq!(next.held_by, Some(0));
        assert_eq!(next.object, next.grippers[0]);
    }

    #[test]
    fn release_on_open_and_carry_while_closed() {
        let mut s = free_state();
        s.grippers[0] = s.object;
        let close = Command { velocity: [0.5, 0.0], close: true };
        let s1 = step_dynamics(&s, &[close, Command::default()], &cfg());
        assert_eq!(s1.held_by, Some(0));
        assert_eq!(s1.object, s1.grippers[0]);
        let open = Command { velocity: [0.5, 0.0], close: false };
        let s2 = step_dynamics(&s1, &[open, Command::default()], &cfg());
        assert_eq!(s2.held_by, None);
        assert_eq!(s2.object, s1.object);
    }

    #[test]
    fn motion_is_clamped_to_reach_and_table() {
        let mut s = free_state();
        s.grippers[0] = [1.05, 0.6];
        let cmds = [Command { velocity: [1.0, 0.0], close: false }, Command::default()];
        let next = step_dynamics(&s, &cmds, &cfg());
        assert!((dist(next.grippers[0], cfg().home(0)) - 1.1).abs() < 1e-12);
        s.grippers[0] = [0.1, 0.02];
        let cmds = [Command { velocity: [0.0, -1.0], close: false }, Command::default()];
        assert_eq!(step_dynamics(&s, &cmds, &cfg()).grippers[0][1], 0.0);
    }

    #[test]
    fn state_vector_roundtrip() {
        let mut s = free_state();
        s.held_by = Some(1);
        s.closed[1] = true;
        assert_eq!(WorldState::from_slice(&s.to_vec()).unwrap(), s);
        assert!(WorldState::from_slice(&[0.0; 3]).is_err());
    }

    #[test]
    fn zero_chunk_rollout_repeats_start() {
        let s = free_state();
        let joint = vec![0.0; cfg().joint_width()];
        // zero grip means open; the start state is open too
        let traj = rollout_chunk(&s, &joint, &cfg()).unwrap();
        assert_eq!(traj.len(), 17);
        assert!(traj.iter().all(|x| *x == s));
    }

    #[test]
    fn straight_line_at_constant_speed() {
        let c = cfg();
        let mut s = free_state();
        s.grippers[0] = [0.1, 0.6];
        let mut joint = vec![0.0; c.joint_width()];
        for k in 0..c.chunk_len {
            joint[k * ACTION_WIDTH] = 0.5;
            joint[k * ACTION_WIDTH + 2] = -1.0;
        }
        let traj = rollout_chunk(&s, &joint, &c).unwrap();
        let end = traj.last().unwrap().grippers[0];
        assert!((dist(end, s.grippers[0]) - c.chunk_len as f64 * c.dt * 0.5 * c.v_max).abs() < 1e-12);
    }

    #[test]
    fn pick_chunk_from_within_grasp_radius_grasps() {
        let c = cfg();
        let mut s = free_state();
        s.grippers[0] = [s.object[0] + 0.03, s.object[1]];
        let chunk = scripted_expert_chunk(&s, 0, Role::Pick, &c).unwrap();
        let mut joint = chunk.clone();
        joint.extend(core::iter::repeat_n(0.0, c.agent_width()));
        let traj = rollout_chunk(&s, &joint, &c).unwrap();
        assert_eq!(traj[1].held_by, Some(0));
    }

    // Cost oracle: recompute every component from an explicit rollout.
    fn oracle_cost(s: &WorldState, joint: &[f64], spec: &CostSpec, c: &EnvConfig) -> CostBreakdown {
        let traj = rollout_chunk(s, joint, c).unwrap();
        let steps = &traj[1..];
        let min_goal = steps.iter().map(|x| x.goal_distance()).fold(f64::INFINITY, f64::min);
        let min_gap = steps.iter().map(|x| x.gripper_distance()).fold(f64::INFINITY, f64::min);
        let d_obj = |i: usize| steps.iter().map(|x| dist(x.grippers[i], x.object)).fold(f64::INFINITY, f64::min);
        let closer = if dist(steps[0].grippers[0], steps[0].object) < dist(steps[0].grippers[1], steps[0].object) { 0 } else { 1 };
        let (goal, collision, engage) = match spec.variant {
            CostVariant::Appendix => (
                (min_goal - spec.goal_threshold).min(0.0),
                (spec.collision_threshold - min_gap).min(0.0),
                (d_obj(closer) - spec.engage_threshold).min(0.0),
            ),
            CostVariant::Penalty => (
                (min_goal - spec.goal_threshold).max(0.0),
                (spec.collision_threshold - min_gap).max(0.0),
                (d_obj(closer) - spec.engage_threshold).max(0.0),
            ),
            CostVariant::MainText => (
                min_goal,
                if min_gap < spec.collision_threshold { 1.0 } else { 0.0 },
                (d_obj(closer) - spec.engage_threshold).min(0.0),
            ),
        };
        CostBreakdown {
            total: spec.goal_weight * goal + spec.collision_weight * collision + spec.engage_weight * engage,
            goal,
            collision,
            engage,
        }
    }

    #[test]
    fn object_at_goal_earns_goal_threshold() {
        let c = cfg();
        let appendix = CostSpec { variant: CostVariant::Appendix, ..CostSpec::default() };
        let mut s = free_state();
        s.object = s.goal;
        let joint = vec![0.0; c.joint_width()];
        let b = evaluate_cost(&s, &joint, &appendix, &c).unwrap();
        assert!((b.goal + 0.01).abs() < 1e-15);
        assert_eq!(evaluate_cost(&s, &joint, &CostSpec::default(), &c).unwrap().goal, 0.0);
    }

    #[test]
    fn far_apart_and_far_from_goal() {
        let c = cfg();
        let appendix = CostSpec { variant: CostVariant::Appendix, ..CostSpec::default() };
        let mut s = free_state();
        s.grippers = [[0.6, 0.6], [1.0, 0.6]];
        s.object = [0.8, 1.15];
        let joint = vec![0.0; c.joint_width()];
        let b = evaluate_cost(&s, &joint, &appendix, &c).unwrap();
        assert_eq!(b.goal, 0.0);
        // grippers 0.40 apart: min{0.30 - 0.40, 0} = -0.10, weighted -1.0
        assert!((b.collision + 0.1).abs() < 1e-12);
        assert!((10.0 * b.collision + 1.0).abs() < 1e-12);
        s.grippers = [[0.8, 0.6], [0.9, 0.6]];
        let b = evaluate_cost(&s, &joint, &appendix, &c).unwrap();
        assert_eq!(b.collision, 0.0);
    }

    #[test]
    fn penalty_variant() {
        let c = cfg();
        let spec = CostSpec::default();
        let mut s = free_state();
        s.grippers = [[0.8, 0.6], [0.9, 0.6]];
        s.object = [0.8, 1.15];
        let joint = vec![0.0; c.joint_width()];
        let b = evaluate_cost(&s, &joint, &spec, &c).unwrap();
        // 0.10 apart: 0.30 - 0.10 = 0.20 of intrusion
        assert!((b.collision - 0.2).abs() < 1e-12);
        assert!((b.goal - (s.goal_distance() - 0.01)).abs() < 1e-12);
        // agent 0 is closer, 0.55 from the object
        assert!((b.engage - 0.35).abs() < 1e-12);
        assert!((b.total - (b.goal + 2.0 + 3.5)).abs() < 1e-12);
    }

    #[test]
    fn main_text_variant() {
        let c = cfg();
        let spec = CostSpec { variant: CostVariant::MainText, ..CostSpec::default() };
        let mut s = free_state();
        s.grippers = [[0.8, 0.6], [0.9, 0.6]];
        let joint = vec![0.0; c.joint_width()];
        let b = evaluate_cost(&s, &joint, &spec, &c).unwrap();
        assert_eq!(b.collision, 1.0);
        assert!((b.goal - s.goal_distance()).abs() < 1e-15);
    }

    #[test]
    fn independent_cost_has_one_group_per_agent() {
        let c = cfg();
        let cost = HandoffCost { spec: CostSpec::default(), env: c.clone(), mode: CostMode::Independent };
        assert_eq!(cost.groups(), 2);
        let s = free_state();
        let joint = vec![0.1; c.joint_width()];
        let mut out = [0.0; 2];
        cost.costs(&s.to_vec(), &joint, &mut out).unwrap();
        assert!(out.iter().all(|v| v.is_finite() && *v >= 0.0));
        // grippers on top of each other cost nothing extra without the collision term
        let mut close = s;
        close.grippers = [[0.9, 0.6], [0.9, 0.6]];
        let hold = vec![0.0; c.joint_width()];
        cost.costs(&close.to_vec(), &hold, &mut out).unwrap();
        let spec = &cost.spec;
        let goal = spec.goal_weight * (close.goal_distance() - spec.goal_threshold);
        let engage = spec.engage_weight * (libm::hypot(0.9 - 0.3, 0.6 - 0.9) - spec.engage_threshold);
        assert!((out[0] - goal - engage).abs() < 1e-12 && (out[1] - out[0]).abs() < 1e-12);
    }

    #[test]
    fn views_mirror_each_other() {
        let c = cfg();
        let s = WorldState {
            grippers: [[0.3, 0.4], [1.5, 0.4]],
            closed: [true, true],
            object: [0.9, 0.8],
            goal: [0.9, 0.2],
            held_by: None,
        };
        let f0 = state_decompose(&s, 0).unwrap().features(&c);
        let f1 = state_decompose(&s, 1).unwrap().features(&c);
        for (a, b) in f0.iter().zip(&f1) {
            assert!((a - b).abs() < 1e-12, "{f0:?} vs {f1:?}");
        }
        assert!(state_decompose(&s, 2).is_err());
    }

    #[test]
    fn yield_from_home_is_stationary() {
        let c = cfg();
        let s = WorldState::at_home(&c, [0.4, 0.4], [1.65, 0.6]);
        for agent in 0..2 {
            let chunk = scripted_expert_chunk(&s, agent, Role::Yield, &c).unwrap();
            for a in chunk.chunks(ACTION_WIDTH) {
                assert!(c.v_max * libm::hypot(a[0], a[1]) < 0.01);
            }
        }
    }

    #[test]
    fn unreachable_object_sends_picker_to_reach_boundary() {
        let c = cfg();
        let mut s = WorldState::at_home(&c, [1.7, 0.6], [1.65, 0.6]);
        s.grippers[0] = [0.5, 0.6];
        let chunk = scripted_expert_chunk(&s, 0, Role::Pick, &c).unwrap();
        let mut joint = chunk;
        joint.extend(core::iter::repeat_n(0.0, c.agent_width()));
        let traj = rollout_chunk(&s, &joint, &c).unwrap();
        let wait = c.project_to_reach(0, s.object, REACH_MARGIN);
        let first = dist(traj[0].grippers[0], wait);
        let end = dist(traj.last().unwrap().grippers[0], wait);
        assert!(end < first && end < 0.01, "{first} -> {end}");
        assert!(traj.iter().all(|x| x.held_by.is_none()));
    }

    #[test]
    fn expert_places_reachable_objects() {
        let c = EnvConfig { reset_probability: 0.0, ..cfg() };
        let mut rng = seeded(1);
        let mut ok = 0;
        for _ in 0..200 {
            let object = c.random_reachable_point(0, &mut rng);
            let goal = c.random_table_point(&mut rng);
            let mut s = WorldState::at_home(&c, object, goal);
            s.grippers[0] = c.random_reachable_point(0, &mut rng);
            for _ in 0..160 {
                let cmd = expert_command(&state_decompose(&s, 0).unwrap(), Role::Pick, &c);
                s = step_dynamics(&s, &[cmd, Command::hold(false)], &c);
            }
            let target = placement_target(&state_decompose(&s, 0).unwrap(), &c);
            if dist(s.object, target) <= 0.02 {
                ok += 1;
            }
        }
        assert!(ok >= 190, "{ok}/200");
    }

    #[test]
    fn reach_disks_force_a_handoff() {
        let c = cfg();
        let goal = [1.65, 0.6];
        // the left spawn region's far corners and the goal are never jointly reachable
        for agent in 0..2 {
            let covers_goal = c.reachable(agent, goal);
            let covers_spawn = [[0.0, 0.0], [0.0, 1.2], [0.9, 0.0], [0.9, 1.2]].iter().all(|p| c.reachable(agent, *p));
            assert!(!(covers_goal && covers_spawn));
        }
    }

    proptest! {
        #[test]
        fn dynamics_invariants(
            seed in 0u64..10_000,
            vx in -2.0f64..2.0, vy in -2.0f64..2.0,
            ux in -2.0f64..2.0, uy in -2.0f64..2.0,
            c0: bool, c1: bool,
        ) {
            let c = cfg();
            let mut rng = seeded(seed);
            let mut s = WorldState::at_home(&c, c.random_table_point(&mut rng), c.random_table_point(&mut rng));
            s.grippers = [c.random_reachable_point(0, &mut rng), c.random_reachable_point(1, &mut rng)];
            let cmds = [Command { velocity: [vx, vy], close: c0 }, Command { velocity: [ux, uy], close: c1 }];
            let a = step_dynamics(&s, &cmds, &c);
            let b = step_dynamics(&s, &cmds, &c);
            prop_assert_eq!(a, b);
            for i in 0..2 {
                prop_assert!(c.reachable(i, a.grippers[i]) || dist(a.grippers[i], c.home(i)) < c.reach_radius + 1e-12);
                prop_assert!(a.grippers[i][0] >= 0.0 && a.grippers[i][0] <= c.table_width);
                prop_assert!(a.grippers[i][1] >= 0.0 && a.grippers[i][1] <= c.table_depth);
            }
            if let Some(h) = a.held_by {
                prop_assert_eq!(a.object, a.grippers[h]);
            }
        }

        #[test]
        fn cost_matches_oracle(seed in 0u64..10_000, variant in 0usize..3) {
            let c = cfg();
            let mut rng = seeded(seed);
            let mut s = WorldState::at_home(&c, c.random_table_point(&mut rng), c.random_table_point(&mut rng));
            s.grippers = [c.random_reachable_point(0, &mut rng), c.random_reachable_point(1, &mut rng)];
            let joint: Vec<f64> = (0..c.joint_width()).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();
            let variant = [CostVariant::Appendix, CostVariant::Penalty, CostVariant::MainText][variant];
            let spec = CostSpec { variant, ..CostSpec::default() };
            let b = evaluate_cost(&s, &joint, &spec, &c).unwrap();
            let o = oracle_cost(&s, &joint, &spec, &c);
            match variant {
                CostVariant::Appendix => prop_assert!(b.goal <= 0.0 && b.collision <= 0.0 && b.engage <= 0.0),
                CostVariant::Penalty => prop_assert!(b.goal >= 0.0 && b.collision >= 0.0 && b.engage >= 0.0),
                CostVariant::MainText => prop_assert!(b.collision == 0.0 || b.collision == 1.0),
            }
            prop_assert!((b.total - o.total).abs() < 1e-12);
            prop_assert!((b.goal - o.goal).abs() < 1e-12);
            prop_assert!((b.collision - o.collision).abs() < 1e-12);
            prop_assert!((b.engage - o.engage).abs() < 1e-12);
        }

        #[test]
        fn view_ignores_other_agent(seed in 0u64..1000, flag: bool, x in 1.0f64..1.8) {
            let c = cfg();
            let mut rng = seeded(seed);
            let mut s = WorldState::at_home(&c, c.random_table_point(&mut rng), c.random_table_point(&mut rng));
            let v = state_decompose(&s, 0).unwrap();
            s.closed[1] = flag;
            s.grippers[1][0] = x;
            prop_assert_eq!(state_decompose(&s, 0).unwrap(), v);
            let mut back = s;
            v.embed(&mut back);
            prop_assert_eq!(back.grippers[0], s.grippers[0]);
            prop_assert_eq!(back.closed[0], s.closed[0]);
        }

        #[test]
        fn action_encoding_roundtrip(vx in -1.0f64..1.0, vy in -1.0f64..1.0, close: bool, agent in 0usize..2) {
            let c = cfg();
            let cmd = Command { velocity: [vx, vy], close };
            let back = decode_action(&encode_command(&cmd, agent, &c), agent, &c);
            prop_assert!((back.velocity[0] - vx).abs() < 1e-12 && (back.velocity[1] - vy).abs() < 1e-12);
            prop_assert_eq!(back.close, close);
        }
    }
}
