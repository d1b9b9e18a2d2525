//! Stages of an experiment and the on-disk layout of their artifacts.
//!
//! Every stage draws from its own generator, `stream_seed(run.seed, stream)`
//! with a fixed per-stage stream id, so stages can be rerun independently.
//! Evaluation episode `i` uses `stream_seed(run.seed, i)`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use codi_core::baselines::{finetune, train_noise_cond_cost, Finetune, NoiseCondCostModel, ResidualScore};
use codi_core::diffusion::ScoreField;
use codi_core::harness::{
    compute_metrics, generate_demos, generate_joint_demos, run_episode, Artifacts, EpisodeResult, Method,
    MethodMetrics, Planner, RunConfig,
};
use codi_core::rng::{seeded, stream_seed};
use codi_core::score_net::{train_dsm, DemoDataset, MlpScoreModel, TrainConfig, Trained};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::persist;

const DEMO_STREAM: u64 = 1 << 40;
const JOINT_DEMO_STREAM: u64 = (1 << 40) + 1;
const POLICY_STREAM: u64 = (1 << 40) + 2;
const JOINT_STREAM: u64 = (1 << 40) + 3;
const COST_STREAM: u64 = (1 << 40) + 4;
const FINETUNE_STREAM: u64 = (1 << 40) + 5;

/// File names inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn demos(&self) -> PathBuf {
        self.dir.join("demos.bin")
    }

    pub fn joint_demos(&self) -> PathBuf {
        self.dir.join("joint-demos.bin")
    }

    pub fn policy(&self) -> PathBuf {
        self.dir.join("policy.ckpt")
    }

    pub fn joint_policy(&self) -> PathBuf {
        self.dir.join("joint-policy.ckpt")
    }

    pub fn cost_model(&self) -> PathBuf {
        self.dir.join("cost-model.ckpt")
    }

    /// Residual network of a fine-tuned joint policy.
    pub fn finetuned(&self, method: Method) -> PathBuf {
        self.dir.join(format!("finetune-{method}.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn traces(&self, row: &str) -> PathBuf {
        self.dir.join(format!("traces-{row}.jsonl"))
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
}

/// Metrics row name of a run: the method, suffixed when guiding with the
/// goal term alone.
pub fn row_name(run: &RunConfig) -> String {
    if run.goal_only_cost && run.method == Method::Codi {
        format!("{}-goal-only", run.method)
    } else {
        run.method.to_string()
    }
}

fn stage_config(cfg: &TrainConfig, run: &RunConfig, stream: u64) -> TrainConfig {
    TrainConfig { seed: stream_seed(run.seed, stream.wrapping_add(cfg.seed << 8)), ..cfg.clone() }
}

/// Single-agent demonstrations in the canonical frame.
pub fn gen_demos(run: &RunConfig) -> Result<DemoDataset> {
    let mut rng = seeded(stream_seed(run.seed, DEMO_STREAM));
    Ok(generate_demos(run.demo_episodes, run.pick_fraction, &run.env, &mut rng)?)
}

/// Coordinated two-arm demonstrations conditioned on the world state.
pub fn gen_joint_demos(run: &RunConfig) -> Result<DemoDataset> {
    let mut rng = seeded(stream_seed(run.seed, JOINT_DEMO_STREAM));
    Ok(generate_joint_demos(run.joint_demo_episodes, &run.env, &mut rng)?)
}

pub fn train_policy(run: &RunConfig, demos: &DemoDataset) -> Result<Trained> {
    Ok(train_dsm(demos, &stage_config(&run.train, run, POLICY_STREAM))?)
}

pub fn train_joint_policy(run: &RunConfig, joint_demos: &DemoDataset) -> Result<Trained> {
    Ok(train_dsm(joint_demos, &stage_config(&run.train, run, JOINT_STREAM))?)
}

pub fn train_cost_model(run: &RunConfig, joint_demos: &DemoDataset) -> Result<(NoiseCondCostModel, Vec<f64>)> {
    let cfg = stage_config(&run.cost_model, run, COST_STREAM);
    Ok(train_noise_cond_cost(joint_demos, &run.joint_cost(), &cfg)?)
}

pub fn finetune_kind(run: &RunConfig) -> Result<Finetune> {
    match run.method {
        Method::Dpmd => Ok(Finetune::Dpmd),
        Method::Sdac => Ok(Finetune::Sdac),
        Method::Expo => Ok(Finetune::Expo(run.edit.clone())),
        m => Err(Error::Config(format!("method `{m}` is not a fine-tuning method"))),
    }
}

/// Fine-tune the joint policy with the method of `run`.
pub fn finetune_joint(run: &RunConfig, joint: Arc<dyn ScoreField>, joint_demos: &DemoDataset) -> Result<ResidualScore> {
    let kind = finetune_kind(run)?;
    let mut rng = seeded(stream_seed(run.seed, FINETUNE_STREAM));
    let (policy, reports) = finetune(joint, joint_demos, &run.joint_cost(), &kind, &run.finetune, &mut rng)?;
    for (i, r) in reports.iter().enumerate() {
        match r.losses.last() {
            Some(l) => log::info!("{} pass {i}: final loss {l:.4}", run.method),
            None => log::info!("{} pass {i}: skipped", run.method),
        }
    }
    Ok(policy)
}

fn load_joint(layout: &Layout) -> Result<Arc<dyn ScoreField>> {
    Ok(Arc::new(persist::load_score_model(&layout.joint_policy())?))
}

/// Load the artifacts `run.method` needs from `layout`.
pub fn load_artifacts(layout: &Layout, method: Method) -> Result<Artifacts> {
    let mut a = Artifacts::default();
    if method.uses_product() {
        a.shared = Some(Arc::new(persist::load_score_model(&layout.policy())?));
    }
    if matches!(method, Method::CgJoint | Method::CgProduct) {
        a.cost_model = Some(Arc::new(persist::load_cost_model(&layout.cost_model())?));
    }
    if method == Method::CgJoint {
        a.joint = Some(load_joint(layout)?);
    }
    if matches!(method, Method::Dpmd | Method::Sdac | Method::Expo) {
        let residual: MlpScoreModel = persist::load_score_model(&layout.finetuned(method))?;
        a.finetuned = Some(Arc::new(ResidualScore::from_parts(load_joint(layout)?, residual)?));
    }
    Ok(a)
}

/// Run `run.episodes` seeded episodes of `run.method`. Episodes are
/// independent, so the parallel and sequential paths give identical results.
pub fn evaluate(run: &RunConfig, artifacts: &Artifacts, parallel: bool) -> Result<(MethodMetrics, Vec<EpisodeResult>)> {
    run.validate()?;
    let planner = Planner::build(run, artifacts)?;
    let results: Vec<EpisodeResult> = if parallel {
        (0..run.episodes).into_par_iter().map(|i| run_episode(&planner, run, i)).collect()
    } else {
        (0..run.episodes).map(|i| run_episode(&planner, run, i)).collect()
    };
    for (i, r) in results.iter().enumerate() {
        if let Some(e) = &r.error {
            log::warn!("episode {i} aborted: {e}");
        }
    }
    Ok((compute_metrics(&row_name(run), &results)?, results))
}

/// Artifacts a training stage produces for `method`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub policy: bool,
    pub joint: bool,
    pub cost_model: bool,
}

impl Needs {
    pub const ALL: Needs = Needs { policy: true, joint: true, cost_model: true };

    pub fn of(method: Method) -> Self {
        Needs {
            policy: method.uses_product(),
            joint: method.uses_joint() && method != Method::CgProduct,
            cost_model: matches!(method, Method::CgJoint | Method::CgProduct),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))
}

/// Generate both demonstration sets into `layout`.
pub fn gen_demos_stage(run: &RunConfig, layout: &Layout) -> Result<(usize, usize)> {
    ensure_dir(&layout.dir)?;
    let single = gen_demos(run)?;
    persist::save_dataset(&layout.demos(), &single)?;
    let joint = gen_joint_demos(run)?;
    persist::save_dataset(&layout.joint_demos(), &joint)?;
    Ok((single.len(), joint.len()))
}

/// Train the networks listed in `needs` from the saved demonstrations.
pub fn train_stage(run: &RunConfig, layout: &Layout, needs: Needs) -> Result<()> {
    run.validate()?;
    if needs.policy {
        let demos = persist::load_dataset(&layout.demos())?;
        let t = train_policy(run, &demos)?;
        log::info!("policy: final loss {:.4}", t.losses.last().copied().unwrap_or(f64::NAN));
        persist::save_score_model(&layout.policy(), &t.model)?;
    }
    if needs.joint || needs.cost_model {
        let joint = persist::load_dataset(&layout.joint_demos())?;
        if needs.joint {
            let t = train_joint_policy(run, &joint)?;
            log::info!("joint policy: final loss {:.4}", t.losses.last().copied().unwrap_or(f64::NAN));
            persist::save_score_model(&layout.joint_policy(), &t.model)?;
        }
        if needs.cost_model {
            let (m, losses) = train_cost_model(run, &joint)?;
            log::info!("cost model: final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
            persist::save_cost_model(&layout.cost_model(), &m)?;
        }
    }
    Ok(())
}

/// Fine-tune the saved joint policy with `run.method`.
pub fn finetune_stage(run: &RunConfig, layout: &Layout) -> Result<()> {
    run.validate()?;
    finetune_kind(run)?;
    let joint = load_joint(layout)?;
    let data = persist::load_dataset(&layout.joint_demos())?;
    let policy = finetune_joint(run, joint, &data)?;
    persist::save_score_model(&layout.finetuned(run.method), policy.residual())
}
