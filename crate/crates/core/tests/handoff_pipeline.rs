use std::sync::Arc;

use codi_core::baselines::{finetune, train_noise_cond_cost, Finetune, FinetuneConfig, NoiseCondCost};
use codi_core::composition::{codi_sample, FnCost, GuidanceConfig, ProductPolicy, SharedView};
use codi_core::diffusion::{Gmm, GmmScore, NoiseSchedule, ScoreField};
use codi_core::env::{EnvConfig, WorldState};
use codi_core::harness::{
    compute_metrics, generate_demos, generate_joint_demos, replay, run_episode, Artifacts, Method, Planner, RunConfig,
};
use codi_core::rng::seeded;
use codi_core::score_net::{train_dsm, TrainConfig};
use codi_core::stats;

fn tiny_train(schedule: NoiseSchedule) -> TrainConfig {
    TrainConfig { step_count: 150, batch_size: 64, hidden_width: 32, hidden_layers: 2, schedule, ..TrainConfig::default() }
}

fn quick_run() -> RunConfig {
    let base = RunConfig::default();
    RunConfig {
        episodes: 3,
        max_steps: 40,
        sample_steps: 10,
        guidance: GuidanceConfig { mc_samples: 16, ..base.guidance.clone() },
        ..base
    }
}

#[test]
fn learned_policies_drive_every_method() {
    let run = quick_run();
    let env = EnvConfig::default();
    let demos = generate_demos(40, 0.5, &env, &mut seeded(1)).unwrap();
    let joint_demos = generate_joint_demos(10, &env, &mut seeded(2)).unwrap();
    let shared = train_dsm(&demos, &tiny_train(run.train.schedule)).unwrap().model;
    let joint: Arc<dyn ScoreField> = Arc::new(train_dsm(&joint_demos, &tiny_train(run.train.schedule)).unwrap().model);
    let (cost_model, losses) = train_noise_cond_cost(&joint_demos, &run.joint_cost(), &tiny_train(run.train.schedule)).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    let ft = FinetuneConfig {
        iterations: 1,
        states_per_iteration: 2,
        rollouts_per_state: 2,
        inner: TrainConfig { step_count: 5, ..tiny_train(run.train.schedule.with_steps(8)) },
        ..FinetuneConfig::default()
    };
    let (finetuned, _) = finetune(joint.clone(), &joint_demos, &run.joint_cost(), &Finetune::Dpmd, &ft, &mut seeded(3)).unwrap();
    let cost_model: Arc<dyn NoiseCondCost + Send + Sync> = Arc::new(cost_model);
    let artifacts = Artifacts {
        shared: Some(Arc::new(shared)),
        joint: Some(joint),
        cost_model: Some(cost_model),
        finetuned: Some(Arc::new(finetuned)),
    };
    for method in Method::ALL {
        let run = RunConfig { method, ..run.clone() };
        let planner = Planner::build(&run, &artifacts).unwrap();
        let results: Vec<_> = (0..run.episodes).map(|i| run_episode(&planner, &run, i)).collect();
        for r in &results {
            assert!(r.error.is_none(), "{method}: {:?}", r.error);
            assert_eq!(replay(r, &run.env).unwrap(), *r.trace.last().unwrap());
            assert!(r.completion_time <= run.max_steps as f64 * run.env.dt);
        }
        let m = compute_metrics(method.name(), &results).unwrap();
        assert!((0.0..=1.0).contains(&m.success_rate));
    }
}

#[test]
fn missing_artifacts_name_the_method() {
    let run = RunConfig { method: Method::CgJoint, ..quick_run() };
    let Err(err) = Planner::build(&run, &Artifacts::default()) else { panic!("planner built without artifacts") };
    let err = err.to_string();
    assert!(err.contains("cg-joint"), "{err}");
}

#[test]
fn coupling_cost_pulls_two_agents_together() {
    let left: Arc<dyn ScoreField> = Arc::new(GmmScore(Gmm::gaussian(vec![-1.0], vec![0.25]).unwrap()));
    let right: Arc<dyn ScoreField> = Arc::new(GmmScore(Gmm::gaussian(vec![1.0], vec![0.25]).unwrap()));
    let policy = ProductPolicy::new(vec![left, right], Arc::new(SharedView(2))).unwrap();
    let cost = FnCost(|_: &[f64], a: &[f64]| (a[0] - a[1]).powi(2));
    let schedule = NoiseSchedule::for_data_std(1.0).with_steps(50);
    let gap = |enabled: bool| {
        let cfg = GuidanceConfig { lambda: 0.5, mc_samples: 32, enabled, full_covariance: true };
        let mut rng = seeded(4);
        let gaps: Vec<f64> = (0..1500)
            .map(|_| {
                let a = codi_sample(&policy, &[], &cfg, &cost, &schedule, &mut rng).unwrap();
                a[1] - a[0]
            })
            .collect();
        stats::mean(&gaps)
    };
    // gap prior N(2, 0.5); exact tilted mean 2·2 / (2 + 2/λ) = 2/3
    let (free, guided) = (gap(false), gap(true));
    assert!((free - 2.0).abs() < 0.1, "{free}");
    assert!((guided - 2.0 / 3.0).abs() < 0.15, "{guided}");
}

#[test]
fn world_state_vector_roundtrip_through_planner_input() {
    let env = EnvConfig::default();
    let s = WorldState::at_home(&env, [0.4, 0.3], [1.65, 0.6]);
    assert_eq!(WorldState::from_slice(&s.to_vec()).unwrap(), s);
}
