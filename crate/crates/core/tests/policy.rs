use gmmq::envs::{EnvName, EnvSpec, EnvState, StartMode};
use gmmq::model_io;
use gmmq::policy_iter::{q_eval, run, run_with, GreedyPolicy, PiConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(name: EnvName, seed: u64) -> PiConfig {
    let mut cfg = PiConfig::defaults_for(name);
    cfg.k = cfg.k.min(6);
    cfg.trials = 3;
    cfg.rollout.episodes = 4;
    cfg.rollout.steps_per_episode = 20;
    cfg.armijo.j_steps = 5;
    cfg.eval.step_cap = 50;
    cfg.seed = seed;
    cfg
}

#[test]
fn each_trial_uses_a_fresh_batch_and_warm_starts_from_the_last_model() {
    for name in [EnvName::Pendulum, EnvName::MountainCar, EnvName::Acrobot] {
        let cfg = small(name, 3);
        let mut previous: Option<gmmq::GmmQf> = None;
        let mut tags = Vec::new();
        let out = run_with(&cfg, |ev| {
            tags.push(ev.batch.tag());
            assert_eq!(ev.batch.len(), cfg.rollout.rows());
            if let Some(prev) = &previous {
                assert_eq!(ev.warm_start, prev);
            }
            assert_eq!(ev.trace.final_loss, ev.log.final_loss);
            previous = Some(ev.model.clone());
        })
        .unwrap();
        assert_eq!(tags, vec![1, 2, 3]);
        assert_eq!(Some(out.model), previous);
    }
}

#[test]
fn runs_are_reproducible_from_the_seed() {
    let strip = |mut logs: Vec<gmmq::policy_iter::TrialLog>| {
        logs.iter_mut().for_each(|l| l.wall_time_ms = 0.0);
        logs
    };
    let a = strip(run(&small(EnvName::Pendulum, 7)).unwrap());
    let b = strip(run(&small(EnvName::Pendulum, 7)).unwrap());
    assert_eq!(a, b);
    let c = strip(run(&small(EnvName::Pendulum, 8)).unwrap());
    assert_ne!(
        a.iter().map(|l| l.final_loss).collect::<Vec<_>>(),
        c.iter().map(|l| l.final_loss).collect::<Vec<_>>()
    );
}

#[test]
fn saved_models_evaluate_identically() {
    let dir = tempfile::tempdir().unwrap();
    for name in [EnvName::Pendulum, EnvName::Acrobot] {
        let cfg = small(name, 1);
        let model = run_with(&cfg, |_| {}).unwrap().model;
        let path = dir.path().join(format!("{}.json", name.as_str()));
        model_io::save(&model, &path).unwrap();
        let loaded = model_io::load(&path).unwrap();
        let env = EnvSpec::preset(name);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let s = env.sample_initial_state(&mut rng, StartMode::Train);
            let a = rng.gen_range(0..env.n_actions());
            let (q1, q2) = (
                q_eval(&model, &env, &s, a).unwrap(),
                q_eval(&loaded, &env, &s, a).unwrap(),
            );
            assert!((q1 - q2).abs() <= 1e-15 * q1.abs().max(1.0));
        }
        let s = EnvState::new(
            env.state_bounds
                .iter()
                .map(|b| 0.5 * (b[0] + b[1]))
                .collect(),
        );
        assert_eq!(
            GreedyPolicy::new(&model, &env).greedy_action(&s),
            GreedyPolicy::new(&loaded, &env).greedy_action(&s)
        );
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small(EnvName::Pendulum, 0);
    cfg.discount = 1.0;
    assert!(run(&cfg).is_err());
    let mut cfg = small(EnvName::Pendulum, 0);
    cfg.k = cfg.rollout.rows() + 1;
    assert!(run(&cfg).is_err());
}
