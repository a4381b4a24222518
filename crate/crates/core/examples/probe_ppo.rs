use std::sync::Arc;
use std::time::Instant;
use junction_core::expert::*;
use junction_core::sim::*;
use junction_core::MetaAction;
use rand::{Rng, SeedableRng};

fn eval_policy(nets: Option<&ExpertNets>, scenario: &Arc<IntersectionScenario>, env_cfg: &EnvConfig, task: TaskId, episodes: usize, seed: u64) -> (f64, f64, f64) {
    let mut ok = 0; let mut crash = 0; let mut timeout = 0;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5555);
    for ep in 0..episodes {
        let mut env = Env::new(scenario.clone(), env_cfg.clone(), task, junction_core::seeding::derive_seed(seed, "eval", ep as u64));
        let mut obs = env.observe_ego().unwrap();
        while !env.terminated() {
            let a = match nets {
                Some(n) => {
                    let (dist, _) = n.policy_forward(&obs).unwrap();
                    dist.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
                }
                None => rng.gen_range(0..3),
            };
            let out = env.step(MetaAction::from_index(a).unwrap()).unwrap();
            obs = out.obs;
        }
        match env.cause() { Cause::Arrived => ok += 1, Cause::Collided => crash += 1, _ => timeout += 1 }
    }
    (ok as f64 / episodes as f64, crash as f64 / episodes as f64, timeout as f64 / episodes as f64)
}

fn main() {
    let scenario = Arc::new(build_scenario(&ScenarioConfig::default()).unwrap());
    let env_cfg = EnvConfig {
        traffic: TrafficConfig { n_min: 2, n_max: 5, ..TrafficConfig::default() },
        ..EnvConfig::default()
    };
    let cfg = ExpertConfig { total_steps: 60_000, ..ExpertConfig::default() };
    for task in [TaskId::TurnLeft, TaskId::GoStraight, TaskId::TurnRight] {
        let (rs, rc, rt) = eval_policy(None, &scenario, &env_cfg, task, 100, 777);
        let t0 = Instant::now();
        let trained = train_expert(scenario.clone(), &env_cfg, task, &cfg, 11, None, None).unwrap();
        let (s, c, t) = eval_policy(Some(&trained.nets), &scenario, &env_cfg, task, 100, 777);
        println!("{:?}: random {:.0}/{:.0}/{:.0}  trained {:.0}/{:.0}/{:.0}  best-roll {:.2}  {:.0?}",
            task, rs*100.0, rc*100.0, rt*100.0, s*100.0, c*100.0, t*100.0, trained.stats.best_success, t0.elapsed());
    }
}
