//! Rollout/update loop for one single-task expert.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use thiserror::Error;

use super::net::{ExpertNets, NetError};
use super::ppo::{gae_advantages, normalize_advantages, ppo_loss, PpoBatch, PpoError};
use super::ExpertConfig;
use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::kinematics::MetaAction;
use crate::optim::{adam_step, AdamState, OptimError};
use crate::params::GradBuffer;
use crate::seeding::derive_seed;
use crate::sim::{Cause, Env, EnvConfig, IntersectionScenario, ObservationMatrix, SimError, TaskId};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("environment fault at seed {seed}, env step {step}: {source}")]
    Env { seed: u64, step: usize, source: SimError },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct IterationLog {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExpertStats {
    pub episodes: usize,
    pub best_success: f64,
}

pub struct TrainedExpert {
    pub nets: ExpertNets,
    pub curve: Vec<IterationLog>,
    pub stats: ExpertStats,
}

const SUCCESS_WINDOW: usize = 20;
const CHECKPOINT_PREFIX: &str = "expert";

/// Persist expert parameters (with the task baked into the metadata).
pub fn save_expert(nets: &ExpertNets, task: TaskId, path: &Path) -> Result<(), CheckpointError> {
    let mut ck = Checkpoint::new();
    ck.insert_params(CHECKPOINT_PREFIX, &nets.params);
    ck.insert("meta/expert", 1, 2, vec![1.0, task.index() as f64]);
    ck.save(path)
}

/// Load an expert checkpoint written by [`save_expert`].
pub fn load_expert(path: &Path) -> Result<(ExpertNets, TaskId), TrainerError> {
    let ck = Checkpoint::load(path)?;
    let meta = ck.require("meta/expert")?;
    let task = TaskId::ALL[meta.2[1] as usize];
    let mut nets = ExpertNets::layout()?;
    ck.load_params(CHECKPOINT_PREFIX, &mut nets.params)?;
    Ok((nets, task))
}

struct Rollout {
    obs: Vec<ObservationMatrix>,
    actions: Vec<usize>,
    logp: Vec<f64>,
    rewards: Vec<f64>,
    terminals: Vec<bool>,
    values: Vec<f64>,
}

impl Rollout {
    fn with_capacity(n: usize) -> Self {
        Self {
            obs: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            logp: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            terminals: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
        }
    }

    fn clear(&mut self) {
        self.obs.clear();
        self.actions.clear();
        self.logp.clear();
        self.rewards.clear();
        self.terminals.clear();
        self.values.clear();
    }

    fn len(&self) -> usize {
        self.actions.len()
    }
}

fn sample_action(dist: &[f64; 3], rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    2
}

fn argmax(dist: &[f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if dist[i] > dist[best] {
            best = i;
        }
    }
    best
}

/// Train one expert on its task. Deterministic in (scenario, configs, seed).
pub fn train_expert(
    scenario: Arc<IntersectionScenario>,
    env_cfg: &EnvConfig,
    task: TaskId,
    cfg: &ExpertConfig,
    seed: u64,
    log_csv: Option<&Path>,
    checkpoint_best: Option<&Path>,
) -> Result<TrainedExpert, TrainerError> {
    let mut nets = ExpertNets::init(derive_seed(seed, "expert-init", task.index() as u64))?;
    let mut adam = AdamState::new(&nets.params, cfg.lr);
    let mut grads = GradBuffer::zeros_like(&nets.params);
    let mut action_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "expert-actions", 0));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "expert-shuffle", 0));

    let mut episode_counter: u64 = 0;
    let mut env_seed = derive_seed(seed, "expert-env", episode_counter);
    let mut env = Env::new(scenario.clone(), env_cfg.clone(), task, env_seed);
    let env_fault = |seed: u64, step: usize| move |source: SimError| TrainerError::Env { seed, step, source };
    let mut obs = env.observe_ego().map_err(env_fault(env_seed, 0))?;

    let mut window: VecDeque<(bool, f64)> = VecDeque::with_capacity(SUCCESS_WINDOW);
    let mut episode_return = 0.0;
    let mut env_steps = 0usize;
    let mut iteration = 0usize;
    let mut curve = Vec::new();
    let mut stats = ExpertStats::default();
    let mut best_params = nets.params.clone();
    let mut rollout = Rollout::with_capacity(cfg.rollout_len);

    while env_steps < cfg.total_steps {
        rollout.clear();
        let mut completed_returns = Vec::new();
        for _ in 0..cfg.rollout_len {
            let (dist, value) = nets.policy_forward(&obs)?;
            let action = if cfg.sample_actions {
                sample_action(&dist, &mut action_rng)
            } else {
                argmax(&dist)
            };
            let out = env.step(MetaAction::from_index(action).unwrap())
                .map_err(env_fault(env_seed, env_steps))?;
            rollout.obs.push(obs.clone());
            rollout.actions.push(action);
            rollout.logp.push(dist[action].max(1e-300).ln());
            rollout.rewards.push(out.reward);
            rollout.terminals.push(out.terminated);
            rollout.values.push(value);
            env_steps += 1;
            episode_return += out.reward;

            if out.terminated {
                if window.len() == SUCCESS_WINDOW {
                    window.pop_front();
                }
                window.push_back((out.cause == Cause::Arrived, episode_return));
                completed_returns.push(episode_return);
                stats.episodes += 1;
                episode_return = 0.0;
                episode_counter += 1;
                env_seed = derive_seed(seed, "expert-env", episode_counter);
                env = Env::new(scenario.clone(), env_cfg.clone(), task, env_seed);
                obs = env.observe_ego().map_err(env_fault(env_seed, env_steps))?;
            } else {
                obs = out.obs;
            }
        }

        let bootstrap = if *rollout.terminals.last().unwrap() {
            0.0
        } else {
            nets.policy_forward(&obs)?.1
        };
        let (mut advantages, returns) = gae_advantages(
            &rollout.rewards,
            &rollout.values,
            &rollout.terminals,
            bootstrap,
            cfg.gamma,
            cfg.gae_lambda,
        )?;
        normalize_advantages(&mut advantages);

        let mut loss_sums = (0.0, 0.0, 0.0);
        let mut updates = 0usize;
        let mut indices: Vec<usize> = (0..rollout.len()).collect();
        for _ in 0..cfg.epochs {
            indices.shuffle(&mut shuffle_rng);
            for chunk in indices.chunks(cfg.minibatch) {
                let batch_obs: Vec<&ObservationMatrix> = chunk.iter().map(|&i| &rollout.obs[i]).collect();
                let actions: Vec<usize> = chunk.iter().map(|&i| rollout.actions[i]).collect();
                let old_logp: Vec<f64> = chunk.iter().map(|&i| rollout.logp[i]).collect();
                let adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
                let ret: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
                let mut tape = Tape::new();
                let (loss, parts) = ppo_loss(
                    &mut tape,
                    &nets,
                    &PpoBatch {
                        obs: batch_obs,
                        actions: &actions,
                        old_logp: &old_logp,
                        advantages: &adv,
                        returns: &ret,
                    },
                    cfg.clip_eps,
                    cfg.vf_coef,
                    cfg.ent_coef,
                )?;
                tape.backward(loss).map_err(PpoError::from)?;
                grads.reset();
                tape.accumulate_param_grads(&mut grads, 1.0);
                grads.clip_global_norm(cfg.grad_clip);
                adam_step(&mut nets.params, &grads, &mut adam)?;
                loss_sums.0 += parts.surrogate;
                loss_sums.1 += parts.value;
                loss_sums.2 += parts.entropy;
                updates += 1;
            }
        }

        iteration += 1;
        let success_rate = if window.is_empty() {
            0.0
        } else {
            window.iter().filter(|(s, _)| *s).count() as f64 / window.len() as f64
        };
        let mean_return = if completed_returns.is_empty() {
            window.iter().map(|(_, r)| r).sum::<f64>() / window.len().max(1) as f64
        } else {
            completed_returns.iter().sum::<f64>() / completed_returns.len() as f64
        };
        curve.push(IterationLog {
            iteration,
            env_steps,
            mean_return,
            success_rate,
            policy_loss: loss_sums.0 / updates.max(1) as f64,
            value_loss: loss_sums.1 / updates.max(1) as f64,
            entropy: loss_sums.2 / updates.max(1) as f64,
        });
        if success_rate >= stats.best_success && window.len() >= SUCCESS_WINDOW.min(10) {
            stats.best_success = success_rate;
            best_params = nets.params.clone();
        }
    }

    if stats.best_success <= 0.0 {
        best_params = nets.params.clone();
    }
    let best = ExpertNets::with_params(best_params)?;

    if let Some(path) = log_csv {
        write_log_csv(path, &curve).map_err(|source| TrainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    if let Some(path) = checkpoint_best {
        save_expert(&best, task, path)?;
    }
    Ok(TrainedExpert { nets: best, curve, stats })
}

fn write_log_csv(path: &Path, curve: &[IterationLog]) -> std::io::Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,env_steps,mean_return,success_rate,policy_loss,value_loss,entropy")?;
    for row in curve {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            row.iteration,
            row.env_steps,
            row.mean_return,
            row.success_rate,
            row.policy_loss,
            row.value_loss,
            row.entropy
        )?;
    }
    w.flush()
}
