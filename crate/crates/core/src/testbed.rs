//! Synthetic point-mass testbed: an environment, an analytic expert and a
//! family of candidate PD policies standing in for a hyperparameter sweep.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{standardize_state, DemoSet, EnvMeta, Episode, EvalBundle, Split};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_CONFIGS: usize = 100;
pub const DEFAULT_SEEDS: usize = 5;
pub const DEFAULT_CHECKPOINTS: usize = 20;
pub const DEFAULT_ROLLOUTS: usize = 50;
pub const DEFAULT_DEMOS: usize = 16;
pub const RANDOM_EPISODES: usize = 100;

/// Gains of the untrained policy at the start of every run.
const INIT_GAINS: (f64, f64) = (0.1, 0.1);
/// Largest distance between the untrained policy's aim point and the goal.
const INIT_AIM_RADIUS: f64 = 1.5;

/// 2-D point mass driven by clipped accelerations toward a goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMassEnv {
    pub env_id: String,
    pub goal: [f64; 2],
    pub dt: f64,
    pub horizon: usize,
    pub init_pos_std: f64,
    /// Multiplies every action; variants with different gains share the
    /// candidate family but not necessarily its optimum.
    pub actuator_gain: f64,
}

impl Default for PointMassEnv {
    fn default() -> Self {
        PointMassEnv {
            env_id: "pointmass".into(),
            goal: [1.0, 1.0],
            dt: 0.05,
            horizon: 100,
            init_pos_std: 0.5,
            actuator_gain: 1.0,
        }
    }
}

pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

impl PointMassEnv {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || !(self.dt > 0.0) || !(self.init_pos_std >= 0.0) || !(self.actuator_gain > 0.0) {
            return Err(Error::Invalid(format!("bad environment parameters {self:?}")));
        }
        Ok(())
    }

    pub fn initial_state<R: Rng>(&self, r: &mut R) -> [f64; 4] {
        let n = Normal::new(0.0, self.init_pos_std).expect("validated std");
        [n.sample(r), n.sample(r), 0.0, 0.0]
    }

    /// One semi-implicit Euler step; returns the next state and the reward
    /// at that state.
    pub fn step(&self, s: &[f64; 4], action: [f64; 2]) -> ([f64; 4], f64) {
        let mut next = *s;
        for i in 0..2 {
            let a = action[i].clamp(-1.0, 1.0) * self.actuator_gain;
            next[2 + i] = s[2 + i] + a * self.dt;
            next[i] = s[i] + next[2 + i] * self.dt;
        }
        (next, -self.distance_to_goal(&next))
    }

    pub fn distance_to_goal(&self, s: &[f64; 4]) -> f64 {
        ((s[0] - self.goal[0]).powi(2) + (s[1] - self.goal[1]).powi(2)).sqrt()
    }

    /// Roll out `policy` for a full horizon. States are the ones observed
    /// before each action; actions are stored clipped.
    pub fn rollout<R, P>(&self, episode_id: u64, r: &mut R, mut policy: P) -> Episode
    where
        R: Rng,
        P: FnMut(&[f64; 4], &mut R) -> [f64; 2],
    {
        let mut s = self.initial_state(r);
        let mut states = Vec::with_capacity(self.horizon);
        let mut actions = Vec::with_capacity(self.horizon);
        let mut rewards = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            let a = policy(&s, r).map(|x| x.clamp(-1.0, 1.0));
            let (next, rew) = self.step(&s, a);
            states.push(s.to_vec());
            actions.push(a.to_vec());
            rewards.push(rew);
            s = next;
        }
        Episode {
            episode_id,
            states,
            actions,
            env_rewards: Some(rewards),
        }
    }

    /// Critically damped PD gains compensating the actuator gain.
    pub fn expert_gains(&self) -> (f64, f64) {
        (9.0 / self.actuator_gain, 6.0 / self.actuator_gain)
    }

    pub fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-1.0; ACTION_DIM], vec![1.0; ACTION_DIM])
    }
}

/// PD control toward `goal + bias`, before clipping.
pub fn pd_action(env: &PointMassEnv, s: &[f64; 4], kp: f64, kd: f64, bias: [f64; 2]) -> [f64; 2] {
    [0, 1].map(|i| kp * (env.goal[i] + bias[i] - s[i]) - kd * s[2 + i])
}

/// One hyperparameter configuration of the synthetic learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub config_id: u32,
    /// Gains reached at the end of training, before per-seed jitter.
    pub gains: (f64, f64),
    pub noise_std: f64,
    /// Fraction of the remaining gap closed per checkpoint.
    pub learning_rate_proxy: f64,
    /// Target offset the controller converges to.
    pub bias: [f64; 2],
}

fn log_uniform<R: Rng>(r: &mut R, lo: f64, hi: f64) -> f64 {
    r.gen_range(lo.ln()..hi.ln()).exp()
}

impl CandidateConfig {
    /// Config `config_id` of the sweep. The draw depends only on the seed
    /// and id, so every environment variant sees the same sweep.
    pub fn sample(config_id: u32, seed: u64) -> Self {
        let mut r = rng::substream(seed, "testbed-config", &[config_id as u64]);
        let bias = Normal::new(0.0, 0.1).unwrap();
        CandidateConfig {
            config_id,
            gains: {
                let kp = log_uniform(&mut r, 0.3, 30.0);
                // damping ratio within 50% of critical
                (kp, 2.0 * kp.sqrt() * r.gen_range(-0.4f64..0.4).exp())
            },
            noise_std: r.gen_range(0.0..0.5),
            learning_rate_proxy: log_uniform(&mut r, 0.03, 0.5),
            bias: [bias.sample(&mut r), bias.sample(&mut r)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gains.0 > 0.0
            && self.gains.1 > 0.0
            && self.noise_std >= 0.0
            && self.learning_rate_proxy > 0.0
            && self.learning_rate_proxy <= 1.0;
        if !ok {
            return Err(Error::Invalid(format!("bad candidate config {self:?}")));
        }
        Ok(())
    }

    /// Training progress in (0, 1] after `checkpoint`, increasing.
    pub fn progress(&self, checkpoint: u32) -> f64 {
        1.0 - (1.0 - self.learning_rate_proxy).powi(checkpoint as i32 + 1)
    }

    /// Deterministic policy parameters of one (seed, checkpoint) agent.
    pub fn policy(&self, seed: u32, checkpoint: u32, sweep_seed: u64) -> PolicyParams {
        let mut r = rng::substream(sweep_seed, "testbed-jitter", &[self.config_id as u64, seed as u64]);
        let jitter = Normal::new(0.0f64, 0.1).unwrap();
        let kp_end = self.gains.0 * jitter.sample(&mut r).exp();
        let kd_end = self.gains.1 * jitter.sample(&mut r).exp();
        let radius = r.gen_range(0.0..INIT_AIM_RADIUS);
        let angle = r.gen_range(0.0..std::f64::consts::TAU);
        let init_bias = [radius * angle.cos(), radius * angle.sin()];
        let a = self.progress(checkpoint);
        // geometric interpolation from the untrained gains
        PolicyParams {
            kp: INIT_GAINS.0.powf(1.0 - a) * kp_end.powf(a),
            kd: INIT_GAINS.1.powf(1.0 - a) * kd_end.powf(a),
            bias: [0, 1].map(|i| self.bias[i] + (1.0 - a) * init_bias[i]),
            noise_std: self.noise_std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyParams {
    pub kp: f64,
    pub kd: f64,
    pub bias: [f64; 2],
    pub noise_std: f64,
}

impl PolicyParams {
    pub fn expert(env: &PointMassEnv) -> Self {
        let (kp, kd) = env.expert_gains();
        PolicyParams {
            kp,
            kd,
            bias: [0.0; 2],
            noise_std: 0.0,
        }
    }

    pub fn mean_action(&self, env: &PointMassEnv, s: &[f64; 4]) -> [f64; 2] {
        pd_action(env, s, self.kp, self.kd, self.bias).map(|x| x.clamp(-1.0, 1.0))
    }

    pub fn act<R: Rng>(&self, env: &PointMassEnv, s: &[f64; 4], r: &mut R) -> [f64; 2] {
        let mut a = pd_action(env, s, self.kp, self.kd, self.bias);
        if self.noise_std > 0.0 {
            let n = Normal::new(0.0, self.noise_std).unwrap();
            for x in &mut a {
                *x += n.sample(r);
            }
        }
        a
    }
}

fn env_label(env: &PointMassEnv, what: &str) -> String {
    format!("testbed-{what}/{}", env.env_id)
}

/// Expert demonstrations from seeded initial states.
pub fn gen_demos(env: &PointMassEnv, n_episodes: usize, seed: u64) -> Result<Vec<Episode>> {
    env.validate()?;
    if n_episodes == 0 {
        return Err(Error::Invalid("need at least one demo episode".into()));
    }
    let expert = PolicyParams::expert(env);
    let label = env_label(env, "demo");
    Ok((0..n_episodes)
        .map(|i| {
            let mut r = rng::substream(seed, &label, &[i as u64]);
            env.rollout(i as u64, &mut r, |s, r| expert.act(env, s, r))
        })
        .collect())
}

pub fn random_episodes(env: &PointMassEnv, n_episodes: usize, seed: u64) -> Vec<Episode> {
    let label = env_label(env, "random");
    (0..n_episodes)
        .map(|i| {
            let mut r = rng::substream(seed, &label, &[i as u64]);
            env.rollout(i as u64, &mut r, |_, r| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
        })
        .collect()
}

fn mean_return(eps: &[Episode]) -> f64 {
    eps.iter().map(|e| e.total_reward().unwrap_or(0.0)).sum::<f64>() / eps.len() as f64
}

/// Normalization anchors: random-action return over 100 episodes and the
/// mean demo return.
pub fn env_meta(env: &PointMassEnv, demos: &[Episode], seed: u64) -> Result<EnvMeta> {
    if demos.is_empty() {
        return Err(Error::Invalid("no demos".into()));
    }
    let (low, high) = env.action_bounds();
    EnvMeta::new(
        env.env_id.clone(),
        OBS_DIM,
        low,
        high,
        mean_return(&random_episodes(env, RANDOM_EPISODES, seed)),
        mean_return(demos),
    )
}

fn as_state(s: &[f64]) -> [f64; 4] {
    [s[0], s[1], s[2], s[3]]
}

/// Stand-in for a learned reward: negative standardized distance to the
/// nearest train demo state, with a scale that drifts across configs and
/// checkpoints the way learned rewards do.
fn imitation_rewards(ep: &Episode, demo_std: &[[f64; 4]], demos: &DemoSet, scale: f64) -> Result<Vec<f64>> {
    ep.step_states()
        .iter()
        .map(|s| {
            let x = standardize_state(s, &demos.norm_stats)?;
            let d2 = demo_std
                .iter()
                .map(|y| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            Ok(-scale * d2.sqrt())
        })
        .collect()
}

fn standardized_train_states(demos: &DemoSet) -> Result<Vec<[f64; 4]>> {
    demos
        .states(Split::Train)
        .into_iter()
        .map(|s| standardize_state(s, &demos.norm_stats).map(|v| as_state(&v)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleParams {
    pub rollouts: usize,
    /// Sweep seed: the candidate family and all rollout noise derive from it.
    pub seed: u64,
}

/// Evaluation bundle of one (config, seed, checkpoint) agent. `demos` must
/// be the split used for that training seed.
pub fn gen_bundle(
    env: &PointMassEnv,
    config: &CandidateConfig,
    demos: &DemoSet,
    seed: u32,
    checkpoint: u32,
    params: &BundleParams,
) -> Result<EvalBundle> {
    config.validate()?;
    let policy = config.policy(seed, checkpoint, params.seed);
    let key = [config.config_id as u64, seed as u64, checkpoint as u64];
    let mut r = rng::substream(params.seed, &env_label(env, "rollout"), &key);
    let rollouts: Vec<Episode> = (0..params.rollouts)
        .map(|i| env.rollout(i as u64, &mut r, |s, r| policy.act(env, s, r)))
        .collect();
    let scale = rng::substream(params.seed, &env_label(env, "reward-scale"), &key).gen_range(-1.0f64..1.0).exp();
    let demo_std = standardized_train_states(demos)?;
    let imit = rollouts
        .iter()
        .map(|ep| imitation_rewards(ep, &demo_std, demos, scale))
        .collect::<Result<Vec<_>>>()?;
    let probe = |split: Split| -> Vec<Vec<f64>> {
        demos
            .states(split)
            .into_iter()
            .map(|s| policy.mean_action(env, &as_state(s)).to_vec())
            .collect()
    };
    Ok(EvalBundle {
        config_id: config.config_id,
        seed,
        checkpoint,
        probe_actions_train: probe(Split::Train),
        probe_actions_valid: probe(Split::Valid),
        rollouts,
        imitation_rewards: Some(imit),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepParams {
    pub n_configs: usize,
    pub n_seeds: usize,
    pub n_checkpoints: usize,
    pub rollouts: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub seed: u64,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams {
            n_configs: DEFAULT_CONFIGS,
            n_seeds: DEFAULT_SEEDS,
            n_checkpoints: DEFAULT_CHECKPOINTS,
            rollouts: DEFAULT_ROLLOUTS,
            n_train: 11,
            n_valid: 5,
            seed: 0,
        }
    }
}

impl SweepParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_configs == 0 || self.n_seeds == 0 || self.n_checkpoints == 0 || self.rollouts == 0 {
            return Err(Error::Invalid("sweep counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn configs(&self) -> Vec<CandidateConfig> {
        (0..self.n_configs as u32)
            .map(|c| CandidateConfig::sample(c, self.seed))
            .collect()
    }

    /// Demo split of training seed `seed`: the seed fixes the split.
    pub fn demo_split(&self, episodes: &[Episode], seed: u32) -> Result<DemoSet> {
        crate::data::split_demos(episodes, self.n_train, self.n_valid, seed as u64)
    }
}

/// All bundles of one configuration, in (seed, checkpoint) order.
pub fn gen_config_bundles(
    env: &PointMassEnv,
    config: &CandidateConfig,
    splits: &[DemoSet],
    sweep: &SweepParams,
    mut sink: impl FnMut(EvalBundle) -> Result<()>,
) -> Result<()> {
    let params = BundleParams {
        rollouts: sweep.rollouts,
        seed: sweep.seed,
    };
    for (s, demos) in splits.iter().enumerate().take(sweep.n_seeds) {
        for k in 0..sweep.n_checkpoints as u32 {
            sink(gen_bundle(env, config, demos, s as u32, k, &params)?)?;
        }
    }
    Ok(())
}

/// Every bundle of the sweep in memory, in canonical order. Meant for small
/// sweeps; the CLI streams instead.
pub fn gen_bundles(env: &PointMassEnv, demo_episodes: &[Episode], sweep: &SweepParams) -> Result<Vec<EvalBundle>> {
    env.validate()?;
    sweep.validate()?;
    let splits = (0..sweep.n_seeds as u32)
        .map(|s| sweep.demo_split(demo_episodes, s))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(sweep.n_configs * sweep.n_seeds * sweep.n_checkpoints);
    for c in sweep.configs() {
        gen_config_bundles(env, &c, &splits, sweep, |b| {
            out.push(b);
            Ok(())
        })?;
    }
    Ok(out)
}
