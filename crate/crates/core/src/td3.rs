//! Twin-critic delayed deterministic policy gradient training.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::actor_critic::{Actor, Critic, ACTION_DIM};
use crate::encoding::GeometricState;
use crate::env::{observe, reset_seeded, rotate_env_state, step, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tape::Tape;
use crate::variants::{encode_batch, ModelSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Td3Config {
    pub lr: f64,
    /// Global gradient-norm bound, per network.
    pub grad_clip: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: u64,
    pub expl_noise: f64,
    pub target_noise: f64,
    pub noise_clip: f64,
    pub warmup: u64,
    pub total_steps: u64,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            grad_clip: 0.1,
            batch: 100,
            buffer_capacity: 1_000_000,
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            expl_noise: 0.1,
            target_noise: 0.2,
            noise_clip: 0.5,
            warmup: 1000,
            total_steps: 50_000,
            eval_interval: 0,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) && self.gamma != 0.0 {
            return Err(Error::Contract(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Contract(format!("soft-update rate {} outside (0, 1]", self.tau)));
        }
        if !(self.grad_clip > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Contract("learning rate and gradient clip must be positive".into()));
        }
        if self.batch == 0 || self.buffer_capacity == 0 || self.policy_delay == 0 {
            return Err(Error::Contract("batch, buffer capacity and policy delay must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: GeometricState,
    pub action: Vec<[f64; 3]>,
    pub reward: f64,
    pub next_obs: GeometricState,
    /// Terminal for bootstrapping (a fall, not the step cap).
    pub done: bool,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: Vec::new(), cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.action.iter().flatten().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::Contract("stored actions must lie in [-1, 1]".into()));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Slot indices drawn uniformly with replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.items.len() < batch || batch == 0 {
            return Err(Error::Contract(format!(
                "cannot sample {batch} transitions from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>> {
        Ok(self.sample_indices(batch, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.items.get(slot)
    }
}

/// `y = r + γ·(1 − done)·min(q1, q2)`.
pub fn critic_targets(rewards: &[f64], dones: &[bool], q1: &[f64], q2: &[f64], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .zip(q1.iter().zip(q2))
        .map(|((r, d), (a, b))| if *d { *r } else { r + gamma * a.min(*b) })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMetrics {
    pub step: u64,
    pub episode: u64,
    pub ret: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

pub const METRICS_HEADER: &str = "step,episode,return,critic_loss,actor_loss";

impl EpisodeMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.episode, self.ret, self.critic_loss, self.actor_loss)
    }
}

/// Losses of one gradient update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Td3Trainer {
    pub cfg: Td3Config,
    pub env_cfg: EnvConfig,
    pub spec: ModelSpec,
    pub actor: Actor,
    pub actor_target: Actor,
    pub critic: Critic,
    pub critic_target: Critic,
    actor_opt: Adam,
    critic_opt: Adam,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub episode: u64,
    pub updates: u64,
    env_state: EnvState,
    obs: GeometricState,
    episode_return: f64,
    last_critic_loss: f64,
    last_actor_loss: f64,
}

impl Td3Trainer {
    pub fn new(env_cfg: EnvConfig, spec: ModelSpec, cfg: Td3Config) -> Result<Self> {
        cfg.validate()?;
        env_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let actor = Actor::new(&spec, &mut rng)?;
        let critic = Critic::new(&spec, 2, &mut rng)?;
        let (env_state, obs) = reset_seeded(&env_cfg, rng.random())?;
        Ok(Self {
            actor_opt: Adam::new(&actor.params, cfg.lr),
            critic_opt: Adam::new(&critic.params, cfg.lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            rng,
            step: 0,
            episode: 0,
            updates: 0,
            env_state,
            obs,
            episode_return: 0.0,
            last_critic_loss: f64::NAN,
            last_actor_loss: f64::NAN,
            cfg,
            env_cfg,
            spec,
        })
    }

    fn explore_action(&mut self) -> Result<Vec<[f64; 3]>> {
        let n = self.env_cfg.morphology.len();
        let mut a = if self.step < self.cfg.warmup {
            (0..n).map(|_| [0; 3].map(|_: i32| self.rng.random_range(-1.0..=1.0))).collect::<Vec<_>>()
        } else {
            let noise = Normal::new(0.0, self.cfg.expl_noise).map_err(|e| Error::Contract(e.to_string()))?;
            let mut a = self.actor.act(&self.obs)?;
            for v in a.iter_mut().flatten() {
                *v = (*v + noise.sample(&mut self.rng)).clamp(-1.0, 1.0);
            }
            a
        };
        a[0] = [0.0; ACTION_DIM];
        Ok(a)
    }

    /// Takes one environment step and, once warm, one gradient update.
    /// Returns the finished episode's metrics when the step ends one.
    pub fn train_step(&mut self) -> Result<Option<EpisodeMetrics>> {
        let action = self.explore_action()?;
        let r = step(&self.env_state, &action, &self.env_cfg)?;
        self.buffer.push(Transition {
            obs: std::mem::replace(&mut self.obs, r.observation.clone()),
            action,
            reward: r.reward.total,
            next_obs: r.observation,
            done: r.fell,
        })?;
        self.env_state = r.state;
        self.episode_return += r.reward.total;
        self.step += 1;

        if self.step >= self.cfg.warmup && self.buffer.len() >= self.cfg.batch {
            let stats = self.update()?;
            self.last_critic_loss = stats.critic_loss;
            if let Some(a) = stats.actor_loss {
                self.last_actor_loss = a;
            }
        }

        if r.done {
            let m = EpisodeMetrics {
                step: self.step,
                episode: self.episode,
                ret: self.episode_return,
                critic_loss: self.last_critic_loss,
                actor_loss: self.last_actor_loss,
            };
            self.episode += 1;
            self.episode_return = 0.0;
            let (st, obs) = reset_seeded(&self.env_cfg, self.rng.random())?;
            self.env_state = st;
            self.obs = obs;
            return Ok(Some(m));
        }
        Ok(None)
    }

    /// One critic update and, every `policy_delay` updates, one actor update
    /// followed by soft target updates.
    pub fn update(&mut self) -> Result<UpdateStats> {
        let idx = self.buffer.sample_indices(self.cfg.batch, &mut self.rng)?;
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.buffer.get(i).expect("sampled slot")).collect();
        let variant = self.spec.variant;
        let obs: Vec<&GeometricState> = batch.iter().map(|t| &t.obs).collect();
        let next: Vec<&GeometricState> = batch.iter().map(|t| &t.next_obs).collect();
        let obs_enc = encode_batch(&variant, &obs)?;
        let next_enc = encode_batch(&variant, &next)?;
        let rows = obs_enc.rows();

        // Target actions with clipped smoothing noise.
        let mut next_actions = self.actor_target.act_encoded(&next_enc)?;
        let noise = Normal::new(0.0, self.cfg.target_noise).map_err(|e| Error::Contract(e.to_string()))?;
        for a in &mut next_actions {
            let eps: f64 = noise.sample(&mut self.rng);
            *a = (*a + eps.clamp(-self.cfg.noise_clip, self.cfg.noise_clip)).clamp(-1.0, 1.0);
        }
        let targets = {
            let mut tape = Tape::new();
            let p = self.critic_target.params.bind_frozen(&mut tape);
            let a = tape.constant(vec![rows, ACTION_DIM], next_actions)?;
            let (q1, _) = self.critic_target.nets[0].forward(&mut tape, &p, &next_enc, a)?;
            let (q2, _) = self.critic_target.nets[1].forward(&mut tape, &p, &next_enc, a)?;
            let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
            let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
            critic_targets(&rewards, &dones, tape.data(q1), tape.data(q2), self.cfg.gamma)
        };

        // Critic regression on both networks.
        let critic_loss = {
            let mut tape = Tape::new();
            let p = self.critic.params.bind(&mut tape);
            let flat: Vec<f64> = batch.iter().flat_map(|t| t.action.iter().flatten().copied()).collect();
            let a = tape.constant(vec![rows, ACTION_DIM], flat)?;
            let y = tape.constant(vec![batch.len(), 1], targets)?;
            let mut loss = None;
            for net in &self.critic.nets {
                let (q, _) = net.forward(&mut tape, &p, &obs_enc, a)?;
                let diff = tape.sub(q, y)?;
                let sq = tape.square(diff)?;
                let l = tape.mean(sq)?;
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            let loss = loss.expect("two critics");
            let value = tape.value(loss).item()?;
            guard(value, "critic", self.step)?;
            let grads = tape.gradients(loss)?;
            self.critic.params.zero_grad();
            self.critic.params.accumulate(&p, &grads);
            self.critic.params.clip_grad_norm(self.cfg.grad_clip);
            self.critic_opt.step(&mut self.critic.params);
            value
        };
        self.updates += 1;

        let mut actor_loss = None;
        if self.updates.is_multiple_of(self.cfg.policy_delay) {
            let mut tape = Tape::new();
            let pa = self.actor.params.bind(&mut tape);
            let pc = self.critic.params.bind_frozen(&mut tape);
            let out = self.actor.net.forward(&mut tape, &pa, &obs_enc)?;
            let (q, _) = self.critic.nets[0].forward(&mut tape, &pc, &obs_enc, out.actions)?;
            let mean_q = tape.mean(q)?;
            let loss = tape.scale(mean_q, -1.0)?;
            let value = tape.value(loss).item()?;
            guard(value, "actor", self.step)?;
            let grads = tape.gradients(loss)?;
            self.actor.params.zero_grad();
            self.actor.params.accumulate(&pa, &grads);
            self.actor.params.clip_grad_norm(self.cfg.grad_clip);
            self.actor_opt.step(&mut self.actor.params);
            self.actor_target.params.soft_update_from(&self.actor.params, self.cfg.tau);
            self.critic_target.params.soft_update_from(&self.critic.params, self.cfg.tau);
            actor_loss = Some(value);
        }
        Ok(UpdateStats { critic_loss, actor_loss })
    }

    /// Runs until `total_steps`, writing one metrics row per finished episode.
    pub fn run(&mut self, mut metrics: Option<&mut dyn Write>) -> Result<Vec<EpisodeMetrics>> {
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{METRICS_HEADER}")?;
        }
        let mut all = Vec::new();
        while self.step < self.cfg.total_steps {
            if let Some(m) = self.train_step()? {
                if let Some(w) = metrics.as_deref_mut() {
                    writeln!(w, "{}", m.csv_row())?;
                    w.flush()?;
                }
                all.push(m);
            }
        }
        Ok(all)
    }

    /// Optimizer states, for checkpointing.
    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.actor_opt, &self.critic_opt)
    }
}

fn guard(loss: f64, which: &str, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{which} loss became {loss} at step {step}")))
    }
}

pub fn train(env_cfg: EnvConfig, spec: ModelSpec, cfg: Td3Config, metrics: Option<&mut dyn Write>) -> Result<Td3Trainer> {
    let mut t = Td3Trainer::new(env_cfg, spec, cfg)?;
    t.run(metrics)?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub returns: Vec<f64>,
}

impl EvalResult {
    fn from_returns(returns: Vec<f64>) -> Self {
        let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
        Self { mean, returns }
    }
}

/// Noise-free episodes; episode `k` starts from seed `seed + k`.
pub fn evaluate(actor: &Actor, env_cfg: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalResult> {
    evaluate_rotated(actor, env_cfg, episodes, seed, 0.0)
}

/// As [`evaluate`], with each initial state rotated by `yaw` about gravity.
pub fn evaluate_rotated(actor: &Actor, env_cfg: &EnvConfig, episodes: usize, seed: u64, yaw: f64) -> Result<EvalResult> {
    let returns = (0..episodes as u64)
        .map(|k| {
            let (st, _) = reset_seeded(env_cfg, seed.wrapping_add(k))?;
            let st = rotate_env_state(&st, yaw);
            run_episode(env_cfg, st, |obs| actor.act(obs))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_returns(returns))
}

/// Uniform random actions, measured by the same episode loop.
pub fn evaluate_random(env_cfg: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalResult> {
    let n = env_cfg.morphology.len();
    let returns = (0..episodes as u64)
        .map(|k| {
            let (st, _) = reset_seeded(env_cfg, seed.wrapping_add(k))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k) ^ 0x5eed);
            run_episode(env_cfg, st, |_| Ok((0..n).map(|_| [0; 3].map(|_: i32| rng.random_range(-1.0..=1.0))).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_returns(returns))
}

pub fn run_episode(
    env_cfg: &EnvConfig,
    mut st: EnvState,
    mut policy: impl FnMut(&GeometricState) -> Result<Vec<[f64; 3]>>,
) -> Result<f64> {
    let mut obs = observe(&st, env_cfg);
    let mut total = 0.0;
    loop {
        let a = policy(&obs)?;
        let r = step(&st, &a, env_cfg)?;
        total += r.reward.total;
        if r.done {
            return Ok(total);
        }
        st = r.state;
        obs = r.observation;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{gravity, Vec3};
    use crate::morphology::registry;
    use crate::set::SetConfig;
    use crate::variants::{make_variant, Variant, VariantKind};

    fn dummy(reward: f64) -> Transition {
        let s = GeometricState { limbs: vec![], gravity: gravity(), target_dir: Vec3::zeros() };
        Transition { obs: s.clone(), action: vec![[0.0; 3]], reward, next_obs: s, done: false }
    }

    #[test]
    fn zero_discount_target_is_reward() {
        let y = critic_targets(&[1.5, -2.0], &[false, false], &[10.0, 3.0], &[7.0, 4.0], 0.0);
        assert_eq!(y, vec![1.5, -2.0]);
        let y = critic_targets(&[1.0, 1.0], &[false, true], &[10.0, 3.0], &[7.0, 4.0], 0.5);
        assert_eq!(y, vec![4.5, 1.0]);
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3);
        for r in 0..4 {
            b.push(dummy(r as f64)).unwrap();
        }
        assert_eq!(b.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| b.get(i).unwrap().reward).collect();
        assert_eq!(rewards, vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn sampling_contracts() {
        let mut b = ReplayBuffer::new(10);
        assert!(matches!(b.sample(1, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Contract(_))));
        for r in 0..10 {
            b.push(dummy(r as f64)).unwrap();
        }
        assert!(matches!(b.sample(11, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Contract(_))));
        let a = b.sample_indices(10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = b.sample_indices(10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, c);
        let mut bad = dummy(0.0);
        bad.action[0][1] = 1.5;
        assert!(matches!(b.push(bad), Err(Error::Contract(_))));
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(10);
        for r in 0..10 {
            b.push(dummy(r as f64)).unwrap();
        }
        let mut counts = [0usize; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            for i in b.sample_indices(10, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() <= 500.0, "{counts:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(Td3Config::default().validate().is_ok());
        assert!(Td3Config { tau: 0.0, ..Td3Config::default() }.validate().is_err());
        assert!(Td3Config { gamma: 1.0, ..Td3Config::default() }.validate().is_err());
        assert!(Td3Config { grad_clip: 0.0, ..Td3Config::default() }.validate().is_err());
    }

    #[test]
    fn short_run_is_finite_and_delays_actor() {
        let env_cfg = EnvConfig::new(registry::load("3d_hopper_3_shin").unwrap());
        let cfg = SetConfig { layers: 1, width: 8, qk_width: 4, matrix_side: 3, matrix_hidden: 8, c_m: 2, c_u: 2, ..SetConfig::desk() };
        let spec = make_variant(Variant::new(VariantKind::Set), &cfg).unwrap();
        let td3 = Td3Config { warmup: 20, batch: 8, total_steps: 40, ..Td3Config::default() };
        let mut t = Td3Trainer::new(env_cfg, spec, td3).unwrap();
        while t.step < 19 {
            t.train_step().unwrap();
        }
        let before = t.actor.params.clone();
        let s1 = t.update().unwrap();
        assert!(s1.actor_loss.is_none());
        let same = |a: &crate::nn::ParamStore, b: &crate::nn::ParamStore| {
            a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.data() == y.data())
        };
        assert!(same(&t.actor.params, &before));
        let s2 = t.update().unwrap();
        assert!(s2.actor_loss.is_some());
        assert!(!same(&t.actor.params, &before));
        let mut out = Vec::new();
        t.run(Some(&mut out)).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with(METRICS_HEADER));
        assert!(t.actor.params.all_finite() && t.critic.params.all_finite());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut env_cfg = EnvConfig::new(registry::load("3d_hopper_3_shin").unwrap());
        env_cfg.max_steps = 50;
        let spec = make_variant(Variant::new(VariantKind::Set), &SetConfig::desk()).unwrap();
        let actor = Actor::new(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = evaluate(&actor, &env_cfg, 2, 5).unwrap();
        let b = evaluate(&actor, &env_cfg, 2, 5).unwrap();
        assert_eq!(a, b);
    }
}
