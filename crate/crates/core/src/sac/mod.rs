//! Discrete-action soft actor-critic with twin critics, exact expectation
//! over actions and automatic temperature tuning.

pub mod chain;
mod replay;

pub use replay::{ReplayBuffer, Transition};

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{masked_features, q_values, AgentNet, FeatureEncoder};
use crate::autodiff::nn::{prefixed, Linear, Module};
use crate::autodiff::{AdamConfig, AdamState, Checkpoint, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Episodic environment driven by discrete action indices.
pub trait Environment {
    /// Compact handle from which an observation can be regenerated.
    type Key: Clone;

    fn num_actions(&self) -> usize;
    /// Starts an episode; returns the first observation key and the intention.
    fn reset(&mut self, seed: u64) -> Result<(Self::Key, usize)>;
    fn step(&mut self, action: usize) -> Result<EnvStep<Self::Key>>;
    fn materialize(&self, key: &Self::Key) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep<K> {
    pub next: K,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f32,
    pub batch: usize,
    pub lr: f32,
    pub warmup: usize,
    pub total_frames: usize,
    /// Target entropy as a fraction of `ln |A|`.
    pub target_entropy_ratio: f64,
    pub init_alpha: f64,
    pub capacity: usize,
    pub log_interval: usize,
    /// Environment steps between gradient updates.
    pub update_every: usize,
    /// Episodes in the closing evaluation.
    pub eval_episodes: usize,
    /// Sample actions during evaluation instead of taking the argmax.
    pub eval_stochastic: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            tau: 0.005,
            batch: 32,
            lr: 0.00025,
            warmup: 1000,
            total_frames: 200_000,
            target_entropy_ratio: 0.6,
            init_alpha: 1.0,
            capacity: 100_000,
            log_interval: 5000,
            update_every: 8,
            eval_episodes: 100,
            eval_stochastic: true,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("sac.{k}: {why}")));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", "must lie in (0, 1]");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.target_entropy_ratio >= 0.0 && self.target_entropy_ratio <= 1.0) {
            return bad("target_entropy_ratio", "must lie in [0, 1]");
        }
        if !(self.init_alpha > 0.0 && self.init_alpha.is_finite()) {
            return bad("init_alpha", "must be positive");
        }
        if self.capacity < self.batch {
            return bad("capacity", "must be at least the batch size");
        }
        if self.log_interval == 0 {
            return bad("log_interval", "must be at least 1");
        }
        if self.update_every == 0 {
            return bad("update_every", "must be at least 1");
        }
        Ok(())
    }

    pub fn target_entropy(&self, actions: usize) -> f64 {
        self.target_entropy_ratio * (actions as f64).ln()
    }
}

/// Bellman targets with the soft value of the next state taken as an exact
/// expectation over actions. All per-action slices are `[B, A]` row-major.
#[allow(clippy::too_many_arguments)]
pub fn critic_target(
    rewards: &[f32],
    dones: &[bool],
    next_probs: &[f32],
    next_log_probs: &[f32],
    q1_target: &[f32],
    q2_target: &[f32],
    alpha: f64,
    gamma: f64,
) -> Result<Vec<f32>> {
    let b = rewards.len();
    let a = next_probs.len() / b.max(1);
    for (what, s) in [("next_probs", next_probs), ("next_log_probs", next_log_probs), ("q1_target", q1_target), ("q2_target", q2_target)] {
        if s.len() != b * a {
            return Err(Error::Dimension {
                op: "critic_target",
                axis: what.into(),
                expected: b * a,
                got: s.len(),
            });
        }
    }
    if dones.len() != b {
        return Err(Error::Dimension {
            op: "critic_target",
            axis: "dones".into(),
            expected: b,
            got: dones.len(),
        });
    }
    if let Some(i) = q1_target.iter().chain(q2_target).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("target Q value at flat index {i}"),
        });
    }
    let mut y = Vec::with_capacity(b);
    for i in 0..b {
        let r = rewards[i] as f64;
        if dones[i] {
            y.push(r as f32);
            continue;
        }
        let mut v = 0.0f64;
        for j in i * a..(i + 1) * a {
            let p = next_probs[j] as f64;
            if p == 0.0 {
                continue;
            }
            let q = (q1_target[j] as f64).min(q2_target[j] as f64);
            v += p * (q - alpha * next_log_probs[j] as f64);
        }
        y.push((r + gamma * v) as f32);
    }
    Ok(y)
}

/// `θ̄ ← τ·θ + (1−τ)·θ̄` over matching parameter blocks.
pub fn soft_update<M: Module>(online: &M, target: &mut M, tau: f32) -> Result<()> {
    let src = online.params();
    let mut dst = target.params_mut();
    if src.len() != dst.len() {
        return Err(Error::Shape {
            op: "soft_update",
            msg: format!("{} online blocks vs {} target blocks", src.len(), dst.len()),
        });
    }
    for ((name, s), (_, d)) in src.iter().zip(dst.iter()) {
        if s.shape() != d.shape() {
            return Err(Error::Shape {
                op: "soft_update",
                msg: format!("{name}: {:?} vs {:?}", s.shape(), d.shape()),
            });
        }
    }
    for ((_, s), (_, d)) in src.iter().zip(dst.iter_mut()) {
        if tau == 1.0 {
            d.data_mut().copy_from_slice(s.data());
        } else {
            for (dv, sv) in d.data_mut().iter_mut().zip(s.data()) {
                *dv = tau * sv + (1.0 - tau) * *dv;
            }
        }
    }
    Ok(())
}

/// Mean policy entropy `−Σ π ln π` over rows of length `a`.
pub fn mean_entropy(probs: &[f32], log_probs: &[f32], a: usize) -> f64 {
    let rows = probs.len() / a;
    let total: f64 = probs
        .iter()
        .zip(log_probs)
        .map(|(p, lp)| -(*p as f64) * *lp as f64)
        .sum();
    total / rows as f64
}

/// Batch of transitions with materialized observations.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Tensor,
    pub next_obs: Tensor,
    pub intentions: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn from_transitions<K, E: Environment<Key = K>>(env: &E, items: &[&Transition<K>]) -> Result<Batch> {
        let obs: Vec<Tensor> = items.iter().map(|t| env.materialize(&t.obs)).collect::<Result<_>>()?;
        let next: Vec<Tensor> = items.iter().map(|t| env.materialize(&t.next_obs)).collect::<Result<_>>()?;
        Ok(Batch {
            obs: Tensor::stack(&obs.iter().collect::<Vec<_>>())?,
            next_obs: Tensor::stack(&next.iter().collect::<Vec<_>>())?,
            intentions: items.iter().map(|t| t.intention).collect(),
            actions: items.iter().map(|t| t.action).collect(),
            rewards: items.iter().map(|t| t.reward).collect(),
            dones: items.iter().map(|t| t.done).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f32,
    pub actor_loss: f32,
    pub entropy: f64,
    pub alpha: f64,
}

/// Learner state: networks, temperature and the three optimizers.
#[derive(Clone, Debug)]
pub struct Sac<E> {
    pub net: AgentNet<E>,
    /// `ln α`, shape `[1]`.
    pub log_alpha: Tensor,
    pub config: SacConfig,
    pub updates: u64,
    critic_opt: AdamState,
    actor_opt: AdamState,
    alpha_opt: AdamState,
}

fn take_all(grads: &mut crate::autodiff::Gradients, vars: &[Var]) -> Vec<Option<Vec<f32>>> {
    vars.iter().map(|v| grads.take(*v)).collect()
}

fn install(params: Vec<(String, &mut Tensor)>, grads: Vec<Option<Vec<f32>>>) -> Vec<(String, &mut Tensor)> {
    let mut params = params;
    for ((_, p), g) in params.iter_mut().zip(grads) {
        p.grad = g;
    }
    params
}

fn clear(params: Vec<(String, &mut Tensor)>) {
    for (_, p) in params {
        p.grad = None;
    }
}

/// Forward of a linear layer with no gradient bookkeeping.
fn linear_values(lin: &Linear, x: &Tensor) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let xv = g.constant_ref(x);
    let w = g.constant_ref(&lin.weight);
    let b = g.constant_ref(&lin.bias);
    let y = g.linear(xv, w, b)?;
    Ok(g.value(y).to_vec())
}

impl<E: FeatureEncoder> Sac<E> {
    pub fn new(net: AgentNet<E>, config: SacConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamConfig::with_lr(config.lr);
        Ok(Sac {
            net,
            log_alpha: Tensor::scalar(config.init_alpha.ln() as f32).into_param(),
            updates: 0,
            critic_opt: AdamState::new(adam),
            actor_opt: AdamState::new(adam),
            alpha_opt: AdamState::new(adam),
            config,
        })
    }

    pub fn alpha(&self) -> f64 {
        (self.log_alpha.item() as f64).exp()
    }

    pub fn num_actions(&self) -> usize {
        self.net.heads.actions()
    }

    pub fn target_entropy(&self) -> f64 {
        self.config.target_entropy(self.num_actions())
    }

    /// Targets `y` for a batch, using the current policy and target critics.
    pub fn targets(&self, batch: &Batch) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let x = g.constant_ref(&batch.next_obs);
        let feats = self.net.features(&mut g, x, &batch.intentions, &mut Vec::new())?;
        let logits = self.net.heads.policy.forward(&mut g, feats, &mut Vec::new())?;
        let p = g.softmax(logits)?;
        let lp = g.log_softmax(logits)?;
        let (qa, qb) = q_values(&mut g, feats, &self.net.heads, true)?;
        critic_target(
            &batch.rewards,
            &batch.dones,
            g.value(p),
            g.value(lp),
            g.value(qa),
            g.value(qb),
            self.alpha(),
            self.config.gamma,
        )
        .map_err(|e| match e {
            Error::NonFinite { what } => Error::NonFinite {
                what: format!("{what} (update {})", self.updates),
            },
            other => other,
        })
    }

    /// One Adam step on encoder and both critics. Returns the loss and the
    /// pre-update feature maps `[B, K, M]` of `batch.obs`.
    pub fn critic_update(&mut self, batch: &Batch, y: &[f32]) -> Result<(f32, Tensor)> {
        let (loss, feats, enc_g, q1_g, q2_g) = {
            let net = &self.net;
            let mut g = Graph::new();
            let x = g.constant_ref(&batch.obs);
            let mut enc_b = Vec::new();
            let f = net.encoder.encode(&mut g, x, &mut enc_b)?;
            let mask = net.intent.forward(&mut g, &batch.intentions, &mut Vec::new())?;
            let mask = g.detach(mask);
            let feats = masked_features(&mut g, f, mask)?;
            let (mut q1_b, mut q2_b) = (Vec::new(), Vec::new());
            let q1 = net.heads.q1.forward(&mut g, feats, &mut q1_b)?;
            let q2 = net.heads.q2.forward(&mut g, feats, &mut q2_b)?;
            let q1a = g.gather(q1, &batch.actions)?;
            let q2a = g.gather(q2, &batch.actions)?;
            let yv = g.input(Tensor::new([y.len()], y.to_vec())?);
            let l1 = g.mse(q1a, yv)?;
            let l2 = g.mse(q2a, yv)?;
            let loss = g.add(l1, l2)?;
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("critic loss at update {}", self.updates),
                });
            }
            let feats_t = g.to_tensor(f);
            let mut grads = g.backward(loss)?;
            (lv, feats_t, take_all(&mut grads, &enc_b), take_all(&mut grads, &q1_b), take_all(&mut grads, &q2_b))
        };
        let net = &mut self.net;
        let mut params = install(prefixed("enc.", net.encoder.params_mut()), enc_g);
        params.extend(install(prefixed("q1.", net.heads.q1.params_mut()), q1_g));
        params.extend(install(prefixed("q2.", net.heads.q2.params_mut()), q2_g));
        self.critic_opt.step(params)?;
        clear(prefixed("enc.", net.encoder.params_mut()));
        clear(net.heads.q1.params_mut());
        clear(net.heads.q2.params_mut());
        Ok((loss, feats))
    }

    /// One Adam step on policy and intention embedding given fixed features.
    /// Returns the loss and the mean policy entropy before the step.
    pub fn actor_update(&mut self, feats: &Tensor, intentions: &[usize]) -> Result<(f32, f64)> {
        let alpha = self.alpha() as f32;
        let a = self.num_actions();
        let (loss, entropy, int_g, pi_g) = {
            let net = &self.net;
            let mut g = Graph::new();
            let f = g.constant_ref(feats);
            let mut int_b = Vec::new();
            let mask = net.intent.forward(&mut g, intentions, &mut int_b)?;
            let gf = masked_features(&mut g, f, mask)?;
            let gf_t = g.to_tensor(gf);
            let q1 = linear_values(&net.heads.q1, &gf_t)?;
            let q2 = linear_values(&net.heads.q2, &gf_t)?;
            let qmin: Vec<f32> = q1.iter().zip(&q2).map(|(x, y)| x.min(*y)).collect();
            let qc = g.input(Tensor::new([intentions.len(), a], qmin)?);
            let mut pi_b = Vec::new();
            let logits = net.heads.policy.forward(&mut g, gf, &mut pi_b)?;
            let p = g.softmax(logits)?;
            let lp = g.log_softmax(logits)?;
            let entropy = mean_entropy(g.value(p), g.value(lp), a);
            let scaled = g.scale(lp, alpha);
            let inner = g.sub(scaled, qc)?;
            let prod = g.mul(p, inner)?;
            let per = g.sum_rows(prod)?;
            let loss = g.mean(per);
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("actor loss at update {}", self.updates),
                });
            }
            let mut grads = g.backward(loss)?;
            (lv, entropy, take_all(&mut grads, &int_b), take_all(&mut grads, &pi_b))
        };
        let net = &mut self.net;
        let mut params = install(prefixed("intent.", net.intent.params_mut()), int_g);
        params.extend(install(prefixed("pi.", net.heads.policy.params_mut()), pi_g));
        self.actor_opt.step(params)?;
        clear(net.intent.params_mut());
        clear(net.heads.policy.params_mut());
        Ok((loss, entropy))
    }

    /// Gradient step on `ln α` for the loss `ln α · (H − H*)`.
    pub fn temperature_update(&mut self, entropy: f64) -> Result<f64> {
        let grad = (entropy - self.target_entropy()) as f32;
        self.log_alpha.grad = Some(vec![grad]);
        self.alpha_opt.step([("alpha.log", &mut self.log_alpha)])?;
        self.log_alpha.grad = None;
        Ok(self.alpha())
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        let tau = self.config.tau;
        let h = &mut self.net.heads;
        soft_update(&h.q1, &mut h.q1_target, tau)?;
        soft_update(&h.q2, &mut h.q2_target, tau)
    }

    /// Critic, actor, temperature and target updates on one batch.
    pub fn update(&mut self, batch: &Batch) -> Result<UpdateStats> {
        let y = self.targets(batch)?;
        let (critic_loss, feats) = self.critic_update(batch, &y)?;
        let (actor_loss, entropy) = self.actor_update(&feats, &batch.intentions)?;
        let alpha = self.temperature_update(entropy)?;
        self.soft_update_targets()?;
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            entropy,
            alpha,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.net.to_checkpoint();
        c.insert("alpha.log", self.log_alpha.clone());
        c
    }
}

/// Draws an index from a categorical distribution.
pub fn sample_categorical(probs: &[f32], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0f64;
    for (i, p) in probs.iter().enumerate() {
        acc += *p as f64;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One periodic training log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub frame: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub alpha: f64,
}

pub const METRICS_HEADER: &str = "frame,mean_return,success_rate,alpha";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.4},{:.6}", self.frame, self.mean_return, self.success_rate, self.alpha)
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub frames: usize,
    pub episodes: usize,
    pub updates: u64,
    pub metrics: Vec<MetricsRow>,
}

/// Episodes whose statistics feed each log line.
pub const LOG_WINDOW: usize = 20;

const STREAM_ACTIONS: u64 = 1;
const STREAM_EPISODES: u64 = 2;
const STREAM_REPLAY: u64 = 3;
const STREAM_EVAL: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Runs the collect/update loop for `config.total_frames` environment steps.
/// `on_log` fires after every log line with the learner as of that frame.
pub fn train<E: Environment, F: FeatureEncoder>(
    env: &mut E,
    sac: &mut Sac<F>,
    seed: u64,
    mut on_log: impl FnMut(&MetricsRow, &Sac<F>) -> Result<()>,
) -> Result<TrainSummary> {
    let cfg = sac.config.clone();
    let actions = env.num_actions();
    if actions != sac.num_actions() {
        return Err(Error::Config(format!(
            "environment has {actions} actions but the policy head has {}",
            sac.num_actions()
        )));
    }
    let mut act_rng = stream(seed, STREAM_ACTIONS);
    let mut ep_rng = stream(seed, STREAM_EPISODES);
    let mut replay_rng = stream(seed, STREAM_REPLAY);
    let mut buffer = ReplayBuffer::new(cfg.capacity, actions)?;
    let mut recent: VecDeque<(f64, bool)> = VecDeque::with_capacity(LOG_WINDOW);
    let mut metrics = Vec::new();
    let mut episodes = 0;

    let (mut key, mut intention) = env.reset(ep_rng.gen())?;
    let mut ep_return = 0.0;
    for frame in 1..=cfg.total_frames {
        let action = if frame <= cfg.warmup {
            act_rng.gen_range(0..actions)
        } else {
            let obs = env.materialize(&key)?;
            let probs = sac.net.action_probs(&obs, intention)?;
            sample_categorical(&probs, &mut act_rng)
        };
        let step = env.step(action)?;
        ep_return += step.reward;
        buffer.push(Transition {
            obs: key,
            intention,
            action,
            reward: step.reward as f32,
            next_obs: step.next.clone(),
            done: step.terminal,
        })?;
        if step.terminal || step.truncated {
            if recent.len() == LOG_WINDOW {
                recent.pop_front();
            }
            recent.push_back((ep_return, step.success));
            episodes += 1;
            ep_return = 0.0;
            (key, intention) = env.reset(ep_rng.gen())?;
        } else {
            key = step.next;
        }

        if frame > cfg.warmup && buffer.len() >= cfg.batch && (frame - cfg.warmup) % cfg.update_every == 0 {
            let items = buffer.sample(cfg.batch, &mut replay_rng)?;
            let batch = Batch::from_transitions(env, &items)?;
            sac.update(&batch)?;
        }

        if frame % cfg.log_interval == 0 {
            let n = recent.len().max(1) as f64;
            let row = MetricsRow {
                frame,
                mean_return: if recent.is_empty() { f64::NAN } else { recent.iter().map(|r| r.0).sum::<f64>() / n },
                success_rate: recent.iter().filter(|r| r.1).count() as f64 / n,
                alpha: sac.alpha(),
            };
            log::info!(
                "frame {} mean_return {:.3} success {:.2} alpha {:.4} updates {}",
                row.frame,
                row.mean_return,
                row.success_rate,
                row.alpha,
                sac.updates
            );
            metrics.push(row);
            on_log(&row, sac)?;
        }
    }
    Ok(TrainSummary {
        frames: cfg.total_frames,
        episodes,
        updates: sac.updates,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub mean_return: f64,
    pub mean_length: f64,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes.max(1) as f64
    }
}

/// How actions are chosen during evaluation.
pub enum EvalPolicy<'n, F> {
    Greedy(&'n AgentNet<F>),
    Stochastic(&'n AgentNet<F>),
    Uniform,
}

/// Runs `episodes` seeded episodes to completion.
pub fn evaluate<E: Environment, F: FeatureEncoder>(
    env: &mut E,
    policy: EvalPolicy<'_, F>,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let actions = env.num_actions();
    evaluate_with(env, episodes, seed, |env, key, intention, rng| {
        Ok(match &policy {
            EvalPolicy::Uniform => rng.gen_range(0..actions),
            EvalPolicy::Greedy(net) => argmax(&net.action_probs(&env.materialize(key)?, intention)?),
            EvalPolicy::Stochastic(net) => sample_categorical(&net.action_probs(&env.materialize(key)?, intention)?, rng),
        })
    })
}

/// [`evaluate`] with an arbitrary action rule `choose(env, key, intention, rng)`.
/// Episode seeds depend only on `seed`, so every rule sees the same episodes.
pub fn evaluate_with<E: Environment>(
    env: &mut E,
    episodes: usize,
    seed: u64,
    mut choose: impl FnMut(&E, &E::Key, usize, &mut ChaCha8Rng) -> Result<usize>,
) -> Result<EvalReport> {
    let mut ep_rng = stream(seed, STREAM_EVAL);
    let mut act_rng = stream(seed, STREAM_ACTIONS);
    let (mut successes, mut total, mut steps) = (0, 0.0, 0usize);
    for _ in 0..episodes {
        let (mut key, intention) = env.reset(ep_rng.gen())?;
        loop {
            let action = choose(env, &key, intention, &mut act_rng)?;
            let s = env.step(action)?;
            total += s.reward;
            steps += 1;
            if s.terminal || s.truncated {
                successes += s.success as usize;
                break;
            }
            key = s.next;
        }
    }
    Ok(EvalReport {
        episodes,
        successes,
        mean_return: total / episodes.max(1) as f64,
        mean_length: steps as f64 / episodes.max(1) as f64,
    })
}
