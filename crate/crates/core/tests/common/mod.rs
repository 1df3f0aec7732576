#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsim_core::agent::{masked_features, policy_distribution, AgentNet, Decoder, Encoder, EncoderSpec, FeatureEncoder, IntentionEmbed};
use tsim_core::autodiff::gradcheck::{check, uniform, GradCheckConfig, GradCheckReport, Params};
use tsim_core::autodiff::nn::{prefixed, Module};
use tsim_core::render::BBox;
use tsim_core::{Graph, Result, Tensor, Var};

pub const LAYER_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 20;
pub const NETWORK_COORDS: usize = 50;
pub const NETWORK_STEP: f64 = 1e-2;

pub type Case = fn(u64) -> Result<GradCheckReport>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    }
}

/// Smooth nonlinear ops: the step balances rounding of the `f32` forward
/// pass against the extrapolated truncation error.
fn smooth(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        h: 0.1,
        ..cfg(seed)
    }
}

/// Large steps for ops that are affine (or quadratic) in every single
/// coordinate, where the central difference has no truncation error.
fn affine(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        h: 0.25,
        ..cfg(seed)
    }
}

/// Values kept at least `gap` away from zero, for kinked ops.
fn away_from_zero(shape: &[usize], gap: f32, rng: &mut impl Rng) -> Tensor {
    let mut t = uniform(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (gap + v.abs() * (1.0 - gap));
    }
    t
}

fn params(items: Vec<(&str, Tensor)>) -> Params {
    let mut p = Params::default();
    for (n, t) in items {
        p.push(n, t);
    }
    p
}

fn unary(c: GradCheckConfig, shape: &[usize], op: fn(&mut Graph<'_>, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut r = rng(c.seed);
    let mut p = params(vec![("x", away_from_zero(shape, 0.05, &mut r))]);
    check(&mut p, &c, |p, g, binds| {
        binds.extend(p.bind(g));
        op(g, binds[0])
    })
}

fn binary(c: GradCheckConfig, a: &[usize], b: &[usize], op: fn(&mut Graph<'_>, Var, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut r = rng(c.seed);
    let mut p = params(vec![("a", uniform(a, &mut r)), ("b", uniform(b, &mut r))]);
    check(&mut p, &c, |p, g, binds| {
        binds.extend(p.bind(g));
        op(g, binds[0], binds[1])
    })
}

pub fn conv2d_single(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = params(vec![
        ("x", uniform(&[1, 5, 5], &mut r)),
        ("w", uniform(&[1, 1, 3, 3], &mut r)),
        ("b", uniform(&[1], &mut r)),
    ]);
    check(&mut p, &affine(seed), |p, g, binds| {
        binds.extend(p.bind(g));
        g.conv2d(binds[0], binds[1], binds[2], 1)
    })
}

pub fn conv2d_strided_batch(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = params(vec![
        ("x", uniform(&[2, 2, 7, 7], &mut r)),
        ("w", uniform(&[3, 2, 3, 3], &mut r)),
        ("b", uniform(&[3], &mut r)),
    ]);
    check(&mut p, &affine(seed), |p, g, binds| {
        binds.extend(p.bind(g));
        g.conv2d(binds[0], binds[1], binds[2], 2)
    })
}

pub fn conv_transpose2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = params(vec![
        ("x", uniform(&[2, 3, 3, 3], &mut r)),
        ("w", uniform(&[3, 2, 3, 3], &mut r)),
        ("b", uniform(&[2], &mut r)),
    ]);
    check(&mut p, &affine(seed), |p, g, binds| {
        binds.extend(p.bind(g));
        g.conv_transpose2d(binds[0], binds[1], binds[2], 2)
    })
}

pub fn linear(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = params(vec![
        ("x", uniform(&[4], &mut r)),
        ("w", uniform(&[3, 4], &mut r)),
        ("b", uniform(&[3], &mut r)),
    ]);
    check(&mut p, &affine(seed), |p, g, binds| {
        binds.extend(p.bind(g));
        g.linear(binds[0], binds[1], binds[2])
    })
}

pub fn linear_batch(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut p = params(vec![
        ("x", uniform(&[5, 7], &mut r)),
        ("w", uniform(&[3, 7], &mut r)),
        ("b", uniform(&[3], &mut r)),
    ]);
    check(&mut p, &affine(seed), |p, g, binds| {
        binds.extend(p.bind(g));
        g.linear(binds[0], binds[1], binds[2])
    })
}

pub fn relu(seed: u64) -> Result<GradCheckReport> {
    // both steps stay inside the linear piece around each input
    let c = GradCheckConfig { h: 0.02, ..cfg(seed) };
    unary(c, &[3, 4], |g, x| Ok(g.relu(x)))
}

pub fn sigmoid(seed: u64) -> Result<GradCheckReport> {
    unary(smooth(seed), &[3, 4], |g, x| Ok(g.sigmoid(x)))
}

pub fn tanh(seed: u64) -> Result<GradCheckReport> {
    unary(smooth(seed), &[3, 4], |g, x| Ok(g.tanh(x)))
}

pub fn scale_and_shift(seed: u64) -> Result<GradCheckReport> {
    unary(affine(seed), &[6], |g, x| {
        let y = g.scale(x, -1.7);
        Ok(g.add_scalar(y, 0.3))
    })
}

pub fn softmax(seed: u64) -> Result<GradCheckReport> {
    unary(smooth(seed), &[3, 5], |g, x| g.softmax(x))
}

pub fn log_softmax(seed: u64) -> Result<GradCheckReport> {
    unary(smooth(seed), &[3, 5], |g, x| g.log_softmax(x))
}

pub fn reshape(seed: u64) -> Result<GradCheckReport> {
    unary(affine(seed), &[2, 6], |g, x| g.reshape(x, [3, 4]))
}

pub fn sum(seed: u64) -> Result<GradCheckReport> {
    unary(affine(seed), &[2, 5], |g, x| Ok(g.sum(x)))
}

pub fn mean(seed: u64) -> Result<GradCheckReport> {
    unary(affine(seed), &[2, 5], |g, x| Ok(g.mean(x)))
}

pub fn sum_rows(seed: u64) -> Result<GradCheckReport> {
    unary(affine(seed), &[3, 4], |g, x| g.sum_rows(x))
}

pub fn gather(seed: u64) -> Result<GradCheckReport> {
    unary(affine(seed), &[4, 3], |g, x| g.gather(x, &[2, 0, 1, 2]))
}

pub fn cross_entropy(seed: u64) -> Result<GradCheckReport> {
    unary(smooth(seed), &[4, 5], |g, x| g.softmax_cross_entropy(x, &[0, 4, 2, 2]))
}

pub fn add(seed: u64) -> Result<GradCheckReport> {
    binary(affine(seed), &[2, 3], &[2, 3], |g, a, b| g.add(a, b))
}

pub fn sub(seed: u64) -> Result<GradCheckReport> {
    binary(affine(seed), &[2, 3], &[2, 3], |g, a, b| g.sub(a, b))
}

pub fn mul(seed: u64) -> Result<GradCheckReport> {
    binary(affine(seed), &[2, 3], &[2, 3], |g, a, b| g.mul(a, b))
}

pub fn mse(seed: u64) -> Result<GradCheckReport> {
    binary(affine(seed), &[5], &[5], |g, a, b| g.mse(a, b))
}

pub fn scale_rows(seed: u64) -> Result<GradCheckReport> {
    binary(affine(seed), &[2, 3, 4], &[2, 3], |g, a, b| g.scale_rows(a, b))
}

pub fn intention_embed(seed: u64) -> Result<GradCheckReport> {
    let mut embed = IntentionEmbed::new(3, &mut rng(seed));
    check(&mut embed, &smooth(seed), |e, g, binds| e.forward(g, &[0, 2, 1, 2], binds))
}

/// Encoder, intention mask, policy and both critics of the shrunken agent.
#[derive(Clone)]
pub struct AgentUnderTest {
    pub net: AgentNet,
    pub obs: Tensor,
    pub intentions: Vec<usize>,
}

impl Module for AgentUnderTest {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("enc.", self.net.encoder.params());
        v.extend(prefixed("intent.", self.net.intent.params()));
        v.extend(prefixed("pi.", self.net.heads.policy.params()));
        v.extend(prefixed("q1.", self.net.heads.q1.params()));
        v.extend(prefixed("q2.", self.net.heads.q2.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let n = &mut self.net;
        let mut v = prefixed("enc.", n.encoder.params_mut());
        v.extend(prefixed("intent.", n.intent.params_mut()));
        v.extend(prefixed("pi.", n.heads.policy.params_mut()));
        v.extend(prefixed("q1.", n.heads.q1.params_mut()));
        v.extend(prefixed("q2.", n.heads.q2.params_mut()));
        v
    }
}

fn observations(n: usize, spec: &EncoderSpec, rng: &mut impl Rng) -> Tensor {
    let s = spec.input_size;
    let len = n * spec.in_channels * s * s;
    Tensor::new([n, spec.in_channels, s, s], (0..len).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

/// Nonzero biases, so no unit sits exactly on a ReLU kink when its
/// inputs are all zero.
fn jitter_biases(m: &mut impl Module, rng: &mut impl Rng) {
    for (name, t) in m.params_mut() {
        if name.ends_with(".b") {
            *t = away_from_zero(t.shape(), 0.2, rng).into_param();
            for v in t.data_mut() {
                *v *= 0.25;
            }
        }
    }
}

fn network(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        h: NETWORK_STEP,
        coords: Some(NETWORK_COORDS),
        ..cfg(seed)
    }
}

pub fn agent_end_to_end(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let spec = EncoderSpec::tiny();
    let net = AgentNet::new(spec.clone(), 6, &mut r)?;
    let obs = observations(2, &spec, &mut r);
    let mut m = AgentUnderTest { net, obs, intentions: vec![0, 2] };
    jitter_biases(&mut m, &mut r);
    check(&mut m, &network(seed), |m, g, binds| {
        let x = g.constant_ref(&m.obs);
        let f = m.net.encoder.encode(g, x, binds)?;
        let mask = m.net.intent.forward(g, &m.intentions, binds)?;
        let feats = masked_features(g, f, mask)?;
        let probs = policy_distribution(g, feats, &m.net.heads.policy, binds)?;
        let q1 = m.net.heads.q1.forward(g, feats, binds)?;
        let q2 = m.net.heads.q2.forward(g, feats, binds)?;
        let q = g.add(q1, q2)?;
        g.add(probs, q)
    })
}

/// Only the first convolution of the shrunken encoder, under `sum(F)`.
#[derive(Clone)]
pub struct Conv1UnderTest {
    pub encoder: Encoder,
    pub obs: Tensor,
}

impl Module for Conv1UnderTest {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.encoder.convs[0].params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.encoder.convs[0].params_mut()
    }
}

pub fn encoder_conv1(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let spec = EncoderSpec::tiny();
    let encoder = Encoder::new(spec.clone(), &mut r)?;
    let obs = observations(2, &spec, &mut r);
    let mut m = Conv1UnderTest { encoder, obs };
    jitter_biases(&mut m.encoder, &mut r);
    let c = GradCheckConfig {
        coords: None,
        ..network(seed)
    };
    check(&mut m, &c, |m, g, binds| {
        let x = g.constant_ref(&m.obs);
        let mut all = Vec::new();
        let f = m.encoder.forward(g, x, &mut all)?;
        binds.extend(&all[..2]);
        Ok(g.sum(f))
    })
}

/// The shrunken reconstruction network.
#[derive(Clone)]
pub struct AutoencoderUnderTest {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub obs: Tensor,
}

impl Module for AutoencoderUnderTest {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("enc.", self.encoder.params());
        v.extend(prefixed("dec.", self.decoder.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("enc.", self.encoder.params_mut());
        v.extend(prefixed("dec.", self.decoder.params_mut()));
        v
    }
}

pub fn autoencoder_end_to_end(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let spec = EncoderSpec::tiny();
    let encoder = Encoder::new(spec.clone(), &mut r)?;
    let decoder = Decoder::new(spec.clone(), &mut r)?;
    let obs = observations(2, &spec, &mut r);
    let mut m = AutoencoderUnderTest { encoder, decoder, obs };
    jitter_biases(&mut m, &mut r);
    check(&mut m, &network(seed), |m, g, binds| {
        let x = g.constant_ref(&m.obs);
        let f = m.encoder.forward(g, x, binds)?;
        m.decoder.forward(g, f, binds)
    })
}

pub const LAYER_CASES: &[(&str, Case)] = &[
    ("conv2d_single", conv2d_single),
    ("conv2d_strided_batch", conv2d_strided_batch),
    ("conv_transpose2d", conv_transpose2d),
    ("linear", linear),
    ("linear_batch", linear_batch),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("scale_and_shift", scale_and_shift),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("reshape", reshape),
    ("sum", sum),
    ("mean", mean),
    ("sum_rows", sum_rows),
    ("gather", gather),
    ("cross_entropy", cross_entropy),
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("mse", mse),
    ("scale_rows", scale_rows),
    ("intention_embed", intention_embed),
];

pub const NETWORK_CASES: &[(&str, Case)] = &[
    ("agent_end_to_end", agent_end_to_end),
    ("autoencoder_end_to_end", autoencoder_end_to_end),
    ("encoder_conv1", encoder_conv1),
];

/// Worst report over `SEEDS` seeds.
pub fn worst_over_seeds(case: Case) -> Result<(u64, GradCheckReport)> {
    let mut worst: Option<(u64, GradCheckReport)> = None;
    for seed in 0..SEEDS {
        let r = case(seed)?;
        if worst.as_ref().is_none_or(|(_, w)| r.max_rel_error > w.max_rel_error) {
            worst = Some((seed, r));
        }
    }
    Ok(worst.expect("at least one seed"))
}

/// IoU by counting pixel centers on an `n × n` grid over the unit square.
pub fn raster_iou(a: BBox, b: BBox, n: usize) -> f64 {
    let inside = |bx: BBox, x: f64, y: f64| {
        (x - bx.cx).abs() < bx.w / 2.0 && (y - bx.cy).abs() < bx.h / 2.0
    };
    let (mut i, mut u) = (0usize, 0usize);
    for r in 0..n {
        let y = (r as f64 + 0.5) / n as f64;
        for c in 0..n {
            let x = (c as f64 + 0.5) / n as f64;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            i += (ia && ib) as usize;
            u += (ia || ib) as usize;
        }
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

pub mod episodes {
    use rand::Rng;
    use tsim_core::env::{EnvConfig, Playpen, PlaypenEnv};
    use tsim_core::render::SceneStyle;
    use tsim_core::sac::{evaluate_with, Environment, EvalReport};
    use tsim_core::Result;

    pub const EPISODES: usize = 100;
    pub const SEED: u64 = 0;

    pub fn env() -> PlaypenEnv {
        PlaypenEnv::new(Playpen::new(EnvConfig::default(), SceneStyle::default()).unwrap())
    }

    pub fn oracle() -> Result<EvalReport> {
        evaluate_with(&mut env(), EPISODES, SEED, |e, _, _, _| e.oracle_action())
    }

    pub fn uniform() -> Result<EvalReport> {
        evaluate_with(&mut env(), EPISODES, SEED, |e, _, _, rng| Ok(rng.gen_range(0..e.num_actions())))
    }
}

pub mod chain {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tsim_core::agent::{q_values, AgentNet, MlpEncoder};
    use tsim_core::sac::chain::{self, ChainEnv, GOAL, RIGHT};
    use tsim_core::sac::{train, Sac, SacConfig};
    use tsim_core::{Graph, Result, Tensor};

    pub const SEEDS: [u64; 2] = [0, 1];
    pub const GAMMA: f64 = 0.99;
    pub const MIN_MASS: f32 = 0.95;
    pub const VALUE_TOL: f64 = 0.05;

    pub fn config() -> SacConfig {
        SacConfig {
            gamma: GAMMA,
            batch: 128,
            lr: 7e-4,
            tau: 0.01,
            warmup: 1000,
            total_frames: 20_000,
            target_entropy_ratio: 0.02,
            update_every: 1,
            log_interval: 1000,
            capacity: 20_000,
            ..SacConfig::default()
        }
    }

    /// Per non-goal state: (π(RIGHT), Q1(s, RIGHT), Q2(s, RIGHT)).
    pub fn run(seed: u64) -> Result<Vec<(f32, f32, f32)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = MlpEncoder::new(chain::STATES, 32, 1, 16, &mut rng);
        let net = AgentNet::with_encoder(enc, 2, &mut rng);
        let mut sac = Sac::new(net, config())?;
        let mut env = ChainEnv::new(20);
        train(&mut env, &mut sac, seed, |_, _| Ok(()))?;
        (0..GOAL)
            .map(|s| {
                let obs = chain::one_hot(s);
                let p = sac.net.action_probs(&obs, 0)?;
                let mut g = Graph::new();
                let x = g.input(Tensor::new([1, chain::STATES], obs.data().to_vec())?);
                let f = sac.net.features(&mut g, x, &[0], &mut Vec::new())?;
                let (a, b) = q_values(&mut g, f, &sac.net.heads, false)?;
                Ok((p[RIGHT], g.value(a)[RIGHT], g.value(b)[RIGHT]))
            })
            .collect()
    }

    /// Failures for one seed, empty when every state passes.
    pub fn failures(seed: u64) -> Result<Vec<String>> {
        let vi = chain::value_iteration(GAMMA);
        let mut out = Vec::new();
        for (s, (p, q1, q2)) in run(seed)?.into_iter().enumerate() {
            if p < MIN_MASS {
                out.push(format!("seed {seed} state {s}: mass {p:.4}"));
            }
            for q in [q1, q2] {
                if (q as f64 - vi[s][RIGHT]).abs() >= VALUE_TOL {
                    out.push(format!("seed {seed} state {s}: Q {q:.4} vs {:.4}", vi[s][RIGHT]));
                }
            }
        }
        Ok(out)
    }
}
