//! Agent networks: CNN encoder producing the interaction feature map, the
//! intention mask, policy and twin-critic heads, and the mirrored decoder
//! used by the autoencoder baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{prefixed, Conv2d, ConvTranspose2d, Linear, Module};
use crate::autodiff::{Checkpoint, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Layer sizes of the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub input_size: usize,
    pub convs: Vec<ConvSpec>,
    pub hidden: usize,
    /// Rows of the feature map, one per interaction.
    pub interactions: usize,
    /// Columns of the feature map.
    pub features_per_interaction: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::dqn(170)
    }
}

impl EncoderSpec {
    /// Three-layer DQN convolution stack on 6×84×84 binocular input.
    pub fn dqn(features_per_interaction: usize) -> Self {
        EncoderSpec {
            in_channels: 6,
            input_size: 84,
            convs: vec![
                ConvSpec { out_channels: 32, kernel: 8, stride: 4 },
                ConvSpec { out_channels: 64, kernel: 4, stride: 2 },
                ConvSpec { out_channels: 64, kernel: 3, stride: 1 },
            ],
            hidden: 512,
            interactions: 3,
            features_per_interaction,
        }
    }

    /// Small variant on 12×12 input for gradient checks.
    pub fn tiny() -> Self {
        EncoderSpec {
            in_channels: 6,
            input_size: 12,
            convs: vec![
                ConvSpec { out_channels: 4, kernel: 4, stride: 2 },
                ConvSpec { out_channels: 4, kernel: 3, stride: 1 },
                ConvSpec { out_channels: 3, kernel: 2, stride: 1 },
            ],
            hidden: 8,
            interactions: 3,
            features_per_interaction: 2,
        }
    }

    /// `(channels, size)` after each convolution, starting with the input.
    pub fn feature_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let mut sizes = vec![(self.in_channels, self.input_size)];
        for (i, c) in self.convs.iter().enumerate() {
            let (_, s) = *sizes.last().expect("non-empty");
            if s < c.kernel || c.stride == 0 {
                return Err(Error::Config(format!(
                    "agent.encoder.convs[{i}]: kernel {} stride {} does not fit input {s}",
                    c.kernel, c.stride
                )));
            }
            sizes.push((c.out_channels, (s - c.kernel) / c.stride + 1));
        }
        Ok(sizes)
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let (c, s) = *self.feature_sizes()?.last().expect("non-empty");
        Ok(c * s * s)
    }

    pub fn feature_dim(&self) -> usize {
        self.interactions * self.features_per_interaction
    }
}

/// `F = reshape(fc2(relu(fc1(flatten(conv stack(o))))), [K, M])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub convs: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        let sizes = spec.feature_sizes()?;
        let convs = spec
            .convs
            .iter()
            .zip(&sizes)
            .map(|(c, (inp, _))| Conv2d::new(*inp, c.out_channels, c.kernel, c.stride, rng))
            .collect();
        let fc1 = Linear::new(spec.flat_dim()?, spec.hidden, rng);
        let fc2 = Linear::new(spec.hidden, spec.feature_dim(), rng);
        Ok(Encoder { spec, convs, fc1, fc2 })
    }

    /// Maps `[N, C, H, W]` to the feature maps `[N, K, M]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, binds: &mut Vec<Var>) -> Result<Var> {
        let s = &self.spec;
        let shape = g.shape(x).to_vec();
        let expected = [s.in_channels, s.input_size, s.input_size];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::Shape {
                op: "encode",
                msg: format!("expected [N, {}, {}, {}], got {shape:?}", expected[0], expected[1], expected[2]),
            });
        }
        let n = shape[0];
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h, binds)?;
            h = g.relu(h);
        }
        let flat = self.spec.flat_dim()?;
        let h = g.reshape(h, [n, flat])?;
        let h = self.fc1.forward(g, h, binds)?;
        let h = g.relu(h);
        let f = self.fc2.forward(g, h, binds)?;
        g.reshape(f, [n, s.interactions, s.features_per_interaction])
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.extend(prefixed(&format!("conv{}.", i + 1), c.params()));
        }
        v.extend(prefixed("fc1.", self.fc1.params()));
        v.extend(prefixed("fc2.", self.fc2.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            v.extend(prefixed(&format!("conv{}.", i + 1), c.params_mut()));
        }
        v.extend(prefixed("fc1.", self.fc1.params_mut()));
        v.extend(prefixed("fc2.", self.fc2.params_mut()));
        v
    }
}

/// Anything mapping a batch of observations to feature maps `[N, K, M]`.
pub trait FeatureEncoder: Module + Clone {
    fn encode<'a>(&'a self, g: &mut Graph<'a>, x: Var, binds: &mut Vec<Var>) -> Result<Var>;
    fn interactions(&self) -> usize;
    fn features_per_interaction(&self) -> usize;

    fn feature_dim(&self) -> usize {
        self.interactions() * self.features_per_interaction()
    }
}

impl FeatureEncoder for Encoder {
    fn encode<'a>(&'a self, g: &mut Graph<'a>, x: Var, binds: &mut Vec<Var>) -> Result<Var> {
        self.forward(g, x, binds)
    }

    fn interactions(&self) -> usize {
        self.spec.interactions
    }

    fn features_per_interaction(&self) -> usize {
        self.spec.features_per_interaction
    }
}

/// Two-layer perceptron encoder for flat vector observations.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub interactions: usize,
    pub features_per_interaction: usize,
}

impl MlpEncoder {
    pub fn new(input: usize, hidden: usize, interactions: usize, features_per_interaction: usize, rng: &mut impl Rng) -> Self {
        MlpEncoder {
            fc1: Linear::new(input, hidden, rng),
            fc2: Linear::new(hidden, interactions * features_per_interaction, rng),
            interactions,
            features_per_interaction,
        }
    }
}

impl FeatureEncoder for MlpEncoder {
    fn encode<'a>(&'a self, g: &mut Graph<'a>, x: Var, binds: &mut Vec<Var>) -> Result<Var> {
        let n = g.shape(x)[0];
        let h = self.fc1.forward(g, x, binds)?;
        let h = g.relu(h);
        let f = self.fc2.forward(g, h, binds)?;
        g.reshape(f, [n, self.interactions, self.features_per_interaction])
    }

    fn interactions(&self) -> usize {
        self.interactions
    }

    fn features_per_interaction(&self) -> usize {
        self.features_per_interaction
    }
}

impl Module for MlpEncoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("fc1.", self.fc1.params());
        v.extend(prefixed("fc2.", self.fc2.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("fc1.", self.fc1.params_mut());
        v.extend(prefixed("fc2.", self.fc2.params_mut()));
        v
    }
}

/// One interaction-feature map `F[K, M]` for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionFeatureMap {
    pub features: Tensor,
}

impl InteractionFeatureMap {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Shape {
                op: "feature_map",
                msg: format!("expected [K, M], got {:?}", features.shape()),
            });
        }
        Ok(InteractionFeatureMap { features })
    }

    pub fn interactions(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn block(&self, k: usize) -> &[f32] {
        let m = self.features.shape()[1];
        &self.features.data()[k * m..(k + 1) * m]
    }
}

/// Runs the encoder on a single observation without tracking gradients.
pub fn encode(encoder: &Encoder, obs: &Tensor) -> Result<InteractionFeatureMap> {
    let mut shape = vec![1];
    shape.extend_from_slice(obs.shape());
    let x = Tensor::new(shape, obs.data().to_vec())?;
    let mut g = Graph::new();
    let xv = g.input(x);
    let f = encoder.forward(&mut g, xv, &mut Vec::new())?;
    let t = g.to_tensor(f).row(0);
    InteractionFeatureMap::new(t)
}

/// Batched forward of the frozen encoder, returning flattened `[N, K·M]`.
pub fn encode_batch(encoder: &Encoder, batch: Tensor) -> Result<Tensor> {
    let n = batch.shape()[0];
    let mut g = Graph::new();
    let xv = g.input(batch);
    let f = encoder.forward(&mut g, xv, &mut Vec::new())?;
    g.to_tensor(f).reshape([n, encoder.spec.feature_dim()])
}

/// `mask = sigmoid(W · onehot(intention) + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentionEmbed {
    pub linear: Linear,
}

impl IntentionEmbed {
    pub fn new(k: usize, rng: &mut impl Rng) -> Self {
        IntentionEmbed {
            linear: Linear::new(k, k, rng),
        }
    }

    pub fn k(&self) -> usize {
        self.linear.out_features()
    }

    pub fn one_hot(&self, intentions: &[usize]) -> Result<Tensor> {
        let k = self.k();
        let mut data = vec![0.0; intentions.len() * k];
        for (r, &i) in intentions.iter().enumerate() {
            if i >= k {
                return Err(Error::LabelOutOfRange { label: i, classes: k });
            }
            data[r * k + i] = 1.0;
        }
        Tensor::new([intentions.len(), k], data)
    }

    /// Masks `[N, K]` for a batch of intention indices.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, intentions: &[usize], binds: &mut Vec<Var>) -> Result<Var> {
        let oh = g.input(self.one_hot(intentions)?);
        let z = self.linear.forward(g, oh, binds)?;
        Ok(g.sigmoid(z))
    }
}

impl Module for IntentionEmbed {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.linear.params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.linear.params_mut()
    }
}

/// Row-wise gating `g[k, :] = mask[k] · F[k, :]`, flattened to `[N, K·M]`.
pub fn masked_features(g: &mut Graph<'_>, features: Var, mask: Var) -> Result<Var> {
    let n = g.shape(features)[0];
    let km: usize = g.shape(features)[1..].iter().product();
    let gated = g.scale_rows(features, mask)?;
    g.reshape(gated, [n, km])
}

/// Policy and twin critics on the masked features, plus target critics.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub policy: Linear,
    pub q1: Linear,
    pub q2: Linear,
    pub q1_target: Linear,
    pub q2_target: Linear,
}

impl Heads {
    pub fn new(feature_dim: usize, actions: usize, rng: &mut impl Rng) -> Self {
        let policy = Linear::new(feature_dim, actions, rng);
        let q1 = Linear::new(feature_dim, actions, rng);
        let q2 = Linear::new(feature_dim, actions, rng);
        Heads {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
        }
    }

    pub fn actions(&self) -> usize {
        self.policy.out_features()
    }
}

/// Softmax of the policy logits.
pub fn policy_distribution<'a>(g: &mut Graph<'a>, feats: Var, policy: &'a Linear, binds: &mut Vec<Var>) -> Result<Var> {
    let logits = policy.forward(g, feats, binds)?;
    g.softmax(logits)
}

/// Values of both critics (online when `target` is false).
pub fn q_values<'a>(g: &mut Graph<'a>, feats: Var, heads: &'a Heads, target: bool) -> Result<(Var, Var)> {
    let (a, b) = if target {
        (&heads.q1_target, &heads.q2_target)
    } else {
        (&heads.q1, &heads.q2)
    };
    let qa = a.forward(g, feats, &mut Vec::new())?;
    let qb = b.forward(g, feats, &mut Vec::new())?;
    Ok((qa, qb))
}

/// Mirror of the encoder: `K·M → hidden → flat`, then transposed
/// convolutions undoing the conv stack, sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub spec: EncoderSpec,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Ordered from the innermost layer outwards.
    pub deconvs: Vec<ConvTranspose2d>,
}

impl Decoder {
    pub fn new(spec: EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        let sizes = spec.feature_sizes()?;
        // each transposed conv must land exactly on the size it inverts
        for (i, c) in spec.convs.iter().enumerate() {
            let (_, before) = sizes[i];
            let (_, after) = sizes[i + 1];
            if (after - 1) * c.stride + c.kernel != before {
                return Err(Error::Config(format!(
                    "agent.encoder.convs[{i}]: size {before} is not exactly invertible with kernel {} stride {}",
                    c.kernel, c.stride
                )));
            }
        }
        let fc1 = Linear::new(spec.feature_dim(), spec.hidden, rng);
        let fc2 = Linear::new(spec.hidden, spec.flat_dim()?, rng);
        let deconvs = spec
            .convs
            .iter()
            .enumerate()
            .rev()
            .map(|(i, c)| ConvTranspose2d::new(c.out_channels, sizes[i].0, c.kernel, c.stride, rng))
            .collect();
        Ok(Decoder { spec, fc1, fc2, deconvs })
    }

    /// Maps features `[N, K, M]` (or `[N, K·M]`) to `[N, C, H, W]` in (0, 1).
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, features: Var, binds: &mut Vec<Var>) -> Result<Var> {
        let n = g.shape(features)[0];
        let f = g.reshape(features, [n, self.spec.feature_dim()])?;
        let h = self.fc1.forward(g, f, binds)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h, binds)?;
        let mut h = g.relu(h);
        let sizes = self.spec.feature_sizes()?;
        let (c, s) = *sizes.last().expect("non-empty");
        h = g.reshape(h, [n, c, s, s])?;
        let last = self.deconvs.len() - 1;
        for (i, d) in self.deconvs.iter().enumerate() {
            h = d.forward(g, h, binds)?;
            h = if i == last { g.sigmoid(h) } else { g.relu(h) };
        }
        Ok(h)
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("fc1.", self.fc1.params());
        v.extend(prefixed("fc2.", self.fc2.params()));
        let n = self.deconvs.len();
        for (i, d) in self.deconvs.iter().enumerate() {
            v.extend(prefixed(&format!("deconv{}.", n - i), d.params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("fc1.", self.fc1.params_mut());
        v.extend(prefixed("fc2.", self.fc2.params_mut()));
        let n = self.deconvs.len();
        for (i, d) in self.deconvs.iter_mut().enumerate() {
            v.extend(prefixed(&format!("deconv{}.", n - i), d.params_mut()));
        }
        v
    }
}

/// Full RL agent parameter set with its checkpoint naming.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentNet<E = Encoder> {
    pub encoder: E,
    pub intent: IntentionEmbed,
    pub heads: Heads,
}

impl AgentNet<Encoder> {
    pub fn new(spec: EncoderSpec, actions: usize, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(spec, rng)?;
        Ok(Self::with_encoder(encoder, actions, rng))
    }
}

impl<E: FeatureEncoder> AgentNet<E> {
    pub fn with_encoder(encoder: E, actions: usize, rng: &mut impl Rng) -> Self {
        let intent = IntentionEmbed::new(encoder.interactions(), rng);
        let heads = Heads::new(encoder.feature_dim(), actions, rng);
        AgentNet { encoder, intent, heads }
    }

    /// Masked, flattened features `[N, K·M]` for a batch.
    pub fn features<'a>(
        &'a self,
        g: &mut Graph<'a>,
        obs: Var,
        intentions: &[usize],
        encoder_binds: &mut Vec<Var>,
    ) -> Result<Var> {
        let f = self.encoder.encode(g, obs, encoder_binds)?;
        let mask = self.intent.forward(g, intentions, &mut Vec::new())?;
        masked_features(g, f, mask)
    }

    /// Action probabilities for a single observation (no batch axis).
    pub fn action_probs(&self, obs: &Tensor, intention: usize) -> Result<Vec<f32>> {
        let mut shape = vec![1];
        shape.extend_from_slice(obs.shape());
        let mut g = Graph::new();
        let x = g.input(Tensor::new(shape, obs.data().to_vec())?);
        let feats = self.features(&mut g, x, &[intention], &mut Vec::new())?;
        let p = policy_distribution(&mut g, feats, &self.heads.policy, &mut Vec::new())?;
        Ok(g.value(p).to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.encoder.save_into("enc.", &mut c);
        self.intent.save_into("intent.", &mut c);
        self.heads.policy.save_into("pi.", &mut c);
        self.heads.q1.save_into("q1.", &mut c);
        self.heads.q2.save_into("q2.", &mut c);
        self.heads.q1_target.save_into("q1t.", &mut c);
        self.heads.q2_target.save_into("q2t.", &mut c);
        c
    }

    pub fn load_checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
        self.encoder.load_from("enc.", c)?;
        self.intent.load_from("intent.", c)?;
        self.heads.policy.load_from("pi.", c)?;
        self.heads.q1.load_from("q1.", c)?;
        self.heads.q2.load_from("q2.", c)?;
        self.heads.q1_target.load_from("q1t.", c)?;
        self.heads.q2_target.load_from("q2t.", c)
    }
}
