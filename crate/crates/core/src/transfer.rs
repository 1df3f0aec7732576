//! Downstream evaluation of learned encoders: the labeled single-object
//! dataset, linear heads on frozen (or trainable) features, the four
//! encoder regimes and the result matrix.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{encode_batch, Decoder, Encoder, EncoderSpec};
use crate::autodiff::checkpoint::write_atomic_with;
use crate::autodiff::nn::{Linear, Module};
use crate::autodiff::{AdamConfig, AdamState, Checkpoint, Graph, Tensor, Var};
use crate::env::{Action, Playpen};
use crate::error::{Error, Result};
use crate::render::{self, BBox, Eye, ObjectClass, PropObject, Scene, SceneStyle};

pub const DATASET_MAGIC: &[u8; 5] = b"TDSV1";
/// The file format fixes the frame size.
pub const DATASET_RESOLUTION: usize = 84;
const MAX_REJECTIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[6, H, W]` binocular frame.
    pub observation: Tensor,
    pub class: ObjectClass,
    /// Meters from the camera midpoint to the object's reference center.
    pub distance: f64,
    /// Left-eye silhouette box.
    pub bbox: BBox,
}

/// Read access to a list of samples. Label getters are separate from the
/// observation so tests can count label reads.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn observation(&self, i: usize) -> &Tensor;
    fn class(&self, i: usize) -> ObjectClass;
    fn distance(&self, i: usize) -> f64;
    fn bbox(&self, i: usize) -> BBox;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [LabeledSample] {
    fn len(&self) -> usize {
        <[LabeledSample]>::len(self)
    }
    fn observation(&self, i: usize) -> &Tensor {
        &self[i].observation
    }
    fn class(&self, i: usize) -> ObjectClass {
        self[i].class
    }
    fn distance(&self, i: usize) -> f64 {
        self[i].distance
    }
    fn bbox(&self, i: usize) -> BBox {
        self[i].bbox
    }
}

impl SampleSource for Vec<LabeledSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn observation(&self, i: usize) -> &Tensor {
        &self[i].observation
    }
    fn class(&self, i: usize) -> ObjectClass {
        self[i].class
    }
    fn distance(&self, i: usize) -> f64 {
        self[i].distance
    }
    fn bbox(&self, i: usize) -> BBox {
        self[i].bbox
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    /// Not stored in the file; `None` after loading.
    pub seed: Option<u64>,
}

/// Train size for `n` samples: `floor(7n/8)`.
pub fn train_size(n: usize) -> usize {
    n * 7 / 8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub samples: usize,
    pub distance_min: f64,
    pub distance_max: f64,
    pub bearing_max_deg: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            samples: 2400,
            distance_min: 1.0,
            distance_max: 5.0,
            bearing_max_deg: 30.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("transfer.dataset.{k}: {why}")));
        if self.samples < 2 {
            return bad("samples", "need at least 2 samples for a train/test split");
        }
        if !(self.distance_min > 0.0 && self.distance_min <= self.distance_max) {
            return bad("distance_min", "need 0 < distance_min <= distance_max");
        }
        if !self.distance_max.is_finite() {
            return bad("distance_max", "must be finite");
        }
        if !(0.0..90.0).contains(&self.bearing_max_deg) {
            return bad("bearing_max_deg", "must be in [0, 90)");
        }
        Ok(())
    }
}

/// One object seen from the fixed dataset camera (origin, yaw 0) at a 3-D
/// distance `distance` and horizontal bearing `bearing` (radians).
pub fn single_object_scene(
    style: &SceneStyle,
    class: ObjectClass,
    distance: f64,
    bearing: f64,
    yaw: f64,
) -> Result<Scene> {
    let geometry = &style.geometry;
    let dh = style.eye_height - geometry.center_height(class);
    if distance <= dh.abs() {
        return Err(Error::Config(format!(
            "transfer.dataset.distance_min: distance {distance} is below the camera/object height gap {}",
            dh.abs()
        )));
    }
    let ground = (distance * distance - dh * dh).sqrt();
    let mut scene = Scene::empty(style);
    scene.objects.push(PropObject::on_floor(
        0,
        class,
        ground * bearing.sin(),
        ground * bearing.cos(),
        yaw,
        geometry,
    ));
    Ok(scene)
}

pub fn dataset_camera(style: &SceneStyle) -> render::StereoCamera {
    style.camera(0.0, 0.0, 0.0)
}

/// Renders one labeled sample, or `None` if the object is not visible.
pub fn render_sample(
    style: &SceneStyle,
    class: ObjectClass,
    distance: f64,
    bearing: f64,
    yaw: f64,
) -> Result<Option<LabeledSample>> {
    let scene = single_object_scene(style, class, distance, bearing, yaw)?;
    let camera = dataset_camera(style);
    let mask = render::silhouette_mask(&scene, &camera, 0, Eye::Left)?;
    let Some(bbox) = render::mask_to_bbox(&mask) else {
        return Ok(None);
    };
    let observation = render::render(&scene, &camera).pixels;
    Ok(Some(LabeledSample {
        observation,
        class,
        distance,
        bbox,
    }))
}

/// Single-object samples, classes round-robin, split `floor(7n/8)` train
/// with class counts balanced in both splits.
pub fn generate_dataset(seed: u64, config: &DatasetConfig, style: &SceneStyle) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bearing_max = config.bearing_max_deg.to_radians();
    let mut by_class: [Vec<LabeledSample>; 3] = Default::default();
    for i in 0..config.samples {
        let class = ObjectClass::ALL[i % 3];
        let mut rejected = 0;
        let sample = loop {
            let d = rng.gen_range(config.distance_min..=config.distance_max);
            let b = if bearing_max > 0.0 {
                rng.gen_range(-bearing_max..=bearing_max)
            } else {
                0.0
            };
            let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
            if let Some(s) = render_sample(style, class, d, b, yaw)? {
                break s;
            }
            rejected += 1;
            if rejected > MAX_REJECTIONS {
                return Err(Error::Config(format!(
                    "transfer.dataset: {class:?} not visible after {MAX_REJECTIONS} placements"
                )));
            }
        };
        by_class[class.index()].push(sample);
    }
    for list in &mut by_class {
        list.shuffle(&mut rng);
    }
    // interleave classes so any prefix is balanced
    let mut interleaved = Vec::with_capacity(config.samples);
    let mut iters: Vec<_> = by_class.into_iter().map(Vec::into_iter).collect();
    loop {
        let mut any = false;
        for it in &mut iters {
            if let Some(s) = it.next() {
                interleaved.push(s);
                any = true;
            }
        }
        if !any {
            break;
        }
    }
    let test = interleaved.split_off(train_size(config.samples));
    let mut train = interleaved;
    let mut test = test;
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(Dataset {
        train,
        test,
        seed: Some(seed),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_counts(split: &[LabeledSample]) -> [usize; 3] {
        let mut c = [0; 3];
        for s in split {
            c[s.class.index()] += 1;
        }
        c
    }

    /// Writes train then test; the split point is recomputed on load.
    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        let io = |e| Error::io("<dataset stream>", e);
        let expected = [6, DATASET_RESOLUTION, DATASET_RESOLUTION];
        if train_size(self.len()) != self.train.len() {
            return Err(Error::Dataset(format!(
                "split {}/{} does not follow the 7/8 rule",
                self.train.len(),
                self.test.len()
            )));
        }
        w.write_all(DATASET_MAGIC).map_err(io)?;
        let n = u32::try_from(self.len()).map_err(|_| Error::Dataset("too many samples".into()))?;
        w.write_all(&n.to_le_bytes()).map_err(io)?;
        for s in self.train.iter().chain(&self.test) {
            if s.observation.shape() != expected {
                return Err(Error::Dataset(format!(
                    "observation shape {:?}, file format needs {expected:?}",
                    s.observation.shape()
                )));
            }
            let mut buf = Vec::with_capacity(s.observation.numel() * 4 + 41);
            for v in s.observation.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.push(s.class.index() as u8);
            buf.extend_from_slice(&s.distance.to_le_bytes());
            for v in s.bbox.to_array() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut inner = None;
        write_atomic_with(path, |w| {
            if let Err(e) = self.write_to(w) {
                let msg = e.to_string();
                inner = Some(e);
                return Err(std::io::Error::other(msg));
            }
            Ok(())
        })
        .map_err(|e| inner.take().unwrap_or(e))
    }

    pub fn read_from(r: &mut dyn Read) -> Result<Self> {
        let short = |_| Error::Dataset("truncated dataset file".into());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(short)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Dataset("bad magic, not a TDSV1 file".into()));
        }
        let mut n4 = [0u8; 4];
        r.read_exact(&mut n4).map_err(short)?;
        let n = u32::from_le_bytes(n4) as usize;
        let px = 6 * DATASET_RESOLUTION * DATASET_RESOLUTION;
        let mut buf = vec![0u8; px * 4 + 1 + 8 * 5];
        let mut all = Vec::with_capacity(n);
        for i in 0..n {
            r.read_exact(&mut buf).map_err(short)?;
            let data: Vec<f32> = buf[..px * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tail = &buf[px * 4..];
            let class = ObjectClass::from_index(tail[0] as usize)
                .ok_or_else(|| Error::Dataset(format!("sample {i}: bad class byte {}", tail[0])))?;
            let f = |k: usize| f64::from_le_bytes(tail[1 + 8 * k..9 + 8 * k].try_into().expect("8 bytes"));
            all.push(LabeledSample {
                observation: Tensor::new([6, DATASET_RESOLUTION, DATASET_RESOLUTION], data)?,
                class,
                distance: f(0),
                bbox: BBox::from_array([f(1), f(2), f(3), f(4)]),
            });
        }
        if r.read(&mut [0u8; 1]).map_err(|e| Error::io("<dataset stream>", e))? != 0 {
            return Err(Error::Dataset("trailing bytes after the last sample".into()));
        }
        let test = all.split_off(train_size(n));
        Ok(Dataset {
            train: all,
            test,
            seed: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}

/// Log-distance standardization fitted on the train split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceNormalizer {
    pub mu: f64,
    pub sigma: f64,
}

impl DistanceNormalizer {
    pub fn fit(train: &(impl SampleSource + ?Sized)) -> Result<Self> {
        Self::fit_distances((0..train.len()).map(|i| train.distance(i)))
    }

    pub fn fit_distances(distances: impl IntoIterator<Item = f64>) -> Result<Self> {
        let logs: Vec<f64> = distances
            .into_iter()
            .map(|d| {
                if d > 0.0 && d.is_finite() {
                    Ok(d.ln())
                } else {
                    Err(Error::Degenerate(format!("distance {d} is not positive and finite")))
                }
            })
            .collect::<Result<_>>()?;
        if logs.is_empty() {
            return Err(Error::Degenerate("no distances to fit".into()));
        }
        let n = logs.len() as f64;
        let mu = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / n;
        let sigma = var.sqrt();
        if !(sigma > 1e-12) {
            return Err(Error::Degenerate("all distances are equal; log-distance has zero variance".into()));
        }
        Ok(DistanceNormalizer { mu, sigma })
    }

    pub fn z(&self, d: f64) -> f64 {
        (d.ln() - self.mu) / self.sigma
    }

    pub fn distance(&self, z: f64) -> f64 {
        (z * self.sigma + self.mu).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Distance,
    Localization,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Classification, Task::Distance, Task::Localization];

    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Distance => "distance",
            Task::Localization => "localization",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            Task::Classification => "accuracy",
            Task::Distance => "relative_l1",
            Task::Localization => "iou",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Task::Classification => "Classification",
            Task::Distance => "Distance estimation",
            Task::Localization => "Recognition",
        }
    }

    pub fn outputs(self) -> usize {
        match self {
            Task::Classification => 3,
            Task::Distance => 1,
            Task::Localization => 4,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task '{s}' (classification, distance, localization)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferRegime {
    /// Frozen at its random initialization.
    Random,
    /// Frozen, pretrained by reconstruction.
    Autoencoder,
    /// Frozen, pretrained by the interaction agent.
    Proposed,
    /// Trained jointly with the head from random initialization.
    Supervised,
}

impl TransferRegime {
    pub const ALL: [TransferRegime; 4] = [
        TransferRegime::Random,
        TransferRegime::Autoencoder,
        TransferRegime::Proposed,
        TransferRegime::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferRegime::Random => "random",
            TransferRegime::Autoencoder => "autoencoder",
            TransferRegime::Proposed => "proposed",
            TransferRegime::Supervised => "supervised",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            TransferRegime::Random => "Random",
            TransferRegime::Autoencoder => "Autoencoder",
            TransferRegime::Proposed => "Proposed",
            TransferRegime::Supervised => "Supervised",
        }
    }

    pub fn frozen(self) -> bool {
        self != TransferRegime::Supervised
    }

    /// Builds the starting encoder. Pretrained regimes need a checkpoint
    /// of the matching kind; the others ignore it.
    pub fn encoder(self, spec: &EncoderSpec, checkpoint: Option<&Checkpoint>, seed: u64) -> Result<Encoder> {
        match self {
            TransferRegime::Random | TransferRegime::Supervised => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(5);
                Encoder::new(spec.clone(), &mut rng)
            }
            TransferRegime::Autoencoder | TransferRegime::Proposed => {
                let c = checkpoint.ok_or_else(|| {
                    Error::Config(format!("regime {} needs an encoder checkpoint", self.name()))
                })?;
                let (needs, what) = match self {
                    TransferRegime::Autoencoder => ("dec.", "an autoencoder"),
                    _ => ("pi.", "an RL agent"),
                };
                if !c.contains_prefix(needs) || !c.contains_prefix("enc.") {
                    return Err(Error::Config(format!(
                        "regime {} needs {what} checkpoint (parameters '{needs}*' and 'enc.*')",
                        self.name()
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut enc = Encoder::new(spec.clone(), &mut rng)?;
                enc.load_from("enc.", c)?;
                Ok(enc)
            }
        }
    }
}

impl std::str::FromStr for TransferRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TransferRegime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("unknown regime '{s}' (random, autoencoder, proposed, supervised)"))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceErrorSpace {
    /// `100 · mean(|d̂ − d| / d)` in meters.
    Meters,
    /// `100 · mean(|ẑ − z|)` on the normalized log scale.
    LogZ,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub distance_error: DistanceErrorSpace,
    pub dataset: DatasetConfig,
    pub autoencoder: AutoencoderConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            lr: 0.001,
            epochs: 50,
            batch_size: 32,
            seeds: vec![0, 1, 2],
            distance_error: DistanceErrorSpace::Meters,
            dataset: DatasetConfig::default(),
            autoencoder: AutoencoderConfig::default(),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("transfer.{k}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "need at least one seed");
        }
        self.dataset.validate()?;
        self.autoencoder.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub frames: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            frames: 10_000,
            epochs: 20,
            batch_size: 32,
            lr: 0.00025,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("transfer.autoencoder.{k}: {why}")));
        if self.frames == 0 {
            return bad("frames", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        Ok(())
    }
}

/// Head plus, for the supervised regime, the co-trained encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedHead {
    pub task: Task,
    pub regime: TransferRegime,
    pub head: Linear,
    pub encoder: Encoder,
    pub normalizer: DistanceNormalizer,
}

fn stack_observations(src: &(impl SampleSource + ?Sized), idx: &[usize]) -> Result<Tensor> {
    let obs: Vec<&Tensor> = idx.iter().map(|&i| src.observation(i)).collect();
    Tensor::stack(&obs)
}

/// Frozen features `[N, K·M]` for every sample, in order.
pub fn extract_features(encoder: &Encoder, src: &(impl SampleSource + ?Sized), chunk: usize) -> Result<Tensor> {
    let dim = encoder.spec.feature_dim();
    let mut out = Vec::with_capacity(src.len() * dim);
    let all: Vec<usize> = (0..src.len()).collect();
    for idx in all.chunks(chunk.max(1)) {
        let f = encode_batch(encoder, stack_observations(src, idx)?)?;
        out.extend_from_slice(f.data());
    }
    Tensor::new([src.len(), dim], out)
}

fn rows(features: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = features.shape()[1];
    let mut v = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        v.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
    }
    Tensor::new([idx.len(), d], v)
}

enum Targets {
    Labels(Vec<usize>),
    Values(Tensor),
}

fn targets(task: Task, src: &(impl SampleSource + ?Sized), idx: &[usize], norm: &DistanceNormalizer) -> Result<Targets> {
    Ok(match task {
        Task::Classification => Targets::Labels(idx.iter().map(|&i| src.class(i).index()).collect()),
        Task::Distance => Targets::Values(Tensor::new(
            [idx.len(), 1],
            idx.iter().map(|&i| norm.z(src.distance(i)) as f32).collect(),
        )?),
        Task::Localization => Targets::Values(Tensor::new(
            [idx.len(), 4],
            idx.iter()
                .flat_map(|&i| src.bbox(i).to_array().map(|v| v as f32))
                .collect(),
        )?),
    })
}

/// Head output: logits, z-score, or sigmoid box.
fn head_output<'a>(g: &mut Graph<'a>, task: Task, head: &'a Linear, feats: Var, binds: &mut Vec<Var>) -> Result<Var> {
    let y = head.forward(g, feats, binds)?;
    Ok(match task {
        Task::Localization => g.sigmoid(y),
        _ => y,
    })
}

fn task_loss(g: &mut Graph<'_>, out: Var, t: Targets) -> Result<Var> {
    match t {
        Targets::Labels(l) => g.softmax_cross_entropy(out, &l),
        Targets::Values(v) => {
            let tv = g.input(v);
            g.mse(out, tv)
        }
    }
}

/// Trains one linear head. `train` is the only data this function sees.
pub fn train_head(
    task: Task,
    regime: TransferRegime,
    train: &(impl SampleSource + ?Sized),
    encoder: Encoder,
    config: &TransferConfig,
    seed: u64,
) -> Result<TrainedHead> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty train split".into()));
    }
    let normalizer = DistanceNormalizer::fit(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = Linear::new(encoder.spec.feature_dim(), task.outputs(), &mut rng);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let adam = AdamConfig::with_lr(config.lr);
    let mut encoder = encoder;

    if regime.frozen() {
        let feats = extract_features(&encoder, train, config.batch_size)?;
        let mut opt = AdamState::new(adam);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(config.batch_size) {
                let x = rows(&feats, idx)?;
                let t = targets(task, train, idx, &normalizer)?;
                let (mut gr, binds) = {
                    let mut g = Graph::new();
                    let mut binds = Vec::new();
                    let xv = g.input(x);
                    let out = head_output(&mut g, task, &head, xv, &mut binds)?;
                    let loss = task_loss(&mut g, out, t)?;
                    if !g.scalar(loss).is_finite() {
                        return Err(Error::NonFinite { what: format!("{} head loss", task.name()) });
                    }
                    (g.backward(loss)?, binds)
                };
                gr.assign(&binds, head.params_mut().into_iter().map(|(_, t)| t));
                opt.step(head.params_mut())?;
            }
        }
    } else {
        let mut opt = AdamState::new(adam);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(config.batch_size) {
                let x = stack_observations(train, idx)?;
                let t = targets(task, train, idx, &normalizer)?;
                let (mut gr, enc_binds, head_binds) = {
                    let mut g = Graph::new();
                    let mut enc_binds = Vec::new();
                    let mut head_binds = Vec::new();
                    let xv = g.input(x);
                    let f = encoder.forward(&mut g, xv, &mut enc_binds)?;
                    let n = idx.len();
                    let f = g.reshape(f, [n, encoder.spec.feature_dim()])?;
                    let out = head_output(&mut g, task, &head, f, &mut head_binds)?;
                    let loss = task_loss(&mut g, out, t)?;
                    if !g.scalar(loss).is_finite() {
                        return Err(Error::NonFinite { what: format!("{} supervised loss", task.name()) });
                    }
                    (g.backward(loss)?, enc_binds, head_binds)
                };
                gr.assign(&enc_binds, encoder.params_mut().into_iter().map(|(_, t)| t));
                gr.assign(&head_binds, head.params_mut().into_iter().map(|(_, t)| t));
                let mut params = prefixed_mut("enc.", encoder.params_mut());
                params.extend(prefixed_mut("head.", head.params_mut()));
                opt.step(params)?;
            }
        }
    }
    Ok(TrainedHead {
        task,
        regime,
        head,
        encoder,
        normalizer,
    })
}

fn prefixed_mut<'t>(p: &str, v: Vec<(String, &'t mut Tensor)>) -> Vec<(String, &'t mut Tensor)> {
    v.into_iter().map(|(n, t)| (format!("{p}{n}"), t)).collect()
}

/// Raw head outputs (`[N, outputs]`, sigmoid applied for boxes).
pub fn predict(trained: &TrainedHead, src: &(impl SampleSource + ?Sized), chunk: usize) -> Result<Tensor> {
    let feats = extract_features(&trained.encoder, src, chunk)?;
    let mut g = Graph::new();
    let x = g.input(feats);
    let out = head_output(&mut g, trained.task, &trained.head, x, &mut Vec::new())?;
    Ok(g.to_tensor(out))
}

/// Axis-aligned IoU of two `(cx, cy, w, h)` boxes.
pub fn iou(a: BBox, b: BBox) -> Result<f64> {
    for (name, bx) in [("first", a), ("second", b)] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} box has non-positive size {}x{}",
                bx.w, bx.h
            )));
        }
    }
    let span = |c: f64, s: f64| (c - s / 2.0, c + s / 2.0);
    let (ax0, ax1) = span(a.cx, a.w);
    let (ay0, ay1) = span(a.cy, a.h);
    let (bx0, bx1) = span(b.cx, b.w);
    let (by0, by1) = span(b.cy, b.h);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // areas from the same spans as the intersection, so iou(a, a) is exactly 1
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Relative L1 error in percent.
pub fn relative_l1(pred: &[f64], truth: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs() / t).sum();
    100.0 * s / truth.len() as f64
}

/// Scores raw predictions against `src` labels.
pub fn score(
    task: Task,
    outputs: &Tensor,
    src: &(impl SampleSource + ?Sized),
    normalizer: &DistanceNormalizer,
    space: DistanceErrorSpace,
) -> Result<f64> {
    let n = src.len();
    if n == 0 {
        return Err(Error::Dataset("empty evaluation split".into()));
    }
    if outputs.shape() != [n, task.outputs()] {
        return Err(Error::Shape {
            op: "score",
            msg: format!("expected [{n}, {}], got {:?}", task.outputs(), outputs.shape()),
        });
    }
    let o = outputs.data();
    Ok(match task {
        Task::Classification => {
            let correct = (0..n)
                .filter(|&i| crate::sac::argmax(&o[i * 3..i * 3 + 3]) == src.class(i).index())
                .count();
            100.0 * correct as f64 / n as f64
        }
        Task::Distance => match space {
            DistanceErrorSpace::Meters => {
                let pred: Vec<f64> = o.iter().map(|&z| normalizer.distance(z as f64)).collect();
                let truth: Vec<f64> = (0..n).map(|i| src.distance(i)).collect();
                relative_l1(&pred, &truth)
            }
            DistanceErrorSpace::LogZ => {
                let s: f64 = (0..n).map(|i| (o[i] as f64 - normalizer.z(src.distance(i))).abs()).sum();
                100.0 * s / n as f64
            }
        },
        Task::Localization => {
            let mut s = 0.0;
            for i in 0..n {
                let p = &o[i * 4..i * 4 + 4];
                let pb = BBox::from_array([p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64]);
                // a saturated sigmoid can emit an exactly empty box; it covers nothing
                if pb.w > 0.0 && pb.h > 0.0 {
                    s += iou(pb, src.bbox(i))?;
                }
            }
            100.0 * s / n as f64
        }
    })
}

/// Metric in percent on `test`.
pub fn evaluate(
    trained: &TrainedHead,
    test: &(impl SampleSource + ?Sized),
    space: DistanceErrorSpace,
    chunk: usize,
) -> Result<f64> {
    let out = predict(trained, test, chunk)?;
    score(trained.task, &out, test, &trained.normalizer, space)
}

/// Frames seen by a uniform-random policy, kept as renderable keys.
pub fn collect_random_frames(playpen: &Playpen, frames: usize, seed: u64) -> Vec<crate::env::ViewKey> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episode = 0u64;
    let mut state = playpen.reset_state(seed.wrapping_mul(1_000_003));
    let mut out = Vec::with_capacity(frames);
    while out.len() < frames {
        out.push(playpen.view_key(&state));
        let a = Action::ALL[rng.gen_range(0..Action::ALL.len())];
        let done = playpen.step_state(&mut state, a).map(|(_, d, _)| d).unwrap_or(true);
        if done {
            episode += 1;
            state = playpen.reset_state(seed.wrapping_mul(1_000_003).wrapping_add(episode));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Autoencoder {
    pub fn new(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Autoencoder {
            encoder: Encoder::new(spec.clone(), &mut rng)?,
            decoder: Decoder::new(spec.clone(), &mut rng)?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.encoder.save_into("enc.", &mut c);
        self.decoder.save_into("dec.", &mut c);
        c
    }

    pub fn load_checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
        self.encoder.load_from("enc.", c)?;
        self.decoder.load_from("dec.", c)
    }

    /// Mean squared reconstruction error over `frames`.
    pub fn reconstruction_mse(&self, frames: &[Tensor], chunk: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for part in frames.chunks(chunk.max(1)) {
            let x = Tensor::stack(&part.iter().collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let f = self.encoder.forward(&mut g, xv, &mut Vec::new())?;
            let y = self.decoder.forward(&mut g, f, &mut Vec::new())?;
            let d: f64 = g
                .value(y)
                .iter()
                .zip(x.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            total += d;
            count += x.numel();
        }
        Ok(total / count as f64)
    }

    /// One pass of minibatch Adam on the reconstruction loss per epoch.
    pub fn train(
        &mut self,
        frames: &[Tensor],
        config: &AutoencoderConfig,
        seed: u64,
        on_epoch: impl FnMut(usize, f64),
    ) -> Result<()> {
        self.train_with(frames.len(), |i| Ok(frames[i].clone()), config, seed, on_epoch)
    }

    /// Like [`Autoencoder::train`] with frames produced on demand.
    pub fn train_with(
        &mut self,
        count: usize,
        frame: impl Fn(usize) -> Result<Tensor>,
        config: &AutoencoderConfig,
        seed: u64,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<()> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut opt = AdamState::new(AdamConfig::with_lr(config.lr));
        let mut order: Vec<usize> = (0..count).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for idx in order.chunks(config.batch_size) {
                let batch = idx.iter().map(|&i| frame(i)).collect::<Result<Vec<_>>>()?;
                let x = Tensor::stack(&batch.iter().collect::<Vec<_>>())?;
                drop(batch);
                let (mut gr, eb, db, loss) = {
                    let mut g = Graph::new();
                    let (mut eb, mut db) = (Vec::new(), Vec::new());
                    let target = g.input(x.clone());
                    let xv = g.input(x);
                    let f = self.encoder.forward(&mut g, xv, &mut eb)?;
                    let y = self.decoder.forward(&mut g, f, &mut db)?;
                    let loss = g.mse(y, target)?;
                    let lv = g.scalar(loss);
                    if !lv.is_finite() {
                        return Err(Error::NonFinite { what: "autoencoder reconstruction loss".into() });
                    }
                    (g.backward(loss)?, eb, db, lv)
                };
                gr.assign(&eb, self.encoder.params_mut().into_iter().map(|(_, t)| t));
                gr.assign(&db, self.decoder.params_mut().into_iter().map(|(_, t)| t));
                let mut params = prefixed_mut("enc.", self.encoder.params_mut());
                params.extend(prefixed_mut("dec.", self.decoder.params_mut()));
                opt.step(params)?;
                sum += loss as f64;
                batches += 1;
            }
            on_epoch(epoch, sum / batches.max(1) as f64);
        }
        Ok(())
    }
}

/// Collects random-policy frames from `playpen` and trains an autoencoder.
pub fn train_autoencoder(
    playpen: &Playpen,
    spec: &EncoderSpec,
    config: &AutoencoderConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Autoencoder> {
    config.validate()?;
    let keys = collect_random_frames(playpen, config.frames, seed);
    let mut ae = Autoencoder::new(spec, seed)?;
    ae.train_with(keys.len(), |i| Ok(playpen.render_view(&keys[i]).pixels), config, seed, on_epoch)?;
    Ok(ae)
}

/// One aggregated cell of the result matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub regime: TransferRegime,
    pub task: Task,
    /// Percent.
    pub mean: f64,
    /// Sample standard deviation over seeds divided by √seeds; NaN for a
    /// single seed.
    pub stderr: f64,
    pub seeds: usize,
    /// Per-seed values; empty when parsed back from CSV.
    pub values: Vec<f64>,
}

impl ResultRow {
    pub fn from_values(regime: TransferRegime, task: Task, values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            f64::NAN
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        };
        ResultRow {
            regime,
            task,
            mean,
            stderr,
            seeds: values.len(),
            values,
        }
    }
}

pub const RESULTS_HEADER: &str = "regime,task,metric,mean,stderr,seeds";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.4},{:.4},{}\n",
            r.regime.name(),
            r.task.name(),
            r.task.metric(),
            r.mean,
            r.stderr,
            r.seeds
        ));
    }
    s
}

/// Reads back the output of [`results_csv`].
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::Dataset(format!("results file must start with '{RESULTS_HEADER}'")));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |why: &str| Error::Dataset(format!("results line {}: {why}", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let regime: TransferRegime = f[0].parse().map_err(|_| bad("unknown regime"))?;
        let task: Task = f[1].parse().map_err(|_| bad("unknown task"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(ResultRow {
            regime,
            task,
            mean: num(f[3])?,
            stderr: num(f[4])?,
            seeds: f[5].parse().map_err(|_| bad("bad seed count"))?,
            values: Vec::new(),
        });
    }
    Ok(rows)
}

/// Tasks as rows, regimes as columns, `mean ± stderr` cells.
pub fn results_markdown(rows: &[ResultRow]) -> String {
    let mut s = String::from("| Task |");
    for r in TransferRegime::ALL {
        s.push_str(&format!(" {} |", r.title()));
    }
    s.push_str("\n|---|");
    for _ in TransferRegime::ALL {
        s.push_str("---|");
    }
    s.push('\n');
    for task in Task::ALL {
        s.push_str(&format!("| {} |", task.title()));
        for regime in TransferRegime::ALL {
            match rows.iter().find(|r| r.task == task && r.regime == regime) {
                Some(r) if r.stderr.is_nan() => s.push_str(&format!(" {:.1} |", r.mean)),
                Some(r) => s.push_str(&format!(" {:.1} ± {:.1} |", r.mean, r.stderr)),
                None => s.push_str(" n/a |"),
            }
        }
        s.push('\n');
    }
    s.push_str("\nClassification: top-1 accuracy (%). Distance estimation: relative L1 error (%). Recognition: mean IoU (%).\n");
    s
}

/// What the matrix runner needs besides the dataset.
pub struct MatrixInputs<'a> {
    pub spec: EncoderSpec,
    pub rl_checkpoint: Option<&'a Checkpoint>,
    pub ae_checkpoint: Option<&'a Checkpoint>,
    pub regimes: Vec<TransferRegime>,
    pub tasks: Vec<Task>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub regime: TransferRegime,
    pub task: Task,
    pub seed: u64,
    pub value: f64,
}

/// Runs every (regime, task, seed) cell and aggregates by (task, regime).
/// Results are independent of `jobs` and of completion order.
pub fn run_matrix(
    dataset: &Dataset,
    inputs: &MatrixInputs<'_>,
    config: &TransferConfig,
    mut on_cell: impl FnMut(&CellResult) + Send,
) -> Result<(Vec<ResultRow>, Vec<CellResult>)> {
    config.validate()?;
    if inputs.seeds.is_empty() || inputs.regimes.is_empty() || inputs.tasks.is_empty() {
        return Err(Error::InvalidArgument("empty regime, task or seed selection".into()));
    }
    // fail fast on missing or mismatched checkpoints
    for &r in &inputs.regimes {
        let ck = match r {
            TransferRegime::Autoencoder => inputs.ae_checkpoint,
            TransferRegime::Proposed => inputs.rl_checkpoint,
            _ => None,
        };
        r.encoder(&inputs.spec, ck, 0)?;
    }

    let mut cells = Vec::new();
    for &task in &inputs.tasks {
        for &regime in &inputs.regimes {
            for &seed in &inputs.seeds {
                cells.push((regime, task, seed));
            }
        }
    }

    let run_cell = |(regime, task, seed): (TransferRegime, Task, u64)| -> Result<CellResult> {
        let ck = match regime {
            TransferRegime::Autoencoder => inputs.ae_checkpoint,
            TransferRegime::Proposed => inputs.rl_checkpoint,
            _ => None,
        };
        let encoder = regime.encoder(&inputs.spec, ck, seed)?;
        let trained = train_head(task, regime, &dataset.train, encoder, config, seed)?;
        let value = evaluate(&trained, &dataset.test, config.distance_error, config.batch_size)?;
        Ok(CellResult {
            regime,
            task,
            seed,
            value,
        })
    };

    let results: Vec<CellResult> = if inputs.jobs <= 1 {
        let mut out = Vec::with_capacity(cells.len());
        for c in cells {
            let r = run_cell(c)?;
            on_cell(&r);
            out.push(r);
        }
        out
    } else {
        let queue = Mutex::new(cells.into_iter().enumerate().collect::<Vec<_>>());
        let done: Mutex<Vec<(usize, Result<CellResult>)>> = Mutex::new(Vec::new());
        let on_cell = Mutex::new(&mut on_cell);
        std::thread::scope(|s| {
            for _ in 0..inputs.jobs {
                s.spawn(|| loop {
                    let next = queue.lock().expect("queue lock").pop();
                    let Some((i, c)) = next else { break };
                    let r = run_cell(c);
                    if let Ok(cell) = &r {
                        (on_cell.lock().expect("callback lock"))(cell);
                    }
                    done.lock().expect("results lock").push((i, r));
                });
            }
        });
        let mut done = done.into_inner().expect("results lock");
        done.sort_by_key(|(i, _)| *i);
        done.into_iter().map(|(_, r)| r).collect::<Result<_>>()?
    };

    let mut grouped: BTreeMap<(Task, TransferRegime), Vec<f64>> = BTreeMap::new();
    for r in &results {
        grouped.entry((r.task, r.regime)).or_default().push(r.value);
    }
    let rows = grouped
        .into_iter()
        .map(|((task, regime), values)| ResultRow::from_values(regime, task, values))
        .collect();
    Ok((rows, results))
}
