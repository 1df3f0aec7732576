//! The playpen MDP: locomotion, intention-conditioned interaction rewards,
//! episode bookkeeping.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::sac::{EnvStep, Environment};
use crate::render::{self, ObjectClass, Observation, PropObject, Scene, SceneStyle, StereoCamera, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    MoveForward,
    TurnLeft,
    TurnRight,
    Hold,
    Kick,
    Press,
}

impl Action {
    pub const COUNT: usize = 6;
    pub const ALL: [Action; 6] = [
        Action::MoveForward,
        Action::TurnLeft,
        Action::TurnRight,
        Action::Hold,
        Action::Kick,
        Action::Press,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn interaction(self) -> Option<Interaction> {
        match self {
            Action::Hold => Some(Interaction::Hold),
            Action::Kick => Some(Interaction::Kick),
            Action::Press => Some(Interaction::Press),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    Hold,
    Kick,
    Press,
}

impl Interaction {
    pub const COUNT: usize = 3;
    pub const ALL: [Interaction; 3] = [Interaction::Hold, Interaction::Kick, Interaction::Press];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn action(self) -> Action {
        match self {
            Interaction::Hold => Action::Hold,
            Interaction::Kick => Action::Kick,
            Interaction::Press => Action::Press,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Success needs the intended interaction on its target object.
    Intention,
    /// Any interaction with any in-range object succeeds.
    AnyTouch,
}

/// Which object each interaction is meant for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Targets {
    pub hold: ObjectClass,
    pub kick: ObjectClass,
    pub press: ObjectClass,
}

impl Default for Targets {
    fn default() -> Self {
        Targets {
            hold: ObjectClass::Pyramid,
            kick: ObjectClass::Ball,
            press: ObjectClass::Doll,
        }
    }
}

impl Targets {
    pub fn get(&self, i: Interaction) -> ObjectClass {
        match i {
            Interaction::Hold => self.hold,
            Interaction::Kick => self.kick,
            Interaction::Press => self.press,
        }
    }

    pub fn is_bijection(&self) -> bool {
        let mut v = [self.hold, self.kick, self.press];
        v.sort();
        v[0] != v[1] && v[1] != v[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Arena is `[-arena_half, arena_half]²`.
    pub arena_half: f64,
    pub move_step: f64,
    pub turn_deg: f64,
    pub t_max: u32,
    pub spawn_min: f64,
    pub spawn_max: f64,
    pub min_separation: f64,
    pub reward: RewardTable,
    pub reward_mode: RewardMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            arena_half: 4.0,
            move_step: 0.1,
            turn_deg: 15.0,
            t_max: 500,
            spawn_min: 1.5,
            spawn_max: 3.5,
            min_separation: 1.2,
            reward: RewardTable::default(),
            reward_mode: RewardMode::Intention,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("env.{k}: {why}")));
        if !(self.arena_half > 0.0) {
            return bad("arena_half", "must be positive");
        }
        if !(self.move_step > 0.0) {
            return bad("move_step", "must be positive");
        }
        if !(self.turn_deg > 0.0 && self.turn_deg < 180.0) {
            return bad("turn_deg", "must lie in (0, 180)");
        }
        if self.t_max == 0 {
            return bad("t_max", "must be at least 1");
        }
        if !(self.spawn_min > 0.0 && self.spawn_min <= self.spawn_max) {
            return bad("spawn_min", "must satisfy 0 < spawn_min <= spawn_max");
        }
        if self.spawn_max >= self.arena_half * std::f64::consts::SQRT_2 {
            return bad("spawn_max", "objects would spawn outside the arena");
        }
        if self.min_separation < 0.0 {
            return bad("min_separation", "must be non-negative");
        }
        self.reward.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTable {
    pub target: Targets,
    pub r_success: f64,
    pub r_wrong: f64,
    pub r_step: f64,
    pub interaction_range: f64,
    pub interaction_half_angle_deg: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        RewardTable {
            target: Targets::default(),
            r_success: 1.0,
            r_wrong: -0.2,
            r_step: -0.005,
            interaction_range: 0.8,
            interaction_half_angle_deg: 30.0,
        }
    }
}

impl RewardTable {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("env.reward.{k}: {why}")));
        if !self.target.is_bijection() {
            return bad("target", "interactions must map to distinct objects");
        }
        if !(self.r_step < 0.0 && self.r_step.abs() < self.r_success) {
            return bad("r_step", "must be negative and much smaller than r_success");
        }
        if !(self.interaction_range > 0.0) {
            return bad("interaction_range", "must be positive");
        }
        if !(self.interaction_half_angle_deg > 0.0 && self.interaction_half_angle_deg <= 180.0) {
            return bad("interaction_half_angle_deg", "must lie in (0, 180]");
        }
        Ok(())
    }
}

/// Reward for one interaction attempt, including the per-step cost.
/// Returns `(reward, success)`.
pub fn reward(
    object: Option<ObjectClass>,
    action: Interaction,
    intention: Interaction,
    table: &RewardTable,
    mode: RewardMode,
) -> (f64, bool) {
    let Some(object) = object else {
        return (table.r_step, false);
    };
    let success = match mode {
        RewardMode::Intention => action == intention && object == table.target.get(action),
        RewardMode::AnyTouch => true,
    };
    let bonus = if success { table.r_success } else { table.r_wrong };
    (bonus + table.r_step, success)
}

/// Agent position and heading. Heading is a base angle plus an integer
/// number of turn quanta, so left/right turns undo each other exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub x: f64,
    pub z: f64,
    pub base_yaw: f64,
    pub turns: i32,
}

impl AgentPose {
    pub fn yaw(&self, turn_deg: f64) -> f64 {
        self.base_yaw + self.turns as f64 * turn_deg.to_radians()
    }
}

/// True iff `object` is within reach of an agent at `pose` facing `yaw`.
pub fn in_range(pose: &AgentPose, yaw: f64, object: &PropObject, table: &RewardTable) -> bool {
    let dx = object.position.x - pose.x;
    let dz = object.position.z - pose.z;
    let dist = (dx * dx + dz * dz).sqrt();
    if dist > table.interaction_range {
        return false;
    }
    if dist == 0.0 {
        return true;
    }
    let f = render::forward(yaw);
    let cos = (f.x * dx + f.z * dz) / dist;
    cos >= table.interaction_half_angle_deg.to_radians().cos()
}

/// Signed bearing of `object` relative to the agent's heading, in radians;
/// positive means to the agent's right.
pub fn bearing(pose: &AgentPose, yaw: f64, object: &PropObject) -> f64 {
    let dx = object.position.x - pose.x;
    let dz = object.position.z - pose.z;
    let target = dx.atan2(dz);
    let mut d = target - yaw;
    while d > std::f64::consts::PI {
        d -= std::f64::consts::TAU;
    }
    while d < -std::f64::consts::PI {
        d += std::f64::consts::TAU;
    }
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub pose: AgentPose,
    pub scene: Arc<Scene>,
    pub t: u32,
    pub intention: Interaction,
    pub done: bool,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    /// Class of the object the interaction landed on, if any.
    pub hit: Option<ObjectClass>,
    pub matched: bool,
    /// Episode ended on the time limit rather than success.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Renderable handle for an observation: the episode scene plus a pose.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewKey {
    pub scene: Arc<Scene>,
    pub pose: AgentPose,
}

/// Environment factory and dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct Playpen {
    pub config: EnvConfig,
    pub style: SceneStyle,
}

impl Playpen {
    pub fn new(config: EnvConfig, style: SceneStyle) -> Result<Self> {
        config.validate()?;
        Ok(Playpen { config, style })
    }

    pub fn camera(&self, pose: &AgentPose) -> StereoCamera {
        self.style.camera(pose.x, pose.z, pose.yaw(self.config.turn_deg))
    }

    pub fn yaw(&self, pose: &AgentPose) -> f64 {
        pose.yaw(self.config.turn_deg)
    }

    pub fn observe(&self, state: &EnvState) -> Observation {
        render::render(&state.scene, &self.camera(&state.pose))
    }

    pub fn render_view(&self, key: &ViewKey) -> Observation {
        render::render(&key.scene, &self.camera(&key.pose))
    }

    pub fn view_key(&self, state: &EnvState) -> ViewKey {
        ViewKey {
            scene: Arc::clone(&state.scene),
            pose: state.pose,
        }
    }

    /// New episode without rendering.
    pub fn reset_state(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.config;
        let base_yaw = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut scene = Scene::empty(&self.style);
        for (id, class) in ObjectClass::ALL.into_iter().enumerate() {
            let (x, z) = loop {
                let d = rng.gen_range(c.spawn_min..=c.spawn_max);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let (x, z) = (d * a.sin(), d * a.cos());
                let clear = scene.objects.iter().all(|o: &PropObject| {
                    let (dx, dz) = (o.position.x - x, o.position.z - z);
                    (dx * dx + dz * dz).sqrt() >= c.min_separation
                });
                if clear {
                    break (x, z);
                }
            };
            let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
            scene.objects.push(PropObject::on_floor(
                id as u32,
                class,
                x,
                z,
                yaw,
                &self.style.geometry,
            ));
        }
        let intention = Interaction::ALL[rng.gen_range(0..Interaction::COUNT)];
        EnvState {
            pose: AgentPose {
                x: 0.0,
                z: 0.0,
                base_yaw,
                turns: 0,
            },
            scene: Arc::new(scene),
            t: 0,
            intention,
            done: false,
            seed,
        }
    }

    pub fn reset(&self, seed: u64) -> (EnvState, Observation, Interaction) {
        let state = self.reset_state(seed);
        let obs = self.observe(&state);
        let intention = state.intention;
        (state, obs, intention)
    }

    /// Nearest in-range object for the current pose.
    pub fn reachable<'s>(&self, state: &'s EnvState) -> Option<&'s PropObject> {
        let yaw = self.yaw(&state.pose);
        let table = &self.config.reward;
        state
            .scene
            .objects
            .iter()
            .filter(|o| in_range(&state.pose, yaw, o, table))
            .min_by(|a, b| {
                let da = Vec3::new(a.position.x - state.pose.x, 0.0, a.position.z - state.pose.z).norm();
                let db = Vec3::new(b.position.x - state.pose.x, 0.0, b.position.z - state.pose.z).norm();
                da.total_cmp(&db)
            })
    }

    /// Advances the state without rendering. Returns `(reward, done, info)`.
    pub fn step_state(&self, state: &mut EnvState, action: Action) -> Result<(f64, bool, StepInfo)> {
        if state.done {
            return Err(Error::Protocol("step called on a finished episode; reset first".into()));
        }
        let c = &self.config;
        let mut info = StepInfo::default();
        let mut reward_value = c.reward.r_step;
        let mut success = false;
        match action {
            Action::MoveForward => {
                let f = render::forward(self.yaw(&state.pose));
                state.pose.x = (state.pose.x + f.x * c.move_step).clamp(-c.arena_half, c.arena_half);
                state.pose.z = (state.pose.z + f.z * c.move_step).clamp(-c.arena_half, c.arena_half);
            }
            Action::TurnLeft => state.pose.turns -= 1,
            Action::TurnRight => state.pose.turns += 1,
            Action::Hold | Action::Kick | Action::Press => {
                let interaction = action.interaction().expect("interaction action");
                let hit = self.reachable(state).map(|o| o.class);
                let (r, s) = reward(hit, interaction, state.intention, &c.reward, c.reward_mode);
                reward_value = r;
                success = s;
                info.hit = hit;
                info.matched = s;
            }
        }
        state.t += 1;
        let timeout = state.t >= c.t_max;
        state.done = success || timeout;
        info.truncated = timeout && !success;
        Ok((reward_value, state.done, info))
    }

    pub fn step(&self, state: &mut EnvState, action: Action) -> Result<StepResult> {
        let (reward, done, info) = self.step_state(state, action)?;
        Ok(StepResult {
            observation: self.observe(state),
            reward,
            done,
            info,
        })
    }

    /// Hand-written controller: face the intended target, walk up, interact.
    pub fn oracle_action(&self, state: &EnvState) -> Action {
        let target_class = self.config.reward.target.get(state.intention);
        let target = state
            .scene
            .objects
            .iter()
            .find(|o| o.class == target_class)
            .expect("every class is present");
        let yaw = self.yaw(&state.pose);
        if in_range(&state.pose, yaw, target, &self.config.reward) {
            return state.intention.action();
        }
        let b = bearing(&state.pose, yaw, target);
        let quantum = self.config.turn_deg.to_radians();
        if b > quantum / 2.0 {
            Action::TurnRight
        } else if b < -quantum / 2.0 {
            Action::TurnLeft
        } else {
            Action::MoveForward
        }
    }
}

/// [`Playpen`] holding one live episode, driven through [`Environment`].
#[derive(Clone, Debug)]
pub struct PlaypenEnv {
    pub playpen: Playpen,
    pub state: Option<EnvState>,
}

impl PlaypenEnv {
    pub fn new(playpen: Playpen) -> Self {
        PlaypenEnv { playpen, state: None }
    }

    /// Scripted expert action for the live episode.
    pub fn oracle_action(&self) -> Result<usize> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Protocol("oracle queried before reset".into()))?;
        Ok(self.playpen.oracle_action(state).index())
    }
}

impl Environment for PlaypenEnv {
    type Key = ViewKey;

    fn num_actions(&self) -> usize {
        Action::ALL.len()
    }

    fn reset(&mut self, seed: u64) -> Result<(ViewKey, usize)> {
        let state = self.playpen.reset_state(seed);
        let key = self.playpen.view_key(&state);
        let intention = state.intention.index();
        self.state = Some(state);
        Ok((key, intention))
    }

    fn step(&mut self, action: usize) -> Result<EnvStep<ViewKey>> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Protocol("step called before reset".into()))?;
        let action = Action::from_index(action).ok_or(Error::LabelOutOfRange {
            label: action,
            classes: Action::ALL.len(),
        })?;
        let (reward, done, info) = self.playpen.step_state(state, action)?;
        Ok(EnvStep {
            next: self.playpen.view_key(state),
            reward,
            terminal: done && !info.truncated,
            truncated: info.truncated,
            success: info.matched,
        })
    }

    fn materialize(&self, key: &ViewKey) -> Result<Tensor> {
        Ok(self.playpen.render_view(key).pixels)
    }
}
