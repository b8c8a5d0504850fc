//! Deterministic multilane highway simulator.
//!
//! The ego vehicle (index 0) follows discrete meta-actions; traffic follows
//! IDM for speed and MOBIL for lane changes. Every lane change, ego or
//! traffic, starts on a decision-frame boundary and completes within that
//! frame, so all vehicles are lane-centered between `step` calls.

mod collision;
mod config;
mod dynamics;
mod observation;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use collision::{footprints_overlap, Footprint};
pub use config::{EnvConfig, PRESET_NAMES};
pub use dynamics::{
    gap_between, idm_acceleration, idm_behind, mobil_should_change, IdmParams, MobilParams, Neighborhood,
};
pub use observation::{observe, Observation, OBSERVATION_FEATURES};

pub const VEHICLE_LENGTH: f64 = 5.0;
pub const VEHICLE_WIDTH: f64 = 2.0;
/// Speed change applied by FASTER/SLOWER.
pub const TARGET_SPEED_STEP: f64 = 5.0;
/// Hard speed cap for every vehicle.
pub const MAX_SPEED: f64 = 40.0;
/// Reported `gap_front` when no leader is within range.
pub const NO_LEADER_GAP: f64 = 1000.0;

/// Each lane holds a platoon. A new vehicle joins a random lane
/// `lanes * (SPACING_BASE + speed) * exp(-SPACING_LANE_DECAY * lanes) / density`
/// meters (jittered by `SPAWN_JITTER`) ahead of that lane's last vehicle. The
/// first vehicle of a lane other than the ego's starts up to half a headway
/// beside or behind the ego.
const SPACING_BASE: f64 = 12.0;
const SPACING_LANE_DECAY: f64 = 5.0 / 40.0;
const SPAWN_JITTER: (f64, f64) = (0.9, 1.1);
/// Minimum bumper gap between spawned vehicles sharing a lane.
const MIN_SPAWN_GAP: f64 = 2.0;
const SPAWN_ATTEMPTS: usize = 1000;
/// Initial (and target) traffic speeds, m/s.
const TRAFFIC_SPEED_RANGE: (f64, f64) = (23.0, 25.0);
/// Proportional gain of the ego speed controller (1/s).
const EGO_SPEED_GAIN: f64 = 1.0 / 0.6;
const EGO_MAX_ACCELERATION: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid environment config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("unknown environment preset '{0}'")]
    UnknownPreset(String),
    #[error("unsatisfiable spawn: could not place traffic vehicle {vehicle} after {attempts} attempts")]
    UnsatisfiableSpawn { vehicle: usize, attempts: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
}

/// Discrete ego meta-action. The integer codes are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    LaneLeft = 0,
    Idle = 1,
    LaneRight = 2,
    Faster = 3,
    Slower = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::LaneLeft,
        Action::Idle,
        Action::LaneRight,
        Action::Faster,
        Action::Slower,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub longitudinal_position: f64,
    /// 0 is the leftmost lane.
    pub lane_index: usize,
    /// Lateral displacement from the lane center, positive toward the right.
    pub lateral_offset: f64,
    pub speed: f64,
    pub target_speed: f64,
    pub length: f64,
    pub width: f64,
    pub is_ego: bool,
    /// Destination lane of an in-progress lane change.
    pub changing_to: Option<usize>,
}

impl VehicleState {
    pub fn ego(x: f64, lane: usize, speed: f64, target_speed: f64) -> Self {
        Self {
            is_ego: true,
            ..Self::traffic(x, lane, speed, target_speed)
        }
    }

    pub fn traffic(x: f64, lane: usize, speed: f64, target_speed: f64) -> Self {
        Self {
            longitudinal_position: x,
            lane_index: lane,
            lateral_offset: 0.0,
            speed,
            target_speed,
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            is_ego: false,
            changing_to: None,
        }
    }

    /// Whether this vehicle's footprint touches `lane`.
    pub fn occupies(&self, lane: usize) -> bool {
        self.lane_index == lane || self.changing_to == Some(lane)
    }

    pub fn lateral_position(&self, lane_width: f64) -> f64 {
        self.lane_index as f64 * lane_width + self.lateral_offset
    }

    /// Heading implied by the lateral motion of a lane change.
    pub fn heading(&self, lane_width: f64, policy_frequency: u32) -> f64 {
        match self.changing_to {
            Some(target) if self.speed > 0.0 => {
                let lateral_speed = lane_width * f64::from(policy_frequency);
                let sign = if target > self.lane_index { 1.0 } else { -1.0 };
                (sign * lateral_speed).atan2(self.speed)
            }
            Some(target) => {
                if target > self.lane_index {
                    std::f64::consts::FRAC_PI_2
                } else {
                    -std::f64::consts::FRAC_PI_2
                }
            }
            None => 0.0,
        }
    }

    pub fn footprint(&self, lane_width: f64, policy_frequency: u32) -> Footprint {
        Footprint {
            x: self.longitudinal_position,
            y: self.lateral_position(lane_width),
            length: self.length,
            width: self.width,
            heading: self.heading(lane_width, policy_frequency),
        }
    }
}

/// Full world state. `vehicles[0]` is the ego.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub vehicles: Vec<VehicleState>,
    pub frame: u32,
    pub crashed: bool,
    pub rng: ChaCha8Rng,
}

impl SimState {
    /// Builds a state from explicit vehicles (ego first), for fixtures.
    pub fn from_vehicles(vehicles: Vec<VehicleState>, seed: u64) -> Self {
        Self {
            vehicles,
            frame: 0,
            crashed: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn ego(&self) -> &VehicleState {
        &self.vehicles[0]
    }

    pub fn is_terminal(&self, config: &EnvConfig) -> bool {
        self.crashed || self.frame >= config.duration_frames
    }
}

/// Per-step snapshot exposed to reward programs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub crashed: bool,
    pub ego_speed: f64,
    pub ego_lane: usize,
    /// Bumper-to-bumper distance to the ego's leader, [`NO_LEADER_GAP`] if none.
    pub gap_front: f64,
    /// Leader speed minus ego speed; 0 without a leader.
    pub front_speed_delta: f64,
    pub on_rightmost_lane: bool,
    /// Code of the requested action.
    pub action_code: u8,
    pub lateral_offset_abs: f64,
    /// Crashed or out of frames after this step.
    pub done: bool,
    /// The state was already terminal; nothing was simulated.
    pub rejected: bool,
}

/// Spawns a scenario from `config` (including its seed).
pub fn reset(config: &EnvConfig) -> Result<SimState, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [speed_min, speed_max] = config.speed_limits;

    let ego_lane = rng.random_range(0..config.lanes_count);
    let ego_speed = (0.5 * (speed_min + speed_max)).clamp(speed_min, speed_max);
    let mut vehicles = vec![VehicleState::ego(0.0, ego_lane, ego_speed, ego_speed)];

    let lanes = config.lanes_count as f64;
    let lane_factor = (-SPACING_LANE_DECAY * lanes).exp();
    let mut last_in_lane: Vec<Option<f64>> = vec![None; config.lanes_count];
    last_in_lane[ego_lane] = Some(0.0);
    for vehicle in 0..config.traffic_count() {
        let speed = rng.random_range(TRAFFIC_SPEED_RANGE.0..TRAFFIC_SPEED_RANGE.1);
        let mut placed = None;
        for _ in 0..SPAWN_ATTEMPTS {
            let lane = rng.random_range(0..config.lanes_count);
            let headway = lanes * (SPACING_BASE + speed) * lane_factor / config.vehicles_density
                * rng.random_range(SPAWN_JITTER.0..SPAWN_JITTER.1);
            match last_in_lane[lane] {
                Some(prev) if headway >= VEHICLE_LENGTH + MIN_SPAWN_GAP => {
                    placed = Some((lane, prev + headway));
                    break;
                }
                Some(_) => {}
                None => {
                    placed = Some((lane, headway * rng.random_range(-0.5..0.5)));
                    break;
                }
            }
        }
        let (lane, x) = placed.ok_or(SimError::UnsatisfiableSpawn {
            vehicle,
            attempts: SPAWN_ATTEMPTS,
        })?;
        last_in_lane[lane] = Some(x);
        vehicles.push(VehicleState::traffic(x, lane, speed, speed));
    }

    Ok(SimState {
        vehicles,
        frame: 0,
        crashed: false,
        rng,
    })
}

/// True iff the ego footprint strictly overlaps any other vehicle.
pub fn check_collision(state: &SimState, config: &EnvConfig) -> bool {
    let Some((ego, others)) = state.vehicles.split_first() else {
        return false;
    };
    let ego_print = ego.footprint(config.lane_width, config.policy_frequency);
    others.iter().any(|other| {
        // Cheap longitudinal reject before the footprint test.
        (other.longitudinal_position - ego.longitudinal_position).abs() < ego.length + other.length
            && footprints_overlap(&ego_print, &other.footprint(config.lane_width, config.policy_frequency))
    })
}

/// Functional form of [`Highway::step`].
pub fn step(config: &EnvConfig, state: &SimState, action: Action) -> (SimState, Observation, StepInfo) {
    let mut next = state.clone();
    let info = step_in_place(config, &mut next, action);
    let observation = observe(&next, config);
    (next, observation, info)
}

fn step_in_place(config: &EnvConfig, state: &mut SimState, action: Action) -> StepInfo {
    if state.is_terminal(config) {
        let mut info = snapshot(config, state, action);
        info.rejected = true;
        info.done = true;
        return info;
    }

    apply_ego_action(config, state, action);
    plan_traffic_lane_changes(config, state);

    let ticks = config.ticks_per_frame();
    for _ in 0..ticks {
        integrate_tick(config, state);
        if check_collision(state, config) {
            state.crashed = true;
            break;
        }
    }
    // A crash may interrupt lane changes; snap everyone to their nearest lane.
    for vehicle in &mut state.vehicles {
        finish_lane_change(vehicle, config.lane_width);
    }
    state.frame += 1;

    let mut info = snapshot(config, state, action);
    info.done = state.is_terminal(config);
    info
}

fn apply_ego_action(config: &EnvConfig, state: &mut SimState, action: Action) {
    let [speed_min, speed_max] = config.speed_limits;
    let ego = &mut state.vehicles[0];
    match action {
        Action::Faster => ego.target_speed = (ego.target_speed + TARGET_SPEED_STEP).clamp(speed_min, speed_max),
        Action::Slower => ego.target_speed = (ego.target_speed - TARGET_SPEED_STEP).clamp(speed_min, speed_max),
        Action::LaneLeft if ego.lane_index > 0 => ego.changing_to = Some(ego.lane_index - 1),
        Action::LaneRight if ego.lane_index + 1 < config.lanes_count => ego.changing_to = Some(ego.lane_index + 1),
        // Lane changes off the road degrade to IDLE.
        Action::LaneLeft | Action::LaneRight | Action::Idle => {}
    }
}

/// Indices of the nearest leader and follower of vehicle `me` among the
/// vehicles occupying `lane`, excluding `me`.
fn lane_neighbors(vehicles: &[VehicleState], me: usize, lane: usize) -> (Option<usize>, Option<usize>) {
    let x = vehicles[me].longitudinal_position;
    let mut leader: Option<(f64, usize)> = None;
    let mut follower: Option<(f64, usize)> = None;
    for (i, other) in vehicles.iter().enumerate() {
        if i == me || !other.occupies(lane) {
            continue;
        }
        let dx = other.longitudinal_position - x;
        if dx > 0.0 || (dx == 0.0 && i > me) {
            if leader.is_none_or(|(best, _)| dx < best) {
                leader = Some((dx, i));
            }
        } else if follower.is_none_or(|(best, _)| dx > best) {
            follower = Some((dx, i));
        }
    }
    (leader.map(|(_, i)| i), follower.map(|(_, i)| i))
}

fn plan_traffic_lane_changes(config: &EnvConfig, state: &mut SimState) {
    let idm = IdmParams::default();
    let mobil = MobilParams::default();
    let vehicles = &state.vehicles;
    let mut decisions = Vec::new();
    for (i, vehicle) in vehicles.iter().enumerate().skip(1) {
        if vehicle.changing_to.is_some() {
            continue;
        }
        let (current_leader, current_follower) = lane_neighbors(vehicles, i, vehicle.lane_index);
        let candidates = [
            vehicle.lane_index.checked_sub(1),
            Some(vehicle.lane_index + 1).filter(|&l| l < config.lanes_count),
        ];
        for lane in candidates.into_iter().flatten() {
            let (target_leader, target_follower) = lane_neighbors(vehicles, i, lane);
            let hood = Neighborhood {
                current_leader: current_leader.map(|j| &vehicles[j]),
                current_follower: current_follower.map(|j| &vehicles[j]),
                target_leader: target_leader.map(|j| &vehicles[j]),
                target_follower: target_follower.map(|j| &vehicles[j]),
            };
            if mobil_should_change(vehicle, lane, &hood, &idm, &mobil) {
                decisions.push((i, lane));
                break;
            }
        }
    }
    for (i, lane) in decisions {
        state.vehicles[i].changing_to = Some(lane);
    }
}

fn traffic_acceleration(vehicles: &[VehicleState], i: usize, idm: &IdmParams) -> f64 {
    let vehicle = &vehicles[i];
    let lanes = [Some(vehicle.lane_index), vehicle.changing_to];
    lanes
        .into_iter()
        .flatten()
        .map(|lane| {
            let (leader, _) = lane_neighbors(vehicles, i, lane);
            idm_behind(vehicle, leader.map(|j| &vehicles[j]), idm)
        })
        .fold(f64::INFINITY, f64::min)
}

fn integrate_tick(config: &EnvConfig, state: &mut SimState) {
    let dt = config.dt();
    let idm = IdmParams::default();
    let accelerations: Vec<f64> = (0..state.vehicles.len())
        .map(|i| {
            let vehicle = &state.vehicles[i];
            if vehicle.is_ego {
                (EGO_SPEED_GAIN * (vehicle.target_speed - vehicle.speed))
                    .clamp(-EGO_MAX_ACCELERATION, EGO_MAX_ACCELERATION)
            } else {
                traffic_acceleration(&state.vehicles, i, &idm)
            }
        })
        .collect();

    let lateral_step = config.lane_width / f64::from(config.ticks_per_frame());
    for (vehicle, accel) in state.vehicles.iter_mut().zip(accelerations) {
        let v = vehicle.speed;
        let next_speed = v + accel * dt;
        if next_speed < 0.0 {
            // Stops within the tick; never reverses.
            vehicle.longitudinal_position += v * v / (2.0 * -accel);
            vehicle.speed = 0.0;
        } else {
            let next_speed = next_speed.min(MAX_SPEED);
            vehicle.longitudinal_position += 0.5 * (v + next_speed) * dt;
            vehicle.speed = next_speed;
        }

        if let Some(target) = vehicle.changing_to {
            let sign = if target > vehicle.lane_index { 1.0 } else { -1.0 };
            vehicle.lateral_offset += sign * lateral_step;
            if vehicle.lateral_offset.abs() >= config.lane_width - 1e-9 {
                vehicle.lane_index = target;
                vehicle.lateral_offset = 0.0;
                vehicle.changing_to = None;
            }
        }
    }
}

fn finish_lane_change(vehicle: &mut VehicleState, lane_width: f64) {
    if let Some(target) = vehicle.changing_to.take() {
        if vehicle.lateral_offset.abs() >= 0.5 * lane_width {
            vehicle.lane_index = target;
        }
        vehicle.lateral_offset = 0.0;
    }
}

fn snapshot(config: &EnvConfig, state: &SimState, action: Action) -> StepInfo {
    let ego = state.ego();
    let (leader, _) = lane_neighbors(&state.vehicles, 0, ego.lane_index);
    let (gap_front, front_speed_delta) = match leader.map(|j| &state.vehicles[j]) {
        Some(leader) => {
            let gap = gap_between(ego, leader);
            if gap >= NO_LEADER_GAP {
                (NO_LEADER_GAP, 0.0)
            } else {
                (gap.max(f64::MIN_POSITIVE), leader.speed - ego.speed)
            }
        }
        None => (NO_LEADER_GAP, 0.0),
    };
    StepInfo {
        crashed: state.crashed,
        ego_speed: ego.speed,
        ego_lane: ego.lane_index,
        gap_front,
        front_speed_delta,
        on_rightmost_lane: ego.lane_index + 1 == config.lanes_count,
        action_code: action.code(),
        lateral_offset_abs: ego.lateral_offset.abs(),
        done: false,
        rejected: false,
    }
}

/// A simulator instance: config plus evolving state.
#[derive(Debug, Clone)]
pub struct Highway {
    config: EnvConfig,
    state: SimState,
}

impl Highway {
    pub fn reset(config: &EnvConfig) -> Result<Self, SimError> {
        Ok(Self {
            state: reset(config)?,
            config: config.clone(),
        })
    }

    /// Wraps a hand-built state, for fixtures.
    pub fn from_state(config: &EnvConfig, state: SimState) -> Result<Self, SimError> {
        config.validate()?;
        if state.vehicles.first().is_none_or(|v| !v.is_ego) {
            return Err(SimError::InvalidState("vehicles[0] must be the ego".into()));
        }
        if let Some(v) = state.vehicles.iter().find(|v| v.lane_index >= config.lanes_count) {
            return Err(SimError::InvalidState(format!(
                "lane {} outside a {}-lane road",
                v.lane_index, config.lanes_count
            )));
        }
        Ok(Self {
            config: config.clone(),
            state,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn observe(&self) -> Observation {
        observe(&self.state, &self.config)
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal(&self.config)
    }

    pub fn step(&mut self, action: Action) -> (Observation, StepInfo) {
        let info = step_in_place(&self.config, &mut self.state, action);
        (self.observe(), info)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn empty_road() -> EnvConfig {
        EnvConfig {
            vehicles_count: 0,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let config = EnvConfig::preset("lane-3-density-1").unwrap().with_seed(42);
        assert_eq!(reset(&config).unwrap(), reset(&config).unwrap());
    }

    #[test]
    fn dense_spawn_has_no_overlap() {
        let config = EnvConfig::preset("lane-4-density-2").unwrap().with_seed(7);
        let state = reset(&config).unwrap();
        assert_eq!(
            state.vehicles.len() - 1,
            (config.vehicles_count as f64 * 2.0).ceil() as usize
        );
        let prints: Vec<_> = state
            .vehicles
            .iter()
            .map(|v| v.footprint(config.lane_width, config.policy_frequency))
            .collect();
        for i in 0..prints.len() {
            for j in i + 1..prints.len() {
                let (a, b) = (&prints[i], &prints[j]);
                let disjoint =
                    (a.x - b.x).abs() >= 0.5 * (a.length + b.length) || (a.y - b.y).abs() >= 0.5 * (a.width + b.width);
                assert!(disjoint, "vehicles {i} and {j} overlap");
            }
        }
    }

    #[test]
    fn protocol_seeds_give_distinct_scenarios() {
        let base = EnvConfig::preset("lane-3-density-1.5").unwrap();
        let states: Vec<_> = (0..100).map(|s| reset(&base.with_seed(s)).unwrap()).collect();
        for i in 0..states.len() {
            for j in i + 1..states.len() {
                assert_ne!(states[i].vehicles, states[j].vehicles, "seeds {i} and {j}");
            }
        }
    }

    #[test]
    fn overcrowded_spawn_is_rejected() {
        let config = EnvConfig {
            lanes_count: 2,
            vehicles_density: 10.0,
            ..EnvConfig::default()
        };
        assert!(matches!(reset(&config), Err(SimError::UnsatisfiableSpawn { .. })));
    }

    #[test]
    fn empty_road_idle_converges_to_target() {
        let mut env = Highway::reset(&empty_road()).unwrap();
        let target = env.state().ego().target_speed;
        let mut env_speed = 0.0;
        for _ in 0..10 {
            let (_, info) = env.step(Action::Idle);
            assert!(!info.crashed);
            env_speed = info.ego_speed;
        }
        assert!((env_speed - target).abs() < 1e-9);

        let (_, info) = env.step(Action::Faster);
        assert_eq!(env.state().ego().target_speed, target + TARGET_SPEED_STEP);
        assert!(info.ego_speed > target);
        for _ in 0..8 {
            env.step(Action::Idle);
        }
        assert!((env.state().ego().speed - (target + TARGET_SPEED_STEP)).abs() < 1e-6);
    }

    #[test]
    fn lane_change_off_road_degrades_to_idle() {
        let config = empty_road();
        let state = SimState::from_vehicles(vec![VehicleState::ego(0.0, 0, 25.0, 25.0)], 0);
        let mut env = Highway::from_state(&config, state).unwrap();
        let (_, info) = env.step(Action::LaneLeft);
        assert_eq!(info.ego_lane, 0);
        assert_eq!(env.state().ego().lateral_offset, 0.0);

        let (_, info) = env.step(Action::LaneRight);
        assert_eq!(info.ego_lane, 1);
        let (_, info) = env.step(Action::LaneRight);
        assert_eq!(info.ego_lane, 2);
        assert!(info.on_rightmost_lane);
        let (_, info) = env.step(Action::LaneRight);
        assert_eq!(info.ego_lane, 2);
    }

    #[test]
    fn target_speed_stays_in_limits() {
        let state = SimState::from_vehicles(vec![VehicleState::ego(0.0, 1, 25.0, 25.0)], 0);
        let mut env = Highway::from_state(&empty_road(), state).unwrap();
        for _ in 0..4 {
            env.step(Action::Faster);
        }
        assert_eq!(env.state().ego().target_speed, 30.0);
        for _ in 0..4 {
            env.step(Action::Slower);
        }
        assert_eq!(env.state().ego().target_speed, 20.0);
    }

    /// Ego at 30 m/s closing on a leader at 20 m/s with `gap` meters between
    /// centers; both hold speed until contact.
    fn rear_end_fixture(gap: f64) -> Highway {
        let vehicles = vec![
            VehicleState::ego(0.0, 1, 30.0, 30.0),
            VehicleState::traffic(gap, 1, 20.0, 20.0),
        ];
        let state = SimState::from_vehicles(vehicles, 0);
        Highway::from_state(&empty_road(), state).unwrap()
    }

    /// First decision frame (1-based) containing a tick with center
    /// distance below one vehicle length.
    fn closed_form_crash_frame(gap: f64, closing: f64, ticks_per_frame: u32, hz: f64) -> u32 {
        let overlap_time = (gap - VEHICLE_LENGTH) / closing;
        let first_tick = (overlap_time * hz).floor() as u32 + 1;
        first_tick.div_ceil(ticks_per_frame)
    }

    #[test]
    fn rear_end_crash_at_closed_form_frame() {
        for gap in [100.3, 57.7, 12.1, 160.9] {
            let mut env = rear_end_fixture(gap);
            let expected = closed_form_crash_frame(gap, 10.0, 15, 15.0);
            let mut crash_frame = None;
            for frame in 1..=40 {
                let (_, info) = env.step(Action::Idle);
                if info.crashed {
                    crash_frame = Some(frame);
                    break;
                }
            }
            assert_eq!(crash_frame, Some(expected), "gap {gap}");
        }
    }

    #[test]
    fn stepping_terminal_state_is_a_no_op() {
        let mut env = rear_end_fixture(12.1);
        let (_, info) = env.step(Action::Idle);
        assert!(info.crashed && info.done && !info.rejected);
        let before = env.state().clone();
        let (_, info) = env.step(Action::Faster);
        assert!(info.rejected && info.crashed);
        assert_eq!(env.state(), &before);

        let config = EnvConfig {
            duration_frames: 2,
            ..empty_road()
        };
        let mut env = Highway::reset(&config).unwrap();
        env.step(Action::Idle);
        let (_, info) = env.step(Action::Idle);
        assert!(info.done && !info.rejected);
        let (_, info) = env.step(Action::Idle);
        assert!(info.rejected);
        assert_eq!(env.state().frame, 2);
    }

    #[test]
    fn collision_is_symmetric_and_self_safe() {
        let config = empty_road();
        let alone = SimState::from_vehicles(vec![VehicleState::ego(0.0, 1, 25.0, 25.0)], 0);
        assert!(!check_collision(&alone, &config));
        let stacked = SimState::from_vehicles(
            vec![
                VehicleState::ego(3.0, 1, 25.0, 25.0),
                VehicleState::traffic(3.0, 1, 25.0, 25.0),
            ],
            0,
        );
        assert!(check_collision(&stacked, &config));
        let apart = SimState::from_vehicles(
            vec![
                VehicleState::ego(0.0, 1, 25.0, 25.0),
                VehicleState::traffic(5.5, 1, 25.0, 25.0),
            ],
            0,
        );
        assert!(!check_collision(&apart, &config));
    }

    #[test]
    fn idm_platoon_never_collides() {
        // Equilibrium spacing for v = 20 with v0 = 25: s = s* / sqrt(1 - (v/v0)^4).
        let idm = IdmParams::default();
        let v: f64 = 20.0;
        let v0: f64 = 25.0;
        let s_star = idm.minimum_gap + v * idm.time_headway;
        let gap = s_star / (1.0 - (v / v0).powi(4)).sqrt();
        let mut vehicles = vec![VehicleState::ego(-10_000.0, 0, 0.0, 0.0)];
        for k in 0..10 {
            let x = k as f64 * (gap + VEHICLE_LENGTH);
            vehicles.push(VehicleState::traffic(x, 1, v, v0));
        }
        let config = EnvConfig {
            lanes_count: 2,
            ..empty_road()
        };
        let mut state = SimState::from_vehicles(vehicles, 0);
        for _ in 0..1000 {
            integrate_tick(&config, &mut state);
            let traffic = &state.vehicles[1..];
            for pair in traffic.windows(2) {
                assert!(gap_between(&pair[0], &pair[1]) > 0.0);
            }
        }
    }

    #[test]
    fn observation_shape_constant_across_episode() {
        let config = EnvConfig::preset("lane-4-density-2").unwrap().with_seed(3);
        let mut env = Highway::reset(&config).unwrap();
        let rows = config.observation_vehicles;
        for frame in 0..40 {
            let action = Action::ALL[frame % 5];
            let (obs, info) = env.step(action);
            assert_eq!(obs.rows(), rows);
            assert_eq!(obs.as_slice().len(), rows * OBSERVATION_FEATURES);
            if info.done {
                break;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn trajectories_are_deterministic_and_physical(
            seed in 0u64..1000,
            actions in proptest::collection::vec(0usize..5, 1..25),
        ) {
            let config = EnvConfig::preset("lane-3-density-1.5").unwrap().with_seed(seed);
            let mut a = Highway::reset(&config).unwrap();
            let mut b = Highway::reset(&config).unwrap();
            let dt = config.dt();
            let max_accel = IdmParams::default().max_acceleration.max(EGO_MAX_ACCELERATION);
            let bound = MAX_SPEED * dt + 0.5 * max_accel * dt * dt + 1e-9;
            let mut crashed = false;
            for code in actions {
                let action = Action::from_code(code).unwrap();
                let mut state = a.state().clone();
                let before_frame = state.frame;
                let terminal = a.is_terminal();
                for _ in 0..config.ticks_per_frame() {
                    let prev: Vec<f64> = state.vehicles.iter().map(|v| v.longitudinal_position).collect();
                    integrate_tick(&config, &mut state);
                    for (p, v) in prev.iter().zip(&state.vehicles) {
                        prop_assert!((v.longitudinal_position - p).abs() <= bound);
                        prop_assert!(v.speed >= 0.0);
                    }
                }
                let (obs_a, info_a) = a.step(action);
                let (obs_b, info_b) = b.step(action);
                prop_assert_eq!(a.state(), b.state());
                prop_assert_eq!(obs_a, obs_b);
                prop_assert_eq!(info_a, info_b);
                if !terminal {
                    prop_assert_eq!(a.state().frame, before_frame + 1);
                }
                if crashed {
                    prop_assert!(a.state().crashed);
                }
                crashed = a.state().crashed;
                for v in &a.state().vehicles {
                    prop_assert!(v.lane_index < config.lanes_count);
                    prop_assert_eq!(v.lateral_offset, 0.0);
                }
            }
        }
    }
}
