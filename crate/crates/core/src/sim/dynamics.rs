//! Traffic behavior: IDM car following and MOBIL lane changes.

use serde::{Deserialize, Serialize};

use super::VehicleState;

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Maximum acceleration `a` (m/s²); also the upper clamp.
    pub max_acceleration: f64,
    /// Comfortable deceleration `b` (m/s², positive).
    pub comfortable_deceleration: f64,
    /// Jam distance `s0` (m, bumper to bumper).
    pub minimum_gap: f64,
    /// Desired time headway `T` (s).
    pub time_headway: f64,
    /// Free-road exponent `δ`.
    pub exponent: f64,
    /// Emergency braking limit (m/s², positive); the lower clamp.
    pub max_deceleration: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            max_acceleration: 3.0,
            comfortable_deceleration: 5.0,
            minimum_gap: 10.0,
            time_headway: 1.5,
            exponent: 4.0,
            max_deceleration: 9.0,
        }
    }
}

/// MOBIL lane-change parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilParams {
    pub politeness: f64,
    /// Minimum net acceleration gain (m/s²) to justify a change.
    pub gain_threshold: f64,
    /// Maximum braking (m/s², positive) the change may impose on the new follower.
    pub safe_braking: f64,
}

impl Default for MobilParams {
    fn default() -> Self {
        Self {
            politeness: 0.0,
            gain_threshold: 0.2,
            safe_braking: 2.0,
        }
    }
}

/// IDM acceleration of `follower` behind a leader `leader_gap` meters ahead
/// (bumper to bumper) driving at `leader_speed`. Pass `f64::INFINITY` as the
/// gap for a free road.
pub fn idm_acceleration(follower: &VehicleState, leader_gap: f64, leader_speed: f64, params: &IdmParams) -> f64 {
    if leader_gap.is_nan() || leader_gap <= 0.0 {
        return -params.max_deceleration;
    }
    let v = follower.speed.max(0.0);
    let v0 = follower.target_speed.max(f64::EPSILON);
    let free = 1.0 - (v / v0).powf(params.exponent);
    let interaction = if leader_gap.is_infinite() {
        0.0
    } else {
        let approach = v - leader_speed;
        let desired = params.minimum_gap
            + v * params.time_headway
            + v * approach / (2.0 * (params.max_acceleration * params.comfortable_deceleration).sqrt());
        let desired = desired.max(0.0);
        (desired / leader_gap).powi(2)
    };
    let acceleration = params.max_acceleration * (free - interaction);
    acceleration.clamp(-params.max_deceleration, params.max_acceleration)
}

/// Bumper-to-bumper distance from `follower` to `leader`.
pub fn gap_between(follower: &VehicleState, leader: &VehicleState) -> f64 {
    leader.longitudinal_position - follower.longitudinal_position - 0.5 * (leader.length + follower.length)
}

/// IDM acceleration of `follower` given an optional leader.
pub fn idm_behind(follower: &VehicleState, leader: Option<&VehicleState>, params: &IdmParams) -> f64 {
    match leader {
        Some(leader) => idm_acceleration(follower, gap_between(follower, leader), leader.speed, params),
        None => idm_acceleration(follower, f64::INFINITY, 0.0, params),
    }
}

/// The four vehicles around a lane-change candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct Neighborhood<'a> {
    pub current_leader: Option<&'a VehicleState>,
    pub current_follower: Option<&'a VehicleState>,
    pub target_leader: Option<&'a VehicleState>,
    pub target_follower: Option<&'a VehicleState>,
}

/// MOBIL: change lanes when the politeness-weighted acceleration gain exceeds
/// the threshold and the new follower is not forced to brake harder than the
/// safe limit.
pub fn mobil_should_change(
    vehicle: &VehicleState,
    candidate_lane: usize,
    neighborhood: &Neighborhood<'_>,
    idm: &IdmParams,
    mobil: &MobilParams,
) -> bool {
    if candidate_lane.abs_diff(vehicle.lane_index) != 1 {
        return false;
    }

    let new_follower_after = neighborhood.target_follower.map(|f| idm_behind(f, Some(vehicle), idm));
    if let Some(accel) = new_follower_after {
        if accel < -mobil.safe_braking {
            return false;
        }
    }
    let self_before = idm_behind(vehicle, neighborhood.current_leader, idm);
    let self_after = idm_behind(vehicle, neighborhood.target_leader, idm);
    if self_after < -mobil.safe_braking {
        return false;
    }

    let new_follower_delta = match (neighborhood.target_follower, new_follower_after) {
        (Some(f), Some(after)) => after - idm_behind(f, neighborhood.target_leader, idm),
        _ => 0.0,
    };
    let old_follower_delta = neighborhood.current_follower.map_or(0.0, |f| {
        idm_behind(f, neighborhood.current_leader, idm) - idm_behind(f, Some(vehicle), idm)
    });

    let gain = self_after - self_before + mobil.politeness * (new_follower_delta + old_follower_delta);
    gain > mobil.gain_threshold
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, lane: usize, speed: f64, target: f64) -> VehicleState {
        VehicleState::traffic(x, lane, speed, target)
    }

    fn params() -> IdmParams {
        IdmParams {
            max_acceleration: 3.0,
            comfortable_deceleration: 5.0,
            minimum_gap: 10.0,
            time_headway: 1.5,
            exponent: 4.0,
            max_deceleration: 9.0,
        }
    }

    #[test]
    fn equilibrium_on_free_road() {
        let v = car(0.0, 0, 30.0, 30.0);
        assert!(idm_acceleration(&v, f64::INFINITY, 0.0, &params()).abs() < 1e-9);
    }

    #[test]
    fn standstill_accelerates_at_max() {
        let v = car(0.0, 0, 0.0, 30.0);
        assert_eq!(idm_acceleration(&v, f64::INFINITY, 0.0, &params()), 3.0);
    }

    #[test]
    fn matches_hand_evaluation() {
        // s* = 10 + 20·1.5 + 0 = 40; 3·[1 − (20/30)^4 − (40/30)^2]
        let expected = 3.0 * (1.0 - (2.0f64 / 3.0).powi(4) - (40.0f64 / 30.0).powi(2));
        let v = car(0.0, 0, 20.0, 30.0);
        let got = idm_acceleration(&v, 30.0, 20.0, &params());
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - -2.925_925_925_925_926).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_gap_brakes_hard() {
        let v = car(0.0, 0, 20.0, 30.0);
        assert_eq!(idm_acceleration(&v, 0.0, 20.0, &params()), -9.0);
        assert_eq!(idm_acceleration(&v, -3.0, 20.0, &params()), -9.0);
        assert_eq!(idm_acceleration(&v, f64::NAN, 20.0, &params()), -9.0);
    }

    #[test]
    fn close_leader_clamps_to_max_deceleration() {
        let v = car(0.0, 0, 30.0, 30.0);
        assert_eq!(idm_acceleration(&v, 0.5, 0.0, &params()), -9.0);
    }

    #[test]
    fn mobil_takes_empty_lane_behind_slow_leader() {
        let me = car(0.0, 0, 25.0, 30.0);
        let slow = car(25.0, 0, 15.0, 15.0);
        let hood = Neighborhood {
            current_leader: Some(&slow),
            ..Default::default()
        };
        assert!(mobil_should_change(&me, 1, &hood, &params(), &MobilParams::default()));
    }

    #[test]
    fn mobil_vetoes_unsafe_cut_in() {
        let me = car(0.0, 0, 25.0, 30.0);
        let slow = car(25.0, 0, 15.0, 15.0);
        let fast_follower = car(-8.0, 1, 30.0, 30.0);
        let hood = Neighborhood {
            current_leader: Some(&slow),
            target_follower: Some(&fast_follower),
            ..Default::default()
        };
        let forced = idm_behind(&fast_follower, Some(&me), &params());
        assert!(forced < -2.0);
        assert!(!mobil_should_change(&me, 1, &hood, &params(), &MobilParams::default()));
    }

    #[test]
    fn mobil_rejects_symmetric_traffic() {
        let me = car(0.0, 0, 25.0, 30.0);
        let leader_here = car(40.0, 0, 22.0, 22.0);
        let follower_here = car(-40.0, 0, 25.0, 25.0);
        let leader_there = car(40.0, 1, 22.0, 22.0);
        let follower_there = car(-40.0, 1, 25.0, 25.0);
        let hood = Neighborhood {
            current_leader: Some(&leader_here),
            current_follower: Some(&follower_here),
            target_leader: Some(&leader_there),
            target_follower: Some(&follower_there),
        };
        let mobil = MobilParams {
            politeness: 0.5,
            ..MobilParams::default()
        };
        // Independent evaluation of each acceleration change.
        let p = params();
        let self_gain = idm_behind(&me, Some(&leader_there), &p) - idm_behind(&me, Some(&leader_here), &p);
        let nf = idm_behind(&follower_there, Some(&me), &p) - idm_behind(&follower_there, Some(&leader_there), &p);
        let of = idm_behind(&follower_here, Some(&leader_here), &p) - idm_behind(&follower_here, Some(&me), &p);
        let gain = self_gain + 0.5 * (nf + of);
        assert!(gain < mobil.gain_threshold);
        assert!(!mobil_should_change(&me, 1, &hood, &p, &mobil));
    }

    #[test]
    fn mobil_requires_adjacent_lane() {
        let me = car(0.0, 0, 25.0, 30.0);
        let hood = Neighborhood::default();
        assert!(!mobil_should_change(&me, 2, &hood, &params(), &MobilParams::default()));
    }
}
