use serde::{Deserialize, Serialize};

use super::{EnvConfig, SimState};

/// Columns per row: presence, x, y, vx, vy.
pub const OBSERVATION_FEATURES: usize = 5;

/// Kinematics matrix of `rows × 5` normalized features, row-major. Row 0 is
/// the ego in absolute terms; the rest are the nearest vehicles relative to
/// the ego, zero-padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    rows: usize,
    data: Vec<f64>,
}

impl Observation {
    pub fn zeros(rows: usize) -> Self {
        Self {
            rows,
            data: vec![0.0; rows * OBSERVATION_FEATURES],
        }
    }

    pub fn from_flat(rows: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == rows * OBSERVATION_FEATURES).then_some(Self { rows, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * OBSERVATION_FEATURES..(i + 1) * OBSERVATION_FEATURES]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Normalization ranges, fixed by the config.
struct Ranges {
    x: f64,
    y: f64,
    v: f64,
}

impl Ranges {
    fn of(config: &EnvConfig) -> Self {
        let speed_max = config.speed_limits[1];
        Self {
            x: 5.0 * speed_max,
            y: config.lanes_count as f64 * config.lane_width,
            v: 2.0 * speed_max,
        }
    }
}

fn norm(value: f64, range: f64) -> f64 {
    (value / range).clamp(-1.0, 1.0)
}

pub fn observe(state: &SimState, config: &EnvConfig) -> Observation {
    let rows = config.observation_vehicles;
    let mut obs = Observation::zeros(rows);
    let Some(ego) = state.vehicles.first() else {
        return obs;
    };
    let ranges = Ranges::of(config);
    let kinematics = |v: &super::VehicleState| {
        let heading = v.heading(config.lane_width, config.policy_frequency);
        (
            v.longitudinal_position,
            v.lateral_position(config.lane_width),
            v.speed * heading.cos(),
            v.speed * heading.sin(),
        )
    };

    let (ex, ey, evx, evy) = kinematics(ego);
    obs.data[..OBSERVATION_FEATURES].copy_from_slice(&[
        1.0,
        norm(ex, ranges.x),
        norm(ey, ranges.y),
        norm(evx, ranges.v),
        norm(evy, ranges.v),
    ]);

    let mut others: Vec<usize> = (1..state.vehicles.len()).collect();
    // Stable sort: equal distances keep index order.
    others.sort_by(|&a, &b| {
        let da = (state.vehicles[a].longitudinal_position - ex).abs();
        let db = (state.vehicles[b].longitudinal_position - ex).abs();
        da.total_cmp(&db)
    });

    for (row, &i) in others.iter().take(rows.saturating_sub(1)).enumerate() {
        let (x, y, vx, vy) = kinematics(&state.vehicles[i]);
        let start = (row + 1) * OBSERVATION_FEATURES;
        obs.data[start..start + OBSERVATION_FEATURES].copy_from_slice(&[
            1.0,
            norm(x - ex, ranges.x),
            norm(y - ey, ranges.y),
            norm(vx - evx, ranges.v),
            norm(vy - evy, ranges.v),
        ]);
    }
    obs
}
