use serde::{Deserialize, Serialize};

use super::layout::RoadLayout;
use super::vehicle::VehicleState;
use super::{BEAM_RANGE, HORIZON, LANE_WIDTH, MAX_LANES, NAV_RANGE, V_MAX};

pub const EGO_DIM: usize = 7;
pub const BEAM_DIM: usize = 16;
pub const NAV_DIM: usize = 3;
pub const OBS_DIM: usize = EGO_DIM + BEAM_DIM + NAV_DIM;

const SECTOR: f64 = std::f64::consts::TAU / BEAM_DIM as f64;

/// Observation split into disjoint ego / beam / navigation blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactoredObservation {
    pub ego: [f64; EGO_DIM],
    pub beam: [f64; BEAM_DIM],
    pub nav: [f64; NAV_DIM],
}

impl FactoredObservation {
    pub fn to_vec(&self) -> Vec<f64> {
        self.ego
            .iter()
            .chain(&self.beam)
            .chain(&self.nav)
            .copied()
            .collect()
    }

    pub fn blocks(&self) -> [&[f64]; 3] {
        [&self.ego, &self.beam, &self.nav]
    }

    pub fn in_unit_box(&self) -> bool {
        self.to_vec().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

fn lateral_metres(v: &VehicleState) -> f64 {
    (v.lateral_position() + 0.5) * LANE_WIDTH
}

/// Builds the observation of `ego`; `others` are every other body on the
/// road, traffic and static obstacles alike.
pub fn observe(
    layout: &RoadLayout,
    ego: &VehicleState,
    others: &[VehicleState],
    t: usize,
) -> FactoredObservation {
    let mut e = [0.0; EGO_DIM];
    e[0] = (ego.v / V_MAX).clamp(0.0, 1.0);
    e[1] = ((layout.length - ego.x) / layout.length).clamp(0.0, 1.0);
    e[2 + ego.lane.min(MAX_LANES - 1)] = 1.0;
    e[6] = (1.0 + ego.change_dir as f64 * ego.lateral_progress()) / 2.0;

    let ey = lateral_metres(ego);
    let mut beam = [BEAM_RANGE; BEAM_DIM];
    for o in others {
        let dx = o.x - ego.x;
        let dy = lateral_metres(o) - ey;
        let dist = (dx.hypot(dy) - 0.5 * o.length).max(0.0);
        if dist >= BEAM_RANGE {
            continue;
        }
        let s = ((dy.atan2(dx) / SECTOR).round() as i64).rem_euclid(BEAM_DIM as i64) as usize;
        beam[s] = beam[s].min(dist);
    }
    let width = layout.width();
    for (s, b) in beam.iter_mut().enumerate() {
        let sin = (s as f64 * SECTOR).sin();
        let edge = if sin > 1e-9 {
            (width - ey) / sin
        } else if sin < -1e-9 {
            ey / -sin
        } else {
            f64::INFINITY
        };
        *b = b.min(edge.max(0.0));
    }
    let beam = beam.map(|d| (d / BEAM_RANGE).clamp(0.0, 1.0));

    let ahead = layout
        .obstacles
        .iter()
        .filter(|o| o.x > ego.x && ego.occupies(o.lane))
        .map(|o| o.x - ego.x - ego.length)
        .fold(f64::INFINITY, f64::min);
    let nav = [
        (ahead.max(0.0) / NAV_RANGE).min(1.0),
        (HORIZON.saturating_sub(t) as f64 / HORIZON as f64).clamp(0.0, 1.0),
        goal_direction(layout, ego),
    ];
    FactoredObservation { ego: e, beam, nav }
}

/// 0.5 to keep the lane, 1 to move towards higher lane indices, 0 towards
/// lower ones: points at the nearest lane free of static obstacles over the
/// next stretch of road.
fn goal_direction(layout: &RoadLayout, ego: &VehicleState) -> f64 {
    let blocked = |lane: usize| {
        layout
            .obstacles
            .iter()
            .any(|o| o.lane == lane && o.x > ego.x - ego.length && o.x - ego.x <= NAV_RANGE)
    };
    if !blocked(ego.lane) {
        return 0.5;
    }
    for k in 1..layout.lane_count {
        if ego.lane >= k && !blocked(ego.lane - k) {
            return 0.0;
        }
        if ego.lane + k < layout.lane_count && !blocked(ego.lane + k) {
            return 1.0;
        }
    }
    0.5
}

/// What a scripted driver perceives about the lane it may move into.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub front_gap: f64,
    pub front_speed: f64,
    pub rear_gap: f64,
    pub rear_speed: f64,
}

/// Bumper-to-bumper gaps around one car, the input of the scripted
/// controllers. Missing neighbours read as an infinite gap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriverView {
    pub v: f64,
    pub change_dir: i8,
    pub front_gap: f64,
    pub front_speed: f64,
    /// Lane `lane - 1`, if it exists.
    pub right: Option<Neighbor>,
    /// Lane `lane + 1`, if it exists.
    pub left: Option<Neighbor>,
}

pub fn driver_view<'a>(
    me: &VehicleState,
    others: impl IntoIterator<Item = &'a VehicleState>,
    lane_count: usize,
) -> DriverView {
    let free = Neighbor {
        front_gap: f64::INFINITY,
        front_speed: me.v,
        rear_gap: f64::INFINITY,
        rear_speed: me.v,
    };
    let mut front = (f64::INFINITY, me.v);
    let mut right = (me.lane > 0).then_some(free);
    let mut left = (me.lane + 1 < lane_count).then_some(free);
    for o in others {
        let gap = (o.x - me.x).abs() - 0.5 * (me.length + o.length);
        let is_ahead = o.x > me.x;
        if is_ahead && me.shares_lane_with(o) && gap < front.0 {
            front = (gap, o.v);
        }
        for (side, lane) in [
            (&mut right, me.lane.wrapping_sub(1)),
            (&mut left, me.lane + 1),
        ] {
            let Some(n) = side.as_mut() else { continue };
            if !o.occupies(lane) {
                continue;
            }
            if is_ahead {
                if gap < n.front_gap {
                    n.front_gap = gap;
                    n.front_speed = o.v;
                }
            } else if gap < n.rear_gap {
                n.rear_gap = gap;
                n.rear_speed = o.v;
            }
        }
    }
    DriverView {
        v: me.v,
        change_dir: me.change_dir,
        front_gap: front.0,
        front_speed: front.1,
        right,
        left,
    }
}
