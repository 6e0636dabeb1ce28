use serde::{Deserialize, Serialize};

use super::{ACCEL_LIMIT, CAR_LENGTH, DT, LANE_CHANGE_STEPS, V_MAX};

/// Kinematic state of one car. Lateral motion is discrete: a lane change is
/// a counter running from 0 to [`LANE_CHANGE_STEPS`] in direction `change_dir`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub lane: usize,
    /// -1 (towards lane 0), 0 (not changing) or +1.
    pub change_dir: i8,
    pub change_steps: u8,
    pub v: f64,
    pub length: f64,
}

impl VehicleState {
    pub fn new(x: f64, lane: usize, v: f64) -> Self {
        Self {
            x,
            lane,
            change_dir: 0,
            change_steps: 0,
            v,
            length: CAR_LENGTH,
        }
    }

    /// Lane-change progress in [0, 1].
    pub fn lateral_progress(&self) -> f64 {
        self.change_steps as f64 / LANE_CHANGE_STEPS as f64
    }

    /// Lateral position in lane units measured from the centre of lane 0.
    pub fn lateral_position(&self) -> f64 {
        self.lane as f64 + self.change_dir as f64 * self.lateral_progress()
    }

    /// Lane being changed into, which may not exist on the road.
    pub fn target_lane(&self) -> Option<isize> {
        (self.change_dir != 0).then(|| self.lane as isize + self.change_dir as isize)
    }

    /// True when the lane `l` is covered by this car's body or its lane-change corridor.
    pub fn occupies(&self, l: usize) -> bool {
        self.lane == l || self.target_lane() == Some(l as isize)
    }

    pub fn shares_lane_with(&self, other: &VehicleState) -> bool {
        self.occupies(other.lane)
            || other
                .target_lane()
                .is_some_and(|t| t >= 0 && self.occupies(t as usize))
    }

    /// Advances the lateral counter under `lane_cmd`. Returns true when the
    /// car has drifted more than half way into a lane that does not exist.
    pub fn apply_lane_cmd(&mut self, lane_cmd: i8, lane_count: usize) -> bool {
        let cmd = lane_cmd.signum();
        if self.change_dir == 0 {
            if cmd != 0 {
                self.change_dir = cmd;
                self.change_steps = 1;
            }
        } else if cmd == -self.change_dir {
            self.change_steps -= 1;
            if self.change_steps == 0 {
                self.change_dir = 0;
            }
        } else {
            self.change_steps += 1;
        }
        let target = self.target_lane();
        let off_road = target.is_some_and(|t| t < 0 || t >= lane_count as isize);
        if off_road {
            return 2 * self.change_steps as usize > LANE_CHANGE_STEPS;
        }
        if self.change_steps as usize >= LANE_CHANGE_STEPS {
            self.lane = target.unwrap() as usize;
            self.change_dir = 0;
            self.change_steps = 0;
        }
        false
    }

    /// Semi-implicit Euler: speed first, then position with the new speed.
    pub fn integrate(&mut self, accel: f64) {
        let a = accel.clamp(-ACCEL_LIMIT, ACCEL_LIMIT);
        self.v = (self.v + a * DT).clamp(0.0, V_MAX);
        self.x += self.v * DT;
    }
}

/// Two bodies overlap when they share a lane (or corridor) and are closer
/// than a car length.
pub fn collides(a: &VehicleState, b: &VehicleState) -> bool {
    a.shares_lane_with(b) && (a.x - b.x).abs() < 0.5 * (a.length + b.length)
}
