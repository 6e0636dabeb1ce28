//! Scripted drivers: the intelligent driver model for speed keeping and a
//! gap-acceptance rule for lane changes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::obs::{DriverView, Neighbor};
use crate::env::reward::{cost_fn, CostEvents, CostWeights, MPS_TO_KPH};
use crate::env::vehicle::{collides, VehicleState};
use crate::env::ACCEL_LIMIT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Timid,
    Normal,
    Aggressive,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Timid, Profile::Normal, Profile::Aggressive];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Desired time headway, s.
    pub time_headway: f64,
    pub a_max: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    /// Jam distance, m.
    pub s0: f64,
    pub delta: f64,
    pub profile: Profile,
}

impl IdmParams {
    pub fn timid() -> Self {
        Self {
            v0: 10.0,
            time_headway: 2.0,
            a_max: 1.0,
            b: 2.0,
            s0: 2.0,
            delta: 4.0,
            profile: Profile::Timid,
        }
    }

    pub fn normal() -> Self {
        Self {
            v0: 12.0,
            time_headway: 1.5,
            a_max: 1.5,
            b: 2.0,
            s0: 2.0,
            delta: 4.0,
            profile: Profile::Normal,
        }
    }

    pub fn aggressive() -> Self {
        Self {
            v0: 16.0,
            time_headway: 0.8,
            a_max: 3.0,
            b: 3.0,
            s0: 2.0,
            delta: 4.0,
            profile: Profile::Aggressive,
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Timid => Self::timid(),
            Profile::Normal => Self::normal(),
            Profile::Aggressive => Self::aggressive(),
        }
    }
}

impl Default for IdmParams {
    fn default() -> Self {
        Self::normal()
    }
}

/// IDM acceleration towards a leader `s` metres ahead, clamped to the
/// action range. A non-positive gap brakes as hard as allowed.
pub fn idm_accel(s: f64, v: f64, v_lead: f64, p: &IdmParams) -> f64 {
    if s <= 0.0 {
        return -ACCEL_LIMIT;
    }
    let dv = v - v_lead;
    let s_star = (p.s0 + v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b).sqrt())).max(0.0);
    let a = p.a_max * (1.0 - (v / p.v0).powf(p.delta) - (s_star / s).powi(2));
    a.clamp(-ACCEL_LIMIT, ACCEL_LIMIT)
}

/// Fraction of the desired speed a leader must cost before a lane change is considered.
pub const SPEED_LOSS_THRESHOLD: f64 = 0.3;
/// Seconds of travel ahead within which a slow leader prompts a lane change.
pub const LOOKAHEAD_TIME: f64 = 3.0;

/// Lane command for a scripted driver: keep an ongoing change, otherwise
/// leave a lane whose leader is close and slow for a side with more room.
pub fn lane_decision<R: Rng + ?Sized>(view: &DriverView, p: &IdmParams, rng: &mut R) -> i8 {
    if view.change_dir != 0 {
        return view.change_dir;
    }
    // Aggressive drivers accept half the speed loss and half the gap.
    let scale = match p.profile {
        Profile::Aggressive => 0.5,
        _ => 1.0,
    };
    let lookahead = LOOKAHEAD_TIME * view.v.max(p.v0);
    let slowed = view.front_speed < p.v0 * (1.0 - SPEED_LOSS_THRESHOLD * scale);
    if view.front_gap >= lookahead || !slowed {
        return 0;
    }
    let min_gap = 2.0 * p.s0 * scale;
    let accept = |n: Option<Neighbor>| {
        n.filter(|n| n.front_gap > view.front_gap && n.front_gap > min_gap && n.rear_gap > min_gap)
            .map(|n| n.front_gap)
    };
    match (accept(view.right), accept(view.left)) {
        (None, None) => 0,
        (Some(_), None) => -1,
        (None, Some(_)) => 1,
        (Some(r), Some(l)) if r > l => -1,
        (Some(r), Some(l)) if l > r => 1,
        _ => {
            if rng.random_bool(0.5) {
                1
            } else {
                -1
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub accel: f64,
    pub lane_cmd: i8,
}

impl Action {
    pub fn new(accel: f64, lane_cmd: i8) -> Self {
        Self { accel, lane_cmd }
    }
}

/// IDM speed control plus lane choice, with Gaussian acceleration noise of
/// standard deviation `noise_level * 4` m/s².
pub fn act<R: Rng + ?Sized>(
    view: &DriverView,
    p: &IdmParams,
    noise_level: f64,
    rng: &mut R,
) -> Action {
    let mut accel = idm_accel(view.front_gap, view.v, view.front_speed, p);
    let lane_cmd = lane_decision(view, p, rng);
    if noise_level > 0.0 {
        let n = Normal::new(0.0, noise_level * ACCEL_LIMIT).expect("positive std");
        accel = (accel + n.sample(rng)).clamp(-ACCEL_LIMIT, ACCEL_LIMIT);
    }
    Action::new(accel, lane_cmd)
}

/// A data-collection driver: a profile and how noisy it is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSpec {
    pub profile: Profile,
    pub noise: f64,
    pub weight: f64,
}

/// The mixed-quality corpus: 40% timid, 40% normal, 20% noisy aggressive.
pub fn default_policy_mix() -> Vec<BehaviorSpec> {
    vec![
        BehaviorSpec {
            profile: Profile::Timid,
            noise: 0.0,
            weight: 0.4,
        },
        BehaviorSpec {
            profile: Profile::Normal,
            noise: 0.0,
            weight: 0.4,
        },
        BehaviorSpec {
            profile: Profile::Aggressive,
            noise: 0.25,
            weight: 0.2,
        },
    ]
}

/// Picks one entry of `weights` proportionally to its value.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatoonReport {
    pub collisions: usize,
    pub out_of_road: usize,
    /// Summed collision and out-of-road cost over all cars and steps.
    pub event_cost: f64,
    pub overspeed_cost: f64,
    pub min_gap: f64,
}

/// Single-lane platoon of `n` noise-free IDM cars starting at rest, spaced
/// `spacing` metres apart, driving up to a stationary obstacle so the whole
/// column has to stop.
pub fn simulate_platoon(
    n: usize,
    steps: usize,
    spacing: f64,
    obstacle_x: f64,
    p: &IdmParams,
) -> PlatoonReport {
    let w = CostWeights::default();
    let obstacle = VehicleState::new(obstacle_x, 0, 0.0);
    let mut cars: Vec<VehicleState> = (0..n)
        .map(|i| VehicleState::new(-(i as f64) * spacing, 0, 0.0))
        .collect();
    let mut report = PlatoonReport {
        collisions: 0,
        out_of_road: 0,
        event_cost: 0.0,
        overspeed_cost: 0.0,
        min_gap: f64::INFINITY,
    };
    for _ in 0..steps {
        let accels: Vec<f64> = (0..n)
            .map(|i| {
                let lead = if i == 0 { &obstacle } else { &cars[i - 1] };
                let gap = lead.x - cars[i].x - 0.5 * (lead.length + cars[i].length);
                idm_accel(gap, cars[i].v, lead.v, p)
            })
            .collect();
        for (c, a) in cars.iter_mut().zip(accels) {
            c.integrate(a);
        }
        for i in 0..n {
            let lead = if i == 0 { &obstacle } else { &cars[i - 1] };
            let gap = lead.x - cars[i].x - 0.5 * (lead.length + cars[i].length);
            report.min_gap = report.min_gap.min(gap);
            let events = CostEvents {
                collision: collides(&cars[i], lead),
                out_of_road: false,
            };
            report.collisions += events.collision as usize;
            let v_kph = cars[i].v * MPS_TO_KPH;
            let total = cost_fn(events, v_kph, &w);
            let overspeed = cost_fn(CostEvents::default(), v_kph, &w);
            report.overspeed_cost += overspeed;
            report.event_cost += total - overspeed;
        }
    }
    report
}
