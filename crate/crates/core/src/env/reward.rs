use serde::{Deserialize, Serialize};

use super::vehicle::VehicleState;

pub const MPS_TO_KPH: f64 = 3.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub forward: f64,
    pub speed: f64,
    pub terminal: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            forward: 1.0,
            speed: 0.01,
            terminal: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub collision: f64,
    pub out_of_road: f64,
    pub overspeed: f64,
    pub v_limit_kph: f64,
    /// Cost per kph above the limit.
    pub overspeed_coef: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            collision: 1.0,
            out_of_road: 1.0,
            overspeed: 1.0,
            v_limit_kph: 40.0,
            overspeed_coef: 0.02,
        }
    }
}

/// Safety events raised during one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEvents {
    pub collision: bool,
    pub out_of_road: bool,
}

/// Forward progress plus a speed bonus plus the goal bonus.
pub fn reward_fn(
    prev: &VehicleState,
    cur: &VehicleState,
    reached_goal: bool,
    w: &RewardWeights,
) -> f64 {
    let goal = if reached_goal { 1.0 } else { 0.0 };
    w.forward * (cur.x - prev.x) + w.speed * cur.v + w.terminal * goal
}

pub fn overspeed_cost(v_kph: f64, w: &CostWeights) -> f64 {
    (w.overspeed_coef * (v_kph - w.v_limit_kph)).max(0.0)
}

pub fn cost_fn(events: CostEvents, v_kph: f64, w: &CostWeights) -> f64 {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    w.collision * ind(events.collision)
        + w.out_of_road * ind(events.out_of_road)
        + w.overspeed * overspeed_cost(v_kph, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64, v: f64) -> VehicleState {
        VehicleState::new(x, 0, v)
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        assert_eq!(reward_fn(&at(3.0, 0.0), &at(3.0, 0.0), false, &w), 0.0);
        assert!((reward_fn(&at(0.0, 0.0), &at(1.0, 10.0), false, &w) - 1.1).abs() < 1e-12);
        assert!((reward_fn(&at(0.0, 0.0), &at(0.5, 5.0), true, &w) - 10.55).abs() < 1e-12);
    }

    #[test]
    fn cost_examples() {
        let w = CostWeights::default();
        let none = CostEvents::default();
        assert!((cost_fn(none, 45.0, &w) - 0.1).abs() < 1e-12);
        assert_eq!(cost_fn(none, 30.0, &w), 0.0);
        let crash = CostEvents {
            collision: true,
            out_of_road: false,
        };
        assert!((cost_fn(crash, 50.0, &w) - 1.2).abs() < 1e-12);
    }
}
