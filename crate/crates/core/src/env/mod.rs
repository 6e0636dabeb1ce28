//! Lane-world: a multi-lane straight road with static obstacles and scripted
//! traffic, parameterised by a sampled [`Context`].

pub mod layout;
pub mod obs;
pub mod reward;
pub mod vehicle;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::policy::{act, sample_index, Action, IdmParams, Profile};
use crate::rng::{stream_rng, Stream};

pub use layout::{
    layout, sample_context, Context, RoadLayout, Split, NUM_LAYOUTS, ROAD_LENGTH,
    TEST_DENSITY_MULTIPLIER, TRAIN_LAYOUTS,
};
pub use obs::{
    driver_view, observe, DriverView, FactoredObservation, BEAM_DIM, EGO_DIM, NAV_DIM, OBS_DIM,
};
pub use reward::{cost_fn, reward_fn, CostEvents, CostWeights, RewardWeights, MPS_TO_KPH};
pub use vehicle::{collides, VehicleState};

pub const DT: f64 = 0.1;
pub const CAR_LENGTH: f64 = 5.0;
pub const LANE_WIDTH: f64 = 3.5;
pub const V_MAX: f64 = 20.0;
pub const ACCEL_LIMIT: f64 = 4.0;
pub const HORIZON: usize = 1000;
pub const LANE_CHANGE_STEPS: usize = 10;
pub const MAX_LANES: usize = 4;
pub const BEAM_RANGE: f64 = 50.0;
pub const NAV_RANGE: f64 = 100.0;

const CELL: f64 = 10.0;
const SPAWN_START: f64 = 20.0;
const SPAWN_END_MARGIN: f64 = 30.0;
const OBSTACLE_CLEARANCE: f64 = 15.0;
const EXIT_MARGIN: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Running,
    Goal,
    Collision,
    OutOfRoad,
    Timeout,
}

impl Termination {
    pub fn is_done(self) -> bool {
        self != Termination::Running
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: FactoredObservation,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
    pub reason: Termination,
    pub events: CostEvents,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrafficCar {
    pub state: VehicleState,
    pub params: IdmParams,
}

#[derive(Clone, Debug)]
pub struct LaneWorld {
    ctx: Context,
    layout: RoadLayout,
    ego: VehicleState,
    traffic: Vec<TrafficCar>,
    obstacles: Vec<VehicleState>,
    t: usize,
    reason: Termination,
    rng: ChaCha8Rng,
    pub reward_weights: RewardWeights,
    pub cost_weights: CostWeights,
}

/// Reward and cost shaping shared by every world of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub reward: RewardWeights,
    pub cost: CostWeights,
}

impl LaneWorld {
    /// Builds the world for `ctx` and returns it with the initial observation.
    pub fn reset(ctx: &Context) -> Result<(Self, FactoredObservation)> {
        Self::reset_with(ctx, &EnvConfig::default())
    }

    pub fn reset_with(ctx: &Context, env: &EnvConfig) -> Result<(Self, FactoredObservation)> {
        ctx.validate()?;
        let layout = layout::layout(ctx.layout_id)?;
        let mut rng = stream_rng(ctx.seed, Stream::Traffic, 0);
        let traffic = place_traffic(&layout, ctx, &mut rng);
        let obstacles = layout
            .obstacles
            .iter()
            .map(|o| VehicleState::new(o.x, o.lane, 0.0))
            .collect();
        let world = Self {
            ctx: ctx.clone(),
            ego: VehicleState::new(0.0, layout.start_lane(), 0.0),
            layout,
            traffic,
            obstacles,
            t: 0,
            reason: Termination::Running,
            rng,
            reward_weights: env.reward,
            cost_weights: env.cost,
        };
        let obs = world.observe();
        Ok((world, obs))
    }

    pub fn context(&self) -> &Context {
        &self.ctx
    }

    pub fn layout(&self) -> &RoadLayout {
        &self.layout
    }

    pub fn ego(&self) -> &VehicleState {
        &self.ego
    }

    pub fn traffic(&self) -> &[TrafficCar] {
        &self.traffic
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn reason(&self) -> Termination {
        self.reason
    }

    pub fn is_done(&self) -> bool {
        self.reason.is_done()
    }

    fn others_of_ego(&self) -> impl Iterator<Item = &VehicleState> {
        self.traffic.iter().map(|c| &c.state).chain(&self.obstacles)
    }

    pub fn observe(&self) -> FactoredObservation {
        let others: Vec<VehicleState> = self.others_of_ego().copied().collect();
        observe(&self.layout, &self.ego, &others, self.t)
    }

    /// Gap-level perception of the ego, used by scripted ego drivers.
    pub fn ego_view(&self) -> DriverView {
        driver_view(&self.ego, self.others_of_ego(), self.layout.lane_count)
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(FusionError::StepAfterDone);
        }
        let lanes = self.layout.lane_count;
        let mut bodies: Vec<VehicleState> =
            Vec::with_capacity(self.traffic.len() + self.obstacles.len() + 1);
        bodies.push(self.ego);
        bodies.extend(self.traffic.iter().map(|c| c.state));
        bodies.extend(&self.obstacles);
        let traffic_actions: Vec<Action> = (0..self.traffic.len())
            .map(|i| {
                let me = &bodies[i + 1];
                let others = bodies
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i + 1)
                    .map(|(_, b)| b);
                let view = driver_view(me, others, lanes);
                act(&view, &self.traffic[i].params, 0.0, &mut self.rng)
            })
            .collect();

        let prev = self.ego;
        let out_of_road = self.ego.apply_lane_cmd(action.lane_cmd, lanes);
        self.ego.integrate(action.accel);
        for (car, a) in self.traffic.iter_mut().zip(&traffic_actions) {
            car.state.apply_lane_cmd(a.lane_cmd, lanes);
            car.state.integrate(a.accel);
        }
        let exit = self.layout.length + EXIT_MARGIN;
        self.traffic.retain(|c| c.state.x <= exit);
        self.t += 1;

        let collision = self.others_of_ego().any(|o| collides(&self.ego, o));
        let reached_goal = !collision && !out_of_road && self.ego.x >= self.layout.goal;
        self.reason = if collision {
            Termination::Collision
        } else if out_of_road {
            Termination::OutOfRoad
        } else if reached_goal {
            Termination::Goal
        } else if self.t >= HORIZON {
            Termination::Timeout
        } else {
            Termination::Running
        };
        let events = CostEvents {
            collision,
            out_of_road,
        };
        let reward = reward_fn(&prev, &self.ego, reached_goal, &self.reward_weights);
        let cost = cost_fn(events, self.ego.v * MPS_TO_KPH, &self.cost_weights);
        Ok(StepOutcome {
            obs: self.observe(),
            reward,
            cost,
            done: self.is_done(),
            reason: self.reason,
            events,
        })
    }
}

/// Seeded cell process: the road is cut into 10 m cells per lane and each
/// eligible cell holds a car with a probability chosen so that the expected
/// count equals `density * L / 100`.
fn place_traffic(layout: &RoadLayout, ctx: &Context, rng: &mut ChaCha8Rng) -> Vec<TrafficCar> {
    let mut cells = Vec::new();
    for lane in 0..layout.lane_count {
        let mut x0 = SPAWN_START;
        while x0 + CELL <= layout.length - SPAWN_END_MARGIN {
            let centre = x0 + 0.5 * CELL;
            let near_obstacle = layout
                .obstacles
                .iter()
                .any(|o| o.lane == lane && (o.x - centre).abs() < 0.5 * CELL + OBSTACLE_CLEARANCE);
            if !near_obstacle {
                cells.push((lane, x0));
            }
            x0 += CELL;
        }
    }
    let expected = ctx.traffic_density * layout.length / 100.0;
    let p = (expected / cells.len() as f64).min(1.0);
    let mut cars = Vec::new();
    for (lane, x0) in cells {
        if rng.random::<f64>() >= p {
            continue;
        }
        let x = x0 + rng.random_range(0.0..CELL - CAR_LENGTH);
        let profile = Profile::ALL[sample_index(&ctx.aggressiveness_mix, rng)];
        let params = IdmParams::for_profile(profile);
        let v = params.v0 * rng.random_range(0.6..1.0);
        cars.push(TrafficCar {
            state: VehicleState::new(x, lane, v),
            params,
        });
    }
    cars
}
