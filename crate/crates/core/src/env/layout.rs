//! Road layouts and context sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::rng::{stream_rng, Stream};

pub const ROAD_LENGTH: f64 = 500.0;
pub const NUM_LAYOUTS: usize = 6;
/// Layout ids seen during data collection; the rest are held out for testing.
pub const TRAIN_LAYOUTS: [usize; 4] = [0, 2, 3, 4];
pub const TEST_DENSITY_MULTIPLIER: f64 = 1.5;
pub const BASE_DENSITY_RANGE: (f64, f64) = (1.0, 2.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub lane: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadLayout {
    pub id: usize,
    pub name: String,
    pub length: f64,
    pub lane_count: usize,
    pub obstacles: Vec<Obstacle>,
    pub goal: f64,
}

impl RoadLayout {
    fn build(id: usize, name: &str, lane_count: usize, obstacles: &[(f64, usize)]) -> Self {
        Self {
            id,
            name: name.into(),
            length: ROAD_LENGTH,
            lane_count,
            obstacles: obstacles
                .iter()
                .map(|&(x, lane)| Obstacle { x, lane })
                .collect(),
            goal: ROAD_LENGTH,
        }
    }

    /// Lane the ego starts in.
    pub fn start_lane(&self) -> usize {
        self.lane_count / 2
    }

    pub fn width(&self) -> f64 {
        self.lane_count as f64 * super::LANE_WIDTH
    }
}

/// The six registered road configurations.
pub fn layout(id: usize) -> Result<RoadLayout> {
    let l = match id {
        0 => RoadLayout::build(0, "straight", 3, &[]),
        1 => RoadLayout::build(1, "curve_speed_zone", 2, &[]),
        2 => RoadLayout::build(2, "merge", 3, &[(250.0, 2)]),
        3 => RoadLayout::build(3, "bottleneck", 3, &[(260.0, 1)]),
        4 => RoadLayout::build(
            4,
            "dense_obstacle",
            4,
            &[(120.0, 1), (200.0, 2), (280.0, 0), (360.0, 3), (420.0, 2)],
        ),
        5 => RoadLayout::build(
            5,
            "roundabout_proxy",
            2,
            &[(100.0, 1), (190.0, 0), (280.0, 1), (370.0, 0), (450.0, 1)],
        ),
        other => return Err(FusionError::UnknownLayout(other)),
    };
    Ok(l)
}

/// Registry as `layout_id -> geometry`, serialized as JSON.
pub fn layout_registry_json() -> String {
    let map: BTreeMap<usize, RoadLayout> =
        (0..NUM_LAYOUTS).map(|i| (i, layout(i).unwrap())).collect();
    serde_json::to_string_pretty(&map).expect("layouts serialize")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(FusionError::UnknownSplit(other.into())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One sampled instantiation of the contextual constrained MDP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub layout_id: usize,
    /// Vehicles per 100 m of road, summed over lanes.
    pub traffic_density: f64,
    /// Weights over the (timid, normal, aggressive) driver profiles.
    pub aggressiveness_mix: [f64; 3],
    pub seed: u64,
}

impl Context {
    pub fn validate(&self) -> Result<()> {
        if self.layout_id >= NUM_LAYOUTS {
            return Err(FusionError::UnknownLayout(self.layout_id));
        }
        if !(self.traffic_density > 0.0 && self.traffic_density.is_finite()) {
            return Err(FusionError::InvalidContext(format!(
                "traffic density {} must be positive",
                self.traffic_density
            )));
        }
        let mix = self.aggressiveness_mix;
        if mix.iter().any(|w| *w < 0.0 || !w.is_finite()) || mix.iter().sum::<f64>() <= 0.0 {
            return Err(FusionError::InvalidContext(
                "aggressiveness mix must be a distribution".into(),
            ));
        }
        Ok(())
    }
}

/// Draws a context for `split`. The base density is the first draw, so the
/// test split at the same seed is exactly 1.5x denser than the train split.
pub fn sample_context(split: Split, rng_seed: u64) -> Context {
    let mut rng = stream_rng(rng_seed, Stream::Context, 0);
    let base = rng.random_range(BASE_DENSITY_RANGE.0..BASE_DENSITY_RANGE.1);
    let raw: [f64; 3] = [
        rng.random_range(0.2..1.0),
        rng.random_range(0.2..1.0),
        rng.random_range(0.2..1.0),
    ];
    let total: f64 = raw.iter().sum();
    let mix = raw.map(|w| w / total);
    let seed = rng.random::<u64>();
    let (layout_id, density) = match split {
        Split::Train => (
            TRAIN_LAYOUTS[rng.random_range(0..TRAIN_LAYOUTS.len())],
            base,
        ),
        Split::Test => (
            rng.random_range(0..NUM_LAYOUTS),
            base * TEST_DENSITY_MULTIPLIER,
        ),
    };
    Context {
        layout_id,
        traffic_density: density,
        aggressiveness_mix: mix,
        seed,
    }
}

pub fn sample_context_named(split: &str, rng_seed: u64) -> Result<Context> {
    Ok(sample_context(split.parse()?, rng_seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_sampling_is_deterministic() {
        assert_eq!(
            sample_context(Split::Train, 7),
            sample_context(Split::Train, 7)
        );
    }

    #[test]
    fn test_split_is_one_and_a_half_times_denser() {
        for seed in 0..50 {
            let a = sample_context(Split::Train, seed);
            let b = sample_context(Split::Test, seed);
            assert_eq!(b.traffic_density, a.traffic_density * 1.5);
            assert!((b.traffic_density / a.traffic_density - 1.5).abs() < 1e-15);
        }
    }

    #[test]
    fn split_layout_coverage() {
        let mut train = [0usize; NUM_LAYOUTS];
        let mut test = [0usize; NUM_LAYOUTS];
        for seed in 0..1000 {
            train[sample_context(Split::Train, seed).layout_id] += 1;
            test[sample_context(Split::Test, seed).layout_id] += 1;
        }
        assert!(test.iter().all(|&c| c > 0));
        for (id, &c) in train.iter().enumerate() {
            assert_eq!(c > 0, TRAIN_LAYOUTS.contains(&id), "layout {id}");
        }
    }

    #[test]
    fn unknown_split_is_an_error() {
        assert!(matches!(
            sample_context_named("valid", 1),
            Err(FusionError::UnknownSplit(_))
        ));
    }

    #[test]
    fn obstacles_inside_road_and_goal_at_end() {
        for id in 0..NUM_LAYOUTS {
            let l = layout(id).unwrap();
            assert_eq!(l.goal, l.length);
            assert!((2..=4).contains(&l.lane_count));
            for o in &l.obstacles {
                assert!(o.x > 0.0 && o.x < l.length && o.lane < l.lane_count);
            }
        }
        assert!(layout(6).is_err());
    }

    #[test]
    fn registry_json_pins_geometry() {
        let parsed: BTreeMap<usize, RoadLayout> =
            serde_json::from_str(&layout_registry_json()).unwrap();
        assert_eq!(parsed.len(), NUM_LAYOUTS);
        assert_eq!(parsed[&3].obstacles, vec![Obstacle { x: 260.0, lane: 1 }]);
    }
}
