mod common;

use common::{rng, scrambled, tiny_config};
use fusion_core::env::{Context, FactoredObservation, LaneWorld, Termination};
use fusion_core::model::FusionModel;
use fusion_core::policy::{Action, Profile};
use fusion_core::rollout::*;
use fusion_core::Result;
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

fn quiet(layout_id: usize, seed: u64) -> Context {
    Context {
        layout_id,
        traffic_density: 1e-9,
        aggressiveness_mix: [1.0, 0.0, 0.0],
        seed,
    }
}

fn model() -> FusionModel {
    scrambled(tiny_config(), 4)
}

fn short_cfg() -> RolloutConfig {
    RolloutConfig {
        max_steps: 30,
        ..RolloutConfig::default()
    }
}

proptest! {
    #[test]
    fn token_updates_respect_the_bounds(
        r in -500.0f64..500.0, c in -5.0f64..5.0,
        rt in -2.0f64..2.0, ct in 0.0f64..2.0,
        rh in -500.0f64..500.0, ch in -5.0f64..5.0,
    ) {
        let (r1, c1) = update_tokens(r, c, rt, ct, rh, ch);
        prop_assert!(r1 >= r - rt);
        prop_assert!(c1 <= c - ct);
        prop_assert!(r1 == rh || r1 == r - rt);
        prop_assert!(c1 == ch || c1 == c - ct);
        prop_assert_eq!(update_tokens(r, c, rt, ct, f64::NEG_INFINITY, f64::INFINITY), (r - rt, c - ct));
    }
}

#[test]
fn token_update_examples() {
    assert_eq!(update_tokens(10.0, 1.0, 2.0, 0.5, 9.0, 0.2), (9.0, 0.2));
    assert_eq!(update_tokens(10.0, 1.0, 2.0, 0.5, 3.0, 0.9), (8.0, 0.5));
}

/// Checks the window bound after every step while delegating to the model driver.
struct Watched<'a> {
    inner: ModelDriver<'a, ChaCha8Rng>,
    h: usize,
    max_seen: usize,
}

impl Driver for Watched<'_> {
    fn reset(&mut self, w: &LaneWorld, o: &FactoredObservation) -> Result<()> {
        self.inner.reset(w, o)
    }
    fn act(&mut self, w: &LaneWorld, o: &FactoredObservation) -> Result<Action> {
        self.max_seen = self.max_seen.max(self.inner.window_len());
        assert!(self.inner.window_len() <= self.h);
        self.inner.act(w, o)
    }
    fn observe(&mut self, a: Action, r: f64, c: f64, n: &FactoredObservation) -> Result<()> {
        self.inner.observe(a, r, c, n)
    }
    fn tokens(&self) -> Option<(f64, f64)> {
        self.inner.tokens()
    }
}

#[test]
fn context_window_never_exceeds_h() {
    let m = model();
    for h in [1, 3] {
        let cfg = RolloutConfig {
            context_len: Some(h),
            ..short_cfg()
        };
        let mut d = Watched {
            inner: ModelDriver::new(&m, cfg, rng(0)).unwrap(),
            h,
            max_seen: 0,
        };
        let t = run_episode(
            &mut d,
            &eval_context(Setting::Policy, 0, 0),
            &Default::default(),
            30,
        )
        .unwrap();
        assert!(t.steps() > h);
        assert_eq!(d.max_seen, h);
    }
}

#[test]
fn oversized_window_is_rejected() {
    let m = model();
    let cfg = RolloutConfig {
        context_len: Some(m.config.context_len + 1),
        ..short_cfg()
    };
    assert!(ModelDriver::new(&m, cfg, rng(0)).is_err());
}

fn audit_tokens(t: &EpisodeTrace, exact: bool) {
    assert_eq!(t.rtg_tokens.len(), t.steps() + 1);
    for i in 0..t.steps() {
        let (r_sub, c_sub) = (t.rtg_tokens[i] - t.rewards[i], t.ctg_tokens[i] - t.costs[i]);
        assert!(t.rtg_tokens[i + 1] >= r_sub - 1e-12);
        assert!(t.ctg_tokens[i + 1] <= c_sub + 1e-12);
        if exact {
            assert_eq!((t.rtg_tokens[i + 1], t.ctg_tokens[i + 1]), (r_sub, c_sub));
        }
    }
}

#[test]
fn rollout_tokens_follow_the_update_law() {
    let mut m = model();
    let (_, traces) = evaluate_traces(
        &m,
        Setting::Policy,
        2,
        &[5],
        &short_cfg(),
        &Default::default(),
    )
    .unwrap();
    for (_, _, t) in &traces {
        assert_eq!(t.rtg_tokens[0], m.config.reward_target);
        assert_eq!(t.ctg_tokens[0], 1.0);
        audit_tokens(t, false);
    }
    m.config.value_heads = false;
    let (_, traces) = evaluate_traces(
        &m,
        Setting::Policy,
        2,
        &[5],
        &short_cfg(),
        &Default::default(),
    )
    .unwrap();
    for (_, _, t) in &traces {
        audit_tokens(t, true);
    }
}

#[test]
fn evaluation_is_deterministic_per_seed() {
    let m = model();
    for deterministic in [true, false] {
        let cfg = RolloutConfig {
            deterministic,
            ..short_cfg()
        };
        let a =
            evaluate_traces(&m, Setting::Dynamics, 2, &[1, 2], &cfg, &Default::default()).unwrap();
        let b =
            evaluate_traces(&m, Setting::Dynamics, 2, &[1, 2], &cfg, &Default::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a.0).unwrap(),
            serde_json::to_string(&b.0).unwrap()
        );
        assert_eq!(a.0.density_multiplier, 1.5);
        assert_eq!(a.0.episodes.len(), 4);
    }
}

#[test]
fn timid_driver_never_speeds() {
    let traces: Vec<EpisodeTrace> = (0..3)
        .map(|i| {
            let mut d = IdmDriver::new(Profile::Timid, rng(i));
            run_episode(&mut d, &quiet(0, i), &Default::default(), 1000).unwrap()
        })
        .collect();
    let refs: Vec<&EpisodeTrace> = traces.iter().collect();
    let cats = safety_categories(&refs);
    assert_eq!(cats.ns, 1.0);
    assert_eq!(cats.ar, 1.0);
}

struct FullThrottle;

impl Driver for FullThrottle {
    fn reset(&mut self, _: &LaneWorld, _: &FactoredObservation) -> Result<()> {
        Ok(())
    }
    fn act(&mut self, _: &LaneWorld, _: &FactoredObservation) -> Result<Action> {
        Ok(Action::new(3.0, 0))
    }
}

#[test]
fn always_colliding_driver_scores_zero() {
    let traces: Vec<EpisodeTrace> = [3, 5, 3, 5]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            run_episode(
                &mut FullThrottle,
                &quiet(l, i as u64),
                &Default::default(),
                1000,
            )
            .unwrap()
        })
        .collect();
    let refs: Vec<&EpisodeTrace> = traces.iter().collect();
    let cats = safety_categories(&refs);
    assert_eq!(cats.cf, 0.0);
    assert_eq!(cats.ar, 0.0);
    assert_eq!(cats.it, 1.0);
    assert!(traces
        .iter()
        .all(|t| t.reason == Termination::Collision && t.total_cost() >= 1.0));
}

fn synthetic(speeds: &[f64], reason: Termination) -> EpisodeTrace {
    let n = speeds.len();
    EpisodeTrace {
        context: quiet(0, 0),
        actions: vec![[0.0; 2]; n],
        rewards: vec![1.0; n],
        costs: vec![0.0; n],
        speeds_kph: speeds.to_vec(),
        rtg_tokens: vec![],
        ctg_tokens: vec![],
        collision: reason == Termination::Collision,
        out_of_road: reason == Termination::OutOfRoad,
        reason,
    }
}

#[test]
fn category_counts_match_hand_tallies() {
    let traces = [
        synthetic(&[10.0, 50.0, 30.0], Termination::Goal),
        synthetic(&[40.0, 41.0], Termination::Collision),
        synthetic(&[20.0], Termination::OutOfRoad),
        synthetic(&[60.0, 60.0], Termination::Timeout),
    ];
    let refs: Vec<&EpisodeTrace> = traces.iter().collect();
    let c = safety_categories(&refs);
    // 4 of the 8 steps are at or under 40 kph
    assert_eq!(c.as_array(), [0.25, 0.5, 0.75, 0.75, 0.75]);
    assert_eq!(safety_categories(&[]), SafetyCategories::default());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn not_speeding_matches_a_recount(
        speeds in prop::collection::vec(prop::collection::vec(0.0f64..80.0, 1..20), 1..6),
    ) {
        let traces: Vec<EpisodeTrace> = speeds.iter().map(|s| synthetic(s, Termination::Timeout)).collect();
        let refs: Vec<&EpisodeTrace> = traces.iter().collect();
        let all: Vec<f64> = speeds.concat();
        let expect = all.iter().filter(|&&v| v <= 40.0).count() as f64 / all.len() as f64;
        prop_assert!((safety_categories(&refs).ns - expect).abs() < 1e-12);
    }
}

#[test]
fn mean_and_standard_error() {
    let m = MeanStderr::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m.mean, 2.5);
    assert!((m.stderr - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
    assert_eq!(MeanStderr::of(&[7.0]).stderr, 0.0);
}

#[test]
fn settings_parse_and_print() {
    for s in [Setting::Policy, Setting::Dynamics] {
        assert_eq!(s.to_string().parse::<Setting>().unwrap(), s);
    }
    assert!("train".parse::<Setting>().is_err());
    let ctx = eval_context(Setting::Dynamics, 3, 0);
    let base = eval_context(Setting::Policy, 3, 0);
    assert!((ctx.traffic_density - 1.5 * base.traffic_density).abs() < 1e-12);
}

#[test]
fn report_csv_has_one_row_per_layout() {
    let traces: Vec<(u64, usize, EpisodeTrace)> = [0, 3, 3]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut t = synthetic(&[10.0], Termination::Goal);
            t.context.layout_id = l;
            (0, i, t)
        })
        .collect();
    let r = EvalReport::from_traces(Setting::Policy, &[0], 3, 100.0, 1.0, &traces);
    let csv = r.category_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layout,AR,NS,IT,CF,SL");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("3,1.000000"));
    assert_eq!(r.mean_cost_for_seed(0), 0.0);
}
