//! Online inference with return/cost tokens, and the evaluation harness.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use fusion_grad::Tape;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Dataset, ACTION_DIM};
use crate::env::{
    sample_context, Context, EnvConfig, FactoredObservation, LaneWorld, Split, Termination,
    ACCEL_LIMIT, BEAM_DIM, EGO_DIM, HORIZON, MPS_TO_KPH, NAV_DIM, TEST_DENSITY_MULTIPLIER,
};
use crate::error::{FusionError, Result};
use crate::model::{attention_entropy_of, FusionModel, ACTION_SCALE};
use crate::policy::{act, Action, IdmParams, Profile};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Speed above which a step counts as speeding for the NS category.
pub const SPEED_LIMIT_KPH: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Initial reward-to-go; `None` uses the target stored with the model.
    pub reward_target: Option<f64>,
    /// Initial cost-to-go, the episodic cost budget.
    pub cost_limit: f64,
    /// Context window in steps; `None` uses the model's trained length.
    pub context_len: Option<usize>,
    pub max_steps: usize,
    /// Take the action head mean instead of sampling it.
    pub deterministic: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            reward_target: None,
            cost_limit: 1.0,
            context_len: None,
            max_steps: HORIZON,
            deterministic: true,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, model: &FusionModel) -> Result<()> {
        if !(self.cost_limit >= 0.0) {
            return Err(FusionError::Config(format!(
                "cost limit {} must be >= 0",
                self.cost_limit
            )));
        }
        if let Some(h) = self.context_len {
            if h == 0 || h > model.config.context_len {
                return Err(FusionError::Config(format!(
                    "rollout context {h} must lie in 1..={}",
                    model.config.context_len
                )));
            }
        }
        if self.max_steps == 0 || self.max_steps > HORIZON {
            return Err(FusionError::Config(format!(
                "episode cap {} must lie in 1..={HORIZON}",
                self.max_steps
            )));
        }
        Ok(())
    }
}

/// Token update after observing `(r_t, c_t)`: the reward token never drops
/// below plain subtraction and the cost token never rises above it.
pub fn update_tokens(
    r_prev: f64,
    c_prev: f64,
    r_t: f64,
    c_t: f64,
    r_hat: f64,
    c_hat: f64,
) -> (f64, f64) {
    (r_hat.max(r_prev - r_t), c_hat.min(c_prev - c_t))
}

/// One evaluated episode, step by step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub context: Context,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub speeds_kph: Vec<f64>,
    /// Tokens in force when each action was chosen; one longer than the
    /// step count for model drivers, empty otherwise.
    pub rtg_tokens: Vec<f64>,
    pub ctg_tokens: Vec<f64>,
    pub collision: bool,
    pub out_of_road: bool,
    pub reason: Termination,
}

impl EpisodeTrace {
    pub fn steps(&self) -> usize {
        self.rewards.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn success(&self) -> bool {
        self.reason == Termination::Goal
    }
}

/// Anything that can drive the ego car for one episode.
pub trait Driver {
    fn reset(&mut self, world: &LaneWorld, obs: &FactoredObservation) -> Result<()>;
    fn act(&mut self, world: &LaneWorld, obs: &FactoredObservation) -> Result<Action>;
    /// Called after each environment step with its outcome.
    fn observe(
        &mut self,
        _action: Action,
        _reward: f64,
        _cost: f64,
        _next: &FactoredObservation,
    ) -> Result<()> {
        Ok(())
    }
    /// Return/cost tokens, for drivers that keep them.
    fn tokens(&self) -> Option<(f64, f64)> {
        None
    }
}

/// Runs `driver` from a fresh reset of `ctx` until termination or `max_steps`.
pub fn run_episode<D: Driver + ?Sized>(
    driver: &mut D,
    ctx: &Context,
    env: &EnvConfig,
    max_steps: usize,
) -> Result<EpisodeTrace> {
    let (mut world, mut obs) = LaneWorld::reset_with(ctx, env)?;
    driver.reset(&world, &obs)?;
    let mut trace = EpisodeTrace {
        context: ctx.clone(),
        actions: vec![],
        rewards: vec![],
        costs: vec![],
        speeds_kph: vec![],
        rtg_tokens: vec![],
        ctg_tokens: vec![],
        collision: false,
        out_of_road: false,
        reason: Termination::Running,
    };
    let push_tokens = |trace: &mut EpisodeTrace, d: &D| {
        if let Some((r, c)) = d.tokens() {
            trace.rtg_tokens.push(r);
            trace.ctg_tokens.push(c);
        }
    };
    push_tokens(&mut trace, driver);
    while trace.steps() < max_steps {
        let a = driver.act(&world, &obs)?;
        let out = world.step(a)?;
        trace.actions.push([a.accel, a.lane_cmd as f64]);
        trace.rewards.push(out.reward);
        trace.costs.push(out.cost);
        trace.speeds_kph.push(world.ego().v * MPS_TO_KPH);
        trace.collision |= out.events.collision;
        trace.out_of_road |= out.events.out_of_road;
        trace.reason = out.reason;
        driver.observe(a, out.reward, out.cost, &out.obs)?;
        push_tokens(&mut trace, driver);
        obs = out.obs;
        if out.done {
            break;
        }
    }
    if trace.reason == Termination::Running {
        trace.reason = Termination::Timeout;
    }
    Ok(trace)
}

/// The trained model acting through a sliding context window.
pub struct ModelDriver<'a, R: Rng> {
    model: &'a FusionModel,
    cfg: RolloutConfig,
    h: usize,
    rng: R,
    ego: Vec<[f64; EGO_DIM]>,
    beam: Vec<[f64; BEAM_DIM]>,
    nav: Vec<[f64; NAV_DIM]>,
    prev_action: Vec<[f64; ACTION_DIM]>,
    rtg: Vec<f64>,
    ctg: Vec<f64>,
    last_action: [f64; ACTION_DIM],
    r_tok: f64,
    c_tok: f64,
}

impl<'a, R: Rng> ModelDriver<'a, R> {
    pub fn new(model: &'a FusionModel, cfg: RolloutConfig, rng: R) -> Result<Self> {
        cfg.validate(model)?;
        let h = cfg.context_len.unwrap_or(model.config.context_len);
        Ok(Self {
            model,
            cfg,
            h,
            rng,
            ego: vec![],
            beam: vec![],
            nav: vec![],
            prev_action: vec![],
            rtg: vec![],
            ctg: vec![],
            last_action: [0.0; ACTION_DIM],
            r_tok: 0.0,
            c_tok: 0.0,
        })
    }

    /// Steps currently held in the context window.
    pub fn window_len(&self) -> usize {
        self.ego.len()
    }

    fn push_state(&mut self, obs: &FactoredObservation) {
        self.ego.push(obs.ego);
        self.beam.push(obs.beam);
        self.nav.push(obs.nav);
        self.prev_action.push(self.last_action);
        self.rtg.push(self.r_tok);
        self.ctg.push(self.c_tok);
        if self.ego.len() > self.h {
            self.ego.remove(0);
            self.beam.remove(0);
            self.nav.remove(0);
            self.prev_action.remove(0);
            self.rtg.remove(0);
            self.ctg.remove(0);
        }
    }

    fn window(&self) -> Batch {
        let h = self.ego.len();
        let mut b = Batch::zeros(1, h);
        b.ego = self.ego.concat();
        b.beam = self.beam.concat();
        b.nav = self.nav.concat();
        b.prev_action = self.prev_action.concat();
        b.rtg = self.rtg.clone();
        b.ctg = self.ctg.clone();
        b.valid = vec![true; h];
        b.dyn_valid = (0..h).map(|t| t + 1 < h).collect();
        b
    }
}

impl<R: Rng> Driver for ModelDriver<'_, R> {
    fn reset(&mut self, _world: &LaneWorld, obs: &FactoredObservation) -> Result<()> {
        self.ego.clear();
        self.beam.clear();
        self.nav.clear();
        self.prev_action.clear();
        self.rtg.clear();
        self.ctg.clear();
        self.last_action = [0.0; ACTION_DIM];
        self.r_tok = self
            .cfg
            .reward_target
            .unwrap_or(self.model.config.reward_target);
        self.c_tok = self.cfg.cost_limit;
        self.push_state(obs);
        Ok(())
    }

    fn act(&mut self, _world: &LaneWorld, _obs: &FactoredObservation) -> Result<Action> {
        let batch = self.window();
        let mut tape = Tape::new();
        let f = self.model.forward::<R>(&mut tape, &batch, None)?;
        let last = batch.h - 1;
        let mu = &tape.value(f.action.mu).data()[last * ACTION_DIM..(last + 1) * ACTION_DIM];
        let ls = &tape.value(f.action.log_sigma).data()[last * ACTION_DIM..(last + 1) * ACTION_DIM];
        let mut a = [0.0; ACTION_DIM];
        for k in 0..ACTION_DIM {
            a[k] = mu[k];
            if !self.cfg.deterministic {
                let sigma = fusion_grad::kernels::clamp_log_sigma(ls[k]).exp();
                a[k] += Normal::new(0.0, sigma)
                    .expect("positive std")
                    .sample(&mut self.rng);
            }
            a[k] *= ACTION_SCALE[k];
        }
        let lane_cmd = if a[1] > 0.5 {
            1
        } else if a[1] < -0.5 {
            -1
        } else {
            0
        };
        Ok(Action::new(a[0].clamp(-ACCEL_LIMIT, ACCEL_LIMIT), lane_cmd))
    }

    fn observe(
        &mut self,
        action: Action,
        reward: f64,
        cost: f64,
        next: &FactoredObservation,
    ) -> Result<()> {
        let (r_hat, c_hat) = if self.model.config.value_heads {
            self.model.value_estimates(&next.ego, &next.beam, &next.nav)[0]
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };
        (self.r_tok, self.c_tok) =
            update_tokens(self.r_tok, self.c_tok, reward, cost, r_hat, c_hat);
        self.last_action = [action.accel, action.lane_cmd as f64];
        self.push_state(next);
        Ok(())
    }

    fn tokens(&self) -> Option<(f64, f64)> {
        Some((self.r_tok, self.c_tok))
    }
}

/// Noise-free scripted driver of the given profile.
pub struct IdmDriver<R: Rng> {
    pub params: IdmParams,
    pub rng: R,
}

impl<R: Rng> Driver for IdmDriver<R> {
    fn reset(&mut self, _world: &LaneWorld, _obs: &FactoredObservation) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, world: &LaneWorld, _obs: &FactoredObservation) -> Result<Action> {
        Ok(act(&world.ego_view(), &self.params, 0.0, &mut self.rng))
    }
}

impl<R: Rng> IdmDriver<R> {
    pub fn new(profile: Profile, rng: R) -> Self {
        Self {
            params: IdmParams::for_profile(profile),
            rng,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Train-split contexts; the gap is the behaviour data quality.
    Policy,
    /// Test-split contexts: denser traffic and held-out layouts.
    Dynamics,
}

impl Setting {
    pub fn split(self) -> Split {
        match self {
            Setting::Policy => Split::Train,
            Setting::Dynamics => Split::Test,
        }
    }

    pub fn density_multiplier(self) -> f64 {
        match self {
            Setting::Policy => 1.0,
            Setting::Dynamics => TEST_DENSITY_MULTIPLIER,
        }
    }
}

impl FromStr for Setting {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "policy" => Ok(Setting::Policy),
            "dynamics" => Ok(Setting::Dynamics),
            other => Err(FusionError::Config(format!(
                "unknown setting `{other}` (expected policy or dynamics)"
            ))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Policy => "policy",
            Setting::Dynamics => "dynamics",
        })
    }
}

/// Context of evaluation episode `index` under `seed`.
pub fn eval_context(setting: Setting, seed: u64, index: usize) -> Context {
    sample_context(
        setting.split(),
        derive_seed(seed, Stream::Eval, index as u64),
    )
}

/// Category frequencies: arrival, not speeding (share of steps), in time,
/// collision free, stayed on the road.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyCategories {
    pub ar: f64,
    pub ns: f64,
    pub it: f64,
    pub cf: f64,
    pub sl: f64,
}

impl SafetyCategories {
    pub fn as_array(&self) -> [f64; 5] {
        [self.ar, self.ns, self.it, self.cf, self.sl]
    }
}

pub const CATEGORY_NAMES: [&str; 5] = ["AR", "NS", "IT", "CF", "SL"];

/// IT counts episodes that ended before the step cap, for whatever reason.
pub fn safety_categories(traces: &[&EpisodeTrace]) -> SafetyCategories {
    if traces.is_empty() {
        return SafetyCategories::default();
    }
    let n = traces.len() as f64;
    let frac =
        |f: &dyn Fn(&EpisodeTrace) -> bool| traces.iter().filter(|t| f(t)).count() as f64 / n;
    let steps: usize = traces.iter().map(|t| t.speeds_kph.len()).sum();
    let slow: usize = traces
        .iter()
        .map(|t| {
            t.speeds_kph
                .iter()
                .filter(|&&v| v <= SPEED_LIMIT_KPH)
                .count()
        })
        .sum();
    SafetyCategories {
        ar: frac(&|t| t.success()),
        ns: if steps == 0 {
            1.0
        } else {
            slow as f64 / steps as f64
        },
        it: frac(&|t| t.reason != Termination::Timeout),
        cf: frac(&|t| !t.collision),
        sl: frac(&|t| !t.out_of_road),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / n;
        let stderr = if xs.len() < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Self { mean, stderr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub index: usize,
    pub layout_id: usize,
    pub reward: f64,
    pub cost: f64,
    pub success: bool,
    pub reason: Termination,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub density_multiplier: f64,
    pub seeds: Vec<u64>,
    pub episodes_per_seed: usize,
    pub reward_target: f64,
    pub cost_limit: f64,
    pub episodes: Vec<EpisodeSummary>,
    pub reward: MeanStderr,
    pub cost: MeanStderr,
    pub success_rate: MeanStderr,
    pub categories: SafetyCategories,
    pub categories_by_layout: BTreeMap<usize, SafetyCategories>,
}

impl EvalReport {
    pub fn from_traces(
        setting: Setting,
        seeds: &[u64],
        episodes_per_seed: usize,
        reward_target: f64,
        cost_limit: f64,
        traces: &[(u64, usize, EpisodeTrace)],
    ) -> Self {
        let episodes: Vec<EpisodeSummary> = traces
            .iter()
            .map(|(seed, index, t)| EpisodeSummary {
                seed: *seed,
                index: *index,
                layout_id: t.context.layout_id,
                reward: t.total_reward(),
                cost: t.total_cost(),
                success: t.success(),
                reason: t.reason,
                steps: t.steps(),
            })
            .collect();
        let all: Vec<&EpisodeTrace> = traces.iter().map(|(_, _, t)| t).collect();
        let mut by_layout: BTreeMap<usize, Vec<&EpisodeTrace>> = BTreeMap::new();
        for t in &all {
            by_layout.entry(t.context.layout_id).or_default().push(t);
        }
        let col = |f: fn(&EpisodeSummary) -> f64| {
            MeanStderr::of(&episodes.iter().map(f).collect::<Vec<_>>())
        };
        Self {
            setting,
            density_multiplier: setting.density_multiplier(),
            seeds: seeds.to_vec(),
            episodes_per_seed,
            reward_target,
            cost_limit,
            reward: col(|e| e.reward),
            cost: col(|e| e.cost),
            success_rate: col(|e| if e.success { 1.0 } else { 0.0 }),
            categories: safety_categories(&all),
            categories_by_layout: by_layout
                .into_iter()
                .map(|(k, v)| (k, safety_categories(&v)))
                .collect(),
            episodes,
        }
    }

    /// Layout-by-category matrix for radar plots.
    pub fn category_csv(&self) -> String {
        let mut s = format!("layout,{}\n", CATEGORY_NAMES.join(","));
        for (layout, c) in &self.categories_by_layout {
            let vals: Vec<String> = c.as_array().iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!("{layout},{}\n", vals.join(",")));
        }
        s
    }

    /// Mean episodic cost over the episodes of one seed.
    pub fn mean_cost_for_seed(&self, seed: u64) -> f64 {
        let costs: Vec<f64> = self
            .episodes
            .iter()
            .filter(|e| e.seed == seed)
            .map(|e| e.cost)
            .collect();
        MeanStderr::of(&costs).mean
    }
}

/// Runs `n_episodes` per seed with the model and aggregates the report.
/// Also returns the traces in (seed, index) order.
pub fn evaluate_traces(
    model: &FusionModel,
    setting: Setting,
    n_episodes: usize,
    seeds: &[u64],
    cfg: &RolloutConfig,
    env: &EnvConfig,
) -> Result<(EvalReport, Vec<(u64, usize, EpisodeTrace)>)> {
    cfg.validate(model)?;
    let mut traces = Vec::with_capacity(n_episodes * seeds.len());
    for &seed in seeds {
        for i in 0..n_episodes {
            let ctx = eval_context(setting, seed, i);
            let rng = stream_rng(seed, Stream::Rollout, i as u64);
            let mut driver = ModelDriver::new(model, cfg.clone(), rng)?;
            traces.push((seed, i, run_episode(&mut driver, &ctx, env, cfg.max_steps)?));
        }
    }
    let r0 = cfg.reward_target.unwrap_or(model.config.reward_target);
    let report = EvalReport::from_traces(setting, seeds, n_episodes, r0, cfg.cost_limit, &traces);
    Ok((report, traces))
}

pub fn evaluate(
    model: &FusionModel,
    setting: Setting,
    n_episodes: usize,
    seeds: &[u64],
    cfg: &RolloutConfig,
    env: &EnvConfig,
) -> Result<EvalReport> {
    Ok(evaluate_traces(model, setting, n_episodes, seeds, cfg, env)?.0)
}

/// Mean attention entropy per layer over teacher-forced windows of the
/// given trajectories, one window every `context_len` steps.
pub fn attention_entropy(
    model: &FusionModel,
    data: &Dataset,
    n_trajectories: usize,
) -> Result<Vec<f64>> {
    let h = model.config.context_len;
    let n = n_trajectories.min(data.episodes.len());
    if n == 0 {
        return Err(FusionError::EmptyDataset);
    }
    let mut sums = vec![0.0; model.config.n_layers];
    let mut windows = 0usize;
    for e in 0..n {
        let len = data.episodes[e].len();
        let ends: Vec<(usize, usize)> = (0..len).skip(h - 1).step_by(h).map(|t| (e, t)).collect();
        let ends = if ends.is_empty() {
            vec![(e, len - 1)]
        } else {
            ends
        };
        let batch = data.windows_at(&ends, h);
        let mut tape = Tape::new();
        let f = model.forward::<rand_chacha::ChaCha8Rng>(&mut tape, &batch, None)?;
        let out = model.output(&tape, &f);
        let per_layer = attention_entropy_of(&out, &batch.valid, h, model.config.n_heads);
        for (s, v) in sums.iter_mut().zip(per_layer) {
            *s += v * ends.len() as f64;
        }
        windows += ends.len();
    }
    Ok(sums.into_iter().map(|s| s / windows as f64).collect())
}
