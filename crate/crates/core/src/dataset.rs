//! Offline corpus: collection with scripted drivers, return annotation,
//! `manifest.json` + `episodes.jsonl` storage and window sampling.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    sample_context, Context, EnvConfig, LaneWorld, Split, Termination, BEAM_DIM, EGO_DIM, NAV_DIM,
};
use crate::error::{FusionError, Result};
use crate::policy::{act, default_policy_mix, sample_index, BehaviorSpec, IdmParams};
use crate::rng::{derive_seed, stream_rng, Stream};

pub const SCHEMA_VERSION: u32 = 1;
pub const ACTION_DIM: usize = 2;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";

/// One trajectory. `ego[t]`, `beam[t]`, `nav[t]` are the observation the
/// action `actions[t]` was taken from; `actions[t] = [accel, lane_cmd]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub context: Context,
    #[serde(default)]
    pub behavior: Option<BehaviorSpec>,
    pub ego: Vec<[f64; EGO_DIM]>,
    pub beam: Vec<[f64; BEAM_DIM]>,
    pub nav: Vec<[f64; NAV_DIM]>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub reasons: Vec<Termination>,
    #[serde(default)]
    pub rtg: Vec<f64>,
    #[serde(default)]
    pub ctg: Vec<f64>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn final_reason(&self) -> Termination {
        self.reasons.last().copied().unwrap_or(Termination::Running)
    }

    fn check_lengths(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.ego.len(),
            self.beam.len(),
            self.nav.len(),
            self.actions.len(),
            self.costs.len(),
            self.reasons.len(),
            self.rtg.len(),
            self.ctg.len(),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(FusionError::Dataset(format!(
                "per-step arrays disagree in length: {n} vs {lens:?}"
            )));
        }
        Ok(())
    }
}

/// Undiscounted suffix sums: `out[t] = xs[t] + out[t + 1]`.
pub fn suffix_sums(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    let mut acc = 0.0;
    for t in (0..xs.len()).rev() {
        acc += xs[t];
        out[t] = acc;
    }
    out
}

pub fn annotate_returns(ep: &mut EpisodeRecord) {
    ep.rtg = suffix_sums(&ep.rewards);
    ep.ctg = suffix_sums(&ep.costs);
}

fn suffix_law_holds(values: &[f64], sums: &[f64]) -> bool {
    let n = values.len();
    (0..n).all(|t| {
        let next = if t + 1 < n { sums[t + 1] } else { 0.0 };
        let expect = values[t] + next;
        (sums[t] - expect).abs() <= 1e-9 * expect.abs().max(1.0)
    })
}

/// Drives one episode in `ctx` with the scripted driver `spec`.
pub fn run_scripted_episode<R: Rng + ?Sized>(
    ctx: &Context,
    spec: &BehaviorSpec,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    run_scripted_episode_with(ctx, spec, &EnvConfig::default(), rng)
}

pub fn run_scripted_episode_with<R: Rng + ?Sized>(
    ctx: &Context,
    spec: &BehaviorSpec,
    env: &EnvConfig,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    let params = IdmParams::for_profile(spec.profile);
    let (mut world, mut obs) = LaneWorld::reset_with(ctx, env)?;
    let mut ep = EpisodeRecord {
        context: ctx.clone(),
        behavior: Some(*spec),
        ego: vec![],
        beam: vec![],
        nav: vec![],
        actions: vec![],
        rewards: vec![],
        costs: vec![],
        reasons: vec![],
        rtg: vec![],
        ctg: vec![],
    };
    loop {
        let a = act(&world.ego_view(), &params, spec.noise, rng);
        let out = world.step(a)?;
        ep.ego.push(obs.ego);
        ep.beam.push(obs.beam);
        ep.nav.push(obs.nav);
        ep.actions.push([a.accel, a.lane_cmd as f64]);
        ep.rewards.push(out.reward);
        ep.costs.push(out.cost);
        ep.reasons.push(out.reason);
        obs = out.obs;
        if out.done {
            break;
        }
    }
    annotate_returns(&mut ep);
    Ok(ep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub reward_mean: f64,
    pub reward_std: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub return_mean: f64,
    pub return_max: f64,
    pub return_p90: f64,
    pub cost_return_mean: f64,
    pub cost_return_max: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count().max(1) as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Linear-interpolated percentile of `xs`, `q` in [0, 1].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl DatasetStats {
    pub fn compute(episodes: &[EpisodeRecord]) -> Self {
        let steps = || episodes.iter().flat_map(|e| e.rewards.iter().copied());
        let costs = || episodes.iter().flat_map(|e| e.costs.iter().copied());
        let (reward_mean, reward_std) = mean_std(steps());
        let (cost_mean, cost_std) = mean_std(costs());
        let returns: Vec<f64> = episodes.iter().map(EpisodeRecord::total_reward).collect();
        let cost_returns: Vec<f64> = episodes.iter().map(EpisodeRecord::total_cost).collect();
        let n = episodes.len().max(1) as f64;
        Self {
            reward_mean,
            reward_std,
            cost_mean,
            cost_std,
            return_mean: returns.iter().sum::<f64>() / n,
            return_max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            return_p90: percentile(&returns, 0.9),
            cost_return_mean: cost_returns.iter().sum::<f64>() / n,
            cost_return_max: cost_returns
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub episode_count: usize,
    pub total_steps: usize,
    /// Episodes per layout id.
    pub context_histogram: BTreeMap<usize, usize>,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub policy_mix: Vec<BehaviorSpec>,
    /// Reward and cost weights the episodes were scored with.
    #[serde(default)]
    pub env: EnvConfig,
    pub stats: DatasetStats,
    pub episodes_crc32: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<EpisodeRecord>,
    /// `offsets[i]` is the global index of episode `i`'s first step.
    offsets: Vec<usize>,
}

impl Dataset {
    /// Wraps annotated episodes, computing the manifest.
    pub fn from_episodes(
        episodes: Vec<EpisodeRecord>,
        split: Option<Split>,
        seed: Option<u64>,
        policy_mix: Vec<BehaviorSpec>,
    ) -> Result<Self> {
        if episodes.is_empty() {
            return Err(FusionError::EmptyDataset);
        }
        let mut histogram = BTreeMap::new();
        for e in &episodes {
            *histogram.entry(e.context.layout_id).or_insert(0) += 1;
        }
        let body = episodes_body(&episodes)?;
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            episode_count: episodes.len(),
            total_steps: episodes.iter().map(EpisodeRecord::len).sum(),
            context_histogram: histogram,
            split,
            seed,
            policy_mix,
            env: EnvConfig::default(),
            stats: DatasetStats::compute(&episodes),
            episodes_crc32: crc32fast::hash(body.as_bytes()),
        };
        Ok(Self::assemble(manifest, episodes))
    }

    fn assemble(manifest: Manifest, episodes: Vec<EpisodeRecord>) -> Self {
        let mut offsets = Vec::with_capacity(episodes.len());
        let mut acc = 0;
        for e in &episodes {
            offsets.push(acc);
            acc += e.len();
        }
        Self {
            manifest,
            episodes,
            offsets,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.manifest.total_steps
    }

    /// Maps a global step index to `(episode, step)`.
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let e = self.offsets.partition_point(|&o| o <= global) - 1;
        (e, global - self.offsets[e])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let body = episodes_body(&self.episodes)?;
        let mut manifest_text = serde_json::to_string_pretty(&self.manifest)?;
        manifest_text.push('\n');
        let targets = [
            (dir.join(EPISODES_FILE), body),
            (dir.join(MANIFEST_FILE), manifest_text),
        ];
        let temps: Vec<PathBuf> = targets
            .iter()
            .map(|(p, _)| p.with_extension("tmp"))
            .collect();
        let write_all = || -> Result<()> {
            for ((_, text), tmp) in targets.iter().zip(&temps) {
                let mut f = fs::File::create(tmp)?;
                f.write_all(text.as_bytes())?;
                f.sync_all()?;
            }
            for ((path, _), tmp) in targets.iter().zip(&temps) {
                fs::rename(tmp, path)?;
            }
            Ok(())
        };
        let res = write_all();
        if res.is_err() {
            for tmp in &temps {
                let _ = fs::remove_file(tmp);
            }
        }
        res
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(FusionError::SchemaVersion {
                found: manifest.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let path = dir.join(EPISODES_FILE);
        let body = fs::read(&path)?;
        let found = crc32fast::hash(&body);
        if found != manifest.episodes_crc32 {
            return Err(FusionError::Checksum {
                path,
                expected: manifest.episodes_crc32,
                found,
            });
        }
        let text = String::from_utf8(body).map_err(|e| FusionError::Dataset(e.to_string()))?;
        let mut episodes = Vec::with_capacity(manifest.episode_count);
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let mut ep: EpisodeRecord = serde_json::from_str(line)?;
            if ep.rtg.is_empty() && ep.ctg.is_empty() {
                annotate_returns(&mut ep);
            }
            ep.check_lengths()?;
            ep.context.validate()?;
            if !suffix_law_holds(&ep.rewards, &ep.rtg) || !suffix_law_holds(&ep.costs, &ep.ctg) {
                return Err(FusionError::Dataset(format!(
                    "episode {i} violates the return-to-go suffix law"
                )));
            }
            episodes.push(ep);
        }
        let steps: usize = episodes.iter().map(EpisodeRecord::len).sum();
        if episodes.is_empty() {
            return Err(FusionError::EmptyDataset);
        }
        if episodes.len() != manifest.episode_count || steps != manifest.total_steps {
            return Err(FusionError::Dataset(format!(
                "manifest lists {} episodes / {} steps, file has {} / {}",
                manifest.episode_count,
                manifest.total_steps,
                episodes.len(),
                steps
            )));
        }
        Ok(Self::assemble(manifest, episodes))
    }

    /// Samples `batch_size` windows of `h` steps. Each window ends at a step
    /// drawn uniformly over the whole corpus and is left-padded at episode
    /// starts.
    pub fn sample_windows<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        h: usize,
        rng: &mut R,
    ) -> Result<Batch> {
        if self.total_steps() == 0 {
            return Err(FusionError::EmptyDataset);
        }
        let ends: Vec<(usize, usize)> = (0..batch_size)
            .map(|_| self.locate(rng.random_range(0..self.total_steps())))
            .collect();
        Ok(self.windows_at(&ends, h))
    }

    /// Builds the windows ending at the given `(episode, step)` pairs.
    pub fn windows_at(&self, ends: &[(usize, usize)], h: usize) -> Batch {
        let mut b = Batch::zeros(ends.len(), h);
        for (bi, &(e, t)) in ends.iter().enumerate() {
            let ep = &self.episodes[e];
            for j in 0..h {
                let Some(s) = (t + j + 1).checked_sub(h) else {
                    continue;
                };
                let p = bi * h + j;
                b.valid[p] = true;
                b.dyn_valid[p] = j + 1 < h;
                if s > 0 {
                    b.prev_action[p * ACTION_DIM..(p + 1) * ACTION_DIM]
                        .copy_from_slice(&ep.actions[s - 1]);
                }
                b.action[p * ACTION_DIM..(p + 1) * ACTION_DIM].copy_from_slice(&ep.actions[s]);
                b.rtg[p] = ep.rtg[s];
                b.ctg[p] = ep.ctg[s];
                b.reward[p] = ep.rewards[s];
                b.cost[p] = ep.costs[s];
                b.ego[p * EGO_DIM..(p + 1) * EGO_DIM].copy_from_slice(&ep.ego[s]);
                b.beam[p * BEAM_DIM..(p + 1) * BEAM_DIM].copy_from_slice(&ep.beam[s]);
                b.nav[p * NAV_DIM..(p + 1) * NAV_DIM].copy_from_slice(&ep.nav[s]);
            }
        }
        b
    }
}

fn episodes_body(episodes: &[EpisodeRecord]) -> Result<String> {
    let mut body = String::new();
    for e in episodes {
        body.push_str(&serde_json::to_string(e)?);
        body.push('\n');
    }
    Ok(body)
}

/// Row-major `[batch, h, ...]` arrays for one minibatch of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub h: usize,
    pub prev_action: Vec<f64>,
    pub rtg: Vec<f64>,
    pub ctg: Vec<f64>,
    pub ego: Vec<f64>,
    pub beam: Vec<f64>,
    pub nav: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
    /// Position holds a real step (false for left padding).
    pub valid: Vec<bool>,
    /// Position is real and its successor state is inside the window.
    pub dyn_valid: Vec<bool>,
}

impl Batch {
    pub fn zeros(batch: usize, h: usize) -> Self {
        let n = batch * h;
        Self {
            batch,
            h,
            prev_action: vec![0.0; n * ACTION_DIM],
            rtg: vec![0.0; n],
            ctg: vec![0.0; n],
            ego: vec![0.0; n * EGO_DIM],
            beam: vec![0.0; n * BEAM_DIM],
            nav: vec![0.0; n * NAV_DIM],
            action: vec![0.0; n * ACTION_DIM],
            reward: vec![0.0; n],
            cost: vec![0.0; n],
            valid: vec![false; n],
            dyn_valid: vec![false; n],
        }
    }
}

/// Collects `n_episodes` scripted episodes from `split` contexts. Episode
/// `i` draws its context and driver from streams indexed by `i`, so the
/// corpus is a pure function of `(n_episodes, split, policy_mix, seed)`.
pub fn collect_episodes(
    n_episodes: usize,
    split: Split,
    policy_mix: &[BehaviorSpec],
    seed: u64,
) -> Result<Dataset> {
    collect_episodes_with(n_episodes, split, policy_mix, &EnvConfig::default(), seed)
}

pub fn collect_episodes_with(
    n_episodes: usize,
    split: Split,
    policy_mix: &[BehaviorSpec],
    env: &EnvConfig,
    seed: u64,
) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(FusionError::EmptyDataset);
    }
    if policy_mix.is_empty() {
        return Err(FusionError::Config("policy mix is empty".into()));
    }
    let weights: Vec<f64> = policy_mix.iter().map(|s| s.weight).collect();
    let mut episodes = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes as u64 {
        let ctx = sample_context(split, derive_seed(seed, Stream::Context, i));
        let mut rng = stream_rng(seed, Stream::Behavior, i);
        let spec = policy_mix[sample_index(&weights, &mut rng)];
        episodes.push(run_scripted_episode_with(&ctx, &spec, env, &mut rng)?);
    }
    let mut ds = Dataset::from_episodes(episodes, Some(split), Some(seed), policy_mix.to_vec())?;
    ds.manifest.env = *env;
    Ok(ds)
}

/// Collects and writes a corpus to `out`.
pub fn collect(
    out: &Path,
    n_episodes: usize,
    split: Split,
    policy_mix: Option<&[BehaviorSpec]>,
    env: &EnvConfig,
    seed: u64,
) -> Result<Dataset> {
    let mix = policy_mix
        .map(<[_]>::to_vec)
        .unwrap_or_else(default_policy_mix);
    let ds = collect_episodes_with(n_episodes, split, &mix, env, seed)?;
    ds.save(out)?;
    Ok(ds)
}
