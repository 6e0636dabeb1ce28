//! Offline training: alternating trajectory-loss model updates and
//! bisimulation encoder updates.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use fusion_grad::{
    adam_step, clip_grad_norm, load_checkpoint, save_checkpoint, AdamConfig, Array, OptimState,
    ParamStore, Tape,
};
use serde::{Deserialize, Serialize};

use crate::cbl::{cbl_update, transitions, BisimConfig, EncoderOptim, PairBatch};
use crate::dataset::Dataset;
use crate::error::{FusionError, Result};
use crate::model::{traj_loss, FusionModel, LossBreakdown, LossToggles, ModelConfig};
use crate::rng::{stream_rng, Stream};
use crate::rollout::{evaluate, RolloutConfig, Setting};

/// Context length of the short-context ablation.
pub const SHORT_CONTEXT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Same model with a 5-step context.
    Short,
    /// Trajectory loss reduced to the action term.
    NoCewm,
    /// No encoder regularisation.
    NoCbl,
}

impl FromStr for Ablation {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Ablation::Full),
            "short" => Ok(Ablation::Short),
            "no_cewm" => Ok(Ablation::NoCewm),
            "no_cbl" => Ok(Ablation::NoCbl),
            _ => Err(FusionError::Config(format!(
                "unknown ablation `{s}` (expected full, short, no-cewm or no-cbl)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::Short => "short",
            Ablation::NoCewm => "no_cewm",
            Ablation::NoCbl => "no_cbl",
        })
    }
}

impl Ablation {
    pub fn toggles(self) -> LossToggles {
        match self {
            Ablation::NoCewm => LossToggles::act_only(),
            _ => LossToggles::full(),
        }
    }

    pub fn uses_cbl(self) -> bool {
        self != Ablation::NoCbl
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_model: f64,
    pub lr_encoder: f64,
    /// Weight of the bisimulation loss in the encoder update.
    pub beta: f64,
    pub grad_clip: f64,
    pub ablation: Ablation,
    /// Steps between evaluation rollouts; 0 disables them.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Steps between resumable snapshots; 0 writes one only at the end.
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub bisim: BisimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr_model: 1e-3,
            lr_encoder: 3e-4,
            beta: 0.5,
            grad_clip: 1.0,
            ablation: Ablation::Full,
            eval_interval: 0,
            eval_episodes: 4,
            checkpoint_interval: 0,
            seed: 0,
            bisim: BisimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(FusionError::Config(
                "steps and batch_size must be positive".into(),
            ));
        }
        if !(self.lr_model >= 0.0
            && self.lr_encoder >= 0.0
            && self.beta >= 0.0
            && self.grad_clip >= 0.0)
        {
            return Err(FusionError::Config(
                "learning rates, beta and grad_clip must be >= 0".into(),
            ));
        }
        self.bisim.validate()
    }
}

/// Model configuration implied by an ablation and the training corpus.
pub fn model_config_for(base: &ModelConfig, ablation: Ablation, data: &Dataset) -> ModelConfig {
    let mut cfg = base.clone().with_stats(&data.manifest.stats);
    if ablation == Ablation::Short {
        cfg.context_len = SHORT_CONTEXT;
    }
    cfg.value_heads = ablation.toggles().rtg;
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: LossBreakdown,
    pub bisim: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: u64,
    pub success_rate: f64,
    pub reward: f64,
    pub cost: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step {
        #[serde(flatten)]
        log: StepLog,
        elapsed_s: f64,
    },
    Eval(EvalLog),
}

pub struct Trainer {
    pub model: FusionModel,
    pub cfg: TrainConfig,
    pub model_opt: OptimState,
    pub enc_opt: EncoderOptim,
    /// Steps completed so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: FusionModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model_opt = OptimState::new(
            AdamConfig {
                lr: cfg.lr_model,
                ..AdamConfig::default()
            },
            model.params.values(),
        );
        let enc_opt = EncoderOptim::new(&model, cfg.lr_encoder);
        Ok(Self {
            model,
            cfg,
            model_opt,
            enc_opt,
            step: 0,
        })
    }

    /// Fresh model for `data` with initialisation drawn from the training seed.
    pub fn for_dataset(base: &ModelConfig, data: &Dataset, cfg: TrainConfig) -> Result<Self> {
        let mc = model_config_for(base, cfg.ablation, data);
        let model = FusionModel::new(mc, cfg.seed)?;
        Self::new(model, cfg)
    }

    /// One model update and, unless disabled, one encoder update. Each
    /// random consumer draws from a stream keyed by the step index, so the
    /// run is resumable and consumers never shift one another.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        let k = self.step;
        let seed = self.cfg.seed;
        let mut batch_rng = stream_rng(seed, Stream::Batch, k);
        let mut dropout_rng = stream_rng(seed, Stream::Dropout, k);
        let h = self.model.config.context_len;
        let batch = data.sample_windows(self.cfg.batch_size, h, &mut batch_rng)?;

        let mut tape = Tape::new();
        let f = self
            .model
            .forward(&mut tape, &batch, Some(&mut dropout_rng))?;
        let (loss, breakdown) = traj_loss(
            &mut tape,
            &f,
            &batch,
            &self.model.config,
            self.cfg.ablation.toggles(),
        );
        if !breakdown.all_finite() {
            return Err(FusionError::NonFiniteLoss {
                step: k,
                detail: format!("{breakdown:?}"),
            });
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Vec<f64>> = f
            .param_vars
            .iter()
            .zip(self.model.params.values())
            .map(|(&v, p)| grads.get_or_zeros(v, p.len()))
            .collect();
        let grad_norm = if self.cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut g, self.cfg.grad_clip)
        } else {
            clip_grad_norm(&mut g, f64::INFINITY)
        };
        let pairs = if self.cfg.ablation.uses_cbl() {
            let out = self.model.output(&tape, &f);
            let mut pair_rng = stream_rng(seed, Stream::Pairing, k);
            Some(PairBatch::permuted(
                transitions(&batch, &out),
                &mut pair_rng,
            ))
        } else {
            None
        };
        drop(tape);
        {
            let mut params: Vec<&mut Array> = self.model.params.values_mut().iter_mut().collect();
            let gref: Vec<&[f64]> = g.iter().map(|v| v.as_slice()).collect();
            adam_step(&mut params, &gref, &mut self.model_opt)?;
        }
        let bisim = match pairs {
            Some(p) => Some(cbl_update(
                &mut self.model,
                &mut self.enc_opt,
                &p,
                &self.cfg.bisim,
                self.cfg.beta,
                self.cfg.grad_clip,
            )?),
            None => None,
        };
        self.step += 1;
        Ok(StepLog {
            step: k,
            loss: breakdown,
            bisim,
            grad_norm,
        })
    }

    /// Writes the model and both optimiser states under `dir`.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model"))?;
        save_optim(&dir.join("opt_model"), &self.model_opt, None)?;
        save_optim(
            &dir.join("opt_encoder"),
            &self.enc_opt.state,
            Some(&self.enc_opt.ids),
        )?;
        let meta = serde_json::json!({ "step": self.step, "train": self.cfg });
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Restores a trainer written by [`Trainer::save_state`]. The stored
    /// training config wins over the caller's except for `steps`.
    pub fn load_state(dir: &Path, steps: Option<u64>) -> Result<Self> {
        let model = FusionModel::load(&dir.join("model"))?;
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        let mut cfg: TrainConfig = serde_json::from_value(meta["train"].clone())?;
        if let Some(s) = steps {
            cfg.steps = s;
        }
        let step = meta["step"]
            .as_u64()
            .ok_or_else(|| FusionError::Config("state.json lacks a step count".into()))?;
        let mut t = Self::new(model, cfg)?;
        t.model_opt = load_optim(&dir.join("opt_model"), &t.model_opt)?;
        t.enc_opt.state = load_optim(&dir.join("opt_encoder"), &t.enc_opt.state)?;
        t.step = step;
        Ok(t)
    }
}

fn save_optim(stem: &Path, s: &OptimState, ids: Option<&[usize]>) -> Result<()> {
    let mut store = ParamStore::new();
    for (i, (m, v)) in s.first.iter().zip(&s.second).enumerate() {
        store.insert(format!("m{i}"), m.clone());
        store.insert(format!("v{i}"), v.clone());
    }
    let hyper = serde_json::json!({ "step": s.step, "config": s.config, "ids": ids });
    save_checkpoint(stem, &store, &hyper)?;
    Ok(())
}

fn load_optim(stem: &Path, like: &OptimState) -> Result<OptimState> {
    let (store, hyper) = load_checkpoint(stem)?;
    let n = like.first.len();
    if store.len() != 2 * n {
        return Err(FusionError::Config(format!(
            "optimizer state holds {} tensors, expected {}",
            store.len(),
            2 * n
        )));
    }
    let mut s = like.clone();
    s.step = hyper["step"].as_u64().unwrap_or(0);
    s.config = serde_json::from_value(hyper["config"].clone())?;
    for i in 0..n {
        s.first[i] = store.get(2 * i).clone();
        s.second[i] = store.get(2 * i + 1).clone();
        if s.first[i].shape() != like.first[i].shape() {
            return Err(FusionError::Config(format!(
                "optimizer tensor {i} has the wrong shape"
            )));
        }
    }
    Ok(s)
}

/// Files written by [`fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitOutput {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log: Vec<LogEntry>,
}

/// Runs the trainer to `cfg.steps`, logging to `out/train_log.jsonl` and
/// writing `out/final` (resumable state) and, with evaluation enabled,
/// `out/best_model` chosen by success rate.
pub fn fit(trainer: &mut Trainer, data: &Dataset, out: Option<&Path>) -> Result<FitOutput> {
    let started = Instant::now();
    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let file = OpenOptions::new()
                .create(true)
                .append(trainer.step > 0)
                .write(true)
                .truncate(trainer.step == 0)
                .open(dir.join("train_log.jsonl"))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut best: Option<f64> = None;
    let mut best_path = None;
    let mut emit = |entry: LogEntry, writer: &mut Option<BufWriter<File>>| -> Result<()> {
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
        }
        log.push(entry);
        Ok(())
    };
    while trainer.step < trainer.cfg.steps {
        let entry = trainer.train_step(data)?;
        let done = trainer.step;
        emit(
            LogEntry::Step {
                log: entry,
                elapsed_s: started.elapsed().as_secs_f64(),
            },
            &mut writer,
        )?;
        let cfg = &trainer.cfg;
        if cfg.eval_interval > 0 && done % cfg.eval_interval == 0 {
            let rc = RolloutConfig::default();
            let seeds = [cfg.seed];
            let report = evaluate(
                &trainer.model,
                Setting::Policy,
                cfg.eval_episodes,
                &seeds,
                &rc,
                &data.manifest.env,
            )?;
            let e = EvalLog {
                step: done,
                success_rate: report.success_rate.mean,
                reward: report.reward.mean,
                cost: report.cost.mean,
            };
            if let Some(dir) = out {
                if best.is_none_or(|b| e.success_rate > b) {
                    best = Some(e.success_rate);
                    let p = dir.join("best_model");
                    trainer.model.save(&p)?;
                    best_path = Some(p);
                }
            }
            emit(LogEntry::Eval(e), &mut writer)?;
        }
        if let Some(dir) = out {
            let ci = trainer.cfg.checkpoint_interval;
            if ci > 0 && done % ci == 0 && done < trainer.cfg.steps {
                if let Some(w) = writer.as_mut() {
                    w.flush()?;
                }
                trainer.save_state(&dir.join("final"))?;
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    let final_checkpoint = match out {
        Some(dir) => {
            trainer.save_state(&dir.join("final"))?;
            dir.join("final").join("model")
        }
        None => PathBuf::new(),
    };
    Ok(FitOutput {
        final_checkpoint,
        best_checkpoint: best_path,
        log,
    })
}

/// Step losses of a log in order.
pub fn step_losses(log: &[LogEntry]) -> Vec<f64> {
    log.iter()
        .filter_map(|e| match e {
            LogEntry::Step { log, .. } => Some(log.loss.total),
            LogEntry::Eval(_) => None,
        })
        .collect()
}

/// Trailing moving average; entry `i` averages `xs[i+1-w ..= i]` (clipped at 0).
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names() {
        assert_eq!("no-cewm".parse::<Ablation>().unwrap(), Ablation::NoCewm);
        assert_eq!("no_cbl".parse::<Ablation>().unwrap(), Ablation::NoCbl);
        assert!("none".parse::<Ablation>().is_err());
        assert_eq!(Ablation::NoCewm.toggles(), LossToggles::act_only());
        assert!(!Ablation::NoCbl.uses_cbl());
    }

    #[test]
    fn smoothing_matches_direct_mean() {
        let xs: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let s = smooth(&xs, 3);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.5);
        assert_eq!(s[9], (49.0 + 64.0 + 81.0) / 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
