//! Safety-aware bisimulation: the pairwise distance target and the encoder
//! regulariser that pulls latent L1 distances towards it.

use fusion_grad::kernels::clamp_log_sigma;
use fusion_grad::{adam_step, clip_grad_norm, AdamConfig, Array, OptimState, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Dataset, ACTION_DIM};
use crate::env::{BEAM_DIM, EGO_DIM, NAV_DIM, OBS_DIM};
use crate::error::{FusionError, Result};
use crate::model::{FusionModel, ModelOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BisimConfig {
    /// Weight of the cost difference.
    pub lambda: f64,
    /// Weight of the transition distance.
    pub gamma_b: f64,
}

impl Default for BisimConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma_b: 0.99,
        }
    }
}

impl BisimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(0.0..1.0).contains(&self.gamma_b) {
            return Err(FusionError::Config(format!(
                "bisim lambda {} must be >= 0 and gamma_b {} in [0, 1)",
                self.lambda, self.gamma_b
            )));
        }
        Ok(())
    }
}

/// 2-Wasserstein distance between diagonal Gaussians.
pub fn w2_gaussian(mu1: &[f64], sigma1: &[f64], mu2: &[f64], sigma2: &[f64]) -> Result<f64> {
    let n = mu1.len();
    if sigma1.len() != n || mu2.len() != n || sigma2.len() != n {
        return Err(FusionError::InvalidDistribution(
            "mean and std lengths differ".into(),
        ));
    }
    if let Some(s) = sigma1.iter().chain(sigma2).find(|s| !(**s >= 0.0)) {
        return Err(FusionError::InvalidDistribution(format!(
            "standard deviation {s} is negative"
        )));
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += (mu1[i] - mu2[i]).powi(2) + (sigma1[i] - sigma2[i]).powi(2);
    }
    Ok(acc.sqrt())
}

/// One transition as seen by the bisimulation target.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSide {
    /// Factored observation `[ego | beam | nav]`.
    pub state: Vec<f64>,
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub cost: f64,
    /// Predicted next-state Gaussian, `OBS_DIM` means and stds.
    pub next_mu: Vec<f64>,
    pub next_sigma: Vec<f64>,
}

/// Minibatch paired with a shuffled copy of itself.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub first: Vec<PairSide>,
    pub second: Vec<PairSide>,
}

impl PairBatch {
    /// Pairs every sample with the sample at a uniformly shuffled index.
    /// Self-pairs are allowed.
    pub fn permuted<R: Rng + ?Sized>(samples: Vec<PairSide>, rng: &mut R) -> Self {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(rng);
        let second = idx.iter().map(|&i| samples[i].clone()).collect();
        Self {
            first: samples,
            second,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            first: self.second.clone(),
            second: self.first.clone(),
        }
    }
}

/// Transitions of `batch` with a known next state, together with the
/// model's (plain-value, hence detached) next-state predictions.
pub fn transitions(batch: &Batch, out: &ModelOutput) -> Vec<PairSide> {
    let factor = |arr: &(Array, Array), dim: usize, i: usize| {
        let mu = arr.0.data()[i * dim..(i + 1) * dim].to_vec();
        let sigma = arr.1.data()[i * dim..(i + 1) * dim]
            .iter()
            .map(|&ls| clamp_log_sigma(ls).exp())
            .collect::<Vec<_>>();
        (mu, sigma)
    };
    let mut sides = Vec::new();
    for i in 0..batch.batch * batch.h {
        if !batch.dyn_valid[i] {
            continue;
        }
        let mut state = Vec::with_capacity(OBS_DIM);
        state.extend_from_slice(&batch.ego[i * EGO_DIM..(i + 1) * EGO_DIM]);
        state.extend_from_slice(&batch.beam[i * BEAM_DIM..(i + 1) * BEAM_DIM]);
        state.extend_from_slice(&batch.nav[i * NAV_DIM..(i + 1) * NAV_DIM]);
        let mut next_mu = Vec::with_capacity(OBS_DIM);
        let mut next_sigma = Vec::with_capacity(OBS_DIM);
        for (arr, dim) in [
            (&out.dyn_ego, EGO_DIM),
            (&out.dyn_beam, BEAM_DIM),
            (&out.dyn_nav, NAV_DIM),
        ] {
            let (m, s) = factor(arr, dim, i);
            next_mu.extend(m);
            next_sigma.extend(s);
        }
        sides.push(PairSide {
            state,
            action: [
                batch.action[i * ACTION_DIM],
                batch.action[i * ACTION_DIM + 1],
            ],
            reward: batch.reward[i],
            cost: batch.cost[i],
            next_mu,
            next_sigma,
        });
    }
    sides
}

/// Per-pair target `|dr| + lambda |dc| + gamma_b W2`. Plain numbers, so
/// nothing downstream can differentiate through it.
pub fn bisim_target(pair: &PairBatch, cfg: &BisimConfig) -> Result<Vec<f64>> {
    if pair.first.len() != pair.second.len() {
        return Err(FusionError::Dataset("pair sides differ in length".into()));
    }
    pair.first
        .iter()
        .zip(&pair.second)
        .map(|(a, b)| {
            let w2 = w2_gaussian(&a.next_mu, &a.next_sigma, &b.next_mu, &b.next_sigma)?;
            Ok((a.reward - b.reward).abs()
                + cfg.lambda * (a.cost - b.cost).abs()
                + cfg.gamma_b * w2)
        })
        .collect()
}

fn encode_states(tape: &mut Tape, model: &FusionModel, pv: &[Var], sides: &[PairSide]) -> Var {
    let n = sides.len();
    let block = |tape: &mut Tape, lo: usize, dim: usize| {
        let data = sides
            .iter()
            .flat_map(|s| s.state[lo..lo + dim].iter().copied())
            .collect();
        tape.constant(Array::from_vec(&[n, dim], data))
    };
    let ego = block(tape, 0, EGO_DIM);
    let beam = block(tape, EGO_DIM, BEAM_DIM);
    let nav = block(tape, EGO_DIM + BEAM_DIM, NAV_DIM);
    model.encode(tape, pv, ego, beam, nav).1
}

/// `mean((|phi(s1) - sg(phi(s2))|_1 - d)^2)`. The two sides may read
/// different parameter leaves; the second side is detached either way.
pub fn bisim_loss_with(
    tape: &mut Tape,
    model: &FusionModel,
    pv_first: &[Var],
    pv_second: &[Var],
    pair: &PairBatch,
    targets: &[f64],
) -> Var {
    let z1 = encode_states(tape, model, pv_first, &pair.first);
    let z2 = encode_states(tape, model, pv_second, &pair.second);
    let z2 = tape.detach(z2);
    let diff = tape.sub(z1, z2);
    let diff = tape.abs(diff);
    let l1 = tape.sum_last(diff);
    let t = tape.constant(Array::from_vec(&[targets.len()], targets.to_vec()));
    let r = tape.sub(l1, t);
    let r = tape.square(r);
    tape.mean(r)
}

/// Parameter leaves for the encoder only; every other slot is a dummy
/// constant, which is fine because the encoder never reads it.
pub fn encoder_leaves(tape: &mut Tape, model: &FusionModel) -> Vec<Var> {
    let enc = model.encoder_ids();
    (0..model.params.len())
        .map(|i| {
            if enc.contains(&i) {
                tape.param(model.params.get(i).clone())
            } else {
                tape.constant(Array::scalar(0.0))
            }
        })
        .collect()
}

pub fn bisim_loss(
    tape: &mut Tape,
    model: &FusionModel,
    pv: &[Var],
    pair: &PairBatch,
    targets: &[f64],
) -> Var {
    bisim_loss_with(tape, model, pv, pv, pair, targets)
}

/// Encoder-only optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOptim {
    pub ids: Vec<usize>,
    pub state: OptimState,
}

impl EncoderOptim {
    pub fn new(model: &FusionModel, lr: f64) -> Self {
        let ids = model.encoder_ids();
        let state = OptimState::new(
            AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            ids.iter().map(|&i| model.params.get(i)),
        );
        Self { ids, state }
    }
}

/// Gradient step on `weight * L_bisim` for the encoder parameters; returns
/// the unweighted loss. Non-encoder parameters are not touched.
pub fn cbl_update(
    model: &mut FusionModel,
    opt: &mut EncoderOptim,
    pair: &PairBatch,
    cfg: &BisimConfig,
    weight: f64,
    clip: f64,
) -> Result<f64> {
    if pair.is_empty() {
        return Ok(0.0);
    }
    let targets = bisim_target(pair, cfg)?;
    let mut tape = Tape::new();
    let pv = encoder_leaves(&mut tape, model);
    let loss = bisim_loss(&mut tape, model, &pv, pair, &targets);
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(FusionError::NonFiniteLoss {
            step: opt.state.step,
            detail: format!("bisimulation loss {value}"),
        });
    }
    let scaled = tape.scale(loss, weight);
    let grads = tape.backward(scaled)?;
    let mut g: Vec<Vec<f64>> = opt
        .ids
        .iter()
        .map(|&i| grads.get_or_zeros(pv[i], model.params.get(i).len()))
        .collect();
    if clip > 0.0 {
        clip_grad_norm(&mut g, clip);
    }
    let ids = &opt.ids;
    let mut targets_mut: Vec<&mut Array> = model
        .params
        .values_mut()
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| ids.contains(i))
        .map(|(_, a)| a)
        .collect();
    let gref: Vec<&[f64]> = g.iter().map(|v| v.as_slice()).collect();
    adam_step(&mut targets_mut, &gref, &mut opt.state)?;
    Ok(value)
}

/// Samples a minibatch, predicts its dynamics with the current model,
/// pairs it with a shuffled copy and takes one encoder step.
#[allow(clippy::too_many_arguments)]
pub fn cbl_step<R: Rng + ?Sized>(
    dataset: &Dataset,
    model: &mut FusionModel,
    opt: &mut EncoderOptim,
    cfg: &BisimConfig,
    batch_size: usize,
    weight: f64,
    batch_rng: &mut R,
    pair_rng: &mut R,
) -> Result<f64> {
    let h = model.config.context_len;
    let batch = dataset.sample_windows(batch_size, h, batch_rng)?;
    let mut tape = Tape::new();
    let f = model.forward::<R>(&mut tape, &batch, None)?;
    let out = model.output(&tape, &f);
    let pair = PairBatch::permuted(transitions(&batch, &out), pair_rng);
    cbl_update(model, opt, &pair, cfg, weight, 1.0)
}
