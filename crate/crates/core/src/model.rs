//! Return/cost-conditioned causal transformer with per-factor Gaussian heads
//! and the shared state encoder.
//!
//! Each window step contributes six tokens in the order
//! `[a_{t-1}, C_t, R_t, s_ego, s_beam, s_nav]`, flattened as `6t + k`.
//! Read positions:
//! * action `a_t`: the `s_nav` token of step `t`, the last token before `a_t`;
//! * next-state factors `s_{t+1}`: the `a_t` token (first token of step
//!   `t+1`), so the dynamics are conditioned on the action taken;
//! * reward/cost-to-go values: the encoder latent `z_t = phi(s_t)`.
//!
//! The state tokens are the encoder's per-block embeddings, so the bisimulation
//! loss on `z` shapes the inputs the transformer sees.

use std::path::Path;

use fusion_grad::{load_checkpoint, save_checkpoint, Array, ParamStore, Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, DatasetStats, ACTION_DIM};
use crate::env::{BEAM_DIM, EGO_DIM, NAV_DIM};
use crate::error::{FusionError, Result};
use crate::rng::{stream_rng, Stream};

pub const TOKENS_PER_STEP: usize = 6;
pub const TOK_PREV_ACTION: usize = 0;
pub const TOK_CTG: usize = 1;
pub const TOK_RTG: usize = 2;
pub const TOK_EGO: usize = 3;
pub const TOK_BEAM: usize = 4;
pub const TOK_NAV: usize = 5;

/// Flattened position of token `k` of window step `t`.
pub fn token_index(t: usize, k: usize) -> usize {
    TOKENS_PER_STEP * t + k
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub dropout: f64,
    pub mlp_ratio: usize,
    /// Reward-to-go is divided by this before embedding and prediction.
    pub rtg_scale: f64,
    /// Initial reward-to-go token at inference, the corpus 90th-percentile return.
    #[serde(default)]
    pub reward_target: f64,
    /// Whether the reward/cost-to-go heads were trained. Without them the
    /// inference token updates fall back to plain subtraction.
    #[serde(default = "yes")]
    pub value_heads: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_layers: 3,
            n_heads: 4,
            context_len: 20,
            dropout: 0.1,
            mlp_ratio: 4,
            rtg_scale: 1.0,
            reward_target: 0.0,
            value_heads: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(FusionError::Config(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.context_len == 0 || self.n_layers == 0 || self.mlp_ratio == 0 {
            return Err(FusionError::Config(
                "context_len, n_layers and mlp_ratio must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.rtg_scale <= 0.0 {
            return Err(FusionError::Config(
                "dropout must lie in [0, 1) and rtg_scale be positive".into(),
            ));
        }
        Ok(())
    }

    /// Picks the reward-to-go scale from corpus statistics.
    pub fn with_stats(mut self, stats: &DatasetStats) -> Self {
        self.rtg_scale = stats.return_max.abs().max(1.0);
        self.reward_target = stats.return_p90;
        self
    }
}

/// Reward-to-go as seen by the network.
pub fn rtg_to_model(r: f64, cfg: &ModelConfig) -> f64 {
    r / cfg.rtg_scale
}

pub fn rtg_from_model(y: f64, cfg: &ModelConfig) -> f64 {
    y * cfg.rtg_scale
}

/// Cost-to-go as seen by the network: a signed log, so that budgets of 0, 1
/// and tens of cost units stay well apart.
pub fn ctg_to_model(c: f64) -> f64 {
    c.signum() * c.abs().ln_1p()
}

pub fn ctg_from_model(y: f64) -> f64 {
    y.signum() * y.abs().exp_m1()
}

/// Which terms of the trajectory loss are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub rtg: bool,
    pub ctg: bool,
    pub act: bool,
    pub dyn_: bool,
}

impl LossToggles {
    pub fn full() -> Self {
        Self {
            rtg: true,
            ctg: true,
            act: true,
            dyn_: true,
        }
    }

    pub fn act_only() -> Self {
        Self {
            rtg: false,
            ctg: false,
            act: true,
            dyn_: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rtg: f64,
    pub ctg: f64,
    pub act: f64,
    pub dyn_ego: f64,
    pub dyn_beam: f64,
    pub dyn_nav: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn dyn_total(&self) -> f64 {
        self.dyn_ego + self.dyn_beam + self.dyn_nav
    }

    pub fn terms(&self) -> [f64; 6] {
        [
            self.rtg,
            self.ctg,
            self.act,
            self.dyn_ego,
            self.dyn_beam,
            self.dyn_nav,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.terms().iter().all(|x| x.is_finite()) && self.total.is_finite()
    }
}

/// Gaussian head output on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussVar {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Head parameters: a GELU hidden layer, then zero-initialised mean and
/// log-std projections.
pub const HEADS: [(&str, usize); 6] = [
    ("act", ACTION_DIM),
    ("rtg", 1),
    ("ctg", 1),
    ("dyn_ego", EGO_DIM),
    ("dyn_beam", BEAM_DIM),
    ("dyn_nav", NAV_DIM),
];

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub batch: usize,
    pub h: usize,
    /// Parameter leaves, aligned with `FusionModel::params`.
    pub param_vars: Vec<Var>,
    /// Encoder latent `z`, `[batch * h, embed_dim]`.
    pub latent: Var,
    pub action: GaussVar,
    pub rtg: GaussVar,
    pub ctg: GaussVar,
    pub dyn_ego: GaussVar,
    pub dyn_beam: GaussVar,
    pub dyn_nav: GaussVar,
    /// Per layer `[batch * n_heads, T, T]` attention probabilities.
    pub attention: Vec<Var>,
    /// Per sequence `T x T` support of the attention rows.
    pub masks: Vec<Vec<bool>>,
}

/// Plain-value view of a [`Forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub action: (Array, Array),
    pub rtg: (Array, Array),
    pub ctg: (Array, Array),
    pub dyn_ego: (Array, Array),
    pub dyn_beam: (Array, Array),
    pub dyn_nav: (Array, Array),
    pub attention: Vec<Array>,
}

/// Attention support for one window: token `i` sees token `j` when `j <= i`
/// and `j` belongs to a real (unpadded) step, and always sees itself.
pub fn causal_mask(valid: &[bool]) -> Vec<bool> {
    let t = valid.len() * TOKENS_PER_STEP;
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            m[i * t + j] = j == i || valid[j / TOKENS_PER_STEP];
        }
    }
    m
}

struct Init<'a, R: Rng> {
    rng: &'a mut R,
    params: ParamStore,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        self.params.insert(name, Array::from_vec(shape, data));
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) {
        self.params.insert(name, Array::full(shape, v));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        self.normal(
            &format!("{name}.w"),
            &[fan_in, fan_out],
            gain / (fan_in as f64).sqrt(),
        );
        self.fill(&format!("{name}.b"), &[fan_out], 0.0);
    }
}

impl FusionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut init = Init {
            rng: &mut rng,
            params: ParamStore::new(),
        };
        init.linear("enc.ego", EGO_DIM, d, 1.0);
        init.linear("enc.beam", BEAM_DIM, d, 1.0);
        init.linear("enc.nav", NAV_DIM, d, 1.0);
        init.linear("enc.fuse", 3 * d, d, 1.0);
        init.linear("emb.act", ACTION_DIM, d, 1.0);
        init.linear("emb.ctg", 1, d, 1.0);
        init.linear("emb.rtg", 1, d, 1.0);
        init.normal("emb.pos", &[config.context_len, d], 0.1);
        let resid_gain = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for l in 0..config.n_layers {
            init.fill(&format!("blk{l}.ln1.g"), &[d], 1.0);
            init.fill(&format!("blk{l}.ln1.b"), &[d], 0.0);
            for w in ["q", "k", "v"] {
                init.normal(
                    &format!("blk{l}.attn.w{w}"),
                    &[d, d],
                    1.0 / (d as f64).sqrt(),
                );
            }
            init.linear(&format!("blk{l}.attn.o"), d, d, resid_gain);
            init.fill(&format!("blk{l}.ln2.g"), &[d], 1.0);
            init.fill(&format!("blk{l}.ln2.b"), &[d], 0.0);
            init.linear(&format!("blk{l}.mlp.fc"), d, config.mlp_ratio * d, 1.0);
            init.linear(
                &format!("blk{l}.mlp.proj"),
                config.mlp_ratio * d,
                d,
                resid_gain,
            );
        }
        init.fill("ln_f.g", &[d], 1.0);
        init.fill("ln_f.b", &[d], 0.0);
        for (name, dim) in HEADS {
            init.linear(&format!("head.{name}.hidden"), d, d, 1.0);
            init.fill(&format!("head.{name}.mu.w"), &[d, dim], 0.0);
            init.fill(&format!("head.{name}.mu.b"), &[dim], 0.0);
            init.fill(&format!("head.{name}.ls.w"), &[d, dim], 0.0);
            init.fill(&format!("head.{name}.ls.b"), &[dim], 0.0);
        }
        Ok(Self {
            config,
            params: init.params,
        })
    }

    /// Indices of the state-encoder parameters.
    pub fn encoder_ids(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params.name(i).starts_with("enc."))
            .collect()
    }

    /// Indices of the parameters of the named head (`act`, `rtg`, ...).
    pub fn head_ids(&self, head: &str) -> Vec<usize> {
        let prefix = format!("head.{head}.");
        (0..self.params.len())
            .filter(|&i| self.params.name(i).starts_with(&prefix))
            .collect()
    }

    fn id(&self, name: &str) -> usize {
        self.params
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let hyper = serde_json::to_value(&self.config)?;
        save_checkpoint(stem, &self.params, &hyper)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (params, hyper) = load_checkpoint(stem)?;
        let config: ModelConfig = serde_json::from_value(hyper)?;
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.names() != params.names()
            || reference
                .params
                .values()
                .iter()
                .zip(params.values())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(FusionError::Config(
                "checkpoint tensors do not match the model layout".into(),
            ));
        }
        Ok(Self { config, params })
    }

    /// Encoder `phi`: per-block `tanh` embeddings `e_k` and fused latent `z`.
    /// Inputs are `[n, dim]` constants; returns `([e_ego, e_beam, e_nav], z)`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        ego: Var,
        beam: Var,
        nav: Var,
    ) -> ([Var; 3], Var) {
        let blocks = [("enc.ego", ego), ("enc.beam", beam), ("enc.nav", nav)];
        let e = blocks.map(|(name, x)| {
            let y = self.linear(tape, pv, name, x);
            tape.tanh(y)
        });
        let cat = tape.concat_last(&e);
        let z = self.linear(tape, pv, "enc.fuse", cat);
        (e, z)
    }

    fn linear(&self, tape: &mut Tape, pv: &[Var], name: &str, x: Var) -> Var {
        let w = pv[self.id(&format!("{name}.w"))];
        let b = pv[self.id(&format!("{name}.b"))];
        let y = tape.matmul(x, w);
        tape.add_broadcast(y, b)
    }

    fn head(&self, tape: &mut Tape, pv: &[Var], name: &str, x: Var) -> GaussVar {
        let h = self.linear(tape, pv, &format!("head.{name}.hidden"), x);
        let h = tape.gelu(h);
        GaussVar {
            mu: self.linear(tape, pv, &format!("head.{name}.mu"), h),
            log_sigma: self.linear(tape, pv, &format!("head.{name}.ls"), h),
        }
    }

    fn dropout<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, rng: Option<&mut R>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let n = tape.value(x).len();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }

    /// Runs the network on `batch`. Passing a dropout RNG selects training
    /// mode; `None` is deterministic inference.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        dropout_rng: Option<&mut R>,
    ) -> Result<Forward> {
        self.check_batch(batch)?;
        let pv: Vec<Var> = self
            .params
            .values()
            .iter()
            .map(|a| tape.param(a.clone()))
            .collect();
        self.forward_with(tape, pv, batch, dropout_rng)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let h = batch.h;
        if h > self.config.context_len {
            return Err(FusionError::Config(format!(
                "window of {h} steps exceeds the context length {}",
                self.config.context_len
            )));
        }
        let n = batch.batch * h;
        let expect = [
            (batch.prev_action.len(), ACTION_DIM),
            (batch.rtg.len(), 1),
            (batch.ctg.len(), 1),
            (batch.ego.len(), EGO_DIM),
            (batch.beam.len(), BEAM_DIM),
            (batch.nav.len(), NAV_DIM),
            (batch.valid.len(), 1),
        ];
        if let Some((got, dim)) = expect.iter().find(|(got, dim)| *got != n * dim) {
            return Err(FusionError::Dataset(format!(
                "modality of width {dim} has {got} values, expected {}",
                n * dim
            )));
        }
        Ok(())
    }

    /// [`FusionModel::forward`] reading parameters from caller-made leaves,
    /// aligned with `self.params`.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        pv: Vec<Var>,
        batch: &Batch,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Forward> {
        self.check_batch(batch)?;
        if pv.len() != self.params.len() {
            return Err(FusionError::Config(format!(
                "{} parameter leaves for {} parameters",
                pv.len(),
                self.params.len()
            )));
        }
        let cfg = &self.config;
        let (b, h, d) = (batch.batch, batch.h, cfg.embed_dim);
        let n = b * h;

        let c = |tape: &mut Tape, data: Vec<f64>, dim: usize| {
            tape.constant(Array::from_vec(&[n, dim], data))
        };
        let ego = c(tape, batch.ego.clone(), EGO_DIM);
        let beam = c(tape, batch.beam.clone(), BEAM_DIM);
        let nav = c(tape, batch.nav.clone(), NAV_DIM);
        let (e, z) = self.encode(tape, &pv, ego, beam, nav);
        // State tokens carry only their own block, so a token never sees a
        // later-ordered block of its step; the fused latent feeds the value heads.
        let state_tokens = e;

        let prev = c(tape, normalize_actions(&batch.prev_action), ACTION_DIM);
        let ctg_in = c(
            tape,
            batch.ctg.iter().map(|&v| ctg_to_model(v)).collect(),
            1,
        );
        let rtg_in = c(
            tape,
            batch.rtg.iter().map(|&v| rtg_to_model(v, cfg)).collect(),
            1,
        );
        let tok_a = self.linear(tape, &pv, "emb.act", prev);
        let tok_c = self.linear(tape, &pv, "emb.ctg", ctg_in);
        let tok_r = self.linear(tape, &pv, "emb.rtg", rtg_in);

        let steps = tape.concat_last(&[
            tok_a,
            tok_c,
            tok_r,
            state_tokens[0],
            state_tokens[1],
            state_tokens[2],
        ]);
        let steps = tape.reshape(steps, &[b, h, TOKENS_PER_STEP * d]);
        let pos_all = pv[self.id("emb.pos")];
        let pos = if h == cfg.context_len {
            pos_all
        } else {
            // Short windows use the last `h` rows so the newest step keeps its slot.
            let p2 = tape.reshape(pos_all, &[cfg.context_len, d]);
            tape.gather_rows(p2, (cfg.context_len - h..cfg.context_len).collect())
        };
        let pos6 = tape.concat_last(&[pos; TOKENS_PER_STEP]);
        let x = tape.add_broadcast(steps, pos6);
        let t_len = TOKENS_PER_STEP * h;
        let mut x = tape.reshape(x, &[b, t_len, d]);

        let masks: Vec<Vec<bool>> = batch.valid.chunks(h).map(causal_mask).collect();
        let nh = cfg.n_heads;
        let dh = d / nh;
        let mut full_mask = Vec::with_capacity(b * nh * t_len * t_len);
        for m in &masks {
            for _ in 0..nh {
                full_mask.extend_from_slice(m);
            }
        }
        let mut attention = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| pv[self.id(&format!("blk{l}.{s}"))];
            let ln = tape.layer_norm(x, p("ln1.g"), p("ln1.b"));
            let split = |tape: &mut Tape, w: Var| {
                let y = tape.matmul(ln, w);
                let y = tape.reshape(y, &[b, t_len, nh, dh]);
                let y = tape.permute(y, &[0, 2, 1, 3]);
                tape.reshape(y, &[b * nh, t_len, dh])
            };
            let q = split(tape, p("attn.wq"));
            let k = split(tape, p("attn.wk"));
            let v = split(tape, p("attn.wv"));
            let s = tape.bmm(q, k, true);
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let att = tape.masked_softmax(s, &full_mask)?;
            attention.push(att);
            let o = tape.bmm(att, v, false);
            let o = tape.reshape(o, &[b, nh, t_len, dh]);
            let o = tape.permute(o, &[0, 2, 1, 3]);
            let o = tape.reshape(o, &[b, t_len, d]);
            let o = self.linear(tape, &pv, &format!("blk{l}.attn.o"), o);
            let o = self.dropout(tape, o, dropout_rng.as_deref_mut());
            x = tape.add(x, o);
            let ln2 = tape.layer_norm(x, p("ln2.g"), p("ln2.b"));
            let m = self.linear(tape, &pv, &format!("blk{l}.mlp.fc"), ln2);
            let m = tape.gelu(m);
            let m = self.linear(tape, &pv, &format!("blk{l}.mlp.proj"), m);
            let m = self.dropout(tape, m, dropout_rng.as_deref_mut());
            x = tape.add(x, m);
        }
        let x = tape.layer_norm(x, pv[self.id("ln_f.g")], pv[self.id("ln_f.b")]);
        let rows = tape.reshape(x, &[b * t_len, d]);

        let at = |bi: usize, t: usize, k: usize| bi * t_len + token_index(t, k);
        let act_rows: Vec<usize> = (0..n).map(|i| at(i / h, i % h, TOK_NAV)).collect();
        let dyn_rows: Vec<usize> = (0..n)
            .map(|i| {
                let (bi, t) = (i / h, i % h);
                if t + 1 < h {
                    at(bi, t + 1, TOK_PREV_ACTION)
                } else {
                    at(bi, t, TOK_NAV)
                }
            })
            .collect();
        let act_h = tape.gather_rows(rows, act_rows);
        let dyn_h = tape.gather_rows(rows, dyn_rows);

        Ok(Forward {
            batch: b,
            h,
            latent: z,
            action: self.head(tape, &pv, "act", act_h),
            rtg: self.head(tape, &pv, "rtg", z),
            ctg: self.head(tape, &pv, "ctg", z),
            dyn_ego: self.head(tape, &pv, "dyn_ego", dyn_h),
            dyn_beam: self.head(tape, &pv, "dyn_beam", dyn_h),
            dyn_nav: self.head(tape, &pv, "dyn_nav", dyn_h),
            param_vars: pv,
            attention,
            masks,
        })
    }

    /// Reward- and cost-to-go head means for single states, in environment
    /// units. The value heads read only the encoder latent, so this skips the
    /// transformer.
    pub fn value_estimates(&self, ego: &[f64], beam: &[f64], nav: &[f64]) -> Vec<(f64, f64)> {
        let n = ego.len() / EGO_DIM;
        let mut tape = Tape::new();
        let needed: Vec<bool> = (0..self.params.len())
            .map(|i| {
                let name = self.params.name(i);
                name.starts_with("enc.")
                    || name.starts_with("head.rtg.")
                    || name.starts_with("head.ctg.")
            })
            .collect();
        let pv: Vec<Var> = (0..self.params.len())
            .map(|i| {
                let v = if needed[i] {
                    self.params.get(i).clone()
                } else {
                    Array::scalar(0.0)
                };
                tape.constant(v)
            })
            .collect();
        let ego = tape.constant(Array::from_vec(&[n, EGO_DIM], ego.to_vec()));
        let beam = tape.constant(Array::from_vec(&[n, BEAM_DIM], beam.to_vec()));
        let nav = tape.constant(Array::from_vec(&[n, NAV_DIM], nav.to_vec()));
        let (_, z) = self.encode(&mut tape, &pv, ego, beam, nav);
        let r = self.head(&mut tape, &pv, "rtg", z);
        let c = self.head(&mut tape, &pv, "ctg", z);
        let (r, c) = (tape.value(r.mu).data(), tape.value(c.mu).data());
        (0..n)
            .map(|i| (rtg_from_model(r[i], &self.config), ctg_from_model(c[i])))
            .collect()
    }

    pub fn output(&self, tape: &Tape, f: &Forward) -> ModelOutput {
        let g = |v: GaussVar| (tape.value(v.mu).clone(), tape.value(v.log_sigma).clone());
        ModelOutput {
            action: g(f.action),
            rtg: g(f.rtg),
            ctg: g(f.ctg),
            dyn_ego: g(f.dyn_ego),
            dyn_beam: g(f.dyn_beam),
            dyn_nav: g(f.dyn_nav),
            attention: f.attention.iter().map(|&a| tape.value(a).clone()).collect(),
        }
    }
}

/// Actions are embedded and predicted as `[accel / 4, lane_cmd]`.
pub const ACTION_SCALE: [f64; ACTION_DIM] = [crate::env::ACCEL_LIMIT, 1.0];

pub fn normalize_actions(actions: &[f64]) -> Vec<f64> {
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| a / ACTION_SCALE[i % ACTION_DIM])
        .collect()
}

/// Trajectory loss: Gaussian NLLs of reward-to-go, cost-to-go, action and
/// each next-state factor, averaged over real positions. Returns the total
/// on the tape and the per-term values; the total is the sum of the terms in
/// the order rtg, ctg, act, ego, beam, nav.
pub fn traj_loss(
    tape: &mut Tape,
    f: &Forward,
    batch: &Batch,
    model: &ModelConfig,
    toggles: LossToggles,
) -> (Var, LossBreakdown) {
    let w_valid: Vec<f64> = batch
        .valid
        .iter()
        .map(|&v| if v { 1.0 } else { 0.0 })
        .collect();
    let w_dyn: Vec<f64> = batch
        .dyn_valid
        .iter()
        .map(|&v| if v { 1.0 } else { 0.0 })
        .collect();
    let (b, h) = (batch.batch, batch.h);
    // Next-state targets: the state at window position t + 1.
    let shift = |data: &[f64], dim: usize| {
        let mut out = vec![0.0; data.len()];
        for bi in 0..b {
            for t in 0..h.saturating_sub(1) {
                let src = (bi * h + t + 1) * dim;
                let dst = (bi * h + t) * dim;
                out[dst..dst + dim].copy_from_slice(&data[src..src + dim]);
            }
        }
        out
    };
    let mut terms: Vec<(Var, usize)> = Vec::new();
    let mut bd = LossBreakdown::default();
    if toggles.rtg {
        let target = batch.rtg.iter().map(|&r| rtg_to_model(r, model)).collect();
        terms.push((
            tape.gaussian_nll(f.rtg.mu, f.rtg.log_sigma, target, w_valid.clone()),
            0,
        ));
    }
    if toggles.ctg {
        let target = batch.ctg.iter().map(|&c| ctg_to_model(c)).collect();
        terms.push((
            tape.gaussian_nll(f.ctg.mu, f.ctg.log_sigma, target, w_valid.clone()),
            1,
        ));
    }
    if toggles.act {
        let target = normalize_actions(&batch.action);
        terms.push((
            tape.gaussian_nll(f.action.mu, f.action.log_sigma, target, w_valid.clone()),
            2,
        ));
    }
    if toggles.dyn_ {
        for (g, data, dim, slot) in [
            (f.dyn_ego, &batch.ego, EGO_DIM, 3),
            (f.dyn_beam, &batch.beam, BEAM_DIM, 4),
            (f.dyn_nav, &batch.nav, NAV_DIM, 5),
        ] {
            terms.push((
                tape.gaussian_nll(g.mu, g.log_sigma, shift(data, dim), w_dyn.clone()),
                slot,
            ));
        }
    }
    let mut total: Option<Var> = None;
    let mut sum = 0.0;
    for &(v, slot) in &terms {
        let val = tape.value(v).data()[0];
        match slot {
            0 => bd.rtg = val,
            1 => bd.ctg = val,
            2 => bd.act = val,
            3 => bd.dyn_ego = val,
            4 => bd.dyn_beam = val,
            _ => bd.dyn_nav = val,
        }
        sum += val;
        total = Some(match total {
            None => v,
            Some(t) => tape.add(t, v),
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Array::scalar(0.0)));
    bd.total = sum;
    (total, bd)
}

/// Shannon entropy of a probability row, `-sum p ln p` over `p > 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Mean attention entropy per layer over the query rows of real steps.
pub fn attention_entropy_of(
    out: &ModelOutput,
    valid: &[bool],
    h: usize,
    n_heads: usize,
) -> Vec<f64> {
    let t_len = TOKENS_PER_STEP * h;
    out.attention
        .iter()
        .map(|att| {
            let mut total = 0.0;
            let mut count = 0usize;
            for (s, row) in att.data().chunks(t_len).enumerate() {
                let seq = s / (n_heads * t_len);
                let query = s % t_len;
                if valid[seq * h + query / TOKENS_PER_STEP] {
                    total += row_entropy(row);
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                total / count as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_layout() {
        assert_eq!(token_index(0, TOK_NAV), 5);
        assert_eq!(token_index(1, TOK_PREV_ACTION), 6);
        assert_eq!(token_index(3, TOK_RTG), 20);
    }

    #[test]
    fn mask_for_two_steps_is_lower_triangular() {
        let m = causal_mask(&[true, true]);
        assert_eq!(m.len(), 144);
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(m[i * 12 + j], j <= i, "({i},{j})");
            }
        }
        // Token (t=1, k=0) sees the six tokens of step 0 and itself.
        let row = &m[6 * 12..7 * 12];
        assert_eq!(row.iter().filter(|x| **x).count(), 7);
    }

    #[test]
    fn padded_steps_are_hidden() {
        let m = causal_mask(&[false, true]);
        for i in 0..12 {
            for j in 0..6 {
                assert_eq!(m[i * 12 + j], i == j);
            }
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(row_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((row_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        let p = [0.2, 0.5, 0.3];
        let direct = -(0.2f64 * 0.2f64.ln() + 0.5 * 0.5f64.ln() + 0.3 * 0.3f64.ln());
        assert!((row_entropy(&p) - direct).abs() < 1e-15);
    }

    #[test]
    fn ctg_transform_roundtrips() {
        for c in [-3.0, 0.0, 0.5, 1.0, 90.0] {
            assert!((ctg_from_model(ctg_to_model(c)) - c).abs() < 1e-9);
        }
        assert!(ctg_to_model(0.0) == 0.0 && ctg_to_model(1.0) > 0.6);
    }
}
