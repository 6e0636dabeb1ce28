mod common;

use common::{rng, scrambled, small_dataset, tiny_config};
use fusion_core::dataset::Batch;
use fusion_core::model::{
    causal_mask, token_index, traj_loss, FusionModel, LossToggles, ModelConfig, HEADS,
    TOKENS_PER_STEP,
};
use fusion_grad::gradcheck::check_gradients;
use fusion_grad::{Array, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

fn eval_forward(model: &FusionModel, batch: &Batch) -> fusion_core::model::ModelOutput {
    let mut tape = Tape::new();
    let f = model.forward::<ChaCha8Rng>(&mut tape, batch, None).unwrap();
    model.output(&tape, &f)
}

#[test]
fn zero_init_heads_output_their_bias() {
    let m = FusionModel::new(tiny_config(), 3).unwrap();
    let batch = small_dataset().sample_windows(3, 4, &mut rng(1)).unwrap();
    let out = eval_forward(&m, &batch);
    for (mu, ls) in [
        &out.action,
        &out.rtg,
        &out.ctg,
        &out.dyn_ego,
        &out.dyn_beam,
        &out.dyn_nav,
    ] {
        assert!(mu.data().iter().chain(ls.data()).all(|v| *v == 0.0));
    }
}

#[test]
fn perfect_predictions_with_unit_sigma_cost_half_log_two_pi_per_term() {
    let m = FusionModel::new(tiny_config(), 0).unwrap();
    let mut b = Batch::zeros(2, 4);
    b.valid = vec![true; 8];
    b.dyn_valid = (0..8).map(|i| i % 4 != 3).collect();
    let mut tape = Tape::new();
    let f = m.forward::<ChaCha8Rng>(&mut tape, &b, None).unwrap();
    let (loss, bd) = traj_loss(&mut tape, &f, &b, &m.config, LossToggles::full());
    for t in bd.terms() {
        assert!((t - HALF_LOG_TWO_PI).abs() < 1e-12, "{t}");
    }
    assert!((tape.value(loss).data()[0] - 6.0 * HALF_LOG_TWO_PI).abs() < 1e-12);
}

#[test]
fn loss_total_is_the_sum_of_its_terms() {
    let m = scrambled(tiny_config(), 5);
    let batch = small_dataset().sample_windows(4, 4, &mut rng(2)).unwrap();
    let mut tape = Tape::new();
    let f = m.forward::<ChaCha8Rng>(&mut tape, &batch, None).unwrap();
    let (loss, bd) = traj_loss(&mut tape, &f, &batch, &m.config, LossToggles::full());
    let sum: f64 = bd.terms().iter().sum();
    assert_eq!(bd.total, sum);
    assert!((tape.value(loss).data()[0] - sum).abs() < 1e-12);
}

#[test]
fn action_only_loss_leaves_other_heads_without_gradient() {
    let m = scrambled(tiny_config(), 6);
    let batch = small_dataset().sample_windows(3, 4, &mut rng(3)).unwrap();
    let mut tape = Tape::new();
    let f = m.forward::<ChaCha8Rng>(&mut tape, &batch, None).unwrap();
    let (loss, _) = traj_loss(&mut tape, &f, &batch, &m.config, LossToggles::act_only());
    let g = tape.backward(loss).unwrap();
    for (name, _) in HEADS {
        let total: f64 = m
            .head_ids(name)
            .iter()
            .map(|&i| {
                g.get_or_zeros(f.param_vars[i], m.params.get(i).len())
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>()
            })
            .sum();
        if name == "act" {
            assert!(total > 0.0);
        } else {
            assert_eq!(total, 0.0, "head {name}");
        }
    }
}

/// Replaces every input of sequence `bi` at steps `>= from` with noise.
fn perturb_from(batch: &Batch, bi: usize, from: usize, r: &mut ChaCha8Rng) -> Batch {
    let mut b = batch.clone();
    let h = b.h;
    for t in from..h {
        let i = bi * h + t;
        let mut fill = |v: &mut Vec<f64>, dim: usize| {
            for x in &mut v[i * dim..(i + 1) * dim] {
                *x = r.random_range(-1.0..1.0);
            }
        };
        fill(&mut b.ego, 7);
        fill(&mut b.beam, 16);
        fill(&mut b.nav, 3);
        fill(&mut b.prev_action, 2);
        fill(&mut b.rtg, 1);
        fill(&mut b.ctg, 1);
    }
    b
}

#[test]
fn future_steps_never_change_past_outputs() {
    let cfg = ModelConfig {
        context_len: 6,
        ..tiny_config()
    };
    let m = scrambled(cfg, 7);
    let mut r = rng(7);
    for trial in 0..20 {
        let batch = small_dataset().sample_windows(2, 6, &mut r).unwrap();
        let from = 1 + trial % 5;
        let pert = perturb_from(&batch, 1, from, &mut r);
        let (a, b) = (eval_forward(&m, &batch), eval_forward(&m, &pert));
        let h = 6;
        let rows = |x: &Array, dim: usize, t_max: usize| -> f64 {
            (0..2 * h)
                .filter(|i| i % h < t_max)
                .flat_map(|i| (0..dim).map(move |k| i * dim + k))
                .map(|j| x.data()[j])
                .sum::<f64>()
        };
        let diff = |x: &(Array, Array), y: &(Array, Array), dim: usize, t_max: usize| {
            (rows(&x.0, dim, t_max) - rows(&y.0, dim, t_max)).abs()
                + (rows(&x.1, dim, t_max) - rows(&y.1, dim, t_max)).abs()
        };
        assert!(diff(&a.action, &b.action, 2, from) <= 1e-9);
        assert!(diff(&a.rtg, &b.rtg, 1, from) <= 1e-9);
        assert!(diff(&a.dyn_nav, &b.dyn_nav, 3, from - 1) <= 1e-9);
        // The perturbed step itself must matter.
        assert!(diff(&a.action, &b.action, 2, h) > 1e-9);
    }
}

#[test]
fn attention_rows_are_distributions_on_the_mask() {
    let m = scrambled(tiny_config(), 8);
    let mut batch = small_dataset().sample_windows(3, 4, &mut rng(4)).unwrap();
    batch.valid[0] = false;
    let out = eval_forward(&m, &batch);
    let t = 4 * TOKENS_PER_STEP;
    for att in &out.attention {
        for (r, row) in att.data().chunks(t).enumerate() {
            let seq = r / (2 * t);
            let mask = causal_mask(&batch.valid[seq * 4..seq * 4 + 4]);
            let q = r % t;
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..t {
                if !mask[q * t + j] {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }
    assert_eq!(token_index(3, 5), t - 1);
}

#[test]
fn step_order_matters() {
    let m = scrambled(tiny_config(), 9);
    let batch = small_dataset().sample_windows(1, 4, &mut rng(5)).unwrap();
    let mut swapped = batch.clone();
    for (v, dim) in [(&mut swapped.ego, 7usize), (&mut swapped.nav, 3)] {
        let (x, y) = v.split_at_mut(dim);
        x.swap_with_slice(&mut y[..dim]);
    }
    let (a, b) = (eval_forward(&m, &batch), eval_forward(&m, &swapped));
    assert_ne!(a.action.0.data()[6..8], b.action.0.data()[6..8]);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let m = scrambled(
        ModelConfig {
            embed_dim: 4,
            n_heads: 2,
            context_len: 2,
            mlp_ratio: 1,
            ..tiny_config()
        },
        10,
    );
    let batch = small_dataset().sample_windows(2, 2, &mut rng(6)).unwrap();
    let build = |tape: &mut Tape, vars: &[Var]| {
        let f = m
            .forward_with::<ChaCha8Rng>(tape, vars.to_vec(), &batch, None)
            .unwrap();
        traj_loss(tape, &f, &batch, &m.config, LossToggles::full()).0
    };
    let r = check_gradients(m.params.values(), 1e-5, build);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = scrambled(tiny_config(), 12);
    m.save(&dir.path().join("m")).unwrap();
    let back = FusionModel::load(&dir.path().join("m")).unwrap();
    assert_eq!(back, m);
    let mut other = tiny_config();
    other.embed_dim = 16;
    let wrong = FusionModel::new(other, 0).unwrap();
    wrong.save(&dir.path().join("w")).unwrap();
    let mut text = std::fs::read_to_string(dir.path().join("w.json")).unwrap();
    text = text.replace("\"embed_dim\": 16", "\"embed_dim\": 8");
    std::fs::write(dir.path().join("w.json"), text).unwrap();
    assert!(FusionModel::load(&dir.path().join("w")).is_err());
}
