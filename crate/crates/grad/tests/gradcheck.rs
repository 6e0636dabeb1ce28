use fusion_grad::gradcheck::check_gradients;
use fusion_grad::{Array, Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

fn causal_mask(groups: usize, t: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(groups * t * t);
    for _ in 0..groups {
        for i in 0..t {
            for j in 0..t {
                m.push(j <= i);
            }
        }
    }
    m
}

/// Single-head self-attention over `x[t, d]` with the given projections.
fn attend(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Option<Var>, t: usize) -> Var {
    let d = tape.shape(x)[1];
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = match wv {
        Some(w) => tape.matmul(x, w),
        None => x,
    };
    let q = tape.reshape(q, &[1, t, d]);
    let k = tape.reshape(k, &[1, t, d]);
    let v = tape.reshape(v, &[1, t, d]);
    let s = tape.bmm(q, k, true);
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let p = tape.masked_softmax(s, &causal_mask(1, t)).unwrap();
    let o = tape.bmm(p, v, false);
    tape.reshape(o, &[t, d])
}

#[test]
fn two_layer_attention_block_with_twenty_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t, d) = (4, 2);
    let x = rand_array(&mut rng, &[t, d], 1.0);
    let params: Vec<Array> = (0..5).map(|_| rand_array(&mut rng, &[d, d], 1.0)).collect();
    assert_eq!(params.iter().map(Array::len).sum::<usize>(), 20);
    let r = check_gradients(&params, H, |tape, p| {
        let xv = tape.constant(x.clone());
        let h1 = attend(tape, xv, p[0], p[1], Some(p[2]), t);
        let h1 = tape.add(h1, xv);
        let h2 = attend(tape, h1, p[3], p[4], None, t);
        let sq = tape.square(h2);
        tape.sum(sq)
    });
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn multi_head_permute_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, t, heads, dh) = (2, 3, 2, 2);
    let d = heads * dh;
    let x = rand_array(&mut rng, &[b, t, d], 1.0);
    let params = vec![
        rand_array(&mut rng, &[d, 3 * d], 0.7),
        rand_array(&mut rng, &[d, d], 0.7),
        rand_array(&mut rng, &[d], 1.0),
        rand_array(&mut rng, &[d], 1.0),
    ];
    let r = check_gradients(&params, H, |tape, p| {
        let xv = tape.constant(x.clone());
        let ln = tape.layer_norm(xv, p[2], p[3]);
        let qkv = tape.matmul(ln, p[0]);
        let qkv = tape.reshape(qkv, &[b, t, 3, heads, dh]);
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4]);
        let flat = tape.reshape(qkv, &[3 * b * heads * t, dh]);
        let n = b * heads * t;
        let q = tape.gather_rows(flat, (0..n).collect());
        let k = tape.gather_rows(flat, (n..2 * n).collect());
        let v = tape.gather_rows(flat, (2 * n..3 * n).collect());
        let q = tape.reshape(q, &[b * heads, t, dh]);
        let k = tape.reshape(k, &[b * heads, t, dh]);
        let v = tape.reshape(v, &[b * heads, t, dh]);
        let s = tape.bmm(q, k, true);
        let p_att = tape.masked_softmax(s, &causal_mask(b * heads, t)).unwrap();
        let o = tape.bmm(p_att, v, false);
        let o = tape.reshape(o, &[b, heads, t, dh]);
        let o = tape.permute(o, &[0, 2, 1, 3]);
        let o = tape.reshape(o, &[b, t, d]);
        let y = tape.matmul(o, p[1]);
        let y = tape.gelu(y);
        tape.mean(y)
    });
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn nll_concat_and_broadcast_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = vec![
        rand_array(&mut rng, &[4, 2], 1.0),
        rand_array(&mut rng, &[4, 1], 1.0),
        rand_array(&mut rng, &[3], 0.5),
        rand_array(&mut rng, &[2, 3], 1.0),
    ];
    let weights = vec![1.0, 0.0, 2.0, 0.5];
    let r = check_gradients(&params, H, |tape, p| {
        let c = tape.concat_last(&[p[0], p[1]]);
        let mu = tape.add_broadcast(c, p[2]);
        let ls = tape.matmul(p[0], p[3]);
        let ls = tape.tanh(ls);
        tape.gaussian_nll(mu, ls, target.clone(), weights.clone())
    });
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn l1_residual_path_with_stop_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s1 = rand_array(&mut rng, &[5, 3], 1.0);
    let s2 = rand_array(&mut rng, &[5, 3], 1.0);
    let target = rand_array(&mut rng, &[5], 1.0);
    let params = vec![
        rand_array(&mut rng, &[3, 4], 1.0),
        rand_array(&mut rng, &[4], 0.3),
    ];
    fn enc(tape: &mut Tape, p: &[Var], s: &Array) -> Var {
        let x = tape.constant(s.clone());
        let h = tape.matmul(x, p[0]);
        let h = tape.add_broadcast(h, p[1]);
        tape.tanh(h)
    }
    // The detached branch is a constant for the oracle: evaluate it once at the
    // unperturbed parameters.
    let z2_fixed = {
        let mut t = Tape::new();
        let v: Vec<Var> = params.iter().map(|a| t.param(a.clone())).collect();
        let z = enc(&mut t, &v, &s2);
        t.value(z).clone()
    };
    let loss = |tape: &mut Tape, z1: Var, z2: Var| {
        let diff = tape.sub(z1, z2);
        let dist = tape.abs(diff);
        let dist = tape.sum_last(dist);
        let tv = tape.constant(target.clone());
        let res = tape.sub(dist, tv);
        let sq = tape.square(res);
        tape.mean(sq)
    };
    let r = check_gradients(&params, H, |tape, p| {
        let z1 = enc(tape, p, &s1);
        let z2 = tape.constant(z2_fixed.clone());
        loss(tape, z1, z2)
    });
    assert!(r.max_rel_error < TOL, "{r:?}");

    // The same graph built with detach gives identical gradients.
    let grads = |use_detach: bool| {
        let mut t = Tape::new();
        let v: Vec<Var> = params.iter().map(|a| t.param(a.clone())).collect();
        let z1 = enc(&mut t, &v, &s1);
        let z2 = if use_detach {
            let z = enc(&mut t, &v, &s2);
            t.detach(z)
        } else {
            t.constant(z2_fixed.clone())
        };
        let l = loss(&mut t, z1, z2);
        let g = t.backward(l).unwrap();
        v.iter()
            .flat_map(|x| g.get(*x).unwrap().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(grads(true), grads(false));
}

#[test]
fn relu_mul_const_and_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask: Vec<f64> = (0..6)
        .map(|i| if i % 3 == 0 { 0.0 } else { 1.25 })
        .collect();
    let params = vec![
        rand_array(&mut rng, &[2, 3], 1.0),
        rand_array(&mut rng, &[2, 3], 1.0),
    ];
    let r = check_gradients(&params, H, |tape, p| {
        let a = tape.mul(p[0], p[1]);
        let b = tape.sub(a, p[1]);
        let c = tape.relu(b);
        let c = tape.add(c, p[0]);
        let d = tape.mul_const(c, mask.clone());
        let e = tape.scale(d, -0.7);
        let f = tape.tanh(e);
        tape.sum(f)
    });
    assert!(r.max_rel_error < TOL, "{r:?}");
}

fn composite(tape: &mut Tape, p: &[Var], x: &Array) -> Var {
    let xv = tape.constant(x.clone());
    let h = tape.matmul(xv, p[0]);
    let h = tape.add_broadcast(h, p[1]);
    let h = tape.layer_norm(h, p[2], p[3]);
    let h = tape.gelu(h);
    let h3 = tape.reshape(h, &[1, 3, 4]);
    let s = tape.bmm(h3, h3, true);
    let a = tape.masked_softmax(s, &causal_mask(1, 3)).unwrap();
    let o = tape.bmm(a, h3, false);
    let sq = tape.square(o);
    tape.mean(sq)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_composites_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[3, 2], 1.0);
        let params = vec![
            rand_array(&mut rng, &[2, 4], 1.0),
            rand_array(&mut rng, &[4], 0.5),
            rand_array(&mut rng, &[4], 1.5),
            rand_array(&mut rng, &[4], 0.5),
        ];
        let r = check_gradients(&params, H, |tape, p| composite(tape, p, &x));
        prop_assert!(r.max_rel_error < TOL, "{:?}", r);
    }

    #[test]
    fn forward_is_bitwise_deterministic(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[3, 2], 1.0);
        let params: Vec<Array> = vec![
            rand_array(&mut rng, &[2, 4], 1.0),
            rand_array(&mut rng, &[4], 0.5),
            rand_array(&mut rng, &[4], 1.5),
            rand_array(&mut rng, &[4], 0.5),
        ];
        let run = || {
            let mut t = Tape::new();
            let v: Vec<Var> = params.iter().map(|a| t.param(a.clone())).collect();
            let out = composite(&mut t, &v, &x);
            let g = t.backward(out).unwrap();
            let mut bits = vec![t.value(out).data()[0].to_bits()];
            for var in &v {
                bits.extend(g.get(*var).unwrap().iter().map(|f| f.to_bits()));
            }
            bits
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn softmax_rows_are_probability_vectors(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        mask_bits in prop::collection::vec(any::<bool>(), 12),
    ) {
        let n = logits.len();
        let mut mask = mask_bits[..n].to_vec();
        mask[0] = true;
        let p = fusion_grad::masked_softmax(&logits, &mask).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for (v, m) in p.iter().zip(&mask) {
            prop_assert!(*v >= 0.0);
            if !m { prop_assert_eq!(*v, 0.0); }
        }
    }
}
