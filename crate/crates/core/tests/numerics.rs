use proptest::prelude::*;
use tsfm_peft::numerics::{
    finite_difference, max_relative_error, AttentionShape, ParamStore, Rng, Tape, Tensor, Var,
};
use tsfm_peft::Error;

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal()).with_grad(true)
}

/// Checks the tape gradient of `sum(op(inputs) ⊙ R)` against central
/// differences for every input, returning the worst relative error.
fn grad_check(inputs: &[Tensor<f64>], op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut rng = Rng::new(1234);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = op(&mut tape, &vars);
        tape.value(out).len()
    };
    let weights: Vec<f64> = (0..probe).map(|_| rng.normal()).collect();
    let loss_of = |tensors: &[Tensor<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = op(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let w = tape.constant(&shape, weights.clone()).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        (tape, vars, loss)
    };

    let (tape, vars, loss) = loss_of(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).expect("input requires grad").to_vec();
        let numeric = finite_difference(input.data(), H, |x| {
            let mut perturbed = inputs.to_vec();
            perturbed[i] = Tensor::new(input.shape(), x.to_vec()).unwrap().with_grad(true);
            let (t, _, l) = loss_of(&perturbed);
            t.value(l)[0]
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-6));
    }
    worst
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = tape.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let y = tape.matmul(eye, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = tape.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    // sum(A·B) specifically
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.matmul(va, vb).unwrap();
    let loss = tape.sum(c);
    let grads = tape.backward(loss).unwrap();
    let numeric = finite_difference(a.data(), H, |x| {
        let p = Tensor::new(&[3, 4], x.to_vec()).unwrap();
        let mut t = Tape::new();
        let (pa, pb) = (t.leaf(&p), t.leaf(&b));
        let c = t.matmul(pa, pb).unwrap();
        let l = t.sum(c);
        t.value(l)[0]
    });
    assert!(max_relative_error(grads.wrt(va).unwrap(), &numeric, 1e-6) < 1e-6);
    assert!(grad_check(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap()) < 1e-6);
}

#[test]
fn elementwise_identities() {
    let mut rng = Rng::new(3);
    let x = random(&[3, 3], &mut rng);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let zero = tape.add_scalar(v, 0.0);
    assert_eq!(tape.value(zero), x.data());
    let one = tape.scale(v, 1.0);
    assert_eq!(tape.value(one), x.data());
}

#[test]
fn elementwise_shape_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
    let b = tape.constant(&[4], vec![0.0; 4]).unwrap();
    assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(tape.mul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn exp_gradient_is_exp() {
    let mut rng = Rng::new(5);
    let x = random(&[2, 5], &mut rng);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let e = tape.exp(v);
    let loss = tape.sum(e);
    let grads = tape.backward(loss).unwrap();
    for (g, &xi) in grads.wrt(v).unwrap().iter().zip(x.data()) {
        assert!((g - xi.exp()).abs() < 1e-9);
    }
}

#[test]
fn every_elementwise_op_passes_gradient_check() {
    let mut rng = Rng::new(11);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let pos = Tensor::from_fn(&[3, 4], |_| 0.5 + rng.uniform()).with_grad(true);
    let row = random(&[4], &mut rng);
    let checks: Vec<(&str, f64)> = vec![
        ("add", grad_check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", grad_check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", grad_check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", grad_check(std::slice::from_ref(&a), |t, v| t.scale(v[0], -2.5))),
        ("add_scalar", grad_check(std::slice::from_ref(&a), |t, v| t.add_scalar(v[0], 3.0))),
        ("exp", grad_check(std::slice::from_ref(&a), |t, v| t.exp(v[0]))),
        ("log", grad_check(std::slice::from_ref(&pos), |t, v| t.log(v[0]))),
        ("relu", grad_check(std::slice::from_ref(&a), |t, v| t.relu(v[0]))),
        ("transpose", grad_check(std::slice::from_ref(&a), |t, v| t.transpose(v[0]))),
        ("mean", grad_check(std::slice::from_ref(&a), |t, v| t.mean(v[0]))),
        (
            "add_bias",
            grad_check(&[a.clone(), row.clone()], |t, v| t.add_bias(v[0], v[1]).unwrap()),
        ),
        (
            "mul_cols",
            grad_check(&[a.clone(), row.clone()], |t, v| t.mul_cols(v[0], v[1]).unwrap()),
        ),
        (
            "matmul_nt",
            grad_check(&[a.clone(), b.clone()], |t, v| t.matmul_nt(v[0], v[1]).unwrap()),
        ),
        (
            "gather_rows",
            grad_check(std::slice::from_ref(&a), |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap()),
        ),
    ];
    for (name, err) in checks {
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn layer_norm_gradient_check() {
    let mut rng = Rng::new(21);
    let x = random(&[5, 6], &mut rng);
    let g = random(&[6], &mut rng);
    let b = random(&[6], &mut rng);
    let err = grad_check(&[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
    assert!(err < 1e-4, "layer norm relative error {err}");
}

#[test]
fn attention_gradient_check() {
    let mut rng = Rng::new(31);
    for causal in [false, true] {
        let (batch, heads, q_len, kv_len) = (2, 2, 3, if causal { 3 } else { 4 });
        let q = random(&[batch * q_len, 4], &mut rng);
        let k = random(&[batch * kv_len, 4], &mut rng);
        let v = random(&[batch * kv_len, 4], &mut rng);
        let shape = AttentionShape {
            batch,
            heads,
            q_len,
            kv_len,
            causal,
        };
        let err = grad_check(&[q, k, v], |t, x| t.attention(x[0], x[1], x[2], shape).unwrap());
        assert!(err < 1e-4, "attention (causal={causal}) relative error {err}");
    }
}

#[test]
fn cross_entropy_values_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(&[3, 7], vec![0.25; 21]).unwrap();
    let l = tape.softmax_cross_entropy(uniform, &[0, 3, 6]).unwrap();
    assert!((tape.value(l)[0] - 7f64.ln()).abs() < 1e-12);

    let mut logits = vec![0.0; 2 * 5];
    logits[2] = 1e6;
    logits[5 + 4] = 1e6;
    let peaked = tape.constant(&[2, 5], logits).unwrap();
    let l = tape.softmax_cross_entropy(peaked, &[2, 4]).unwrap();
    assert!(tape.value(l)[0].abs() < 1e-12);

    let mut rng = Rng::new(41);
    let x = random(&[4, 7], &mut rng);
    let targets = [1usize, 6, 0, 3];
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let loss = tape.softmax_cross_entropy(v, &targets).unwrap();
    let grads = tape.backward(loss).unwrap();
    let numeric = finite_difference(x.data(), H, |d| {
        let p = Tensor::new(&[4, 7], d.to_vec()).unwrap();
        let mut t = Tape::new();
        let pv = t.leaf(&p);
        let l = t.softmax_cross_entropy(pv, &targets).unwrap();
        t.value(l)[0]
    });
    assert!(max_relative_error(grads.wrt(v).unwrap(), &numeric, 1e-6) < 1e-5);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(&[1, 3], vec![0.0; 3]).unwrap();
    assert!(matches!(
        tape.softmax_cross_entropy(l, &[3]),
        Err(Error::Index { index: 3, limit: 3, .. })
    ));
}

#[test]
fn backward_of_simple_sums() {
    let mut rng = Rng::new(2);
    let w = random(&[3, 2], &mut rng);
    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let s = tape.sum(v);
    let grads = tape.backward(s).unwrap();
    assert!(grads.wrt(v).unwrap().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let grads = tape.backward(s).unwrap();
    for (g, x) in grads.wrt(v).unwrap().iter().zip(w.data()) {
        assert_eq!(*g, 2.0 * x);
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(&Tensor::zeros(&[2]).with_grad(true));
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn two_layer_mlp_gradient_check() {
    let mut rng = Rng::new(17);
    let x = Tensor::from_fn(&[5, 4], |_| rng.normal());
    let w1 = random(&[6, 4], &mut rng);
    let b1 = random(&[6], &mut rng);
    let w2 = random(&[3, 6], &mut rng);
    let b2 = random(&[3], &mut rng);
    let targets = [0usize, 2, 1, 1, 0];
    let forward = |t: &mut Tape<f64>, v: &[Var]| {
        let xv = t.leaf(&x);
        let h = t.matmul_nt(xv, v[0]).unwrap();
        let h = t.add_bias(h, v[1]).unwrap();
        let h = t.relu(h);
        let o = t.matmul_nt(h, v[2]).unwrap();
        let o = t.add_bias(o, v[3]).unwrap();
        t.softmax_cross_entropy(o, &targets).unwrap()
    };
    let err = grad_check(&[w1, b1, w2, b2], forward);
    assert!(err < 1e-4, "mlp relative error {err}");
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut store = ParamStore::<f64>::new(0);
    let frozen = store.insert("frozen", Tensor::filled(&[2, 2], 1.0)).unwrap();
    let live = store
        .insert("live", Tensor::filled(&[2, 2], 2.0).with_grad(true))
        .unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, frozen);
    let b = tape.param(&store, live);
    let c = tape.matmul(a, b).unwrap();
    let loss = tape.sum(c);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.wrt(a).is_none());
    grads.apply(&mut [&mut store]);
    assert!(store.get(frozen).grad().is_none());
    assert!(store.get(live).grad().is_some());
}

#[test]
fn repeated_backward_accumulates() {
    let mut store = ParamStore::<f64>::new(3);
    let w = store
        .insert("w", Tensor::filled(&[3], 1.5).with_grad(true))
        .unwrap();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap().apply(&mut [&mut store]);
    }
    assert_eq!(store.get(w).grad().unwrap(), &[6.0, 6.0, 6.0]);
}

#[test]
fn f32_tape_runs() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(&Tensor::from_fn(&[2, 2], |i| i as f32).with_grad(true));
    let b = tape.matmul(a, a).unwrap();
    let l = tape.sum(b);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(a).unwrap().len(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn matmul_gradient_any_shape(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let err = grad_check(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap());
        prop_assert!(err < 1e-4);
    }
}
