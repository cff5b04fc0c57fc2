//! Gradient oracles for the tensor engine: finite differences in f64,
//! closed-form second derivatives, and tape lifecycle contracts.

use fewshot::optim::{adam_step, collect, sgd_step, AdamState};
use fewshot::tensor::{
    batch_norm, bce_with_logits, finite_diff_grad, no_grad, run_gradcheck_suite, softmax,
    softmax_cross_entropy, BnMode, Scalar, Tape, Tensor, TensorError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradcheck_suite_passes_across_seeds() {
    let seeds: Vec<u64> = (0..20).collect();
    let lines = run_gradcheck_suite(&seeds);
    assert!(!lines.is_empty());
    let failures: Vec<_> = lines.iter().filter(|l| !l.passed).collect();
    assert!(
        failures.is_empty(),
        "gradcheck failures: {:?}",
        failures
            .iter()
            .map(|l| format!("{}: {}", l.op, l.detail))
            .collect::<Vec<_>>()
    );
    for l in &lines {
        assert!(l.max_rel < 1e-4, "{} rel err {}", l.op, l.max_rel);
    }
}

fn second_grad(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, at: f64) -> f64 {
    let tape: Tape<f64> = Tape::new();
    let x = Tensor::scalar(at).releaf();
    let _s = tape.scope();
    let y = f(&x);
    let g = y.backward(true).unwrap().wrt(&x).unwrap();
    assert!(g.grad_enabled(), "create_graph gradient must be recorded");
    g.backward(false)
        .unwrap()
        .wrt(&x)
        .map(|t| t.item())
        .unwrap_or(0.0)
}

#[test]
fn second_derivatives_exact_on_polynomials() {
    // d2/dx2 x^3 = 6x
    let d2 = second_grad(|x| x.mul(x).unwrap().mul(x).unwrap(), 2.0);
    assert!((d2 - 12.0).abs() < 1e-9, "got {}", d2);

    // d2/dx2 (5x^4 - 2x^2 + 7) = 60x^2 - 4
    let d2 = second_grad(
        |x| {
            let x2 = x.mul(x).unwrap();
            let x4 = x2.mul(&x2).unwrap();
            x4.scale(5.0).sub(&x2.scale(2.0)).unwrap().add_scalar(7.0)
        },
        1.2,
    );
    assert!((d2 - (60.0 * 1.2 * 1.2 - 4.0)).abs() < 1e-9, "got {}", d2);

    // d2/dx2 exp(x) = exp(x)
    let d2 = second_grad(|x| x.exp(), 0.7);
    assert!((d2 - 0.7f64.exp()).abs() < 1e-12, "got {}", d2);
}

#[test]
fn cross_partial_through_double_backward() {
    // f(x, y) = x^2 y; d/dy (df/dx) = 2x
    let tape: Tape<f64> = Tape::new();
    let x = Tensor::scalar(1.7).releaf();
    let y = Tensor::scalar(-0.4).releaf();
    let _s = tape.scope();
    let f = x.mul(&x).unwrap().mul(&y).unwrap();
    let gx = f.backward(true).unwrap().wrt(&x).unwrap();
    let cross = gx.backward(false).unwrap().wrt(&y).unwrap().item();
    assert!((cross - 2.0 * 1.7).abs() < 1e-9, "got {}", cross);
}

#[test]
fn gradient_chains_through_inner_update() {
    // One tracked descent step on f(t) = t^2: t' = t - 0.1 * 2t = 0.8 t.
    // Outer loss L = t'^2 = 0.64 t^2, so dL/dt = 1.28 t.
    let tape: Tape<f64> = Tape::new();
    let theta = Tensor::scalar(1.0).releaf();
    let _s = tape.scope();
    let inner = theta.mul(&theta).unwrap();
    let g = inner.backward(true).unwrap().wrt(&theta).unwrap();
    let fast = theta.sub(&g.scale(0.1)).unwrap();
    assert!((fast.item() - 0.8).abs() < 1e-12);
    let outer = fast.mul(&fast).unwrap();
    let meta = outer.backward(false).unwrap().wrt(&theta).unwrap().item();
    assert!((meta - 1.28).abs() < 1e-12, "got {}", meta);
}

#[test]
fn second_order_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut rand_t = |shape: &[usize], lo: f64, hi: f64| {
        let n: usize = shape.iter().product();
        Tensor::<f64>::from_vec(
            (0..n).map(|_| rng.random_range(lo..hi)).collect(),
            shape,
        )
        .unwrap()
    };
    let w1 = rand_t(&[5, 3], -0.8, 0.8);
    let b1 = rand_t(&[5], -0.3, 0.3);
    let w2 = rand_t(&[2, 5], -0.8, 0.8);
    let v = rand_t(&[2, 3], -1.0, 1.0);
    let labels = vec![0usize, 1];

    let loss_of = |x: &Tensor<f64>| -> Tensor<f64> {
        let h = fewshot::tensor::linear(x, &w1, Some(&b1)).unwrap().relu();
        let logits = fewshot::tensor::linear(&h, &w2, None).unwrap();
        softmax_cross_entropy(&logits, &labels).unwrap()
    };

    // h(x) = <grad L(x), v>, via a throwaway tape per evaluation.
    let h_of = |x: &Tensor<f64>| -> Tensor<f64> {
        let tape: Tape<f64> = Tape::new();
        let xl = x.releaf();
        let _s = tape.scope();
        let loss = loss_of(&xl);
        let g = loss.backward(false).unwrap().wrt(&xl).unwrap();
        let dot: f64 = g
            .data()
            .iter()
            .zip(v.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Tensor::scalar(dot)
    };

    let at = rand_t(&[2, 3], -1.0, 1.0);

    // Analytic Hessian-vector product via double backward.
    let tape: Tape<f64> = Tape::new();
    let x = at.releaf();
    let hv = {
        let _s = tape.scope();
        let loss = loss_of(&x);
        let g = loss.backward(true).unwrap().wrt(&x).unwrap();
        let s = g.mul(&v).unwrap().sum_all();
        s.backward(false).unwrap().wrt(&x).unwrap()
    };

    let fd = finite_diff_grad(&h_of, &at, 1e-5);
    for (i, (&a, &n)) in hv.data().iter().zip(fd.data()).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        assert!(rel < 1e-3, "element {}: analytic {} fd {} rel {}", i, a, n, rel);
    }
}

#[test]
fn backward_requires_scalar() {
    let tape: Tape<f64> = Tape::new();
    let x = Tensor::<f64>::ones(&[2, 2]).releaf();
    let _s = tape.scope();
    let y = x.mul(&x).unwrap();
    match y.backward(false) {
        Err(TensorError::NotAScalar { shape }) => assert_eq!(shape, vec![2, 2]),
        other => panic!("expected NotAScalar, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn tape_consumed_without_create_graph() {
    let tape: Tape<f64> = Tape::new();
    let x = Tensor::scalar(2.0).releaf();
    let _s = tape.scope();
    let y = x.mul(&x).unwrap();
    let loss = y.mul(&y).unwrap();
    assert!(loss.backward(false).is_ok());
    match loss.backward(false) {
        Err(TensorError::TapeConsumed) => {}
        other => panic!("expected TapeConsumed, got {:?}", other.map(|_| ())),
    }
    // A new loss built on top of the consumed intermediate also fails...
    let loss2 = y.mul(&y).unwrap();
    match loss2.backward(false) {
        Err(TensorError::TapeConsumed) => {}
        other => panic!("expected TapeConsumed, got {:?}", other.map(|_| ())),
    }
    // ...but a fresh graph from the leaf is fine: leaves are not consumed.
    let z = x.mul(&x).unwrap();
    assert!(z.backward(false).is_ok());
}

#[test]
fn backward_twice_allowed_with_create_graph() {
    let tape: Tape<f64> = Tape::new();
    let x = Tensor::scalar(3.0).releaf();
    let _s = tape.scope();
    let y = x.mul(&x).unwrap();
    let g1 = y.backward(true).unwrap().wrt(&x).unwrap();
    let g2 = y.backward(true).unwrap().wrt(&x).unwrap();
    assert_eq!(g1.item(), 6.0);
    assert_eq!(g2.item(), 6.0);
}

#[test]
fn rewind_truncates_and_detaches() {
    let tape: Tape<f64> = Tape::new();
    let x = Tensor::scalar(2.0).releaf();
    let mark = tape.checkpoint();
    {
        let _s = tape.scope();
        let y = x.mul(&x).unwrap();
        let _ = y.backward(false).unwrap();
    }
    assert!(tape.len() > 0);
    tape.rewind(mark);
    assert_eq!(tape.len(), 0);
    // After a rewind the same leaf re-registers and trains again.
    {
        let _s = tape.scope();
        let y = x.mul(&x).unwrap();
        let g = y.backward(false).unwrap().wrt(&x).unwrap();
        assert_eq!(g.item(), 4.0);
    }
}

#[test]
fn backward_on_rewound_tensor_errors() {
    let tape: Tape<f64> = Tape::new();
    let x = Tensor::scalar(2.0).releaf();
    let mark = tape.checkpoint();
    let y = {
        let _s = tape.scope();
        x.mul(&x).unwrap()
    };
    tape.rewind(mark);
    match y.backward(false) {
        Err(TensorError::NoTape) => {}
        other => panic!("expected NoTape, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn untracked_tensors_allocate_no_nodes() {
    let tape: Tape<f64> = Tape::new();
    let a = Tensor::<f64>::ones(&[3]);
    let b = Tensor::<f64>::ones(&[3]);
    let _s = tape.scope();
    let _ = a.add(&b).unwrap();
    let _ = a.mul(&b).unwrap().sum_all();
    assert_eq!(tape.len(), 0);

    let _quiet = no_grad();
    let c = Tensor::<f64>::ones(&[3]).releaf();
    let _ = c.mul(&c).unwrap();
    assert_eq!(tape.len(), 0, "no_grad must suppress recording");
}

#[test]
fn forward_identical_with_and_without_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f32> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::<f32>::from_vec(data, &[4, 6]).unwrap();
    let w = Tensor::<f32>::from_vec(
        (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        &[2, 6],
    )
    .unwrap();
    let run = |tracked: bool| -> Vec<f32> {
        let xl = if tracked { x.releaf() } else { x.clone() };
        let wl = if tracked { w.releaf() } else { w.clone() };
        let tape: Tape<f32> = Tape::new();
        let _s = tracked.then(|| tape.scope());
        let logits = fewshot::tensor::linear(&xl, &wl, None).unwrap();
        softmax(&logits).data().to_vec()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn softmax_rows_sum_to_one_even_for_extreme_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(2..7);
        let m = rng.random_range(1..5);
        let data: Vec<f32> = (0..m * n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let p = softmax(&Tensor::<f32>::from_vec(data, &[m, n]).unwrap());
        for i in 0..m {
            let s: f32 = p.data()[i * n..(i + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {}", s);
            assert!(p.data()[i * n..(i + 1) * n].iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn cross_entropy_uniform_logits_is_ln_n() {
    for n in [2usize, 5, 10] {
        let logits = Tensor::<f64>::zeros(&[3, n]);
        let loss = softmax_cross_entropy(&logits, &[0, n - 1, n / 2]).unwrap();
        assert!((loss.item() - (n as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn bce_stable_for_extreme_logits() {
    let logits = Tensor::<f32>::from_vec(vec![50.0, -50.0, 50.0, -50.0], &[4]).unwrap();
    let targets = Tensor::<f32>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[4]).unwrap();
    let tape: Tape<f32> = Tape::new();
    let l = logits.releaf();
    let _s = tape.scope();
    let loss = bce_with_logits(&l, &targets).unwrap();
    assert!(loss.item().is_finite());
    // Matched-sign pairs contribute ~0, mismatched ~|z|; mean = (0+0+50+50)/4.
    assert!((loss.item() - 25.0).abs() < 1e-3, "loss {}", loss.item());
    let g = loss.backward(false).unwrap().wrt(&l).unwrap();
    assert!(g.all_finite());
}

#[test]
fn batch_norm_contracts() {
    let x = Tensor::<f32>::ones(&[1, 2, 2, 2]);
    let gamma = Tensor::<f32>::ones(&[2]);
    let beta = Tensor::<f32>::zeros(&[2]);
    match batch_norm(
        &x,
        &gamma,
        &beta,
        &[0.0, 0.0],
        &[1.0, 1.0],
        1e-5,
        0.1,
        BnMode::Train {
            update_running: true,
        },
    ) {
        Err(TensorError::BatchTooSmall { batch, .. }) => assert_eq!(batch, 1),
        other => panic!("expected BatchTooSmall, got {:?}", other.map(|_| ())),
    }

    // Eval mode is an affine map using running stats; stats never change.
    let x =
        Tensor::<f32>::from_vec((0..16).map(|i| i as f32 / 8.0).collect(), &[2, 2, 2, 2]).unwrap();
    let (y, upd) = batch_norm(
        &x,
        &gamma,
        &beta,
        &[0.5, 1.0],
        &[4.0, 1.0],
        0.0,
        0.1,
        BnMode::Eval,
    )
    .unwrap();
    assert!(upd.is_none());
    let expect = (x.data()[0] - 0.5) / 2.0;
    assert!((y.data()[0] - expect).abs() < 1e-6);

    // Train mode without update_running reports no new stats.
    let (_, upd) = batch_norm(
        &x,
        &gamma,
        &beta,
        &[0.0, 0.0],
        &[1.0, 1.0],
        1e-5,
        0.1,
        BnMode::Train {
            update_running: false,
        },
    )
    .unwrap();
    assert!(upd.is_none());
}

#[test]
fn op_contract_errors() {
    let a = Tensor::<f32>::ones(&[2, 3]);
    let b = Tensor::<f32>::ones(&[2, 3]);
    assert!(matches!(
        a.matmul(&b),
        Err(TensorError::ShapeMismatch { op: "matmul", .. })
    ));
    let x = Tensor::<f32>::ones(&[1, 1, 5, 5]);
    let w = Tensor::<f32>::ones(&[1, 1, 2, 2]);
    // (5 - 2) % 2 != 0 -> not integral
    assert!(fewshot::tensor::conv2d(&x, &w, None, 2, 0).is_err());
    let logits = Tensor::<f32>::zeros(&[2, 3]);
    assert!(matches!(
        softmax_cross_entropy(&logits, &[0, 3]),
        Err(TensorError::InvalidLabel {
            index: 3,
            n_classes: 3
        })
    ));
    let loose = Tensor::<f32>::scalar(1.0);
    assert!(matches!(loose.backward(false), Err(TensorError::NoTape)));
}

#[test]
fn sgd_step_matches_reference_and_skips_missing() {
    let tape: Tape<f64> = Tape::new();
    let p1 = Tensor::scalar(1.0).releaf();
    let p2 = Tensor::scalar(5.0).releaf();
    let _s = tape.scope();
    let loss = p1.mul(&p1).unwrap();
    let grads = loss.backward(false).unwrap();
    let gvec = collect(&[p1.clone(), p2.clone()], &grads);
    assert!(gvec[0].is_some() && gvec[1].is_none());
    let new = sgd_step(&[p1, p2], &gvec, 0.1);
    assert!((new[0].item() - 0.8).abs() < 1e-12);
    assert_eq!(new[1].item(), 5.0);
}

#[test]
fn adam_matches_scalar_reference_over_100_steps() {
    // Reference implementation in plain f64.
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let mut theta_ref = 1.0f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut traj = Vec::new();
    for t in 1..=100 {
        let g = 2.0 * theta_ref;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        theta_ref -= lr * mhat / (vhat.sqrt() + eps);
        traj.push(theta_ref);
    }
    assert!(theta_ref.abs() < 0.5);

    let tape: Tape<f64> = Tape::new();
    let mut params = vec![Tensor::scalar(1.0).releaf()];
    let mut state = AdamState::new(&params, lr);
    for step in 0..100 {
        let mark = tape.checkpoint();
        let loss = {
            let _s = tape.scope();
            params[0].mul(&params[0]).unwrap()
        };
        let grads = loss.backward(false).unwrap();
        let gvec = collect(&params, &grads);
        params = adam_step(&params, &gvec, &mut state);
        tape.rewind(mark);
        assert!(
            (params[0].item() - traj[step]).abs() < 1e-12,
            "step {}: {} vs {}",
            step,
            params[0].item(),
            traj[step]
        );
    }
    assert_eq!(state.step_count, 100);
}

#[test]
fn finite_diff_helper_sane() {
    let at = Tensor::<f64>::from_vec(vec![0.3, -0.7], &[2]).unwrap();
    let g = finite_diff_grad(&|x| x.mul(x).unwrap().sum_all(), &at, 1e-6);
    assert!((g.data()[0] - 0.6).abs() < 1e-8);
    assert!((g.data()[1] + 1.4).abs() < 1e-8);
}
