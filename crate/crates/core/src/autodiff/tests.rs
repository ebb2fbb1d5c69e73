use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type OpFn = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if away_from_zero {
                let m = rng.random_range(0.1..1.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects `f`'s output onto fixed random weights and returns the scalar.
fn scalar_loss(f: &OpFn, inputs: &[Tensor], weights: &Tensor, track: bool) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = f(&mut g, &vars).unwrap();
    let w = g.constant(weights.clone());
    let p = g.mul(out, w).unwrap();
    let loss = g.sum(p);
    (g, vars, loss)
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-10)
}

/// Central finite-difference check of every input of `f`.
fn check_gradients(seed: u64, shapes: &[&[usize]], away_from_zero: bool, f: &OpFn) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| random_tensor(&mut rng, s, away_from_zero))
        .collect();
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let weights = random_tensor(&mut rng, &probe, false);

    let (mut g, vars, loss) = scalar_loss(f, &inputs, &weights, true);
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or(vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let (gp, _, lp) = scalar_loss(f, &plus, &weights, false);
            let (gm, _, lm) = scalar_loss(f, &minus, &weights, false);
            *slot = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * H);
        }
        assert!(analytic.iter().all(|x| x.is_finite()));
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn check_op(name: &str, shapes: &[&[usize]], away_from_zero: bool, f: &OpFn) {
    for seed in 0..100 {
        let err = check_gradients(seed, shapes, away_from_zero, f);
        assert!(err < TOL, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let id = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
    let m = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    let out = g.matmul(id, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let proj = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
    let m2 = g.constant(Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap());
    let out = g.matmul(proj, m2).unwrap();
    assert_eq!(g.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_3x4_by_4x2_tight() {
    // Sum of the output, tolerance 1e-6.
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[3, 4], false);
        let b = random_tensor(&mut rng, &[4, 2], false);
        let mut g = Graph::new();
        let va = g.param(a.clone());
        let vb = g.param(b.clone());
        let c = g.matmul(va, vb).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        let eval = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let va = g.constant(a.clone());
            let vb = g.constant(b.clone());
            let c = g.matmul(va, vb).unwrap();
            let s = g.sum(c);
            g.value(s).item()
        };
        let mut numeric = vec![0.0; 12];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut p = a.clone();
            p.data_mut()[j] += H;
            let mut m = a.clone();
            m.data_mut()[j] -= H;
            *slot = (eval(&p, &b) - eval(&m, &b)) / (2.0 * H);
        }
        assert!(rel_err(g.grad(va).unwrap(), &numeric) < 1e-6);
    }
}

#[test]
fn gradients_match_finite_differences() {
    check_op("matmul", &[&[3, 4], &[4, 2]], false, &|g, v| g.matmul(v[0], v[1]));
    check_op("matmul_nt", &[&[3, 4], &[5, 4]], false, &|g, v| g.matmul_nt(v[0], v[1]));
    check_op("add", &[&[2, 3], &[2, 3]], false, &|g, v| g.add(v[0], v[1]));
    check_op("mul", &[&[2, 3], &[2, 3]], false, &|g, v| g.mul(v[0], v[1]));
    check_op("add_row", &[&[3, 4], &[4]], false, &|g, v| g.add_row(v[0], v[1]));
    check_op("scale", &[&[2, 3]], false, &|g, v| Ok(g.scale(v[0], -1.7)));
    check_op("relu", &[&[3, 3]], true, &|g, v| Ok(g.relu(v[0])));
    check_op("gelu", &[&[3, 3]], false, &|g, v| Ok(g.gelu(v[0])));
    check_op("embedding", &[&[5, 3]], false, &|g, v| g.embedding(v[0], &[4, 0, 4, 2]));
    check_op("concat_rows", &[&[2, 3], &[1, 3]], false, &|g, v| {
        g.concat_rows(&[v[0], v[1]])
    });
    check_op("concat_cols", &[&[2, 3], &[2, 1]], false, &|g, v| {
        g.concat_cols(&[v[1], v[0]])
    });
    check_op("slice_cols", &[&[3, 5]], false, &|g, v| g.slice_cols(v[0], 1, 3));
    check_op("slice_rows", &[&[4, 3]], false, &|g, v| g.slice_rows(v[0], 1, 2));
    check_op("mean_rows", &[&[4, 3]], false, &|g, v| Ok(g.mean_rows(v[0])));
    check_op("sum", &[&[2, 2]], false, &|g, v| Ok(g.sum(v[0])));
    check_op("dropout", &[&[4, 4]], false, &|g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        g.dropout(v[0], 0.3, &mut rng)
    });
    check_op("layer_norm", &[&[3, 5], &[5], &[5]], false, &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    let mask = [true, false, true, true, true, false];
    check_op("softmax", &[&[2, 3]], false, &move |g, v| g.softmax(v[0], Some(&mask)));
    let causal = [true, false, false, true, true, false, true, true, true];
    check_op("attention", &[&[3, 4], &[3, 4], &[3, 4]], false, &move |g, v| {
        g.attention(v[0], v[1], v[2], Some(&causal))
    });
    check_op("cross_entropy", &[&[4, 6]], false, &|g, v| {
        g.cross_entropy(v[0], &[2, 0, 5, 1], 0.1, 0)
    });
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::filled(vec![3], 1.0));
    let bias = g.constant(Tensor::zeros(vec![3]));
    let x = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap());
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let gain = g.constant(Tensor::filled(vec![2], 1.0));
    let bias = g.constant(Tensor::zeros(vec![2]));
    let x = g.constant(Tensor::vector(vec![1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let out = g.value(y).data();
    assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let confident = g.constant(Tensor::from_rows(&[[1000.0, 0.0, 0.0]]).unwrap());
    let loss = g.cross_entropy(confident, &[0], 0.0, usize::MAX).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);

    let uniform = g.constant(Tensor::zeros(vec![1, 8]));
    let loss = g.cross_entropy(uniform, &[3], 0.0, usize::MAX).unwrap();
    assert!((g.value(loss).item() - 8f64.ln()).abs() < 1e-12);
    assert!((g.value(loss).item() - 2.0794).abs() < 1e-4);

    // Hand evaluation: lse = ln(e^2 + 3); loss = -(0.9 (2 - lse) + 3 (0.1/3)(-lse)) = lse - 1.8
    let logits = g.constant(Tensor::from_rows(&[[2.0, 0.0, 0.0, 0.0]]).unwrap());
    let loss = g.cross_entropy(logits, &[0], 0.1, usize::MAX).unwrap();
    let expected = (2f64.exp() + 3.0).ln() - 1.8;
    assert!((g.value(loss).item() - expected).abs() < 1e-12);
    assert!((g.value(loss).item() - 0.540_752_5).abs() < 1e-6);
}

#[test]
fn cross_entropy_ignores_positions_and_rejects_all_ignored() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::from_rows(&[[0.0, 0.0], [5.0, -5.0]]).unwrap());
    let partial = g.cross_entropy(logits, &[0, 1], 0.0, 0).unwrap();
    // Row 0 ignored: loss equals the row-1 loss alone.
    let lone = g.constant(Tensor::from_rows(&[[5.0, -5.0]]).unwrap());
    let only = g.cross_entropy(lone, &[1], 0.0, 0).unwrap();
    assert_eq!(g.value(partial).item(), g.value(only).item());
    let err = g.cross_entropy(logits, &[0, 0], 0.0, 0).unwrap_err();
    assert!(matches!(err, Error::UndefinedMean));
}

#[test]
fn smoothed_loss_is_bounded_by_target_entropy() {
    let smoothing = 0.1;
    let vocab = 5;
    let off = smoothing / (vocab - 1) as f64;
    let entropy = -((1.0 - smoothing) * (1.0 - smoothing).ln() + (vocab - 1) as f64 * off * off.ln());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let t = random_tensor(&mut rng, &[1, vocab], false);
        let mut g = Graph::new();
        let l = g.constant(t);
        let loss = g.cross_entropy(l, &[2], smoothing, usize::MAX).unwrap();
        assert!(g.value(loss).item() >= entropy - 1e-12);
    }
    // Logits equal to log q reach the bound.
    let q: Vec<f64> = (0..vocab)
        .map(|j| if j == 2 { 1.0 - smoothing } else { off }.ln())
        .collect();
    let mut g = Graph::new();
    let l = g.constant(Tensor::matrix(1, vocab, q).unwrap());
    let loss = g.cross_entropy(l, &[2], smoothing, usize::MAX).unwrap();
    assert!((g.value(loss).item() - entropy).abs() < 1e-12);
}

#[test]
fn attention_examples() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::from_rows(&[[0.3, -1.0], [2.0, 0.5]]).unwrap());
    let k = g.constant(Tensor::from_rows(&[[1.0, 1.0]]).unwrap());
    let v = g.constant(Tensor::from_rows(&[[4.0, -2.0]]).unwrap());
    let out = g.attention(q, k, v, None).unwrap();
    assert_eq!(g.value(out).data(), &[4.0, -2.0, 4.0, -2.0]);

    // Orthogonal keys, query aligned with key 1 and a huge scale.
    let q = g.constant(Tensor::from_rows(&[[0.0, 1e4, 0.0]]).unwrap());
    let k = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap());
    let v = g.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]).unwrap());
    let out = g.attention(q, k, v, None).unwrap();
    assert_eq!(g.value(out).data(), &[4.0, 5.0, 6.0]);
}

#[test]
fn fully_masked_row_is_rejected() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(vec![2, 2]));
    let k = g.constant(Tensor::zeros(vec![2, 2]));
    let v = g.constant(Tensor::zeros(vec![2, 2]));
    let err = g.attention(q, k, v, Some(&[true, true, false, false])).unwrap_err();
    assert!(matches!(err, Error::Masking { row: 1 }));
}

#[test]
fn forward_backward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[4, 6], false);
        let w = random_tensor(&mut rng, &[6, 3], false);
        let mut g = Graph::new();
        let vx = g.param(x);
        let vw = g.param(w);
        let h = g.matmul(vx, vw).unwrap();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(5);
        let h = g.dropout(h, 0.25, &mut drop_rng).unwrap();
        let h = g.gelu(h);
        let loss = g.cross_entropy(h, &[0, 1, 2, 1], 0.1, usize::MAX).unwrap();
        g.backward(loss).unwrap();
        (g.value(loss).item(), g.grad(vw).unwrap().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn backward_rejects_non_scalar_outputs() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(vec![2, 2]));
    assert!(g.backward(x).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn backward_stays_finite(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::new();
            let x = g.param(Tensor::matrix(3, 4, values).unwrap());
            let gain = g.param(Tensor::filled(vec![4], 1.0));
            let bias = g.param(Tensor::zeros(vec![4]));
            let n = g.layer_norm(x, gain, bias, 1e-5).unwrap();
            let a = g.attention(n, n, n, None).unwrap();
            let loss = g.cross_entropy(a, &[0, 3, 1], 0.1, usize::MAX).unwrap();
            g.backward(loss).unwrap();
            prop_assert!(g.value(loss).item().is_finite());
            prop_assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
        }
    }
}
