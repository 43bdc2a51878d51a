use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(i, p) * b.get(p, j);
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Norm-wise relative error between analytic and central-difference
/// gradients of `f` with respect to each input.
fn fd_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]);
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-7));
    }
    worst
}

/// Weighted sum so every output element has a distinct gradient.
fn weighted_sum(g: &mut Graph<'_>, x: Var) -> Var {
    let t = g.value(x);
    let w: Vec<f64> = (0..t.numel()).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let y = g.mul_const(x, w).unwrap();
    g.sum(y)
}

#[test]
fn matmul_identity_and_zero() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let b = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let y = g.matmul(i2, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let z = g.constant(Tensor::matrix(1, 1, vec![0.0]));
    let five = g.constant(Tensor::matrix(1, 1, vec![5.0]));
    let y = g.matmul(z, five).unwrap();
    assert_eq!(g.value(y).data(), &[0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, 4, 3);
        let b = rand_tensor(&mut rng, 3, 2);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb).unwrap();
        assert!(g.value(y).max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }
}

#[test]
fn matmul_associativity_5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (a, b, c) = (
            rand_tensor(&mut rng, 5, 5),
            rand_tensor(&mut rng, 5, 5),
            rand_tensor(&mut rng, 5, 5),
        );
        let mut g = Graph::new();
        let (va, vb, vc) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(c.clone()));
        let ab = g.matmul(va, vb).unwrap();
        let ab_c = g.matmul(ab, vc).unwrap();
        let bc = g.matmul(vb, vc).unwrap();
        let a_bc = g.matmul(va, bc).unwrap();
        let oracle = triple_loop(&triple_loop(&a, &b), &c);
        assert!(g.value(ab_c).max_abs_diff(&oracle) < 1e-10);
        assert!(g.value(a_bc).max_abs_diff(&oracle) < 1e-10);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_with_empty_inner_dimension_is_zero() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[3, 0]));
    let b = g.constant(Tensor::zeros(&[0, 2]));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).shape(), &[3, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 1, vec![4.2]));
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0]);

    let x = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]));
    let y = g.softmax_rows(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]));
    let y = g.softmax_rows(x).unwrap();
    let out = g.value(y).data();
    assert!((out[0] - 0.25).abs() < 1e-15);
    assert!((out[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 2, vec![0.0, f64::NAN]));
    assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 2, vec![1000.0, 1000.0 + 3f64.ln()]));
    let y = g.softmax_rows(x).unwrap();
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, n, row.clone()));
        let xs = g.constant(Tensor::matrix(1, n, row.iter().map(|v| v + shift).collect()));
        let y = g.softmax_rows(x).unwrap();
        let ys = g.softmax_rows(xs).unwrap();
        let sum: f64 = g.value(y).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
        prop_assert!(g.value(y).max_abs_diff(g.value(ys)) < 1e-9);
    }

    #[test]
    fn layer_norm_scale_shift_invariance(
        row in prop::collection::vec(-5.0f64..5.0, 2..10),
        a in 0.1f64..10.0,
        c in -10.0f64..10.0,
    ) {
        let n = row.len();
        let spread = row.iter().cloned().fold(f64::MIN, f64::max)
            - row.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-2);
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[n], 1.0));
        let bias = g.constant(Tensor::zeros(&[n]));
        let x = g.constant(Tensor::matrix(1, n, row.clone()));
        let xt = g.constant(Tensor::matrix(1, n, row.iter().map(|v| a * v + c).collect()));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let yt = g.layer_norm(xt, gain, bias, 1e-12).unwrap();
        prop_assert!(g.value(y).max_abs_diff(g.value(yt)) < 1e-6);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(&[2], 1.0));
    let zeros = g.constant(Tensor::zeros(&[2]));

    let x = g.constant(Tensor::matrix(1, 2, vec![7.0, 7.0]));
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 3.0]));
    let y = g.layer_norm(x, ones, zeros, 1e-14).unwrap();
    assert!(g.value(y).max_abs_diff(&Tensor::matrix(1, 2, vec![-1.0, 1.0])) < 1e-9);

    let b = g.constant(Tensor::vector(vec![0.3, -2.0]));
    let x = g.constant(Tensor::matrix(3, 2, vec![1.0, 5.0, -2.0, 0.5, 9.0, 9.5]));
    let y = g.layer_norm(x, zeros, b, 1e-5).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(y).row(r), &[0.3, -2.0]);
    }
}

#[test]
fn layer_norm_standardises_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, 4, 9);
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(&[9], 1.0));
    let zeros = g.constant(Tensor::zeros(&[9]));
    let vx = g.constant(x);
    let y = g.layer_norm(vx, ones, zeros, 1e-5).unwrap();
    for r in 0..4 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-2.0, 3.0, 0.0]));
    let r = g.activation(Activation::Relu, x);
    assert_eq!(g.value(r).data(), &[0.0, 3.0, 0.0]);
    let s = g.activation(Activation::Sigmoid, x);
    assert_eq!(g.value(s).data()[2], 0.5);
}

/// `Phi(x)` by composite Simpson quadrature of the standard normal density.
fn normal_cdf_quadrature(x: f64) -> f64 {
    let lo = -12.0;
    let n = 20_000;
    let h = (x - lo) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(lo) + pdf(x);
    for i in 1..n {
        let t = lo + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    s * h / 3.0
}

#[test]
fn gelu_matches_quadrature_definition() {
    for x in [-1.0, 0.0, 1.0] {
        let oracle = x * normal_cdf_quadrature(x);
        assert!((gelu(x) - oracle).abs() < 1e-6, "x={x}");
    }
}

#[test]
fn gelu_gradient_matches_finite_difference() {
    for x in [-2.5, -1.0, -0.1, 0.0, 0.3, 1.7] {
        let h = 1e-6;
        let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        assert!((gelu_grad(x) - fd).abs() < 1e-8);
    }
}

fn geglu_graph(g: &mut Graph<'_>, params: &[Tensor; 6]) -> GegluParams {
    GegluParams {
        w_value: g.input(params[0].clone()),
        b_value: g.input(params[1].clone()),
        w_gate: g.input(params[2].clone()),
        b_gate: g.input(params[3].clone()),
        w_out: g.input(params[4].clone()),
        b_out: g.input(params[5].clone()),
    }
}

fn rand_geglu(rng: &mut ChaCha8Rng, n: usize, hidden: usize) -> [Tensor; 6] {
    [
        rand_tensor(rng, n, hidden),
        Tensor::vector(rand_tensor(rng, 1, hidden).into_data()),
        rand_tensor(rng, n, hidden),
        Tensor::vector(rand_tensor(rng, 1, hidden).into_data()),
        rand_tensor(rng, hidden, n),
        Tensor::vector(rand_tensor(rng, 1, n).into_data()),
    ]
}

#[test]
fn geglu_zero_params_give_zero_output() {
    let (n, hidden) = (3, 6);
    let params = [
        Tensor::zeros(&[n, hidden]),
        Tensor::zeros(&[hidden]),
        Tensor::zeros(&[n, hidden]),
        Tensor::zeros(&[hidden]),
        Tensor::zeros(&[hidden, n]),
        Tensor::zeros(&[n]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let p = geglu_graph(&mut g, &params);
    let x = g.constant(rand_tensor(&mut rng, 2, n));
    let y = geglu_ffn(&mut g, x, &p).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn geglu_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rows, n, hidden) = (3, 4, 8);
    let params = rand_geglu(&mut rng, n, hidden);
    let x = rand_tensor(&mut rng, rows, n);
    let mut g = Graph::new();
    let p = geglu_graph(&mut g, &params);
    let vx = g.constant(x.clone());
    let y = geglu_ffn(&mut g, vx, &p).unwrap();

    let [wv, bv, wg, bg, wo, bo] = &params;
    for r in 0..rows {
        let mut h = vec![0.0; hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut val = bv.data()[j];
            let mut gate = bg.data()[j];
            for i in 0..n {
                val += x.get(r, i) * wv.get(i, j);
                gate += x.get(r, i) * wg.get(i, j);
            }
            let phi = 0.5 * (1.0 + libm::erf(gate / 2f64.sqrt()));
            *hj = val * gate * phi;
        }
        for c in 0..n {
            let mut o = bo.data()[c];
            for (j, hj) in h.iter().enumerate() {
                o += hj * wo.get(j, c);
            }
            assert!((g.value(y).get(r, c) - o).abs() < 1e-12);
        }
    }
}

#[test]
fn geglu_saturated_gate_passes_value_branch_linearly() {
    // With gate weights zero and a huge gate bias, GELU(gate) equals the
    // pre-activation, so the hidden layer is value * bias exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, hidden) = (3, 6);
    let mut params = rand_geglu(&mut rng, n, hidden);
    params[2] = Tensor::zeros(&[n, hidden]);
    params[3] = Tensor::full(&[hidden], 50.0);
    let x = rand_tensor(&mut rng, 2, n);
    let mut g = Graph::new();
    let p = geglu_graph(&mut g, &params);
    let vx = g.constant(x);
    let y = geglu_ffn(&mut g, vx, &p).unwrap();
    let value = g.linear(vx, p.w_value, p.b_value).unwrap();
    let scaled = g.scale(value, 50.0);
    let expected = g.linear(scaled, p.w_out, p.b_out).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(expected)) < 1e-9);
}

#[test]
fn backward_linear_case_gives_outer_product() {
    let x = Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]);
    let w = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    let mut g = Graph::new();
    let vw = g.input(w);
    let vx = g.constant(x.clone());
    let y = g.matmul(vw, vx).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    let grad = g.grad(vw);
    for i in 0..2 {
        for j in 0..3 {
            assert_eq!(grad.get(i, j), x.data()[j]);
        }
    }
}

#[test]
fn backward_leaves_unused_parameters_at_zero() {
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::matrix(1, 2, vec![1.0, 2.0])).unwrap();
    let unused = store.add("unused", Tensor::matrix(1, 2, vec![3.0, 4.0])).unwrap();
    let mut g = Graph::with_params(&store);
    let u = g.param(used);
    let n = g.param(unused);
    let loss = g.sum(u);
    g.backward(loss).unwrap();
    assert!(g.grad(n).data().iter().all(|&v| v == 0.0));
    let mut grads = GradStore::zeros_like(&store);
    g.accumulate_param_grads(&mut grads);
    assert_eq!(grads.get(used).data(), &[1.0, 1.0]);
    assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn duplicate_parameter_names_are_rejected() {
    let mut store = ParamStore::new();
    store.add("a", Tensor::scalar(1.0)).unwrap();
    assert!(store.add("a", Tensor::scalar(2.0)).is_err());
}

#[test]
fn weight_init_respects_fan_in_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let id = store.add_weight("w", 16, 8, &mut rng).unwrap();
    let bound = 0.25;
    assert!(store.get(id).data().iter().all(|v| v.abs() <= bound));
}

// ---- finite-difference checks, one per differentiable op ----------------

const FD_TOL: f64 = 1e-3;

#[test]
fn fd_matmul_add_sub_mul() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ins = vec![rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 4, 2)];
    assert!(fd_rel_error(&ins, |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, y)
    }) < FD_TOL);

    let ins = vec![rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 3, 4)];
    for which in 0..3 {
        let err = fd_rel_error(&ins, |g, v| {
            let y = match which {
                0 => g.add(v[0], v[1]),
                1 => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            }
            .unwrap();
            weighted_sum(g, y)
        });
        assert!(err < FD_TOL, "op {which}: {err}");
    }
}

#[test]
fn fd_row_broadcasts_and_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ins = vec![
        rand_tensor(&mut rng, 3, 4),
        Tensor::vector(rand_tensor(&mut rng, 1, 4).into_data()),
    ];
    assert!(fd_rel_error(&ins, |g, v| {
        let y = g.add_row(v[0], v[1]).unwrap();
        weighted_sum(g, y)
    }) < FD_TOL);
    assert!(fd_rel_error(&ins, |g, v| {
        let y = g.mul_row(v[0], v[1]).unwrap();
        weighted_sum(g, y)
    }) < FD_TOL);
    assert!(fd_rel_error(&ins[..1], |g, v| {
        let y = g.affine(v[0], -1.5, 0.25);
        let y = g.scale_rows(y, vec![0.5, -2.0, 1.0]).unwrap();
        weighted_sum(g, y)
    }) < FD_TOL);
}

#[test]
fn fd_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // Keep inputs away from the ReLU kink.
    let x = Tensor::matrix(
        3,
        4,
        (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    );
    for f in 0..5 {
        let err = fd_rel_error(std::slice::from_ref(&x), |g, v| {
            let y = match f {
                0 => g.relu(v[0]),
                1 => g.gelu(v[0]),
                2 => g.sigmoid(v[0]),
                3 => g.sin(v[0]),
                _ => g.cos(v[0]),
            };
            weighted_sum(g, y)
        });
        assert!(err < FD_TOL, "unary {f}: {err}");
    }
}

#[test]
fn fd_softmax_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, 3, 5);
    assert!(fd_rel_error(std::slice::from_ref(&x), |g, v| {
        let y = g.softmax_rows(v[0]).unwrap();
        weighted_sum(g, y)
    }) < FD_TOL);

    let ins = vec![
        x,
        Tensor::vector(rand_tensor(&mut rng, 1, 5).into_data()),
        Tensor::vector(rand_tensor(&mut rng, 1, 5).into_data()),
    ];
    assert!(fd_rel_error(&ins, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        weighted_sum(g, y)
    }) < FD_TOL);
}

#[test]
fn fd_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ins = vec![rand_tensor(&mut rng, 4, 3), rand_tensor(&mut rng, 4, 3)];
    assert!(fd_rel_error(&ins, |g, v| {
        let a = g.concat_cols(&[v[0], v[1]]).unwrap();
        let b = g.concat_rows(&[v[1], v[0]]).unwrap();
        let a = g.slice_rows(a, 1, 3).unwrap();
        let b = g.slice_cols(b, 1, 3).unwrap();
        let b = g.pad_rows(b, 10).unwrap();
        let b = g.reshape(b, &[5, 4]).unwrap();
        let c = g.interleave_cols(v[0], v[1]).unwrap();
        let (sa, sb, sc) = (weighted_sum(g, a), weighted_sum(g, b), weighted_sum(g, c));
        let s = g.add(sa, sb).unwrap();
        g.add(s, sc).unwrap()
    }) < FD_TOL);
}

#[test]
fn fd_attention_and_xpos() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ins = vec![
        rand_tensor(&mut rng, 3, 8),
        rand_tensor(&mut rng, 5, 8),
        rand_tensor(&mut rng, 5, 6),
    ];
    let mask = [true, false, true, true, true];
    assert!(fd_rel_error(&ins, |g, v| {
        let y = g.attention(v[0], v[1], v[2], 2, Some(&mask)).unwrap();
        weighted_sum(g, y)
    }) < FD_TOL);
    assert!(fd_rel_error(&ins, |g, v| {
        let y = g
            .xpos_attention(
                v[0],
                v[1],
                v[2],
                2,
                &[0.0, 1.0, 2.0],
                &[-2.0, -1.0, 0.0, 1.0, 2.0],
                512.0,
                None,
            )
            .unwrap();
        weighted_sum(g, y)
    }) < FD_TOL);
}

#[test]
fn fd_geglu_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut ins = vec![rand_tensor(&mut rng, 2, 3)];
    ins.extend(rand_geglu(&mut rng, 3, 6));
    assert!(fd_rel_error(&ins, |g, v| {
        let p = GegluParams {
            w_value: v[1],
            b_value: v[2],
            w_gate: v[3],
            b_gate: v[4],
            w_out: v[5],
            b_out: v[6],
        };
        let y = geglu_ffn(g, v[0], &p).unwrap();
        weighted_sum(g, y)
    }) < FD_TOL);

    let p = Tensor::vector(vec![0.2, 0.7, 0.45, 0.9]);
    assert!(fd_rel_error(&[p.clone()], |g, v| g.bce(v[0], vec![1.0, 0.0, 1.0, 0.0]).unwrap()) < FD_TOL);
    assert!(fd_rel_error(&[p], |g, v| g.mean(v[0])) < FD_TOL);
}

#[test]
fn attention_with_single_key_returns_that_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, 1, 4));
    let k = g.constant(rand_tensor(&mut rng, 1, 4));
    let v = g.constant(rand_tensor(&mut rng, 1, 4));
    let y = g.attention(q, k, v, 2, None).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(v)) < 1e-15);
    assert_eq!(g.attention_shapes(), &[AttentionShape { queries: 1, keys: 1 }]);
}

#[test]
fn attention_fully_masked_query_is_zero() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::matrix(2, 2, vec![1.0; 4]));
    let k = g.constant(Tensor::matrix(2, 2, vec![1.0; 4]));
    let v = g.constant(Tensor::matrix(2, 2, vec![3.0; 4]));
    let y = g.attention(q, k, v, 1, Some(&[false, false])).unwrap();
    assert!(g.value(y).data().iter().all(|&x| x == 0.0));
}

#[test]
fn adam_moves_against_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -1.0])).unwrap();
    let mut grads = GradStore::zeros_like(&store);
    grads.accumulate(id, &Tensor::vector(vec![2.0, -3.0]));
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        },
    );
    adam.step(&mut store, &grads);
    // First bias-corrected step has magnitude lr in each coordinate.
    let w = store.get(id).data();
    assert!((w[0] - 0.9).abs() < 1e-6);
    assert!((w[1] + 0.9).abs() < 1e-6);
}
