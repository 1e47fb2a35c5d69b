use std::rc::Rc;

use super::*;

type Result<T> = std::result::Result<T, AutodiffError>;

fn lcg(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            2.0 * ((s >> 11) as f64 / (1u64 << 53) as f64) - 1.0
        })
        .collect()
}

fn arr(shape: &[usize], seed: u64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), lcg(n, seed)).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central finite differences of a scalar function of several arrays.
fn numeric_grads(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Array]) -> Vec<Vec<f64>> {
    let h = 1e-5;
    // Inputs enter as constants; an inner `grad` call inside `f` still
    // needs recording enabled.
    let eval = |xs: &[Array]| {
        let ts: Vec<Tensor> = xs.iter().cloned().map(Tensor::constant).collect();
        f(&ts).unwrap().item()
    };
    (0..inputs.len())
        .map(|k| {
            (0..inputs[k].len())
                .map(|i| {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[i] += h;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[i] -= h;
                    (eval(&plus) - eval(&minus)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

fn check_grads(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Array]) {
    let leaves: Vec<Tensor> = inputs.iter().cloned().map(Tensor::leaf).collect();
    let out = f(&leaves).unwrap();
    let grads = backward(&out, false).unwrap();
    let numeric = numeric_grads(f, inputs);
    for (leaf, num) in leaves.iter().zip(&numeric) {
        let analytic = grads
            .get(leaf)
            .map(|g| g.value().data().to_vec())
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let err = rel_err(&analytic, num);
        assert!(err < 1e-4, "relative error {err}: {analytic:?} vs {num:?}");
    }
}

/// Reduces an arbitrary tensor to a scalar through a fixed random weighting.
fn project(t: &Tensor, seed: u64) -> Result<Tensor> {
    let w = Tensor::constant(arr(t.shape(), seed));
    Ok(t.mul(&w)?.sum())
}

#[test]
fn leaky_relu_and_tanh_examples() {
    let x = Tensor::constant(Array::from_vec(vec![-1.0, 0.0]));
    assert_eq!(x.leaky_relu(0.2).value().data(), &[-0.2, 0.0]);
    assert_eq!(x.tanh().value().data()[1], 0.0);
}

#[test]
fn sum_of_squares_gradient() {
    let x = Tensor::leaf(Array::from_vec(vec![1.0, 2.0, 3.0]));
    let y = x.mul(&x).unwrap().sum();
    let g = backward(&y, false).unwrap();
    assert_eq!(g.get(&x).unwrap().value().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn norm_gradient_is_unit_vector() {
    let x = Tensor::leaf(Array::from_vec(vec![3.0, 4.0]));
    let n = x.square().sum().sqrt();
    assert!((n.item() - 5.0).abs() < 1e-15);
    let g = backward(&n, false).unwrap();
    let d = g.get(&x).unwrap().value().data().to_vec();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
}

#[test]
fn non_scalar_root_is_rejected() {
    let x = Tensor::leaf(Array::from_vec(vec![1.0, 2.0]));
    assert!(matches!(
        backward(&x.scale(2.0), false),
        Err(AutodiffError::NonScalarRoot { .. })
    ));
}

#[test]
fn nan_gradient_names_the_producing_op() {
    let x = Tensor::leaf(Array::from_vec(vec![0.0]));
    let y = x.sqrt().sum();
    match backward(&y, false) {
        Err(AutodiffError::NonFinite { op, .. }) => assert_eq!(op, "pow"),
        other => panic!("expected NonFinite, got {:?}", other.map(|g| g.len())),
    }
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let a = Tensor::constant(Array::zeros(&[2, 3]));
    let b = Tensor::constant(Array::zeros(&[3, 2]));
    let msg = a.add(&b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    let msg = a.matmul(&a).unwrap_err().to_string();
    assert!(msg.contains("matmul"), "{msg}");
}

#[test]
fn transposed_conv_length_matches_brute_force_matrix() {
    // Build the transposed convolution as an explicit matrix from unit
    // impulses and compare against the size formula S(L-1)+K-2P+OP.
    let w = Tensor::constant(Array::new(vec![1, 1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = Tensor::constant(Array::zeros(&[1, 1, 4, 1]))
        .conv_transpose2d(&w, [2, 1], [1, 0], [0, 0])
        .unwrap();
    assert_eq!(y.shape(), &[1, 1, 8, 1]);
    let mut brute = vec![vec![0.0; 8]; 4];
    for (i, row) in brute.iter_mut().enumerate() {
        for (k, wk) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            let o = (2 * i + k) as isize - 1;
            if (0..8).contains(&o) {
                row[o as usize] += wk;
            }
        }
    }
    for (i, row) in brute.iter().enumerate() {
        let mut e = vec![0.0; 4];
        e[i] = 1.0;
        let x = Tensor::constant(Array::new(vec![1, 1, 4, 1], e).unwrap());
        let y = x.conv_transpose2d(&w, [2, 1], [1, 0], [0, 0]).unwrap();
        assert_eq!(y.value().data(), row.as_slice());
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    type F = fn(&Tensor) -> Result<Tensor>;
    let unary: Vec<(&str, F)> = vec![
        ("neg", |x| Ok(x.neg())),
        ("scale", |x| Ok(x.scale(-1.7))),
        ("add_scalar", |x| Ok(x.add_scalar(0.3))),
        ("square", |x| Ok(x.square())),
        ("pow", |x| Ok(x.square().add_scalar(0.5).powf(-0.5))),
        ("exp", |x| Ok(x.exp())),
        ("log", |x| Ok(x.square().add_scalar(0.1).ln())),
        ("tanh", |x| Ok(x.tanh())),
        ("sigmoid", |x| Ok(x.sigmoid())),
        ("softplus", |x| Ok(x.softplus())),
        ("relu", |x| Ok(x.relu())),
        ("leaky_relu", |x| Ok(x.leaky_relu(0.2))),
        ("clamp_min", |x| Ok(x.clamp_min(0.1))),
        ("reshape", |x| x.reshape(&[3, 4])),
        ("transpose", |x| x.reshape(&[3, 4])?.t()),
        ("mean", |x| Ok(x.mean())),
        ("sum_to", |x| x.reshape(&[3, 4])?.sum_to(&[1, 4])),
        ("broadcast_to", |x| x.reshape(&[1, 12])?.broadcast_to(&[2, 12])),
    ];
    for (case, (name, f)) in unary.iter().enumerate() {
        for rep in 0..20u64 {
            let seed = 1000 * case as u64 + rep;
            let g = |ts: &[Tensor]| project(&f(&ts[0])?, seed + 7);
            let input = arr(&[12], seed);
            // keep away from the kinks of relu-like ops
            let kink = if *name == "clamp_min" { 0.1 } else { 0.0 };
            if (name.contains("relu") || *name == "clamp_min")
                && input.data().iter().any(|v| (v - kink).abs() < 1e-3)
            {
                continue;
            }
            check_grads(&g, &[input]);
        }
    }
}

#[test]
fn binary_gradients_match_finite_differences() {
    type F = fn(&Tensor, &Tensor) -> Result<Tensor>;
    let binary: Vec<F> = vec![
        |a, b| a.add(b),
        |a, b| a.sub(b),
        |a, b| a.mul(b),
        |a, b| a.div(&b.square().add_scalar(0.5)),
        |a, b| a.reshape(&[3, 4])?.matmul(&b.reshape(&[4, 3])?),
    ];
    for (case, f) in binary.iter().enumerate() {
        for rep in 0..20u64 {
            let seed = 5000 + 100 * case as u64 + rep;
            let g = |ts: &[Tensor]| project(&f(&ts[0], &ts[1])?, seed + 3);
            check_grads(&g, &[arr(&[12], seed), arr(&[12], seed + 1)]);
        }
    }
}

#[test]
fn conv_family_gradients_match_finite_differences() {
    for rep in 0..20u64 {
        let seed = 9000 + rep;
        let conv = |ts: &[Tensor]| project(&ts[0].conv2d(&ts[1], [2, 1], [1, 1])?, seed + 9);
        check_grads(&conv, &[arr(&[2, 2, 6, 3], seed), arr(&[3, 2, 3, 3], seed + 1)]);
        let convt = |ts: &[Tensor]| {
            project(&ts[0].conv_transpose2d(&ts[1], [2, 1], [1, 1], [1, 0])?, seed + 11)
        };
        check_grads(&convt, &[arr(&[2, 3, 3, 2], seed + 2), arr(&[3, 2, 3, 3], seed + 3)]);
    }
}

#[test]
fn pooling_and_gather_gradients_match_finite_differences() {
    for rep in 0..20u64 {
        let seed = 12000 + rep;
        let pool = |ts: &[Tensor]| project(&ts[0].max_pool2d([2, 2], [2, 2])?, seed + 1);
        check_grads(&pool, &[arr(&[2, 2, 4, 4], seed)]);
        let idx: Rc<[usize]> = vec![3usize, 0, 3, 5, 1].into();
        let scat = |ts: &[Tensor]| project(&ts[0].scatter_add(idx.clone(), &[6])?, seed + 2);
        check_grads(&scat, &[arr(&[5], seed)]);
    }
}

fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = x.shape()[1];
    let stat_shape = [1, c, 1, 1];
    let n = (x.numel() / c) as f64;
    let mean = x.sum_to(&stat_shape)?.scale(1.0 / n);
    let centered = x.sub(&mean.broadcast_to(x.shape())?)?;
    let var = centered.square().sum_to(&stat_shape)?.scale(1.0 / n);
    let inv = var.add_scalar(1e-5).powf(-0.5);
    centered
        .mul_bcast(&inv)?
        .mul_bcast(&gamma.reshape(&stat_shape)?)?
        .add_bcast(&beta.reshape(&stat_shape)?)
}

#[test]
fn batch_norm_training_mode_gradients() {
    for rep in 0..20u64 {
        let seed = 15000 + rep;
        let f = |ts: &[Tensor]| project(&batch_norm_train(&ts[0], &ts[1], &ts[2])?.tanh(), seed + 5);
        check_grads(&f, &[arr(&[3, 2, 3, 2], seed), arr(&[2], seed + 1), arr(&[2], seed + 2)]);
    }
}

#[test]
fn double_backprop_of_unit_norm_penalty() {
    // d/dx (||x|| - 1)^2 computed by differentiating a graph-carrying
    // gradient of ||x||, checked against finite differences.
    let f = |ts: &[Tensor]| -> Result<Tensor> {
        let x = &ts[0];
        let n = x.square().sum().sqrt();
        Ok(n.add_scalar(-1.0).square())
    };
    check_grads(&f, &[Array::from_vec(vec![3.0, 4.0])]);

    let x = Tensor::leaf(Array::from_vec(vec![3.0, 4.0]));
    // g(x) = grad of 0.5*||x||^2 = x, so ||g|| = ||x|| and the penalty equals
    // (||x|| - 1)^2 with gradient 2(||x||-1) x/||x||.
    let half_sq = x.square().sum().scale(0.5);
    let g = grad(&half_sq, &[&x], true).unwrap().remove(0);
    let pen = g.square().sum().sqrt().add_scalar(-1.0).square();
    let d = grad(&pen, &[&x], false).unwrap().remove(0);
    let expect = [2.0 * 4.0 * 0.6, 2.0 * 4.0 * 0.8];
    for (a, b) in d.value().data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn quadratic_critic_penalty_gradient_wrt_matrix() {
    // D(x) = 0.5 x^T A x, grad_x D = 0.5 (A + A^T) x; penalty
    // (||grad_x D|| - 1)^2 differentiated w.r.t. A.
    let x0 = arr(&[4, 1], 77);
    let penalty = |ts: &[Tensor]| -> Result<Tensor> {
        let a = &ts[0];
        let x = Tensor::leaf(x0.clone());
        let d = x.t()?.matmul(&a.matmul(&x)?)?.sum().scale(0.5);
        let gx = grad(&d, &[&x], true)?.remove(0);
        Ok(gx.square().sum().sqrt().add_scalar(-1.0).square().scale(10.0))
    };
    for rep in 0..20u64 {
        check_grads(&penalty, &[arr(&[4, 4], 300 + rep)]);
    }
}

#[test]
fn conv_critic_penalty_is_twice_differentiable() {
    let x0 = arr(&[2, 1, 5, 3], 5);
    let penalty = |ts: &[Tensor]| -> Result<Tensor> {
        let x = Tensor::leaf(x0.clone());
        let h = x.conv2d(&ts[0], [2, 1], [1, 1])?.leaky_relu(0.2);
        let out = h.reshape(&[2, h.numel() / 2])?.matmul(&ts[1])?.sum();
        let gx = grad(&out, &[&x], true)?.remove(0);
        let norms = gx.reshape(&[2, 15])?.square().sum_to(&[2, 1])?.sqrt();
        Ok(norms.add_scalar(-1.0).square().mean())
    };
    for rep in 0..5u64 {
        check_grads(&penalty, &[arr(&[2, 1, 3, 3], 40 + rep), arr(&[18, 1], 50 + rep)]);
    }
}

#[test]
fn shared_subexpressions_accumulate() {
    let x = Tensor::leaf(Array::from_vec(vec![0.7, -1.3]));
    let s = x.tanh();
    let y = s.mul(&s).unwrap().add(&s).unwrap().sum();
    let g_shared = backward(&y, false).unwrap().get(&x).unwrap().value().clone();

    let x2 = Tensor::leaf(Array::from_vec(vec![0.7, -1.3]));
    let (s1, s2, s3) = (x2.tanh(), x2.tanh(), x2.tanh());
    let y2 = s1.mul(&s2).unwrap().add(&s3).unwrap().sum();
    let g_unrolled = backward(&y2, false).unwrap().get(&x2).unwrap().value().clone();
    assert_eq!(g_shared, g_unrolled);
}

#[test]
fn deterministic_bitwise() {
    let run = || {
        let x = Tensor::leaf(arr(&[2, 2, 6, 3], 1));
        let w = Tensor::leaf(arr(&[3, 2, 3, 3], 2));
        let y = x.conv2d(&w, [2, 1], [1, 1]).unwrap().tanh().sum();
        let g = backward(&y, false).unwrap();
        let mut bits: Vec<u64> = g.get(&w).unwrap().value().data().iter().map(|v| v.to_bits()).collect();
        bits.push(y.item().to_bits());
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::leaf(Array::from_vec(vec![1.0]));
    let y = no_grad(|| x.square());
    assert!(!y.requires_grad());
    assert!(is_grad_enabled());
}
