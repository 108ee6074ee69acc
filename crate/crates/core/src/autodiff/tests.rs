use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::SerError;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-4;

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Scalarizes `build` as `sum(out ⊙ R)` with a fixed random `R`, then compares
/// analytic gradients of every input with central differences.
fn max_grad_error(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let weights = Tensor::uniform(&probe_shape, -1.0, 1.0, &mut rng);
    let eval = |vals: &[Tensor], need_grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| g.leaf(t.clone(), need_grad))
            .collect::<Result<_>>()?;
        let out = build(&mut g, &vars)?;
        let w = g.constant(weights.clone())?;
        let prod = g.mul(out, w)?;
        let s = g.sum(prod)?;
        let value = g.value(s).item();
        if !need_grad {
            return Ok((value, vec![]));
        }
        let grads = g.backward(s)?;
        Ok((value, vars.iter().map(|&v| grads.wrt(v).map(<[f64]>::to_vec)).collect()))
    };
    let (_, analytic) = eval(inputs, true).unwrap();
    let mut worst = 0.0f64;
    for (idx, input) in inputs.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |x| {
                let mut vals = inputs.to_vec();
                vals[idx] = x.clone();
                eval(&vals, false).map(|(v, _)| v)
            },
            input,
            H,
        )
        .unwrap();
        let a = analytic[idx].clone().unwrap_or_else(|| vec![0.0; input.len()]);
        for (av, nv) in a.iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*av, *nv, FLOOR));
        }
    }
    worst
}

fn assert_op_gradients(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, build: &Build) {
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(s, lo, hi, &mut rng)).collect();
        worst = worst.max(max_grad_error(&inputs, build, trial));
    }
    assert!(worst < 1e-5, "{name}: max relative gradient error {worst:e}");
}

#[test]
fn sum_of_squares_matches_analytic() {
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let (value, grads) = forward_backward(&[("x", &x, true)], |g, v| {
        let sq = g.mul(v["x"], v["x"])?;
        g.sum(sq)
    })
    .unwrap();
    assert_eq!(value, 14.0);
    assert_eq!(grads["x"].data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(&[4, 5], -3.0, 3.0, &mut rng);
    let (_, grads) = forward_backward(&[("x", &x, true)], |g, v| g.sum(v["x"])).unwrap();
    assert!(grads["x"].data().iter().all(|&d| d == 1.0));
}

#[test]
fn non_grad_inputs_are_absent() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let c = Tensor::vector(vec![3.0, 4.0]);
    let (_, grads) = forward_backward(&[("x", &x, true), ("c", &c, false)], |g, v| {
        let p = g.mul(v["x"], v["c"])?;
        g.sum(p)
    })
    .unwrap();
    assert_eq!(grads["x"].data(), &[3.0, 4.0]);
    assert!(!grads.contains_key("c"));
}

#[test]
fn shape_mismatch_names_node() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]), true).unwrap();
    let b = g.leaf(Tensor::zeros(&[3, 2]), true).unwrap();
    match g.add(a, b) {
        Err(SerError::ShapeMismatch { node, op, .. }) => {
            assert_eq!(node, 2);
            assert_eq!(op, "add");
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn non_finite_intermediate_reports_node() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::vector(vec![1.0, 0.0]), true).unwrap();
    match g.log(a) {
        Err(SerError::NumericOverflow { node, op }) => {
            assert_eq!(node, 1);
            assert_eq!(op, "log");
        }
        other => panic!("expected overflow error, got {other:?}"),
    }
}

#[test]
fn finite_difference_examples() {
    let x = Tensor::scalar(3.0);
    let d = finite_difference_gradient(|t| Ok(t.item() * t.item()), &x, 1e-5).unwrap();
    assert!((d.item() - 6.0).abs() < 1e-8);

    let x = Tensor::vector(vec![0.3, -2.0, 7.0]);
    let d = finite_difference_gradient(|_| Ok(4.2), &x, 1e-5).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));

    assert!(finite_difference_gradient(|_| Ok(1.0), &x, 0.0).is_err());
    assert!(matches!(
        finite_difference_gradient(|_| Ok(f64::NAN), &x, 1e-5),
        Err(SerError::NonFinite { .. })
    ));
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let s: &[usize] = &[3, 4];
    assert_op_gradients("add", &[s, s], -1.0, 1.0, &|g, v| g.add(v[0], v[1]));
    assert_op_gradients("sub", &[s, s], -1.0, 1.0, &|g, v| g.sub(v[0], v[1]));
    assert_op_gradients("mul", &[s, s], -1.0, 1.0, &|g, v| g.mul(v[0], v[1]));
    assert_op_gradients("div", &[s, s], 0.5, 1.5, &|g, v| g.div(v[0], v[1]));
    assert_op_gradients("scale", &[s], -1.0, 1.0, &|g, v| g.scale(v[0], -2.5));
    assert_op_gradients("offset", &[s], -1.0, 1.0, &|g, v| g.offset(v[0], 0.7));
    assert_op_gradients("relu", &[s], -1.0, 1.0, &|g, v| g.relu(v[0]));
    assert_op_gradients("sigmoid", &[s], -1.0, 1.0, &|g, v| g.sigmoid(v[0]));
    assert_op_gradients("tanh", &[s], -1.0, 1.0, &|g, v| g.tanh(v[0]));
    assert_op_gradients("gelu", &[s], -1.0, 1.0, &|g, v| g.gelu(v[0]));
    assert_op_gradients("exp", &[s], -1.0, 1.0, &|g, v| g.exp(v[0]));
    assert_op_gradients("log", &[s], 0.2, 1.0, &|g, v| g.log(v[0]));
    assert_op_gradients("sqrt", &[s], 0.2, 1.0, &|g, v| g.sqrt(v[0]));
    assert_op_gradients("clamp_min", &[s], -1.0, 1.0, &|g, v| g.clamp_min(v[0], 0.1));
}

#[test]
fn structural_primitives_match_finite_differences() {
    assert_op_gradients("matmul", &[&[3, 4], &[4, 2]], -1.0, 1.0, &|g, v| g.matmul(v[0], v[1]));
    assert_op_gradients("transpose", &[&[3, 4]], -1.0, 1.0, &|g, v| g.transpose(v[0]));
    assert_op_gradients("reshape", &[&[3, 4]], -1.0, 1.0, &|g, v| g.reshape(v[0], &[2, 6]));
    assert_op_gradients("broadcast_scalar", &[&[1]], -1.0, 1.0, &|g, v| {
        g.broadcast_scalar(v[0], &[2, 3])
    });
    assert_op_gradients("broadcast_rows", &[&[4]], -1.0, 1.0, &|g, v| g.broadcast_rows(v[0], 3));
    assert_op_gradients("broadcast_cols", &[&[4]], -1.0, 1.0, &|g, v| g.broadcast_cols(v[0], 3));
    assert_op_gradients("sum", &[&[3, 4]], -1.0, 1.0, &|g, v| g.sum(v[0]));
    assert_op_gradients("mean", &[&[3, 4]], -1.0, 1.0, &|g, v| g.mean(v[0]));
    assert_op_gradients("variance", &[&[3, 4]], -1.0, 1.0, &|g, v| g.variance(v[0]));
    assert_op_gradients("sum_axis0", &[&[3, 4]], -1.0, 1.0, &|g, v| g.sum_axis(v[0], 0));
    assert_op_gradients("sum_axis1", &[&[3, 4]], -1.0, 1.0, &|g, v| g.sum_axis(v[0], 1));
    assert_op_gradients("softmax", &[&[3, 5]], -1.0, 1.0, &|g, v| g.softmax_rows(v[0]));
    assert_op_gradients("concat0", &[&[2, 3], &[1, 3]], -1.0, 1.0, &|g, v| {
        g.concat(&[v[0], v[1]], 0)
    });
    assert_op_gradients("concat1", &[&[2, 3], &[2, 2]], -1.0, 1.0, &|g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    assert_op_gradients("slice", &[&[3, 5]], -1.0, 1.0, &|g, v| g.slice(v[0], 1, 1, 3));
    assert_op_gradients("linear", &[&[3, 4], &[2, 4], &[2]], -1.0, 1.0, &|g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
}

#[test]
fn conv_and_norm_primitives_match_finite_differences() {
    for dilation in [1, 2, 3] {
        assert_op_gradients("conv1d", &[&[3, 7], &[2, 3, 3], &[2]], -1.0, 1.0, &|g, v| {
            g.conv1d(v[0], v[1], Some(v[2]), dilation)
        });
    }
    assert_op_gradients("conv1d_k1", &[&[3, 5], &[4, 3, 1]], -1.0, 1.0, &|g, v| {
        g.conv1d(v[0], v[1], None, 1)
    });
    assert_op_gradients("group_norm", &[&[4, 5], &[4], &[4]], -1.0, 1.0, &|g, v| {
        g.group_norm(v[0], 2, v[1], v[2], 1e-5)
    });
    assert_op_gradients("layer_norm", &[&[3, 6], &[6], &[6]], -1.0, 1.0, &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn three_layer_net_gradients_match_finite_differences() {
    let build: &Build = &|g, v| {
        let h = g.linear(v[0], v[1], Some(v[2]))?;
        let h = g.tanh(h)?;
        let h = g.linear(h, v[3], Some(v[4]))?;
        let h = g.sigmoid(h)?;
        let h = g.linear(h, v[5], None)?;
        let p = g.softmax_rows(h)?;
        let l = g.log(p)?;
        g.mean(l)
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shapes: [&[usize]; 6] = [&[4, 5], &[6, 5], &[6], &[6, 6], &[6], &[3, 6]];
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(s, -1.0, 1.0, &mut rng)).collect();
        let err = max_grad_error(&inputs, build, seed);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn group_norm_normalizes_each_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // spread keeps eps / var below 1e-6
    let x = Tensor::uniform(&[8, 6], -10.0, 10.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.leaf(x, false).unwrap();
    let gamma = g.constant(Tensor::filled(&[8], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[8])).unwrap();
    let y = g.group_norm(xv, 4, gamma, beta, 1e-5).unwrap();
    for chunk in g.value(y).data().chunks(2 * 6) {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / chunk.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6, "variance {var}");
    }
}

#[test]
fn group_norm_constant_input_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::filled(&[4, 3], 2.5), false).unwrap();
    let gamma = g.constant(Tensor::filled(&[4], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[4])).unwrap();
    let y = g.group_norm(x, 2, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn group_norm_hand_computation() {
    // group 0 = channels {0,1} = [1,3,5,7]: mean 4, var 5
    // group 1 = channels {2,3} = [0,0,2,2]: mean 1, var 1
    let x = Tensor::from_rows(&[vec![1., 3.], vec![5., 7.], vec![0., 0.], vec![2., 2.]]).unwrap();
    let eps = 1e-5;
    let mut g = Graph::new();
    let xv = g.leaf(x, false).unwrap();
    let gamma = g.constant(Tensor::filled(&[4], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[4])).unwrap();
    let y = g.group_norm(xv, 2, gamma, beta, eps).unwrap();
    let s0 = (5.0f64 + eps).sqrt();
    let s1 = (1.0f64 + eps).sqrt();
    let expected = [
        -3.0 / s0,
        -1.0 / s0,
        1.0 / s0,
        3.0 / s0,
        -1.0 / s1,
        -1.0 / s1,
        1.0 / s1,
        1.0 / s1,
    ];
    for (a, b) in g.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn group_norm_rejects_indivisible_channels() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[6, 3]), false).unwrap();
    let gamma = g.constant(Tensor::filled(&[6], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[6])).unwrap();
    assert!(matches!(
        g.group_norm(x, 4, gamma, beta, 1e-5),
        Err(SerError::Config(_))
    ));
    assert!(matches!(g.group_norm(x, 3, gamma, beta, 0.0), Err(SerError::Config(_))));
}

#[test]
fn softmax_rows_sum_to_one_and_sigmoid_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = Tensor::uniform(&[5, 7], -30.0, 30.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(x, false).unwrap();
        let p = g.softmax_rows(xv).unwrap();
        for row in g.value(p).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let s = g.sigmoid(xv).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn forward_backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[3, 6], -1.0, 1.0, &mut rng);
    let run = || {
        forward_backward(&[("x", &x, false), ("w", &w, true)], |g, v| {
            let y = g.linear(v["x"], v["w"], None)?;
            let y = g.softmax_rows(y)?;
            let y = g.log(y)?;
            g.mean(y)
        })
        .unwrap()
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ga["w"]), bits(&gb["w"]));
}

#[test]
fn conv_receptive_field_matches_dilation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::uniform(&[2, 20], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
    for dilation in [1, 2, 4] {
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false).unwrap();
            let wv = g.leaf(w.clone(), false).unwrap();
            let y = g.conv1d(xv, wv, None, dilation).unwrap();
            g.value(y).clone()
        };
        let base = run(&x);
        let t0 = 10;
        let mut xp = x.clone();
        xp.data_mut()[t0] += 1.0; // channel 0, frame t0
        let pert = run(&xp);
        for t in 0..20 {
            let changed = (0..2).any(|c| base.at(c, t) != pert.at(c, t));
            let offset = (t as isize - t0 as isize).unsigned_abs();
            if changed {
                assert!(offset <= dilation, "dilation {dilation}: frame {t} outside span");
            }
            // exactly the taps t0 - d, t0, t0 + d see the perturbation
            assert_eq!(
                changed,
                offset.is_multiple_of(dilation) && offset <= dilation,
                "dilation {dilation}, frame {t}"
            );
        }
    }
}
