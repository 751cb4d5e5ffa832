use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::rng::{normal, seeded};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal(&mut rng, 1.0)).collect()).unwrap()
}

fn rand_dims(seed: u64, n: usize, max: usize) -> Vec<usize> {
    let mut rng = seeded(seed ^ 0xD1);
    (0..n).map(|_| rng.random_range(1..=max)).collect()
}

const FD_TOL: f64 = 1e-5;

#[test]
fn matmul_identity_and_hand_value() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
    let id = g.constant(Tensor::identity(2));
    let b = g.constant(Tensor::matrix(2, 2, vec![5., 6., 7., 8.]).unwrap());
    let ai = g.matmul(a, id).unwrap();
    assert_eq!(g.value(ai).data(), &[1., 2., 3., 4.]);
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.value(ab).data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = alloc::format!("{err}");
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let d = rand_dims(seed, 3, 5);
        let (m, k, n) = (d[0], d[1], d[2]);
        let a = randn(&[m, k], seed);
        let b = randn(&[k, n], seed + 100);
        let err = grad_check(
            |g, x| {
                let bv = g.constant(b.clone());
                let c = g.matmul(x, bv)?;
                Ok(g.sum(c))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
        let err = grad_check(
            |g, x| {
                let av = g.constant(a.clone());
                let c = g.matmul(av, x)?;
                let c2 = g.mul(c, c)?;
                Ok(g.sum(c2))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < FD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0., 0., 0.]));
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::vector(vec![0., libm::log(3.0)]));
    let y = g.softmax(x).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);

    let base = randn(&[3, 7], 4);
    let mut shifted = base.clone();
    shifted.data_mut().iter_mut().for_each(|v| *v += 123.25);
    let (a, b) = (g.constant(base), g.constant(shifted));
    let (ya, yb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
    assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0., f64::NAN]));
    assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
}

#[test]
fn softmax_rows_sum_to_one_and_gradient() {
    for seed in 0..20 {
        let d = rand_dims(seed, 2, 6);
        let x = randn(&d, seed);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.softmax(xv).unwrap();
        for r in 0..d[0] {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(g.value(y).row(r).iter().all(|&p| p >= 0.0));
        }
        let w = randn(&d, seed + 7);
        let err = grad_check(
            |g, x| {
                let y = g.softmax(x)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < FD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn rmsnorm_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0; 4]));
    let gain = g.constant(Tensor::vector(vec![1.0; 4]));
    let y = g.rmsnorm(x, gain, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0; 4]);

    let x = g.constant(Tensor::vector(vec![3.0, -3.0]));
    let gain = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let y = g.rmsnorm(x, gain, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -1.0]);
    assert!(matches!(g.rmsnorm(x, gain, -1.0), Err(Error::Parameter(_))));
}

#[test]
fn rmsnorm_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let d = rand_dims(seed, 2, 6);
        let x = randn(&d, seed);
        let gain = randn(&[d[1]], seed + 1);
        let w = randn(&d, seed + 2);
        let objective = |g: &mut Graph, x: Var, gain: Var| -> Result<Var> {
            let y = g.rmsnorm(x, gain, 1e-6)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        };
        let gv = gain.clone();
        let err = grad_check(|g, x| {
            let gain = g.constant(gv.clone());
            objective(g, x, gain)
        }, &x, 1e-5)
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
        let xv = x.clone();
        let err = grad_check(|g, gain| {
            let x = g.constant(xv.clone());
            objective(g, x, gain)
        }, &gain, 1e-5)
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn swiglu_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let wg = g.constant(randn(&[3, 5], 1));
    let wu = g.constant(randn(&[3, 5], 2));
    let wd = g.constant(randn(&[5, 3], 3));
    let y = g.swiglu_ffn(x, wg, wu, wd).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let one = |g: &mut Graph| g.constant(Tensor::filled(&[1, 1], 1.0));
    let (x, wg, wu, wd) = (one(&mut g), one(&mut g), one(&mut g), one(&mut g));
    let y = g.swiglu_ffn(x, wg, wu, wd).unwrap();
    let expected = 1.0 / (1.0 + libm::exp(-1.0));
    assert!((g.value(y).data()[0] - expected).abs() < 1e-15);
    assert!((expected - 0.731059).abs() < 1e-6);

    let bad = g.constant(Tensor::zeros(&[4, 5]));
    assert!(matches!(g.swiglu_ffn(x, bad, wu, wd), Err(Error::Dimension(_))));
}

#[test]
fn swiglu_gradient_all_inputs() {
    for seed in 0..20 {
        let dims = rand_dims(seed, 3, 5);
        let (t, d, h) = (dims[0], dims[1], dims[2]);
        let inputs = [
            randn(&[t, d], seed),
            randn(&[d, h], seed + 1),
            randn(&[d, h], seed + 2),
            randn(&[h, d], seed + 3),
        ];
        for which in 0..4 {
            let err = grad_check(
                |g, target| {
                    let mut vars = [target; 4];
                    for (i, t) in inputs.iter().enumerate() {
                        if i != which {
                            vars[i] = g.constant(t.clone());
                        }
                    }
                    let y = g.swiglu_ffn(vars[0], vars[1], vars[2], vars[3])?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum(y2))
                },
                &inputs[which],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed} input {which}: {err}");
        }
    }
}

fn conv(x: &Tensor, kernel: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(kernel.clone());
    let y = g.causal_conv1d(xv, kv).unwrap();
    g.value(y).clone()
}

#[test]
fn causal_conv_identity_and_shift() {
    let x = randn(&[6, 3], 9);
    let mut ident = Tensor::zeros(&[3, 3]);
    ident.data_mut()[6..9].copy_from_slice(&[1.0; 3]);
    assert_eq!(conv(&x, &ident), x);

    let mut shift = Tensor::zeros(&[2, 3]);
    shift.data_mut()[0..3].copy_from_slice(&[1.0; 3]);
    let y = conv(&x, &shift);
    assert_eq!(y.row(0), &[0.0; 3]);
    for i in 1..6 {
        assert_eq!(y.row(i), x.row(i - 1));
    }

    // kernel longer than the sequence is pure padding
    let y = conv(&x, &randn(&[9, 3], 2));
    assert_eq!(y.shape(), &[6, 3]);
}

#[test]
fn causal_conv_zero_taps_rejected() {
    assert!(Tensor::new(&[0, 3], vec![]).is_err());
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4, 3]));
    let k = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.causal_conv1d(x, k), Err(Error::Dimension(_))));
}

#[test]
fn causal_conv_is_causal() {
    for seed in 0..20 {
        let dims = rand_dims(seed, 3, 7);
        let (t, d, k) = (dims[0] + 1, dims[1], dims[2]);
        let x = randn(&[t, d], seed);
        let kernel = randn(&[k, d], seed + 1);
        let base = conv(&x, &kernel);
        let p = seed as usize % t;
        let mut perturbed = x.clone();
        for c in 0..d {
            perturbed.data_mut()[p * d + c] += 10.0;
        }
        let y = conv(&perturbed, &kernel);
        for i in 0..p {
            assert_eq!(y.row(i), base.row(i), "row {i} moved when row {p} changed");
        }
    }
}

#[test]
fn causal_conv_gradient() {
    for seed in 0..20 {
        let dims = rand_dims(seed, 3, 5);
        let (t, d, k) = (dims[0], dims[1], dims[2]);
        let x = randn(&[t, d], seed);
        let kernel = randn(&[k, d], seed + 1);
        let w = randn(&[t, d], seed + 2);
        let run = |g: &mut Graph, x: Var, k: Var| -> Result<Var> {
            let y = g.causal_conv1d(x, k)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        };
        let kv = kernel.clone();
        let err = grad_check(|g, x| {
            let k = g.constant(kv.clone());
            run(g, x, k)
        }, &x, 1e-5)
        .unwrap();
        assert!(err < 1e-6);
        let xv = x.clone();
        let err = grad_check(|g, k| {
            let x = g.constant(xv.clone());
            run(g, x, k)
        }, &kernel, 1e-5)
        .unwrap();
        assert!(err < 1e-6);
    }
}

fn rope(x: &Tensor, base: f64, offset: usize) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.rope(xv, base, offset).unwrap();
    g.value(y).clone()
}

#[test]
fn rope_examples() {
    let x = randn(&[1, 2, 4], 3);
    assert_eq!(rope(&x, 1e6, 0), x);

    let unit = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let y = rope(&unit, 10000.0, 0);
    assert!((y.data()[2] - libm::cos(1.0)).abs() < 1e-15);
    assert!((y.data()[3] - libm::sin(1.0)).abs() < 1e-15);

    let mut g = Graph::new();
    let odd = g.constant(Tensor::zeros(&[2, 1, 3]));
    assert!(matches!(g.rope(odd, 1e4, 0), Err(Error::Parameter(_))));
}

#[test]
fn rope_scores_depend_only_on_relative_position() {
    let mut rng = seeded(77);
    for seed in 0..20 {
        let hd = 2 * rng.random_range(1..=8);
        let q = randn(&[1, 1, hd], seed);
        let k = randn(&[1, 1, hd], seed + 50);
        let (a, b, s) = (rng.random_range(0..500), rng.random_range(0..500), rng.random_range(0..5000));
        let d1 = kernels::dot(rope(&q, 1e4, a).data(), rope(&k, 1e4, b).data());
        let d2 = kernels::dot(rope(&q, 1e4, a + s).data(), rope(&k, 1e4, b + s).data());
        assert!((d1 - d2).abs() < 1e-9, "{d1} vs {d2}");
    }
}

#[test]
fn rope_preserves_pair_norms_and_gradient() {
    for seed in 0..20 {
        let dims = rand_dims(seed, 3, 4);
        let shape = [dims[0] + 1, dims[1], 2 * dims[2]];
        let x = randn(&shape, seed);
        let y = rope(&x, 1e5, seed as usize * 13);
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = a[0] * a[0] + a[1] * a[1];
            let nb = b[0] * b[0] + b[1] * b[1];
            assert!((na - nb).abs() < 1e-12);
        }
        let w = randn(&shape, seed + 3);
        let err = grad_check(
            |g, x| {
                let y = g.rope(x, 1e5, 3)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[3, 8]));
    let l = g.cross_entropy(logits, &[0, 5, 7]).unwrap();
    assert!((g.value(l).data()[0] - libm::log(8.0)).abs() < 1e-14);

    let logits = g.constant(Tensor::matrix(1, 2, vec![0.0, libm::log(3.0)]).unwrap());
    let l = g.cross_entropy(logits, &[1]).unwrap();
    let v = g.value(l).data()[0];
    assert!((v + libm::log(0.75)).abs() < 1e-15);
    assert!((v - 0.287682).abs() < 1e-6);

    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let logits = g.constant(Tensor::matrix(1, 3, vec![0.0, margin, 0.0]).unwrap());
        let l = g.cross_entropy(logits, &[1]).unwrap();
        let v = g.value(l).data()[0];
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-20);

    assert!(matches!(g.cross_entropy(logits, &[3]), Err(Error::Index(_))));
}

#[test]
fn cross_entropy_gradient() {
    for seed in 0..20 {
        let dims = rand_dims(seed, 2, 6);
        let (t, v) = (dims[0], dims[1] + 1);
        let mut rng = seeded(seed);
        let targets: Vec<Option<usize>> = (0..t)
            .map(|i| (i == 0 || rng.random_bool(0.7)).then(|| rng.random_range(0..v)))
            .collect();
        let x = randn(&[t, v], seed);
        let err = grad_check(|g, x| g.cross_entropy_masked(x, &targets), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn attention_gradient_all_inputs() {
    for seed in 0..20 {
        let dims = rand_dims(seed, 3, 4);
        let (t, heads, hd) = (dims[0] + 1, dims[1], dims[2]);
        let window = 1 + seed as usize % 3;
        let mask = Rc::new(AttentionMask::from_fn(t, t, |i, j| j <= i && i - j < window));
        let inputs = [randn(&[t, heads, hd], seed), randn(&[t, heads, hd], seed + 1), randn(&[t, heads, hd], seed + 2)];
        let w = randn(&[t, heads, hd], seed + 3);
        for which in 0..3 {
            let err = grad_check(
                |g, target| {
                    let mut vars = [target; 3];
                    for (i, t) in inputs.iter().enumerate() {
                        if i != which {
                            vars[i] = g.constant(t.clone());
                        }
                    }
                    let y = g.attention(vars[0], vars[1], vars[2], mask.clone())?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                },
                &inputs[which],
                1e-5,
            )
            .unwrap();
            assert!(err < FD_TOL, "seed {seed} input {which}: {err}");
        }
    }
}

#[test]
fn embedding_concat_slice_gradients() {
    for seed in 0..20 {
        let dims = rand_dims(seed, 3, 5);
        let (v, d, t) = (dims[0] + 1, dims[1], dims[2] + 1);
        let mut rng = seeded(seed);
        let ids: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
        let table = randn(&[v, d], seed);
        let w = randn(&[t - 1, d], seed + 1);
        let err = grad_check(
            |g, table| {
                let e = g.embedding(table, &ids)?;
                let doubled = g.concat_rows(e, e)?;
                let mid = g.slice_rows(doubled, 1, t - 1)?;
                let wv = g.constant(w.clone());
                let p = g.mul(mid, wv)?;
                let p = g.reshape(p, &[(t - 1) * d])?;
                let p2 = g.mul(p, p)?;
                Ok(g.mean(p2))
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }
    let mut g = Graph::new();
    let table = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.embedding(table, &[4]), Err(Error::Index(_))));
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = randn(&[3, 4], 1);
    let err = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn grad_check_of_one_layer_model() {
    let x = randn(&[4, 6], 2);
    let w = randn(&[6, 5], 3);
    let targets = [0usize, 4, 2, 1];
    let err = grad_check(
        |g, w| {
            let xv = g.constant(x.clone());
            let logits = g.matmul(xv, w)?;
            g.cross_entropy(logits, &targets)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_detects_wrong_backward_rule() {
    let x = randn(&[5], 4);
    // cos is the right derivative of sin; claim it is -sin instead
    let err = grad_check(|g, x| Ok({
        let y = g.unary(x, libm::sin, |z| -libm::sin(z));
        g.sum(y)
    }), &x, 1e-5)
    .unwrap();
    assert!(err > 1e-2, "{err}");
    let err = grad_check(|g, x| Ok({
        let y = g.unary(x, libm::sin, libm::cos);
        g.sum(y)
    }), &x, 1e-5)
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn grad_check_reports_non_finite() {
    let x = Tensor::vector(vec![0.0]);
    let r = grad_check(|g, x| Ok({
        let y = g.unary(x, |z| 1.0 / z, |z| -1.0 / (z * z));
        g.sum(y)
    }), &x, 1e-5);
    assert!(matches!(r, Err(Error::Numeric(_))));
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(randn(&[5, 4], 11));
        let w = g.param(randn(&[4, 6], 12));
        let h = g.matmul(x, w).unwrap();
        let h = g.silu(h);
        let l = g.cross_entropy(h, &[0, 1, 2, 3, 4]).unwrap();
        g.backward(l).unwrap();
        (g.grad(x).unwrap(), g.grad(w).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(randn(&[2, 2], 1));
    let p = g.param(randn(&[2, 2], 2));
    let y = g.matmul(c, p).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert!(g.grad(p).is_some());
    assert!(g.backward(y).is_err());
}
