use dmcm_core::autodiff::{
    backward, finite_diff_check, grad, higher_order_backward, Array, Tape, Tensor,
};
use dmcm_core::model::{mse_loss, Architecture, ContextSlot, ContextSpec, NetworkConfig};
use dmcm_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn power_rule() {
    let tape = Tape::new();
    let x = tape.leaf(Array::scalar(3.0));
    let loss = x.square().unwrap();
    let g = backward(&loss, &[&x]).unwrap();
    assert_eq!(g.of(&x).item(), 6.0);
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Array::scalar(2.0));
    let p = tape.leaf(Array::zeros(&[2, 3]));
    let loss = x.square().unwrap();
    let g = backward(&loss, &[&x, &p]).unwrap();
    assert_eq!(g.of(&p).value(), &Array::zeros(&[2, 3]));
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let v = tape.leaf(Array::row(vec![1.0, 2.0]));
    assert!(matches!(backward(&v, &[&v]), Err(Error::NotScalar(_))));
    let s = v.sum().unwrap();
    assert!(matches!(backward(&s, &[]), Err(Error::EmptyWrt)));
    let other = Tape::new().leaf(Array::scalar(1.0));
    assert!(matches!(backward(&s, &[&other]), Err(Error::DisjointWrt)));
}

/// Central differences for a 5-point linear regression loss, computed by hand.
#[test]
fn batch_regression_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random(&mut rng, &[1, 1], 2.0);
    let x = random(&mut rng, &[5, 1], 5.0);
    let y = random(&mut rng, &[5, 1], 5.0);
    let loss_of = |w: f64| -> f64 {
        x.data()
            .iter()
            .zip(y.data())
            .map(|(xi, yi)| (w * xi - yi).powi(2))
            .sum::<f64>()
            / 5.0
    };
    let tape = Tape::new();
    let wt = tape.leaf(w.clone());
    let pred = Tensor::constant(x.clone()).matmul(&wt).unwrap();
    let loss = mse_loss(&pred, &Tensor::constant(y.clone())).unwrap();
    let g = backward(&loss, &[&wt]).unwrap().of(&wt).item();
    let h = 1e-5;
    let w0 = w.item();
    let fd = (loss_of(w0 + h) - loss_of(w0 - h)) / (2.0 * h);
    assert!((g - fd).abs() / g.abs() < 1e-6, "{g} vs {fd}");
}

#[test]
fn mse_gradient_wrt_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = random(&mut rng, &[6, 1], 3.0);
    let pred = random(&mut rng, &[6, 1], 3.0);
    let tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let loss = mse_loss(&p, &Tensor::constant(target.clone())).unwrap();
    let g = backward(&loss, &[&p]).unwrap();
    for ((gi, pi), ti) in g.of(&p).data().iter().zip(pred.data()).zip(target.data()) {
        assert!((gi - 2.0 * (pi - ti) / 6.0).abs() < 1e-15);
    }
    let t = Tensor::constant(target);
    let err = finite_diff_check(|ps| mse_loss(&ps[0], &t), &[pred], 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn second_derivative_of_cube() {
    let tape = Tape::new();
    let x = tape.leaf(Array::scalar(2.0));
    let cube = x.square().unwrap().mul(&x).unwrap();
    let dx = grad(&cube, &[&x], true).unwrap().remove(0);
    assert_eq!(dx.item(), 12.0);
    let d2 = higher_order_backward(&dx, &[&x]).unwrap();
    assert_eq!(d2.of(&x).item(), 12.0);
}

#[test]
fn third_level_through_sin() {
    // d/dx sin = cos, d2 = -sin, d3 = -cos
    let tape = Tape::new();
    let x = tape.leaf(Array::scalar(0.7));
    let f = x.sin().unwrap();
    let d1 = grad(&f, &[&x], true).unwrap().remove(0);
    let d2 = grad(&d1, &[&x], true).unwrap().remove(0);
    let d3 = grad(&d2, &[&x], true).unwrap().remove(0);
    assert!((d1.item() - 0.7f64.cos()).abs() < 1e-15);
    assert!((d2.item() + 0.7f64.sin()).abs() < 1e-15);
    assert!((d3.item() + 0.7f64.cos()).abs() < 1e-15);
}

#[test]
fn higher_order_requires_retained_graph() {
    let tape = Tape::new();
    let x = tape.leaf(Array::scalar(2.0));
    let cube = x.square().unwrap().mul(&x).unwrap();
    let detached = backward(&cube, &[&x]).unwrap().of(&x).clone();
    assert!(matches!(
        higher_order_backward(&detached, &[&x]),
        Err(Error::GraphNotRetained)
    ));
    let dx = grad(&cube, &[&x], true).unwrap().remove(0);
    let stranger = Tape::new().leaf(Array::scalar(1.0));
    assert!(matches!(
        higher_order_backward(&dx, &[&stranger]),
        Err(Error::DisjointWrt)
    ));
}

#[test]
fn finite_diff_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random(&mut rng, &[3, 4], 2.0);
    let sumsq = finite_diff_check(|ps| ps[0].square()?.sum(), &[p.clone()], 1e-5).unwrap();
    assert!(sumsq < 1e-8, "{sumsq}");
    let constant = finite_diff_check(|_| Ok(Tensor::scalar(4.0)), &[p.clone()], 1e-5).unwrap();
    assert_eq!(constant, 0.0);
    assert!(finite_diff_check(|ps| ps[0].sum(), &[p], 0.0).is_err());
}

/// Random 2-40-40-1 MLP without contexts.
#[test]
fn mlp_gradients_match_finite_differences() {
    let arch = Architecture::new(NetworkConfig::mlp(2, &[40, 40], 1), ContextSpec::none()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = arch.init_params(5);
    let x = Tensor::constant(random(&mut rng, &[10, 2], 5.0));
    let y = Tensor::constant(random(&mut rng, &[10, 1], 5.0));
    let flat: Vec<Array> = params.arrays().cloned().collect();
    let err = finite_diff_check(
        |ps| {
            let layers = to_layers(ps);
            mse_loss(&arch.forward(&layers, &[], &x)?, &y)
        },
        &flat,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

fn to_layers(ps: &[Tensor]) -> Vec<dmcm_core::model::LayerVars> {
    ps.chunks(2)
        .map(|c| dmcm_core::model::LayerVars {
            weight: c[0].clone(),
            bias: c[1].clone(),
        })
        .collect()
}

#[test]
fn schwarz_symmetry() {
    // smooth f(a, b) = sin(a*b) + a^2 * cos(b)
    let tape = Tape::new();
    let a = tape.leaf(Array::scalar(0.3));
    let b = tape.leaf(Array::scalar(-1.1));
    let f = a
        .mul(&b)
        .unwrap()
        .sin()
        .unwrap()
        .add(&a.square().unwrap().mul(&b.cos().unwrap()).unwrap())
        .unwrap();
    let g = grad(&f, &[&a, &b], true).unwrap();
    let dab = grad(&g[0], &[&b], false).unwrap()[0].item();
    let dba = grad(&g[1], &[&a], false).unwrap()[0].item();
    assert!((dab - dba).abs() < 1e-8, "{dab} vs {dba}");
}

#[test]
fn context_columns_get_gradients_through_concat() {
    let arch = Architecture::new(
        NetworkConfig::mlp(1, &[8, 8], 1),
        ContextSpec::new(vec![ContextSlot::new(2, 0, &["A"]), ContextSlot::new(3, 2, &["P"])]),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = arch.init_params(9);
    let x = Tensor::constant(random(&mut rng, &[4, 1], 5.0));
    let y = Tensor::constant(random(&mut rng, &[4, 1], 5.0));
    let c0 = random(&mut rng, &[1, 2], 1.0);
    let c1 = random(&mut rng, &[1, 3], 1.0);
    let layers = params.constants();
    let err = finite_diff_check(
        |ps| mse_loss(&arch.forward(&layers, ps, &x)?, &y),
        &[c0, c1],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, &[3, 2], 1.0);
        let x = Tensor::constant(random(&mut rng, &[4, 3], 1.0));
        let tape = Tape::new();
        let wt = tape.leaf(w);
        let h = x.matmul(&wt).unwrap();
        let l1 = h.sin().unwrap().sum().unwrap();
        let l2 = h.square().unwrap().mean().unwrap();
        let combined = l1.scale(a).unwrap().add(&l2.scale(b).unwrap()).unwrap();
        let g = backward(&combined, &[&wt]).unwrap();
        let g1 = backward(&l1, &[&wt]).unwrap();
        let g2 = backward(&l2, &[&wt]).unwrap();
        for ((c, u), v) in g.of(&wt).data().iter().zip(g1.of(&wt).data()).zip(g2.of(&wt).data()) {
            prop_assert!((c - (a * u + b * v)).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }
}
