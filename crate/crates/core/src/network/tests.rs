use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mining::{BirType, Implication};

fn imp(source: usize, target: usize, btype: BirType) -> Implication {
    Implication {
        source,
        target,
        btype,
        log_p: -30.0,
        exceptions: 0,
        exception_fraction: 0.0,
        antecedent_support: 50,
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Small random net: BIR layers of the given widths over `d` inputs.
pub(crate) fn random_net(d: usize, widths: &[usize], classes: usize, hidden: &[usize], seed: u64) -> BirNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut prev = d;
    for &h in widths {
        let spec: Vec<Implication> = (0..h)
            .map(|_| {
                let a = rng.random_range(0..prev);
                let mut b = rng.random_range(0..prev - 1);
                if b >= a {
                    b += 1;
                }
                imp(a, b, BirType::ALL[rng.random_range(0..6)])
            })
            .collect();
        layers.push(build_bir_layer(&spec, prev, 0.0, &mut rng).unwrap());
        prev = h;
    }
    let head = DenseHead::new(prev, classes, &HeadConfig { hidden: hidden.to_vec() }, &mut rng);
    BirNetwork::new(names("x", d), names("c", classes), layers, head).unwrap()
}

fn randomize(net: &mut BirNetwork, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut() {
        for v in p.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    for l in &mut net.layers {
        for k in 0..l.width() {
            l.bn.running_mean[k] = rng.random_range(-0.5..0.5);
            l.bn.running_var[k] = rng.random_range(0.5..2.0);
        }
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

#[test]
fn t0_mask_and_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = build_bir_layer(&[imp(3, 7, BirType::T0)], 10, 0.3, &mut rng).unwrap();
    let mask = layer.mask();
    let on: Vec<usize> = (0..10).filter(|&j| mask[j]).collect();
    assert_eq!(on, vec![3, 7]);
    let w = layer.dense_weights();
    assert!(w[3] > 0.0 && w[7] > 0.0);
    assert_eq!(w.iter().filter(|v| **v != 0.0).count(), 2);
    assert_eq!(layer.bias, vec![0.0]);
    assert_eq!((layer.bn.gamma[0], layer.bn.beta[0]), (1.0, 0.0));
}

#[test]
fn sign_rule_for_every_type() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let expect = [
        (BirType::T0, (1.0, 1.0)),
        (BirType::T1, (-1.0, -1.0)),
        (BirType::T2, (1.0, -1.0)),
        (BirType::T3, (-1.0, 1.0)),
        (BirType::T4, (1.0, 1.0)),
        (BirType::T5, (1.0, -1.0)),
    ];
    for (t, (ss, st)) in expect {
        let layer = build_bir_layer(&[imp(0, 1, t)], 4, 0.0, &mut rng).unwrap();
        assert_eq!(layer.weights[0].signum(), ss, "{t}");
        assert_eq!(layer.weights[1].signum(), st, "{t}");
    }
}

#[test]
fn layer_construction_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(build_bir_layer(&[], 4, 0.0, &mut rng).is_err());
    assert!(build_bir_layer(&[imp(0, 4, BirType::T0)], 4, 0.0, &mut rng).is_err());
    assert!(build_bir_layer(&[imp(0, 1, BirType::T0)], 4, 1.0, &mut rng).is_err());
}

#[test]
fn sparsity_at_full_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec: Vec<Implication> = (0..5000).map(|k| imp(k % 2000, (k + 1) % 2000, BirType::T0)).collect();
    let layer = build_bir_layer(&spec, 2000, 0.3, &mut rng).unwrap();
    assert_eq!(layer.active_weight_fraction(), 0.001);
    assert!(layer.active_weight_fraction() <= 2.0 / 2000.0);
}

#[test]
fn zero_network_outputs_head_of_zero() {
    let mut net = random_net(5, &[3], 2, &[4], 5);
    for l in &mut net.layers {
        l.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0, 0.5, 9.0]]).unwrap();
    let logits = net.predict(&x).unwrap();
    let zero = Matrix::zeros(1, 3);
    let mut h = net.head.layers[0].apply(&zero);
    h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    let expect = net.head.layers[1].apply(&h);
    assert_eq!(logits, expect);
}

#[test]
fn single_unit_pre_activation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut layer = build_bir_layer(&[imp(0, 1, BirType::T0)], 4, 0.0, &mut rng).unwrap();
    layer.weights = vec![1.0, 1.0];
    let head = DenseHead::new(1, 2, &HeadConfig { hidden: vec![] }, &mut rng);
    let net = BirNetwork::new(names("x", 4), names("c", 2), vec![layer], head).unwrap();
    let x = Matrix::from_rows(&[vec![2.0, 3.0, 7.0, -1.0]]).unwrap();
    assert_eq!(net.layers[0].linear(&x).get(0, 0), 5.0);
    let cache = net.forward_with(&x, Mode::Eval.options(), None).unwrap();
    let bn = 5.0 / (1.0 + BN_EPS).sqrt();
    assert!((cache.layers[0].pre_activation.get(0, 0) - bn).abs() < 1e-15);
}

#[test]
fn eval_is_deterministic_and_train_needs_two_rows() {
    let mut net = random_net(6, &[4, 3], 3, &[5], 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_matrix(5, 6, &mut rng);
    assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    let one = random_matrix(1, 6, &mut rng);
    assert!(net.forward(&one, Mode::Train, &mut rng).is_err());
    assert!(net.predict(&one).is_ok());
    assert!(net.predict(&random_matrix(2, 5, &mut rng)).is_err());
}

#[test]
fn train_forward_updates_running_stats() {
    let mut net = random_net(4, &[3], 2, &[], 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_matrix(8, 4, &mut rng);
    let (_, cache) = net.forward(&x, Mode::Train, &mut rng).unwrap();
    let c = &cache.layers[0];
    for k in 0..3 {
        let expect_mean = 0.1 * c.batch_mean[k];
        let expect_var = 0.9 + 0.1 * c.batch_var[k] * 8.0 / 7.0;
        assert!((net.layers[0].bn.running_mean[k] - expect_mean).abs() < 1e-15);
        assert!((net.layers[0].bn.running_var[k] - expect_var).abs() < 1e-15);
    }
}

#[test]
fn dropout_zeroes_and_rescales() {
    let mut net = random_net(6, &[40], 2, &[], 11);
    net.layers[0].dropout = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_matrix(10, 6, &mut rng);
    let cache = net.forward_with(&x, Mode::Train.options(), Some(&mut rng)).unwrap();
    let c = &cache.layers[0];
    let scale = c.dropout_scale.as_ref().unwrap();
    assert!(scale.as_slice().iter().all(|&s| s == 0.0 || s == 2.0));
    assert!(scale.as_slice().iter().any(|&s| s == 0.0));
    for i in 0..c.output.as_slice().len() {
        assert_eq!(c.output.as_slice()[i], c.activation.as_slice()[i] * scale.as_slice()[i]);
    }
    assert!(net.forward_with(&x, Mode::Train.options(), None).is_err());
}

#[test]
fn head_only_linear_gradient_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let head = DenseHead::new(3, 1, &HeadConfig { hidden: vec![] }, &mut rng);
    let mut net = BirNetwork::new(names("x", 3), names("y", 1), vec![], head).unwrap();
    net.head.layers[0].weights = vec![0.5, -1.0, 2.0];
    net.head.layers[0].bias = vec![0.25];
    let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    let y = 4.0;
    let cache = net.forward_with(&x, Mode::Eval.options(), None).unwrap();
    let pred = cache.logits.get(0, 0);
    assert_eq!(pred, 0.5 - 2.0 + 6.0 + 0.25);
    let d = Matrix::from_vec(1, 1, vec![2.0 * (pred - y)]).unwrap();
    let g = net.backward(&cache, &d).unwrap();
    let expect: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|xi| 2.0 * (pred - y) * xi).collect();
    assert_eq!(g.head[0].0, expect);
    assert_eq!(g.head[0].1, vec![2.0 * (pred - y)]);
}

fn linear_loss(logits: &Matrix, coef: &Matrix) -> f64 {
    logits.as_slice().iter().zip(coef.as_slice()).map(|(a, b)| a * b).sum()
}

/// Central differences of `Σ coef ⊙ logits` against the analytic gradient.
fn check_gradients(net: &BirNetwork, x: &Matrix, opts: ForwardOptions, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef = random_matrix(x.rows(), net.n_classes(), &mut rng);
    let cache = net.forward_with(x, opts, None).unwrap();
    let grads = net.backward(&cache, &coef).unwrap();
    let analytic: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().copied()).collect();

    let step = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    let mut idx = 0;
    let n_slices = probe.params().len();
    for s in 0..n_slices {
        let len = probe.params()[s].len();
        for i in 0..len {
            let orig = probe.params()[s][i];
            probe.params_mut()[s][i] = orig + step;
            let up = linear_loss(&probe.forward_with(x, opts, None).unwrap().logits, &coef);
            probe.params_mut()[s][i] = orig - step;
            let down = linear_loss(&probe.forward_with(x, opts, None).unwrap().logits, &coef);
            probe.params_mut()[s][i] = orig;
            let fd = (up - down) / (2.0 * step);
            let g = analytic[idx];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-7);
            worst = worst.max(rel);
            idx += 1;
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_frozen_bn() {
    let mut net = random_net(5, &[4, 3], 3, &[3], 14);
    randomize(&mut net, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random_matrix(6, 5, &mut rng);
    let worst = check_gradients(&net, &x, Mode::Eval.options(), 17);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn gradients_match_finite_differences_batch_bn() {
    let mut net = random_net(5, &[4, 3], 3, &[3], 18);
    randomize(&mut net, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = random_matrix(7, 5, &mut rng);
    let opts = ForwardOptions {
        batch_stats: true,
        dropout: false,
    };
    let worst = check_gradients(&net, &x, opts, 21);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn gradients_match_finite_differences_dense() {
    let base = random_net(4, &[3], 2, &[3], 22);
    let mut net = base.to_matched_mlp(23);
    randomize(&mut net, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = random_matrix(5, 4, &mut rng);
    let worst = check_gradients(&net, &x, Mode::Eval.options(), 26);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn masked_gradient_is_exactly_zero() {
    for seed in 0..5 {
        let mut net = random_net(8, &[6, 5], 3, &[4], 100 + seed);
        randomize(&mut net, 200 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = random_matrix(9, 8, &mut rng);
        let (logits, cache) = net.forward(&x, Mode::Train, &mut rng).unwrap();
        let grads = net.backward(&cache, &logits).unwrap();
        for l in 0..net.depth() {
            let dense = grads.dense_weight_grad(&net, l);
            for (g, m) in dense.iter().zip(net.layers[l].mask()) {
                if !m {
                    assert_eq!(*g, 0.0);
                }
            }
        }
    }
}

#[test]
fn stale_cache_is_rejected() {
    let net = random_net(5, &[4], 2, &[3], 27);
    let other = random_net(5, &[6], 2, &[3], 28);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let x = random_matrix(4, 5, &mut rng);
    let cache = other.forward_with(&x, Mode::Eval.options(), None).unwrap();
    assert!(net.backward(&cache, &Matrix::zeros(4, 2)).is_err());
    let cache = net.forward_with(&x, Mode::Eval.options(), None).unwrap();
    assert!(net.backward(&cache, &Matrix::zeros(3, 2)).is_err());
}

#[test]
fn accounting_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let spec0: Vec<Implication> = (0..2800).map(|k| imp(k % 77, (k + 1) % 77, BirType::T1)).collect();
    let layer = build_bir_layer(&spec0, 77, 0.3, &mut rng).unwrap();
    let head = DenseHead::new(2800, 8, &HeadConfig::default(), &mut rng);
    let net = BirNetwork::new(names("p", 77), names("c", 8), vec![layer], head).unwrap();
    let acc = active_param_count(&net);
    assert_eq!(acc.width, 2800);
    assert_eq!(acc.bir_active, 8400);
    assert_eq!(acc.total_active, 8400 + 5600 + (2800 * 32 + 32) + (32 * 8 + 8));

    let head = DenseHead::new(77, 8, &HeadConfig::default(), &mut rng);
    let empty = BirNetwork::new(names("p", 77), names("c", 8), vec![], head).unwrap();
    let acc = active_param_count(&empty);
    assert_eq!((acc.width, acc.bir_active), (0, 0));
    assert_eq!(acc.total_active, empty.head.param_count());
}

#[test]
fn matched_mlp_is_dense_with_same_shapes() {
    let net = random_net(6, &[5, 4], 3, &[7], 31);
    let dense = net.to_matched_mlp(32);
    assert_eq!(dense.depth(), 2);
    for (a, b) in net.layers.iter().zip(&dense.layers) {
        assert_eq!(a.width(), b.width());
        assert_eq!(a.input_dim, b.input_dim);
        assert_eq!(a.dropout, b.dropout);
        assert_eq!(b.active_weight_fraction(), 1.0);
        assert!(b.mask().iter().all(|&m| m));
    }
    assert_eq!(dense.head.hidden_widths(), vec![7]);
    let ratio = net.layers[0].active_weight_count() as f64 / dense.layers[0].active_weight_count() as f64;
    assert_eq!(1.0 / ratio, 6.0 / 2.0);
    assert_eq!(matched_param_count(&net), active_param_count(&dense));
}

#[test]
fn input_names_expand_bindings() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let l0 = build_bir_layer(&[imp(0, 1, BirType::T0), imp(1, 2, BirType::T5)], 3, 0.0, &mut rng).unwrap();
    let l1 = build_bir_layer(&[imp(0, 1, BirType::T1)], 2, 0.0, &mut rng).unwrap();
    let head = DenseHead::new(1, 2, &HeadConfig::default(), &mut rng);
    let net = BirNetwork::new(
        vec!["A".into(), "B".into(), "C".into()],
        names("c", 2),
        vec![l0, l1],
        head,
    )
    .unwrap();
    assert_eq!(net.input_names(0), vec!["A", "B", "C"]);
    assert_eq!(net.input_names(1), vec!["L0/u0:T0(A,B)", "L0/u1:T5(B,C)"]);
    assert_eq!(net.input_names(2), vec!["L1/u0:T1(L0/u0:T0(A,B),L0/u1:T5(B,C))"]);
}

#[test]
fn validate_catches_broken_chains() {
    let mut net = random_net(5, &[4, 3], 2, &[3], 34);
    assert!(net.validate().is_ok());
    net.layers[1].input_dim = 5;
    assert!(net.validate().is_err());
    let mut net = random_net(5, &[4], 2, &[3], 35);
    net.layers[0].weights.pop();
    assert!(net.validate().is_err());
}
