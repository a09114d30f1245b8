use absa_numeric::gradcheck::{DEFAULT_FLOOR, DEFAULT_STEP, DEFAULT_TOLERANCE};
use absa_numeric::{
    flatten_gradients, gradient_check, max_relative_error, numeric_gradients, AttentionLayout, Graph, ParamStore,
    Result, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Reduces an arbitrary output to a scalar through a fixed random
/// projection so every output component influences the loss.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape, 1.0));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_unary(seed: u64, shape: &[usize], op: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert("x", random_tensor(&mut rng, shape, 1.5), true).unwrap();
    let report = gradient_check(&mut store, DEFAULT_STEP, DEFAULT_TOLERANCE, |s| {
        let mut g = Graph::new();
        let x = g.param(s, s.id("x").unwrap());
        let y = op(&mut g, x)?;
        let l = project(&mut g, y, seed + 1)?;
        Ok((g, l))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

fn check_binary(seed: u64, a: &[usize], b: &[usize], op: impl Fn(&mut Graph, Var, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert("a", random_tensor(&mut rng, a, 1.5), true).unwrap();
    store.insert("b", random_tensor(&mut rng, b, 1.5), true).unwrap();
    let report = gradient_check(&mut store, DEFAULT_STEP, DEFAULT_TOLERANCE, |s| {
        let mut g = Graph::new();
        let x = g.param(s, s.id("a").unwrap());
        let y = g.param(s, s.id("b").unwrap());
        let z = op(&mut g, x, y)?;
        let l = project(&mut g, z, seed + 1)?;
        Ok((g, l))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn matmul_passes(seed in 0u64..10_000, m in 1usize..4, k in 1usize..5, n in 1usize..4) {
        check_binary(seed, &[m, k], &[k, n], |g, a, b| g.matmul(a, b));
    }

    #[test]
    fn elementwise_binary_ops_pass(seed in 0u64..10_000, m in 1usize..4, n in 1usize..5) {
        check_binary(seed, &[m, n], &[m, n], |g, a, b| g.add(a, b));
        check_binary(seed, &[m, n], &[m, n], |g, a, b| g.sub(a, b));
        check_binary(seed, &[m, n], &[m, n], |g, a, b| g.mul(a, b));
        check_binary(seed, &[m, n], &[n], |g, a, b| g.add(a, b));
        check_binary(seed, &[m, n], &[m, n], |g, a, b| g.concat(&[a, b]));
    }

    #[test]
    fn unary_ops_pass(seed in 0u64..10_000, m in 1usize..4, n in 2usize..5) {
        check_unary(seed, &[m, n], |g, x| g.tanh(x));
        check_unary(seed, &[m, n], |g, x| g.sigmoid(x));
        check_unary(seed, &[m, n], |g, x| g.softmax(x));
        check_unary(seed, &[m, n], |g, x| g.l2_norm(x));
        check_unary(seed, &[m, n], |g, x| g.clamp_min(x, 0.3));
        check_unary(seed, &[m, n], |g, x| g.scale(x, -2.5));
        check_unary(seed, &[m, n], |g, x| g.add_scalar(x, 0.75));
        check_unary(seed, &[m, n], |g, x| g.transpose(x));
        check_unary(seed, &[m, n], |g, x| g.mean(x, 0));
        check_unary(seed, &[m, n], |g, x| g.mean(x, 1));
        check_unary(seed, &[m, n], |g, x| g.reshape(x, &[n, m]));
        check_unary(seed, &[m, n], |g, x| g.gather_rows(x, &[0, m - 1, 0]));
        check_unary(seed, &[m, n], |g, x| g.cross_entropy(x, &vec![1; m]));
    }

    #[test]
    fn row_division_passes(seed in 0u64..10_000, m in 1usize..4, n in 1usize..5) {
        // Keep the denominator away from zero.
        check_binary(seed, &[m, n], &[m], |g, a, b| {
            let b = g.mul(b, b)?;
            let b = g.add_scalar(b, 0.5)?;
            g.div_last(a, b)
        });
    }

    #[test]
    fn layer_norm_passes(seed in 0u64..10_000, m in 1usize..4, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(&mut rng, &[m, n], 1.5), true).unwrap();
        store.insert("gamma", random_tensor(&mut rng, &[n], 1.5), false).unwrap();
        store.insert("beta", random_tensor(&mut rng, &[n], 1.5), false).unwrap();
        let report = gradient_check(&mut store, DEFAULT_STEP, DEFAULT_TOLERANCE, |s| {
            let mut g = Graph::new();
            let x = g.param(s, s.id("x").unwrap());
            let ga = g.param(s, s.id("gamma").unwrap());
            let be = g.param(s, s.id("beta").unwrap());
            let y = g.layer_norm(x, ga, be, 1e-5)?;
            let l = project(&mut g, y, seed + 1)?;
            Ok((g, l))
        }).unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn embedding_passes(seed in 0u64..10_000, v in 2usize..6, d in 1usize..4) {
        check_unary(seed, &[v, d], |g, t| g.embedding(t, &[1, 0, 1, v - 1]));
    }

    #[test]
    fn attention_passes(seed in 0u64..10_000, batch in 1usize..3, t in 2usize..4, heads in 1usize..3) {
        let d = heads * 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key_mask: Vec<bool> = (0..batch * t).map(|i| i % t == 0 || rng.gen_bool(0.7)).collect();
        let layout = AttentionLayout { batch, seq_len: t, heads, key_mask };
        let mut store = ParamStore::new();
        for name in ["q", "k", "v"] {
            store.insert(name, random_tensor(&mut rng, &[batch * t, d], 1.5), true).unwrap();
        }
        let report = gradient_check(&mut store, DEFAULT_STEP, DEFAULT_TOLERANCE, |s| {
            let mut g = Graph::new();
            let q = g.param(s, s.id("q").unwrap());
            let k = g.param(s, s.id("k").unwrap());
            let v = g.param(s, s.id("v").unwrap());
            let o = g.attention(q, k, v, layout.clone())?;
            let l = project(&mut g, o, seed + 1)?;
            Ok((g, l))
        }).unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn softmax_rows_are_probability_vectors(vals in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vals).unwrap());
        let y = g.softmax(x).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(y).data().iter().all(|&p| p > 0.0));
    }
}

fn two_layer_tanh(store: &ParamStore, x: &Tensor, targets: &[usize]) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let w1 = g.param(store, store.id("w1").unwrap());
    let b1 = g.param(store, store.id("b1").unwrap());
    let w2 = g.param(store, store.id("w2").unwrap());
    let b2 = g.param(store, store.id("b2").unwrap());
    let h = g.linear(input, w1, b1)?;
    let h = g.tanh(h)?;
    let o = g.linear(h, w2, b2)?;
    let l = g.cross_entropy(o, targets)?;
    Ok((g, l))
}

fn tanh_net_store(rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert("w1", random_tensor(rng, &[4, 6], 1.0), true).unwrap();
    store.insert("b1", random_tensor(rng, &[6], 1.0), false).unwrap();
    store.insert("w2", random_tensor(rng, &[6, 3], 1.0), true).unwrap();
    store.insert("b2", random_tensor(rng, &[3], 1.0), false).unwrap();
    store
}

#[test]
fn two_layer_tanh_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = tanh_net_store(&mut rng);
    let x = random_tensor(&mut rng, &[5, 4], 1.0);
    let targets = [0, 2, 1, 1, 0];
    let report =
        gradient_check(&mut store, DEFAULT_STEP, DEFAULT_TOLERANCE, |s| two_layer_tanh(s, &x, &targets)).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.components, 4 * 6 + 6 + 6 * 3 + 3);
}

#[test]
fn identity_loss_has_no_error() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::vector(vec![0.2, -0.7, 1.9]).unwrap(), true).unwrap();
    let report = gradient_check(&mut store, DEFAULT_STEP, DEFAULT_TOLERANCE, |s| {
        let mut g = Graph::new();
        let p = g.param(s, s.id("p").unwrap());
        let l = g.sum(p)?;
        Ok((g, l))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-10, "{report:?}");
    assert!(report.passed);
}

#[test]
fn corrupted_gradient_fails_the_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = tanh_net_store(&mut rng);
    let x = random_tensor(&mut rng, &[5, 4], 1.0);
    let targets = [2, 0, 1, 1, 2];
    let ids: Vec<_> = store.ids().collect();
    let (g, l) = two_layer_tanh(&store, &x, &targets).unwrap();
    let grads = g.backward(l).unwrap();
    let analytic = flatten_gradients(&store, &grads, &ids);
    let numeric = numeric_gradients(&mut store, &ids, DEFAULT_STEP, |s| {
        let (g, l) = two_layer_tanh(s, &x, &targets)?;
        Ok(g.value(l).data()[0])
    })
    .unwrap();

    let (clean, _) = max_relative_error(&analytic, &numeric, DEFAULT_FLOOR);
    assert!(clean <= DEFAULT_TOLERANCE);

    let corrupted: Vec<Vec<f64>> = analytic.iter().map(|g| g.iter().map(|v| v * 1.01).collect()).collect();
    let (err, _) = max_relative_error(&corrupted, &numeric, DEFAULT_FLOOR);
    assert!(err > DEFAULT_TOLERANCE, "corruption went unnoticed: {err}");
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let store = tanh_net_store(&mut rng);
        let x = random_tensor(&mut rng, &[5, 4], 1.0);
        let (g, l) = two_layer_tanh(&store, &x, &[0, 1, 2, 0, 1]).unwrap();
        let grads = g.backward(l).unwrap();
        let flat = flatten_gradients(&store, &grads, &store.ids().collect::<Vec<_>>());
        (g.value(l).data()[0].to_bits(), flat)
    };
    assert_eq!(run(), run());
}

#[test]
fn unreached_parameters_have_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.insert("a", Tensor::vector(vec![1.0]).unwrap(), true).unwrap();
    let b = store.insert("b", Tensor::vector(vec![2.0]).unwrap(), true).unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, a);
    let _unused = g.param(&store, b);
    let l = g.sum(x).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(a).is_some());
    assert!(grads.get(b).is_none());
}
