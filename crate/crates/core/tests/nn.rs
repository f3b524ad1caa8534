use latentdyn::nn::checkpoint::Checkpoint;
use latentdyn::nn::{gradient_check, Adam, AdamConfig, Graph, GruCell, Linear, Mlp, ParamStore};
use latentdyn::tensor::check::GradCheckOptions;
use latentdyn::tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_all(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
}

/// Scalar loss that weights each output by a fixed pseudo-random coefficient.
fn project(tape: &Tape, y: Var, seed: u64) -> latentdyn::Result<Var> {
    let shape = tape.shape(y)?;
    let w = random_tensor(&mut rng(seed), &shape);
    let w = tape.constant(w)?;
    tape.sum(tape.mul(y, w)?)
}

fn eval(store: &ParamStore, f: impl Fn(&Graph) -> latentdyn::Result<Var>) -> Tensor {
    let tape = Tape::new();
    let g = Graph::frozen(&tape, store);
    let y = f(&g).unwrap();
    tape.value(y).unwrap()
}

#[test]
fn zero_mlp_outputs_zeros() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", "g", &[4, 8, 8, 3], &mut rng(0));
    zero_all(&mut store);
    let x = random_tensor(&mut rng(1), &[5, 4]);
    let y = eval(&store, |g| {
        let x = g.tape().constant(x.clone())?;
        mlp.forward(g, x)
    });
    assert_eq!(y.shape(), &[5, 3]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_single_layer() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", "g", &[3, 3], &mut rng(0));
    *store.value_mut(mlp.layers[0].weight) = Tensor::eye(3);
    store.value_mut(mlp.layers[0].bias).data_mut().fill(0.0);
    let x = random_tensor(&mut rng(2), &[4, 3]);
    let y = eval(&store, |g| {
        let x = g.tape().constant(x.clone())?;
        mlp.forward(g, x)
    });
    assert_eq!(y, x);
}

#[test]
fn two_layer_hand_arithmetic() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", "g", &[1, 1, 1], &mut rng(0));
    *store.value_mut(mlp.layers[0].weight) = Tensor::matrix(1, 1, vec![2.0]).unwrap();
    *store.value_mut(mlp.layers[1].weight) = Tensor::matrix(1, 1, vec![3.0]).unwrap();
    let run = |x: f64| {
        eval(&store, |g| {
            let x = g.tape().constant(Tensor::matrix(1, 1, vec![x])?)?;
            mlp.forward(g, x)
        })
        .data()[0]
    };
    assert_eq!(run(1.0), 6.0);
    // negative path goes through the 0.2 slope: 3 * 0.2 * (2 * -1)
    assert!((run(-1.0) + 1.2).abs() < 1e-15);
}

#[test]
fn mlp_rejects_wrong_width() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", "g", &[4, 2], &mut rng(0));
    let tape = Tape::new();
    let g = Graph::new(&tape, &store);
    let x = tape.constant(Tensor::zeros(vec![2, 5])).unwrap();
    assert!(matches!(mlp.forward(&g, x), Err(latentdyn::Error::Shape { .. })));
}

#[test]
fn gru_zero_weights_halves_state() {
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", "g", 3, 4, &mut rng(0));
    zero_all(&mut store);
    let x = random_tensor(&mut rng(3), &[2, 3]);
    let h0 = random_tensor(&mut rng(4), &[2, 4]);
    let h1 = eval(&store, |g| {
        let t = g.tape();
        cell.step(g, t.constant(x.clone())?, t.constant(h0.clone())?)
    });
    for (a, b) in h1.data().iter().zip(h0.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
    let hz = eval(&store, |g| {
        let t = g.tape();
        cell.step(g, t.constant(x.clone())?, t.constant(Tensor::zeros(vec![2, 4]))?)
    });
    assert!(hz.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_rejects_mismatched_state() {
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", "g", 3, 4, &mut rng(0));
    let tape = Tape::new();
    let g = Graph::new(&tape, &store);
    let x = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let h = tape.constant(Tensor::zeros(vec![2, 5])).unwrap();
    assert!(cell.step(&g, x, h).is_err());
}

#[test]
fn gru_recurrent_init_is_orthogonal() {
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", "g", 5, 6, &mut rng(9));
    let u = store.value(cell.w_hidden_candidate);
    let n = 6;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..n).map(|k| u.at(&[k, i]) * u.at(&[k, j])).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((dot - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn gru_state_stays_finite_over_long_runs() {
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", "g", 8, 16, &mut rng(5));
    let mut r = rng(6);
    let mut h = Tensor::zeros(vec![1, 16]);
    for _ in 0..10_000 {
        let x = Tensor::new(vec![1, 8], (0..8).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
        h = eval(&store, |g| {
            let t = g.tape();
            cell.step(g, t.constant(x.clone())?, t.constant(h.clone())?)
        });
    }
    let norm = h.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm.is_finite());
    // every coordinate is a convex combination of tanh outputs
    assert!(h.data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn linear_gradient_check() {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", "g", 5, 3, &mut rng(0));
    let x = random_tensor(&mut rng(1), &[4, 5]);
    let opts = GradCheckOptions {
        tol: 1e-8,
        ..Default::default()
    };
    let report = gradient_check(&store, &[x], &opts, |g, xs| {
        let y = lin.forward(g, xs[0])?;
        project(g.tape(), y, 7)
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn mlp_gradient_check() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", "g", &[4, 6, 6, 2], &mut rng(0));
    let x = random_tensor(&mut rng(1), &[3, 4]);
    let report = gradient_check(&store, &[x], &GradCheckOptions::default(), |g, xs| {
        let y = mlp.forward(g, xs[0])?;
        project(g.tape(), y, 8)
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.max_rel_error < 1e-5);
}

#[test]
fn gru_gradient_check() {
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", "g", 3, 4, &mut rng(0));
    // nonzero biases so every gate path is exercised
    let b = cell.bias;
    *store.value_mut(b) = random_tensor(&mut rng(11), &[12]);
    let x = random_tensor(&mut rng(1), &[2, 3]);
    let h = random_tensor(&mut rng(2), &[2, 4]);
    let report = gradient_check(&store, &[x, h], &GradCheckOptions::default(), |g, v| {
        let h1 = cell.step(g, v[0], v[1])?;
        let h2 = cell.step(g, v[0], h1)?;
        project(g.tape(), h2, 9)
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut store = ParamStore::new();
    let a = Linear::new(&mut store, "a", "enc", 2, 2, &mut rng(0));
    let b = Linear::new(&mut store, "b", "dec", 2, 1, &mut rng(1));
    let tape = Tape::new();
    let g = Graph::with_filter(&tape, &store, |p| p.group == "dec");
    let x = tape.constant(Tensor::full(vec![1, 2], 0.5)).unwrap();
    let y = b.forward(&g, a.forward(&g, x).unwrap()).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(a.weight).is_none());
    assert!(grads.get(a.bias).is_none());
    assert!(grads.get(b.weight).is_some());
    assert_eq!(grads.get(b.bias).unwrap(), &[1.0]);
    assert_eq!(grads.group_norm(&store, "enc"), 0.0);
}

#[test]
fn adam_reduces_regression_loss() {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", "g", 2, 1, &mut rng(0));
    let x = random_tensor(&mut rng(1), &[32, 2]);
    let target: Vec<f64> = (0..32).map(|i| 1.5 * x.at(&[i, 0]) - 0.5 * x.at(&[i, 1]) + 0.25).collect();
    let target = Tensor::matrix(32, 1, target).unwrap();
    let mut adam = Adam::new(&store, AdamConfig { lr: 0.05, ..Default::default() });
    let loss_at = |store: &ParamStore| {
        let tape = Tape::new();
        let g = Graph::new(&tape, store);
        let xv = tape.constant(x.clone()).unwrap();
        let y = lin.forward(&g, xv).unwrap();
        let d = tape.sub(y, tape.constant(target.clone()).unwrap()).unwrap();
        let l = tape.mean(tape.square(d).unwrap()).unwrap();
        (tape.item(l).unwrap(), g.backward(l).unwrap())
    };
    let (first, _) = loss_at(&store);
    for _ in 0..500 {
        let (_, grads) = loss_at(&store);
        adam.step(&mut store, &grads).unwrap();
    }
    let (last, _) = loss_at(&store);
    assert!(last < 1e-4 * first.max(1.0), "{first} -> {last}");
    assert!(adam.v.iter().flatten().all(|&v| v >= 0.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut store = ParamStore::new();
    Mlp::new(&mut store, "m", "embed", &[3, 5, 2], &mut rng(0));
    GruCell::new(&mut store, "gru", "rnn", 2, 3, &mut rng(1));
    let mut ck = Checkpoint::new(serde_json::json!({"kind": "test", "k": 3}));
    ck.push_store("model.", &store);
    ck.push("extra", "", Tensor::scalar(-0.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/params.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.arrays.len(), ck.arrays.len());
    for (a, b) in ck.arrays.iter().zip(&back.arrays) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.group, b.group);
        assert_eq!(a.value.shape(), b.value.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let mut fresh = ParamStore::new();
    Mlp::new(&mut fresh, "m", "embed", &[3, 5, 2], &mut rng(50));
    GruCell::new(&mut fresh, "gru", "rnn", 2, 3, &mut rng(51));
    back.load_into("model.", &mut fresh).unwrap();
    assert_eq!(fresh, store);
}

#[test]
fn checkpoint_rejects_garbage_and_shape_mismatch() {
    let p = std::path::Path::new("x.ckpt");
    assert!(Checkpoint::from_bytes(b"not a checkpoint", p).unwrap_err().is_io());
    let mut ck = Checkpoint::new(serde_json::Value::Null);
    ck.push("w", "g", Tensor::zeros(vec![2, 2]));
    let mut bytes = ck.to_bytes().unwrap();
    bytes.truncate(bytes.len() - 1);
    assert!(Checkpoint::from_bytes(&bytes, p).is_err());

    let mut store = ParamStore::new();
    store.add("w", "g", Tensor::zeros(vec![3]));
    assert!(ck.load_into("", &mut store).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_bytes_round_trip(
        arrays in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..3), any::<u64>()), 0..5)
    ) {
        let mut ck = Checkpoint::new(serde_json::json!({"n": arrays.len()}));
        for (i, (shape, seed)) in arrays.iter().enumerate() {
            let mut r = rng(*seed);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| f64::from_bits(r.gen::<u64>() >> 2)).collect();
            ck.push(format!("a{i}"), "g", Tensor::new(shape.clone(), data).unwrap());
        }
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn adam_zero_lr_is_bit_identical(seed in any::<u64>()) {
        let mut store = ParamStore::new();
        Mlp::new(&mut store, "m", "g", &[2, 3, 1], &mut rng(seed));
        let before = store.clone();
        let mut adam = Adam::new(&store, AdamConfig { lr: 0.0, ..Default::default() });
        let grads = {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            let mut loss = tape.constant(Tensor::scalar(0.0)).unwrap();
            for id in store.ids() {
                let s = tape.sum(g.param(id).unwrap()).unwrap();
                loss = tape.add(loss, tape.square(s).unwrap()).unwrap();
            }
            g.backward(loss).unwrap()
        };
        for _ in 0..3 {
            adam.step(&mut store, &grads).unwrap();
        }
        prop_assert_eq!(store, before);
    }
}
