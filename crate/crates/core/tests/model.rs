use latentdyn::flow::FlowInit;
use latentdyn::model::{groups, Dynamics, ModelConfig, PriorKind, Sampling, SsmVae, Transitions};
use latentdyn::nn::{gradient_check, Graph, Linear, Mlp, ParamStore};
use latentdyn::tensor::check::GradCheckOptions;
use latentdyn::tensor::{Tape, Tensor};
use latentdyn::train::elbo;
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

fn small() -> ModelConfig {
    ModelConfig {
        k: 3,
        d: 3,
        markov_order: 2,
        hidden: 6,
        embedding: 5,
        embedder_layers: 2,
        envs: 4,
        ..ModelConfig::default()
    }
}

fn zero_group(store: &mut ParamStore, group: &str) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect();
    for id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
}

fn zero_mlp(store: &mut ParamStore, mlp: &Mlp) {
    for l in &mlp.layers {
        store.value_mut(l.weight).data_mut().fill(0.0);
        store.value_mut(l.bias).data_mut().fill(0.0);
    }
}

fn eval(store: &ParamStore, f: impl Fn(&Graph) -> latentdyn::Result<latentdyn::tensor::Var>) -> Tensor {
    let tape = Tape::new();
    let g = Graph::frozen(&tape, store);
    let y = f(&g).unwrap();
    tape.value(y).unwrap()
}

fn widths(mlp: &Mlp) -> Vec<usize> {
    let mut w = vec![mlp.in_features()];
    w.extend(mlp.layers.iter().map(|l| l.out_features));
    w
}

#[test]
fn default_network_widths() {
    let m = SsmVae::new(ModelConfig::default()).unwrap();
    assert_eq!(widths(&m.embedder), vec![8, 64, 64, 64, 64]);
    assert_eq!(widths(&m.ic_encoder), vec![128, 64, 64, 32]);
    assert_eq!(widths(&m.s_encoder), vec![80, 64, 64, 16]);
    assert_eq!(widths(&m.decoder), vec![8, 64, 64, 8]);
    assert_eq!((m.noise_gru.input_size, m.noise_gru.hidden_size), (64, 64));
    match &m.transitions {
        Transitions::Decomposed(heads) => {
            assert_eq!(heads.len(), 8);
            for h in heads {
                assert_eq!(widths(h), vec![17, 64, 64, 1]);
            }
        }
        Transitions::Joint(_) => panic!("default dynamics are decomposed"),
    }
    let prior = m.prior.as_ref().expect("flow prior");
    assert_eq!(prior.dims(), 8);
    let groups = m.store.groups();
    for g in groups::ALL {
        assert!(groups.iter().any(|x| x == g), "missing group {g}");
    }
}

#[test]
fn joint_and_standard_variants() {
    let cfg = ModelConfig {
        dynamics: Dynamics::Joint,
        prior: PriorKind::Standard,
        ..small()
    };
    let m = SsmVae::new(cfg).unwrap();
    match &m.transitions {
        Transitions::Joint(net) => assert_eq!(widths(net), vec![9, 6, 6, 3]),
        Transitions::Decomposed(_) => panic!("expected a joint network"),
    }
    assert!(m.prior.is_none());
    assert!(!m.store.groups().iter().any(|g| g == groups::PRIOR));
}

#[test]
fn encoder_conditioned_on_u_is_wider() {
    let m = SsmVae::new(ModelConfig {
        condition_encoder_on_u: true,
        ..small()
    })
    .unwrap();
    assert_eq!(m.s_encoder.in_features(), 6 + 6 + 4);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        ModelConfig { k: 0, ..small() },
        ModelConfig { t_ic: 1, ..small() },
        ModelConfig { envs: 0, ..small() },
    ] {
        assert!(matches!(SsmVae::new(cfg), Err(latentdyn::Error::Config(_))));
    }
}

#[test]
fn config_rejects_unknown_fields() {
    let ok: ModelConfig = serde_json::from_str(r#"{"k": 4, "d": 4}"#).unwrap();
    assert_eq!((ok.k, ok.hidden), (4, 64));
    assert!(serde_json::from_str::<ModelConfig>(r#"{"k": 4, "width": 3}"#).is_err());
}

#[test]
fn initialization_is_reproducible() {
    let a = SsmVae::new(small()).unwrap();
    let b = SsmVae::new(small()).unwrap();
    let c = SsmVae::new(ModelConfig { init_seed: 1, ..small() }).unwrap();
    let same = a.store.iter().zip(b.store.iter()).all(|((_, p), (_, q))| p.value == q.value);
    let differs = a.store.iter().zip(c.store.iter()).any(|((_, p), (_, q))| p.value != q.value);
    assert!(same && differs);
}

#[test]
fn zeroed_modules_output_zero() {
    let mut m = SsmVae::new(small()).unwrap();
    zero_group(&mut m.store, groups::EMBEDDER);
    zero_group(&mut m.store, groups::IC_ENCODER);
    zero_group(&mut m.store, groups::DECODER);
    let x = random_tensor(&mut rng(1), &[4, 3]);
    let r = eval(&m.store, |g| m.embed(g, g.tape().constant(x.clone())?));
    assert_eq!(r.shape(), [4, 5]);
    assert!(r.data().iter().all(|&v| v == 0.0));
    let out = eval(&m.store, |g| m.decode(g, g.tape().constant(x.clone())?));
    assert_eq!(out.shape(), [4, 3]);
    assert!(out.data().iter().all(|&v| v == 0.0));
    let r_in = random_tensor(&mut rng(2), &[4, 5]);
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &m.store);
    let r = tape.constant(r_in).unwrap();
    let p = m.encode_initial(&g, &[r, r]).unwrap().values(&tape).unwrap();
    assert_eq!(p.mean.shape(), [4, 6]);
    assert!(p.mean.data().iter().chain(p.log_variance.data()).all(|&v| v == 0.0));
    assert!(m.encode_initial(&g, &[r]).is_err());
}

#[test]
fn zeroed_head_outputs_its_bias() {
    let mut m = SsmVae::new(small()).unwrap();
    let Transitions::Decomposed(heads) = m.transitions.clone() else {
        panic!("decomposed")
    };
    for (j, h) in heads.iter().enumerate() {
        zero_mlp(&mut m.store, h);
        let last = h.layers.last().unwrap();
        m.store.value_mut(last.bias).data_mut()[0] = j as f64 + 0.5;
    }
    let hist = random_tensor(&mut rng(3), &[5, 6]);
    let s = random_tensor(&mut rng(4), &[5, 3]);
    let z = eval(&m.store, |g| {
        let t = g.tape();
        m.transition(g, t.constant(hist.clone())?, t.constant(s.clone())?)
    });
    for row in z.data().chunks(3) {
        assert_eq!(row, [0.5, 1.5, 2.5]);
    }
}

#[test]
fn transition_rejects_bad_shapes() {
    let m = SsmVae::new(small()).unwrap();
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &m.store);
    let h = tape.constant(Tensor::zeros(vec![2, 5])).unwrap();
    let s = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    assert!(m.transition(&g, h, s).is_err());
}

/// Which outputs move when a single noise coordinate is perturbed.
fn influence(m: &SsmVae, hist: &Tensor, s: &Tensor, j: usize) -> Vec<bool> {
    let run = |s: &Tensor| {
        eval(&m.store, |g| {
            let t = g.tape();
            m.transition(g, t.constant(hist.clone())?, t.constant(s.clone())?)
        })
    };
    let base = run(s);
    let mut bumped = s.clone();
    bumped.data_mut()[j] += 0.7;
    let moved = run(&bumped);
    (0..m.k()).map(|i| base.data()[i] != moved.data()[i]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn each_head_reads_only_its_noise(seed in 0u64..1000, j in 0usize..3) {
        let m = SsmVae::new(ModelConfig { init_seed: seed, ..small() }).unwrap();
        let mut r = rng(seed);
        let hist = random_tensor(&mut r, &[1, 6]);
        let s = random_tensor(&mut r, &[1, 3]);
        let moved = influence(&m, &hist, &s, j);
        for (i, &mv) in moved.iter().enumerate() {
            if i != j {
                prop_assert!(!mv, "noise {} moved output {}", j, i);
            }
        }
    }
}

#[test]
fn joint_transition_mixes_noise() {
    let m = SsmVae::new(ModelConfig {
        dynamics: Dynamics::Joint,
        ..small()
    })
    .unwrap();
    let mut r = rng(9);
    let hist = random_tensor(&mut r, &[1, 6]);
    let s = random_tensor(&mut r, &[1, 3]);
    let moved = influence(&m, &hist, &s, 0);
    assert!(moved.iter().filter(|&&m| m).count() > 1);
}

#[test]
fn reparameterized_mean_has_unit_derivative() {
    let m = SsmVae::new(small()).unwrap();
    let n = 4000;
    let mut r = rng(5);
    let eps = Tensor::new(
        vec![n, 1],
        (0..n).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect(),
    )
    .unwrap();
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &m.store);
    let mu = tape.leaf(Tensor::full(vec![n, 1], 0.3)).unwrap();
    let lv = tape.leaf(Tensor::full(vec![n, 1], -0.4)).unwrap();
    let p = latentdyn::model::GaussianVar { mean: mu, log_var: lv };
    let (_, s) = m.reparameterize(&g, p, eps.clone()).unwrap();
    let loss = tape.mean(s).unwrap();
    let grads = tape.backward(loss).unwrap();
    let d_mu: f64 = grads.get(mu).unwrap().iter().sum();
    assert!((d_mu - 1.0).abs() < 1e-12);
    // dE[s]/d log σ² = ½ σ E[ε], which is zero in expectation.
    let d_lv: f64 = grads.get(lv).unwrap().iter().sum();
    let sigma = (-0.2f64).exp();
    let mean_eps = eps.data().iter().sum::<f64>() / n as f64;
    assert!((d_lv - 0.5 * sigma * mean_eps).abs() < 1e-12);
    assert!(d_lv.abs() < 4.0 * 0.5 * sigma / (n as f64).sqrt());
}

fn observations(seed: u64, n: usize, t: usize, d: usize) -> Tensor {
    random_tensor(&mut rng(seed), &[n, t, d])
}

#[test]
fn trace_has_one_entry_per_frame() {
    let m = SsmVae::new(small()).unwrap();
    let x = observations(1, 5, 6, 3);
    let env = vec![0, 1, 2, 3, 0];
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &m.store);
    let tr = m.filter_forward(&g, &x, &env, Sampling::Random(&mut rng(2))).unwrap();
    assert_eq!((tr.z.len(), tr.x_hat.len(), tr.noise.len()), (6, 6, 4));
    let v = tr.values(&tape).unwrap();
    assert_eq!(v.z.shape(), [5, 6, 3]);
    assert_eq!(v.s.shape(), [5, 4, 3]);
    assert_eq!(v.x_hat.shape(), [5, 6, 3]);
    assert!(m.filter_forward(&g, &observations(1, 5, 2, 3), &env, Sampling::<ChaCha8Rng>::Mean).is_err());
    assert!(m.filter_forward(&g, &x, &env[..4], Sampling::<ChaCha8Rng>::Mean).is_err());
}

#[test]
fn mean_pass_is_deterministic_and_consistent() {
    let m = SsmVae::with_flow_init(small(), FlowInit::Random).unwrap();
    let x = observations(3, 4, 6, 3);
    let env = vec![0, 1, 2, 3];
    let a = m.posterior_means(&x, &env).unwrap();
    let b = m.posterior_means(&x, &env).unwrap();
    assert_eq!(a.z, b.z);
    assert_eq!(a.s, a.s_mean);
    // Each filtered state is the transition of its history and posterior mean.
    let (k, l) = (3, 2);
    for i in 0..4 {
        for step in l..6 {
            let zd = a.z.data();
            let hist: Vec<f64> = zd[(i * 6 + step - l) * k..(i * 6 + step) * k].to_vec();
            let s: Vec<f64> = a.s.data()[(i * 4 + step - l) * k..(i * 4 + step - l + 1) * k].to_vec();
            let z = eval(&m.store, |g| {
                let t = g.tape();
                m.transition(
                    g,
                    t.constant(Tensor::new(vec![1, l * k], hist.clone())?)?,
                    t.constant(Tensor::new(vec![1, k], s.clone())?)?,
                )
            });
            let expect = &zd[(i * 6 + step) * k..(i * 6 + step + 1) * k];
            for (p, q) in z.data().iter().zip(expect) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn filtering_is_causal() {
    let m = SsmVae::new(small()).unwrap();
    let x = observations(4, 2, 6, 3);
    let mut y = x.clone();
    // Change only the last frame.
    for i in 0..2 {
        for j in 0..3 {
            y.data_mut()[(i * 6 + 5) * 3 + j] += 1.0;
        }
    }
    let a = m.posterior_means(&x, &[0, 1]).unwrap();
    let b = m.posterior_means(&y, &[0, 1]).unwrap();
    for i in 0..2 {
        let early = |v: &Tensor| v.data()[i * 18..i * 18 + 15].to_vec();
        assert_eq!(early(&a.z), early(&b.z));
        assert_ne!(a.z.data()[i * 18 + 15..i * 18 + 18], b.z.data()[i * 18 + 15..i * 18 + 18]);
    }
}

#[test]
fn rollout_shapes_and_temperature_zero() {
    let m = SsmVae::with_flow_init(small(), FlowInit::Random).unwrap();
    let hist = random_tensor(&mut rng(6), &[2, 6]);
    let r = m.rollout(&hist, &[0, 3], 5, 32, 0.0, 1).unwrap();
    assert_eq!(r.x.shape(), [2, 32, 5, 3]);
    assert_eq!(r.z.shape(), [2, 32, 5, 3]);
    assert_eq!((r.samples(), r.horizon()), (32, 5));
    for i in 0..2 {
        let per = 5 * 3;
        let first = &r.x.data()[i * 32 * per..(i * 32 + 1) * per];
        for smp in 1..32 {
            assert_eq!(&r.x.data()[(i * 32 + smp) * per..(i * 32 + smp + 1) * per], first);
        }
    }
    assert!(r.std.data().iter().all(|&s| s < 1e-12));
    let warm = m.rollout(&hist, &[0, 3], 5, 32, 1.0, 1).unwrap();
    assert!(warm.std.data().iter().all(|&s| s > 0.0));
    assert_eq!(warm.x, m.rollout(&hist, &[0, 3], 5, 32, 1.0, 1).unwrap().x);
    let empty = m.rollout(&hist, &[0, 3], 0, 4, 1.0, 1).unwrap();
    assert_eq!(empty.x.shape(), [2, 4, 0, 3]);
    assert!(m.rollout(&hist, &[0], 2, 2, 1.0, 1).is_err());
}

/// Sets an Mlp `[in, h, h, 1]` to compute `Σ c_i x_i` exactly, using
/// `lrelu(y) − lrelu(−y) = 1.2 y` to pass a value through each hidden layer.
fn set_linear_mlp(store: &mut ParamStore, mlp: &Mlp, coef: &[f64]) {
    zero_mlp(store, mlp);
    let set = |store: &mut ParamStore, l: &Linear, row: usize, col: usize, v: f64| {
        store.value_mut(l.weight).data_mut()[row * l.in_features + col] = v;
    };
    let (l0, l1, l2) = (&mlp.layers[0], &mlp.layers[1], &mlp.layers[2]);
    for (c, &w) in coef.iter().enumerate() {
        set(store, l0, 0, c, w);
        set(store, l0, 1, c, -w);
    }
    let g = 1.0 / 1.2;
    set(store, l1, 0, 0, g);
    set(store, l1, 0, 1, -g);
    set(store, l1, 1, 0, -g);
    set(store, l1, 1, 1, g);
    set(store, l2, 0, 0, g);
    set(store, l2, 0, 1, -g);
}

#[test]
fn linear_rollout_spread_matches_closed_form() {
    let cfg = ModelConfig {
        k: 1,
        d: 1,
        markov_order: 1,
        t_ic: 1,
        prior: PriorKind::Standard,
        ..small()
    };
    let mut m = SsmVae::new(cfg).unwrap();
    let Transitions::Decomposed(heads) = m.transitions.clone() else {
        panic!("decomposed")
    };
    let a = 1.1;
    set_linear_mlp(&mut m.store, &heads[0], &[a, 1.0]);
    let decoder = m.decoder.clone();
    set_linear_mlp(&mut m.store, &decoder, &[1.0]);
    let hist = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
    let n = 20000;
    let r = m.rollout(&hist, &[0], 6, n, 1.0, 3).unwrap();
    for h in 0..6 {
        // z_h = a^{h+1} z_0 + Σ_j a^{h-j} s_j.
        let var: f64 = (0..=h).map(|j| a.powi(2 * j as i32)).sum();
        let mean = a.powi(h as i32 + 1) * 0.5;
        let (m_hat, s_hat) = (r.mean.data()[h], r.std.data()[h]);
        let se = var.sqrt() / (n as f64).sqrt();
        assert!((m_hat - mean).abs() < 4.0 * se, "step {h}: mean {m_hat} vs {mean}");
        assert!((s_hat / var.sqrt() - 1.0).abs() < 0.03, "step {h}: std {s_hat} vs {}", var.sqrt());
    }
    // The spread expands with the horizon.
    assert!(r.std.data().windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut m = SsmVae::with_flow_init(small(), FlowInit::Random).unwrap();
    m.standardizer.mean = vec![0.1, 0.2, 0.3];
    m.save(&path).unwrap();
    let back = SsmVae::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.standardizer, m.standardizer);
    assert!(back.store.iter().zip(m.store.iter()).all(|((_, p), (_, q))| p.value == q.value));
    let x = observations(7, 3, 6, 3);
    assert_eq!(
        back.posterior_means(&x, &[0, 1, 2]).unwrap().z,
        m.posterior_means(&x, &[0, 1, 2]).unwrap().z
    );
    std::fs::write(&path, b"garbage").unwrap();
    assert!(SsmVae::load(&path).is_err());
}

#[test]
fn elbo_gradients_are_exact_and_reach_every_group() {
    let m = SsmVae::with_flow_init(small(), FlowInit::Random).unwrap();
    let x = observations(8, 3, 6, 3);
    let env = vec![0, 2, 3];
    let loss = |g: &Graph| {
        let tr = m.filter_forward(g, &x, &env, Sampling::Random(&mut rng(11)))?;
        elbo(&m, g, &tr, &x, &env, 1.0)?.loss(g)
    };
    let opts = GradCheckOptions {
        tol: 1e-4,
        max_coords_per_input: Some(8),
        ..GradCheckOptions::default()
    };
    let rep = gradient_check(&m.store, &[], &opts, |g, _| loss(g)).unwrap();
    assert!(rep.passed, "{rep:?}");
    let tape = Tape::new();
    let g = Graph::new(&tape, &m.store);
    let grads = g.backward(loss(&g).unwrap()).unwrap();
    for group in groups::ALL {
        assert!(grads.group_norm(&m.store, group) > 0.0, "no gradient reaches {group}");
    }
}
