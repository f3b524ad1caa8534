use latentdyn::world::{
    check_sufficient_variability, dataset_from_bytes, dataset_to_bytes, load_dataset, save_dataset, SequenceBatch,
    Standardizer, VariabilityMode, World, WorldConfig, DATASET_MAGIC,
};
use latentdyn::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn small(seed: u64) -> WorldConfig {
    WorldConfig {
        seed,
        ..WorldConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_worlds() {
    let a = World::build(&small(3)).unwrap();
    let b = World::build(&small(3)).unwrap();
    assert_eq!(a, b);
    let c = World::build(&small(4)).unwrap();
    assert_ne!(a.g, c.g);
    let da = a.simulate(1, 5, 9).unwrap();
    let db = b.simulate(1, 5, 9).unwrap();
    assert_eq!(da, db);
}

#[test]
fn default_world_has_expected_widths() {
    let w = World::build(&WorldConfig::default()).unwrap();
    for layer in &w.g.layers {
        assert_eq!((layer.out, layer.inp), (8, 8));
    }
    assert_eq!(w.heads.len(), 8);
    assert_eq!(w.head_input_width(), 17);
}

#[test]
fn observation_layers_are_well_conditioned_on_fifty_seeds() {
    for seed in 0..50 {
        let w = World::build(&small(seed)).unwrap();
        for layer in &w.g.layers {
            // σ_min² is the smallest eigenvalue of WᵀW.
            let m = DMatrix::from_row_slice(layer.out, layer.inp, &layer.w);
            let gram = m.transpose() * &m;
            let min_eig = gram.symmetric_eigen().eigenvalues.min();
            assert!(min_eig.sqrt() > 0.1, "seed {seed}: {}", min_eig.sqrt());
            assert!((layer.min_singular_value() - min_eig.sqrt()).abs() < 1e-9);
        }
    }
}

#[test]
fn simulate_shapes() {
    let w = World::build(&WorldConfig::default()).unwrap();
    let b = w.simulate(0, 10, 1).unwrap();
    assert_eq!(b.x.shape(), &[10, 14, 8]);
    assert_eq!(b.z_true.as_ref().unwrap().shape(), &[10, 16, 8]);
    assert_eq!(b.s_true.as_ref().unwrap().shape(), &[10, 14, 8]);
    assert_eq!(b.env, vec![0; 10]);
    assert_eq!((b.t0, b.t_dyn, b.t_future), (2, 4, 8));
    assert!(matches!(w.simulate(20, 1, 0), Err(Error::Domain { .. })));
}

#[test]
fn noise_sample_mean_matches_environment_mean() {
    let w = World::build(&small(5)).unwrap();
    let env = 3;
    let b = w.simulate(env, 7143, 2).unwrap();
    let s = b.s_true.as_ref().unwrap().data();
    let n = (s.len() / 8) as f64;
    for k in 0..8 {
        let mean = s.iter().skip(k).step_by(8).sum::<f64>() / n;
        let tol = 4.0 * w.sigma(env, k) / n.sqrt();
        assert!((mean - w.mu(env, k)).abs() < tol, "k={k}: {mean} vs {}", w.mu(env, k));
    }
}

#[test]
fn stored_triples_are_self_consistent() {
    let w = World::build(&small(6)).unwrap();
    let b = w.simulate_split(3, 4).unwrap();
    for i in 0..b.len() {
        for t in 0..b.seq_len() {
            let z = b.z_frame(i, t).unwrap();
            let next = w.transition(b.z_history(i, t).unwrap(), b.s_frame(i, t).unwrap());
            assert_eq!(next.as_slice(), z);
            assert_eq!(w.observe(z).as_slice(), b.frame(i, t));
            let s = w.invert_transition(b.z_history(i, t).unwrap(), z);
            for (a, e) in s.iter().zip(b.s_frame(i, t).unwrap()) {
                assert!((a - e).abs() < 1e-9 * (1.0 + e.abs()));
            }
        }
    }
}

#[test]
fn observation_map_separates_points() {
    let w = World::build(&small(7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z2: Vec<f64> = z.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        let dz = z.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let (x, x2) = (w.observe(&z), w.observe(&z2));
        let dx = x.iter().zip(&x2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dx >= 1e-6 * dz, "gap {dx} for separation {dz}");
    }
}

#[test]
fn heads_increase_strictly_in_their_noise() {
    let w = World::build(&small(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let hist: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut s = vec![0.0; 8];
        let mut prev = vec![f64::NEG_INFINITY; 8];
        for step in 0..1000 {
            let v = -5.0 + 10.0 * step as f64 / 999.0;
            s.iter_mut().for_each(|x| *x = v);
            let z = w.transition(&hist, &s);
            for k in 0..8 {
                assert!(z[k] > prev[k]);
                assert!(w.noise_derivative(k, &hist, v) > 0.0);
            }
            prev = z;
        }
    }
}

#[test]
fn environments_differ_in_every_dimension() {
    let w = World::build(&WorldConfig::default()).unwrap();
    for k in 0..8 {
        let any = (0..20).any(|a| {
            (0..20).any(|b| {
                (w.mu(a, k) - w.mu(b, k)).abs() > 0.1 || (w.sigma(a, k) - w.sigma(b, k)).abs() > 0.1
            })
        });
        assert!(any, "dimension {k} is stationary");
    }
}

#[test]
fn trajectories_stay_bounded() {
    let w = World::build(&WorldConfig::default()).unwrap();
    let b = w.simulate_split(20, 3).unwrap();
    let z = b.z_true.as_ref().unwrap().data();
    let max = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max < 50.0, "max |z| = {max}");
    let late: Vec<f64> = (0..b.len()).flat_map(|i| b.z_frame(i, 13).unwrap().to_vec()).collect();
    let var = late.iter().map(|v| v * v).sum::<f64>() / late.len() as f64;
    assert!(var > 0.05 && var < 100.0, "late second moment {var}");
}

#[test]
fn shared_noise_world_fails_the_diagnostic() {
    let cfg = WorldConfig {
        shared_noise: true,
        ..WorldConfig::default()
    };
    let w = World::build(&cfg).unwrap();
    for mode in [VariabilityMode::Noise, VariabilityMode::Latent] {
        let rep = check_sufficient_variability(&w, mode, 5, 0).unwrap();
        assert!(!rep.passed);
        assert!(rep.min_singular_value() < 1e-12);
        for p in &rep.probes {
            assert_eq!((p.matrix.len(), p.matrix[0].len()), (16, 16));
        }
    }
}

#[test]
fn default_worlds_pass_the_diagnostic() {
    for mode in [VariabilityMode::Noise, VariabilityMode::Latent] {
        let passes = (0..50)
            .filter(|&seed| {
                let w = World::build(&small(seed)).unwrap();
                check_sufficient_variability(&w, mode, 5, seed).unwrap().passed
            })
            .count();
        assert!(passes >= 45, "{mode:?}: {passes}/50");
    }
}

/// 2×2 case worked by hand: rows are differences of
/// `(-(s-μ)/σ², -1/σ²)` between consecutive environments.
#[test]
fn one_dimensional_diagnostic_matches_hand_determinant() {
    let cfg = WorldConfig {
        k: 1,
        envs: 3,
        markov_order: 1,
        t0: 1,
        ..WorldConfig::default()
    };
    let mut w = World::build(&cfg).unwrap();
    w.noise_mu = vec![0.0, 0.5, -0.5];
    w.noise_sigma = vec![1.0, 0.5, 1.5];
    let rep = check_sufficient_variability(&w, VariabilityMode::Noise, 1, 0).unwrap();
    let p = &rep.probes[0];
    let s = p.s[0];
    let v = |mu: f64, sd: f64| (-(s - mu) / (sd * sd), -1.0 / (sd * sd));
    let (a0, b0) = v(0.0, 1.0);
    let (a1, b1) = v(0.5, 0.5);
    let (a2, b2) = v(-0.5, 1.5);
    let m = [[a1 - a0, b1 - b0], [a2 - a1, b2 - b1]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((p.matrix[i][j] - m[i][j]).abs() < 1e-12);
        }
    }
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let frob2: f64 = m.iter().flatten().map(|x| x * x).sum();
    // σ_min² is the smaller root of λ² − ‖M‖²_F λ + det² = 0.
    let smin = ((frob2 - (frob2 * frob2 - 4.0 * det * det).sqrt()) / 2.0).sqrt();
    assert!((p.min_singular_value - smin).abs() < 1e-9);
    assert!(det.abs() > 1e-3 && rep.passed);
}

#[test]
fn diagnostic_needs_enough_environments() {
    let cfg = WorldConfig {
        envs: 16,
        ..WorldConfig::default()
    };
    let w = World::build(&cfg).unwrap();
    let err = check_sufficient_variability(&w, VariabilityMode::Noise, 1, 0).unwrap_err();
    assert!(matches!(err, Error::InsufficientEnvironments { needed: 17, available: 16 }));
}

#[test]
fn latent_mode_rescales_by_transition_slope() {
    let w = World::build(&small(2)).unwrap();
    let noise = check_sufficient_variability(&w, VariabilityMode::Noise, 3, 1).unwrap();
    let latent = check_sufficient_variability(&w, VariabilityMode::Latent, 3, 1).unwrap();
    // Same probe stream draws s first, so the noise points agree.
    assert_eq!(noise.probes[0].s, latent.probes[0].s);
    let ratio = latent.probes[0].matrix[0][0] / noise.probes[0].matrix[0][0];
    let ratio2 = latent.probes[0].matrix[0][8] / noise.probes[0].matrix[0][8];
    assert!((ratio2 - ratio * ratio).abs() < 1e-9 * ratio2.abs());
}

fn sample_batch(seed: u64) -> SequenceBatch {
    let cfg = WorldConfig {
        k: 3,
        envs: 4,
        seed,
        ..WorldConfig::default()
    };
    World::build(&cfg).unwrap().simulate_split(2, seed).unwrap()
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/train.bin");
    let b = sample_batch(1);
    save_dataset(&b, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(b, back);
    for (x, y) in b.x.data().iter().zip(back.x.data()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn dataset_header_matches_payload() {
    let b = sample_batch(2);
    let bytes = dataset_to_bytes(&b).unwrap();
    assert_eq!(&bytes[..8], DATASET_MAGIC);
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    let (n, t, k, l) = (8usize, 14usize, 3usize, 2usize);
    assert_eq!(header["k"], 3);
    assert_eq!(header["n"], 8);
    assert_eq!(header["markov_order"], 2);
    assert_eq!(header["t0"].as_u64().unwrap() + header["t_dyn"].as_u64().unwrap() + header["t_future"].as_u64().unwrap(), 14);
    assert_eq!(bytes.len(), 16 + hlen + 8 * (n * t * k + n * (t + l) * k + n * t * k + n));
}

#[test]
fn dataset_rejects_bad_files() {
    let b = sample_batch(3);
    let mut bytes = dataset_to_bytes(&b).unwrap();
    let p = Path::new("x.bin");
    assert!(dataset_from_bytes(&bytes[..bytes.len() - 8], p).is_err());
    bytes[0] = b'X';
    assert!(matches!(dataset_from_bytes(&bytes, p), Err(Error::Format { .. })));
    assert!(matches!(dataset_from_bytes(b"SSMDATA1", p), Err(Error::Format { .. })));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(&dir.path().join("missing.bin")), Err(Error::Io { .. })));
}

#[test]
fn world_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.ckpt");
    let w = World::build(&small(11)).unwrap();
    w.save(&path).unwrap();
    assert_eq!(World::load(&path).unwrap(), w);
}

#[test]
fn standardizer_whitens_each_dimension() {
    let w = World::build(&small(12)).unwrap();
    let b = w.simulate_split(10, 0).unwrap();
    let st = Standardizer::fit(&b).unwrap();
    let z = st.apply(&b);
    let again = Standardizer::fit(&z).unwrap();
    for k in 0..8 {
        assert!(again.mean[k].abs() < 1e-10);
        assert!((again.std[k] - 1.0).abs() < 1e-10);
    }
    assert_eq!(st.transform_row(b.frame(3, 4)), z.frame(3, 4));
}

#[test]
fn linear_gaussian_world_is_an_ar1_process() {
    let cfg = WorldConfig {
        k: 2,
        envs: 2,
        ..WorldConfig::default()
    };
    let w = World::linear_gaussian(&cfg, 0.5, 0.8).unwrap();
    let b = w.simulate(1, 4, 0).unwrap();
    for i in 0..4 {
        for t in 0..14 {
            let prev = b.z_history(i, t).unwrap();
            let z = b.z_frame(i, t).unwrap();
            let s = b.s_frame(i, t).unwrap();
            for k in 0..2 {
                assert!((z[k] - (0.5 * prev[2 + k] + 0.8 * s[k])).abs() < 1e-12);
            }
            assert_eq!(b.frame(i, t), z);
        }
    }
}

#[test]
fn selection_and_per_env_subsets() {
    let b = sample_batch(4);
    let sub = b.take_per_env(1);
    assert_eq!(sub.env, vec![0, 1, 2, 3]);
    assert_eq!(sub.frame(1, 5), b.frame(2, 5));
    assert_eq!(sub.z_frame(2, 0), b.z_frame(4, 0));
    sub.validate().unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        WorldConfig { k: 0, ..WorldConfig::default() },
        WorldConfig { t0: 1, ..WorldConfig::default() },
        WorldConfig { sigma_range: (0.0, 1.0), ..WorldConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(World::build(&cfg), Err(Error::Config(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_bytes_round_trip(seed in 0u64..1000, drop_truth in any::<bool>()) {
        let mut b = sample_batch(seed);
        if drop_truth {
            b.z_true = None;
            b.s_true = None;
        }
        let bytes = dataset_to_bytes(&b).unwrap();
        prop_assert_eq!(dataset_from_bytes(&bytes, Path::new("p")).unwrap(), b);
    }
}

#[test]
fn default_observation_layers_are_orthogonal() {
    for seed in 0..5 {
        let w = World::build(&small(seed)).unwrap();
        for d in &w.g.layers {
            let m = DMatrix::from_row_slice(d.out, d.inp, &d.w);
            let gram = &m * m.transpose();
            let err = (gram - DMatrix::identity(d.out, d.out)).abs().max();
            assert!(err < 1e-12, "seed {seed}: |W Wᵀ − I| = {err}");
        }
    }
}

#[test]
fn gaussian_observation_layers_are_available() {
    let cfg = WorldConfig {
        observation_weights: latentdyn::world::ObservationWeights::Gaussian,
        ..small(0)
    };
    let w = World::build(&cfg).unwrap();
    let d = &w.g.layers[0];
    let m = DMatrix::from_row_slice(d.out, d.inp, &d.w);
    assert!((&m * m.transpose() - DMatrix::identity(d.out, d.out)).abs().max() > 0.1);
}
