use std::path::Path;

use nlden::exec;
use nlden::network::NetworkConfig;
use nlden::nn::ParamStore;
use nlden::noise::{build_noise_map, NoisePoint, NoiseProfile};
use nlden::raw::{dihedral_transform, Dihedral};
use nlden::train::*;
use nlden::{Error, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_store(theta: f32) -> ParamStore {
    let mut s = ParamStore::new();
    s.register("theta", Tensor::from_vec(&[1], vec![theta]).unwrap()).unwrap();
    s
}

fn set_grad(s: &mut ParamStore, g: f32) {
    s.get_mut("theta").unwrap().grad.data_mut()[0] = g;
}

fn theta(s: &ParamStore) -> f32 {
    s.get("theta").unwrap().value.data()[0]
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    for g in [0.5f32, -3.0, 1e-3] {
        let mut s = scalar_store(1.0);
        set_grad(&mut s, g);
        adam_step(&mut s, 0.1, &AdamConfig::default()).unwrap();
        // bias-corrected m/sqrt(v) is sign(g) on the first step
        let want = 1.0 - 0.1 * g.signum();
        assert!((theta(&s) - want).abs() < 1e-5, "g={g}: {}", theta(&s));
        assert_eq!(s.get("theta").unwrap().grad.data()[0], 0.0);
        assert_eq!(s.adam_steps, 1);
    }
}

#[test]
fn adam_zero_gradient_keeps_params_and_decays_moments() {
    let mut fresh = scalar_store(2.0);
    adam_step(&mut fresh, 0.1, &AdamConfig::default()).unwrap();
    assert_eq!(theta(&fresh), 2.0);

    let cfg = AdamConfig::default();
    let mut s = scalar_store(2.0);
    set_grad(&mut s, 1.0);
    adam_step(&mut s, 0.1, &cfg).unwrap();
    let (m0, v0) = {
        let p = s.get("theta").unwrap();
        (p.m.data()[0], p.v.data()[0])
    };
    adam_step(&mut s, 0.1, &cfg).unwrap();
    let p = s.get("theta").unwrap();
    assert_eq!(p.m.data()[0], (cfg.beta1 * m0 as f64) as f32);
    assert_eq!(p.v.data()[0], (cfg.beta2 * v0 as f64) as f32);
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut s = scalar_store(0.0);
    for _ in 0..100 {
        let t = theta(&s);
        set_grad(&mut s, 2.0 * (t - 3.0));
        adam_step(&mut s, 0.1, &AdamConfig::default()).unwrap();
    }
    assert!((theta(&s) - 3.0).abs() < 0.1, "{}", theta(&s));
}

#[test]
fn adam_is_invariant_to_gradient_scale() {
    let run = |scale: f32| {
        let mut s = scalar_store(0.0);
        for i in 0..10 {
            set_grad(&mut s, scale * (1.0 + (i as f32).sin()));
            adam_step(&mut s, 0.01, &AdamConfig::default()).unwrap();
        }
        theta(&s)
    };
    assert!((run(1.0) - run(1000.0)).abs() < 1e-5);
}

#[test]
fn adam_aborts_on_non_finite_gradient() {
    let mut s = scalar_store(1.0);
    s.register("other", Tensor::ones(&[3])).unwrap();
    s.get_mut("other").unwrap().grad.data_mut()[1] = f32::NAN;
    set_grad(&mut s, 1.0);
    let before = s.clone();
    assert!(matches!(adam_step(&mut s, 0.1, &AdamConfig::default()), Err(Error::Numerical(_))));
    assert_eq!(s.adam_steps, before.adam_steps);
    assert_eq!(theta(&s), theta(&before));
    assert_eq!(s.get("theta").unwrap().m, before.get("theta").unwrap().m);
}

#[test]
fn cosine_schedule_endpoints_and_monotonicity() {
    let t = 1000;
    assert_eq!(cosine_lr(0, t, 1e-4, 5e-7).unwrap(), 1e-4);
    assert_eq!(cosine_lr(t, t, 1e-4, 5e-7).unwrap(), 5e-7);
    assert!((cosine_lr(t / 2, t, 1e-4, 5e-7).unwrap() - (1e-4 + 5e-7) / 2.0).abs() < 1e-18);
    let mut last = f64::INFINITY;
    for s in 0..=t {
        let lr = cosine_lr(s, t, 1e-4, 5e-7).unwrap();
        assert!(lr <= last && lr >= 5e-7);
        last = lr;
    }
    assert!(cosine_lr(t + 1, t, 1e-4, 5e-7).is_err());
}

#[test]
fn l1_gradient_is_sign_over_count() {
    let pred = Tensor::from_fn(&[1, 2, 3, 4], |i| i as f32 / 10.0);
    let target = Tensor::full(&[1, 2, 3, 4], 1.05f32);
    let mut tape = Tape::<f32>::new();
    let p = tape.leaf(pred.clone());
    let t = tape.constant(target.clone());
    let loss = tape.l1_loss(p, t).unwrap();
    assert!((tape.value(loss).data()[0] as f64 - l1_loss(&pred, &target).unwrap()).abs() < 1e-6);
    let g = tape.backward(loss).unwrap();
    let n = pred.len() as f32;
    for (gi, (&x, &y)) in g.get(p).unwrap().data().iter().zip(pred.data().iter().zip(target.data())) {
        assert_eq!(*gi, (x - y).signum() / n);
    }
}

fn profile(a: f64, b: f64) -> NoiseProfile {
    // built directly: a zero-noise profile is valid input to the sampler
    NoiseProfile {
        sensor_id: "cam".into(),
        points: vec![NoisePoint { iso: 100.0, a, b }],
        note: None,
    }
}

fn crop(x: &Tensor, y0: usize, x0: usize, n: usize) -> Tensor {
    let (_, c, _, w) = x.dims4().unwrap();
    let h = x.shape()[2];
    Tensor::from_fn(&[1, c, n, n], |i| {
        let (ch, y, xx) = (i / (n * n), (i / n) % n, i % n);
        x.data()[(ch * h + y0 + y) * w + x0 + xx]
    })
}

#[test]
fn training_sample_without_noise_is_the_clean_crop() {
    let img = Tensor::from_fn(&[1, 4, 40, 36], |i| (i % 97) as f32 / 97.0);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..20 {
        let s = make_training_sample(&img, &[profile(0.0, 0.0)], 16, &mut rng).unwrap().unwrap();
        assert_eq!(s.noisy, s.clean);
        assert!(s.noise_map.data().iter().all(|&v| v == 0.0));
        let r = &s.record;
        let want = dihedral_transform(&crop(&img, r.y, r.x, 16), Dihedral::new(r.dihedral).unwrap()).unwrap();
        assert_eq!(s.clean, want);
    }
    assert!(make_training_sample(&img, &[profile(0.0, 0.0)], 48, &mut rng).unwrap().is_none());
}

#[test]
fn training_sample_noise_map_and_residual_statistics() {
    let (a, b) = (0.01, 1e-4);
    let img = Tensor::full(&[1, 4, 160, 160], 0.5f32);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let s = make_training_sample(&img, &[profile(a, b)], 128, &mut rng).unwrap().unwrap();
    assert_eq!(s.noise_map, build_noise_map(&s.noisy, a, b).unwrap());
    let n = s.noisy.len() as f64;
    let r: Vec<f64> = s.noisy.data().iter().zip(s.clean.data()).map(|(&y, &x)| (y - x) as f64).collect();
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want = a * 0.5 + b;
    assert!((var / want - 1.0).abs() < 0.03, "{var} vs {want}");
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        crop_size: 16,
        batch_size: 2,
        total_steps: 4,
        lr_start: 1e-3,
        seed,
        checkpoint_interval: 2,
        network: NetworkConfig::micro(),
        ..Default::default()
    }
}

fn run_to(out: &Path, seed: u64) -> Vec<StepRecord> {
    let trainer = Trainer::new(tiny_config(seed), synthetic_textures(3, 4, 24, 24, 1), vec![profile(2e-3, 1e-4)]).unwrap();
    let mut state = trainer.init_state().unwrap();
    trainer.run(&mut state, Some(out), |_| {}).unwrap()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn identical_seeds_give_bit_identical_checkpoints() {
    exec::set_parallel(false);
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let ra = run_to(&a, 5);
    let rb = run_to(&b, 5);
    run_to(&c, 6);
    assert_eq!(ra, rb);
    let (ta, tb, tc) = (read_tree(&a), read_tree(&b), read_tree(&c));
    assert!(ta.iter().any(|(n, _)| n.ends_with("rng.json")));
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let records = run_to(&full, 3);
    let (manifest, mut state) = load_checkpoint(&checkpoint_dir(&full, 2)).unwrap();
    assert_eq!((manifest.step, manifest.adam_steps), (2, 2));
    let trainer = Trainer::new(manifest.config, synthetic_textures(3, 4, 24, 24, 1), vec![profile(2e-3, 1e-4)]).unwrap();
    let rest = trainer.run(&mut state, None, |_| {}).unwrap();
    assert_eq!(rest, records[2..]);
    let (_, end) = load_checkpoint(&checkpoint_dir(&full, 4)).unwrap();
    assert_eq!(state.store, end.store);
}

#[test]
fn psnr_and_window_helpers() {
    let x = Tensor::full(&[1, 1, 4, 4], 0.5f32);
    assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
    // MSE 0.01 is 20 dB
    assert!((psnr(&x, &x.map(|v| v + 0.1)).unwrap() - 20.0).abs() < 1e-4);
    let recs: Vec<StepRecord> = (0..10).map(|i| StepRecord { step: i + 1, lr: 0.0, loss: i as f64 }).collect();
    assert_eq!(windowed_losses(&recs, 3), Some((1.0, 8.0)));
    assert_eq!(windowed_losses(&recs, 11), None);
}

#[test]
fn config_validation() {
    assert!(tiny_config(0).validate().is_ok());
    let bad = [
        TrainConfig { crop_size: 15, ..tiny_config(0) },
        TrainConfig { batch_size: 0, ..tiny_config(0) },
        TrainConfig { lr_end: 1.0, ..tiny_config(0) },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
    let small = vec![Tensor::zeros(&[1, 4, 8, 8])];
    assert!(Trainer::new(tiny_config(0), small, vec![profile(1e-3, 0.0)]).is_err());
}
