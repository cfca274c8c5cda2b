use std::collections::HashMap;

use nlden::noise::{
    build_noise_map, estimate_nlf_paired, estimate_nlf_single, sample_poisson_gaussian, sample_training_noise,
    NoisePoint, NoiseProfile,
};
use nlden::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn moments(t: &Tensor) -> (f64, f64) {
    let n = t.len() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn sampler_matches_affine_variance_model() {
    let (a, b) = (0.01, 1e-4);
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for x in [0.0, 0.25, 0.5, 1.0] {
        let noisy = sample_poisson_gaussian(&Tensor::full(&[1, 1, 1000, 1000], x as f32), a, b, &mut rng).unwrap();
        let (mean, var) = moments(&noisy);
        let want = a * x + b;
        assert!((mean - x).abs() < 3.0 * (want / n as f64).sqrt(), "x={x}: mean {mean}");
        assert!((var - want).abs() / want < 0.02, "x={x}: var {var}, want {want}");
    }
}

#[test]
fn zero_coefficients_return_the_clean_signal() {
    let clean = Tensor::from_fn(&[1, 4, 8, 8], |i| (i % 9) as f32 / 9.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample_poisson_gaussian(&clean, 0.0, 0.0, &mut rng).unwrap(), clean);
    assert!(sample_poisson_gaussian(&clean, -1e-3, 0.0, &mut rng).is_err());
}

fn ramp() -> Tensor {
    Tensor::from_fn(&[1, 1, 1000, 1000], |i| i as f32 / 999_999.0)
}

#[test]
fn paired_round_trip_over_coefficient_grid() {
    let clean = ramp();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for a in [0.0, 1e-3, 1e-2] {
        for b in [1e-5, 1e-4, 1e-3] {
            let noisy = sample_poisson_gaussian(&clean, a, b, &mut rng).unwrap();
            let fit = estimate_nlf_paired(&clean, &noisy, 16).unwrap();
            if a > 0.0 {
                assert!((fit.a / a - 1.0).abs() < 0.05, "a={a} b={b}: fitted a {}", fit.a);
            } else {
                assert!(fit.a.abs() < 0.05 * b, "a=0 b={b}: fitted a {}", fit.a);
            }
            // b is identifiable to 20% only where it dominates the variance
            // of the first bin; elsewhere bound the error by that variance
            let first = fit.bins.iter().find(|s| s.inlier).unwrap().mean;
            if b >= a * first {
                assert!((fit.b / b - 1.0).abs() < 0.2, "a={a} b={b}: fitted b {}", fit.b);
            } else {
                assert!((fit.b - b).abs() < 0.2 * (a * first + b), "a={a} b={b}: fitted b {}", fit.b);
            }
        }
    }
}

#[test]
fn paired_round_trip_for_pure_gaussian_noise() {
    let clean = ramp();
    let b = (10.0f64 / 255.0).powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let noisy = sample_poisson_gaussian(&clean, 0.0, b, &mut rng).unwrap();
    let fit = estimate_nlf_paired(&clean, &noisy, 16).unwrap();
    assert!((fit.b / b - 1.0).abs() < 0.1, "{}", fit.b);
    assert!(fit.a.abs() < 0.05 * b, "{}", fit.a);
    // the brightest bin lies above 0.9 of the maximum and is excluded
    assert!(!fit.bins.last().unwrap().inlier);
}

#[test]
fn single_image_flat_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (level, sigma) in [(0.5f32, 20.0f64 / 255.0), (0.2, 5.0 / 255.0), (0.7, 50.0 / 255.0)] {
        let b = sigma * sigma;
        let clean = Tensor::full(&[1, 4, 128, 128], level);
        let noisy = sample_poisson_gaussian(&clean, 0.0, b, &mut rng).unwrap();
        let fit = estimate_nlf_single(&noisy, 16).unwrap();
        assert!((fit.b / b - 1.0).abs() < 0.2, "sigma {sigma}: b {}", fit.b);
        assert_eq!(fit.a, 0.0);
    }
}

/// Smooth ramp with a bright rectangle and a high-frequency patch in one corner.
fn scene() -> Tensor {
    let (h, w) = (256, 256);
    Tensor::from_fn(&[1, 4, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        let mut v = 0.05 + 0.9 * (0.6 * fx + 0.4 * fy);
        if (64..128).contains(&y) && (32..96).contains(&x) {
            v += 0.1;
        }
        if y >= 160 && x >= 140 {
            v += 0.06 * (0.9 * x as f32).sin() * (0.7 * y as f32).cos();
        }
        v.clamp(0.0, 1.0)
    })
}

#[test]
fn single_image_on_texture() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (a, b) = (4e-3, 1e-4);
    let noisy = sample_poisson_gaussian(&scene(), a, b, &mut rng).unwrap();
    let fit = estimate_nlf_single(&noisy, 16).unwrap();
    let centres: Vec<f64> = fit.bins.iter().filter(|s| s.inlier).map(|s| s.mean).collect();
    assert!(centres.len() >= 10);
    for x in centres {
        let (got, want) = (fit.variance_at(x).sqrt(), (a * x + b).sqrt());
        assert!((got / want - 1.0).abs() < 0.25, "x={x}: sigma {got} vs {want}");
    }
}

#[test]
fn single_image_on_noiseless_input() {
    let clean = Tensor::full(&[1, 4, 64, 64], 0.4f32);
    let fit = estimate_nlf_single(&clean, 16).unwrap();
    assert_eq!((fit.a, fit.b), (0.0, 0.0));
}

#[test]
fn log_log_interpolation_example() {
    let p = NoiseProfile::new(
        "cam",
        vec![
            NoisePoint { iso: 100.0, a: 1e-4, b: 1e-6 },
            NoisePoint { iso: 400.0, a: 4e-4, b: 16e-6 },
        ],
    )
    .unwrap();
    // a ∝ ISO and b ∝ ISO² between the points: ISO 200 gives 2·a₁ and 4·b₁
    let (a, b) = p.interpolate_iso(200.0).unwrap();
    assert!((a / 2e-4 - 1.0).abs() < 1e-12);
    assert!((b / 4e-6 - 1.0).abs() < 1e-12);
    let mut last = (0.0, 0.0);
    for i in 0..=60 {
        let iso = 100.0 * 4f64.powf(i as f64 / 60.0);
        let (a, b) = p.interpolate_iso(iso.min(400.0)).unwrap();
        assert!(a >= last.0 && b >= last.1, "not monotone at ISO {iso}");
        last = (a, b);
    }
    assert!(p.interpolate_iso(50.0).is_err());
}

#[test]
fn training_noise_is_balanced_across_sensors() {
    let profiles: Vec<NoiseProfile> = (0..4)
        .map(|i| {
            NoiseProfile::new(
                format!("s{i}"),
                vec![
                    NoisePoint { iso: 100.0, a: 1e-4, b: 1e-6 },
                    NoisePoint { iso: 6400.0, a: 1e-2, b: 1e-3 },
                ],
            )
            .unwrap()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let n = 10_000;
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut below = 0;
    for _ in 0..n {
        let s = sample_training_noise(&profiles, &mut rng).unwrap();
        assert!((100.0..=6400.0).contains(&s.iso));
        *counts.entry(s.sensor_id).or_default() += 1;
        // ISO is log-uniform: half the draws fall below the geometric mean 800
        if s.iso < 800.0 {
            below += 1;
        }
    }
    let expect = n as f64 / 4.0;
    let sd = (n as f64 * 0.25 * 0.75).sqrt();
    for (id, c) in &counts {
        assert!((*c as f64 - expect).abs() < 4.0 * sd, "{id}: {c}");
    }
    assert_eq!(counts.len(), 4);
    assert!((below as f64 - n as f64 / 2.0).abs() < 4.0 * (n as f64 * 0.25).sqrt(), "{below}");
}

#[test]
fn noise_map_is_bounded_below_by_read_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let (a, b) = (0.01, 4e-4);
    let clean = Tensor::from_fn(&[1, 4, 32, 32], |i| (i % 13) as f32 / 13.0);
    let noisy = sample_poisson_gaussian(&clean, a, b, &mut rng).unwrap();
    assert!(noisy.data().iter().any(|&v| v < 0.0));
    let map = build_noise_map(&noisy, a, b).unwrap();
    let floor = (b as f32).sqrt();
    assert!(map.data().iter().all(|&s| s >= floor));
    for (&m, &y) in map.data().iter().zip(noisy.data()) {
        let want = (a * (y as f64).max(0.0) + b).sqrt();
        assert!((m as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn profiles_round_trip_and_reject_bad_points() {
    let dir = tempfile::tempdir().unwrap();
    let p = NoiseProfile::new("cam", vec![NoisePoint { iso: 100.0, a: 1e-3, b: 1e-5 }]).unwrap();
    let path = dir.path().join("cam.json");
    p.save(&path).unwrap();
    assert_eq!(NoiseProfile::load(&path).unwrap(), p);
    assert_eq!(NoiseProfile::load_all(dir.path()).unwrap(), vec![p]);
    assert!(NoiseProfile::new("x", vec![]).is_err());
    assert!(NoiseProfile::new("x", vec![NoisePoint { iso: 100.0, a: 0.0, b: 0.0 }]).is_err());
    let unsorted = vec![
        NoisePoint { iso: 200.0, a: 1e-3, b: 1e-5 },
        NoisePoint { iso: 100.0, a: 1e-3, b: 1e-5 },
    ];
    assert!(NoiseProfile::new("x", unsorted).is_err());
}
