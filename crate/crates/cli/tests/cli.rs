use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nlden::noise::{NoisePoint, NoiseProfile};
use nlden::Tensor;
use serde_json::Value;

fn nlden(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlden"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_profile(dir: &Path, name: &str, a: f64, b: f64) -> PathBuf {
    let path = dir.join(format!("{name}.json"));
    NoiseProfile::new(name, vec![NoisePoint { iso: 100.0, a, b }])
        .unwrap()
        .save(&path)
        .unwrap();
    path
}

fn synth(clean: &Path, profile: &Path, iso: &str, seed: &str, out: &Path) -> Output {
    nlden(&[
        "synth", "--clean", p(clean), "--profile", p(profile), "--iso", iso, "--seed", seed, "--out", p(out),
    ])
}

#[test]
fn help_succeeds_and_bad_usage_exits_1() {
    let help = nlden(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.contains("estimate-noise") && text.contains("Exit codes"));
    assert_eq!(nlden(&["psnr", "--bogus"]).status.code(), Some(1));
    assert_eq!(nlden(&[]).status.code(), Some(1));
}

#[test]
fn grad_check_passes_on_the_micro_network() {
    let out = nlden(&["grad-check", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v = json(&out);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(v["cases"].as_array().unwrap().iter().any(|c| c["name"] == "network"));
}

#[test]
fn corrupted_backward_exits_3() {
    let out = nlden(&["grad-check", "--skip-network", "--inject-fault", "1.5"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out)["passed"], false);
}

#[test]
fn missing_config_exits_1() {
    let out = nlden(&["grad-check", "--config", "/nonexistent/net.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_input_exits_2() {
    let out = nlden(&["estimate-noise", "--noisy", "/nonexistent/x.ntf"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn psnr_of_identical_tensors_is_capped() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.ntf");
    Tensor::from_fn(&[1, 4, 6, 6], |i| (i % 7) as f32 / 7.0).save(&x).unwrap();
    let v = json(&nlden(&["psnr", "--a", p(&x), "--b", p(&x)]));
    assert!(v["psnr_db"].as_f64().unwrap() >= 99.0);
}

#[test]
fn params_is_positive_and_stable() {
    let a = json(&nlden(&["params"]));
    let b = json(&nlden(&["params"]));
    assert!(a["params"].as_u64().unwrap() > 0);
    assert_eq!(a, b);
}

#[test]
fn synth_then_paired_estimate_recovers_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean.ntf");
    Tensor::from_fn(&[1, 1, 1000, 1000], |i| i as f32 / 999_999.0).save(&clean).unwrap();
    let profile = write_profile(dir.path(), "cam", 0.01, 1e-4);
    let noisy = dir.path().join("noisy.ntf");
    let s = synth(&clean, &profile, "100", "5", &noisy);
    assert_eq!(s.status.code(), Some(0), "{}", stderr(&s));
    let fitted = dir.path().join("fitted.json");
    let out = nlden(&[
        "estimate-noise", "--noisy", p(&noisy), "--clean", p(&clean), "--bins", "16", "--out", p(&fitted),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v = json(&out);
    let a = v["fit"]["a"].as_f64().unwrap();
    let b = v["fit"]["b"].as_f64().unwrap();
    assert!((a / 0.01 - 1.0).abs() < 0.05, "a = {a}");
    assert!((b / 1e-4 - 1.0).abs() < 0.2, "b = {b}");
    let back = NoiseProfile::load(&fitted).unwrap();
    assert_eq!(back.points[0].a, a);
}

#[test]
fn single_image_estimate_on_flat_field() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("field.ntf");
    Tensor::full(&[1, 4, 128, 128], 0.5f32).save(&clean).unwrap();
    let sigma: f64 = 20.0 / 255.0;
    let profile = write_profile(dir.path(), "flat", 0.0, sigma * sigma);
    let noisy = dir.path().join("noisy.ntf");
    assert_eq!(synth(&clean, &profile, "100", "1", &noisy).status.code(), Some(0));
    let v = json(&nlden(&["estimate-noise", "--noisy", p(&noisy)]));
    assert_eq!(v["method"], "single_image");
    let b = v["fit"]["b"].as_f64().unwrap();
    assert!((b / (sigma * sigma) - 1.0).abs() < 0.2, "b = {b}");
    assert!(v["fit"]["a"].as_f64().unwrap().abs() < 1e-3);
}

#[test]
fn synth_is_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("c.ntf");
    Tensor::full(&[1, 4, 8, 8], 0.3f32).save(&clean).unwrap();
    let profile = write_profile(dir.path(), "cam", 0.01, 1e-4);
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert_eq!(synth(&clean, &profile, "100", "9", &out).status.code(), Some(0));
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.ntf"), run("b.ntf"));
    let s = synth(&clean, &profile, "800", "0", &dir.path().join("x.ntf"));
    assert_eq!(s.status.code(), Some(1), "ISO outside the profile range");
}

#[test]
fn train_resume_and_denoise_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    for (i, t) in nlden::train::synthetic_textures(3, 4, 24, 24, 4).into_iter().enumerate() {
        t.save(data.join(format!("img{i}.ntf"))).unwrap();
    }
    let profile = write_profile(dir.path(), "cam", 0.002, 1e-4);
    let cfg = dir.path().join("train.json");
    std::fs::write(
        &cfg,
        r#"{"crop_size": 16, "batch_size": 2, "total_steps": 4, "lr_start": 1e-3, "seed": 2,
            "checkpoint_interval": 2,
            "network": {"scales": 2, "k_per_scale": [2, 2], "c_per_scale": [4, 8], "search_radius": 2.0}}"#,
    )
    .unwrap();
    let train = |out: &Path, resume: Option<&Path>| {
        let mut args = vec![
            "train", "--config", p(&cfg), "--data", p(&data), "--profiles", p(&profile), "--out", p(out),
        ];
        if let Some(r) = resume {
            args.extend(["--resume", p(r)]);
        }
        nlden(&args)
    };
    let out = dir.path().join("run");
    let t = train(&out, None);
    assert_eq!(t.status.code(), Some(0), "{}", stderr(&t));
    assert_eq!(json(&t)["final_step"], 4);
    assert!(out.join("step_2/manifest.json").is_file());
    assert!(out.join("step_4/rng.json").is_file());
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["step"].is_u64() && v["lr"].is_f64() && v["loss"].is_f64());
    }

    // Resuming from step 2 reproduces the rest of the log and the final weights.
    let out2 = dir.path().join("resumed");
    let r = train(&out2, Some(&out.join("step_2")));
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let resumed = std::fs::read_to_string(out2.join("train.log")).unwrap();
    assert_eq!(resumed.lines().collect::<Vec<_>>(), log.lines().skip(2).collect::<Vec<_>>());
    let w = "params/head.weight.ntf";
    assert_eq!(
        std::fs::read(out.join("step_4").join(w)).unwrap(),
        std::fs::read(out2.join("step_4").join(w)).unwrap()
    );

    let noisy = dir.path().join("noisy.ntf");
    Tensor::from_fn(&[1, 4, 13, 10], |i| (i % 11) as f32 / 11.0).save(&noisy).unwrap();
    let den = dir.path().join("den.ntf");
    let ckpt = out.join("step_4");
    let d = nlden(&[
        "denoise", "--noisy", p(&noisy), "--checkpoint", p(&ckpt), "--a", "0.002", "--b", "1e-4", "--out", p(&den),
    ]);
    assert_eq!(d.status.code(), Some(0), "{}", stderr(&d));
    assert_eq!(json(&d)["padded_to"], serde_json::json!([14, 10]));
    let y = Tensor::load(&den).unwrap();
    assert_eq!(y.shape(), &[1, 4, 13, 10]);
    assert!(y.all_finite());
    let both = nlden(&[
        "denoise", "--noisy", p(&noisy), "--checkpoint", p(&ckpt), "--a", "0.1", "--b", "0.1", "--profile",
        p(&profile), "--iso", "100", "--out", p(&den),
    ]);
    assert_eq!(both.status.code(), Some(1));
}
