use nlden::gradcheck::randomized_params;
use nlden::nlfemf::{local_window_offsets, Matching, NlBlock, NlfemfBlock, NlfemfConfig};
use nlden::nn::init_module;
use nlden::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

#[test]
fn identity_configuration_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (c, k) in [(3, 4), (8, 15), (1, 1)] {
        let block = NlfemfBlock::new("b", NlfemfConfig::new(c, k, 9.0)).unwrap();
        let mut store = randomized_params(&block, 5).unwrap();
        block.set_identity(&mut store).unwrap();
        let x = random_input(&[2, c, 11, 9], 1.0, &mut rng);
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, &p, xv).unwrap();
        let err = tape.value(y).max_abs_diff(&x).unwrap();
        assert!(err < 1e-5, "C={c} K={k}: {err}");
    }
}

#[test]
fn identity_nl_block_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let block = NlBlock::new("nl", NlfemfConfig::new(4, 5, 5.0)).unwrap();
    let mut store = randomized_params(&block, 1).unwrap();
    block.set_identity(&mut store).unwrap();
    let x = random_input(&[1, 4, 10, 12], 2.0, &mut rng);
    let mut tape = Tape::<f32>::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, &p, xv).unwrap();
    assert!(tape.value(y).max_abs_diff(&x).unwrap() < 1e-5);
}

#[test]
fn offsets_stay_strictly_inside_search_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let r = 3.0;
    let block = NlfemfBlock::new("b", NlfemfConfig::new(3, 4, r)).unwrap();
    let mut saturated = 0usize;
    for draw in 0..100u64 {
        let mut store = randomized_params(&block, 100 + draw).unwrap();
        // large gains drive tanh into saturation
        let gain = rng.random_range(0.5f32..20.0);
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v *= gain);
        }
        let x = random_input(&[1, 3, 8, 8], rng.random_range(0.1..100.0), &mut rng);
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        let off = block.predict_offsets(&mut tape, &p, xv).unwrap();
        for &o in tape.value(off).data() {
            assert!((o as f64).abs() < r, "draw {draw}: offset {o}");
            if (o as f64).abs() > 0.999 * r {
                saturated += 1;
            }
        }
    }
    assert!(saturated > 0, "no draw probed the saturated regime");
}

#[test]
fn fresh_parameters_give_exactly_zero_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let block = NlfemfBlock::new("b", NlfemfConfig::new(5, 3, 9.0)).unwrap();
    for seed in 0..10 {
        let store = init_module(&block, seed).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(random_input(&[2, 5, 7, 6], 10.0, &mut rng));
        let off = block.predict_offsets(&mut tape, &p, xv).unwrap();
        assert!(tape.value(off).data().iter().all(|&o| o == 0.0));
    }
}

#[test]
fn grouped_transforms_never_mix_feature_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (c, k) = (4, 3);
    let block = NlfemfBlock::new("b", NlfemfConfig::new(c, k, 5.0)).unwrap();
    let store = randomized_params(&block, 3).unwrap();
    let stack = random_input(&[1, c * k, 6, 6], 1.0, &mut rng);
    let run = |s: &Tensor| {
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let sv = tape.constant(s.clone());
        let t = block.transform(&mut tape, &p, sv).unwrap();
        let f = block.collaborative_filter(&mut tape, &p, sv).unwrap();
        (tape.value(t).clone(), tape.value(f).clone())
    };
    let (t0, f0) = run(&stack);
    let plane = 36;
    for ch in 0..c * k {
        let group = ch / k;
        let mut probe = stack.clone();
        for v in &mut probe.data_mut()[ch * plane..(ch + 1) * plane] {
            *v += 0.75;
        }
        let (t1, f1) = run(&probe);
        for out_ch in 0..c * k {
            let a = &t0.data()[out_ch * plane..(out_ch + 1) * plane];
            let b = &t1.data()[out_ch * plane..(out_ch + 1) * plane];
            let fa = &f0.data()[out_ch * plane..(out_ch + 1) * plane];
            let fb = &f1.data()[out_ch * plane..(out_ch + 1) * plane];
            if out_ch / k == group {
                continue;
            }
            assert_eq!(a, b, "transform: channel {ch} leaked into {out_ch}");
            assert_eq!(fa, fb, "filter: channel {ch} leaked into {out_ch}");
        }
        // and the probe does reach its own group
        assert_ne!(
            t0.data()[group * k * plane..(group + 1) * k * plane],
            t1.data()[group * k * plane..(group + 1) * k * plane]
        );
    }
}

#[test]
fn local_window_matching_gathers_fixed_neighbours() {
    let cfg = NlfemfConfig {
        matching: Matching::LocalWindow,
        ..NlfemfConfig::new(2, 9, 9.0)
    };
    let block = NlfemfBlock::new("b", cfg).unwrap();
    let store = init_module(&block, 0).unwrap();
    assert!(store.names().all(|n| !n.contains("offset")));
    let x = Tensor::from_fn(&[1, 2, 5, 5], |i| i as f32);
    let mut tape = Tape::<f32>::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let off = block.predict_offsets(&mut tape, &p, xv).unwrap();
    assert_eq!(tape.value(off), &local_window_offsets::<f32>(9, 1, 5, 5).unwrap());
    let stack = block.gather(&mut tape, xv, off).unwrap();
    // slot c·K + 4 is the centre of the 3×3 window
    let s = tape.value(stack);
    for ch in 0..2 {
        for y in 0..5 {
            for xx in 0..5 {
                assert_eq!(s.at4(0, ch * 9 + 4, y, xx), x.at4(0, ch, y, xx));
            }
        }
    }
    // slot 0 is (-1, -1), clamped at the border
    assert_eq!(s.at4(0, 0, 2, 2), x.at4(0, 0, 1, 1));
    assert_eq!(s.at4(0, 0, 0, 0), x.at4(0, 0, 0, 0));
}
