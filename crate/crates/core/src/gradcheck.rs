//! Finite-difference verification of the analytic gradients.
//!
//! Every case is evaluated in `f64`. Non-scalar outputs are reduced with a
//! fixed random projection `Σ out ⊙ R`. Each input element is perturbed by
//! `±h` and the central difference is compared with the tape gradient.
//! Perturbations that move any branch decision (activation sign, sampling
//! cell, clamp, L1 sign) are skipped, so kink neighbourhoods are excluded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::kernels::ConvSpec;
use crate::network::{Denoiser, NetworkConfig};
use crate::nlfemf::{Matching, NlfemfBlock, NlfemfConfig};
use crate::nn::{self, Bound, ConvNeXtBlock, Module, ParamStore};
use crate::tape::{Fault, Tape, Var};
use crate::tensor::Tensor;

pub type Builder = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync;

/// A differentiable function of named inputs.
pub struct Case {
    pub name: String,
    pub inputs: Vec<(String, Tensor<f64>)>,
    pub build: Box<Builder>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_err: f64,
    pub groups: Vec<GroupReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub cases: Vec<CaseReport>,
}

fn evaluate(
    case: &Case,
    inputs: &[Tensor<f64>],
    projection: Option<&Tensor<f64>>,
    leaves: bool,
) -> Result<(Tape<f64>, Var, Vec<Var>)> {
    let mut tape = Tape::<f64>::new();
    tape.track_kinks();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if leaves {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = match projection {
        Some(r) => {
            let rv = tape.constant(r.clone());
            let prod = tape.mul(out, rv)?;
            tape.sum(prod)
        }
        None => out,
    };
    Ok((tape, loss, vars))
}

pub fn check_case(case: &Case, opts: &GradCheckOptions) -> Result<CaseReport> {
    let inputs: Vec<Tensor<f64>> = case.inputs.iter().map(|(_, t)| t.clone()).collect();
    let probe = evaluate(case, &inputs, None, false)?;
    let out_shape = probe.0.value(probe.1).shape().to_vec();
    let projection = if out_shape.iter().product::<usize>() == 1 {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
        Some(Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0)))
    };
    drop(probe);

    let (mut tape, loss, vars) = evaluate(case, &inputs, projection.as_ref(), true)?;
    if let Some(f) = opts.fault {
        tape.inject_fault(f);
    }
    let base_sig = tape.kink_signature();
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let h = opts.step;
    let results: Vec<Result<Option<f64>>> = exec::map_indices(coords.len(), |n| {
        let (i, j) = coords[n];
        let mut xs = inputs.clone();
        let x0 = xs[i].data()[j];
        let mut side = |delta: f64| -> Result<(f64, Option<u64>)> {
            xs[i].data_mut()[j] = x0 + delta;
            let (t, l, _) = evaluate(case, &xs, projection.as_ref(), false)?;
            Ok((t.value(l).data()[0], t.kink_signature()))
        };
        let (fp, sp) = side(h)?;
        let (fm, sm) = side(-h)?;
        if sp != base_sig || sm != base_sig {
            return Ok(None);
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i].data()[j];
        let denom = a.abs().max(numeric.abs()).max(opts.floor);
        Ok(Some((a - numeric).abs() / denom))
    });

    let mut groups: Vec<GroupReport> = case
        .inputs
        .iter()
        .map(|(name, _)| GroupReport {
            name: name.clone(),
            max_rel_err: 0.0,
            checked: 0,
            skipped_kinks: 0,
        })
        .collect();
    for (&(i, _), r) in coords.iter().zip(results) {
        match r? {
            Some(e) => {
                let g = &mut groups[i];
                g.checked += 1;
                g.max_rel_err = g.max_rel_err.max(e);
            }
            None => groups[i].skipped_kinks += 1,
        }
    }
    for g in &groups {
        if g.checked == 0 && g.skipped_kinks > 0 {
            return Err(Error::Numerical(format!(
                "{}: every coordinate of {} sits on a kink",
                case.name, g.name
            )));
        }
    }
    Ok(CaseReport {
        name: case.name.clone(),
        max_rel_err: groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max),
        groups,
    })
}

pub fn run_suite(cases: &[Case], opts: &GradCheckOptions) -> Result<SuiteReport> {
    let reports = cases
        .iter()
        .map(|c| check_case(c, opts))
        .collect::<Result<Vec<_>>>()?;
    let max = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(SuiteReport {
        tolerance: opts.tolerance,
        max_rel_err: max,
        passed: max < opts.tolerance,
        cases: reports,
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Kaiming initialisation, then random biases and random weights for the
/// zero-initialised layers, so that no sampling position sits on the
/// integer grid and no activation is exactly at zero.
pub fn randomized_params(module: &dyn Module, seed: u64) -> Result<ParamStore> {
    let mut store = nn::init_module(module, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut zeroed = Vec::new();
    module.visit_convs(&mut |c| {
        if c.zero_init {
            zeroed.push((c.weight_name(), 1.0 / ((c.cin / c.groups * c.kernel * c.kernel) as f64).sqrt()));
        }
    });
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let p = store.get_mut(&name).expect("listed name");
        let bound = if name.ends_with(".bias") {
            Some(0.1)
        } else {
            zeroed.iter().find(|(n, _)| *n == name).map(|(_, b)| *b)
        };
        if let Some(b) = bound {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-b..b) as f32);
        }
    }
    Ok(store)
}

fn module_case<M>(name: &str, module: M, store: &ParamStore, input: Tensor<f64>) -> Case
where
    M: Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var> + Send + Sync + 'static,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut inputs = vec![("input".to_string(), input)];
    inputs.extend(store.iter().map(|(n, p)| (n.to_string(), p.value.cast::<f64>())));
    Case {
        name: name.into(),
        inputs,
        build: Box::new(move |tape, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
            module(tape, &bound, v[0])
        }),
    }
}

/// One case per primitive and per composite layer.
pub fn layer_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let conv = |name: &str, x: &[usize], w: &[usize], spec: ConvSpec, rng: &mut ChaCha8Rng| Case {
        name: name.into(),
        inputs: vec![
            ("x".into(), uniform(x, -1.0, 1.0, rng)),
            ("weight".into(), uniform(w, -0.5, 0.5, rng)),
            ("bias".into(), uniform(&[w[0]], -0.5, 0.5, rng)),
        ],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)),
    };
    cases.push(conv("conv2d", &[2, 3, 5, 5], &[4, 3, 3, 3], ConvSpec::new(1, 1, 1), &mut rng));
    cases.push(conv("conv2d_grouped", &[1, 4, 5, 4], &[6, 2, 3, 3], ConvSpec::new(1, 1, 2), &mut rng));
    cases.push(conv("conv2d_depthwise", &[1, 3, 4, 4], &[3, 1, 3, 3], ConvSpec::new(1, 1, 3), &mut rng));
    cases.push(conv("conv2d_strided", &[1, 3, 6, 6], &[2, 3, 2, 2], ConvSpec::new(2, 0, 1), &mut rng));
    cases.push(Case {
        name: "conv_transpose2d".into(),
        inputs: vec![
            ("x".into(), uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng)),
            ("weight".into(), uniform(&[3, 2, 2, 2], -0.5, 0.5, &mut rng)),
            ("bias".into(), uniform(&[2], -0.5, 0.5, &mut rng)),
        ],
        build: Box::new(|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2)),
    });
    cases.push(Case {
        name: "grid_sample".into(),
        inputs: vec![
            ("features".into(), uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng)),
            ("coords".into(), uniform(&[1, 2, 5, 5], -0.7, 4.7, &mut rng)),
        ],
        build: Box::new(|t, v| t.grid_sample_bilinear(v[0], v[1])),
    });
    cases.push(Case {
        name: "gather_neighbors".into(),
        inputs: vec![
            ("features".into(), uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut rng)),
            ("offsets".into(), uniform(&[2, 6, 5, 5], -2.5, 2.5, &mut rng)),
        ],
        build: Box::new(|t, v| t.gather_neighbors(v[0], v[1])),
    });
    cases.push(Case {
        name: "activations".into(),
        inputs: vec![("x".into(), uniform(&[1, 2, 4, 4], -3.0, 3.0, &mut rng))],
        build: Box::new(|t, v| {
            let a = t.leaky_relu(v[0], 0.1);
            let b = t.relu(v[0]);
            let c = t.sigmoid(v[0]);
            let d = t.tanh_scaled(v[0], 2.5);
            let e = t.gelu(v[0]);
            let cat = t.concat_channels(&[a, b, c, d, e])?;
            Ok(t.scale(cat, 0.5))
        }),
    });
    cases.push(Case {
        name: "elementwise".into(),
        inputs: vec![
            ("a".into(), uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng)),
            ("b".into(), uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng)),
        ],
        build: Box::new(|t, v| {
            let p = t.mul(v[0], v[1])?;
            let s = t.add(p, v[0])?;
            let m = t.mean(s);
            let cat = t.concat_channels(&[s, v[1]])?;
            let tot = t.sum(cat);
            let r = t.add(m, tot)?;
            Ok(t.scale(r, 0.3))
        }),
    });
    let target = uniform(&[1, 2, 4, 4], 0.0, 1.0, &mut rng);
    cases.push(Case {
        name: "l1_loss".into(),
        inputs: vec![("pred".into(), uniform(&[1, 2, 4, 4], 0.0, 1.0, &mut rng))],
        build: Box::new(move |t, v| {
            let tv = t.constant(target.clone());
            t.l1_loss(v[0], tv)
        }),
    });

    let cnx = ConvNeXtBlock::new("cnx", 3);
    let store = randomized_params(&cnx, seed)?;
    cases.push(module_case(
        "convnext",
        move |t, p, x| cnx.forward(t, p, x),
        &store,
        uniform(&[1, 3, 6, 6], -1.0, 1.0, &mut rng),
    ));

    for matching in [Matching::LearnedOffsets, Matching::LocalWindow] {
        let cfg = NlfemfConfig {
            matching,
            ..NlfemfConfig::new(2, 3, 2.0)
        };
        let block = NlfemfBlock::new("nl", cfg)?;
        let store = randomized_params(&block, seed)?;
        let name = match matching {
            Matching::LearnedOffsets => "nlfemf_learned",
            Matching::LocalWindow => "nlfemf_local_window",
        };
        cases.push(module_case(
            name,
            move |t, p, x| block.forward(t, p, x),
            &store,
            uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng),
        ));
    }
    Ok(cases)
}

/// The full network on one `1×4×H×W` packed input with a noise map; every
/// parameter tensor plus both inputs is a separate group.
pub fn network_case(cfg: &NetworkConfig, size: usize, seed: u64) -> Result<Case> {
    let net = Denoiser::new(cfg)?;
    let store = randomized_params(&net, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let c = cfg.out_channels();
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut inputs = vec![
        ("noisy".to_string(), uniform(&[1, c, size, size], 0.0, 1.0, &mut rng)),
        (
            "noise_map".to_string(),
            uniform(&[1, cfg.noise_map_channels(), size, size], 0.01, 0.1, &mut rng),
        ),
    ];
    inputs.extend(store.iter().map(|(n, p)| (n.to_string(), p.value.cast::<f64>())));
    Ok(Case {
        name: "network".into(),
        inputs,
        build: Box::new(move |tape, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v[2..].iter().copied()));
            net.forward(tape, &bound, v[0], v[1])
        }),
    })
}

/// Layer cases plus the micro network (`8×8` packed input).
pub fn full_suite(seed: u64) -> Result<Vec<Case>> {
    let mut cases = layer_cases(seed)?;
    cases.push(network_case(&NetworkConfig::micro(), 8, seed)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_backward_is_detected() {
        let cases = layer_cases(1).unwrap();
        let conv = cases.iter().find(|c| c.name == "conv2d").unwrap();
        let opts = GradCheckOptions {
            fault: Some(Fault::ScaleConvWeightGrad(1.01)),
            ..Default::default()
        };
        let r = check_case(conv, &opts).unwrap();
        assert!(r.max_rel_err > 1e-3, "{r:?}");
        let clean = check_case(conv, &GradCheckOptions::default()).unwrap();
        assert!(clean.max_rel_err < 1e-6, "{clean:?}");
    }
}
