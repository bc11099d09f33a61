//! Seeded finite-difference cases for every differentiable op and the
//! composed losses. Each case returns the worst relative error it saw.
//!
//! Analytic gradients come from the f32 graph. Numeric gradients are central
//! differences (eps 1e-3) of a scalar projection ⟨r, op(x)⟩ evaluated with the
//! f64 reference ops, so the only f32 error measured is that of the
//! implementation under test.

#![allow(dead_code)]

use super::reference::{self as refops, Arr};
use super::{normal_tensor, normal_vec, to_f64};
use fvlab::autodiff::{finite_diff_check_piecewise, Graph, NodeId, NormConfig, NormMode, Probe, RunningStats};
use fvlab::featviz::{objective_with_gradient, Jitter, VizConfig};
use fvlab::model::{Classifier, LinearClassifier, Mode, ModelConfig, ResNetLite};
use fvlab::seed::{derive_seed, rng};
use fvlab::Tensor;
use rand::Rng;

pub const EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-2;
pub const INSTANCES: u64 = 100;

/// Checks the vector-Jacobian product of one op against the reference.
///
/// `reference` maps f64 inputs to f64 outputs plus a region fingerprint.
fn vjp_check<B, R>(inputs: &[Tensor], seed: u64, build: B, reference: R) -> f64
where
    B: Fn(&mut Graph, &[NodeId]) -> NodeId,
    R: Fn(&[Vec<f64>]) -> (Vec<f64>, u64),
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &ids);
    let mut r = rng(derive_seed(seed, "projection", 0));
    let weights = normal_vec(&mut r, g.value(out).numel(), 1.0);
    g.backward_with_seed(out, &weights).unwrap();
    let w64 = to_f64(&weights);

    let base: Vec<Vec<f64>> = inputs.iter().map(|t| to_f64(t.data())).collect();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(ids[i]).expect("leaf gradient").to_vec();
        let report = finite_diff_check_piecewise(
            |p| {
                let mut args = base.clone();
                args[i] = p.to_vec();
                let (y, region) = reference(&args);
                Probe {
                    value: y.iter().zip(&w64).map(|(a, b)| a * b).sum(),
                    region,
                }
            },
            input,
            &analytic,
            EPS,
        )
        .unwrap();
        worst = worse(worst, report.max_rel_error);
    }
    worst
}

/// Larger of two errors, with NaN winning.
fn worse(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Worst relative error of `case` over [`INSTANCES`] seeded instances.
pub fn worst_over_instances(label: &str, case: fn(u64) -> f64) -> f64 {
    (0..INSTANCES).map(|i| case(derive_seed(0xF1D0, label, i))).fold(0.0, worse)
}

/// Every case, by label.
pub const CASES: &[(&str, fn(u64) -> f64)] = &[
    ("conv2d", conv2d),
    ("relu", relu),
    ("batchnorm2d/train", batchnorm_train),
    ("batchnorm2d/eval", batchnorm_eval),
    ("linear", linear),
    ("global_avg_pool", global_avg_pool),
    ("add", add),
    ("reshape", reshape),
    ("sum", sum),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("linear classifier", linear_classifier),
    ("resnet training loss", composed_training_loss),
    ("visualization objective", visualization_objective),
];

pub fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let k = r.random_range(1..=3);
    let stride = r.random_range(1..=2);
    let padding = r.random_range(0..=2);
    let (h, w) = (r.random_range(k..=7), r.random_range(k..=7));
    let with_bias = r.random_bool(0.5);
    let mut inputs = vec![
        normal_tensor(&mut r, &[n, c, h, w], 1.0),
        normal_tensor(&mut r, &[o, c, k, k], 0.5),
    ];
    if with_bias {
        inputs.push(normal_tensor(&mut r, &[o], 0.5));
    }
    vjp_check(
        &inputs,
        seed,
        |g, ids| g.conv2d(ids[0], ids[1], ids.get(2).copied(), stride, padding).unwrap(),
        |a| {
            let y = refops::conv2d(
                &Arr::new(&[n, c, h, w], a[0].clone()),
                &Arr::new(&[o, c, k, k], a[1].clone()),
                a.get(2).map(|b| b.as_slice()),
                stride,
                padding,
            );
            (y.data, 0)
        },
    )
}

pub fn relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let len = r.random_range(1..=40);
    let x = normal_tensor(&mut r, &[len], 1.0);
    vjp_check(
        &[x],
        seed,
        |g, ids| g.relu(ids[0]).unwrap(),
        |a| (a[0].iter().map(|v| v.max(0.0)).collect(), refops::fingerprint(0, &a[0])),
    )
}

/// At least four values per channel: with two, the normalized output is
/// constant up to `eps` and the true input gradient is ~1e-6.
fn norm_case(r: &mut impl Rng) -> (usize, usize, usize, usize, Vec<Tensor>) {
    let (n, c) = (r.random_range(2..=3), r.random_range(1..=3));
    let (h, w) = (r.random_range(2..=4), r.random_range(1..=4));
    let x = normal_tensor(r, &[n, c, h, w], 1.5);
    let gamma = Tensor::new([c], (0..c).map(|_| r.random_range(0.5..1.5)).collect()).unwrap();
    let beta = normal_tensor(r, &[c], 0.5);
    (n, c, h, w, vec![x, gamma, beta])
}

pub fn batchnorm_train(seed: u64) -> f64 {
    let cfg = NormConfig::default();
    let mut r = rng(seed);
    let (n, c, h, w, inputs) = norm_case(&mut r);
    vjp_check(
        &inputs,
        seed,
        |g, ids| {
            let mut stats = RunningStats::new(c);
            g.batchnorm2d(ids[0], ids[1], ids[2], NormMode::Train(&mut stats), cfg).unwrap()
        },
        |a| {
            let y = refops::batchnorm_train(&Arr::new(&[n, c, h, w], a[0].clone()), &a[1], &a[2], cfg.eps as f64);
            (y.data, 0)
        },
    )
}

pub fn batchnorm_eval(seed: u64) -> f64 {
    let cfg = NormConfig::default();
    let mut r = rng(seed);
    let (n, c, h, w, inputs) = norm_case(&mut r);
    let stats = RunningStats {
        mean: normal_vec(&mut r, c, 0.5),
        var: (0..c).map(|_| r.random_range(0.3f32..2.0)).collect(),
    };
    let (mean, var) = (to_f64(&stats.mean), to_f64(&stats.var));
    vjp_check(
        &inputs,
        seed,
        |g, ids| g.batchnorm2d(ids[0], ids[1], ids[2], NormMode::Eval(&stats), cfg).unwrap(),
        |a| {
            let x = Arr::new(&[n, c, h, w], a[0].clone());
            (refops::batchnorm_eval(&x, &a[1], &a[2], &mean, &var, cfg.eps as f64).data, 0)
        },
    )
}

pub fn linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, i, o) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
    let with_bias = r.random_bool(0.5);
    let mut inputs = vec![normal_tensor(&mut r, &[n, i], 1.0), normal_tensor(&mut r, &[o, i], 1.0)];
    if with_bias {
        inputs.push(normal_tensor(&mut r, &[o], 1.0));
    }
    vjp_check(
        &inputs,
        seed,
        |g, ids| g.linear(ids[0], ids[1], ids.get(2).copied()).unwrap(),
        |a| {
            let y = refops::linear(
                &Arr::new(&[n, i], a[0].clone()),
                &Arr::new(&[o, i], a[1].clone()),
                a.get(2).map(|b| b.as_slice()),
            );
            (y.data, 0)
        },
    )
}

pub fn global_avg_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=5), r.random_range(1..=5)];
    let x = normal_tensor(&mut r, &shape, 1.0);
    vjp_check(
        &[x],
        seed,
        |g, ids| g.global_avg_pool(ids[0]).unwrap(),
        |a| (refops::global_avg_pool(&Arr::new(&shape, a[0].clone())).data, 0),
    )
}

pub fn add(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=6)];
    let inputs = [normal_tensor(&mut r, &shape, 1.0), normal_tensor(&mut r, &shape, 1.0)];
    vjp_check(
        &inputs,
        seed,
        |g, ids| g.add(ids[0], ids[1]).unwrap(),
        |a| (a[0].iter().zip(&a[1]).map(|(x, y)| x + y).collect(), 0),
    )
}

pub fn reshape(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (a, b) = (r.random_range(1..=4), r.random_range(1..=6));
    let x = normal_tensor(&mut r, &[a, b], 1.0);
    vjp_check(
        &[x],
        seed,
        |g, ids| g.reshape(ids[0], vec![b, a]).unwrap(),
        |a| (a[0].clone(), 0),
    )
}

pub fn sum(seed: u64) -> f64 {
    let mut r = rng(seed);
    let len = r.random_range(1..=30);
    let x = normal_tensor(&mut r, &[len], 1.0);
    vjp_check(&[x], seed, |g, ids| g.sum(ids[0]).unwrap(), |a| (vec![a[0].iter().sum()], 0))
}

pub fn softmax_cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, k) = (r.random_range(1..=5), r.random_range(2..=6));
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let logits = normal_tensor(&mut r, &[n, k], 2.0);
    vjp_check(
        &[logits],
        seed,
        |g, ids| g.softmax_cross_entropy(ids[0], &labels).unwrap(),
        |a| (vec![refops::softmax_cross_entropy(&Arr::new(&[n, k], a[0].clone()), &labels)], 0),
    )
}

fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(8, 3);
    cfg.widths = vec![4, 6];
    cfg.blocks_per_stage = 1;
    cfg
}

/// Gradient of the training loss (train-mode batch norm, mean cross-entropy)
/// of a small residual network, with respect to a seeded sample of parameter
/// coordinates and input pixels.
pub fn composed_training_loss(seed: u64) -> f64 {
    const SAMPLED: usize = 48;
    let mut r = rng(seed);
    let mut model = ResNetLite::init(tiny_model_config(), seed).unwrap();
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += 0.05 * (r.random::<f32>() - 0.5);
        }
    }
    let batch = 3;
    let input = normal_tensor(&mut r, &[batch, 3, 8, 8], 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..3)).collect();

    let mut g = Graph::new();
    let x = g.leaf(input.clone(), true);
    let mut train_model = model.clone();
    let pass = train_model.forward(&mut g, x, Mode::Train).unwrap();
    let loss = g.softmax_cross_entropy(pass.logits, &labels).unwrap();
    g.backward(loss).unwrap();

    // Flattened coordinate space: every parameter, then the input.
    let mut sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
    sizes.push(input.numel());
    let total: usize = sizes.iter().sum();
    let mut coords: Vec<usize> = (0..SAMPLED).map(|_| r.random_range(0..total)).collect();
    coords.sort_unstable();
    coords.dedup();
    let locate = |flat: usize| {
        let mut rest = flat;
        for (t, &s) in sizes.iter().enumerate() {
            if rest < s {
                return (t, rest);
            }
            rest -= s;
        }
        unreachable!()
    };
    let grads: Vec<&[f32]> = pass
        .params
        .iter()
        .chain(std::iter::once(&x))
        .map(|&id| g.grad(id).expect("gradient"))
        .collect();
    let values: Vec<&[f32]> = model.params().iter().map(|t| t.data()).chain(std::iter::once(input.data())).collect();
    let analytic: Vec<f32> = coords.iter().map(|&f| { let (t, i) = locate(f); grads[t][i] }).collect();
    let point = Tensor::new([coords.len()], coords.iter().map(|&f| { let (t, i) = locate(f); values[t][i] }).collect()).unwrap();

    let base = refops::Params::of(&model);
    let base_input = to_f64(input.data());
    let report = finite_diff_check_piecewise(
        |p| {
            let mut params = refops::Params {
                names: base.names,
                values: base.values.clone(),
                shapes: base.shapes.clone(),
            };
            let mut img = base_input.clone();
            for (&f, &v) in coords.iter().zip(p) {
                let (t, i) = locate(f);
                if t < params.values.len() {
                    params.values[t][i] = v;
                } else {
                    img[i] = v;
                }
            }
            let (logits, region) = refops::resnet_forward(&model, &params, &Arr::new(&[batch, 3, 8, 8], img), None);
            Probe {
                value: refops::softmax_cross_entropy(&logits, &labels),
                region,
            }
        },
        &point,
        &analytic,
        EPS,
    )
    .unwrap();
    report.max_rel_error
}

/// The visualization objective (class logit minus L2 and total variation
/// penalties) through an eval-mode network, with respect to every pixel.
pub fn visualization_objective(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut model = ResNetLite::init(tiny_model_config(), seed).unwrap();
    // Nontrivial running statistics so eval mode differs from identity.
    let warmup = normal_tensor(&mut r, &[4, 3, 8, 8], 1.0);
    let mut g = Graph::new();
    let wx = g.leaf(warmup, false);
    model.forward(&mut g, wx, Mode::Train).unwrap();

    let cfg = VizConfig {
        target_class: r.random_range(0..3),
        l2_lambda: r.random_range(0.0..0.2),
        tv_lambda: r.random_range(0.0..0.2),
        jitter: Jitter {
            enabled: false,
            ..Jitter::default()
        },
        input_noise_sigma: 0.0,
        ..VizConfig::default()
    };
    let x = Tensor::new([3, 8, 8], (0..192).map(|_| r.random::<f32>()).collect()).unwrap();
    let eval = objective_with_gradient(&model, &x, &cfg).unwrap();
    let params = refops::Params::of(&model);
    let running = refops::running_of(&model);
    let report = finite_diff_check_piecewise(
        |p| {
            let (logits, relu_region) = refops::resnet_forward(&model, &params, &Arr::new(&[1, 3, 8, 8], p.to_vec()), Some(&running));
            let tv = refops::total_variation(p, 3, 8, 8);
            let l2: f64 = p.iter().map(|v| v * v).sum();
            Probe {
                value: logits.data[cfg.target_class] - cfg.l2_lambda as f64 * l2 - cfg.tv_lambda as f64 * tv,
                region: refops::fingerprint(relu_region, &tv_differences(p, 3, 8, 8)),
            }
        },
        &x,
        eval.gradient.data(),
        EPS,
    )
    .unwrap();
    report.max_rel_error
}

pub fn linear_classifier(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dims = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4));
    let d = dims.0 * dims.1 * dims.2;
    let k = r.random_range(2..=4);
    let model = LinearClassifier::new(dims, normal_tensor(&mut r, &[k, d], 1.0), normal_tensor(&mut r, &[k], 1.0)).unwrap();
    let x = normal_tensor(&mut r, &[2, dims.0, dims.1, dims.2], 1.0);
    let (weight, bias) = (to_f64(model.weight.data()), to_f64(model.bias.data()));
    vjp_check(
        &[x],
        seed,
        |g, ids| model.logits_node(g, ids[0]).unwrap(),
        |a| (refops::linear(&Arr::new(&[2, d], a[0].clone()), &Arr::new(&[k, d], weight.clone()), Some(&bias)).data, 0),
    )
}

fn tv_differences(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[(ch * h + y) * w + xx];
                if y + 1 < h {
                    out.push(x[(ch * h + y + 1) * w + xx] - v);
                }
                if xx + 1 < w {
                    out.push(x[(ch * h + y) * w + xx + 1] - v);
                }
            }
        }
    }
    out
}
