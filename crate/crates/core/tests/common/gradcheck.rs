//! Central finite differences (h = 1e-3) against reverse-mode gradients.
//! Shared by the gradcheck tests and the acceptance run.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srsqueeze::distill::{
    gaussian_blur_5x5, gaussian_kernel_5x5, high_freq, laplacian_loss, total_loss, KDConfig,
};
use srsqueeze::model::{ModelConfig, SRModel, MEAN_SHIFT};
use srsqueeze::prune::{prune_loss, PruneConfig};
use srsqueeze::train::gradients;
use srsqueeze::{Graph, PadMode, Tensor, Var};

pub const H: f32 = 1e-3;
pub const TOL: f64 = 1e-3;
/// Coordinates probed per input; keeps the larger checks fast.
const PROBES: usize = 48;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform in ±[0.05, 1], so no coordinate sits within h of a kink at 0.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// Scalar objective: the op's output contracted with fixed random weights.
fn objective(g: &mut Graph, out: Var, weights: &Option<Tensor>) -> Var {
    match weights {
        None => out,
        Some(w) => {
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv).unwrap();
            g.sum(p)
        }
    }
}

fn eval(inputs: &[Tensor], build: &Build<'_>, weights: &Option<Tensor>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars);
    let l = objective(&mut g, out, weights);
    g.value(l).item() as f64
}

/// Largest norm-relative error over the first `checked` inputs; the rest
/// enter the graph as constants.
pub fn gradcheck(seed: u64, inputs: Vec<Tensor>, checked: usize, build: &Build<'_>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), i < checked))
        .collect();
    let out = build(&mut g, &vars);
    let weights = (!g.value(out).is_scalar()).then(|| uniform(&mut rng, g.value(out).shape()));
    let l = objective(&mut g, out, &weights);
    g.backward(l).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate().take(checked) {
        let analytic = g.grad(*v).expect("reachable input has a gradient").to_vec();
        let n = inputs[i].numel();
        let idx: Vec<usize> = if n <= PROBES {
            (0..n).collect()
        } else {
            (0..PROBES).map(|_| rng.random_range(0..n)).collect()
        };
        let (mut diff2, mut ref2) = (0.0f64, 0.0f64);
        for &j in &idx {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let fd =
                (eval(&plus, build, &weights) - eval(&minus, build, &weights)) / (2.0 * H as f64);
            diff2 += (fd - analytic[j] as f64).powi(2);
            ref2 += fd.powi(2).max((analytic[j] as f64).powi(2));
        }
        let rel = if ref2 < 1e-12 {
            diff2.sqrt()
        } else {
            (diff2 / ref2).sqrt()
        };
        worst = worst.max(rel);
    }
    worst
}

/// One check: worst relative error for a given seed.
pub struct Case {
    pub name: &'static str,
    pub run: Box<dyn Fn(u64) -> f64>,
}

fn case(
    name: &'static str,
    checked: usize,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Graph, &[Var]) -> Var + 'static,
) -> Case {
    Case {
        name,
        run: Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = make(&mut rng);
            let n = inputs.len();
            gradcheck(seed, inputs, checked.min(n), &build)
        }),
    }
}

/// Conv, ReLU, conv, mean with pre-activations kept clear of the kink by
/// more than any single perturbation can move them.
fn conv_relu_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    loop {
        let v = vec![
            uniform(r, &[1, 2, 3, 3]),
            uniform(r, &[4, 2, 3, 3]),
            uniform(r, &[4]),
            uniform(r, &[2, 4, 3, 3]),
            uniform(r, &[2]),
        ];
        let mut g = Graph::new();
        let c: Vec<Var> = v.iter().map(|t| g.constant(t.clone())).collect();
        let z = g.conv2d(c[0], c[1], Some(c[2]), 1, 1).unwrap();
        if g.value(z).data().iter().all(|z| z.abs() > 0.01) {
            return v;
        }
    }
}

pub fn cases() -> Vec<Case> {
    let all = usize::MAX;
    let shape = [2, 2, 3, 3];
    let k: Arc<[f32]> = Arc::new(gaussian_kernel_5x5());
    let prune_cfg = PruneConfig {
        lambda: 0.5,
        ..Default::default()
    };
    let kd_cfg = KDConfig {
        pyramid_levels: 3,
        ..Default::default()
    };
    vec![
        case(
            "conv2d",
            all,
            |r| {
                vec![
                    uniform(r, &[2, 3, 5, 5]),
                    uniform(r, &[4, 3, 3, 3]),
                    uniform(r, &[4]),
                ]
            },
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap(),
        ),
        case(
            "conv2d stride 2",
            all,
            |r| vec![uniform(r, &[1, 2, 7, 6]), uniform(r, &[3, 2, 3, 3])],
            |g, v| g.conv2d(v[0], v[1], None, 2, 0).unwrap(),
        ),
        case(
            "relu",
            all,
            |r| vec![off_zero(r, &[2, 3, 4, 4])],
            |g, v| g.relu(v[0]),
        ),
        case(
            "abs",
            all,
            |r| vec![off_zero(r, &[3, 7])],
            |g, v| g.abs(v[0]),
        ),
        case(
            "add",
            all,
            move |r| vec![uniform(r, &shape), uniform(r, &shape)],
            |g, v| g.add(v[0], v[1]).unwrap(),
        ),
        case(
            "sub",
            all,
            move |r| vec![uniform(r, &shape), uniform(r, &shape)],
            |g, v| g.sub(v[0], v[1]).unwrap(),
        ),
        case(
            "mul",
            all,
            move |r| vec![uniform(r, &shape), uniform(r, &shape)],
            |g, v| g.mul(v[0], v[1]).unwrap(),
        ),
        case(
            "scale",
            all,
            move |r| vec![uniform(r, &shape)],
            |g, v| g.scale(v[0], -2.5),
        ),
        case(
            "sum",
            all,
            |r| vec![uniform(r, &[4, 5])],
            |g, v| g.sum(v[0]),
        ),
        case(
            "mean",
            all,
            |r| vec![uniform(r, &[4, 5])],
            |g, v| g.mean(v[0]),
        ),
        case(
            "charbonnier eps=1e-3",
            all,
            |r| vec![uniform(r, &[1, 1, 2, 3]), uniform(r, &[1, 1, 2, 3])],
            |g, v| g.charbonnier(v[0], v[1], 1e-3).unwrap(),
        ),
        case(
            "charbonnier eps=0.1",
            all,
            |r| vec![uniform(r, &[1, 1, 2, 3]), uniform(r, &[1, 1, 2, 3])],
            |g, v| g.charbonnier(v[0], v[1], 0.1).unwrap(),
        ),
        case(
            "pixel_shuffle",
            all,
            |r| vec![uniform(r, &[2, 8, 3, 2])],
            |g, v| g.pixel_shuffle(v[0], 2).unwrap(),
        ),
        case(
            "pixel_unshuffle",
            all,
            |r| vec![uniform(r, &[1, 2, 6, 3])],
            |g, v| g.pixel_unshuffle(v[0], 3).unwrap(),
        ),
        case(
            "pad zero",
            all,
            |r| vec![uniform(r, &[1, 2, 3, 4])],
            |g, v| g.pad(v[0], 2, PadMode::Zero).unwrap(),
        ),
        case(
            "pad reflect",
            all,
            |r| vec![uniform(r, &[1, 2, 3, 4])],
            |g, v| g.pad(v[0], 2, PadMode::Reflect).unwrap(),
        ),
        case(
            "depthwise",
            all,
            |r| vec![uniform(r, &[1, 2, 7, 6])],
            move |g, v| g.depthwise_fixed(v[0], k.clone(), 5).unwrap(),
        ),
        case(
            "decimate2",
            all,
            |r| vec![uniform(r, &[1, 2, 5, 6])],
            |g, v| g.decimate2(v[0]).unwrap(),
        ),
        case(
            "zero_insert2",
            all,
            |r| vec![uniform(r, &[1, 2, 3, 3])],
            |g, v| g.zero_insert2(v[0], 5, 6).unwrap(),
        ),
        case(
            "gaussian_blur_5x5",
            all,
            |r| vec![uniform(r, &[1, 3, 6, 5])],
            |g, v| gaussian_blur_5x5(g, v[0]).unwrap(),
        ),
        case(
            "high_freq",
            all,
            |r| vec![uniform(r, &[1, 3, 6, 5])],
            |g, v| high_freq(g, v[0]).unwrap(),
        ),
        case(
            "laplacian_loss",
            all,
            |r| vec![uniform(r, &[1, 1, 4, 4]), uniform(r, &[1, 1, 4, 4])],
            |g, v| laplacian_loss(g, v[0], v[1], 3).unwrap(),
        ),
        case("conv-relu-mean", all, conv_relu_inputs, |g, v| {
            let h = g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
            let h = g.relu(h);
            let o = g.conv2d(h, v[3], Some(v[4]), 1, 1).unwrap();
            g.mean(o)
        }),
        case(
            "prune_loss",
            all,
            |r| {
                vec![
                    uniform(r, &[1, 1, 2, 3]),
                    uniform(r, &[1, 1, 2, 3]),
                    off_zero(r, &[2, 2]),
                    off_zero(r, &[3]),
                ]
            },
            move |g, v| prune_loss(g, v[0], v[1], &v[2..], &prune_cfg).unwrap(),
        ),
        // With respect to the student output only.
        case(
            "total_loss",
            1,
            |r| {
                vec![
                    uniform(r, &[1, 1, 4, 4]),
                    uniform(r, &[1, 1, 4, 4]),
                    uniform(r, &[1, 1, 4, 4]),
                ]
            },
            move |g, v| total_loss(g, v[0], v[1], v[2], &kd_cfg).unwrap().total,
        ),
        Case {
            name: "model parameters",
            run: Box::new(model_parameters),
        },
    ]
}

/// Smallest |pre-activation| at any ReLU of a two-conv-per-block model.
fn relu_margin(model: &SRModel, x: &Tensor) -> f32 {
    let c = model.config();
    assert_eq!(c.n_l, 2);
    let p = |i: usize| model.params()[i].tensor.clone();
    let mut g = Graph::new();
    let mut layer = 0;
    let mut conv = |g: &mut Graph, v| {
        let (w, b) = (g.constant(p(2 * layer)), g.constant(p(2 * layer + 1)));
        layer += 1;
        g.conv2d(v, w, Some(b), 1, c.kernel / 2).unwrap()
    };
    let xv = g.constant(x.map(|v| v - MEAN_SHIFT));
    let mut h = conv(&mut g, xv);
    let mut margin = f32::INFINITY;
    for _ in 0..c.n_b {
        let z = conv(&mut g, h);
        margin = g.value(z).data().iter().fold(margin, |m, v| m.min(v.abs()));
        let r = g.relu(z);
        let r = conv(&mut g, r);
        h = g.add(h, r).unwrap();
    }
    margin
}

/// Every parameter of a small network through the model's own forward pass,
/// with all parameters drawn from U(-0.5, 0.5). Draws that put a ReLU input
/// within reach of a probe step are redrawn. The error is measured over the
/// full parameter-gradient vector.
pub fn model_parameters(seed: u64) -> f64 {
    let cfg = ModelConfig::new(4, 2, 2, 2);
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = SRModel::build(cfg, seed).unwrap();
        let (mut model, x) = loop {
            let tensors = template
                .params()
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        Tensor::from_fn(p.tensor.shape(), |_| rng.random_range(-0.5..0.5)),
                    )
                })
                .collect();
            let model = SRModel::from_params(cfg, tensors).unwrap();
            let x = Tensor::from_fn(&[1, 3, 3, 3], |_| rng.random_range(0.0..1.0));
            if relu_margin(&model, &x) > 0.02 {
                break (model, x);
            }
        };
        let w = Tensor::from_fn(&[1, 3, 6, 6], |_| rng.random_range(-1.0..1.0));
        let objective = |m: &SRModel| -> f64 {
            let y = m.predict(&x).unwrap();
            y.data()
                .iter()
                .zip(w.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let step = gradients(&model, &x, |g, out, _| {
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv)?;
            Ok((g.sum(p), ()))
        })
        .unwrap();
        let (mut diff2, mut ref2) = (0.0f64, 0.0f64);
        for (pi, grad) in step.grads.iter().enumerate() {
            let n = grad.len();
            for _ in 0..n.min(12) {
                let j = rng.random_range(0..n);
                let orig = model.params()[pi].tensor.data()[j];
                model.params_mut()[pi].tensor.data_mut()[j] = orig + H;
                let up = objective(&model);
                model.params_mut()[pi].tensor.data_mut()[j] = orig - H;
                let down = objective(&model);
                model.params_mut()[pi].tensor.data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * H as f64);
                diff2 += (fd - grad[j] as f64).powi(2);
                ref2 += fd.powi(2).max((grad[j] as f64).powi(2));
            }
        }
        (diff2 / ref2).sqrt()
    }
}
