//! Finite-difference check of the analytic gradients, per layer kind.
//!
//! Each configuration is a tiny network `[layer under test] -> softmax_output`
//! trained against random labels with the cross-entropy loss. Both parameter
//! and input gradients are compared against central differences. Inputs to
//! `relu` stay at least `0.1` away from the kink and `maxpool` inputs are
//! spaced `0.05` apart, so a `1e-2` step never crosses a non-differentiable
//! point.

use rand::Rng;
use serde::Serialize;

use super::loss::loss_softmax_xent;
use super::network::Network;
use super::spec::{InputSpec, LayerKind, LayerSpec, NetworkSpec};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng;

pub const LAYER_KINDS: &[&str] = &[
    "conv2d",
    "maxpool",
    "relu",
    "fc",
    "concat",
    "global_avg_pool",
    "softmax_output",
];

pub const DEFAULT_EPS: f32 = 1e-2;
pub const DEFAULT_TOL: f64 = 1e-3;
/// Denominator floor of the relative error. Gradient entries far below this
/// are compared in absolute terms, which keeps f32 rounding in the loss from
/// dominating near-zero components.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Serialize)]
pub struct KindReport {
    pub kind: String,
    pub configs: usize,
    pub checked_entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f32,
    pub tolerance: f64,
    pub kinds: Vec<KindReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.kinds.iter().all(|k| k.passed)
    }
}

fn l(name: &str, kind: LayerKind) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind,
    }
}

fn conv(name: &str, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> LayerSpec {
    l(
        name,
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            pad,
        },
    )
}

enum InputStyle {
    Smooth,
    AwayFromZero,
    /// Every pooling window has a unique maximum leading the runner-up by a clear gap.
    Spaced {
        kernel: usize,
        stride: usize,
    },
}

/// Biases are drawn from `[-PARAM_RANGE, PARAM_RANGE]` and weights from
/// `±1/sqrt(fan_in)` (capped). Logits of order one keep f32 rounding in the
/// loss well below the tolerance.
const PARAM_RANGE: f32 = 0.25;

const MAXPOOL_GAP: f32 = 0.03;

fn windows_separated(vals: &[f32], shape: &[usize], kernel: usize, stride: usize, gap: f32) -> bool {
    let [b, h, w, c] = *shape else { return false };
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let (mut top, mut second) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let v = vals[((bi * h + oy * stride + ky) * w + ox * stride + kx) * c + ch];
                            if v > top {
                                second = top;
                                top = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    if top - second < gap {
                        return false;
                    }
                }
            }
        }
    }
    true
}

struct Case {
    spec: NetworkSpec,
    style: InputStyle,
}

fn random_case(kind: &str, rng: &mut impl Rng) -> Case {
    let channels = if rng.random_bool(0.5) { 3 } else { 5 };
    let n_classes = if rng.random_bool(0.5) { 2 } else { 7 };
    let mut h = rng.random_range(3..=7);
    let mut w = rng.random_range(3..=7);
    let mut style = InputStyle::Smooth;
    let body = match kind {
        "conv2d" => {
            let kernel = rng.random_range(1..=3);
            let pad = rng.random_range(0..=2);
            let stride = rng.random_range(1..=2);
            h = h.max(kernel);
            w = w.max(kernel);
            vec![conv("layer", rng.random_range(1..=4), kernel, stride, pad)]
        }
        "maxpool" => {
            let kernel = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            h = h.max(kernel);
            w = w.max(kernel);
            style = InputStyle::Spaced { kernel, stride };
            vec![l("layer", LayerKind::Maxpool { kernel, stride })]
        }
        "relu" => {
            style = InputStyle::AwayFromZero;
            vec![l("layer", LayerKind::Relu)]
        }
        "fc" => vec![l(
            "layer",
            LayerKind::Fc {
                out_dim: rng.random_range(1..=6),
            },
        )],
        "concat" => {
            let mut branches = vec![
                vec![conv("b1x1", rng.random_range(1..=3), 1, 1, 0)],
                vec![conv("b3x3", rng.random_range(1..=3), 3, 1, 1)],
            ];
            if rng.random_bool(0.5) {
                branches.push(vec![
                    conv("b5_reduce", 2, 1, 1, 0),
                    conv("b5x5", rng.random_range(1..=3), 5, 1, 2),
                ]);
            }
            if rng.random_bool(0.3) {
                // Two identical branches: each must receive its own gradient slice.
                let dup = rng.random_range(1..=2);
                branches.push(vec![conv("dup_a", dup, 1, 1, 0)]);
                branches.push(vec![conv("dup_b", dup, 1, 1, 0)]);
            }
            vec![l("layer", LayerKind::Concat { branches })]
        }
        "global_avg_pool" => vec![l("layer", LayerKind::GlobalAvgPool)],
        "softmax_output" => vec![],
        other => panic!("unknown layer kind {other}"),
    };
    let mut layers = body;
    layers.push(l("head", LayerKind::SoftmaxOutput { n_classes }));
    Case {
        spec: NetworkSpec {
            input: InputSpec {
                height: h,
                width: w,
                channels,
            },
            layers,
        },
        style,
    }
}

fn make_input(shape: &[usize], style: &InputStyle, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match style {
        InputStyle::Smooth => (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        InputStyle::AwayFromZero => (0..n)
            .map(|_| {
                let mag = rng.random_range(0.1f32..1.0);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
        InputStyle::Spaced { kernel, stride } => loop {
            let vals: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            if windows_separated(&vals, shape, *kernel, *stride, MAXPOOL_GAP) {
                break vals;
            }
        },
    };
    Tensor::from_vec(shape, data).unwrap()
}

fn loss_at(net: &Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(loss_softmax_xent(&net.infer(x)?, labels)?.0)
}

#[derive(Default)]
struct Errors {
    max_rel: f64,
    max_abs: f64,
    entries: usize,
}

impl Errors {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        self.entries += 1;
    }
}

fn check_case(case: &Case, eps: f32, rng: &mut impl Rng, errs: &mut Errors) -> Result<()> {
    let mut net = Network::build(&case.spec)?;
    net.visit_params_mut(|name, p| {
        let range = if name.ends_with(".weight") {
            let fan_in = p.value.len() / p.value.shape()[0];
            (1.0 / (fan_in as f32).sqrt()).min(PARAM_RANGE * 2.0)
        } else {
            PARAM_RANGE
        };
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-range..range));
    });
    let batch = rng.random_range(1..=2);
    let i = case.spec.input;
    let x = make_input(&[batch, i.height, i.width, i.channels], &case.style, rng);
    let n_classes = net.n_classes();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_classes)).collect();

    let logits = net.forward(&x)?;
    let (_, grad) = loss_softmax_xent(&logits, &labels)?;
    net.zero_grad();
    let dx = net.backward(&grad)?;

    let step = 2.0 * eps as f64;
    let params: Vec<(String, Tensor, Tensor)> = net
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.value.clone(), p.grad.clone()))
        .collect();
    for (name, value, grad) in &params {
        for j in 0..value.len() {
            let mut probe = net.clone();
            let set = |probe: &mut Network, v: f32| {
                probe.visit_params_mut(|n, p| {
                    if n == name {
                        p.value.data_mut()[j] = v;
                    }
                })
            };
            let orig = value.data()[j];
            set(&mut probe, orig + eps);
            let plus = loss_at(&probe, &x, &labels)?;
            set(&mut probe, orig - eps);
            let minus = loss_at(&probe, &x, &labels)?;
            errs.record(grad.data()[j] as f64, (plus - minus) / step);
        }
    }
    for j in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[j] += eps;
        let plus = loss_at(&net, &xp, &labels)?;
        xp.data_mut()[j] -= 2.0 * eps;
        let minus = loss_at(&net, &xp, &labels)?;
        errs.record(dx.data()[j] as f64, (plus - minus) / step);
    }
    Ok(())
}

/// Runs `configs` random configurations for every layer kind.
pub fn run(configs: usize, seed: u64, eps: f32, tolerance: f64) -> Result<GradCheckReport> {
    let mut kinds = Vec::new();
    for (ki, kind) in LAYER_KINDS.iter().enumerate() {
        let mut errs = Errors::default();
        for c in 0..configs {
            let mut r = rng::stream(seed, &[ki as u64, c as u64]);
            let case = random_case(kind, &mut r);
            check_case(&case, eps, &mut r, &mut errs)?;
        }
        kinds.push(KindReport {
            kind: kind.to_string(),
            configs,
            checked_entries: errs.entries,
            max_rel_err: errs.max_rel,
            max_abs_err: errs.max_abs,
            passed: errs.max_rel < tolerance,
        });
    }
    Ok(GradCheckReport { eps, tolerance, kinds })
}
