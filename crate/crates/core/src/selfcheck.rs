//! Built-in verification suites: finite-difference gradient checks for every
//! differentiable op, and oracle/invariant checks against direct loop
//! implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::matcher::{build_cost_volume, MatchConfig};
use crate::pipeline::{
    forward_on_tape, make_synthetic_dataset, multi_level_loss_on_tape, LossKind, ModelConfig, ModelWeights, Stage,
    SyntheticOptions,
};
use crate::regularizer::{build_filters, distance_metric, f_lconv, occlusion_unit};
use crate::tensor::gradcheck::{check_op, probe_tensor, relative_error, CheckOptions, GradReport, Probe};
use crate::tensor::{conv2d, ConvSpec, Element, Tape, Tensor, Var};
use crate::encoder::ImagePair;
use crate::warp::f_warp;

/// Seeds every check runs on.
pub const SEEDS: [u64; 5] = [11, 23, 37, 41, 59];
/// Relative-error bounds for single and double precision.
pub const TOL_F32: f64 = 1e-2;
pub const TOL_F64: f64 = 1e-4;
/// Finite-difference step. Probes that would straddle a kink are replaced
/// (see [`Tape::branch_signature`]).
pub const STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (relative error for gradients, absolute
    /// deviation for oracles).
    pub worst: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    /// Op whose backward rule is deliberately corrupted (test hook).
    pub inject_fault: Option<String>,
    /// Seeds to use; [`SEEDS`] when empty.
    pub seeds: Vec<u64>,
}

impl SuiteOptions {
    fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            SEEDS.to_vec()
        } else {
            self.seeds.clone()
        }
    }

    fn arm<E: Element>(&self, tape: &mut Tape<E>) {
        if let Some(op) = &self.inject_fault {
            tape.inject_fault(op);
        }
    }
}

fn result(name: impl Into<String>, worst: f64, tolerance: f64) -> CheckResult {
    CheckResult { name: name.into(), passed: worst.is_finite() && worst < tolerance, worst, tolerance }
}

/// Uniform values in `±[lo, hi]`, kept away from zero.
fn away_from_zero<E: Element>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<E> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        E::lit(if rng.random::<bool>() { m } else { -m })
    })
}

/// Flow values whose fractional parts stay in `[0.2, 0.8]`.
fn fractional_flow<E: Element>(shape: &[usize], range: i32, rng: &mut impl Rng) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::lit(rng.random_range(-range..range) as f64 + rng.random_range(0.2..0.8)))
}

fn uniform<E: Element>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<E> {
    Tensor::random_uniform(shape, lo, hi, rng)
}

type OpBuilder<E> = Box<dyn Fn(&mut Tape<E>, &[Var]) -> Result<Var>>;

/// An op check: inputs generator, differentiable flags and graph builder.
struct OpCase<E: Element> {
    name: &'static str,
    inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<E>>>,
    differentiable: Vec<bool>,
    build: OpBuilder<E>,
}

fn op_cases<E: Element>() -> Vec<OpCase<E>> {
    let spec = ConvSpec::same(2, 3, 3, 1);
    let spec_s2 = ConvSpec::same(2, 3, 3, 2);
    let up = ConvSpec::upconv(2, 2);
    let dense = MatchConfig::dense(2);
    let sparse = MatchConfig { radius: 4, displacement_stride: 2, sample_stride: 2 };
    vec![
        OpCase {
            name: "conv2d",
            inputs: Box::new(move |r| {
                vec![uniform(&[2, 6, 6], -1.0, 1.0, r), uniform(&spec.weight_shape(), -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)]
            }),
            differentiable: vec![true, true, true],
            build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)),
        },
        OpCase {
            name: "conv2d_stride2",
            inputs: Box::new(move |r| {
                vec![uniform(&[2, 7, 8], -1.0, 1.0, r), uniform(&spec_s2.weight_shape(), -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)]
            }),
            differentiable: vec![true, true, true],
            build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec_s2)),
        },
        OpCase {
            name: "deconv2d",
            inputs: Box::new(move |r| vec![uniform(&[2, 4, 5], -1.0, 1.0, r), uniform(&up.weight_shape(), -1.0, 1.0, r)]),
            differentiable: vec![true, true],
            build: Box::new(move |t, v| t.deconv2d(v[0], v[1], up)),
        },
        OpCase {
            name: "leaky_relu",
            inputs: Box::new(|r| vec![away_from_zero(&[3, 4, 4], 0.05, 2.0, r)]),
            differentiable: vec![true],
            build: Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.1))),
        },
        OpCase {
            name: "channel_softmax",
            inputs: Box::new(|r| vec![uniform(&[9, 3, 3], -3.0, 3.0, r)]),
            differentiable: vec![true],
            build: Box::new(|t, v| t.channel_softmax(v[0])),
        },
        OpCase {
            name: "negative_square",
            inputs: Box::new(|r| vec![uniform(&[4, 3, 3], -2.0, 2.0, r)]),
            differentiable: vec![true],
            build: Box::new(|t, v| Ok(t.negative_square(v[0]))),
        },
        OpCase {
            name: "upsample2x",
            inputs: Box::new(|r| vec![uniform(&[2, 3, 4], -2.0, 2.0, r)]),
            differentiable: vec![true],
            build: Box::new(|t, v| t.upsample2x(v[0])),
        },
        OpCase {
            name: "f_warp",
            inputs: Box::new(|r| vec![uniform(&[3, 6, 7], -1.0, 1.0, r), fractional_flow(&[2, 6, 7], 2, r)]),
            differentiable: vec![true, true],
            build: Box::new(|t, v| t.f_warp(v[0], v[1])),
        },
        OpCase {
            name: "correlation",
            inputs: Box::new(|r| vec![uniform(&[4, 6, 7], -1.0, 1.0, r), uniform(&[4, 6, 7], -1.0, 1.0, r)]),
            differentiable: vec![true, true],
            build: Box::new(move |t, v| t.cost_volume(v[0], v[1], dense)),
        },
        OpCase {
            name: "correlation_sparse",
            inputs: Box::new(|r| vec![uniform(&[3, 9, 10], -1.0, 1.0, r), uniform(&[3, 9, 10], -1.0, 1.0, r)]),
            differentiable: vec![true, true],
            build: Box::new(move |t, v| t.cost_volume(v[0], v[1], sparse)),
        },
        OpCase {
            name: "f_lconv",
            inputs: Box::new(|r| vec![uniform(&[2, 6, 6], -3.0, 3.0, r), uniform(&[25, 6, 6], 0.0, 1.0, r)]),
            differentiable: vec![true, true],
            build: Box::new(|t, v| t.f_lconv(v[0], v[1])),
        },
        OpCase {
            name: "occlusion_map",
            inputs: Box::new(|r| {
                vec![uniform(&[3, 6, 6], 0.0, 1.0, r), uniform(&[3, 6, 6], 0.0, 1.0, r), fractional_flow(&[2, 6, 6], 1, r)]
            }),
            differentiable: vec![false, false, true],
            build: Box::new(|t, v| occlusion_unit(t, v[0], v[1], v[2])),
        },
        OpCase {
            name: "remove_mean",
            inputs: Box::new(|r| vec![uniform(&[2, 4, 5], -2.0, 2.0, r)]),
            differentiable: vec![true],
            build: Box::new(|t, v| t.remove_mean(v[0])),
        },
    ]
}

fn run_op_cases<E: Element>(opts: &SuiteOptions, tol: f64, suffix: &str) -> Vec<CheckResult> {
    op_cases::<E>()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for seed in opts.seeds() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs = (case.inputs)(&mut rng);
                let build = |t: &mut Tape<E>, v: &[Var]| {
                    opts.arm(t);
                    (case.build)(t, v)
                };
                let report = check_op(&inputs, &case.differentiable, build, CheckOptions::new(STEP, seed));
                worst = worst.max(report.map(|r| r.worst()).unwrap_or(f64::INFINITY));
            }
            result(format!("grad {} ({suffix})", case.name), worst, tol)
        })
        .collect()
}

/// A function of the model weights that can be recorded at either precision.
pub trait Composite {
    fn build<T: Element>(&self, tape: &mut Tape<T>, weights: &ModelWeights<T>) -> Result<Var>;
}

/// Fixed random weights that contract the output of `composite` to a
/// scalar (all ones when the output already is one).
pub fn output_probe<R: Element>(composite: &impl Composite, weights: &ModelWeights<R>, seed: u64) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let out = composite.build(&mut tape, weights)?;
    Ok(if tape.value(out).is_scalar() {
        Tensor::full(tape.shape(out), 1.0)
    } else {
        Tensor::random_uniform(tape.shape(out), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e0b))
    })
}

/// Analytic gradients at precision `E` of the probed output, one tensor
/// per name.
pub fn param_gradients<E: Element>(
    composite: &impl Composite,
    weights: &ModelWeights<E>,
    names: &[&str],
    probe: &Tensor<f64>,
) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::<E>::new();
    let out = composite.build(&mut tape, weights)?;
    let loss = tape.dot_const(out, probe.cast())?;
    let grads = tape.backward(loss)?;
    names
        .iter()
        .map(|&name| match grads.param(name) {
            Some(g) => Ok(g.cast()),
            None => Ok(Tensor::zeros(weights.get(name)?.shape())),
        })
        .collect()
}

/// Relative error of each analytic gradient set against one shared set of
/// central differences, evaluated at precision `R` around `reference`.
pub fn check_params<R: Element>(
    composite: &impl Composite,
    reference: &ModelWeights<R>,
    names: &[&str],
    probe: &Tensor<f64>,
    analytic: &[Vec<Tensor<f64>>],
    opts: CheckOptions,
) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eval = |w: &ModelWeights<R>| -> Result<Probe> {
        let mut t = Tape::new();
        let o = composite.build(&mut t, w)?;
        let value = t.value(o).data().iter().zip(probe.data()).map(|(a, b)| a.as_f64() * b).sum();
        Ok(Probe { value, branches: t.branch_signature() })
    };
    let base = eval(reference)?.branches;
    let mut reports: Vec<GradReport> =
        analytic.iter().map(|_| GradReport { per_input: Vec::new(), skipped: 0 }).collect();
    for (k, &name) in names.iter().enumerate() {
        let value = reference.get(name)?;
        let mut w = reference.clone();
        let (coords, n, skipped) = probe_tensor(value, base, &opts, &mut rng, |j, x| {
            w.get_mut(name)?.data_mut()[j] = x;
            let r = eval(&w);
            w.get_mut(name)?.data_mut()[j] = value.data()[j];
            r
        })?;
        for (report, grads) in reports.iter_mut().zip(analytic) {
            let a: Vec<f64> = coords.iter().map(|&j| grads[k].data()[j]).collect();
            report.skipped += skipped;
            report.per_input.push(Some(if a.is_empty() { f64::INFINITY } else { relative_error(&a, &n) }));
        }
    }
    Ok(reports)
}

/// Small model used by the composite checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig::default().with_width_scale(0.125)
}

/// Initial weights with every bias drawn from `±0.1`. Zero biases put the
/// distance outputs at the stationary point of the negative square, where
/// the regularizer receives no gradient at all.
fn generic_weights(cfg: &ModelConfig) -> ModelWeights<f32> {
    let mut weights = ModelWeights::<f32>::init(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb1a5);
    let names: Vec<String> = weights.names().filter(|n| n.ends_with(".bias")).map(str::to_string).collect();
    for name in names {
        for b in weights.get_mut(&name).expect("listed above").data_mut() {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    weights
}

const DIST_LEVEL: usize = 5;
const DIST_PARAMS: [&str; 3] = ["conv5_1_R.weight", "conv5_4_R.bias", "conv5_dist_R.weight"];
const LOSS_PARAMS: [&str; 10] = [
    "conv6.weight",
    "conv5_1_M.weight",
    "conv6_1_R.weight",
    "conv6_dist_R.bias",
    "conv5_2_S.weight",
    "conv4_dist_R.weight",
    "upconv5_M.weight",
    "conv3_1_S.weight",
    "conv2_3_S.weight",
    "conv2_dist_R.bias",
];

struct DistanceProbe<'a> {
    cfg: &'a ModelConfig,
    inputs: &'a [Tensor<f64>],
    opts: &'a SuiteOptions,
}

impl Composite for DistanceProbe<'_> {
    fn build<T: Element>(&self, t: &mut Tape<T>, w: &ModelWeights<T>) -> Result<Var> {
        self.opts.arm(t);
        let v: Vec<Var> = self.inputs.iter().map(|x| t.constant(x.cast())).collect();
        distance_metric(t, w, self.cfg, DIST_LEVEL, v[0], v[1], v[2])
    }
}

fn distance_check<E: Element>(opts: &SuiteOptions, seed: u64) -> Result<f64> {
    let cfg = ModelConfig { seed, ..tiny_config() };
    let weights = generic_weights(&cfg).cast::<E>();
    let f = crate::pipeline::arch::feature_channels(&cfg, DIST_LEVEL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = vec![
        uniform::<f32>(&[f, 4, 4], -1.0, 1.0, &mut rng).cast(),
        uniform::<f32>(&[2, 4, 4], -2.0, 2.0, &mut rng).cast(),
        uniform::<f32>(&[1, 4, 4], 0.0, 1.0, &mut rng).cast(),
    ];
    let cast: Vec<Tensor<E>> = inputs.iter().map(|x| x.cast()).collect();
    let by_input = check_op(
        &cast,
        &[true, true, true],
        |t, v| {
            opts.arm(t);
            distance_metric(t, &weights, &cfg, DIST_LEVEL, v[0], v[1], v[2])
        },
        CheckOptions::new(STEP, seed),
    )?;
    let composite = DistanceProbe { cfg: &cfg, inputs: &inputs, opts };
    let probe = output_probe(&composite, &weights, seed)?;
    let grads = param_gradients(&composite, &weights, &DIST_PARAMS, &probe)?;
    let check = CheckOptions { max_coords: 16, ..CheckOptions::new(STEP, seed) };
    let by_param = check_params(&composite, &weights, &DIST_PARAMS, &probe, &[grads], check)?.remove(0);
    Ok(by_input.worst().max(by_param.worst()))
}

struct LossProbe<'a> {
    cfg: &'a ModelConfig,
    pair: &'a ImagePair<f32>,
    gt: &'a Tensor<f32>,
    opts: &'a SuiteOptions,
}

impl Composite for LossProbe<'_> {
    fn build<T: Element>(&self, t: &mut Tape<T>, w: &ModelWeights<T>) -> Result<Var> {
        self.opts.arm(t);
        let pair = ImagePair::new(self.pair.first.cast(), self.pair.second.cast())?;
        let vars = forward_on_tape(t, w, self.cfg, &pair, Stage::full())?;
        multi_level_loss_on_tape(t, &vars, &self.gt.cast(), LossKind::L2, &[0.32, 0.08, 0.02, 0.01, 0.005])
    }
}

/// Full multi-level loss on a random 64×64 instance, worst error of the
/// f32 and of the f64 analytic gradients. Both are compared against the
/// same central differences, evaluated in double precision on the
/// (exactly representable) instance.
fn loss_check(opts: &SuiteOptions, seed: u64) -> Result<[f64; 2]> {
    let cfg = ModelConfig { seed, ..tiny_config() };
    let weights = generic_weights(&cfg);
    let reference = weights.cast::<f64>();
    let data = SyntheticOptions { count: 1, size: 64, max_displacement: 0.5, piecewise: true, seed };
    let sample = make_synthetic_dataset(&data)?.remove(0);
    let composite = LossProbe { cfg: &cfg, pair: &sample.pair, gt: sample.flow.tensor(), opts };
    let probe = output_probe(&composite, &reference, seed)?;
    let analytic = [
        param_gradients(&composite, &weights, &LOSS_PARAMS, &probe)?,
        param_gradients(&composite, &reference, &LOSS_PARAMS, &probe)?,
    ];
    let check = CheckOptions { max_coords: 6, ..CheckOptions::new(STEP, seed) };
    let reports = check_params(&composite, &reference, &LOSS_PARAMS, &probe, &analytic, check)?;
    Ok([reports[0].worst(), reports[1].worst()])
}

fn composite(opts: &SuiteOptions, name: &str, tol: f64, f: fn(&SuiteOptions, u64) -> Result<f64>) -> CheckResult {
    let worst = opts
        .seeds()
        .into_iter()
        .map(|s| f(opts, s).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    result(format!("grad {name}"), worst, tol)
}

fn loss_composites(opts: &SuiteOptions) -> [CheckResult; 2] {
    let worst = opts.seeds().into_iter().map(|s| loss_check(opts, s).unwrap_or([f64::INFINITY; 2])).fold(
        [0.0f64; 2],
        |[a, b], [x, y]| [a.max(x), b.max(y)],
    );
    [
        result("grad multi_level_loss (f32)", worst[0], TOL_F32),
        result("grad multi_level_loss (f64)", worst[1], TOL_F64),
    ]
}

/// Per-op gradient checks in both precisions.
pub fn op_gradient_suite(opts: &SuiteOptions) -> Vec<CheckResult> {
    let mut out = run_op_cases::<f32>(opts, TOL_F32, "f32");
    out.extend(run_op_cases::<f64>(opts, TOL_F64, "f64"));
    out
}

/// Per-op and composite gradient checks in both precisions.
pub fn gradient_suite(opts: &SuiteOptions) -> Vec<CheckResult> {
    let mut out = op_gradient_suite(opts);
    out.push(composite(opts, "distance_metric (f32)", TOL_F32, distance_check::<f32>));
    out.push(composite(opts, "distance_metric (f64)", TOL_F64, distance_check::<f64>));
    out.extend(loss_composites(opts));
    out
}

/// Direct quadruple-loop convolution.
pub fn naive_conv2d(input: &Tensor<f64>, weights: &Tensor<f64>, bias: &[f64], spec: &ConvSpec) -> Tensor<f64> {
    let (c, h, w) = input.dims3().expect("3-d input");
    let s = match spec.stride {
        crate::tensor::Stride::By(s) => s,
        crate::tensor::Stride::Half => panic!("naive_conv2d handles integer strides"),
    };
    let (oh, ow) = spec.output_extent(h, w).expect("valid spec");
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    Tensor::from_fn(&[spec.out_channels, oh, ow], |i| {
        let (o, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let mut acc = bias[o];
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let sy = (y * s + ky) as isize - spec.pad_h as isize;
                    let sx = (x * s + kx) as isize - spec.pad_w as isize;
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        acc += weights.data()[((o * c + ci) * kh + ky) * kw + kx] * input.at3(ci, sy as usize, sx as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Dense cost volume by direct evaluation at every position.
pub fn dense_cost_volume(f1: &Tensor<f64>, f2: &Tensor<f64>, cfg: &MatchConfig) -> Tensor<f64> {
    let (c, h, w) = f1.dims3().expect("3-d");
    Tensor::from_fn(&[cfg.channels(), h, w], |i| {
        let (d, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (dx, dy) = cfg.displacement(d);
        let (x2, y2) = (x as isize + dx, y as isize + dy);
        if x2 < 0 || y2 < 0 || x2 >= w as isize || y2 >= h as isize {
            return 0.0;
        }
        (0..c).map(|ch| f1.at3(ch, y, x) * f2.at3(ch, y2 as usize, x2 as usize)).sum::<f64>() / c as f64
    })
}

/// Per-position sliding-window local convolution.
pub fn sliding_lconv(flow: &Tensor<f64>, filters: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = flow.dims3().expect("3-d");
    let win = (filters.shape()[0] as f64).sqrt() as usize;
    let half = (win / 2) as isize;
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let mut acc = 0.0;
        for dy in -half..=half {
            for dx in -half..=half {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    let j = ((dy + half) as usize) * win + (dx + half) as usize;
                    acc += filters.at3(j, y, x) * flow.at3(ch, sy as usize, sx as usize);
                }
            }
        }
        acc
    })
}

/// `exp(−D²) / Σ exp(−D²)` evaluated directly per position.
pub fn direct_filters(distance: &Tensor<f64>) -> Tensor<f64> {
    let (n, h, w) = distance.dims3().expect("3-d");
    Tensor::from_fn(&[n, h, w], |i| {
        let (j, p) = (i / (h * w), i % (h * w));
        let e = |k: usize| (-distance.data()[k * h * w + p].powi(2)).exp();
        e(j) / (0..n).map(e).sum::<f64>()
    })
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0)).fold(0.0, f64::max)
}

fn sparse_vs_dense(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = MatchConfig { radius: 6, displacement_stride: 2, sample_stride: 2 };
    let (h, w) = (rng.random_range(6..14), rng.random_range(6..14));
    let f1 = uniform::<f64>(&[5, h, w], -1.0, 1.0, rng);
    let f2 = uniform::<f64>(&[5, h, w], -1.0, 1.0, rng);
    let sparse = build_cost_volume(&f1, &f2, &cfg).expect("valid");
    let dense = dense_cost_volume(&f1, &f2, &cfg);
    let (gh, gw) = (h.div_ceil(2), w.div_ceil(2));
    let mut worst = 0.0f64;
    for d in 0..cfg.channels() {
        let g = |gy: usize, gx: usize| dense.at3(d, (gy * 2).min(h - 1), (gx * 2).min(w - 1));
        for y in 0..h {
            for x in 0..w {
                let expected = if y % 2 == 0 && x % 2 == 0 {
                    dense.at3(d, y, x)
                } else {
                    let (y0, x0) = (y / 2, x / 2);
                    let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
                    let ty = if y1 == y0 { 0.0 } else { (y % 2) as f64 / 2.0 };
                    let tx = if x1 == x0 { 0.0 } else { (x % 2) as f64 / 2.0 };
                    let top = g(y0, x0) * (1.0 - tx) + g(y0, x1) * tx;
                    let bot = g(y1, x0) * (1.0 - tx) + g(y1, x1) * tx;
                    top * (1.0 - ty) + bot * ty
                };
                let got = sparse.at3(d, y, x);
                let diff = if y % 2 == 0 && x % 2 == 0 {
                    // sampled positions must agree bit for bit
                    if got == expected { 0.0 } else { f64::INFINITY }
                } else {
                    (got - expected).abs()
                };
                worst = worst.max(diff);
            }
        }
    }
    worst
}

fn lconv_vs_sliding(rng: &mut ChaCha8Rng) -> f64 {
    let win = [3, 5, 7][rng.random_range(0..3)];
    let flow = uniform::<f64>(&[2, 9, 8], -4.0, 4.0, rng);
    let filters = build_filters(&uniform::<f64>(&[win * win, 9, 8], -2.0, 2.0, rng)).expect("valid");
    max_rel_diff(&f_lconv(&flow, &filters).expect("valid"), &sliding_lconv(&flow, &filters))
}

fn filters_vs_direct(rng: &mut ChaCha8Rng) -> f64 {
    let d = uniform::<f64>(&[25, 5, 6], -3.0, 3.0, rng);
    max_diff(&build_filters(&d).expect("valid"), &direct_filters(&d))
}

fn conv_vs_naive(rng: &mut ChaCha8Rng) -> f64 {
    let stride = rng.random_range(1..3);
    let spec = ConvSpec::same(2, 3, 3, stride);
    let x = uniform::<f64>(&[2, 5, 5], -1.0, 1.0, rng);
    let k = uniform::<f64>(&spec.weight_shape(), -1.0, 1.0, rng);
    let b = uniform::<f64>(&[3], -1.0, 1.0, rng);
    let fast = conv2d(&x, &k, Some(&b), &spec).expect("valid");
    max_diff(&fast, &naive_conv2d(&x, &k, b.data(), &spec))
}

fn warp_zero_identity(rng: &mut ChaCha8Rng) -> f64 {
    let f = uniform::<f32>(&[4, 7, 9], -5.0, 5.0, rng);
    let out = f_warp(&f, &Tensor::zeros(&[2, 7, 9])).expect("valid");
    let same = out.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    if same { 0.0 } else { f64::INFINITY }
}

fn warp_integer_shift(rng: &mut ChaCha8Rng) -> f64 {
    let (h, w) = (8, 9);
    let f = uniform::<f32>(&[3, h, w], -1.0, 1.0, rng);
    let (u, v) = (rng.random_range(-2i32..=2), rng.random_range(-2i32..=2));
    let flow = crate::warp::FlowField::constant(h, w, u as f32, v as f32);
    let out = f_warp(&f, flow.tensor()).expect("valid");
    let mut exact = true;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as i32 + u, y as i32 + v);
                if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                    exact &= out.at3(c, y, x) == f.at3(c, sy as usize, sx as usize);
                }
            }
        }
    }
    if exact { 0.0 } else { f64::INFINITY }
}

fn filter_column_sums(rng: &mut ChaCha8Rng) -> f64 {
    let d = uniform::<f32>(&[49, 6, 6], -30.0, 30.0, rng);
    let g = build_filters(&d).expect("valid");
    (0..36)
        .map(|p| ((0..49).map(|j| g.data()[j * 36 + p] as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Largest violation of the neighborhood min/max bounds.
fn lconv_convexity(rng: &mut ChaCha8Rng) -> f64 {
    let (h, w, win) = (7, 8, 5);
    let flow = uniform::<f64>(&[2, h, w], -4.0, 4.0, rng);
    let g = build_filters(&uniform::<f64>(&[win * win, h, w], -2.0, 2.0, rng)).expect("valid");
    let out = f_lconv(&flow, &g).expect("valid");
    let half = (win / 2) as isize;
    let mut worst = 0.0f64;
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (sy, sx) = (y as isize + dy, x as isize + dx);
                        // zero padding contributes zeros to the neighborhood
                        let v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            flow.at3(c, sy as usize, sx as usize)
                        } else {
                            0.0
                        };
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let o = out.at3(c, y, x);
                worst = worst.max(lo - o).max(o - hi);
            }
        }
    }
    worst.max(0.0)
}

/// Oracle equivalences and analytic invariants.
pub fn oracle_suite(opts: &SuiteOptions) -> Vec<CheckResult> {
    let cases: [(&str, fn(&mut ChaCha8Rng) -> f64, f64); 8] = [
        ("oracle conv2d vs loop", conv_vs_naive, 1e-9),
        ("oracle sparse cost volume vs dense", sparse_vs_dense, 1e-6),
        ("oracle f_lconv fold/pack vs sliding window", lconv_vs_sliding, 1e-5),
        ("oracle filters vs direct formula", filters_vs_direct, 1e-6),
        ("invariant f_warp zero-flow identity", warp_zero_identity, 0.5),
        ("invariant f_warp integer shift", warp_integer_shift, 0.5),
        ("invariant filter columns sum to 1", filter_column_sums, 1e-5),
        ("invariant f_lconv convexity", lconv_convexity, 1e-12),
    ];
    cases
        .iter()
        .map(|&(name, f, tol)| {
            let worst = opts
                .seeds()
                .into_iter()
                .map(|s| f(&mut ChaCha8Rng::seed_from_u64(s)))
                .fold(0.0, f64::max);
            result(name, worst, tol)
        })
        .collect()
}

/// Both suites.
pub fn run_all(opts: &SuiteOptions) -> Vec<CheckResult> {
    let mut out = gradient_suite(opts);
    out.extend(oracle_suite(opts));
    out
}
