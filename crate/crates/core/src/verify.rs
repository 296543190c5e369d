//! Optimized-versus-reference equivalence suites.
//!
//! The kernel suite draws random shapes, parameters and data for every
//! operator and compares a candidate backend against [`Reference`]
//! element by element. The network suite does the same for whole graphs.
//! Reports are a pure function of the seed.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_model, Executor, ModelConfig, Variant};
use crate::kernels::{Activation, Backend, ConvParams, Elementwise, NormParams, Padding, Reference};
use crate::tensor::{Shape, Tensor};
use crate::weights::random_init;

pub const ABS_TOLERANCE: f64 = 1e-6;
pub const REL_TOLERANCE: f64 = 1e-5;
pub const KERNEL_CASES: usize = 200;

pub const NETWORK_SEEDS: usize = 20;
pub const NETWORK_SIZE: usize = 64;
pub const NETWORK_TOLERANCE: f64 = 1e-4;

pub const DEFAULT_SEED: u64 = 2024;

/// Operators covered by the kernel suite, named like graph node kinds.
pub const KERNEL_OPS: &[&str] = &[
    "conv2d",
    "depthwise_conv2d",
    "prelu",
    "tanh",
    "sigmoid",
    "instance_norm",
    "resize_bilinear",
    "space_to_depth",
    "depth_to_space",
    "max_pool",
    "avg_pool",
    "concat",
    "add",
    "mul",
    "split",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Kernels,
    Graph,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest absolute deviation seen.
    pub worst_abs: f64,
    /// Largest deviation as a fraction of the allowed tolerance.
    pub worst_ratio: f64,
    pub first_failure: Option<usize>,
}

impl OpReport {
    fn new(op: &str) -> Self {
        OpReport {
            op: op.to_string(),
            cases: 0,
            failures: 0,
            worst_abs: 0.0,
            worst_ratio: 0.0,
            first_failure: None,
        }
    }

    fn record(&mut self, case: usize, abs: f64, ratio: f64, ok: bool) {
        self.cases += 1;
        self.worst_abs = self.worst_abs.max(abs);
        self.worst_ratio = self.worst_ratio.max(ratio);
        if !ok {
            self.failures += 1;
            self.first_failure.get_or_insert(case);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub seed: u64,
    pub ops: Vec<OpReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &OpReport> {
        self.ops.iter().filter(|o| !o.passed())
    }

    pub fn merge(mut self, other: VerifyReport) -> Self {
        self.ops.extend(other.ops);
        self
    }

    /// One line per operator, then a verdict naming every failing op.
    pub fn render(&self) -> String {
        let width = self.ops.iter().map(|o| o.op.len()).max().unwrap_or(2).max(2);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>5}  {:>12}  {:>10}  status", "op", "cases", "worst_abs", "tol_used");
        for o in &self.ops {
            let status = match o.first_failure {
                None => "ok".to_string(),
                Some(case) => format!("FAIL ({} cases, first case {case}, seed {})", o.failures, self.seed),
            };
            let _ = writeln!(
                out,
                "{:<width$}  {:>5}  {:>12.3e}  {:>10.4}  {status}",
                o.op, o.cases, o.worst_abs, o.worst_ratio
            );
        }
        if self.passed() {
            let _ = writeln!(out, "verify passed (seed {})", self.seed);
        } else {
            let names: Vec<&str> = self.failing().map(|o| o.op.as_str()).collect();
            let _ = writeln!(out, "verify FAILED (seed {}): {}", self.seed, names.join(", "));
        }
        out
    }
}

/// Element-wise comparison `|a - b| <= abs + rel * |reference|`. Returns
/// `(max abs deviation, max ratio to the allowance, all within)`. Shape
/// mismatches and NaN count as infinite deviation.
pub fn compare(candidate: &Tensor, reference: &Tensor, abs_tol: f64, rel_tol: f64) -> (f64, f64, bool) {
    if candidate.shape() != reference.shape() {
        return (f64::INFINITY, f64::INFINITY, false);
    }
    let mut worst = (0.0f64, 0.0f64);
    for (&a, &r) in candidate.data().iter().zip(reference.data()) {
        let diff = (f64::from(a) - f64::from(r)).abs();
        let diff = if diff.is_nan() { f64::INFINITY } else { diff };
        let allowed = abs_tol + rel_tol * f64::from(r).abs();
        worst.0 = worst.0.max(diff);
        worst.1 = worst.1.max(diff / allowed);
    }
    (worst.0, worst.1, worst.1 <= 1.0)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn values(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn shape(batch: usize, height: usize, width: usize, channels: usize) -> Shape {
    Shape::new(batch, height, width, channels).expect("generated dims are non-zero")
}

/// A random tensor with an even spatial extent, for the 2×2 operators.
fn even_input(rng: &mut ChaCha8Rng) -> Tensor {
    let s = shape(rng.gen_range(1..=2), 2 * rng.gen_range(1..=6), 2 * rng.gen_range(1..=8), rng.gen_range(1..=9));
    uniform(rng, s, -2.0, 2.0)
}

fn any_input(rng: &mut ChaCha8Rng) -> Tensor {
    let s = shape(rng.gen_range(1..=2), rng.gen_range(1..=10), rng.gen_range(1..=20), rng.gen_range(1..=12));
    uniform(rng, s, -2.0, 2.0)
}

/// Runs one random case of `op` on a backend.
type Case = Box<dyn Fn(&dyn Backend) -> Result<Tensor>>;

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "conv2d" => {
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let groups = rng.gen_range(1..=4);
            let icg = rng.gen_range(1..=6);
            let ocg = rng.gen_range(1..=20);
            let stride = rng.gen_range(1..=3);
            let padding = if rng.gen_bool(0.75) { Padding::SameZero } else { Padding::Valid };
            let lo = if padding == Padding::Valid { k } else { 1 };
            let s = shape(rng.gen_range(1..=2), rng.gen_range(lo..=lo + 9), rng.gen_range(lo..=lo + 27), groups * icg);
            let x = uniform(rng, s, -1.0, 1.0);
            let w = uniform(rng, shape(groups * ocg, k, k, icg), -1.0, 1.0);
            let bias = values(rng, groups * ocg, -1.0, 1.0);
            let p = ConvParams {
                kernel_height: k,
                kernel_width: k,
                stride,
                groups,
                padding,
            };
            Box::new(move |b| b.conv2d(&x, &w, &bias, &p))
        }
        "depthwise_conv2d" => {
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let stride = rng.gen_range(1..=2);
            let x = any_input(rng);
            let c = x.shape().channels;
            let w = uniform(rng, shape(c, k, k, 1), -1.0, 1.0);
            let bias = values(rng, c, -1.0, 1.0);
            Box::new(move |b| b.depthwise_conv2d(&x, &w, &bias, stride))
        }
        "prelu" => {
            let x = any_input(rng);
            let slopes = values(rng, x.shape().channels, -0.5, 1.0);
            Box::new(move |b| b.prelu(&x, &slopes))
        }
        "tanh" | "sigmoid" => {
            let kind = if op == "tanh" { Activation::Tanh } else { Activation::Sigmoid };
            let s = any_input(rng).shape();
            let x = uniform(rng, s, -30.0, 30.0);
            Box::new(move |b| Ok(b.activation(kind, &x)))
        }
        "instance_norm" => {
            let s = any_input(rng).shape();
            let offset = rng.gen_range(-3.0..3.0);
            let x = uniform(rng, s, offset - 1.0, offset + 1.0);
            let epsilon = rng.gen_range(1e-5..1e-2);
            let gamma = values(rng, s.channels, -2.0, 2.0);
            let beta = values(rng, s.channels, -1.0, 1.0);
            Box::new(move |b| {
                b.instance_norm(
                    &x,
                    &NormParams {
                        epsilon,
                        gamma: &gamma,
                        beta: &beta,
                    },
                )
            })
        }
        "resize_bilinear" => {
            let x = any_input(rng);
            Box::new(move |b| Ok(b.bilinear_upsample_x2(&x)))
        }
        "space_to_depth" => {
            let x = even_input(rng);
            Box::new(move |b| b.space_to_depth(&x))
        }
        "depth_to_space" => {
            let s = any_input(rng).shape();
            let c = 4 * rng.gen_range(1..=4);
            let x = uniform(rng, s.with_channels(c), -1.0, 1.0);
            Box::new(move |b| b.depth_to_space(&x))
        }
        "max_pool" => {
            let x = even_input(rng);
            Box::new(move |b| b.max_pool_2x2(&x))
        }
        "avg_pool" => {
            let x = any_input(rng);
            Box::new(move |b| Ok(b.global_avg_pool(&x)))
        }
        "concat" => {
            let a = any_input(rng);
            let other = a.shape().with_channels(rng.gen_range(1..=12));
            let c = uniform(rng, other, -1.0, 1.0);
            Box::new(move |b| b.concat_channels(&a, &c))
        }
        "add" | "mul" => {
            let kind = if op == "add" { Elementwise::Add } else { Elementwise::Mul };
            let a = any_input(rng);
            let dims = a.shape().dims().map(|d| if rng.gen_bool(0.3) { 1 } else { d });
            let c = uniform(rng, shape(dims[0], dims[1], dims[2], dims[3]), -2.0, 2.0);
            Box::new(move |b| b.elementwise(kind, &a, &c))
        }
        "split" => {
            let x = any_input(rng);
            let c = x.shape().channels;
            let start = rng.gen_range(0..c);
            let len = rng.gen_range(1..=c - start);
            Box::new(move |b| b.slice_channels(&x, start, len))
        }
        other => unreachable!("no generator for `{other}`"),
    }
}

fn op_rng(seed: u64, op_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(op_index as u64 + 1);
    rng
}

/// `cases` random comparisons per operator. A candidate error on a case
/// the reference accepts counts as a failure.
pub fn verify_kernels(candidate: &dyn Backend, seed: u64, cases: usize) -> Result<VerifyReport> {
    let mut ops = Vec::with_capacity(KERNEL_OPS.len());
    for (index, &op) in KERNEL_OPS.iter().enumerate() {
        let mut rng = op_rng(seed, index);
        let mut report = OpReport::new(op);
        for case in 0..cases {
            let run = make_case(op, &mut rng);
            let want = run(&Reference).map_err(|e| Error::Validation(format!("{op} case {case}: generator produced an invalid case: {e}")))?;
            match run(candidate) {
                Ok(got) => {
                    let (abs, ratio, ok) = compare(&got, &want, ABS_TOLERANCE, REL_TOLERANCE);
                    report.record(case, abs, ratio, ok);
                }
                Err(_) => report.record(case, f64::INFINITY, f64::INFINITY, false),
            }
        }
        ops.push(report);
    }
    Ok(VerifyReport { seed, ops })
}

/// Whole-network comparison at 64×64 for `seeds` consecutive seeds per
/// variant, each with its own random weights and input. Passing requires
/// a max-abs difference below [`NETWORK_TOLERANCE`].
pub fn verify_network(candidate: &dyn Backend, seed: u64, seeds: usize, variants: &[Variant]) -> Result<VerifyReport> {
    let reference = Executor::new(&Reference, None)?;
    let optimized = Executor::new(candidate, None)?;
    let mut ops = Vec::with_capacity(variants.len());
    for &variant in variants {
        let graph = build_model(&ModelConfig::for_variant(variant))?;
        let mut report = OpReport::new(&format!("network:{variant}"));
        for i in 0..seeds {
            let case_seed = seed.wrapping_add(i as u64);
            let weights = random_init(&graph, case_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            let input = uniform(&mut rng, shape(1, NETWORK_SIZE, NETWORK_SIZE, 1), 0.0, 1.0);
            let want = reference.run(&graph, &weights, &input)?;
            match optimized.run(&graph, &weights, &input) {
                Ok(got) => {
                    let (abs, _, _) = compare(&got, &want, 0.0, 0.0);
                    report.record(i, abs, abs / NETWORK_TOLERANCE, abs < NETWORK_TOLERANCE);
                }
                Err(_) => report.record(i, f64::INFINITY, f64::INFINITY, false),
            }
        }
        ops.push(report);
    }
    Ok(VerifyReport { seed, ops })
}

pub fn run_suite(candidate: &dyn Backend, suite: Suite, seed: u64) -> Result<VerifyReport> {
    let kernels = || verify_kernels(candidate, seed, KERNEL_CASES);
    let network = || verify_network(candidate, seed, NETWORK_SEEDS, &Variant::ALL);
    match suite {
        Suite::Kernels => kernels(),
        Suite::Graph => network(),
        Suite::All => Ok(kernels()?.merge(network()?)),
    }
}

/// Wraps a backend and nudges one element of every result of a single
/// operator. Test fixture for the fault-detection path.
pub struct FaultyBackend<'a> {
    inner: &'a dyn Backend,
    op: String,
}

impl<'a> FaultyBackend<'a> {
    pub fn new(inner: &'a dyn Backend, op: &str) -> Result<Self> {
        if !KERNEL_OPS.contains(&op) {
            return Err(Error::Config(format!("unknown operator `{op}`")));
        }
        Ok(FaultyBackend {
            inner,
            op: op.to_string(),
        })
    }

    fn taint(&self, op: &str, t: Tensor) -> Tensor {
        if op != self.op {
            return t;
        }
        let s = t.shape();
        let mut data = t.into_data();
        let mid = data.len() / 2;
        data[mid] += 1e-3 * (1.0 + data[mid].abs());
        Tensor::from_vec(s, data).expect("same length")
    }
}

impl Backend for FaultyBackend<'_> {
    fn name(&self) -> &'static str {
        "faulty"
    }

    fn conv2d(&self, input: &Tensor, weights: &Tensor, bias: &[f32], p: &ConvParams) -> Result<Tensor> {
        Ok(self.taint("conv2d", self.inner.conv2d(input, weights, bias, p)?))
    }

    fn depthwise_conv2d(&self, input: &Tensor, weights: &Tensor, bias: &[f32], stride: usize) -> Result<Tensor> {
        Ok(self.taint("depthwise_conv2d", self.inner.depthwise_conv2d(input, weights, bias, stride)?))
    }

    fn prelu(&self, input: &Tensor, slopes: &[f32]) -> Result<Tensor> {
        Ok(self.taint("prelu", self.inner.prelu(input, slopes)?))
    }

    fn activation(&self, kind: Activation, input: &Tensor) -> Tensor {
        let name = match kind {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        };
        self.taint(name, self.inner.activation(kind, input))
    }

    fn instance_norm(&self, input: &Tensor, p: &NormParams) -> Result<Tensor> {
        Ok(self.taint("instance_norm", self.inner.instance_norm(input, p)?))
    }

    fn bilinear_upsample_x2(&self, input: &Tensor) -> Tensor {
        self.taint("resize_bilinear", self.inner.bilinear_upsample_x2(input))
    }

    fn space_to_depth(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.taint("space_to_depth", self.inner.space_to_depth(input)?))
    }

    fn depth_to_space(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.taint("depth_to_space", self.inner.depth_to_space(input)?))
    }

    fn max_pool_2x2(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.taint("max_pool", self.inner.max_pool_2x2(input)?))
    }

    fn global_avg_pool(&self, input: &Tensor) -> Tensor {
        self.taint("avg_pool", self.inner.global_avg_pool(input))
    }

    fn concat_channels(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.taint("concat", self.inner.concat_channels(a, b)?))
    }

    fn elementwise(&self, kind: Elementwise, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let name = match kind {
            Elementwise::Add => "add",
            Elementwise::Mul => "mul",
        };
        Ok(self.taint(name, self.inner.elementwise(kind, a, b)?))
    }

    fn slice_channels(&self, input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        Ok(self.taint("split", self.inner.slice_channels(input, start, len)?))
    }
}
