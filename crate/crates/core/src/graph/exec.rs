use std::borrow::Cow;
use std::collections::HashMap;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::{ThreadPool, ThreadPoolBuilder};

use super::{Graph, Op};
use crate::error::{ensure, Error, Result};
use crate::kernels::{Activation, Backend, Elementwise, NormParams, Optimized, Reference};
use crate::tensor::Tensor;
use crate::weights::{bind_check, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPath {
    Optimized,
    Reference,
}

impl ExecPath {
    pub fn backend(self) -> &'static dyn Backend {
        match self {
            ExecPath::Optimized => &Optimized,
            ExecPath::Reference => &Reference,
        }
    }
}

impl FromStr for ExecPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimized" => Ok(ExecPath::Optimized),
            "reference" => Ok(ExecPath::Reference),
            other => Err(Error::Config(format!("unknown path `{other}`"))),
        }
    }
}

/// Runs graphs on one backend, optionally inside a dedicated worker pool.
/// Nodes execute strictly in order; parallelism is inside kernels only.
pub struct Executor<'b> {
    backend: &'b dyn Backend,
    pool: Option<ThreadPool>,
}

impl<'b> Executor<'b> {
    /// `threads = None` uses the global rayon pool.
    pub fn new(backend: &'b dyn Backend, threads: Option<usize>) -> Result<Self> {
        let pool = match threads {
            None => None,
            Some(n) => {
                ensure!(n >= 1, Config, "thread count must be >= 1");
                Some(
                    ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build()
                        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?,
                )
            }
        };
        Ok(Executor { backend, pool })
    }

    pub fn run(&self, graph: &Graph, weights: &WeightStore, input: &Tensor) -> Result<Tensor> {
        match &self.pool {
            Some(pool) => pool.install(|| execute(self.backend, graph, weights, input, None)),
            None => execute(self.backend, graph, weights, input, None),
        }
    }

    /// Like [`Executor::run`], also returning the wall time of every node.
    pub fn run_profiled(&self, graph: &Graph, weights: &WeightStore, input: &Tensor) -> Result<(Tensor, Vec<Duration>)> {
        let mut times = Vec::with_capacity(graph.nodes().len());
        let out = match &self.pool {
            Some(pool) => pool.install(|| execute(self.backend, graph, weights, input, Some(&mut times))),
            None => execute(self.backend, graph, weights, input, Some(&mut times)),
        }?;
        Ok((out, times))
    }
}

/// Executes `graph` on `input` with the chosen kernel path.
pub fn run_inference(graph: &Graph, weights: &WeightStore, input: &Tensor, path: ExecPath) -> Result<Tensor> {
    execute(path.backend(), graph, weights, input, None)
}

fn param<'a>(bound: &'a HashMap<&str, Tensor>, node: &str, suffix: &str) -> Result<&'a Tensor> {
    let key = format!("{node}.{suffix}");
    bound.get(key.as_str()).ok_or_else(|| Error::Binding {
        slot: key,
        reason: "no entry in weight store".into(),
    })
}

fn execute(
    backend: &dyn Backend,
    graph: &Graph,
    weights: &WeightStore,
    input: &Tensor,
    mut profile: Option<&mut Vec<Duration>>,
) -> Result<Tensor> {
    graph.check_input(input.shape())?;
    let report = bind_check(graph, weights);
    if let Some(err) = report.first_error(graph) {
        return Err(err);
    }
    let bound: HashMap<&str, Tensor> = weights
        .iter()
        .map(|(name, entry)| Ok((name, entry.to_tensor()?)))
        .collect::<Result<_>>()?;

    let nodes = graph.nodes();
    let output = graph.output();
    let mut uses = vec![0usize; nodes.len()];
    for node in nodes {
        for &i in &node.inputs {
            uses[i] += 1;
        }
    }
    // The input node borrows the caller's tensor instead of copying it.
    let mut values: Vec<Option<Cow<'_, Tensor>>> = vec![None; nodes.len()];

    for (id, node) in nodes.iter().enumerate() {
        let arg = |k: usize| -> &Tensor { values[node.inputs[k]].as_deref().expect("inputs are computed before use") };
        let name = node.name.as_str();
        let started = Instant::now();
        let value = match &node.op {
            Op::Input => {
                values[id] = Some(Cow::Borrowed(input));
                if let Some(times) = profile.as_deref_mut() {
                    times.push(Duration::ZERO);
                }
                continue;
            }
            Op::Conv2d { params, .. } => {
                let w = param(&bound, name, "weight")?;
                let b = param(&bound, name, "bias")?;
                backend.conv2d(arg(0), w, b.data(), params)?
            }
            Op::DepthwiseConv2d { stride, .. } => {
                let w = param(&bound, name, "weight")?;
                let b = param(&bound, name, "bias")?;
                backend.depthwise_conv2d(arg(0), w, b.data(), *stride)?
            }
            Op::Prelu => backend.prelu(arg(0), param(&bound, name, "alpha")?.data())?,
            Op::Tanh => backend.activation(Activation::Tanh, arg(0)),
            Op::Sigmoid => backend.activation(Activation::Sigmoid, arg(0)),
            Op::InstanceNorm { epsilon } => {
                let gamma = param(&bound, name, "gamma")?;
                let beta = param(&bound, name, "beta")?;
                let p = NormParams {
                    epsilon: *epsilon,
                    gamma: gamma.data(),
                    beta: beta.data(),
                };
                backend.instance_norm(arg(0), &p)?
            }
            Op::MaxPool2x2 => backend.max_pool_2x2(arg(0))?,
            Op::GlobalAvgPool => backend.global_avg_pool(arg(0)),
            Op::ResizeBilinearX2 => backend.bilinear_upsample_x2(arg(0)),
            Op::SpaceToDepth => backend.space_to_depth(arg(0))?,
            Op::DepthToSpace => backend.depth_to_space(arg(0))?,
            Op::Concat => backend.concat_channels(arg(0), arg(1))?,
            Op::Add => backend.elementwise(Elementwise::Add, arg(0), arg(1))?,
            Op::Mul => backend.elementwise(Elementwise::Mul, arg(0), arg(1))?,
            Op::Split { start, len } => backend.slice_channels(arg(0), *start, *len)?,
            Op::Custom { kind } => return Err(Error::Unsupported(kind.clone())),
        };
        if let Some(times) = profile.as_deref_mut() {
            times.push(started.elapsed());
        }
        for &i in &node.inputs {
            uses[i] -= 1;
            if uses[i] == 0 && i != output {
                values[i] = None;
            }
        }
        values[id] = Some(Cow::Owned(value));
    }
    Ok(values[output].take().expect("output computed").into_owned())
}
