//! Wall-clock latency of full-network inference.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::{build_model, count_macs, count_params, estimate_peak_memory, Executor, ModelConfig, Variant};
use crate::kernels::Optimized;
use crate::tensor::{Shape, Tensor};
use crate::weights::random_init;

pub const MIN_RUNS: usize = 3;

/// Weight and frame seed used when the caller does not pick one.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: String,
    pub width: usize,
    pub height: usize,
    pub runs: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub params: u64,
    pub macs: u64,
    pub peak_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub variant: Variant,
    pub width: usize,
    pub height: usize,
    pub runs: usize,
    /// `None` uses every available core.
    pub threads: Option<usize>,
    pub seed: u64,
}

/// Median of a non-empty sample; the mean of the middle pair for even counts.
pub fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

/// A uniform random Bayer plane in `[0, 1]`.
pub fn random_frame(height: usize, width: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(Shape::new(1, height, width, 1)?, |_, _, _, _| rng.gen()))
}

struct Prepared {
    graph: crate::graph::Graph,
    weights: crate::weights::WeightStore,
    frame: Tensor,
    shape: Shape,
    times: Vec<f64>,
}

fn prepare(cfg: &BenchConfig) -> Result<Prepared> {
    ensure!(cfg.runs >= MIN_RUNS, Config, "at least {MIN_RUNS} runs required, got {}", cfg.runs);
    let graph = build_model(&ModelConfig::for_variant(cfg.variant))?;
    let shape = Shape::new(1, cfg.height, cfg.width, 1)?;
    graph.check_input(shape)?;
    Ok(Prepared {
        weights: random_init(&graph, cfg.seed),
        frame: random_frame(cfg.height, cfg.width, cfg.seed)?,
        graph,
        shape,
        times: Vec::with_capacity(cfg.runs),
    })
}

/// Runs the optimized executor `runs` times on random weights and a fixed
/// random frame. Static figures come from the graph analysis at the same
/// resolution.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    Ok(run_bench_interleaved(std::slice::from_ref(cfg))?.remove(0))
}

/// Benchmarks several configurations round-robin, one run of each per
/// round, so that background load affects all of them alike.
pub fn run_bench_interleaved(configs: &[BenchConfig]) -> Result<Vec<BenchResult>> {
    let mut prepared = configs.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let rounds = configs.iter().map(|c| c.runs).max().unwrap_or(0);
    for round in 0..rounds {
        for (cfg, p) in configs.iter().zip(&mut prepared) {
            if round >= cfg.runs {
                continue;
            }
            let executor = Executor::new(&Optimized, cfg.threads)?;
            let started = Instant::now();
            let out = executor.run(&p.graph, &p.weights, &p.frame)?;
            p.times.push(started.elapsed().as_secs_f64() * 1e3);
            drop(out);
        }
    }
    configs
        .iter()
        .zip(prepared)
        .map(|(cfg, p)| {
            Ok(BenchResult {
                variant: cfg.variant.as_str().to_string(),
                width: cfg.width,
                height: cfg.height,
                runs: cfg.runs,
                median_ms: median(&p.times),
                min_ms: p.times.iter().copied().fold(f64::INFINITY, f64::min),
                params: count_params(&p.graph),
                macs: count_macs(&p.graph, p.shape)?,
                peak_bytes: estimate_peak_memory(&p.graph, p.shape)?.peak_activation_bytes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn cfg(runs: usize, width: usize) -> BenchConfig {
        BenchConfig {
            variant: Variant::Base,
            width,
            height: 32,
            runs,
            threads: Some(1),
            seed: DEFAULT_SEED,
        }
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn small_bench_is_consistent() {
        let r = run_bench(&cfg(3, 32)).unwrap();
        assert!(r.min_ms <= r.median_ms);
        let graph = build_model(&ModelConfig::default()).unwrap();
        assert_eq!(r.macs, count_macs(&graph, Shape::new(1, 32, 32, 1).unwrap()).unwrap());
    }

    #[test]
    fn interleaved_reports_each_config() {
        let slim = BenchConfig {
            variant: Variant::Slim,
            ..cfg(3, 32)
        };
        let results = run_bench_interleaved(&[cfg(4, 32), slim]).unwrap();
        assert_eq!(results.iter().map(|r| (r.variant.as_str(), r.runs)).collect::<Vec<_>>(), vec![("base", 4), ("slim", 3)]);
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(matches!(run_bench(&cfg(1, 32)), Err(Error::Config(_))));
        assert!(matches!(run_bench(&cfg(3, 30)), Err(Error::Alignment { .. })));
    }
}
