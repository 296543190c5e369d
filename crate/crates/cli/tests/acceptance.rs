//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use rawnet_core::graph::{
    build_model, calibrate_base_width, count_macs, estimate_peak_memory, lint_opset, Executor, Graph, ModelConfig, Op, Variant,
    DEFAULT_BASE_WIDTH, TARGET_MODEL_BYTES,
};
use rawnet_core::kernels::Optimized;
use rawnet_core::metrics::{psnr_slices, ssim, ssim_plane, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use rawnet_core::raw::{load_raw, load_raw_files, RenderedImage};
use rawnet_core::verify::{self, KERNEL_CASES, KERNEL_OPS, NETWORK_SEEDS, NETWORK_TOLERANCE};
use rawnet_core::weights::WeightStore;
use rawnet_core::{Error, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const KERNEL_TIME_LIMIT: Duration = Duration::from_secs(300);
const LATENCY_RUNS: usize = 7;

fn rawnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rawnet")).args(args).output().expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn model(v: Variant) -> Graph {
    build_model(&ModelConfig::for_variant(v)).unwrap()
}

fn shape(b: usize, h: usize, w: usize, c: usize) -> Shape {
    Shape::new(b, h, w, c).unwrap()
}

fn kernel_oracles() -> Outcome {
    let report = verify::verify_kernels(&Optimized, verify::DEFAULT_SEED, KERNEL_CASES).map_err(|e| e.to_string())?;
    check!(report.ops.len() == KERNEL_OPS.len(), "{} ops reported", report.ops.len());
    for op in &report.ops {
        check!(op.cases >= 200, "{}: only {} cases", op.op, op.cases);
        check!(op.passed(), "{}: {} failing cases, worst ratio {:.3}", op.op, op.failures, op.worst_ratio);
    }
    let worst = report.ops.iter().map(|o| o.worst_ratio).fold(0.0, f64::max);

    let started = Instant::now();
    let out = rawnet(&["verify", "--module", "kernels"]);
    let elapsed = started.elapsed();
    check!(exit_code(&out) == 0, "verify --module kernels exited {}:\n{}", exit_code(&out), stdout(&out));
    check!(elapsed < KERNEL_TIME_LIMIT, "took {elapsed:?}");
    Ok(format!(
        "{} ops x {KERNEL_CASES} cases, worst deviation {worst:.3} of tolerance, CLI {:.1}s",
        report.ops.len(),
        elapsed.as_secs_f64()
    ))
}

fn network_equivalence() -> Outcome {
    let report =
        verify::verify_network(&Optimized, verify::DEFAULT_SEED, NETWORK_SEEDS, &Variant::ALL).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for op in &report.ops {
        check!(op.cases == NETWORK_SEEDS, "{}: {} seeds", op.op, op.cases);
        check!(op.worst_abs < NETWORK_TOLERANCE, "{}: max abs diff {:.3e}", op.op, op.worst_abs);
        worst = worst.max(op.worst_abs);
    }
    Ok(format!("{} variants x {NETWORK_SEEDS} seeds at 64x64, max abs diff {worst:.3e}", report.ops.len()))
}

fn structure() -> Outcome {
    check!(model(Variant::NoNorm).count_kind("instance_norm") == 0, "nonorm has instance_norm nodes");
    for v in [Variant::Slim, Variant::SlimPlus] {
        let g = model(v);
        let stem = g.nodes().iter().find(|n| n.name == "stem.conv").ok_or("no stem conv")?;
        check!(
            matches!(stem.op, Op::Conv2d { params, .. } if params.stride == 2),
            "{v}: stem is {:?}",
            stem.op
        );
        let (cfg, base) = (ModelConfig::for_variant(v), ModelConfig::default());
        for scale in 0..3 {
            check!(cfg.width(scale) == 2 * base.width(scale), "{v}: width at scale {scale} not doubled");
        }
    }
    let g = model(Variant::SlimPlus);
    let mut resizes = 0;
    for (id, node) in g.nodes().iter().enumerate() {
        if node.op == Op::ResizeBilinearX2 {
            resizes += 1;
            let consumers = g.consumers(id);
            check!(
                !consumers.is_empty() && consumers.iter().all(|&c| matches!(g.nodes()[c].op, Op::DepthwiseConv2d { .. })),
                "slim+ upsample `{}` not followed by a depthwise conv",
                node.name
            );
        }
    }
    check!(resizes > 0, "slim+ has no upsample");
    for v in Variant::ALL {
        let violations = lint_opset(&model(v));
        check!(violations.is_empty(), "{v}: {} opset violations", violations.len());
    }
    Ok(format!("nonorm norm-free, slim stride 2 and 2x widths, {resizes} slim+ upsamples depthwise-refined, lint clean"))
}

fn size_calibration() -> Outcome {
    let cal = calibrate_base_width(&ModelConfig::default(), TARGET_MODEL_BYTES, (8..=64).step_by(4)).map_err(|e| e.to_string())?;
    check!(cal.width == DEFAULT_BASE_WIDTH, "calibration picks {}, default is {DEFAULT_BASE_WIDTH}", cal.width);
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let file = dir.path().join("base.p2w");
    let out = rawnet(&["init-weights", "--variant", "base", "--output", file.to_str().unwrap()]);
    check!(exit_code(&out) == 0, "init-weights exited {}", exit_code(&out));
    let bytes = std::fs::metadata(&file).map_err(|e| e.to_string())?.len();
    check!((1_800_000..=5_400_000).contains(&bytes), ".p2w is {bytes} bytes");
    Ok(format!("base_width {DEFAULT_BASE_WIDTH}, .p2w {bytes} bytes ({:.2} MB)", bytes as f64 / 1e6))
}

fn compute_ordering() -> Outcome {
    let input = shape(1, 1088, 1920, 1);
    let macs = |v| count_macs(&model(v), input).unwrap();
    let (plus, slim, base) = (macs(Variant::SlimPlus), macs(Variant::Slim), macs(Variant::Base));
    check!(plus < slim && slim < base, "MACs {plus} / {slim} / {base}");

    let runs = LATENCY_RUNS.to_string();
    let out = rawnet(&[
        "bench", "--variant", "slim+", "--variant", "slim", "--variant", "base", "--resolution", "1920x1088", "--runs", &runs, "--json",
    ]);
    check!(exit_code(&out) == 0, "bench exited {}", exit_code(&out));
    let mut median = std::collections::HashMap::new();
    for line in stdout(&out).lines() {
        let record: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        check!(record["runs"].as_u64() == Some(LATENCY_RUNS as u64), "record with {} runs", record["runs"]);
        median.insert(record["variant"].as_str().unwrap_or_default().to_string(), record["median_ms"].as_f64().unwrap_or(f64::NAN));
    }
    let ms = |v: &str| median.get(v).copied().unwrap_or(f64::NAN);
    let summary = format!(
        "GMACs {:.2} < {:.2} < {:.2}; median ms over {LATENCY_RUNS} runs {:.0} / {:.0} / {:.0}",
        plus as f64 / 1e9,
        slim as f64 / 1e9,
        base as f64 / 1e9,
        ms("slim+"),
        ms("slim"),
        ms("base")
    );
    check!(ms("slim+") < ms("slim") && ms("slim") < ms("base"), "latency ordering violated: {summary}");
    Ok(summary)
}

fn memory() -> Outcome {
    let g = model(Variant::Base);
    let peak = |h, w| estimate_peak_memory(&g, shape(1, h, w, 1)).map(|m| m.peak_activation_bytes as f64 / 1e9);
    let twelve = peak(3008, 4000).map_err(|e| e.to_string())?;
    let full_hd = peak(1088, 1920).map_err(|e| e.to_string())?;
    check!((0.35..=5.6).contains(&twelve), "12MP estimate {twelve:.3} GB");
    check!(twelve > full_hd, "12MP {twelve:.3} GB not above FullHD {full_hd:.3} GB");
    Ok(format!("12MP {twelve:.3} GB > FullHD {full_hd:.3} GB"))
}

fn end_to_end() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (raw, meta, weights, image) = (p("frame.pgm"), p("frame.toml"), p("base.p2w"), p("out.png"));
    for args in [
        vec!["synth-raw", "--width", "512", "--height", "512", "--cfa", "RGGB", "--output", &raw, "--meta", &meta],
        vec!["init-weights", "--variant", "base", "--output", &weights],
        vec!["process", "--input", &raw, "--meta", &meta, "--weights", &weights, "--output", &image],
    ] {
        let out = rawnet(&args);
        check!(exit_code(&out) == 0, "`{}` exited {}", args[0], exit_code(&out));
    }
    let rendered = RenderedImage::load(&image).map_err(|e| e.to_string())?;
    check!((rendered.width(), rendered.height()) == (512, 512), "image is {}x{}", rendered.width(), rendered.height());

    let frame = load_raw_files(Path::new(&raw), Path::new(&meta)).map_err(|e| e.to_string())?;
    let store = WeightStore::load_file(&weights).map_err(|e| e.to_string())?;
    let graph = model(Variant::Base);
    let input = frame.normalize();
    let run = |threads| Executor::new(&Optimized, Some(threads)).and_then(|e| e.run(&graph, &store, &input));
    let first = run(1).map_err(|e| e.to_string())?;
    check!(first.shape() == shape(1, 512, 512, 3), "network output {}", first.shape());
    check!(first.data().iter().all(|&v| v > -1.0 && v < 1.0), "output outside (-1, 1)");
    let (lo, hi) = first.data().iter().fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    check!(run(1).map_err(|e| e.to_string())? == first, "single-worker runs differ");
    let mut spread = 0.0f32;
    for threads in [2, 4] {
        spread = spread.max(run(threads).and_then(|t| t.max_abs_diff(&first)).map_err(|e| e.to_string())?);
    }
    check!(spread <= 1e-5, "worker counts differ by {spread:e}");
    Ok(format!("512x512 RGB, outputs in [{lo:.4}, {hi:.4}], repeat bit-identical, worker spread {spread:e}"))
}

/// Per-window SSIM with an explicit 2-D Gaussian window.
fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut win = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for (i, v) in win.iter_mut().enumerate() {
        let (dy, dx) = ((i / SSIM_WINDOW) as f64 - r, (i % SSIM_WINDOW) as f64 - r);
        *v = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let norm: f64 = win.iter().sum();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    let positions = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let taps = || (0..SSIM_WINDOW * SSIM_WINDOW).map(|i| (win[i] / norm, (y + i / SSIM_WINDOW) * w + x + i % SSIM_WINDOW));
            let mx: f64 = taps().map(|(k, j)| k * a[j]).sum();
            let my: f64 = taps().map(|(k, j)| k * b[j]).sum();
            let vx: f64 = taps().map(|(k, j)| k * (a[j] - mx).powi(2)).sum();
            let vy: f64 = taps().map(|(k, j)| k * (b[j] - my).powi(2)).sum();
            let cov: f64 = taps().map(|(k, j)| k * (a[j] - mx) * (b[j] - my)).sum();
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / positions as f64
}

fn metrics() -> Outcome {
    let a = vec![0.1f64; 32 * 32];
    let b = vec![0.0f64; 32 * 32];
    let psnr = psnr_slices(&a, &b).map_err(|e| e.to_string())?;
    check!((psnr - 20.0).abs() <= 1e-12, "uniform 0.1 difference gives {psnr} dB");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(shape(1, 32, 32, 3), |_, _, _, _| rng.gen());
    let self_ssim = ssim(&x, &x).map_err(|e| e.to_string())?;
    check!((self_ssim - 1.0).abs() <= 1e-9, "ssim(x, x) = {self_ssim}");

    let mut worst = 0.0f64;
    for _ in 0..10 {
        let p: Vec<f64> = (0..32 * 32).map(|_| rng.gen()).collect();
        let q: Vec<f64> = p.iter().map(|v| (v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
        let fast = ssim_plane(&p, &q, 32, 32).map_err(|e| e.to_string())?;
        worst = worst.max((fast - naive_ssim(&p, &q, 32, 32)).abs());
    }
    check!(worst <= 1e-6, "ssim differs from the windowed oracle by {worst:e}");
    Ok(format!("psnr {psnr:.12} dB, ssim(x,x) {self_ssim:.12}, oracle gap {worst:.1e}"))
}

fn random_store(rng: &mut ChaCha8Rng) -> WeightStore {
    let mut w = WeightStore::new();
    for i in 0..rng.gen_range(0..8) {
        let dims: Vec<usize> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(1..=5)).collect();
        let data = (0..dims.iter().product()).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
        w.insert(format!("n{i}.{}", rng.gen::<u16>()), dims, data).unwrap();
    }
    w
}

fn formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut flips = 0;
    for i in 0..100 {
        let store = random_store(&mut rng);
        let bytes = store.to_bytes();
        let back = WeightStore::from_bytes(&bytes).map_err(|e| format!("store {i}: {e}"))?;
        check!(back == store && back.to_bytes() == bytes, "store {i} does not round-trip");
        for pos in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[pos] ^= rng.gen_range(1..=255u8);
            check!(WeightStore::from_bytes(&bad).is_err(), "store {i}: change at byte {pos} accepted");
            flips += 1;
        }
    }

    let sidecar = "cfa_pattern = \"RGGB\"\nblack_level = 64\nwhite_level = 1023\n";
    let mut good = b"P5\n4 4\n1023\n".to_vec();
    good.extend((0..16u16).flat_map(|v| (64 + v * 50).to_be_bytes()));
    check!(load_raw(&good[..], sidecar.as_bytes()).is_ok(), "valid fixture rejected");
    let mut bad_magic = good.clone();
    bad_magic[1] = b'2';
    let fixtures: [(&str, &[u8], &str, fn(&Error) -> bool); 4] = [
        ("bad magic", &bad_magic, sidecar, |e| matches!(e, Error::Format(_))),
        ("truncated payload", &good[..good.len() - 5], sidecar, |e| matches!(e, Error::Truncation(_))),
        ("missing key", &good, "cfa_pattern = \"RGGB\"\nblack_level = 64\n", |e| matches!(e, Error::Metadata(m) if m.contains("white_level"))),
        ("inverted levels", &good, "cfa_pattern = \"RGGB\"\nblack_level = 1023\nwhite_level = 64\n", |e| matches!(e, Error::Metadata(_))),
    ];
    for (name, mosaic, meta, expected) in fixtures {
        match load_raw(mosaic, meta.as_bytes()) {
            Ok(_) => return Err(format!("{name}: accepted")),
            Err(e) => check!(expected(&e), "{name}: wrong class: {e}"),
        }
    }
    Ok(format!("100 stores round-trip, {flips} single-byte corruptions detected, 4 RAW fixtures rejected"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("kernel oracle suite", kernel_oracles),
        ("full-network equivalence", network_equivalence),
        ("structural variant suite", structure),
        ("size calibration", size_calibration),
        ("compute ordering", compute_ordering),
        ("memory estimate", memory),
        ("end-to-end pipeline", end_to_end),
        ("metrics", metrics),
        ("format robustness", formats),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, criterion)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail} [{secs:.1}s]", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL {}. {name}: {reason} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
