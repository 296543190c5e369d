//! Network structure, analysis figures and executor contracts.

use rawnet_core::graph::{
    build_model, cam_block, count_macs, count_params, estimate_peak_memory, grouped_residual_block, lint_opset, sam_block, Executor, Graph,
    GraphBuilder, ModelConfig, Op, Variant,
};
use rawnet_core::graph::{calibrate_base_width, DEFAULT_BASE_WIDTH, TARGET_MODEL_BYTES};
use rawnet_core::kernels::{Activation, Backend, ConvParams, Elementwise, Optimized, Reference};
use rawnet_core::weights::{random_init, WeightStore};
use rawnet_core::{Error, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GB: f64 = 1e9;

fn shape(b: usize, h: usize, w: usize, c: usize) -> Shape {
    Shape::new(b, h, w, c).unwrap()
}

fn model(v: Variant) -> Graph {
    build_model(&ModelConfig::for_variant(v)).unwrap()
}

fn random(seed: u64, s: Shape, lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(s, |_, _, _, _| rng.gen_range(lo..hi))
}

fn zero_entry(w: &mut WeightStore, name: &str) {
    let dims = w.get(name).unwrap().dims().to_vec();
    let n = dims.iter().product();
    w.insert(name, dims, vec![0.0; n]).unwrap();
}

fn tensor(w: &WeightStore, name: &str) -> Tensor {
    w.get(name).unwrap().to_tensor().unwrap()
}

fn values<'a>(w: &'a WeightStore, name: &str) -> &'a [f32] {
    w.get(name).unwrap().data()
}

/// `conv -> prelu` as named by the graph builder, evaluated on `be`.
fn conv_prelu(be: &dyn Backend, w: &WeightStore, scope: &str, x: &Tensor, kernel: usize, stride: usize) -> Tensor {
    let y = be
        .conv2d(x, &tensor(w, &format!("{scope}.conv.weight")), values(w, &format!("{scope}.conv.bias")), &ConvParams::same(kernel, stride, 1))
        .unwrap();
    be.prelu(&y, values(w, &format!("{scope}.act.alpha"))).unwrap()
}

fn assert_close(got: &Tensor, want: &Tensor, tol: f32) {
    let diff = got.max_abs_diff(want).unwrap();
    assert!(diff <= tol, "max abs diff {diff}");
}

#[test]
fn nonorm_has_no_instance_norm() {
    assert!(model(Variant::Base).count_kind("instance_norm") > 0);
    assert_eq!(model(Variant::NoNorm).count_kind("instance_norm"), 0);
}

#[test]
fn slim_stem_is_strided_and_wider() {
    let base = model(Variant::Base);
    for v in [Variant::Slim, Variant::SlimPlus] {
        let g = model(v);
        let stem = g.nodes().iter().find(|n| n.name == "stem.conv").unwrap();
        match &stem.op {
            Op::Conv2d { params, out_channels } => {
                assert_eq!(params.stride, 2);
                assert_eq!(*out_channels, 2 * DEFAULT_BASE_WIDTH);
            }
            other => panic!("stem is {other:?}"),
        }
        for scale in 0..3 {
            let cfg = ModelConfig::for_variant(v);
            assert_eq!(cfg.width(scale), 2 * ModelConfig::default().width(scale));
        }
        assert_eq!(g.count_kind("depth_to_space"), base.count_kind("depth_to_space") + 1);
    }
}

#[test]
fn slim_plus_refines_every_upsample_depthwise() {
    let g = model(Variant::SlimPlus);
    let resizes: Vec<usize> = (0..g.nodes().len()).filter(|&i| g.nodes()[i].op == Op::ResizeBilinearX2).collect();
    assert_eq!(resizes.len(), 2);
    for id in resizes {
        let consumers = g.consumers(id);
        assert_eq!(consumers.len(), 1);
        assert!(matches!(g.nodes()[consumers[0]].op, Op::DepthwiseConv2d { kernel: 5, stride: 1 }));
    }
    for v in [Variant::Base, Variant::NoNorm, Variant::Slim] {
        let g = model(v);
        for (id, n) in g.nodes().iter().enumerate() {
            if n.op == Op::ResizeBilinearX2 {
                assert!(matches!(g.nodes()[g.consumers(id)[0]].op, Op::Conv2d { .. }), "{v}");
            }
        }
    }
}

#[test]
fn every_variant_passes_the_opset_lint() {
    for v in Variant::ALL {
        assert_eq!(lint_opset(&model(v)), vec![], "{v}");
    }
}

#[test]
fn compute_ordering_at_full_hd() {
    let input = shape(1, 1088, 1920, 1);
    let macs = |v| count_macs(&model(v), input).unwrap();
    assert!(macs(Variant::SlimPlus) < macs(Variant::Slim));
    assert!(macs(Variant::Slim) < macs(Variant::Base));
    assert!(count_params(&model(Variant::NoNorm)) < count_params(&model(Variant::Base)));
}

#[test]
fn memory_estimate_is_plausible() {
    let g = model(Variant::Base);
    let twelve = estimate_peak_memory(&g, shape(1, 3008, 4000, 1)).unwrap().peak_activation_bytes as f64;
    let full_hd = estimate_peak_memory(&g, shape(1, 1088, 1920, 1)).unwrap().peak_activation_bytes as f64;
    assert!((0.35 * GB..=5.6 * GB).contains(&twelve), "{}", twelve / GB);
    assert!(twelve > full_hd);
}

#[test]
fn calibrated_width_is_the_default() {
    let cal = calibrate_base_width(&ModelConfig::default(), TARGET_MODEL_BYTES, (8..=64).step_by(4)).unwrap();
    assert_eq!(cal.width, DEFAULT_BASE_WIDTH);
    assert!((1_800_000..=5_400_000).contains(&cal.bytes));
    // bytes grow with width
    assert!(cal.table.windows(2).all(|p| p[0].1 < p[1].1));
}

/// A graph holding only `block` applied to a `width`-channel input.
fn single_block(width: usize, block: impl FnOnce(&mut GraphBuilder, usize) -> usize) -> Graph {
    let mut g = GraphBuilder::new(width);
    let x = g.input();
    block(&mut g, x);
    g.finish(1, None)
}

#[test]
fn cam_with_zero_gate_halves_the_trunk() {
    let g = single_block(8, |g, x| cam_block(g, x, "cam").unwrap());
    let mut w = random_init(&g, 3);
    zero_entry(&mut w, "cam.fc2.conv.weight");
    let x = random(1, shape(1, 12, 12, 8), -1.0, 1.0);
    let trunk = conv_prelu(&Reference, &w, "cam.trunk", &x, 3, 1);
    let half = Tensor::from_fn(trunk.shape(), |b, h, ww, c| 0.5 * trunk.get(b, h, ww, c));
    for be in [&Reference as &dyn Backend, &Optimized] {
        let y = Executor::new(be, None).unwrap().run(&g, &w, &x).unwrap();
        assert_close(&y, &half, 0.0);
    }
}

#[test]
fn sam_with_zero_mask_path_halves_the_input() {
    let g = single_block(6, |g, x| sam_block(g, x, "sam").unwrap());
    let mut w = random_init(&g, 4);
    for name in ["sam.conv.conv.weight", "sam.conv.conv.bias", "sam.dw.weight", "sam.dw.bias"] {
        zero_entry(&mut w, name);
    }
    let x = random(2, shape(1, 9, 10, 6), -1.0, 1.0);
    let half = Tensor::from_fn(x.shape(), |b, h, ww, c| 0.5 * x.get(b, h, ww, c));
    let y = Executor::new(&Optimized, None).unwrap().run(&g, &w, &x).unwrap();
    assert_close(&y, &half, 0.0);
}

/// Random weights, so every parameter matters: both attention blocks
/// against a hand composition of reference kernels.
#[test]
fn attention_blocks_match_kernel_composition() {
    let width = 8;
    let x = random(5, shape(1, 14, 13, width), -1.0, 1.0);
    let randomize = |g: &Graph, seed| {
        let mut w = random_init(g, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<(String, Vec<usize>)> = w.iter().map(|(n, e)| (n.to_string(), e.dims().to_vec())).collect();
        for (name, dims) in names {
            let n = dims.iter().product();
            w.insert(name, dims, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        }
        w
    };

    let cam = single_block(width, |g, x| cam_block(g, x, "cam").unwrap());
    let w = randomize(&cam, 6);
    let r = &Reference;
    let trunk = conv_prelu(r, &w, "cam.trunk", &x, 3, 1);
    let a = conv_prelu(r, &w, "cam.reduce", &trunk, 1, 1);
    let a = conv_prelu(r, &w, "cam.stride3", &a, 3, 3);
    let a = conv_prelu(r, &w, "cam.fc1", &r.global_avg_pool(&a), 1, 1);
    let a = r.conv2d(&a, &tensor(&w, "cam.fc2.conv.weight"), values(&w, "cam.fc2.conv.bias"), &ConvParams::same(1, 1, 1)).unwrap();
    let want = r.elementwise(Elementwise::Mul, &trunk, &r.activation(Activation::Sigmoid, &a)).unwrap();
    assert_eq!(want.shape(), x.shape());
    let got = Executor::new(&Optimized, None).unwrap().run(&cam, &w, &x).unwrap();
    assert_close(&got, &want, 1e-5);

    let sam = single_block(width, |g, x| sam_block(g, x, "sam").unwrap());
    let w = randomize(&sam, 7);
    let m = conv_prelu(r, &w, "sam.conv", &x, 3, 1);
    let m = r.depthwise_conv2d(&m, &tensor(&w, "sam.dw.weight"), values(&w, "sam.dw.bias"), 1).unwrap();
    let want = r.elementwise(Elementwise::Mul, &x, &r.activation(Activation::Sigmoid, &m)).unwrap();
    let got = Executor::new(&Optimized, None).unwrap().run(&sam, &w, &x).unwrap();
    assert_close(&got, &want, 1e-5);
}

#[test]
fn residual_block_with_zero_branches_is_identity() {
    for (groups, norm) in [(4, true), (2, false)] {
        let g = single_block(8, |g, x| {
            grouped_residual_block(g, x, groups, norm.then_some(1e-5), "blk").unwrap()
        });
        let mut w = random_init(&g, 8);
        let names: Vec<String> = w
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.ends_with(".conv.weight") || n.ends_with(".conv.bias") || n.ends_with(".beta"))
            .collect();
        for name in &names {
            zero_entry(&mut w, name);
        }
        let x = random(9, shape(1, 6, 7, 8), -1.0, 1.0);
        for be in [&Reference as &dyn Backend, &Optimized] {
            assert_eq!(Executor::new(be, None).unwrap().run(&g, &w, &x).unwrap(), x);
        }
    }
}

#[test]
fn outputs_are_strictly_inside_the_unit_interval() {
    for v in Variant::ALL {
        let g = model(v);
        let w = random_init(&g, 10);
        let x = random(11, shape(1, 32, 48, 1), 0.0, 1.0);
        let y = Executor::new(&Optimized, None).unwrap().run(&g, &w, &x).unwrap();
        assert_eq!(y.shape(), shape(1, 32, 48, 3));
        assert!(y.data().iter().all(|&v| v > -1.0 && v < 1.0), "{v}");
    }
}

#[test]
fn single_worker_runs_are_bit_identical() {
    let g = model(Variant::Base);
    let w = random_init(&g, 12);
    let x = random(13, shape(2, 32, 32, 1), 0.0, 1.0);
    let exec = Executor::new(&Optimized, Some(1)).unwrap();
    let first = exec.run(&g, &w, &x).unwrap();
    assert_eq!(first, exec.run(&g, &w, &x).unwrap());
    let many = Executor::new(&Optimized, Some(3)).unwrap().run(&g, &w, &x).unwrap();
    assert!(first.max_abs_diff(&many).unwrap() <= 1e-5);
}

#[test]
fn misaligned_inputs_name_the_divisor() {
    for (v, divisor) in [(Variant::Base, 8), (Variant::NoNorm, 8), (Variant::Slim, 16), (Variant::SlimPlus, 16)] {
        let g = model(v);
        let w = random_init(&g, 0);
        let x = Tensor::zeros(shape(1, 24, 40, 1));
        let err = Executor::new(&Optimized, None).unwrap().run(&g, &w, &x);
        if 24 % divisor == 0 {
            assert!(err.is_ok());
        } else {
            let err = err.unwrap_err();
            assert!(matches!(err, Error::Alignment { divisor: d, .. } if d == divisor), "{v}: {err}");
        }
    }
    let g = model(Variant::Base);
    let err = g.check_input(shape(1, 250, 256, 1)).unwrap_err();
    assert!(err.to_string().contains("requires multiple of 8"));
}

#[test]
fn binding_errors_name_the_slot() {
    let base = model(Variant::Base);
    let slim_weights = random_init(&model(Variant::Slim), 0);
    let x = Tensor::zeros(shape(1, 32, 32, 1));
    let err = Executor::new(&Optimized, None).unwrap().run(&base, &slim_weights, &x).unwrap_err();
    match err {
        Error::Binding { slot, .. } => assert!(base.param_slots().iter().any(|s| s.name == slot), "{slot}"),
        other => panic!("expected binding error, got {other}"),
    }
    let mut partial = random_init(&base, 0);
    partial.remove("head.conv.bias");
    let err = Executor::new(&Reference, None).unwrap().run(&base, &partial, &x).unwrap_err();
    assert!(matches!(&err, Error::Binding { slot, .. } if slot == "head.conv.bias"), "{err}");
}

#[test]
fn inferred_output_matches_runtime_output() {
    for v in Variant::ALL {
        let g = model(v);
        let input = shape(1, 48, 32, 1);
        let inferred = g.infer_shapes(input).unwrap()[g.output()];
        let y = Executor::new(&Reference, None).unwrap().run(&g, &random_init(&g, 1), &Tensor::zeros(input)).unwrap();
        assert_eq!(y.shape(), inferred, "{v}");
    }
}
