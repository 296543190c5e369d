use std::ops::Range;

use rayon::prelude::*;

use super::*;

/// Output pixels per register tile.
const PX: usize = 4;
/// Output channels per register tile. Packed weights are zero-padded to a
/// multiple of this.
const OC: usize = 16;

/// Pixels per partial sum in the reductions. Fixed, so the summation order
/// does not depend on the worker count.
const REDUCE_CHUNK: usize = 4096;

/// Row-parallel implementations over the channels-minor layout.
///
/// Every output element accumulates its terms in the same order as
/// [`Reference`], so results do not depend on how rows are spread across
/// workers. Out-of-range taps contribute `0 * w`, which leaves the running
/// sum unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Optimized;

struct ConvPlan<'a> {
    input: &'a [f32],
    in_shape: Shape,
    /// `[groups][oc_blocks][kh][kw][in_per_group][OC]`
    packed: Vec<f32>,
    bias: &'a [f32],
    kh: usize,
    kw: usize,
    stride: usize,
    groups: usize,
    in_per_group: usize,
    out_per_group: usize,
    oc_blocks: usize,
    out_channels: usize,
    out_width: usize,
    out_height: usize,
    pad_top: usize,
    pad_left: usize,
}

impl<'a> ConvPlan<'a> {
    fn block(&self, g: usize, ob: usize) -> &[f32] {
        let len = self.kh * self.kw * self.in_per_group * OC;
        &self.packed[(g * self.oc_blocks + ob) * len..][..len]
    }

    /// Adds the bias and writes finished tile sums for pixels starting at `ox0`.
    #[inline(always)]
    fn store(&self, acc: &[[f32; OC]], ox0: usize, oc0: usize, lanes: usize, out: &mut [f32]) {
        for (p, acc) in acc.iter().enumerate() {
            let dst = &mut out[(ox0 + p) * self.out_channels + oc0..][..lanes];
            for (o, v) in dst.iter_mut().enumerate() {
                *v = acc[o] + self.bias[oc0 + o];
            }
        }
    }

    fn pack(weights: &Tensor, groups: usize) -> (Vec<f32>, usize) {
        let [out_c, kh, kw, in_per_group] = weights.shape().dims();
        let out_per_group = out_c / groups;
        let oc_blocks = out_per_group.div_ceil(OC);
        let w = weights.data();
        let mut packed = vec![0.0f32; groups * oc_blocks * kh * kw * in_per_group * OC];
        for oc in 0..out_c {
            let (g, o) = (oc / out_per_group, oc % out_per_group);
            let (ob, lane) = (o / OC, o % OC);
            for ky in 0..kh {
                for kx in 0..kw {
                    for ic in 0..in_per_group {
                        let src = ((oc * kh + ky) * kw + kx) * in_per_group + ic;
                        let dst = ((((g * oc_blocks + ob) * kh + ky) * kw + kx) * in_per_group + ic) * OC + lane;
                        packed[dst] = w[src];
                    }
                }
            }
        }
        (packed, oc_blocks)
    }
}

/// Computes output columns `cols` of one (group, channel block) pair of an
/// output row, `PX` pixels at a time.
#[inline(always)]
fn conv_tiles<const PX: usize>(plan: &ConvPlan, row: usize, g: usize, ob: usize, cols: Range<usize>, out: &mut [f32]) {
    let b = row / plan.out_height;
    let oy = row % plan.out_height;
    let s = plan.in_shape;
    let icg = plan.in_per_group;
    let weights = plan.block(g, ob);
    let oc0 = g * plan.out_per_group + ob * OC;
    let lanes = OC.min(plan.out_per_group - ob * OC);
    let mut ox0 = cols.start;
    while ox0 < cols.end {
        let npx = PX.min(cols.end - ox0);
        let mut acc = [[0.0f32; OC]; PX];
        for ky in 0..plan.kh {
            let iy = (oy * plan.stride + ky) as isize - plan.pad_top as isize;
            if iy < 0 || iy >= s.height as isize {
                continue;
            }
            let in_row = ((b * s.height) + iy as usize) * s.width;
            for kx in 0..plan.kw {
                // Base offset of each pixel's channel group, or None when the
                // tap falls into the zero padding.
                let mut base = [None; PX];
                let mut interior = npx == PX;
                for (p, slot) in base.iter_mut().enumerate().take(npx) {
                    let ix = ((ox0 + p) * plan.stride + kx) as isize - plan.pad_left as isize;
                    if ix >= 0 && ix < s.width as isize {
                        *slot = Some((in_row + ix as usize) * s.channels + g * icg);
                    } else {
                        interior = false;
                    }
                }
                let w_tap = &weights[(ky * plan.kw + kx) * icg * OC..][..icg * OC];
                for (ic, w) in w_tap.chunks_exact(OC).enumerate() {
                    let w: &[f32; OC] = w.try_into().expect("OC lanes");
                    let mut xs = [0.0f32; PX];
                    if interior {
                        for p in 0..PX {
                            xs[p] = plan.input[base[p].unwrap_or(0) + ic];
                        }
                    } else {
                        for p in 0..PX {
                            if let Some(at) = base[p] {
                                xs[p] = plan.input[at + ic];
                            }
                        }
                    }
                    for p in 0..PX {
                        for o in 0..OC {
                            acc[p][o] += xs[p] * w[o];
                        }
                    }
                }
            }
        }
        plan.store(&acc[..npx], ox0, oc0, lanes, out);
        ox0 += npx;
    }
}

fn conv_row_portable(plan: &ConvPlan, row: usize, out: &mut [f32]) {
    for g in 0..plan.groups {
        for ob in 0..plan.oc_blocks {
            conv_tiles::<PX>(plan, row, g, ob, 0..plan.out_width, out);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_row_avx2(plan: &ConvPlan, row: usize, out: &mut [f32]) {
    conv_row_portable(plan, row, out)
}

#[cfg(target_arch = "x86_64")]
#[inline(never)]
fn conv_edge_tiles(plan: &ConvPlan, row: usize, g: usize, ob: usize, cols: Range<usize>, out: &mut [f32]) {
    conv_tiles::<PX>(plan, row, g, ob, cols, out)
}

/// Pixels per tile on the AVX-512 path: one 16-lane register per pixel.
#[cfg(target_arch = "x86_64")]
const WIDE_PX: usize = 8;

/// Same accumulation order as [`conv_tiles`] (separate multiply and add, no
/// fused rounding). Tiles that touch the left or right padding go through
/// the portable code.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn conv_row_avx512(plan: &ConvPlan, row: usize, out: &mut [f32]) {
    use std::arch::x86_64::*;

    let b = row / plan.out_height;
    let oy = row % plan.out_height;
    let s = plan.in_shape;
    let icg = plan.in_per_group;
    // Output columns whose taps all land inside the input horizontally.
    let first = plan.pad_left.div_ceil(plan.stride);
    let last = (s.width + plan.pad_left).checked_sub(plan.kw).map(|v| v / plan.stride + 1);
    let inner = match last {
        Some(end) if end > first => first..end.min(plan.out_width),
        _ => 0..0,
    };
    for g in 0..plan.groups {
        for ob in 0..plan.oc_blocks {
            let weights = plan.block(g, ob);
            let oc0 = g * plan.out_per_group + ob * OC;
            let lanes = OC.min(plan.out_per_group - ob * OC);
            let tiles = inner.len() / WIDE_PX;
            let wide_end = inner.start + tiles * WIDE_PX;
            conv_edge_tiles(plan, row, g, ob, 0..inner.start, out);
            for t in 0..tiles {
                let ox0 = inner.start + t * WIDE_PX;
                let mut acc = [_mm512_setzero_ps(); WIDE_PX];
                for ky in 0..plan.kh {
                    let iy = (oy * plan.stride + ky) as isize - plan.pad_top as isize;
                    if iy < 0 || iy >= s.height as isize {
                        continue;
                    }
                    let in_row = ((b * s.height) + iy as usize) * s.width;
                    for kx in 0..plan.kw {
                        let x0 = (in_row + ox0 * plan.stride + kx - plan.pad_left) * s.channels + g * icg;
                        let step = plan.stride * s.channels;
                        let x_end = x0 + (WIDE_PX - 1) * step + icg;
                        let xs = &plan.input[x0..x_end];
                        let w_tap = &weights[(ky * plan.kw + kx) * icg * OC..][..icg * OC];
                        for ic in 0..icg {
                            let w = _mm512_loadu_ps(w_tap.as_ptr().add(ic * OC));
                            for (p, a) in acc.iter_mut().enumerate() {
                                let x = _mm512_set1_ps(*xs.get_unchecked(p * step + ic));
                                *a = _mm512_add_ps(*a, _mm512_mul_ps(x, w));
                            }
                        }
                    }
                }
                let mut tile = [[0.0f32; OC]; WIDE_PX];
                for (dst, a) in tile.iter_mut().zip(acc) {
                    _mm512_storeu_ps(dst.as_mut_ptr(), a);
                }
                plan.store(&tile, ox0, oc0, lanes, out);
            }
            conv_edge_tiles(plan, row, g, ob, wide_end..plan.out_width, out);
        }
    }
}

struct DepthwisePlan<'a> {
    input: &'a [f32],
    in_shape: Shape,
    /// `[kh][kw][channels]`
    packed: Vec<f32>,
    bias: &'a [f32],
    kh: usize,
    kw: usize,
    stride: usize,
    out_height: usize,
    pad_top: usize,
    pad_left: usize,
}

#[inline(always)]
fn depthwise_row_portable(plan: &DepthwisePlan, row: usize, out_row: &mut [f32]) {
    let s = plan.in_shape;
    let c = s.channels;
    let b = row / plan.out_height;
    let oy = row % plan.out_height;
    out_row.fill(0.0);
    for (ox, acc) in out_row.chunks_exact_mut(c).enumerate() {
        for ky in 0..plan.kh {
            let iy = (oy * plan.stride + ky) as isize - plan.pad_top as isize;
            if iy < 0 || iy >= s.height as isize {
                continue;
            }
            for kx in 0..plan.kw {
                let ix = (ox * plan.stride + kx) as isize - plan.pad_left as isize;
                if ix < 0 || ix >= s.width as isize {
                    continue;
                }
                let at = s.offset(b, iy as usize, ix as usize, 0);
                let px = &plan.input[at..at + c];
                let w = &plan.packed[(ky * plan.kw + kx) * c..][..c];
                for ((a, &x), &w) in acc.iter_mut().zip(px).zip(w) {
                    *a += x * w;
                }
            }
        }
        for (a, &bias) in acc.iter_mut().zip(plan.bias) {
            *a += bias;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn depthwise_row_avx512(plan: &DepthwisePlan, row: usize, out_row: &mut [f32]) {
    depthwise_row_portable(plan, row, out_row)
}

fn depthwise_row(plan: &DepthwisePlan, row: usize, out_row: &mut [f32], simd: Simd) {
    #[cfg(target_arch = "x86_64")]
    if simd == Simd::Avx512 {
        // SAFETY: only selected after runtime detection of AVX-512F.
        return unsafe { depthwise_row_avx512(plan, row, out_row) };
    }
    let _ = simd;
    depthwise_row_portable(plan, row, out_row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Simd {
    Portable,
    Avx2,
    Avx512,
}

fn conv_row(plan: &ConvPlan, row: usize, out: &mut [f32], simd: Simd) {
    #[cfg(target_arch = "x86_64")]
    match simd {
        // SAFETY: the level is only chosen after runtime feature detection,
        // and the AVX-512 tile reads stay within `plan.input` (sliced above).
        Simd::Avx512 => return unsafe { conv_row_avx512(plan, row, out) },
        Simd::Avx2 => return unsafe { conv_row_avx2(plan, row, out) },
        Simd::Portable => {}
    }
    let _ = simd;
    conv_row_portable(plan, row, out)
}

fn detect_simd() -> Simd {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            return Simd::Avx512;
        }
        if std::is_x86_feature_detected!("avx2") {
            return Simd::Avx2;
        }
    }
    Simd::Portable
}

/// Per-channel `(sum, sum of squared deviation from `centre`)` over every
/// pixel of one batch item, in f64.
fn channel_sums(plane: &[f32], channels: usize, centre: Option<&[f64]>) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = plane
        .par_chunks(REDUCE_CHUNK * channels)
        .map(|chunk| {
            let mut acc = vec![0.0f64; channels];
            for px in chunk.chunks_exact(channels) {
                match centre {
                    None => {
                        for (a, &x) in acc.iter_mut().zip(px) {
                            *a += x as f64;
                        }
                    }
                    Some(mean) => {
                        for ((a, &x), &m) in acc.iter_mut().zip(px).zip(mean) {
                            let d = x as f64 - m;
                            *a += d * d;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0f64; channels];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

impl Backend for Optimized {
    fn name(&self) -> &'static str {
        "optimized"
    }

    fn conv2d(&self, input: &Tensor, weights: &Tensor, bias: &[f32], p: &ConvParams) -> Result<Tensor> {
        let (out_shape, geo) = conv2d_output_shape(input.shape(), weights.shape(), bias.len(), p)?;
        let [out_c, kh, kw, in_per_group] = weights.shape().dims();
        let (packed, oc_blocks) = ConvPlan::pack(weights, p.groups);
        let plan = ConvPlan {
            input: input.data(),
            in_shape: input.shape(),
            packed,
            bias,
            kh,
            kw,
            stride: p.stride,
            groups: p.groups,
            in_per_group,
            out_per_group: out_c / p.groups,
            oc_blocks,
            out_channels: out_c,
            out_width: out_shape.width,
            out_height: out_shape.height,
            pad_top: geo.pad_top,
            pad_left: geo.pad_left,
        };
        let simd = detect_simd();
        let mut out = vec![0.0f32; out_shape.len()];
        out.par_chunks_mut(out_shape.width * out_c)
            .enumerate()
            .for_each(|(row, chunk)| conv_row(&plan, row, chunk, simd));
        Tensor::from_vec(out_shape, out)
    }

    fn depthwise_conv2d(&self, input: &Tensor, weights: &Tensor, bias: &[f32], stride: usize) -> Result<Tensor> {
        let (out_shape, geo) = depthwise_output_shape(input.shape(), weights.shape(), bias.len(), stride)?;
        let s = input.shape();
        let c = s.channels;
        let [_, kh, kw, _] = weights.shape().dims();
        // [ky][kx][c]
        let mut packed = vec![0.0f32; kh * kw * c];
        for ch in 0..c {
            for t in 0..kh * kw {
                packed[t * c + ch] = weights.data()[ch * kh * kw + t];
            }
        }
        let plan = DepthwisePlan {
            input: input.data(),
            in_shape: s,
            packed,
            bias,
            kh,
            kw,
            stride,
            out_height: out_shape.height,
            pad_top: geo.pad_top,
            pad_left: geo.pad_left,
        };
        let simd = detect_simd();
        let mut out = vec![0.0f32; out_shape.len()];
        out.par_chunks_mut(out_shape.width * c)
            .enumerate()
            .for_each(|(row, out_row)| depthwise_row(&plan, row, out_row, simd));
        Tensor::from_vec(out_shape, out)
    }

    fn prelu(&self, input: &Tensor, slopes: &[f32]) -> Result<Tensor> {
        let s = input.shape();
        check_prelu(s, slopes)?;
        let mut out = input.data().to_vec();
        out.par_chunks_mut(s.width * s.channels).for_each(|row| {
            for px in row.chunks_exact_mut(s.channels) {
                for (x, &a) in px.iter_mut().zip(slopes) {
                    if *x < 0.0 {
                        *x *= a;
                    }
                }
            }
        });
        Tensor::from_vec(s, out)
    }

    fn activation(&self, kind: Activation, input: &Tensor) -> Tensor {
        let data: Vec<f32> = input
            .data()
            .par_iter()
            .map(|&x| apply_activation(kind, x))
            .collect();
        Tensor::from_vec(input.shape(), data).expect("shape preserved")
    }

    fn instance_norm(&self, input: &Tensor, p: &NormParams) -> Result<Tensor> {
        let s = input.shape();
        check_norm(s, p)?;
        let plane_len = s.height * s.width * s.channels;
        let n = (s.height * s.width) as f64;
        let mut out = vec![0.0f32; s.len()];
        for (plane, out_plane) in input.data().chunks_exact(plane_len).zip(out.chunks_exact_mut(plane_len)) {
            let mean: Vec<f64> = channel_sums(plane, s.channels, None)
                .into_iter()
                .map(|v| v / n)
                .collect();
            let var = channel_sums(plane, s.channels, Some(&mean));
            let scale: Vec<(f64, f64)> = var
                .iter()
                .map(|v| 1.0 / (v / n + p.epsilon as f64).sqrt())
                .zip(mean.iter().copied())
                .collect();
            out_plane
                .par_chunks_mut(s.width * s.channels)
                .zip(plane.par_chunks(s.width * s.channels))
                .for_each(|(out_row, in_row)| {
                    for (opx, ipx) in out_row.chunks_exact_mut(s.channels).zip(in_row.chunks_exact(s.channels)) {
                        for c in 0..s.channels {
                            let (inv, mean) = scale[c];
                            opx[c] = (p.gamma[c] as f64 * (ipx[c] as f64 - mean) * inv + p.beta[c] as f64) as f32;
                        }
                    }
                });
        }
        Tensor::from_vec(s, out)
    }

    fn bilinear_upsample_x2(&self, input: &Tensor) -> Tensor {
        let s = input.shape();
        let out_shape = s.with_spatial(s.height * 2, s.width * 2);
        let c = s.channels;
        let x_taps: Vec<(usize, usize, f32)> = (0..out_shape.width).map(|ox| bilinear_tap(ox, s.width)).collect();
        let data = input.data();
        let mut out = vec![0.0f32; out_shape.len()];
        out.par_chunks_mut(out_shape.width * c)
            .enumerate()
            .for_each(|(row, out_row)| {
                let b = row / out_shape.height;
                let (y0, y1, fy) = bilinear_tap(row % out_shape.height, s.height);
                let r0 = &data[s.offset(b, y0, 0, 0)..][..s.width * c];
                let r1 = &data[s.offset(b, y1, 0, 0)..][..s.width * c];
                for (px, &(x0, x1, fx)) in out_row.chunks_exact_mut(c).zip(&x_taps) {
                    for (ch, v) in px.iter_mut().enumerate() {
                        let (a, b) = (r0[x0 * c + ch], r0[x1 * c + ch]);
                        let top = a + (b - a) * fx;
                        let (a, b) = (r1[x0 * c + ch], r1[x1 * c + ch]);
                        let bottom = a + (b - a) * fx;
                        *v = top + (bottom - top) * fy;
                    }
                }
            });
        Tensor::from_vec(out_shape, out).expect("shape preserved")
    }

    fn space_to_depth(&self, input: &Tensor) -> Result<Tensor> {
        let s = input.shape();
        let out_shape = space_to_depth_shape(s)?;
        let c = s.channels;
        let data = input.data();
        let mut out = vec![0.0f32; out_shape.len()];
        out.par_chunks_mut(out_shape.width * out_shape.channels)
            .enumerate()
            .for_each(|(row, out_row)| {
                let b = row / out_shape.height;
                let h = row % out_shape.height;
                for (w, px) in out_row.chunks_exact_mut(4 * c).enumerate() {
                    for (cell, dst) in px.chunks_exact_mut(c).enumerate() {
                        let at = s.offset(b, 2 * h + cell / 2, 2 * w + cell % 2, 0);
                        dst.copy_from_slice(&data[at..at + c]);
                    }
                }
            });
        Tensor::from_vec(out_shape, out)
    }

    fn depth_to_space(&self, input: &Tensor) -> Result<Tensor> {
        let s = input.shape();
        let out_shape = depth_to_space_shape(s)?;
        let c = out_shape.channels;
        let data = input.data();
        let mut out = vec![0.0f32; out_shape.len()];
        out.par_chunks_mut(out_shape.width * c)
            .enumerate()
            .for_each(|(row, out_row)| {
                let b = row / out_shape.height;
                let h = row % out_shape.height;
                for (w, dst) in out_row.chunks_exact_mut(c).enumerate() {
                    let cell = (h % 2) * 2 + (w % 2);
                    let at = s.offset(b, h / 2, w / 2, cell * c);
                    dst.copy_from_slice(&data[at..at + c]);
                }
            });
        Tensor::from_vec(out_shape, out)
    }

    fn max_pool_2x2(&self, input: &Tensor) -> Result<Tensor> {
        let s = input.shape();
        let out_shape = max_pool_shape(s)?;
        let c = s.channels;
        let data = input.data();
        let mut out = vec![0.0f32; out_shape.len()];
        out.par_chunks_mut(out_shape.width * c)
            .enumerate()
            .for_each(|(row, out_row)| {
                let b = row / out_shape.height;
                let h = row % out_shape.height;
                for (w, dst) in out_row.chunks_exact_mut(c).enumerate() {
                    let p00 = &data[s.offset(b, 2 * h, 2 * w, 0)..][..c];
                    let p01 = &data[s.offset(b, 2 * h, 2 * w + 1, 0)..][..c];
                    let p10 = &data[s.offset(b, 2 * h + 1, 2 * w, 0)..][..c];
                    let p11 = &data[s.offset(b, 2 * h + 1, 2 * w + 1, 0)..][..c];
                    for ch in 0..c {
                        dst[ch] = p00[ch].max(p01[ch]).max(p10[ch]).max(p11[ch]);
                    }
                }
            });
        Tensor::from_vec(out_shape, out)
    }

    fn global_avg_pool(&self, input: &Tensor) -> Tensor {
        let s = input.shape();
        let n = (s.height * s.width) as f64;
        let plane_len = s.height * s.width * s.channels;
        let mut out = Vec::with_capacity(s.batch * s.channels);
        for plane in input.data().chunks_exact(plane_len) {
            out.extend(channel_sums(plane, s.channels, None).into_iter().map(|v| (v / n) as f32));
        }
        Tensor::from_vec(s.with_spatial(1, 1), out).expect("shape preserved")
    }

    fn concat_channels(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out_shape = concat_shape(a.shape(), b.shape())?;
        let (ca, cb) = (a.shape().channels, b.shape().channels);
        let mut out = vec![0.0f32; out_shape.len()];
        out.par_chunks_mut(out_shape.width * out_shape.channels)
            .zip(a.data().par_chunks(out_shape.width * ca))
            .zip(b.data().par_chunks(out_shape.width * cb))
            .for_each(|((out_row, a_row), b_row)| {
                for ((dst, pa), pb) in out_row
                    .chunks_exact_mut(ca + cb)
                    .zip(a_row.chunks_exact(ca))
                    .zip(b_row.chunks_exact(cb))
                {
                    dst[..ca].copy_from_slice(pa);
                    dst[ca..].copy_from_slice(pb);
                }
            });
        Tensor::from_vec(out_shape, out)
    }

    fn elementwise(&self, kind: Elementwise, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let s = broadcast_shape(a.shape(), b.shape())?;
        let bs = b.shape();
        let op = move |x: f32, y: f32| match kind {
            Elementwise::Add => x + y,
            Elementwise::Mul => x * y,
        };
        let bd = b.data();
        let c = s.channels;
        let mut out = a.data().to_vec();
        if bs == s {
            out.par_chunks_mut(s.width * c)
                .zip(bd.par_chunks(s.width * c))
                .for_each(|(row, brow)| {
                    for (x, &y) in row.iter_mut().zip(brow) {
                        *x = op(*x, y);
                    }
                });
        } else {
            out.par_chunks_mut(s.width * c).enumerate().for_each(|(row, out_row)| {
                let n = (row / s.height).min(bs.batch - 1);
                let h = (row % s.height).min(bs.height - 1);
                for (w, px) in out_row.chunks_exact_mut(c).enumerate() {
                    let at = bs.offset(n, h, w.min(bs.width - 1), 0);
                    if bs.channels == c {
                        for (x, &y) in px.iter_mut().zip(&bd[at..at + c]) {
                            *x = op(*x, y);
                        }
                    } else {
                        let y = bd[at];
                        for x in px.iter_mut() {
                            *x = op(*x, y);
                        }
                    }
                }
            });
        }
        Tensor::from_vec(s, out)
    }

    fn slice_channels(&self, input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = input.shape();
        let out_shape = slice_shape(s, start, len)?;
        let mut out = vec![0.0f32; out_shape.len()];
        out.par_chunks_mut(s.width * len)
            .zip(input.data().par_chunks(s.width * s.channels))
            .for_each(|(out_row, in_row)| {
                for (dst, px) in out_row.chunks_exact_mut(len).zip(in_row.chunks_exact(s.channels)) {
                    dst.copy_from_slice(&px[start..start + len]);
                }
            });
        Tensor::from_vec(out_shape, out)
    }
}
