use super::*;

/// Naive loop implementations. Sequential, index-by-index, no repacking.
#[derive(Debug, Clone, Copy, Default)]
pub struct Reference;

impl Backend for Reference {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn conv2d(&self, input: &Tensor, weights: &Tensor, bias: &[f32], p: &ConvParams) -> Result<Tensor> {
        let (out_shape, geo) = conv2d_output_shape(input.shape(), weights.shape(), bias.len(), p)?;
        let is = input.shape();
        let [out_c, kh, kw, in_per_group] = weights.shape().dims();
        let out_per_group = out_c / p.groups;
        let mut out = Tensor::zeros(out_shape);
        for b in 0..out_shape.batch {
            for oy in 0..out_shape.height {
                for ox in 0..out_shape.width {
                    for oc in 0..out_c {
                        let g = oc / out_per_group;
                        let mut acc = 0.0f32;
                        for ky in 0..kh {
                            let iy = (oy * p.stride + ky) as isize - geo.pad_top as isize;
                            if iy < 0 || iy >= is.height as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * p.stride + kx) as isize - geo.pad_left as isize;
                                if ix < 0 || ix >= is.width as isize {
                                    continue;
                                }
                                for ic in 0..in_per_group {
                                    let x = input.get(b, iy as usize, ix as usize, g * in_per_group + ic);
                                    acc += x * weights.get(oc, ky, kx, ic);
                                }
                            }
                        }
                        out.set(b, oy, ox, oc, acc + bias[oc])?;
                    }
                }
            }
        }
        Ok(out)
    }

    fn depthwise_conv2d(&self, input: &Tensor, weights: &Tensor, bias: &[f32], stride: usize) -> Result<Tensor> {
        let (out_shape, geo) = depthwise_output_shape(input.shape(), weights.shape(), bias.len(), stride)?;
        let is = input.shape();
        let [_, kh, kw, _] = weights.shape().dims();
        let mut out = Tensor::zeros(out_shape);
        for b in 0..out_shape.batch {
            for oy in 0..out_shape.height {
                for ox in 0..out_shape.width {
                    for c in 0..out_shape.channels {
                        let mut acc = 0.0f32;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - geo.pad_top as isize;
                            if iy < 0 || iy >= is.height as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - geo.pad_left as isize;
                                if ix < 0 || ix >= is.width as isize {
                                    continue;
                                }
                                acc += input.get(b, iy as usize, ix as usize, c) * weights.get(c, ky, kx, 0);
                            }
                        }
                        out.set(b, oy, ox, c, acc + bias[c])?;
                    }
                }
            }
        }
        Ok(out)
    }

    fn prelu(&self, input: &Tensor, slopes: &[f32]) -> Result<Tensor> {
        check_prelu(input.shape(), slopes)?;
        Ok(Tensor::from_fn(input.shape(), |b, h, w, c| {
            let x = input.get(b, h, w, c);
            if x >= 0.0 {
                x
            } else {
                slopes[c] * x
            }
        }))
    }

    fn activation(&self, kind: Activation, input: &Tensor) -> Tensor {
        Tensor::from_fn(input.shape(), |b, h, w, c| {
            apply_activation(kind, input.get(b, h, w, c))
        })
    }

    fn instance_norm(&self, input: &Tensor, p: &NormParams) -> Result<Tensor> {
        let s = input.shape();
        check_norm(s, p)?;
        let n = (s.height * s.width) as f64;
        let mut stats = vec![(0.0f64, 0.0f64); s.batch * s.channels];
        for b in 0..s.batch {
            for c in 0..s.channels {
                let mut sum = 0.0f64;
                for h in 0..s.height {
                    for w in 0..s.width {
                        sum += input.get(b, h, w, c) as f64;
                    }
                }
                let mean = sum / n;
                let mut sq = 0.0f64;
                for h in 0..s.height {
                    for w in 0..s.width {
                        let d = input.get(b, h, w, c) as f64 - mean;
                        sq += d * d;
                    }
                }
                stats[b * s.channels + c] = (mean, sq / n);
            }
        }
        Ok(Tensor::from_fn(s, |b, h, w, c| {
            let (mean, var) = stats[b * s.channels + c];
            let inv = 1.0 / (var + p.epsilon as f64).sqrt();
            let x = input.get(b, h, w, c) as f64;
            (p.gamma[c] as f64 * (x - mean) * inv + p.beta[c] as f64) as f32
        }))
    }

    fn bilinear_upsample_x2(&self, input: &Tensor) -> Tensor {
        let s = input.shape();
        let out_shape = s.with_spatial(s.height * 2, s.width * 2);
        Tensor::from_fn(out_shape, |b, oy, ox, c| {
            let (y0, y1, fy) = bilinear_tap(oy, s.height);
            let (x0, x1, fx) = bilinear_tap(ox, s.width);
            let top = input.get(b, y0, x0, c) + (input.get(b, y0, x1, c) - input.get(b, y0, x0, c)) * fx;
            let bottom = input.get(b, y1, x0, c) + (input.get(b, y1, x1, c) - input.get(b, y1, x0, c)) * fx;
            top + (bottom - top) * fy
        })
    }

    fn space_to_depth(&self, input: &Tensor) -> Result<Tensor> {
        let out_shape = space_to_depth_shape(input.shape())?;
        let c_in = input.shape().channels;
        Ok(Tensor::from_fn(out_shape, |b, h, w, c| {
            let cell = c / c_in;
            let (dy, dx) = (cell / 2, cell % 2);
            input.get(b, 2 * h + dy, 2 * w + dx, c % c_in)
        }))
    }

    fn depth_to_space(&self, input: &Tensor) -> Result<Tensor> {
        let out_shape = depth_to_space_shape(input.shape())?;
        let c_out = out_shape.channels;
        Ok(Tensor::from_fn(out_shape, |b, h, w, c| {
            let cell = (h % 2) * 2 + (w % 2);
            input.get(b, h / 2, w / 2, cell * c_out + c)
        }))
    }

    fn max_pool_2x2(&self, input: &Tensor) -> Result<Tensor> {
        let out_shape = max_pool_shape(input.shape())?;
        Ok(Tensor::from_fn(out_shape, |b, h, w, c| {
            let mut m = f32::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(input.get(b, 2 * h + dy, 2 * w + dx, c));
                }
            }
            m
        }))
    }

    fn global_avg_pool(&self, input: &Tensor) -> Tensor {
        let s = input.shape();
        let n = (s.height * s.width) as f64;
        Tensor::from_fn(s.with_spatial(1, 1), |b, _, _, c| {
            let mut sum = 0.0f64;
            for h in 0..s.height {
                for w in 0..s.width {
                    sum += input.get(b, h, w, c) as f64;
                }
            }
            (sum / n) as f32
        })
    }

    fn concat_channels(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out_shape = concat_shape(a.shape(), b.shape())?;
        let ca = a.shape().channels;
        Ok(Tensor::from_fn(out_shape, |n, h, w, c| {
            if c < ca {
                a.get(n, h, w, c)
            } else {
                b.get(n, h, w, c - ca)
            }
        }))
    }

    fn elementwise(&self, kind: Elementwise, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let bs = b.shape();
        Ok(Tensor::from_fn(out_shape, |n, h, w, c| {
            let x = a.get(n, h, w, c);
            let y = b.get(n.min(bs.batch - 1), h.min(bs.height - 1), w.min(bs.width - 1), c.min(bs.channels - 1));
            match kind {
                Elementwise::Add => x + y,
                Elementwise::Mul => x * y,
            }
        }))
    }

    fn slice_channels(&self, input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let out_shape = slice_shape(input.shape(), start, len)?;
        Ok(Tensor::from_fn(out_shape, |b, h, w, c| input.get(b, h, w, start + c)))
    }
}
