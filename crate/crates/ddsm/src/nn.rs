//! Shared neural primitives: 1x1 and 3x3 convolutions, adaptive average
//! pooling, align-corners bilinear resize, softmax and the activations,
//! each with a hand-written adjoint.
//!
//! There is no tape. Composite backward passes chain these adjoints
//! explicitly, which keeps every gradient auditable against the
//! finite-difference oracle.

use crate::error::{DdsmError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A channel-mixing map applied pointwise over space (a 1x1 convolution).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// (out_channels, in_channels)
    pub weight: Tensor,
    /// (out_channels)
    pub bias: Tensor,
}

impl LinearMap {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape().len() != 1 || bias.shape()[0] != weight.shape()[0]
        {
            return Err(DdsmError::Shape(format!(
                "linear map wants weight (out,in) and bias (out), got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], bias zero.
    pub fn init(rng: &mut Rng, out_channels: usize, in_channels: usize) -> Self {
        let bound = 1.0 / (in_channels as f64).sqrt();
        let weight =
            Tensor::uniform(&[out_channels, in_channels], rng, -bound, bound).expect("valid shape");
        let bias = Tensor::zeros(&[out_channels]).expect("valid shape");
        Self { weight, bias }
    }

    /// All-zero weights and bias. Offset and modulation predictors start
    /// here so a freshly built sampler is an undeformed grid.
    pub fn init_zero(out_channels: usize, in_channels: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_channels, in_channels]).expect("valid shape"),
            bias: Tensor::zeros(&[out_channels]).expect("valid shape"),
        }
    }

    pub fn identity(channels: usize) -> Self {
        let weight = Tensor::from_fn(&[channels, channels], |i| {
            if i / channels == i % channels {
                1.0
            } else {
                0.0
            }
        })
        .expect("valid shape");
        let bias = Tensor::zeros(&[channels]).expect("valid shape");
        Self { weight, bias }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Gradients of a [`LinearMap`], same shapes as the map itself.
#[derive(Debug, Clone)]
pub struct LinearMapGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearMapGrads {
    pub fn zeros_like(map: &LinearMap) -> Self {
        Self {
            weight: Tensor::zeros(map.weight.shape()).expect("valid shape"),
            bias: Tensor::zeros(map.bias.shape()).expect("valid shape"),
        }
    }

    pub fn accumulate(&mut self, other: &LinearMapGrads) -> Result<()> {
        self.weight.accumulate(&other.weight)?;
        self.bias.accumulate(&other.bias)
    }
}

/// out[o,y,x] = bias[o] + sum_i weight[o,i] * input[i,y,x]
pub fn conv1x1(input: &Tensor, map: &LinearMap) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(DdsmError::Shape(format!(
            "conv1x1 wants a (C,H,W) input, got {s:?}"
        )));
    }
    let (c_in, h, w) = (s[0], s[1], s[2]);
    if map.in_channels() != c_in {
        return Err(DdsmError::Shape(format!(
            "conv1x1 weight expects {} input channels, tensor has {c_in}",
            map.in_channels()
        )));
    }
    let c_out = map.out_channels();
    let plane = h * w;
    let mut out = vec![0.0; c_out * plane];
    let wdat = map.weight.data();
    let idat = input.data();
    for o in 0..c_out {
        let b = map.bias.data()[o];
        let orow = &mut out[o * plane..(o + 1) * plane];
        orow.fill(b);
        for i in 0..c_in {
            let wv = wdat[o * c_in + i];
            if wv == 0.0 {
                continue;
            }
            let irow = &idat[i * plane..(i + 1) * plane];
            for (ov, iv) in orow.iter_mut().zip(irow) {
                *ov += wv * iv;
            }
        }
    }
    Tensor::new(vec![c_out, h, w], out)
}

/// Adjoint of [`conv1x1`]: gradients for the input and the map.
pub fn conv1x1_backward(
    upstream: &Tensor,
    input: &Tensor,
    map: &LinearMap,
) -> Result<(Tensor, LinearMapGrads)> {
    let s = input.shape();
    let (c_in, h, w) = (s[0], s[1], s[2]);
    let c_out = map.out_channels();
    if upstream.shape() != [c_out, h, w] {
        return Err(DdsmError::Shape(format!(
            "conv1x1 backward upstream {:?} does not match output ({c_out},{h},{w})",
            upstream.shape()
        )));
    }
    let plane = h * w;
    let mut grad_input = vec![0.0; c_in * plane];
    let mut grad_weight = vec![0.0; c_out * c_in];
    let mut grad_bias = vec![0.0; c_out];
    let wdat = map.weight.data();
    let idat = input.data();
    let udat = upstream.data();
    for o in 0..c_out {
        let urow = &udat[o * plane..(o + 1) * plane];
        grad_bias[o] = urow.iter().sum();
        for i in 0..c_in {
            let irow = &idat[i * plane..(i + 1) * plane];
            let mut gw = 0.0;
            let wv = wdat[o * c_in + i];
            let grow = &mut grad_input[i * plane..(i + 1) * plane];
            for ((uv, iv), gv) in urow.iter().zip(irow).zip(grow.iter_mut()) {
                gw += uv * iv;
                *gv += wv * uv;
            }
            grad_weight[o * c_in + i] = gw;
        }
    }
    Ok((
        Tensor::new(vec![c_in, h, w], grad_input)?,
        LinearMapGrads {
            weight: Tensor::new(vec![c_out, c_in], grad_weight)?,
            bias: Tensor::new(vec![c_out], grad_bias)?,
        },
    ))
}

/// 3x3 convolution weights: (out_channels, in_channels, 3, 3) plus bias.
/// Stride 1; taps reaching past the border clamp to the nearest edge pixel
/// (extents are preserved and constant fields map to constant fields, which
/// the encoder-level invariants rely on).
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

impl Conv3x3 {
    pub fn init(rng: &mut Rng, out_channels: usize, in_channels: usize, dilation: usize) -> Self {
        let fan_in = in_channels * 9;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[out_channels, in_channels, 3, 3], rng, -bound, bound)
                .expect("valid shape"),
            bias: Tensor::zeros(&[out_channels]).expect("valid shape"),
            dilation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub fn conv3x3(input: &Tensor, conv: &Conv3x3) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 || s[0] != conv.in_channels() {
        return Err(DdsmError::Shape(format!(
            "conv3x3 wants ({},H,W), got {s:?}",
            conv.in_channels()
        )));
    }
    let (c_in, h, w) = (s[0], s[1], s[2]);
    let c_out = conv.out_channels();
    let d = conv.dilation as isize;
    let mut out = Tensor::zeros(&[c_out, h, w])?;
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = conv.bias.data()[o];
                for i in 0..c_in {
                    for ky in 0..3usize {
                        let sy = clamp_coord(y as isize + (ky as isize - 1) * d, h);
                        for kx in 0..3usize {
                            let sx = clamp_coord(x as isize + (kx as isize - 1) * d, w);
                            acc += conv.weight.at4(o, i, ky, kx) * input.at3(i, sy, sx);
                        }
                    }
                }
                out.set3(o, y, x, acc);
            }
        }
    }
    Ok(out)
}

#[inline]
fn clamp_coord(t: isize, len: usize) -> usize {
    t.clamp(0, len as isize - 1) as usize
}

pub struct Conv3x3Grads {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv3x3_backward(
    upstream: &Tensor,
    input: &Tensor,
    conv: &Conv3x3,
) -> Result<(Tensor, Conv3x3Grads)> {
    let s = input.shape();
    let (c_in, h, w) = (s[0], s[1], s[2]);
    let c_out = conv.out_channels();
    if upstream.shape() != [c_out, h, w] {
        return Err(DdsmError::Shape(format!(
            "conv3x3 backward upstream {:?} does not match output ({c_out},{h},{w})",
            upstream.shape()
        )));
    }
    let d = conv.dilation as isize;
    let mut grad_input = Tensor::zeros(&[c_in, h, w])?;
    let mut grad_weight = Tensor::zeros(&[c_out, c_in, 3, 3])?;
    let mut grad_bias = Tensor::zeros(&[c_out])?;
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let u = upstream.at3(o, y, x);
                if u == 0.0 {
                    continue;
                }
                grad_bias.data_mut()[o] += u;
                for i in 0..c_in {
                    for ky in 0..3usize {
                        let sy = clamp_coord(y as isize + (ky as isize - 1) * d, h);
                        for kx in 0..3usize {
                            let sx = clamp_coord(x as isize + (kx as isize - 1) * d, w);
                            let k = grad_weight.idx4(o, i, ky, kx);
                            grad_weight.data_mut()[k] += u * input.at3(i, sy, sx);
                            grad_input.add3(i, sy, sx, u * conv.weight.at4(o, i, ky, kx));
                        }
                    }
                }
            }
        }
    }
    Ok((
        grad_input,
        Conv3x3Grads {
            weight: grad_weight,
            bias: grad_bias,
        },
    ))
}

#[inline]
fn pool_window(i: usize, full: usize, a: usize) -> (usize, usize) {
    let start = i * full / a;
    let end = ((i + 1) * full).div_ceil(a);
    (start, end)
}

/// Adaptive average pooling to an `a x a` output. Output cell (i, j)
/// averages the window [floor(i*H/a), ceil((i+1)*H/a)) x the analogous
/// column range, so `a` need not divide the extents.
pub fn avg_pool_to(input: &Tensor, a: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(DdsmError::Shape(format!(
            "avg_pool_to wants (C,H,W), got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if a == 0 || a > h || a > w {
        return Err(DdsmError::Shape(format!(
            "avg_pool_to target {a} exceeds input extents {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[c, a, a])?;
    for ch in 0..c {
        for i in 0..a {
            let (y0, y1) = pool_window(i, h, a);
            for j in 0..a {
                let (x0, x1) = pool_window(j, w, a);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += input.at3(ch, y, x);
                    }
                }
                out.set3(ch, i, j, acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool_to`]: distributes each output-cell gradient
/// uniformly over its window (windows may overlap for non-divisible sizes).
pub fn avg_pool_to_backward(upstream: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = upstream.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(DdsmError::Shape(format!(
            "avg_pool backward wants (C,a,a) upstream, got {s:?}"
        )));
    }
    let (c, a) = (s[0], s[1]);
    let mut grad = Tensor::zeros(&[c, h, w])?;
    for ch in 0..c {
        for i in 0..a {
            let (y0, y1) = pool_window(i, h, a);
            for j in 0..a {
                let (x0, x1) = pool_window(j, w, a);
                let g = upstream.at3(ch, i, j) / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        grad.add3(ch, y, x, g);
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Non-overlapping 2x2 mean pooling with stride 2; extents must be even.
pub fn avg_pool2x2(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(DdsmError::Shape(format!(
            "avg_pool2x2 wants (C,2h,2w), got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1] / 2, s[2] / 2);
    let mut out = Tensor::zeros(&[c, h, w])?;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let sum = input.at3(ch, 2 * i, 2 * j)
                    + input.at3(ch, 2 * i, 2 * j + 1)
                    + input.at3(ch, 2 * i + 1, 2 * j)
                    + input.at3(ch, 2 * i + 1, 2 * j + 1);
                out.set3(ch, i, j, sum / 4.0);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool2x2`]: spreads each cell's gradient over its four
/// source pixels.
pub fn avg_pool2x2_backward(upstream: &Tensor) -> Result<Tensor> {
    let s = upstream.shape();
    if s.len() != 3 {
        return Err(DdsmError::Shape(format!(
            "avg_pool2x2 backward wants (C,h,w), got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut grad = Tensor::zeros(&[c, 2 * h, 2 * w])?;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let g = upstream.at3(ch, i, j) / 4.0;
                grad.set3(ch, 2 * i, 2 * j, g);
                grad.set3(ch, 2 * i, 2 * j + 1, g);
                grad.set3(ch, 2 * i + 1, 2 * j, g);
                grad.set3(ch, 2 * i + 1, 2 * j + 1, g);
            }
        }
    }
    Ok(grad)
}

#[inline]
fn resize_coord(i: usize, from: usize, to: usize) -> f64 {
    if to == 1 {
        0.0
    } else {
        (i * (from - 1)) as f64 / (to - 1) as f64
    }
}

/// Align-corners bilinear resize: output (i, j) samples the source at
/// (i*(H-1)/(H2-1), j*(W-1)/(W2-1)); a degenerate target extent of 1 maps
/// to coordinate 0.
pub fn bilinear_resize(input: &Tensor, h2: usize, w2: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(DdsmError::Shape(format!(
            "bilinear_resize wants (C,H,W), got {s:?}"
        )));
    }
    if h2 == 0 || w2 == 0 {
        return Err(DdsmError::Shape("resize target extent must be positive".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h2 == h && w2 == w {
        return Ok(input.clone());
    }
    let mut out = Tensor::zeros(&[c, h2, w2])?;
    for i in 0..h2 {
        let y = resize_coord(i, h, h2);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ly = y - y0 as f64;
        for j in 0..w2 {
            let x = resize_coord(j, w, w2);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let lx = x - x0 as f64;
            for ch in 0..c {
                let v = input.at3(ch, y0, x0) * (1.0 - ly) * (1.0 - lx)
                    + input.at3(ch, y0, x1) * (1.0 - ly) * lx
                    + input.at3(ch, y1, x0) * ly * (1.0 - lx)
                    + input.at3(ch, y1, x1) * ly * lx;
                out.set3(ch, i, j, v);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`], scattering tap weights back to the
/// source grid of extent (h, w).
pub fn bilinear_resize_backward(upstream: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = upstream.shape();
    if s.len() != 3 {
        return Err(DdsmError::Shape(format!(
            "resize backward wants (C,H2,W2), got {s:?}"
        )));
    }
    let (c, h2, w2) = (s[0], s[1], s[2]);
    if h2 == h && w2 == w {
        return Ok(upstream.clone());
    }
    let mut grad = Tensor::zeros(&[c, h, w])?;
    for i in 0..h2 {
        let y = resize_coord(i, h, h2);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ly = y - y0 as f64;
        for j in 0..w2 {
            let x = resize_coord(j, w, w2);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let lx = x - x0 as f64;
            for ch in 0..c {
                let u = upstream.at3(ch, i, j);
                grad.add3(ch, y0, x0, u * (1.0 - ly) * (1.0 - lx));
                grad.add3(ch, y0, x1, u * (1.0 - ly) * lx);
                grad.add3(ch, y1, x0, u * ly * (1.0 - lx));
                grad.add3(ch, y1, x1, u * ly * lx);
            }
        }
    }
    Ok(grad)
}

/// Numerically stable softmax. Rejects non-finite logits.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(DdsmError::Shape("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DdsmError::NonFinite("softmax logits"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Adjoint of softmax: given y = softmax(z) and dL/dy, returns dL/dz.
pub fn softmax_backward(y: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(upstream)
        .map(|(yi, gi)| yi * (gi - inner))
        .collect()
}

/// Softmax restricted to the entries with `valid[i]`; the rest get weight
/// exactly 0 and an all-false mask yields all zeros. Attention layers use
/// this to drop samples that fell outside the feature box, which is what
/// makes a full-coverage grid reproduce dense attention exactly.
pub fn masked_softmax(logits: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != valid.len() {
        return Err(DdsmError::Shape(
            "masked softmax mask length differs from logits".into(),
        ));
    }
    let mut max = f64::NEG_INFINITY;
    for (l, &ok) in logits.iter().zip(valid) {
        if ok {
            if !l.is_finite() {
                return Err(DdsmError::NonFinite("masked softmax logits"));
            }
            max = max.max(*l);
        }
    }
    let mut out = vec![0.0; logits.len()];
    if max == f64::NEG_INFINITY {
        return Ok(out);
    }
    let mut sum = 0.0;
    for (i, (l, &ok)) in logits.iter().zip(valid).enumerate() {
        if ok {
            out[i] = (l - max).exp();
            sum += out[i];
        }
    }
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Adjoint of relu; the subgradient at 0 is taken as 0.
pub fn relu_backward(upstream: &Tensor, input: &Tensor) -> Result<Tensor> {
    let mut grad = upstream.clone();
    if grad.shape() != input.shape() {
        return Err(DdsmError::Shape("relu backward shape mismatch".into()));
    }
    for (g, v) in grad.data_mut().iter_mut().zip(input.data()) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(grad)
}

/// Learnable per-position embedding, drawn under the same uniform rule as
/// map weights with the channel count as fan-in.
pub fn init_embedding(rng: &mut Rng, channels: usize, h: usize, w: usize) -> Tensor {
    let bound = 1.0 / (channels as f64).sqrt();
    Tensor::uniform(&[channels, h, w], rng, -bound, bound).expect("valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv1x1_reference(input: &Tensor, map: &LinearMap) -> Tensor {
        // Independent triple-loop evaluation.
        let (c_in, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
        );
        let c_out = map.out_channels();
        let mut out = Tensor::zeros(&[c_out, h, w]).unwrap();
        for o in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = map.bias.data()[o];
                    for i in 0..c_in {
                        acc += map.weight.at2(o, i) * input.at3(i, y, x);
                    }
                    out.set3(o, y, x, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv1x1_identity_map() {
        let input = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.5).unwrap();
        let map = LinearMap::identity(2);
        let out = conv1x1(&input, &map).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv1x1_sums_channels() {
        let input = Tensor::new(
            vec![2, 1, 2],
            vec![1.0, 2.0, /* ch 1 */ 10.0, 20.0],
        )
        .unwrap();
        let map = LinearMap::new(
            Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        let out = conv1x1(&input, &map).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0]);
    }

    #[test]
    fn conv1x1_matches_triple_loop() {
        let mut rng = Rng::new(31);
        let input = Tensor::uniform(&[3, 2, 2], &mut rng, -1.0, 1.0).unwrap();
        let map = LinearMap {
            weight: Tensor::uniform(&[2, 3], &mut rng, -1.0, 1.0).unwrap(),
            bias: Tensor::uniform(&[2], &mut rng, -1.0, 1.0).unwrap(),
        };
        let got = conv1x1(&input, &map).unwrap();
        let want = conv1x1_reference(&input, &map);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn conv1x1_rejects_channel_mismatch() {
        let input = Tensor::zeros(&[3, 2, 2]).unwrap();
        let map = LinearMap::identity(2);
        assert!(conv1x1(&input, &map).is_err());
    }

    #[test]
    fn conv1x1_is_linear() {
        let mut rng = Rng::new(7);
        let u = Tensor::uniform(&[2, 3, 3], &mut rng, -1.0, 1.0).unwrap();
        let v = Tensor::uniform(&[2, 3, 3], &mut rng, -1.0, 1.0).unwrap();
        let map = LinearMap {
            weight: Tensor::uniform(&[3, 2], &mut rng, -1.0, 1.0).unwrap(),
            bias: Tensor::zeros(&[3]).unwrap(),
        };
        let lhs = conv1x1(&u.scaled(2.0).add(&v.scaled(-3.0)).unwrap(), &map).unwrap();
        let rhs = conv1x1(&u, &map)
            .unwrap()
            .scaled(2.0)
            .add(&conv1x1(&v, &map).unwrap().scaled(-3.0))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn pool_constant_stays_constant() {
        let input = Tensor::constant(&[2, 5, 7], 3.25).unwrap();
        let out = avg_pool_to(&input, 3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 3.25).abs() < 1e-15));
    }

    #[test]
    fn pool_identity_partition() {
        let input = Tensor::from_fn(&[1, 3, 3], |i| i as f64).unwrap();
        let out = avg_pool_to(&input, 3).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn pool_two_by_two_windows() {
        // 4x4 ramp 1..16, pooled to 2x2 block means.
        let input = Tensor::from_fn(&[1, 4, 4], |i| (i + 1) as f64).unwrap();
        let out = avg_pool_to(&input, 2).unwrap();
        assert_eq!(out.data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn pool_rejects_oversized_target() {
        let input = Tensor::zeros(&[1, 2, 2]).unwrap();
        assert!(avg_pool_to(&input, 3).is_err());
    }

    #[test]
    fn pool_preserves_global_mean_when_divisible() {
        let mut rng = Rng::new(5);
        let input = Tensor::uniform(&[1, 6, 6], &mut rng, -2.0, 2.0).unwrap();
        let out = avg_pool_to(&input, 3).unwrap();
        let mean_in: f64 = input.data().iter().sum::<f64>() / input.len() as f64;
        let mean_out: f64 = out.data().iter().sum::<f64>() / out.len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn pool2x2_block_means_and_rectangular_inputs() {
        let input = Tensor::from_fn(&[1, 4, 4], |i| (i + 1) as f64).unwrap();
        let out = avg_pool2x2(&input).unwrap();
        assert_eq!(out.data(), &[3.5, 5.5, 11.5, 13.5]);
        let rect = Tensor::from_fn(&[1, 2, 4], |i| (i + 1) as f64).unwrap();
        let out = avg_pool2x2(&rect).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2]);
        assert_eq!(out.data(), &[3.5, 5.5]);
        assert!(avg_pool2x2(&Tensor::zeros(&[1, 3, 4]).unwrap()).is_err());
    }

    #[test]
    fn pool2x2_backward_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let input = Tensor::uniform(&[2, 4, 6], &mut rng, -1.0, 1.0).unwrap();
        let out = avg_pool2x2(&input).unwrap();
        let w = crate::oracle::probe_weights(out.len());
        let mut upstream = Tensor::zeros(out.shape()).unwrap();
        upstream.data_mut().copy_from_slice(&w);
        let grad = avg_pool2x2_backward(&upstream).unwrap();
        let fd = crate::oracle::finite_diff_grad(&input, |t| {
            Ok(crate::oracle::probe_loss(&avg_pool2x2(t)?))
        })
        .unwrap();
        assert!(crate::oracle::max_rel_err(&grad, &fd).unwrap().0 <= 1e-6);
    }

    #[test]
    fn resize_identity() {
        let input = Tensor::from_fn(&[2, 3, 4], |i| i as f64).unwrap();
        let out = bilinear_resize(&input, 3, 4).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn resize_constant() {
        let input = Tensor::constant(&[1, 2, 2], -1.5).unwrap();
        let out = bilinear_resize(&input, 5, 3).unwrap();
        assert!(out.data().iter().all(|&v| (v + 1.5).abs() < 1e-15));
    }

    #[test]
    fn resize_center_of_two_by_two() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = bilinear_resize(&input, 3, 3).unwrap();
        assert!((out.at3(0, 1, 1) - 2.5).abs() < 1e-15);
        // Corners are preserved under align-corners.
        assert_eq!(out.at3(0, 0, 0), 1.0);
        assert_eq!(out.at3(0, 2, 2), 4.0);
    }

    #[test]
    fn resize_down_then_up_of_constant_is_identity() {
        let input = Tensor::constant(&[1, 4, 4], 2.0).unwrap();
        let down = bilinear_resize(&input, 2, 2).unwrap();
        let up = bilinear_resize(&down, 4, 4).unwrap();
        assert!(up.max_abs_diff(&input).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_equal_logits() {
        let out = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &out {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_element() {
        assert_eq!(softmax(&[17.5]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let logits = [1.0, 2.0, 3.0];
        let out = softmax(&logits).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for (o, l) in out.iter().zip(&logits) {
            assert!((o - l.exp() / z).abs() < 1e-15);
        }
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[0.3, -1.2, 2.5]).unwrap();
        let b = softmax(&[100.3, 98.8, 102.5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = LinearMap::init(&mut Rng::new(77), 3, 4);
        let b = LinearMap::init(&mut Rng::new(77), 3, 4);
        assert_eq!(a.weight, b.weight);
        assert_eq!(a.bias, b.bias);
        assert!(a.weight.data().iter().all(|v| v.abs() <= 0.5));
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_softmax_restricts_support() {
        let w = masked_softmax(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        assert_eq!(w[1], 0.0);
        let z = 1.0f64.exp() + 3.0f64.exp();
        assert!((w[0] - 1.0f64.exp() / z).abs() < 1e-15);
        assert!((w[2] - 3.0f64.exp() / z).abs() < 1e-15);
        // All masked: zero weights, not NaN.
        let none = masked_softmax(&[1.0, 2.0], &[false, false]).unwrap();
        assert_eq!(none, vec![0.0, 0.0]);
        // Full mask reduces to plain softmax.
        let full = masked_softmax(&[0.5, -1.0], &[true, true]).unwrap();
        let plain = softmax(&[0.5, -1.0]).unwrap();
        assert!((full[0] - plain[0]).abs() < 1e-15);
        // Softmax backward with zero-weight slots leaves them at zero grad.
        let g = softmax_backward(&w, &[0.3, 9.0, -0.2]);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn conv3x3_identity_kernel() {
        let mut weight = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        weight.set4(0, 0, 1, 1, 1.0);
        let conv = Conv3x3 {
            weight,
            bias: Tensor::zeros(&[1]).unwrap(),
            dilation: 1,
        };
        let input = Tensor::from_fn(&[1, 4, 4], |i| i as f64).unwrap();
        let out = conv3x3(&input, &conv).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv3x3_keeps_constant_fields_constant() {
        let mut rng = Rng::new(93);
        for dilation in [1usize, 2] {
            let conv = Conv3x3::init(&mut rng, 3, 2, dilation);
            let input = Tensor::constant(&[2, 4, 5], 0.7).unwrap();
            let out = conv3x3(&input, &conv).unwrap();
            // Edge clamping means every tap reads 0.7, so each output
            // channel is the constant 0.7 * sum(weights) + bias.
            for o in 0..3 {
                let want: f64 = (0..2)
                    .flat_map(|i| (0..9).map(move |t| (i, t)))
                    .map(|(i, t)| 0.7 * conv.weight.at4(o, i, t / 3, t % 3))
                    .sum::<f64>()
                    + conv.bias.data()[o];
                for y in 0..4 {
                    for x in 0..5 {
                        assert!((out.at3(o, y, x) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv3x3_single_pixel_sums_all_taps() {
        let mut rng = Rng::new(94);
        let conv = Conv3x3::init(&mut rng, 2, 1, 1);
        let input = Tensor::constant(&[1, 1, 1], 2.0).unwrap();
        let out = conv3x3(&input, &conv).unwrap();
        for o in 0..2 {
            let want: f64 = (0..9)
                .map(|t| 2.0 * conv.weight.at4(o, 0, t / 3, t % 3))
                .sum::<f64>()
                + conv.bias.data()[o];
            assert!((out.at3(o, 0, 0) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn conv3x3_backward_matches_finite_differences() {
        let mut rng = Rng::new(95);
        for dilation in [1usize, 2] {
            let conv = Conv3x3::init(&mut rng, 2, 2, dilation);
            let input = Tensor::uniform(&[2, 4, 4], &mut rng, -1.0, 1.0).unwrap();
            let out = conv3x3(&input, &conv).unwrap();
            let w = crate::oracle::probe_weights(out.len());
            let mut upstream = Tensor::zeros(out.shape()).unwrap();
            upstream.data_mut().copy_from_slice(&w);
            let (g_in, g_conv) = conv3x3_backward(&upstream, &input, &conv).unwrap();

            let fd_in = crate::oracle::finite_diff_grad(&input, |t| {
                Ok(crate::oracle::probe_loss(&conv3x3(t, &conv)?))
            })
            .unwrap();
            assert!(crate::oracle::max_rel_err(&g_in, &fd_in).unwrap().0 <= 1e-6);

            let fd_w = crate::oracle::finite_diff_grad(&conv.weight, |wt| {
                let c = Conv3x3 {
                    weight: wt.clone(),
                    bias: conv.bias.clone(),
                    dilation,
                };
                Ok(crate::oracle::probe_loss(&conv3x3(&input, &c)?))
            })
            .unwrap();
            assert!(crate::oracle::max_rel_err(&g_conv.weight, &fd_w).unwrap().0 <= 1e-6);

            let fd_b = crate::oracle::finite_diff_grad(&conv.bias, |b| {
                let c = Conv3x3 {
                    weight: conv.weight.clone(),
                    bias: b.clone(),
                    dilation,
                };
                Ok(crate::oracle::probe_loss(&conv3x3(&input, &c)?))
            })
            .unwrap();
            assert!(crate::oracle::max_rel_err(&g_conv.bias, &fd_b).unwrap().0 <= 1e-6);
        }
    }
}
