//! Independent reference implementations used to check the fast paths:
//! a central-difference gradient prober and brute-force dense attention
//! evaluators. Nothing here shares code with the modules under test
//! beyond the tensor container itself.

use crate::error::{DdsmError, Result};
use crate::nn::LinearMap;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------
// Private scalar-loop building blocks. These deliberately duplicate the
// main kernels with independent loop structures so a bug in one side
// cannot hide in the other.
// ---------------------------------------------------------------------

/// Triple-loop 1x1 convolution, exposed so composite tests can rebuild
/// pipelines step by step without touching the fast kernels.
pub fn conv_reference(input: &Tensor, map: &LinearMap) -> Tensor {
    ref_conv(input, map)
}

/// Loop-by-loop align-corners resize, exposed for the same reason.
pub fn resize_reference(input: &Tensor, h2: usize, w2: usize) -> Tensor {
    ref_resize(input, h2, w2)
}

/// Scalar-loop dilated 3x3 convolution with edge-clamped taps.
pub fn conv3x3_reference(input: &Tensor, weight: &Tensor, bias: &Tensor, dilation: usize) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = weight.shape()[0];
    let d = dilation as isize;
    let mut out = Tensor::zeros(&[c_out, h, w]).expect("valid shape");
    for o in 0..c_out {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = bias.data()[o];
                for i in 0..c_in {
                    for ky in -1..=1isize {
                        for kx in -1..=1isize {
                            let sy = (y + ky * d).max(0).min(h as isize - 1) as usize;
                            let sx = (x + kx * d).max(0).min(w as isize - 1) as usize;
                            acc += weight.at4(o, i, (ky + 1) as usize, (kx + 1) as usize)
                                * input.at3(i, sy, sx);
                        }
                    }
                }
                out.set3(o, y as usize, x as usize, acc);
            }
        }
    }
    out
}

/// Window-mean pooling to `a x a` using the floor/ceil window rule,
/// written independently of the fast path.
pub fn pool_to_reference(input: &Tensor, a: usize) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = Tensor::zeros(&[c, a, a]).expect("valid shape");
    for ch in 0..c {
        for i in 0..a {
            for j in 0..a {
                let (y0, y1) = (i * h / a, ((i + 1) * h + a - 1) / a);
                let (x0, x1) = (j * w / a, ((j + 1) * w + a - 1) / a);
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
    out
}

/// Exact 2x2 block means for even extents.
pub fn pool2x2_reference(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1] / 2, input.shape()[2] / 2);
    let mut out = Tensor::zeros(&[c, h, w]).expect("valid shape");
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for y in [2 * i, 2 * i + 1] {
                    for x in [2 * j, 2 * j + 1] {
                        acc += input.at3(ch, y, x);
                    }
                }
                out.set3(ch, i, j, acc / 4.0);
            }
        }
    }
    out
}

fn ref_conv(input: &Tensor, map: &LinearMap) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = map.out_channels();
    let mut out = Tensor::zeros(&[c_out, h, w]).expect("valid shape");
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

fn ref_bilinear(map: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (map.shape()[1] as isize, map.shape()[2] as isize);
    let y0 = y.floor();
    let x0 = x.floor();
    let mut acc = 0.0;
    for (ty, wy) in [(y0, 1.0 - (y - y0)), (y0 + 1.0, y - y0)] {
        for (tx, wx) in [(x0, 1.0 - (x - x0)), (x0 + 1.0, x - x0)] {
            let (ti, tj) = (ty as isize, tx as isize);
            if ty >= 0.0 && tx >= 0.0 && ti < h && tj < w {
                acc += wy * wx * map.at3(c, ti as usize, tj as usize);
            }
        }
    }
    acc
}

/// Softmax over the `valid` subset computed with a plain exp/sum (no max
/// shift); masked entries get weight exactly 0. All-masked input yields
/// all-zero weights.
fn ref_masked_softmax(logits: &[f64], valid: &[bool]) -> Vec<f64> {
    let mut weights = vec![0.0; logits.len()];
    let mut z = 0.0;
    for (i, l) in logits.iter().enumerate() {
        if valid[i] {
            weights[i] = l.exp();
            z += weights[i];
        }
    }
    if z > 0.0 {
        for w in &mut weights {
            *w /= z;
        }
    }
    weights
}

fn ref_resize(input: &Tensor, h2: usize, w2: usize) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = Tensor::zeros(&[c, h2, w2]).expect("valid shape");
    for ch in 0..c {
        for i in 0..h2 {
            let y = if h2 == 1 {
                0.0
            } else {
                (i * (h - 1)) as f64 / (h2 - 1) as f64
            };
            for j in 0..w2 {
                let x = if w2 == 1 {
                    0.0
                } else {
                    (j * (w - 1)) as f64 / (w2 - 1) as f64
                };
                out.set3(ch, i, j, ref_bilinear(input, ch, y, x));
            }
        }
    }
    out
}

fn grid_displacement(k: usize, n: usize) -> (isize, isize) {
    let r = (k / 2) as isize;
    ((n / k) as isize - r, (n % k) as isize - r)
}

// ---------------------------------------------------------------------
// Dense attention baseline.
// ---------------------------------------------------------------------

/// Full non-local attention: every position attends to every position.
/// out(p) = sum_{p'} softmax_{p'}(<q(p), k(p')>) * v(p').
pub fn dense_nonlocal(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let mut out = Tensor::zeros(&[c, h, w]).expect("valid shape");
    for y in 0..h {
        for x in 0..w {
            let mut logits = vec![0.0; h * w];
            for yy in 0..h {
                for xx in 0..w {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += q.at3(ch, y, x) * k.at3(ch, yy, xx);
                    }
                    logits[yy * w + xx] = dot;
                }
            }
            let valid = vec![true; h * w];
            let weights = ref_masked_softmax(&logits, &valid);
            for yy in 0..h {
                for xx in 0..w {
                    let wgt = weights[yy * w + xx];
                    for ch in 0..c {
                        out.add3(ch, y, x, wgt * v.at3(ch, yy, xx));
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------
// Sparse-attention enumerations.
// ---------------------------------------------------------------------

/// Scalar-loop transliteration of the spatial affinity aggregation:
/// per position, sample k*k modulated keys and values at the deformed
/// grid points (own bilinear routine), form dot-product logits against
/// the query, softmax over the samples whose coordinate lies inside the
/// closed feature box, and average the sampled values.
pub fn spatial_attention_reference(
    q: &Tensor,
    key_src: &Tensor,
    val_src: &Tensor,
    offsets: &Tensor,
    mods: &Tensor,
    k: usize,
) -> Tensor {
    let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let n = k * k;
    let mut out = Tensor::zeros(&[c, h, w]).expect("valid shape");
    for y in 0..h {
        for x in 0..w {
            let mut logits = vec![0.0; n];
            let mut valid = vec![false; n];
            let mut vals = vec![vec![0.0; c]; n];
            for s in 0..n {
                let (dy, dx) = grid_displacement(k, s);
                let sy = y as f64 + dy as f64 + offsets.at3(2 * s, y, x);
                let sx = x as f64 + dx as f64 + offsets.at3(2 * s + 1, y, x);
                valid[s] =
                    sy >= 0.0 && sy <= (h - 1) as f64 && sx >= 0.0 && sx <= (w - 1) as f64;
                let m = mods.at3(s, y, x);
                let mut dot = 0.0;
                for ch in 0..c {
                    let kv = ref_bilinear(key_src, ch, sy, sx) * m;
                    dot += q.at3(ch, y, x) * kv;
                    vals[s][ch] = ref_bilinear(val_src, ch, sy, sx) * m;
                }
                logits[s] = dot;
            }
            let weights = ref_masked_softmax(&logits, &valid);
            for s in 0..n {
                for ch in 0..c {
                    out.add3(ch, y, x, weights[s] * vals[s][ch]);
                }
            }
        }
    }
    out
}

/// Scalar-loop transliteration of the channel affinity aggregation over
/// the sqrt(c) x sqrt(c) channel lattice, from the pooled/packed inputs
/// to the resized per-channel output.
#[allow(clippy::too_many_arguments)]
pub fn channel_attention_reference(
    x_l_p: &Tensor,   // (c, a, a)
    x_cat_p: &Tensor, // (2c, a, a)
    x_h_d: &Tensor,   // (c, d, d)
    h: usize,
    w: usize,
    w_alpha: &LinearMap,
    w_beta: &LinearMap,
    w_gamma: &LinearMap,
    offset_predictor: &LinearMap,
    modulation_predictor: &LinearMap,
    k_c: usize,
) -> Tensor {
    let c = x_l_p.shape()[0];
    let a = x_l_p.shape()[1];
    let d = x_h_d.shape()[1];
    let side = (c as f64).sqrt().round() as usize;
    assert_eq!(side * side, c, "channel count must be a perfect square");
    let n = k_c * k_c;

    let x_l_a = ref_conv(x_l_p, w_alpha); // (c,a,a)
    let x_cat_b = ref_conv(x_cat_p, w_beta); // (c,a,a)
    let x_h_g = ref_conv(x_h_d, w_gamma); // (c,d,d)

    // Lattice views by direct index arithmetic: channel i*side+j sits at
    // lattice cell (i,j); its per-channel map flattens to the leading axis.
    let mut keys = Tensor::zeros(&[a * a, side, side]).expect("valid shape");
    let mut queries = Tensor::zeros(&[a * a, side, side]).expect("valid shape");
    let mut values = Tensor::zeros(&[d * d, side, side]).expect("valid shape");
    for i in 0..side {
        for j in 0..side {
            let ch = i * side + j;
            for f in 0..a * a {
                keys.set3(f, i, j, x_cat_b.at3(ch, f / a, f % a));
                queries.set3(f, i, j, x_l_a.at3(ch, f / a, f % a));
            }
            for f in 0..d * d {
                values.set3(f, i, j, x_h_g.at3(ch, f / d, f % d));
            }
        }
    }

    // Offset/modulation prediction from the key lattice.
    let mut core = Tensor::zeros(&[c, d, d]).expect("valid shape");
    for i in 0..side {
        for j in 0..side {
            let mut feat = vec![0.0; a * a];
            for (f, slot) in feat.iter_mut().enumerate() {
                *slot = keys.at3(f, i, j);
            }
            let predict = |map: &LinearMap, t: usize| -> f64 {
                let mut acc = map.bias.data()[t];
                for (f, fv) in feat.iter().enumerate() {
                    acc += map.weight.at2(t, f) * fv;
                }
                acc
            };
            let mut logits = vec![0.0; n];
            let mut valid = vec![false; n];
            let mut sampled_vals = vec![vec![0.0; d * d]; n];
            for s in 0..n {
                let (dy, dx) = grid_displacement(k_c, s);
                let off_y = predict(offset_predictor, 2 * s);
                let off_x = predict(offset_predictor, 2 * s + 1);
                let m = 1.0 / (1.0 + (-predict(modulation_predictor, s)).exp());
                let sy = i as f64 + dy as f64 + off_y;
                let sx = j as f64 + dx as f64 + off_x;
                valid[s] = sy >= 0.0
                    && sy <= (side - 1) as f64
                    && sx >= 0.0
                    && sx <= (side - 1) as f64;
                let mut dot = 0.0;
                for f in 0..a * a {
                    dot += queries.at3(f, i, j) * ref_bilinear(&keys, f, sy, sx) * m;
                }
                logits[s] = dot;
                for f in 0..d * d {
                    sampled_vals[s][f] = ref_bilinear(&values, f, sy, sx) * m;
                }
            }
            let weights = ref_masked_softmax(&logits, &valid);
            let ch = i * side + j;
            for f in 0..d * d {
                let mut acc = 0.0;
                for s in 0..n {
                    acc += weights[s] * sampled_vals[s][f];
                }
                core.set3(ch, f / d, f % d, acc);
            }
        }
    }
    ref_resize(&core, h, w)
}

/// Step size for central differences. With f64 scalars and O(1) values
/// this balances truncation against round-off near 1e-10 relative error.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Element-wise worst relative error between an analytic gradient and its
/// numeric estimate, plus the offending flat index.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> Result<(f64, usize)> {
    analytic.max_abs_diff(numeric)?; // shape check
    let mut worst = 0.0;
    let mut worst_idx = 0;
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = rel_err(*a, *n);
        if e > worst {
            worst = e;
            worst_idx = i;
        }
    }
    Ok((worst, worst_idx))
}

/// Central-difference gradient of a scalar-valued function with respect
/// to one tensor argument: g_i = (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn finite_diff_grad<F>(x: &Tensor, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape())?;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
    }
    Ok(grad)
}

/// Central-difference gradient with respect to one named tensor of a
/// parameter set, probing one scalar at a time.
pub fn finite_diff_param_grad<P, F>(params: &P, name: &str, mut f: F) -> Result<Tensor>
where
    P: crate::params::ParamSet + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let mut probe = params.clone();
    let len = params
        .get(name)
        .ok_or_else(|| DdsmError::Config(format!("no parameter named {name}")))?
        .len();
    let shape = params.get(name).expect("checked above").shape().to_vec();
    let mut grad = Tensor::zeros(&shape)?;
    for i in 0..len {
        let orig = probe.get(name).expect("checked above").data()[i];
        probe.get_mut(name).expect("checked above").data_mut()[i] = orig + FD_STEP;
        let plus = f(&probe)?;
        probe.get_mut(name).expect("checked above").data_mut()[i] = orig - FD_STEP;
        let minus = f(&probe)?;
        probe.get_mut(name).expect("checked above").data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
    }
    Ok(grad)
}

/// Central difference for a single coordinate of one named tensor; used
/// where whole tensors are too large to sweep exhaustively.
pub fn finite_diff_param_coord<P, F>(params: &P, name: &str, idx: usize, mut f: F) -> Result<f64>
where
    P: crate::params::ParamSet + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let mut probe = params.clone();
    let t = probe
        .get_mut(name)
        .ok_or_else(|| DdsmError::Config(format!("no parameter named {name}")))?;
    if idx >= t.len() {
        return Err(DdsmError::Config(format!(
            "coordinate {idx} out of range for {name} (len {})",
            t.len()
        )));
    }
    let orig = t.data()[idx];
    t.data_mut()[idx] = orig + FD_STEP;
    let plus = f(&probe)?;
    probe.get_mut(name).expect("checked above").data_mut()[idx] = orig - FD_STEP;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

const PROBE_SEED: u64 = 0x9027_c51a_f2d1_4e06;

/// A fixed pseudo-random projection turning a tensor output into a scalar,
/// so one finite-difference sweep exercises every output element. The
/// weights are deterministic in the output length alone.
pub fn probe_weights(len: usize) -> Vec<f64> {
    let mut rng = crate::rng::Rng::new(PROBE_SEED);
    (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// Weighted sum of an output tensor against [`probe_weights`].
pub fn probe_loss(out: &Tensor) -> f64 {
    let w = probe_weights(out.len());
    out.data().iter().zip(&w).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn conv3x3_reference_matches_fast_path() {
        let mut rng = Rng::new(91);
        for dilation in [1usize, 2] {
            let conv = crate::nn::Conv3x3::init(&mut rng, 3, 2, dilation);
            let input = Tensor::uniform(&[2, 5, 6], &mut rng, -1.0, 1.0).unwrap();
            let slow = conv3x3_reference(&input, &conv.weight, &conv.bias, dilation);
            let fast = crate::nn::conv3x3(&input, &conv).unwrap();
            assert!(slow.max_abs_diff(&fast).unwrap() < 1e-12);
        }
    }

    #[test]
    fn pool_references_match_fast_paths() {
        let mut rng = Rng::new(92);
        let input = Tensor::uniform(&[2, 6, 6], &mut rng, -1.0, 1.0).unwrap();
        assert!(pool_to_reference(&input, 4)
            .max_abs_diff(&crate::nn::avg_pool_to(&input, 4).unwrap())
            .unwrap()
            < 1e-12);
        assert!(pool2x2_reference(&input)
            .max_abs_diff(&crate::nn::avg_pool2x2(&input).unwrap())
            .unwrap()
            < 1e-12);
    }

    #[test]
    fn fd_recovers_quadratic_gradient() {
        // f(x) = sum x_i^2 has gradient 2x.
        let mut rng = Rng::new(11);
        let x = Tensor::uniform(&[2, 3], &mut rng, -2.0, 2.0).unwrap();
        let g = finite_diff_grad(&x, |t| Ok(t.data().iter().map(|v| v * v).sum()))
            .unwrap();
        let want = x.scaled(2.0);
        let (err, _) = max_rel_err(&want, &g).unwrap();
        assert!(err < 1e-8, "worst rel err {err}");
    }

    #[test]
    fn fd_recovers_linear_gradient_exactly_to_roundoff() {
        let x = Tensor::from_fn(&[4], |i| i as f64).unwrap();
        let g = finite_diff_grad(&x, |t| {
            Ok(t.data().iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum())
        })
        .unwrap();
        for (i, v) in g.data().iter().enumerate() {
            assert!(rel_err(*v, (i + 1) as f64) < 1e-9);
        }
    }

    #[test]
    fn rel_err_floors_near_zero() {
        assert!(rel_err(0.0, 0.0) == 0.0);
        assert!(rel_err(1e-12, -1e-12) < 1.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn probe_weights_are_stable() {
        assert_eq!(probe_weights(8), probe_weights(8));
        assert_eq!(probe_weights(8)[..4], probe_weights(4)[..]);
    }

    #[test]
    fn dense_single_position_passes_value_through() {
        let q = Tensor::new(vec![2, 1, 1], vec![0.3, -0.7]).unwrap();
        let k = Tensor::new(vec![2, 1, 1], vec![1.1, 0.2]).unwrap();
        let v = Tensor::new(vec![2, 1, 1], vec![5.0, -3.0]).unwrap();
        let out = dense_nonlocal(&q, &k, &v);
        assert!(out.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn dense_zero_query_averages_values() {
        let mut rng = Rng::new(13);
        let q = Tensor::zeros(&[2, 3, 3]).unwrap();
        let k = Tensor::uniform(&[2, 3, 3], &mut rng, -1.0, 1.0).unwrap();
        let v = Tensor::uniform(&[2, 3, 3], &mut rng, -1.0, 1.0).unwrap();
        let out = dense_nonlocal(&q, &k, &v);
        for ch in 0..2 {
            let mean: f64 = (0..3)
                .flat_map(|y| (0..3).map(move |x| (y, x)))
                .map(|(y, x)| v.at3(ch, y, x))
                .sum::<f64>()
                / 9.0;
            for y in 0..3 {
                for x in 0..3 {
                    assert!((out.at3(ch, y, x) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dense_two_by_two_matches_hand_expansion() {
        let mut rng = Rng::new(17);
        let q = Tensor::uniform(&[2, 2, 2], &mut rng, -1.0, 1.0).unwrap();
        let k = Tensor::uniform(&[2, 2, 2], &mut rng, -1.0, 1.0).unwrap();
        let v = Tensor::uniform(&[2, 2, 2], &mut rng, -1.0, 1.0).unwrap();
        let out = dense_nonlocal(&q, &k, &v);
        // Expand the four-term softmax by hand for each query position.
        for y in 0..2 {
            for x in 0..2 {
                let dot = |yy: usize, xx: usize| {
                    q.at3(0, y, x) * k.at3(0, yy, xx) + q.at3(1, y, x) * k.at3(1, yy, xx)
                };
                let e = [
                    dot(0, 0).exp(),
                    dot(0, 1).exp(),
                    dot(1, 0).exp(),
                    dot(1, 1).exp(),
                ];
                let z = e[0] + e[1] + e[2] + e[3];
                for ch in 0..2 {
                    let want = (e[0] * v.at3(ch, 0, 0)
                        + e[1] * v.at3(ch, 0, 1)
                        + e[2] * v.at3(ch, 1, 0)
                        + e[3] * v.at3(ch, 1, 1))
                        / z;
                    assert!((out.at3(ch, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }
}
