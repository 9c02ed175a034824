//! The dynamic sampler: for every position p it gathers N = k*k features
//! at p + p_n + off_n(p), bilinearly interpolated with zero padding and
//! gated by a per-sample modulation scalar in [0,1]. Offsets and
//! modulations are predicted from a feature map by zero-initialized 1x1
//! convolutions, so a fresh sampler is an undeformed k x k grid with gate
//! one half.

use crate::error::{DdsmError, Result};
use crate::nn::{self, LinearMap, LinearMapGrads};
use crate::tensor::Tensor;

/// A centered regular k x k sampling grid, k odd. Displacements are
/// enumerated row-major from (-(k-1)/2, -(k-1)/2) to (+(k-1)/2, +(k-1)/2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    k: usize,
}

impl GridSpec {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(DdsmError::Config(format!(
                "sampling grid size must be odd and positive, got {k}"
            )));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.k * self.k
    }

    /// The integer displacement (dy, dx) of sample n.
    pub fn offset(&self, n: usize) -> (isize, isize) {
        let r = (self.k / 2) as isize;
        ((n / self.k) as isize - r, (n % self.k) as isize - r)
    }

    pub fn offsets(&self) -> Vec<(isize, isize)> {
        (0..self.n()).map(|n| self.offset(n)).collect()
    }

    /// Smallest grid whose undeformed samples cover every position of an
    /// h x w map from any anchor: k = 2*max(h,w) - 1.
    pub fn covering(h: usize, w: usize) -> Self {
        Self {
            k: 2 * h.max(w) - 1,
        }
    }
}

/// Offset and modulation predictors for one sampler instance.
#[derive(Debug, Clone)]
pub struct SamplerParams {
    /// C_pred -> 2N; output channels interleave (dy_0, dx_0, dy_1, ...).
    pub offset_predictor: LinearMap,
    /// C_pred -> N, passed through a sigmoid.
    pub modulation_predictor: LinearMap,
    pub grid: GridSpec,
}

impl SamplerParams {
    /// Zero-initialized predictors: offsets 0, modulation sigmoid(0) = 0.5.
    pub fn init(c_pred: usize, grid: GridSpec) -> Self {
        Self {
            offset_predictor: LinearMap::init_zero(2 * grid.n(), c_pred),
            modulation_predictor: LinearMap::init_zero(grid.n(), c_pred),
            grid,
        }
    }

    /// Randomized predictors for gradient probing: fractional offsets keep
    /// sampling coordinates away from the bilinear kinks at integers.
    pub fn init_random(rng: &mut crate::rng::Rng, c_pred: usize, grid: GridSpec) -> Self {
        let n = grid.n();
        let mut p = Self {
            offset_predictor: LinearMap::init(rng, 2 * n, c_pred),
            modulation_predictor: LinearMap::init(rng, n, c_pred),
            grid,
        };
        for b in p.offset_predictor.bias.data_mut() {
            *b = rng.uniform(-0.75, 0.75);
        }
        for b in p.modulation_predictor.bias.data_mut() {
            *b = rng.uniform(-1.0, 1.0);
        }
        p
    }

    pub fn check_feature_channels(&self, c: usize) -> Result<()> {
        if self.offset_predictor.in_channels() != c || self.modulation_predictor.in_channels() != c
        {
            return Err(DdsmError::Shape(format!(
                "sampler predictors expect {} feature channels, got {c}",
                self.offset_predictor.in_channels()
            )));
        }
        Ok(())
    }
}

/// offsets (2N,H,W) interleaved (dy_n, dx_n); modulations (N,H,W) in (0,1).
pub fn predict_offsets(features: &Tensor, params: &SamplerParams) -> Result<(Tensor, Tensor)> {
    params.check_feature_channels(features.shape()[0])?;
    let offsets = nn::conv1x1(features, &params.offset_predictor)?;
    let mut mods = nn::conv1x1(features, &params.modulation_predictor)?;
    for v in mods.data_mut() {
        *v = nn::sigmoid(*v);
    }
    Ok((offsets, mods))
}

/// Adjoint of [`predict_offsets`]. `mods` is the forward sigmoid output.
pub fn predict_offsets_backward(
    grad_offsets: &Tensor,
    grad_mods: &Tensor,
    features: &Tensor,
    mods: &Tensor,
    params: &SamplerParams,
) -> Result<(Tensor, LinearMapGrads, LinearMapGrads)> {
    let mut grad_logits = grad_mods.clone();
    for (g, m) in grad_logits.data_mut().iter_mut().zip(mods.data()) {
        *g *= m * (1.0 - m);
    }
    let (gi_off, g_off) = nn::conv1x1_backward(grad_offsets, features, &params.offset_predictor)?;
    let (gi_mod, g_mod) =
        nn::conv1x1_backward(&grad_logits, features, &params.modulation_predictor)?;
    let mut grad_features = gi_off;
    grad_features.accumulate(&gi_mod)?;
    Ok((grad_features, g_off, g_mod))
}

/// 4-neighbor bilinear interpolation at fractional (y, x); neighbors
/// outside [0,H-1]x[0,W-1] contribute 0 (zero padding).
pub fn bilinear_sample(input: &Tensor, y: f64, x: f64) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut out = vec![0.0; c];
    // Entirely outside the padded support: every tap is out of bounds.
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return out;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let taps = [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x0 + 1.0, (1.0 - ly) * lx),
        (y0 + 1.0, x0, ly * (1.0 - lx)),
        (y0 + 1.0, x0 + 1.0, ly * lx),
    ];
    for (ty, tx, weight) in taps {
        if ty < 0.0 || tx < 0.0 || ty >= h as f64 || tx >= w as f64 || weight == 0.0 {
            continue;
        }
        let (ty, tx) = (ty as usize, tx as usize);
        for (ch, o) in out.iter_mut().enumerate() {
            *o += weight * input.at3(ch, ty, tx);
        }
    }
    out
}

/// Everything backward needs to replay the forward tap geometry.
#[derive(Debug, Clone)]
pub struct SampleContext {
    pub input: Tensor,
    pub offsets: Tensor,
    pub mods: Tensor,
    pub grid: GridSpec,
}

fn check_sampler_shapes(
    input: &Tensor,
    offsets: &Tensor,
    mods: &Tensor,
    grid: GridSpec,
) -> Result<(usize, usize, usize, usize)> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(DdsmError::Shape(format!(
            "sampler wants a (C,H,W) input, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let n = grid.n();
    if offsets.shape() != [2 * n, h, w] {
        return Err(DdsmError::Shape(format!(
            "offset field {:?} does not match grid N={n} over {h}x{w}",
            offsets.shape()
        )));
    }
    if mods.shape() != [n, h, w] {
        return Err(DdsmError::Shape(format!(
            "modulation field {:?} does not match grid N={n} over {h}x{w}",
            mods.shape()
        )));
    }
    Ok((c, h, w, n))
}

/// Gathers the deformed sample stack: out[c,y,x,n] =
/// bilinear_sample(input, (y,x) + grid_n + off_n(y,x))[c] * mod_n(y,x).
pub fn sample_forward(
    input: &Tensor,
    offsets: &Tensor,
    mods: &Tensor,
    grid: GridSpec,
) -> Result<Tensor> {
    let (c, h, w, n) = check_sampler_shapes(input, offsets, mods, grid)?;
    let mut out = Tensor::zeros(&[c, h, w, n])?;
    for y in 0..h {
        for x in 0..w {
            for s in 0..n {
                let (dy, dx) = grid.offset(s);
                let sy = y as f64 + dy as f64 + offsets.at3(2 * s, y, x);
                let sx = x as f64 + dx as f64 + offsets.at3(2 * s + 1, y, x);
                let m = mods.at3(s, y, x);
                let v = bilinear_sample(input, sy, sx);
                for (ch, val) in v.iter().enumerate() {
                    out.set4(ch, y, x, s, val * m);
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`sample_forward`]. Coordinate gradients use the
/// piecewise-linear derivative of the bilinear weights; at integer
/// coordinates (where the weight has a kink) the right-hand derivative is
/// taken, matching the floor-based tap cell of the forward pass.
pub fn sample_backward(
    upstream: &Tensor,
    ctx: &SampleContext,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w, n) = check_sampler_shapes(&ctx.input, &ctx.offsets, &ctx.mods, ctx.grid)?;
    if upstream.shape() != [c, h, w, n] {
        return Err(DdsmError::Shape(format!(
            "sampler backward upstream {:?} does not match stack ({c},{h},{w},{n})",
            upstream.shape()
        )));
    }
    let mut grad_input = Tensor::zeros(&[c, h, w])?;
    let mut grad_offsets = Tensor::zeros(&[2 * n, h, w])?;
    let mut grad_mods = Tensor::zeros(&[n, h, w])?;
    for y in 0..h {
        for x in 0..w {
            for s in 0..n {
                let (dy, dx) = ctx.grid.offset(s);
                let sy = y as f64 + dy as f64 + ctx.offsets.at3(2 * s, y, x);
                let sx = x as f64 + dx as f64 + ctx.offsets.at3(2 * s + 1, y, x);
                if sy <= -1.0 || sx <= -1.0 || sy >= h as f64 || sx >= w as f64 {
                    continue;
                }
                let m = ctx.mods.at3(s, y, x);
                let y0 = sy.floor();
                let x0 = sx.floor();
                let ly = sy - y0;
                let lx = sx - x0;
                // Tap weights and their derivatives w.r.t. (sy, sx).
                let taps = [
                    (y0, x0, (1.0 - ly) * (1.0 - lx), -(1.0 - lx), -(1.0 - ly)),
                    (y0, x0 + 1.0, (1.0 - ly) * lx, -lx, 1.0 - ly),
                    (y0 + 1.0, x0, ly * (1.0 - lx), 1.0 - lx, -ly),
                    (y0 + 1.0, x0 + 1.0, ly * lx, lx, ly),
                ];
                let mut gm = 0.0;
                let mut gy = 0.0;
                let mut gx = 0.0;
                for (ty, tx, weight, dwy, dwx) in taps {
                    if ty < 0.0 || tx < 0.0 || ty >= h as f64 || tx >= w as f64 {
                        continue;
                    }
                    let (ty, tx) = (ty as usize, tx as usize);
                    for ch in 0..c {
                        let u = upstream.at4(ch, y, x, s);
                        let val = ctx.input.at3(ch, ty, tx);
                        grad_input.add3(ch, ty, tx, u * m * weight);
                        gm += u * weight * val;
                        gy += u * m * dwy * val;
                        gx += u * m * dwx * val;
                    }
                }
                grad_mods.add3(s, y, x, gm);
                grad_offsets.add3(2 * s, y, x, gy);
                grad_offsets.add3(2 * s + 1, y, x, gx);
            }
        }
    }
    Ok((grad_input, grad_offsets, grad_mods))
}

/// Whether the sampling coordinate of sample `s` at position (y, x) lies
/// inside the closed feature box [0,H-1]x[0,W-1]. Attention layers drop
/// out-of-box samples from their softmax support so a full-coverage grid
/// reproduces dense attention exactly; the sampler itself keeps
/// zero-padding semantics.
pub fn sample_in_box(
    offsets: &Tensor,
    grid: GridSpec,
    y: usize,
    x: usize,
    s: usize,
    h: usize,
    w: usize,
) -> bool {
    let (dy, dx) = grid.offset(s);
    let sy = y as f64 + dy as f64 + offsets.at3(2 * s, y, x);
    let sx = x as f64 + dx as f64 + offsets.at3(2 * s + 1, y, x);
    sy >= 0.0 && sy <= (h - 1) as f64 && sx >= 0.0 && sx <= (w - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::rng::Rng;

    #[test]
    fn grid_is_centered_row_major() {
        let g = GridSpec::new(3).unwrap();
        assert_eq!(g.n(), 9);
        assert_eq!(g.offset(0), (-1, -1));
        assert_eq!(g.offset(4), (0, 0));
        assert_eq!(g.offset(8), (1, 1));
        let sum = g.offsets().iter().fold((0, 0), |a, o| (a.0 + o.0, a.1 + o.1));
        assert_eq!(sum, (0, 0));
        assert!(GridSpec::new(2).is_err());
        assert!(GridSpec::new(0).is_err());
    }

    #[test]
    fn covering_grid_reaches_every_position() {
        let g = GridSpec::covering(4, 4);
        assert_eq!(g.k(), 7);
        // From the worst anchor (0,0) the grid spans -3..=3, covering 0..=3.
        let reach: Vec<_> = g.offsets().iter().map(|o| o.0).collect();
        assert!(reach.contains(&3) && reach.contains(&-3));
    }

    #[test]
    fn bilinear_grid_point_and_midpoint() {
        let map = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&map, 1.0, 0.0), vec![3.0]);
        assert_eq!(bilinear_sample(&map, 0.5, 0.5), vec![2.5]);
        assert_eq!(bilinear_sample(&map, -1.0, -1.0), vec![0.0]);
        // Partially out of bounds: only the in-map taps contribute.
        let v = bilinear_sample(&map, -0.5, 0.0);
        assert!((v[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_init_predictors_give_identity_grid() {
        let grid = GridSpec::new(3).unwrap();
        let params = SamplerParams::init(4, grid);
        let features = Tensor::from_fn(&[4, 3, 3], |i| i as f64).unwrap();
        let (off, mods) = predict_offsets(&features, &params).unwrap();
        assert!(off.data().iter().all(|&v| v == 0.0));
        assert!(mods.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn predicted_modulations_strictly_inside_unit_interval() {
        let grid = GridSpec::new(3).unwrap();
        let mut rng = Rng::new(3);
        let params = SamplerParams::init_random(&mut rng, 4, grid);
        let features = Tensor::uniform(&[4, 3, 3], &mut rng, -5.0, 5.0).unwrap();
        let (_, mods) = predict_offsets(&features, &params).unwrap();
        assert!(mods.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn predict_matches_conv_then_sigmoid() {
        let grid = GridSpec::new(1).unwrap();
        let mut rng = Rng::new(9);
        let params = SamplerParams::init_random(&mut rng, 4, grid);
        let features = Tensor::uniform(&[4, 3, 3], &mut rng, -1.0, 1.0).unwrap();
        let (off, mods) = predict_offsets(&features, &params).unwrap();
        let off_ref = nn::conv1x1(&features, &params.offset_predictor).unwrap();
        assert_eq!(off, off_ref);
        let logit_ref = nn::conv1x1(&features, &params.modulation_predictor).unwrap();
        for (m, z) in mods.data().iter().zip(logit_ref.data()) {
            assert!((m - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
        }
    }

    fn fractional_fields(rng: &mut Rng, n: usize, h: usize, w: usize, span: f64) -> (Tensor, Tensor) {
        let offsets = Tensor::uniform(&[2 * n, h, w], rng, -span, span).unwrap();
        let mods = Tensor::uniform(&[n, h, w], rng, 0.05, 0.95).unwrap();
        (offsets, mods)
    }

    #[test]
    fn degenerate_deformation_is_im2col() {
        let grid = GridSpec::new(3).unwrap();
        let input = Tensor::from_fn(&[2, 5, 5], |i| (i * 7 % 23) as f64).unwrap();
        let offsets = Tensor::zeros(&[18, 5, 5]).unwrap();
        let mods = Tensor::constant(&[9, 5, 5], 1.0).unwrap();
        let out = sample_forward(&input, &offsets, &mods, grid).unwrap();
        for y in 1..4 {
            for x in 1..4 {
                for s in 0..9 {
                    let (dy, dx) = grid.offset(s);
                    for c in 0..2 {
                        let want = input.at3(c, (y as isize + dy) as usize, (x as isize + dx) as usize);
                        assert_eq!(out.at4(c, y, x, s), want);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_modulation_zeroes_the_stack() {
        let grid = GridSpec::new(3).unwrap();
        let mut rng = Rng::new(21);
        let input = Tensor::uniform(&[2, 4, 4], &mut rng, -1.0, 1.0).unwrap();
        let offsets = Tensor::uniform(&[18, 4, 4], &mut rng, -1.0, 1.0).unwrap();
        let mods = Tensor::zeros(&[9, 4, 4]).unwrap();
        let out = sample_forward(&input, &offsets, &mods, grid).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stack_matches_per_sample_oracle() {
        let grid = GridSpec::new(3).unwrap();
        let mut rng = Rng::new(40);
        let input = Tensor::uniform(&[2, 4, 4], &mut rng, -1.0, 1.0).unwrap();
        let (offsets, mods) = fractional_fields(&mut rng, 9, 4, 4, 2.0);
        let out = sample_forward(&input, &offsets, &mods, grid).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for s in 0..9 {
                    let (dy, dx) = grid.offset(s);
                    let sy = y as f64 + dy as f64 + offsets.at3(2 * s, y, x);
                    let sx = x as f64 + dx as f64 + offsets.at3(2 * s + 1, y, x);
                    let v = bilinear_sample(&input, sy, sx);
                    let m = mods.at3(s, y, x);
                    for c in 0..2 {
                        assert!((out.at4(c, y, x, s) - v[c] * m).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_is_linear_in_input() {
        let grid = GridSpec::new(3).unwrap();
        let mut rng = Rng::new(55);
        let u = Tensor::uniform(&[2, 4, 4], &mut rng, -1.0, 1.0).unwrap();
        let v = Tensor::uniform(&[2, 4, 4], &mut rng, -1.0, 1.0).unwrap();
        let (offsets, mods) = fractional_fields(&mut rng, 9, 4, 4, 1.5);
        let lhs = sample_forward(&u.scaled(2.5).add(&v.scaled(-1.5)).unwrap(), &offsets, &mods, grid)
            .unwrap();
        let rhs = sample_forward(&u, &offsets, &mods, grid)
            .unwrap()
            .scaled(2.5)
            .add(&sample_forward(&v, &offsets, &mods, grid).unwrap().scaled(-1.5))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn integer_offsets_landing_on_lattice_match_direct_reads() {
        let grid = GridSpec::new(1).unwrap();
        let input = Tensor::from_fn(&[1, 4, 4], |i| i as f64).unwrap();
        let mods = Tensor::constant(&[1, 4, 4], 1.0).unwrap();
        // Offset (+1,+2) from each position: exact lattice points.
        let mut offsets = Tensor::zeros(&[2, 4, 4]).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                offsets.set3(0, y, x, 1.0);
                offsets.set3(1, y, x, 2.0);
            }
        }
        let out = sample_forward(&input, &offsets, &mods, grid).unwrap();
        for y in 0..3 {
            for x in 0..2 {
                assert_eq!(out.at4(0, y, x, 0), input.at3(0, y + 1, x + 2));
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let grid = GridSpec::new(3).unwrap();
        let mut rng = Rng::new(60);
        let input = Tensor::uniform(&[2, 4, 4], &mut rng, -1.0, 1.0).unwrap();
        let (offsets, mods) = fractional_fields(&mut rng, 9, 4, 4, 1.0);
        let ctx = SampleContext {
            input,
            offsets,
            mods,
            grid,
        };
        let upstream = Tensor::zeros(&[2, 4, 4, 9]).unwrap();
        let (gi, go, gm) = sample_backward(&upstream, &ctx).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(go.data().iter().all(|&v| v == 0.0));
        assert!(gm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_at_integer_grid_is_pure_scatter() {
        let grid = GridSpec::new(1).unwrap();
        let input = Tensor::from_fn(&[1, 3, 3], |i| i as f64).unwrap();
        let offsets = Tensor::zeros(&[2, 3, 3]).unwrap();
        let mods = Tensor::constant(&[1, 3, 3], 1.0).unwrap();
        let upstream = Tensor::from_fn(&[1, 3, 3, 1], |i| (i + 1) as f64).unwrap();
        let ctx = SampleContext {
            input: input.clone(),
            offsets,
            mods,
            grid,
        };
        let (gi, _, _) = sample_backward(&upstream, &ctx).unwrap();
        // Sample at own position with weight 1: grad_input == upstream.
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(gi.at3(0, y, x), upstream.at4(0, y, x, 0));
            }
        }
    }

    #[test]
    fn all_three_gradients_match_finite_differences() {
        let grid = GridSpec::new(3).unwrap();
        let mut rng = Rng::new(77);
        let input = Tensor::uniform(&[2, 5, 5], &mut rng, -1.0, 1.0).unwrap();
        let (offsets, mods) = fractional_fields(&mut rng, 9, 5, 5, 1.6);
        let ctx = SampleContext {
            input: input.clone(),
            offsets: offsets.clone(),
            mods: mods.clone(),
            grid,
        };
        let out = sample_forward(&input, &offsets, &mods, grid).unwrap();
        let w = oracle::probe_weights(out.len());
        let mut upstream = Tensor::zeros(out.shape()).unwrap();
        upstream.data_mut().copy_from_slice(&w);
        let (gi, go, gm) = sample_backward(&upstream, &ctx).unwrap();

        let fd_input = oracle::finite_diff_grad(&input, |t| {
            Ok(oracle::probe_loss(&sample_forward(t, &offsets, &mods, grid)?))
        })
        .unwrap();
        let (e, _) = oracle::max_rel_err(&gi, &fd_input).unwrap();
        assert!(e <= 1e-6, "input gradient rel err {e}");

        let fd_off = oracle::finite_diff_grad(&offsets, |t| {
            Ok(oracle::probe_loss(&sample_forward(&input, t, &mods, grid)?))
        })
        .unwrap();
        let (e, _) = oracle::max_rel_err(&go, &fd_off).unwrap();
        assert!(e <= 1e-6, "offset gradient rel err {e}");

        let fd_mods = oracle::finite_diff_grad(&mods, |t| {
            Ok(oracle::probe_loss(&sample_forward(&input, &offsets, t, grid)?))
        })
        .unwrap();
        let (e, _) = oracle::max_rel_err(&gm, &fd_mods).unwrap();
        assert!(e <= 1e-6, "modulation gradient rel err {e}");
    }

    #[test]
    fn adjoint_dot_product_identity() {
        let grid = GridSpec::new(3).unwrap();
        let mut rng = Rng::new(90);
        let v = Tensor::uniform(&[2, 4, 4], &mut rng, -1.0, 1.0).unwrap();
        let (offsets, mods) = fractional_fields(&mut rng, 9, 4, 4, 1.0);
        let u = Tensor::uniform(&[2, 4, 4, 9], &mut rng, -1.0, 1.0).unwrap();
        let fwd = sample_forward(&v, &offsets, &mods, grid).unwrap();
        let ctx = SampleContext {
            input: v.clone(),
            offsets,
            mods,
            grid,
        };
        let (gi, _, _) = sample_backward(&u, &ctx).unwrap();
        let lhs = fwd.dot(&u).unwrap();
        let rhs = v.dot(&gi).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn coordinate_gradient_vanishes_fully_outside() {
        let grid = GridSpec::new(1).unwrap();
        let input = Tensor::constant(&[1, 3, 3], 2.0).unwrap();
        let mut offsets = Tensor::zeros(&[2, 3, 3]).unwrap();
        // Push the sample at (0,0) far outside the padded support.
        offsets.set3(0, 0, 0, -10.0);
        offsets.set3(1, 0, 0, -10.0);
        let mods = Tensor::constant(&[1, 3, 3], 1.0).unwrap();
        let upstream = Tensor::constant(&[1, 3, 3, 1], 1.0).unwrap();
        let ctx = SampleContext {
            input,
            offsets,
            mods,
            grid,
        };
        let (_, go, _) = sample_backward(&upstream, &ctx).unwrap();
        assert_eq!(go.at3(0, 0, 0), 0.0);
        assert_eq!(go.at3(1, 0, 0), 0.0);
    }

    #[test]
    fn rejects_mismatched_fields() {
        let grid = GridSpec::new(3).unwrap();
        let input = Tensor::zeros(&[2, 4, 4]).unwrap();
        let offsets = Tensor::zeros(&[4, 4, 4]).unwrap(); // wrong: needs 18
        let mods = Tensor::zeros(&[9, 4, 4]).unwrap();
        assert!(sample_forward(&input, &offsets, &mods, grid).is_err());
    }
}
