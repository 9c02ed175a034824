//! Spatial affinity branch: each low-level position attends to N
//! dynamically sampled positions of the concatenated low/high features
//! and aggregates sampled high-level values.
//!
//! Pipeline: reduce both inputs to a common width, upsample the high
//! branch, add positional embeddings, project query/key/value, predict
//! offsets and modulations from the concatenation, sample keys and values
//! at the shared deformed grid, softmax the per-position dot-product
//! logits over the in-box samples, and average the sampled values.

use crate::error::{DdsmError, Result};
use crate::nn::{self, LinearMap};
use crate::params::{add_grad, add_linear_grads, impl_params, GradMap};
use crate::sampler::{self, GridSpec, SampleContext, SamplerParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SpatialBranchParams {
    /// C_l -> C_r input reduction.
    pub reduce_l: LinearMap,
    /// C_h -> C_r input reduction.
    pub reduce_h: LinearMap,
    /// C_r -> C_r query projection.
    pub w_theta: LinearMap,
    /// 2*C_r -> C_r key projection over the concatenated features.
    pub w_phi: LinearMap,
    /// C_r -> C_r value projection over the upsampled high branch.
    pub w_g: LinearMap,
    /// Positional embedding added to the reduced low branch, (C_r,H,W).
    pub e_pl: Tensor,
    /// Positional embedding added to the upsampled high branch, (C_r,H,W).
    pub e_ph: Tensor,
    /// Offset/modulation predictors fed by the concatenation (2*C_r wide).
    pub sampler: SamplerParams,
}

impl_params!(
    SpatialBranchParams,
    ("reduce_l.weight", reduce_l.weight),
    ("reduce_l.bias", reduce_l.bias),
    ("reduce_h.weight", reduce_h.weight),
    ("reduce_h.bias", reduce_h.bias),
    ("w_theta.weight", w_theta.weight),
    ("w_theta.bias", w_theta.bias),
    ("w_phi.weight", w_phi.weight),
    ("w_phi.bias", w_phi.bias),
    ("w_g.weight", w_g.weight),
    ("w_g.bias", w_g.bias),
    ("e_pl", e_pl),
    ("e_ph", e_ph),
    ("offset_predictor.weight", sampler.offset_predictor.weight),
    ("offset_predictor.bias", sampler.offset_predictor.bias),
    (
        "modulation_predictor.weight",
        sampler.modulation_predictor.weight
    ),
    (
        "modulation_predictor.bias",
        sampler.modulation_predictor.bias
    ),
);

impl SpatialBranchParams {
    /// Training initialization: random projections and embeddings,
    /// zeroed offset/modulation predictors (undeformed grid, gate 0.5).
    pub fn init(
        rng: &mut crate::rng::Rng,
        c_l: usize,
        c_h: usize,
        c_r: usize,
        h: usize,
        w: usize,
        grid: GridSpec,
    ) -> Self {
        Self {
            reduce_l: LinearMap::init(rng, c_r, c_l),
            reduce_h: LinearMap::init(rng, c_r, c_h),
            w_theta: LinearMap::init(rng, c_r, c_r),
            w_phi: LinearMap::init(rng, c_r, 2 * c_r),
            w_g: LinearMap::init(rng, c_r, c_r),
            e_pl: nn::init_embedding(rng, c_r, h, w),
            e_ph: nn::init_embedding(rng, c_r, h, w),
            sampler: SamplerParams::init(2 * c_r, grid),
        }
    }

    /// Gradient-check initialization: like [`Self::init`] but with
    /// randomized predictors so sampling coordinates are fractional,
    /// keeping finite differences away from the bilinear kinks.
    pub fn init_probe(
        rng: &mut crate::rng::Rng,
        c_l: usize,
        c_h: usize,
        c_r: usize,
        h: usize,
        w: usize,
        grid: GridSpec,
    ) -> Self {
        let mut p = Self::init(rng, c_l, c_h, c_r, h, w, grid);
        p.sampler = SamplerParams::init_random(rng, 2 * c_r, grid);
        p
    }

    pub fn reduced_width(&self) -> usize {
        self.reduce_l.out_channels()
    }

    pub fn grid(&self) -> GridSpec {
        self.sampler.grid
    }
}

/// Common width rule when the caller does not fix one: half the smaller
/// input width, rounded up, bumped to the next even number.
pub fn default_reduced_width(c_l: usize, c_h: usize) -> usize {
    let c = c_l.min(c_h).div_ceil(2);
    c + c % 2
}

/// Saved attention intermediates for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionContext {
    pub sampled_keys: Tensor, // (C,H,W,N)
    pub sampled_vals: Tensor, // (C,H,W,N)
    pub weights: Tensor,      // (N,H,W), exactly 0 at out-of-box samples
}

/// Queries and keys must agree exactly; values may carry a different
/// channel count (the channel branch aggregates d*d-channel values with
/// a*a-channel keys) but share the spatial extents.
fn check_attention_shapes(
    q: &Tensor,
    key_src: &Tensor,
    val_src: &Tensor,
) -> Result<(usize, usize, usize, usize)> {
    let s = q.shape();
    if s.len() != 3 {
        return Err(DdsmError::Shape(format!(
            "attention wants (C,H,W) tensors, got {s:?}"
        )));
    }
    if key_src.shape() != s
        || val_src.shape().len() != 3
        || val_src.shape()[1..] != s[1..]
    {
        return Err(DdsmError::Shape(format!(
            "attention query {:?}, keys {:?} and values {:?} must agree spatially",
            s,
            key_src.shape(),
            val_src.shape()
        )));
    }
    Ok((s[0], s[1], s[2], val_src.shape()[0]))
}

/// Per-position sparse attention over the deformed sample set. Samples
/// whose coordinate falls outside the closed box [0,H-1]x[0,W-1] are
/// excluded from the softmax support; positions with no in-box sample
/// output zero.
pub fn spatial_attention(
    q: &Tensor,
    key_src: &Tensor,
    val_src: &Tensor,
    offsets: &Tensor,
    mods: &Tensor,
    grid: GridSpec,
) -> Result<Tensor> {
    Ok(spatial_attention_forward(q, key_src, val_src, offsets, mods, grid)?.0)
}

pub fn spatial_attention_forward(
    q: &Tensor,
    key_src: &Tensor,
    val_src: &Tensor,
    offsets: &Tensor,
    mods: &Tensor,
    grid: GridSpec,
) -> Result<(Tensor, AttentionContext)> {
    let (c, h, w, c_v) = check_attention_shapes(q, key_src, val_src)?;
    let n = grid.n();
    let sampled_keys = sampler::sample_forward(key_src, offsets, mods, grid)?;
    let sampled_vals = sampler::sample_forward(val_src, offsets, mods, grid)?;
    let mut weights = Tensor::zeros(&[n, h, w])?;
    let mut out = Tensor::zeros(&[c_v, h, w])?;
    let mut logits = vec![0.0; n];
    let mut valid = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            for s in 0..n {
                valid[s] = sampler::sample_in_box(offsets, grid, y, x, s, h, w);
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += q.at3(ch, y, x) * sampled_keys.at4(ch, y, x, s);
                }
                logits[s] = dot;
            }
            let wts = nn::masked_softmax(&logits, &valid)?;
            for s in 0..n {
                weights.set3(s, y, x, wts[s]);
                if wts[s] != 0.0 {
                    for ch in 0..c_v {
                        out.add3(ch, y, x, wts[s] * sampled_vals.at4(ch, y, x, s));
                    }
                }
            }
        }
    }
    Ok((
        out,
        AttentionContext {
            sampled_keys,
            sampled_vals,
            weights,
        },
    ))
}

/// Adjoint of [`spatial_attention_forward`]. The in-box mask is treated
/// as locally constant (its flips are measure-zero in offset space).
/// Returns gradients for q, key_src, val_src, offsets, modulations.
#[allow(clippy::too_many_arguments)]
pub fn spatial_attention_backward(
    upstream: &Tensor,
    q: &Tensor,
    key_src: &Tensor,
    val_src: &Tensor,
    offsets: &Tensor,
    mods: &Tensor,
    grid: GridSpec,
    ctx: &AttentionContext,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let (c, h, w, c_v) = check_attention_shapes(q, key_src, val_src)?;
    if upstream.shape() != [c_v, h, w] {
        return Err(DdsmError::Shape(format!(
            "attention backward upstream {:?} does not match output ({c_v},{h},{w})",
            upstream.shape()
        )));
    }
    let n = grid.n();
    if ctx.weights.shape() != [n, h, w] || ctx.sampled_keys.shape() != [c, h, w, n] {
        return Err(DdsmError::Shape(
            "attention backward context does not match the forward call".into(),
        ));
    }
    let mut grad_q = Tensor::zeros(&[c, h, w])?;
    let mut up_keys = Tensor::zeros(&[c, h, w, n])?;
    let mut up_vals = Tensor::zeros(&[c_v, h, w, n])?;
    let mut wts = vec![0.0; n];
    let mut grad_w = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            for s in 0..n {
                wts[s] = ctx.weights.at3(s, y, x);
                let mut acc = 0.0;
                for ch in 0..c_v {
                    acc += upstream.at3(ch, y, x) * ctx.sampled_vals.at4(ch, y, x, s);
                }
                grad_w[s] = acc;
            }
            let grad_logits = nn::softmax_backward(&wts, &grad_w);
            for s in 0..n {
                for ch in 0..c_v {
                    up_vals.set4(ch, y, x, s, wts[s] * upstream.at3(ch, y, x));
                }
                for ch in 0..c {
                    up_keys.set4(ch, y, x, s, grad_logits[s] * q.at3(ch, y, x));
                    grad_q.add3(ch, y, x, grad_logits[s] * ctx.sampled_keys.at4(ch, y, x, s));
                }
            }
        }
    }
    let key_ctx = SampleContext {
        input: key_src.clone(),
        offsets: offsets.clone(),
        mods: mods.clone(),
        grid,
    };
    let (grad_key_src, go_k, gm_k) = sampler::sample_backward(&up_keys, &key_ctx)?;
    let val_ctx = SampleContext {
        input: val_src.clone(),
        offsets: offsets.clone(),
        mods: mods.clone(),
        grid,
    };
    let (grad_val_src, go_v, gm_v) = sampler::sample_backward(&up_vals, &val_ctx)?;
    let mut grad_offsets = go_k;
    grad_offsets.accumulate(&go_v)?;
    let mut grad_mods = gm_k;
    grad_mods.accumulate(&gm_v)?;
    Ok((grad_q, grad_key_src, grad_val_src, grad_offsets, grad_mods))
}

/// Intermediates of the full branch, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct SpatialCoreContext {
    pub x_l_red: Tensor,
    pub x_h_red: Tensor, // at the high branch's native resolution
    pub l_emb: Tensor,
    pub h_emb: Tensor,
    pub x_cat: Tensor,
    pub q: Tensor,
    pub key_src: Tensor,
    pub val_src: Tensor,
    pub offsets: Tensor,
    pub mods: Tensor,
    pub attn: AttentionContext,
}

/// Branch core on already-reduced inputs x_l_red (C_r,H,W) and
/// x_h_red (C_r,H2,W2). The DDSM block calls this directly so both
/// branches share one reduction.
pub fn spatial_core_forward(
    x_l_red: &Tensor,
    x_h_red: &Tensor,
    params: &SpatialBranchParams,
) -> Result<(Tensor, SpatialCoreContext)> {
    let c_r = params.reduced_width();
    let s = x_l_red.shape();
    if s.len() != 3 || s[0] != c_r {
        return Err(DdsmError::Shape(format!(
            "reduced low input must be ({c_r},H,W), got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    if x_h_red.shape().len() != 3 || x_h_red.shape()[0] != c_r {
        return Err(DdsmError::Shape(format!(
            "reduced high input must be ({c_r},H2,W2), got {:?}",
            x_h_red.shape()
        )));
    }
    if params.e_pl.shape() != [c_r, h, w] || params.e_ph.shape() != [c_r, h, w] {
        return Err(DdsmError::Shape(format!(
            "positional embeddings {:?} do not match features ({c_r},{h},{w})",
            params.e_pl.shape()
        )));
    }
    let x_hat = nn::bilinear_resize(x_h_red, h, w)?;
    let l_emb = x_l_red.add(&params.e_pl)?;
    let h_emb = x_hat.add(&params.e_ph)?;
    let x_cat = l_emb.concat_channels(&h_emb)?;
    let q = nn::conv1x1(&l_emb, &params.w_theta)?;
    let key_src = nn::conv1x1(&x_cat, &params.w_phi)?;
    let val_src = nn::conv1x1(&h_emb, &params.w_g)?;
    let (offsets, mods) = sampler::predict_offsets(&x_cat, &params.sampler)?;
    let (out, attn) =
        spatial_attention_forward(&q, &key_src, &val_src, &offsets, &mods, params.grid())?;
    Ok((
        out,
        SpatialCoreContext {
            x_l_red: x_l_red.clone(),
            x_h_red: x_h_red.clone(),
            l_emb,
            h_emb,
            x_cat,
            q,
            key_src,
            val_src,
            offsets,
            mods,
            attn,
        },
    ))
}

/// Adjoint of [`spatial_core_forward`]: parameter gradients under this
/// branch's names plus gradients for the two reduced inputs.
pub fn spatial_core_backward(
    upstream: &Tensor,
    params: &SpatialBranchParams,
    ctx: &SpatialCoreContext,
) -> Result<(GradMap, Tensor, Tensor)> {
    let (grad_q, grad_key_src, grad_val_src, grad_offsets, grad_mods) =
        spatial_attention_backward(
            upstream,
            &ctx.q,
            &ctx.key_src,
            &ctx.val_src,
            &ctx.offsets,
            &ctx.mods,
            params.grid(),
            &ctx.attn,
        )?;
    let mut grads = GradMap::new();

    let (g_l_emb_q, g_theta) = nn::conv1x1_backward(&grad_q, &ctx.l_emb, &params.w_theta)?;
    add_linear_grads(&mut grads, "w_theta", g_theta);
    let (g_cat_key, g_phi) = nn::conv1x1_backward(&grad_key_src, &ctx.x_cat, &params.w_phi)?;
    add_linear_grads(&mut grads, "w_phi", g_phi);
    let (g_h_emb_val, g_g) = nn::conv1x1_backward(&grad_val_src, &ctx.h_emb, &params.w_g)?;
    add_linear_grads(&mut grads, "w_g", g_g);

    let (g_cat_pred, g_off, g_mod) = sampler::predict_offsets_backward(
        &grad_offsets,
        &grad_mods,
        &ctx.x_cat,
        &ctx.mods,
        &params.sampler,
    )?;
    add_linear_grads(&mut grads, "offset_predictor", g_off);
    add_linear_grads(&mut grads, "modulation_predictor", g_mod);

    let mut g_cat = g_cat_key;
    g_cat.accumulate(&g_cat_pred)?;
    let c_r = params.reduced_width();
    let (g_l_emb_cat, g_h_emb_cat) = g_cat.split_channels(c_r)?;

    let mut g_l_emb = g_l_emb_q;
    g_l_emb.accumulate(&g_l_emb_cat)?;
    let mut g_h_emb = g_h_emb_val;
    g_h_emb.accumulate(&g_h_emb_cat)?;

    add_grad(&mut grads, "e_pl", g_l_emb.clone());
    add_grad(&mut grads, "e_ph", g_h_emb.clone());

    let grad_x_l_red = g_l_emb;
    let grad_x_h_red = nn::bilinear_resize_backward(
        &g_h_emb,
        ctx.x_h_red.shape()[1],
        ctx.x_h_red.shape()[2],
    )?;
    Ok((grads, grad_x_l_red, grad_x_h_red))
}

/// The query/key/value preparation stage on raw inputs. Exposed mainly
/// for compositional testing; the full branch calls the same code path.
pub fn prepare_qkv(
    x_l: &Tensor,
    x_h: &Tensor,
    params: &SpatialBranchParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let x_l_red = nn::conv1x1(x_l, &params.reduce_l)?;
    let x_h_red = nn::conv1x1(x_h, &params.reduce_h)?;
    let (_, ctx) = spatial_core_forward(&x_l_red, &x_h_red, params)?;
    Ok((ctx.q, ctx.key_src, ctx.val_src))
}

#[derive(Debug, Clone)]
pub struct SpatialBranchContext {
    pub x_l: Tensor,
    pub x_h: Tensor,
    pub core: SpatialCoreContext,
}

/// Full branch on raw inputs: reduce, then run the core.
pub fn spatial_branch_forward(
    x_l: &Tensor,
    x_h: &Tensor,
    params: &SpatialBranchParams,
) -> Result<(Tensor, SpatialBranchContext)> {
    let x_l_red = nn::conv1x1(x_l, &params.reduce_l)?;
    let x_h_red = nn::conv1x1(x_h, &params.reduce_h)?;
    let (out, core) = spatial_core_forward(&x_l_red, &x_h_red, params)?;
    Ok((
        out,
        SpatialBranchContext {
            x_l: x_l.clone(),
            x_h: x_h.clone(),
            core,
        },
    ))
}

/// Adjoint of [`spatial_branch_forward`]: all parameter gradients plus
/// gradients for both raw inputs.
pub fn spatial_branch_backward(
    upstream: &Tensor,
    params: &SpatialBranchParams,
    ctx: &SpatialBranchContext,
) -> Result<(GradMap, Tensor, Tensor)> {
    let (mut grads, g_x_l_red, g_x_h_red) = spatial_core_backward(upstream, params, &ctx.core)?;
    let (grad_x_l, g_red_l) = nn::conv1x1_backward(&g_x_l_red, &ctx.x_l, &params.reduce_l)?;
    add_linear_grads(&mut grads, "reduce_l", g_red_l);
    let (grad_x_h, g_red_h) = nn::conv1x1_backward(&g_x_h_red, &ctx.x_h, &params.reduce_h)?;
    add_linear_grads(&mut grads, "reduce_h", g_red_h);
    Ok((grads, grad_x_l, grad_x_h))
}
