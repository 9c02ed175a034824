//! Channel affinity branch: each low-level channel attends to N_c
//! dynamically sampled channels, with the channel axis laid out as a
//! sqrt(c) x sqrt(c) lattice so the same deformable sampler applies.
//!
//! Pipeline: pool both inputs to a x a and downsample the high branch to
//! d x d, project with three channel-mixing maps, reindex channels onto
//! the lattice, run the shared deformed-grid attention (keys/queries are
//! a*a-vectors, values d*d-vectors), undo the reindexing and resize the
//! per-channel d x d aggregates back to H x W.

use crate::error::{DdsmError, Result};
use crate::nn::{self, LinearMap};
use crate::params::{add_linear_grads, impl_params, GradMap};
use crate::sampler::{self, GridSpec, SamplerParams};
use crate::spatial::{spatial_attention_backward, spatial_attention_forward, AttentionContext};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ChannelBranchParams {
    /// c -> c query projection on the pooled low branch.
    pub w_alpha: LinearMap,
    /// 2c -> c key projection on the pooled concatenation.
    pub w_beta: LinearMap,
    /// c -> c value projection on the downsampled high branch.
    pub w_gamma: LinearMap,
    /// Offset/modulation predictors over the channel lattice (a*a wide).
    pub sampler: SamplerParams,
    /// Pooling size for queries and keys.
    pub a: usize,
    /// Value resolution: the high branch is downsampled to d x d.
    pub d: usize,
}

impl_params!(
    ChannelBranchParams,
    ("w_alpha.weight", w_alpha.weight),
    ("w_alpha.bias", w_alpha.bias),
    ("w_beta.weight", w_beta.weight),
    ("w_beta.bias", w_beta.bias),
    ("w_gamma.weight", w_gamma.weight),
    ("w_gamma.bias", w_gamma.bias),
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

/// Integer square root when exact, used to place c channels on a lattice.
pub fn exact_sqrt(c: usize) -> Option<usize> {
    let s = (c as f64).sqrt().round() as usize;
    (s * s == c).then_some(s)
}

impl ChannelBranchParams {
    pub fn init(
        rng: &mut crate::rng::Rng,
        c: usize,
        a: usize,
        d: usize,
        grid: GridSpec,
    ) -> Result<Self> {
        if exact_sqrt(c).is_none() {
            return Err(DdsmError::Config(format!(
                "channel branch needs a perfect-square channel count, got {c}"
            )));
        }
        if a == 0 || d == 0 {
            return Err(DdsmError::Config("pooling sizes must be positive".into()));
        }
        Ok(Self {
            w_alpha: LinearMap::init(rng, c, c),
            w_beta: LinearMap::init(rng, c, 2 * c),
            w_gamma: LinearMap::init(rng, c, c),
            sampler: SamplerParams::init(a * a, grid),
            a,
            d,
        })
    }

    /// Like [`Self::init`] but with randomized predictors for gradient
    /// probing (fractional lattice coordinates).
    pub fn init_probe(
        rng: &mut crate::rng::Rng,
        c: usize,
        a: usize,
        d: usize,
        grid: GridSpec,
    ) -> Result<Self> {
        let mut p = Self::init(rng, c, a, d, grid)?;
        p.sampler = SamplerParams::init_random(rng, a * a, grid);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.w_alpha.out_channels()
    }

    pub fn lattice_side(&self) -> usize {
        exact_sqrt(self.channels()).expect("validated at construction")
    }

    pub fn grid(&self) -> GridSpec {
        self.sampler.grid
    }
}

/// Reindex (c, m, m) so channel i*sqrt(c)+j sits at lattice cell (i, j)
/// and its m*m map becomes the leading axis: out[f,i,j] = t[i*s+j, f/m, f%m].
pub fn channel_grid_view(t: &Tensor) -> Result<Tensor> {
    let sh = t.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(DdsmError::Shape(format!(
            "channel grid view wants (c,m,m), got {sh:?}"
        )));
    }
    let (c, m) = (sh[0], sh[1]);
    let side = exact_sqrt(c).ok_or_else(|| {
        DdsmError::Shape(format!("channel count {c} is not a perfect square"))
    })?;
    let mut out = Tensor::zeros(&[m * m, side, side])?;
    for i in 0..side {
        for j in 0..side {
            let ch = i * side + j;
            for f in 0..m * m {
                out.set3(f, i, j, t.at3(ch, f / m, f % m));
            }
        }
    }
    Ok(out)
}

/// Inverse of [`channel_grid_view`]; round-trips bitwise.
pub fn channel_grid_unview(t: &Tensor) -> Result<Tensor> {
    let sh = t.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(DdsmError::Shape(format!(
            "channel grid unview wants (m*m,s,s), got {sh:?}"
        )));
    }
    let (f_total, side) = (sh[0], sh[1]);
    let m = exact_sqrt(f_total).ok_or_else(|| {
        DdsmError::Shape(format!("leading extent {f_total} is not a perfect square"))
    })?;
    let mut out = Tensor::zeros(&[side * side, m, m])?;
    for i in 0..side {
        for j in 0..side {
            let ch = i * side + j;
            for f in 0..f_total {
                out.set3(ch, f / m, f % m, t.at3(f, i, j));
            }
        }
    }
    Ok(out)
}

/// Pool both inputs to a x a, concatenate, and downsample the high branch
/// to d x d for the value pathway.
pub fn pool_and_pack(
    x_l: &Tensor,
    x_h: &Tensor,
    params: &ChannelBranchParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c = params.channels();
    let (sl, sh) = (x_l.shape(), x_h.shape());
    if sl.len() != 3 || sl[0] != c || sh.len() != 3 || sh[0] != c {
        return Err(DdsmError::Shape(format!(
            "channel branch wants ({c},H,W) and ({c},H2,W2) inputs, got {sl:?} and {sh:?}"
        )));
    }
    let a = params.a;
    let d = params.d;
    if a > sl[1].min(sl[2]).min(sh[1]).min(sh[2]) {
        return Err(DdsmError::Shape(format!(
            "pooling size {a} exceeds an input extent ({sl:?}, {sh:?})"
        )));
    }
    if d > sh[1].min(sh[2]) {
        return Err(DdsmError::Shape(format!(
            "value resolution {d} exceeds the high input extents {sh:?}"
        )));
    }
    let x_l_p = nn::avg_pool_to(x_l, a)?;
    let x_h_p = nn::avg_pool_to(x_h, a)?;
    let x_cat_p = x_l_p.concat_channels(&x_h_p)?;
    let x_h_d = nn::bilinear_resize(x_h, d, d)?;
    Ok((x_l_p, x_cat_p, x_h_d))
}

/// Saved intermediates for the backward pass.
#[derive(Debug, Clone)]
pub struct ChannelContext {
    pub x_l_p: Tensor,
    pub x_cat_p: Tensor,
    pub x_h_d: Tensor,
    pub queries: Tensor, // (a*a, s, s)
    pub keys: Tensor,    // (a*a, s, s)
    pub vals: Tensor,    // (d*d, s, s)
    pub offsets: Tensor,
    pub mods: Tensor,
    pub attn: AttentionContext,
    /// Pre-resize per-channel aggregates, (c, d, d).
    pub core: Tensor,
    pub in_h: usize,
    pub in_w: usize,
    pub high_h: usize,
    pub high_w: usize,
}

/// Channel attention from pooled/packed inputs to the (c,H,W) output.
pub fn channel_attention(
    x_l_p: &Tensor,
    x_cat_p: &Tensor,
    x_h_d: &Tensor,
    h: usize,
    w: usize,
    params: &ChannelBranchParams,
) -> Result<Tensor> {
    Ok(channel_attention_forward(x_l_p, x_cat_p, x_h_d, h, w, params)?.0)
}

pub fn channel_attention_forward(
    x_l_p: &Tensor,
    x_cat_p: &Tensor,
    x_h_d: &Tensor,
    h: usize,
    w: usize,
    params: &ChannelBranchParams,
) -> Result<(Tensor, ChannelContext)> {
    let c = params.channels();
    let a = params.a;
    let d = params.d;
    if x_l_p.shape() != [c, a, a] || x_cat_p.shape() != [2 * c, a, a] || x_h_d.shape() != [c, d, d]
    {
        return Err(DdsmError::Shape(format!(
            "channel attention wants ({c},{a},{a}), ({},{a},{a}) and ({c},{d},{d}), got {:?}, {:?}, {:?}",
            2 * c,
            x_l_p.shape(),
            x_cat_p.shape(),
            x_h_d.shape()
        )));
    }
    let x_l_a = nn::conv1x1(x_l_p, &params.w_alpha)?;
    let x_cat_b = nn::conv1x1(x_cat_p, &params.w_beta)?;
    let x_h_g = nn::conv1x1(x_h_d, &params.w_gamma)?;
    let queries = channel_grid_view(&x_l_a)?;
    let keys = channel_grid_view(&x_cat_b)?;
    let vals = channel_grid_view(&x_h_g)?;
    let (offsets, mods) = sampler::predict_offsets(&keys, &params.sampler)?;
    let (core_lattice, attn) =
        spatial_attention_forward(&queries, &keys, &vals, &offsets, &mods, params.grid())?;
    let core = channel_grid_unview(&core_lattice)?;
    let out = nn::bilinear_resize(&core, h, w)?;
    Ok((
        out,
        ChannelContext {
            x_l_p: x_l_p.clone(),
            x_cat_p: x_cat_p.clone(),
            x_h_d: x_h_d.clone(),
            queries,
            keys,
            vals,
            offsets,
            mods,
            attn,
            core,
            in_h: h,
            in_w: w,
            high_h: d,
            high_w: d,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct ChannelBranchContext {
    pub core_ctx: ChannelContext,
    pub l_shape: (usize, usize),
    pub h_shape: (usize, usize),
}

/// Full branch on same-width inputs x_l (c,H,W) and x_h (c,H2,W2).
pub fn channel_branch_forward(
    x_l: &Tensor,
    x_h: &Tensor,
    params: &ChannelBranchParams,
) -> Result<(Tensor, ChannelBranchContext)> {
    let (x_l_p, x_cat_p, x_h_d) = pool_and_pack(x_l, x_h, params)?;
    let (h, w) = (x_l.shape()[1], x_l.shape()[2]);
    let (out, core_ctx) = channel_attention_forward(&x_l_p, &x_cat_p, &x_h_d, h, w, params)?;
    Ok((
        out,
        ChannelBranchContext {
            core_ctx,
            l_shape: (h, w),
            h_shape: (x_h.shape()[1], x_h.shape()[2]),
        },
    ))
}

/// Adjoint of [`channel_branch_forward`]: parameter gradients plus
/// gradients for both inputs. The high input receives contributions from
/// both the pooled key path and the downsampled value path.
pub fn channel_branch_backward(
    upstream: &Tensor,
    params: &ChannelBranchParams,
    ctx: &ChannelBranchContext,
) -> Result<(GradMap, Tensor, Tensor)> {
    let cc = &ctx.core_ctx;
    let (h, w) = ctx.l_shape;
    let c = params.channels();
    if upstream.shape() != [c, h, w] {
        return Err(DdsmError::Shape(format!(
            "channel backward upstream {:?} does not match output ({c},{h},{w})",
            upstream.shape()
        )));
    }
    let mut grads = GradMap::new();

    // Resize and reindexing are permutation/linear: push upstream back to
    // the lattice aggregates.
    let g_core = nn::bilinear_resize_backward(upstream, params.d, params.d)?;
    let g_core_lattice = channel_grid_view(&g_core)?;

    let (g_queries, g_keys_attn, g_vals, g_offsets, g_mods) = spatial_attention_backward(
        &g_core_lattice,
        &cc.queries,
        &cc.keys,
        &cc.vals,
        &cc.offsets,
        &cc.mods,
        params.grid(),
        &cc.attn,
    )?;

    let (g_keys_pred, g_off_pred, g_mod_pred) = sampler::predict_offsets_backward(
        &g_offsets,
        &g_mods,
        &cc.keys,
        &cc.mods,
        &params.sampler,
    )?;
    add_linear_grads(&mut grads, "offset_predictor", g_off_pred);
    add_linear_grads(&mut grads, "modulation_predictor", g_mod_pred);

    let mut g_keys = g_keys_attn;
    g_keys.accumulate(&g_keys_pred)?;

    let g_x_l_a = channel_grid_unview(&g_queries)?;
    let g_x_cat_b = channel_grid_unview(&g_keys)?;
    let g_x_h_g = channel_grid_unview(&g_vals)?;

    let (g_x_l_p_alpha, g_alpha) = nn::conv1x1_backward(&g_x_l_a, &cc.x_l_p, &params.w_alpha)?;
    add_linear_grads(&mut grads, "w_alpha", g_alpha);
    let (g_x_cat_p, g_beta) = nn::conv1x1_backward(&g_x_cat_b, &cc.x_cat_p, &params.w_beta)?;
    add_linear_grads(&mut grads, "w_beta", g_beta);
    let (g_x_h_d, g_gamma) = nn::conv1x1_backward(&g_x_h_g, &cc.x_h_d, &params.w_gamma)?;
    add_linear_grads(&mut grads, "w_gamma", g_gamma);

    let (g_x_l_p_cat, g_x_h_p) = g_x_cat_p.split_channels(c)?;
    let mut g_x_l_p = g_x_l_p_alpha;
    g_x_l_p.accumulate(&g_x_l_p_cat)?;

    let grad_x_l = nn::avg_pool_to_backward(&g_x_l_p, h, w)?;
    let (h2, w2) = ctx.h_shape;
    let mut grad_x_h = nn::avg_pool_to_backward(&g_x_h_p, h2, w2)?;
    grad_x_h.accumulate(&nn::bilinear_resize_backward(&g_x_h_d, h2, w2)?)?;
    Ok((grads, grad_x_l, grad_x_h))
}
