//! The full dual-sampling block: one pair of input reducers feeds an
//! identity (residual) path, the spatial affinity branch and the channel
//! affinity branch, and the three results are summed. Output width is the
//! reduced width C_r, which must be a perfect square so the channel branch
//! can lay the channels out on a lattice.

use crate::channel::{
    channel_branch_backward, channel_branch_forward, exact_sqrt, ChannelBranchContext,
    ChannelBranchParams,
};
use crate::error::{DdsmError, Result};
use crate::nn;
use crate::params::{add_linear_grads, GradMap, ParamSet};
use crate::sampler::GridSpec;
use crate::spatial::{
    spatial_core_backward, spatial_core_forward, SpatialBranchParams, SpatialCoreContext,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DdsmParams {
    /// Reducers + spatial affinity branch. The reducers here are shared:
    /// both branches and the residual path consume their outputs.
    pub spatial: SpatialBranchParams,
    /// Channel affinity branch over the reduced features.
    pub channel: ChannelBranchParams,
}

impl ParamSet for DdsmParams {
    fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .spatial
            .names()
            .into_iter()
            .map(|n| format!("spatial.{n}"))
            .collect();
        out.extend(self.channel.names().into_iter().map(|n| format!("channel.{n}")));
        out
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        if let Some(rest) = name.strip_prefix("spatial.") {
            self.spatial.get(rest)
        } else if let Some(rest) = name.strip_prefix("channel.") {
            self.channel.get(rest)
        } else {
            None
        }
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("spatial.") {
            self.spatial.get_mut(rest)
        } else if let Some(rest) = name.strip_prefix("channel.") {
            self.channel.get_mut(rest)
        } else {
            None
        }
    }
}

impl DdsmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        rng: &mut crate::rng::Rng,
        c_l: usize,
        c_h: usize,
        c_r: usize,
        h: usize,
        w: usize,
        k: usize,
        k_c: usize,
        a: usize,
        d: usize,
    ) -> Result<Self> {
        if exact_sqrt(c_r).is_none() {
            return Err(DdsmError::Config(format!(
                "reduced width must be a perfect square for the channel lattice, got {c_r}"
            )));
        }
        Ok(Self {
            spatial: SpatialBranchParams::init(rng, c_l, c_h, c_r, h, w, GridSpec::new(k)?),
            channel: ChannelBranchParams::init(rng, c_r, a, d, GridSpec::new(k_c)?)?,
        })
    }

    /// Randomized-predictor variant for gradient probing.
    #[allow(clippy::too_many_arguments)]
    pub fn init_probe(
        rng: &mut crate::rng::Rng,
        c_l: usize,
        c_h: usize,
        c_r: usize,
        h: usize,
        w: usize,
        k: usize,
        k_c: usize,
        a: usize,
        d: usize,
    ) -> Result<Self> {
        let mut p = Self::init(rng, c_l, c_h, c_r, h, w, k, k_c, a, d)?;
        p.spatial = SpatialBranchParams::init_probe(
            &mut rng.fork(),
            c_l,
            c_h,
            c_r,
            h,
            w,
            GridSpec::new(k)?,
        );
        p.channel =
            ChannelBranchParams::init_probe(&mut rng.fork(), c_r, a, d, GridSpec::new(k_c)?)?;
        Ok(p)
    }

    pub fn reduced_width(&self) -> usize {
        self.spatial.reduced_width()
    }
}

/// Saved intermediates for [`ddsm_backward`].
#[derive(Debug, Clone)]
pub struct DdsmContext {
    pub x_l: Tensor,
    pub x_h: Tensor,
    pub x_l_red: Tensor,
    pub x_h_red: Tensor,
    pub spatial: SpatialCoreContext,
    pub channel: ChannelBranchContext,
}

pub fn ddsm_forward(x_l: &Tensor, x_h: &Tensor, params: &DdsmParams) -> Result<Tensor> {
    Ok(ddsm_forward_ctx(x_l, x_h, params)?.0)
}

pub fn ddsm_forward_ctx(
    x_l: &Tensor,
    x_h: &Tensor,
    params: &DdsmParams,
) -> Result<(Tensor, DdsmContext)> {
    if params.channel.channels() != params.reduced_width() {
        return Err(DdsmError::Config(format!(
            "channel branch width {} does not match reduced width {}",
            params.channel.channels(),
            params.reduced_width()
        )));
    }
    let x_l_red = nn::conv1x1(x_l, &params.spatial.reduce_l)?;
    let x_h_red = nn::conv1x1(x_h, &params.spatial.reduce_h)?;
    let (s_out, s_ctx) = spatial_core_forward(&x_l_red, &x_h_red, &params.spatial)?;
    let (c_out, c_ctx) = channel_branch_forward(&x_l_red, &x_h_red, &params.channel)?;
    let mut out = x_l_red.clone();
    out.accumulate(&s_out)?;
    out.accumulate(&c_out)?;
    Ok((
        out,
        DdsmContext {
            x_l: x_l.clone(),
            x_h: x_h.clone(),
            x_l_red,
            x_h_red,
            spatial: s_ctx,
            channel: c_ctx,
        },
    ))
}

/// Adjoint of [`ddsm_forward_ctx`]: gradients for every parameter under
/// `spatial.` / `channel.` prefixes plus both input gradients. The residual
/// path routes the upstream signal straight into the reducers.
pub fn ddsm_backward(
    upstream: &Tensor,
    params: &DdsmParams,
    ctx: &DdsmContext,
) -> Result<(GradMap, Tensor, Tensor)> {
    let (s_grads_core, g_l_red_s, g_h_red_s) =
        spatial_core_backward(upstream, &params.spatial, &ctx.spatial)?;
    let (c_grads, g_l_red_c, g_h_red_c) =
        channel_branch_backward(upstream, &params.channel, &ctx.channel)?;

    let mut g_x_l_red = upstream.clone();
    g_x_l_red.accumulate(&g_l_red_s)?;
    g_x_l_red.accumulate(&g_l_red_c)?;
    let mut g_x_h_red = g_h_red_s;
    g_x_h_red.accumulate(&g_h_red_c)?;

    let mut s_grads = s_grads_core;
    let (grad_x_l, g_red_l) = nn::conv1x1_backward(&g_x_l_red, &ctx.x_l, &params.spatial.reduce_l)?;
    add_linear_grads(&mut s_grads, "reduce_l", g_red_l);
    let (grad_x_h, g_red_h) = nn::conv1x1_backward(&g_x_h_red, &ctx.x_h, &params.spatial.reduce_h)?;
    add_linear_grads(&mut s_grads, "reduce_h", g_red_h);

    let mut grads = GradMap::new();
    crate::params::merge_prefixed(&mut grads, "spatial", s_grads);
    crate::params::merge_prefixed(&mut grads, "channel", c_grads);
    Ok((grads, grad_x_l, grad_x_h))
}
