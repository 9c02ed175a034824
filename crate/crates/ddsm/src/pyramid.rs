//! Toy segmentation architectures hosting the fusion block: a four-stage
//! convolutional pyramid fused top-down through dual-sampling or plain
//! bilinear-add junctions, plus a single-insertion variant that runs a
//! dilated context stack on the deepest stage and fuses it straight into
//! the shallowest one.

use crate::block::{ddsm_backward, ddsm_forward_ctx, DdsmContext, DdsmParams};
use crate::error::{DdsmError, Result};
use crate::nn::{self, Conv3x3, LinearMap};
use crate::params::{
    add_conv3x3_grads, add_linear_grads, impl_params, merge_prefixed, GradMap, ParamSet,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Encoder widths for stages producing x_2..x_5.
pub const STAGE_WIDTHS: [usize; 4] = [16, 32, 64, 64];
/// Every junction output (and the head input) uses this width. It must be
/// a perfect square so the channel branch can lattice its channels.
pub const FUSED_WIDTH: usize = 16;
/// Channel-branch pooling size before per-junction clamping.
pub const DEFAULT_POOL: usize = 16;
/// Combined downsampling of the four pooling stages.
pub const DEEPEST_STRIDE: usize = 16;

/// Which fusion runs at each junction and how many samples it draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PyramidPreset {
    /// Dual-sampling at all three junctions, 5x5 spatial grid.
    Best,
    /// Dual-sampling only at the two shallowest junctions, 3x3 grid.
    Ablation,
    /// Plain bilinear-add everywhere.
    Baseline,
}

impl PyramidPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "best" => Ok(Self::Best),
            "ablation" => Ok(Self::Ablation),
            "baseline" => Ok(Self::Baseline),
            other => Err(DdsmError::Config(format!(
                "unknown preset {other:?} (expected best, ablation or baseline)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Best => "best",
            Self::Ablation => "ablation",
            Self::Baseline => "baseline",
        }
    }

    /// Per junction (producing x~4, x~3, x~2): dual-sampling or not.
    fn dual_sampling(self) -> [bool; 3] {
        match self {
            Self::Best => [true, true, true],
            Self::Ablation => [false, true, true],
            Self::Baseline => [false, false, false],
        }
    }

    /// Spatial grid size (k x k samples).
    pub fn k(self) -> usize {
        match self {
            Self::Best => 5,
            _ => 3,
        }
    }

    /// Channel grid size.
    pub fn k_c(self) -> usize {
        3
    }
}

/// Lateral 1x1 reductions plus upsample-add: the fusion every feature
/// pyramid uses when nothing fancier is wired in.
#[derive(Debug, Clone)]
pub struct BilinearAddParams {
    pub reduce_l: LinearMap,
    pub reduce_h: LinearMap,
}

impl_params!(
    BilinearAddParams,
    ("reduce_l.weight", reduce_l.weight),
    ("reduce_l.bias", reduce_l.bias),
    ("reduce_h.weight", reduce_h.weight),
    ("reduce_h.bias", reduce_h.bias),
);

pub fn bilinear_add_forward(
    x_l: &Tensor,
    x_h: &Tensor,
    params: &BilinearAddParams,
) -> Result<Tensor> {
    let lo = nn::conv1x1(x_l, &params.reduce_l)?;
    let hi = nn::conv1x1(x_h, &params.reduce_h)?;
    let mut out = lo;
    out.accumulate(&nn::bilinear_resize(&hi, x_l.shape()[1], x_l.shape()[2])?)?;
    Ok(out)
}

fn bilinear_add_backward(
    upstream: &Tensor,
    x_l: &Tensor,
    x_h: &Tensor,
    params: &BilinearAddParams,
) -> Result<(GradMap, Tensor, Tensor)> {
    let mut grads = GradMap::new();
    let (grad_x_l, g_l) = nn::conv1x1_backward(upstream, x_l, &params.reduce_l)?;
    add_linear_grads(&mut grads, "reduce_l", g_l);
    let g_hi = nn::bilinear_resize_backward(upstream, x_h.shape()[1], x_h.shape()[2])?;
    let (grad_x_h, g_h) = nn::conv1x1_backward(&g_hi, x_h, &params.reduce_h)?;
    add_linear_grads(&mut grads, "reduce_h", g_h);
    Ok((grads, grad_x_l, grad_x_h))
}

#[derive(Debug, Clone)]
pub enum Junction {
    DualSampling(DdsmParams),
    BilinearAdd(BilinearAddParams),
}

#[derive(Debug, Clone)]
pub enum JunctionContext {
    DualSampling(Box<DdsmContext>),
    BilinearAdd { x_l: Tensor, x_h: Tensor },
}

impl Junction {
    fn forward(&self, x_l: &Tensor, x_h: &Tensor) -> Result<(Tensor, JunctionContext)> {
        match self {
            Self::DualSampling(p) => {
                let (out, ctx) = ddsm_forward_ctx(x_l, x_h, p)?;
                Ok((out, JunctionContext::DualSampling(Box::new(ctx))))
            }
            Self::BilinearAdd(p) => {
                let out = bilinear_add_forward(x_l, x_h, p)?;
                Ok((
                    out,
                    JunctionContext::BilinearAdd {
                        x_l: x_l.clone(),
                        x_h: x_h.clone(),
                    },
                ))
            }
        }
    }

    fn backward(
        &self,
        upstream: &Tensor,
        ctx: &JunctionContext,
    ) -> Result<(GradMap, Tensor, Tensor)> {
        match (self, ctx) {
            (Self::DualSampling(p), JunctionContext::DualSampling(c)) => {
                ddsm_backward(upstream, p, c)
            }
            (Self::BilinearAdd(p), JunctionContext::BilinearAdd { x_l, x_h }) => {
                bilinear_add_backward(upstream, x_l, x_h, p)
            }
            _ => Err(DdsmError::Shape(
                "junction kind does not match its saved context".into(),
            )),
        }
    }
}

impl ParamSet for Junction {
    fn names(&self) -> Vec<String> {
        match self {
            Self::DualSampling(p) => p.names(),
            Self::BilinearAdd(p) => p.names(),
        }
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        match self {
            Self::DualSampling(p) => p.get(name),
            Self::BilinearAdd(p) => p.get(name),
        }
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match self {
            Self::DualSampling(p) => p.get_mut(name),
            Self::BilinearAdd(p) => p.get_mut(name),
        }
    }
}

/// Four-stage encoder with top-down fusion and a 1x1 classifier head.
#[derive(Debug, Clone)]
pub struct ToyPyramid {
    /// Stages producing x_2..x_5, each [3x3 conv, relu, 2x mean pool].
    pub stages: Vec<Conv3x3>,
    /// Junctions producing x~4, x~3, x~2 in that order.
    pub junctions: Vec<Junction>,
    pub head: LinearMap,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub num_classes: usize,
    pub preset: PyramidPreset,
}

/// Per-junction geometry: (c_l, c_h, low extents, high extents).
fn junction_geometry(
    in_h: usize,
    in_w: usize,
) -> [(usize, usize, usize, usize, usize, usize); 3] {
    [
        (
            STAGE_WIDTHS[2],
            STAGE_WIDTHS[3],
            in_h / 8,
            in_w / 8,
            in_h / 16,
            in_w / 16,
        ),
        (
            STAGE_WIDTHS[1],
            FUSED_WIDTH,
            in_h / 4,
            in_w / 4,
            in_h / 8,
            in_w / 8,
        ),
        (
            STAGE_WIDTHS[0],
            FUSED_WIDTH,
            in_h / 2,
            in_w / 2,
            in_h / 4,
            in_w / 4,
        ),
    ]
}

fn check_extents(in_h: usize, in_w: usize) -> Result<()> {
    if in_h == 0 || in_w == 0 || in_h % DEEPEST_STRIDE != 0 || in_w % DEEPEST_STRIDE != 0 {
        return Err(DdsmError::Config(format!(
            "input extents {in_h}x{in_w} must be positive multiples of {DEEPEST_STRIDE}"
        )));
    }
    Ok(())
}

/// Pooling sizes for a dual-sampling junction, clamped so they never
/// exceed the feature extents at that depth.
fn junction_pool_sizes(lh: usize, lw: usize, hh: usize, hw: usize) -> (usize, usize) {
    let a = DEFAULT_POOL.min(lh).min(lw).min(hh).min(hw);
    let d = DEFAULT_POOL.min(hh).min(hw);
    (a, d)
}

impl ToyPyramid {
    pub fn init(
        rng: &mut Rng,
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        num_classes: usize,
        preset: PyramidPreset,
    ) -> Result<Self> {
        check_extents(in_h, in_w)?;
        if in_channels == 0 || num_classes == 0 {
            return Err(DdsmError::Config(
                "channel and class counts must be positive".into(),
            ));
        }
        let mut stages = Vec::new();
        let mut prev = in_channels;
        for &width in &STAGE_WIDTHS {
            stages.push(Conv3x3::init(rng, width, prev, 1));
            prev = width;
        }
        let dual = preset.dual_sampling();
        let mut junctions = Vec::new();
        for (i, (c_l, c_h, lh, lw, hh, hw)) in junction_geometry(in_h, in_w).into_iter().enumerate()
        {
            junctions.push(if dual[i] {
                let (a, d) = junction_pool_sizes(lh, lw, hh, hw);
                Junction::DualSampling(DdsmParams::init(
                    rng,
                    c_l,
                    c_h,
                    FUSED_WIDTH,
                    lh,
                    lw,
                    preset.k(),
                    preset.k_c(),
                    a,
                    d,
                )?)
            } else {
                Junction::BilinearAdd(BilinearAddParams {
                    reduce_l: LinearMap::init(rng, FUSED_WIDTH, c_l),
                    reduce_h: LinearMap::init(rng, FUSED_WIDTH, c_h),
                })
            });
        }
        Ok(Self {
            stages,
            junctions,
            head: LinearMap::init(rng, num_classes, FUSED_WIDTH),
            in_channels,
            in_h,
            in_w,
            num_classes,
            preset,
        })
    }

    /// Shift every offset-predictor bias to a small fractional value so no
    /// sampling coordinate sits exactly on the integer lattice. Central
    /// finite differences are ill-posed at the lattice points (the sampling
    /// weight function has one-sided derivatives there), so gradient
    /// probes call this first; training itself never needs it.
    pub fn nudge_sampling_off_lattice(&mut self, rng: &mut Rng) {
        for junction in &mut self.junctions {
            if let Junction::DualSampling(p) = junction {
                for b in p.spatial.sampler.offset_predictor.bias.data_mut() {
                    *b = rng.uniform(0.1, 0.4) * if rng.next_u64() % 2 == 0 { 1.0 } else { -1.0 };
                }
                for b in p.channel.sampler.offset_predictor.bias.data_mut() {
                    *b = rng.uniform(0.1, 0.4) * if rng.next_u64() % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
    }

    /// Zero the spatial position embeddings of every dual-sampling
    /// junction; they are the only position-dependent parameters, so this
    /// restores exact translation invariance on constant fields.
    pub fn zero_position_embeddings(&mut self) {
        for junction in &mut self.junctions {
            if let Junction::DualSampling(p) = junction {
                p.spatial.e_pl = Tensor::zeros(p.spatial.e_pl.shape()).expect("same shape");
                p.spatial.e_ph = Tensor::zeros(p.spatial.e_ph.shape()).expect("same shape");
            }
        }
    }
}

fn junction_prefix(i: usize) -> String {
    format!("fuse{}", 4 - i)
}

impl ParamSet for ToyPyramid {
    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, _) in self.stages.iter().enumerate() {
            out.push(format!("stage{}.weight", i + 2));
            out.push(format!("stage{}.bias", i + 2));
        }
        for (i, j) in self.junctions.iter().enumerate() {
            let prefix = junction_prefix(i);
            out.extend(j.names().into_iter().map(|n| format!("{prefix}.{n}")));
        }
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        if let Some(rest) = name.strip_prefix("stage") {
            let (num, field) = rest.split_once('.')?;
            let s: usize = num.parse().ok()?;
            let conv = self.stages.get(s.checked_sub(2)?)?;
            return match field {
                "weight" => Some(&conv.weight),
                "bias" => Some(&conv.bias),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix("head.") {
            return match rest {
                "weight" => Some(&self.head.weight),
                "bias" => Some(&self.head.bias),
                _ => None,
            };
        }
        for (i, j) in self.junctions.iter().enumerate() {
            let prefix = junction_prefix(i);
            if let Some(rest) = name.strip_prefix(&format!("{prefix}.")) {
                return j.get(rest);
            }
        }
        None
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("stage") {
            let (num, field) = rest.split_once('.')?;
            let s: usize = num.parse().ok()?;
            let conv = self.stages.get_mut(s.checked_sub(2)?)?;
            return match field {
                "weight" => Some(&mut conv.weight),
                "bias" => Some(&mut conv.bias),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix("head.") {
            return match rest {
                "weight" => Some(&mut self.head.weight),
                "bias" => Some(&mut self.head.bias),
                _ => None,
            };
        }
        for i in 0..self.junctions.len() {
            let prefix = junction_prefix(i);
            if name.starts_with(&format!("{prefix}.")) {
                let rest = name[prefix.len() + 1..].to_string();
                return self.junctions[i].get_mut(&rest);
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct StageContext {
    pub input: Tensor,
    pub pre: Tensor,
}

pub fn stage_forward(input: &Tensor, conv: &Conv3x3) -> Result<(Tensor, StageContext)> {
    let pre = nn::conv3x3(input, conv)?;
    let act = nn::relu(&pre);
    let out = nn::avg_pool2x2(&act)?;
    Ok((
        out,
        StageContext {
            input: input.clone(),
            pre,
        },
    ))
}

pub fn stage_backward(
    upstream: &Tensor,
    conv: &Conv3x3,
    ctx: &StageContext,
) -> Result<(Tensor, nn::Conv3x3Grads)> {
    let g_act = nn::avg_pool2x2_backward(upstream)?;
    let g_pre = nn::relu_backward(&g_act, &ctx.pre)?;
    nn::conv3x3_backward(&g_pre, &ctx.input, conv)
}

#[derive(Debug, Clone)]
pub struct PyramidContext {
    pub stage_ctxs: Vec<StageContext>,
    /// x_2..x_5.
    pub features: Vec<Tensor>,
    pub junction_ctxs: Vec<JunctionContext>,
    /// x~4, x~3, x~2.
    pub fused: Vec<Tensor>,
    pub scores_small: Tensor,
}

pub fn pyramid_forward(net: &ToyPyramid, input: &Tensor) -> Result<Tensor> {
    Ok(pyramid_forward_ctx(net, input)?.0)
}

pub fn pyramid_forward_ctx(net: &ToyPyramid, input: &Tensor) -> Result<(Tensor, PyramidContext)> {
    if input.shape() != [net.in_channels, net.in_h, net.in_w] {
        return Err(DdsmError::Shape(format!(
            "network was built for ({},{},{}) inputs, got {:?}",
            net.in_channels,
            net.in_h,
            net.in_w,
            input.shape()
        )));
    }
    let mut stage_ctxs = Vec::new();
    let mut features = Vec::new();
    let mut cur = input.clone();
    for conv in &net.stages {
        let (out, ctx) = stage_forward(&cur, conv)?;
        stage_ctxs.push(ctx);
        features.push(out.clone());
        cur = out;
    }
    let mut junction_ctxs = Vec::new();
    let mut fused = Vec::new();
    let mut top = features[3].clone(); // x~5 = x_5
    for (i, junction) in net.junctions.iter().enumerate() {
        let low = &features[2 - i]; // x_4, x_3, x_2
        let (out, ctx) = junction.forward(low, &top)?;
        junction_ctxs.push(ctx);
        fused.push(out.clone());
        top = out;
    }
    let scores_small = nn::conv1x1(&top, &net.head)?;
    let scores = nn::bilinear_resize(&scores_small, net.in_h, net.in_w)?;
    Ok((
        scores,
        PyramidContext {
            stage_ctxs,
            features,
            junction_ctxs,
            fused,
            scores_small,
        },
    ))
}

/// Adjoint of [`pyramid_forward_ctx`]: gradients for every named parameter
/// plus the input-image gradient.
pub fn pyramid_backward(
    upstream: &Tensor,
    net: &ToyPyramid,
    ctx: &PyramidContext,
) -> Result<(GradMap, Tensor)> {
    let mut grads = GradMap::new();
    let (h2, w2) = (net.in_h / 2, net.in_w / 2);
    let g_small = nn::bilinear_resize_backward(upstream, h2, w2)?;
    let (g_top, g_head) = nn::conv1x1_backward(&g_small, &ctx.fused[2], &net.head)?;
    add_linear_grads(&mut grads, "head", g_head);

    // Walk the junctions back: x~2 -> x~3 -> x~4 -> x_5, collecting the
    // lateral gradients into the matching encoder stages.
    let mut g_low = vec![None; 4]; // for x_2..x_5
    let mut g_up = g_top;
    for i in (0..net.junctions.len()).rev() {
        let (j_grads, g_l, g_h) = net.junctions[i].backward(&g_up, &ctx.junction_ctxs[i])?;
        merge_prefixed(&mut grads, &junction_prefix(i), j_grads);
        g_low[2 - i] = Some(g_l);
        g_up = g_h;
    }
    g_low[3] = Some(g_up); // x_5 feeds only the deepest junction

    // Encoder backward, deepest stage first; shallower stages accumulate
    // both the lateral gradient and the one flowing down the stage chain.
    let mut g_stage_out = g_low[3].take().expect("set above");
    let mut g_input = None;
    for i in (0..4).rev() {
        let (g_in, g_conv) = stage_backward(&g_stage_out, &net.stages[i], &ctx.stage_ctxs[i])?;
        add_conv3x3_grads(&mut grads, &format!("stage{}", i + 2), g_conv);
        if i == 0 {
            g_input = Some(g_in);
        } else {
            let mut g = g_low[i - 1].take().expect("every stage feeds a junction");
            g.accumulate(&g_in)?;
            g_stage_out = g;
        }
    }
    Ok((grads, g_input.expect("four stages walked")))
}

/// Single-insertion variant: a dilated context stack on x_5 stands in for
/// a heavier context head, and ONE dual-sampling block fuses it with x_2.
#[derive(Debug, Clone)]
pub struct AsppStyleNet {
    pub stages: Vec<Conv3x3>,
    /// Dilated 3x3 stack applied to x_5 (dilations 1 and 2).
    pub context: Vec<Conv3x3>,
    pub junction: DdsmParams,
    pub head: LinearMap,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub num_classes: usize,
}

impl AsppStyleNet {
    pub fn init(
        rng: &mut Rng,
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        num_classes: usize,
        k: usize,
        k_c: usize,
    ) -> Result<Self> {
        check_extents(in_h, in_w)?;
        if in_channels == 0 || num_classes == 0 {
            return Err(DdsmError::Config(
                "channel and class counts must be positive".into(),
            ));
        }
        let mut stages = Vec::new();
        let mut prev = in_channels;
        for &width in &STAGE_WIDTHS {
            stages.push(Conv3x3::init(rng, width, prev, 1));
            prev = width;
        }
        let deep = STAGE_WIDTHS[3];
        let context = vec![
            Conv3x3::init(rng, deep, deep, 1),
            Conv3x3::init(rng, deep, deep, 2),
        ];
        let (lh, lw) = (in_h / 2, in_w / 2);
        let (hh, hw) = (in_h / 16, in_w / 16);
        let (a, d) = junction_pool_sizes(lh, lw, hh, hw);
        let junction = DdsmParams::init(
            rng,
            STAGE_WIDTHS[0],
            deep,
            FUSED_WIDTH,
            lh,
            lw,
            k,
            k_c,
            a,
            d,
        )?;
        Ok(Self {
            stages,
            context,
            junction,
            head: LinearMap::init(rng, num_classes, FUSED_WIDTH),
            in_channels,
            in_h,
            in_w,
            num_classes,
        })
    }

    /// See [`ToyPyramid::zero_position_embeddings`].
    pub fn zero_position_embeddings(&mut self) {
        self.junction.spatial.e_pl =
            Tensor::zeros(self.junction.spatial.e_pl.shape()).expect("same shape");
        self.junction.spatial.e_ph =
            Tensor::zeros(self.junction.spatial.e_ph.shape()).expect("same shape");
    }
}

impl ParamSet for AsppStyleNet {
    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, _) in self.stages.iter().enumerate() {
            out.push(format!("stage{}.weight", i + 2));
            out.push(format!("stage{}.bias", i + 2));
        }
        for (i, _) in self.context.iter().enumerate() {
            out.push(format!("context{}.weight", i + 1));
            out.push(format!("context{}.bias", i + 1));
        }
        out.extend(self.junction.names().into_iter().map(|n| format!("fuse2.{n}")));
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        if let Some(rest) = name.strip_prefix("stage") {
            let (num, field) = rest.split_once('.')?;
            let conv = self.stages.get(num.parse::<usize>().ok()?.checked_sub(2)?)?;
            return match field {
                "weight" => Some(&conv.weight),
                "bias" => Some(&conv.bias),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix("context") {
            let (num, field) = rest.split_once('.')?;
            let conv = self.context.get(num.parse::<usize>().ok()?.checked_sub(1)?)?;
            return match field {
                "weight" => Some(&conv.weight),
                "bias" => Some(&conv.bias),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix("fuse2.") {
            return self.junction.get(rest);
        }
        if let Some(rest) = name.strip_prefix("head.") {
            return match rest {
                "weight" => Some(&self.head.weight),
                "bias" => Some(&self.head.bias),
                _ => None,
            };
        }
        None
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("stage") {
            let (num, field) = rest.split_once('.')?;
            let conv = self
                .stages
                .get_mut(num.parse::<usize>().ok()?.checked_sub(2)?)?;
            return match field {
                "weight" => Some(&mut conv.weight),
                "bias" => Some(&mut conv.bias),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix("context") {
            let (num, field) = rest.split_once('.')?;
            let conv = self
                .context
                .get_mut(num.parse::<usize>().ok()?.checked_sub(1)?)?;
            return match field {
                "weight" => Some(&mut conv.weight),
                "bias" => Some(&mut conv.bias),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix("fuse2.") {
            return self.junction.get_mut(rest);
        }
        if let Some(rest) = name.strip_prefix("head.") {
            return match rest {
                "weight" => Some(&mut self.head.weight),
                "bias" => Some(&mut self.head.bias),
                _ => None,
            };
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct AsppContext {
    pub stage_ctxs: Vec<StageContext>,
    pub features: Vec<Tensor>,
    /// Pre-activations of the context stack.
    pub context_pres: Vec<Tensor>,
    /// Inputs to each context conv.
    pub context_inputs: Vec<Tensor>,
    pub junction_ctx: DdsmContext,
    pub fused: Tensor,
    pub scores_small: Tensor,
}

pub fn aspp_style_forward(net: &AsppStyleNet, input: &Tensor) -> Result<Tensor> {
    Ok(aspp_style_forward_ctx(net, input)?.0)
}

pub fn aspp_style_forward_ctx(
    net: &AsppStyleNet,
    input: &Tensor,
) -> Result<(Tensor, AsppContext)> {
    if input.shape() != [net.in_channels, net.in_h, net.in_w] {
        return Err(DdsmError::Shape(format!(
            "network was built for ({},{},{}) inputs, got {:?}",
            net.in_channels,
            net.in_h,
            net.in_w,
            input.shape()
        )));
    }
    let mut stage_ctxs = Vec::new();
    let mut features = Vec::new();
    let mut cur = input.clone();
    for conv in &net.stages {
        let (out, ctx) = stage_forward(&cur, conv)?;
        stage_ctxs.push(ctx);
        features.push(out.clone());
        cur = out;
    }
    let mut context_pres = Vec::new();
    let mut context_inputs = Vec::new();
    let mut high = features[3].clone();
    for conv in &net.context {
        context_inputs.push(high.clone());
        let pre = nn::conv3x3(&high, conv)?;
        high = nn::relu(&pre);
        context_pres.push(pre);
    }
    let (fused, junction_ctx) = ddsm_forward_ctx(&features[0], &high, &net.junction)?;
    let scores_small = nn::conv1x1(&fused, &net.head)?;
    let scores = nn::bilinear_resize(&scores_small, net.in_h, net.in_w)?;
    Ok((
        scores,
        AsppContext {
            stage_ctxs,
            features,
            context_pres,
            context_inputs,
            junction_ctx,
            fused,
            scores_small,
        },
    ))
}

pub fn aspp_style_backward(
    upstream: &Tensor,
    net: &AsppStyleNet,
    ctx: &AsppContext,
) -> Result<(GradMap, Tensor)> {
    let mut grads = GradMap::new();
    let (h2, w2) = (net.in_h / 2, net.in_w / 2);
    let g_small = nn::bilinear_resize_backward(upstream, h2, w2)?;
    let (g_fused, g_head) = nn::conv1x1_backward(&g_small, &ctx.fused, &net.head)?;
    add_linear_grads(&mut grads, "head", g_head);

    let (j_grads, g_x2_j, mut g_high) = ddsm_backward(&g_fused, &net.junction, &ctx.junction_ctx)?;
    merge_prefixed(&mut grads, "fuse2", j_grads);

    for i in (0..net.context.len()).rev() {
        let g_pre = nn::relu_backward(&g_high, &ctx.context_pres[i])?;
        let (g_in, g_conv) = nn::conv3x3_backward(&g_pre, &ctx.context_inputs[i], &net.context[i])?;
        add_conv3x3_grads(&mut grads, &format!("context{}", i + 1), g_conv);
        g_high = g_in;
    }

    // Encoder: x_5 feeds the context stack; x_2 also feeds the junction.
    let mut g_stage_out = g_high;
    let mut g_input = None;
    for i in (0..4).rev() {
        let (g_in, g_conv) = stage_backward(&g_stage_out, &net.stages[i], &ctx.stage_ctxs[i])?;
        add_conv3x3_grads(&mut grads, &format!("stage{}", i + 2), g_conv);
        if i == 0 {
            g_input = Some(g_in);
        } else if i == 1 {
            let mut g = g_x2_j.clone();
            g.accumulate(&g_in)?;
            g_stage_out = g;
        } else {
            g_stage_out = g_in;
        }
    }
    Ok((grads, g_input.expect("four stages walked")))
}
