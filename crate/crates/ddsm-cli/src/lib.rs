//! Command implementations behind the `ddsm` binary.
//!
//! Every command is deterministic in its configuration: the seed drives
//! all randomness, outputs land under the configured directory, and the
//! binary maps results to exit codes — 0 when checks pass, 1 when a check
//! fails, 2 for usage or configuration errors.

use std::fs;
use std::path::Path;

use ddsm::block::{ddsm_backward, ddsm_forward, ddsm_forward_ctx, DdsmParams};
use ddsm::channel::channel_branch_forward;
use ddsm::cost::{affinity_ratio, count_ddsm, count_dense_nonlocal, verify_against_instrumented, CostConfig};
use ddsm::error::{DdsmError, Result};
use ddsm::fscore::boundary_eval;
use ddsm::io::{self, RunConfig};
use ddsm::oracle;
use ddsm::params::{check_grads_cover, restore, snapshot, ParamSet};
use ddsm::pyramid::{PyramidPreset, ToyPyramid};
use ddsm::rng::Rng;
use ddsm::sampler::{sample_backward, sample_forward, GridSpec, SampleContext};
use ddsm::spatial::{spatial_attention, spatial_core_forward};
use ddsm::task::SyntheticTask;
use ddsm::tensor::Tensor;
use ddsm::train::{evaluate, rows_to_csv, train_toy, TrainConfig};

/// Relative-error bound every gradient group must meet.
pub const GRAD_TOL: f64 = 1e-6;
/// Base absolute floor shielding near-zero derivatives from
/// finite-difference noise.
pub const GRAD_ABS_FLOOR: f64 = 1e-9;

/// Absolute error below which a finite-difference disagreement is noise
/// rather than signal. Central differences divide the roundoff of two
/// loss evaluations by 2*FD_STEP, and that roundoff scales with the
/// magnitudes flowing through the reduction (not with the possibly
/// cancelled final value), so the floor scales with the probe sum's L1
/// mass; the constant leaves headroom for the layers feeding it.
fn noise_floor(out: &Tensor) -> f64 {
    let l1: f64 = out
        .data()
        .iter()
        .zip(oracle::probe_weights(out.len()))
        .map(|(a, b)| (a * b).abs())
        .sum();
    GRAD_ABS_FLOOR + l1 * f64::EPSILON / (2.0 * oracle::FD_STEP) * 8.0
}
/// Bound for enumeration/dense equivalence checks.
pub const EQUIV_TOL: f64 = 1e-10;
/// Coordinates probed per large tensor during `gradcheck`.
const FD_SAMPLE_COORDS: usize = 8;
/// Tensors up to this size are finite-differenced exhaustively.
const FD_FULL_LIMIT: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail(String),
}

impl Outcome {
    pub fn passed(&self) -> bool {
        matches!(self, Outcome::Pass)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn within_grad_tol(analytic: f64, fd: f64, floor: f64) -> bool {
    rel_err(analytic, fd) <= GRAD_TOL || (analytic - fd).abs() <= floor
}

struct CheckRow {
    group: String,
    coords: usize,
    max_analytic: f64,
    max_abs: f64,
    max_rel: f64,
    pass: bool,
}

fn rows_to_report(rows: &[CheckRow]) -> (Outcome, String) {
    let mut csv = String::from("group,coords,max_analytic,max_abs_diff,max_rel_err,status\n");
    let mut first_fail = None;
    for r in rows {
        csv.push_str(&format!(
            "{},{},{:.3e},{:.3e},{:.3e},{}\n",
            r.group,
            r.coords,
            r.max_analytic,
            r.max_abs,
            r.max_rel,
            if r.pass { "pass" } else { "FAIL" }
        ));
        if !r.pass && first_fail.is_none() {
            first_fail = Some(r.group.clone());
        }
    }
    let outcome = match first_fail {
        None => Outcome::Pass,
        Some(g) => Outcome::Fail(format!("gradient check failed for group {g}")),
    };
    (outcome, csv)
}

/// Compares one analytic tensor against its finite-difference counterpart
/// element by element.
fn tensor_row(group: &str, analytic: &Tensor, fd: &Tensor, floor: f64) -> CheckRow {
    let mut max_analytic: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut pass = true;
    for (&a, &n) in analytic.data().iter().zip(fd.data()) {
        max_analytic = max_analytic.max(a.abs());
        max_abs = max_abs.max((a - n).abs());
        max_rel = max_rel.max(rel_err(a, n));
        pass &= within_grad_tol(a, n, floor);
    }
    CheckRow {
        group: group.to_string(),
        coords: analytic.len(),
        max_analytic,
        max_abs,
        max_rel,
        pass,
    }
}

/// Raw sampling-kernel check: bilinear gather adjoints for the input, the
/// offset field and the modulation field against central differences.
fn sampler_rows(cfg: &RunConfig) -> Result<Vec<CheckRow>> {
    let grid = GridSpec::new(cfg.k)?;
    let n = grid.n();
    let (c, h, w) = (2usize, 4usize, 4usize);
    let mut rng = Rng::new(cfg.seed ^ 0x5a4d_17e3);
    let input = Tensor::uniform(&[c, h, w], &mut rng, -1.0, 1.0)?;
    // Fractional offsets keep every coordinate away from the bilinear
    // kinks where one-sided derivatives would poison the comparison.
    let offsets = Tensor::from_fn(&[2 * n, h, w], |_| {
        let v = rng.uniform(0.1, 0.4);
        if rng.next_u64() % 2 == 0 {
            v
        } else {
            -v
        }
    })?;
    let mods = Tensor::uniform(&[n, h, w], &mut rng, 0.05, 0.95)?;
    let out = sample_forward(&input, &offsets, &mods, grid)?;
    let upstream = Tensor::new(out.shape().to_vec(), oracle::probe_weights(out.len()))?;
    let ctx = SampleContext {
        input: input.clone(),
        offsets: offsets.clone(),
        mods: mods.clone(),
        grid,
    };
    let (g_input, g_offsets, g_mods) = sample_backward(&upstream, &ctx)?;
    let floor = noise_floor(&out);
    let fd_input = oracle::finite_diff_grad(&input, |t| {
        Ok(oracle::probe_loss(&sample_forward(t, &offsets, &mods, grid)?))
    })?;
    let fd_offsets = oracle::finite_diff_grad(&offsets, |t| {
        Ok(oracle::probe_loss(&sample_forward(&input, t, &mods, grid)?))
    })?;
    let fd_mods = oracle::finite_diff_grad(&mods, |t| {
        Ok(oracle::probe_loss(&sample_forward(&input, &offsets, t, grid)?))
    })?;
    Ok(vec![
        tensor_row("sampler.input", &g_input, &fd_input, floor),
        tensor_row("sampler.offsets", &g_offsets, &fd_offsets, floor),
        tensor_row("sampler.modulations", &g_mods, &fd_mods, floor),
    ])
}

/// Deterministic coordinate selection: every index for small tensors,
/// otherwise a stride sample plus the largest-magnitude entry.
fn fd_coords(analytic: &Tensor) -> Vec<usize> {
    let len = analytic.len();
    if len <= FD_FULL_LIMIT {
        return (0..len).collect();
    }
    let mut coords: Vec<usize> = (0..FD_SAMPLE_COORDS)
        .map(|i| i * len / FD_SAMPLE_COORDS)
        .collect();
    let argmax = analytic
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    coords.push(argmax);
    coords.sort_unstable();
    coords.dedup();
    coords
}

/// Full-block gradient check: every named parameter of both branches and
/// the shared reducers against finite differences of a probe loss.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<(Outcome, String)> {
    let mut rng = Rng::new(cfg.seed);
    let params = DdsmParams::init_probe(
        &mut rng.fork(),
        cfg.c,
        cfg.c,
        cfg.c_r,
        cfg.h,
        cfg.w,
        cfg.k,
        cfg.k_c,
        cfg.a,
        cfg.d,
    )?;
    let x_l = Tensor::uniform(&[cfg.c, cfg.h, cfg.w], &mut rng, -1.0, 1.0)?;
    let x_h = Tensor::uniform(&[cfg.c, cfg.hh, cfg.wh], &mut rng, -1.0, 1.0)?;
    let (out, ctx) = ddsm_forward_ctx(&x_l, &x_h, &params)?;
    let floor = noise_floor(&out);
    let upstream = Tensor::new(out.shape().to_vec(), oracle::probe_weights(out.len()))?;
    let (mut grads, _, _) = ddsm_backward(&upstream, &params, &ctx)?;
    check_grads_cover(&params, &grads)?;
    if let Some(name) = &cfg.corrupt {
        let g = grads.get_mut(name).ok_or_else(|| {
            DdsmError::Config(format!("corrupt target {name:?} is not a parameter"))
        })?;
        for v in g.data_mut() {
            *v = *v * 1.5 + 0.05;
        }
    }

    let mut rows = sampler_rows(cfg)?;
    for name in params.names() {
        let analytic = grads.get(&name).expect("coverage checked above");
        let coords = fd_coords(analytic);
        let max_analytic = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        let mut pass = true;
        for &idx in &coords {
            let fd = oracle::finite_diff_param_coord(&params, &name, idx, |p| {
                Ok(oracle::probe_loss(&ddsm_forward(&x_l, &x_h, p)?))
            })?;
            let a = analytic.data()[idx];
            max_abs = max_abs.max((a - fd).abs());
            max_rel = max_rel.max(rel_err(a, fd));
            pass &= within_grad_tol(a, fd, floor);
        }
        rows.push(CheckRow {
            group: name,
            coords: coords.len(),
            max_analytic,
            max_abs,
            max_rel,
            pass,
        });
    }
    Ok(rows_to_report(&rows))
}

/// Oracle equivalence sweep: full-coverage sampling against dense
/// attention, fast kernels against scalar enumeration, and closed-form
/// cost rows against instrumented loop counts.
pub fn cmd_equiv(cfg: &RunConfig) -> Result<(Outcome, String)> {
    let mut lines = String::from("check,max_err,status\n");
    let mut failed = None;
    let mut record = |name: &str, err: f64, tol: f64, failed: &mut Option<String>| {
        let ok = err <= tol;
        lines.push_str(&format!(
            "{name},{err:.3e},{}\n",
            if ok { "pass" } else { "FAIL" }
        ));
        if !ok && failed.is_none() {
            *failed = Some(name.to_string());
        }
    };

    // Full-coverage grid with unit gates and zero offsets reproduces
    // dense non-local attention exactly (up to roundoff).
    let mut rng = Rng::new(cfg.seed);
    let (h, w) = (4usize, 4usize);
    let mut dense_err: f64 = 0.0;
    for _ in 0..2 {
        let q = Tensor::uniform(&[2, h, w], &mut rng, -1.0, 1.0)?;
        let k = Tensor::uniform(&[2, h, w], &mut rng, -1.0, 1.0)?;
        let v = Tensor::uniform(&[2, h, w], &mut rng, -1.0, 1.0)?;
        let grid = GridSpec::covering(h, w);
        let offsets = Tensor::zeros(&[2 * grid.n(), h, w])?;
        let mods = Tensor::constant(&[grid.n(), h, w], 1.0)?;
        let sparse = spatial_attention(&q, &k, &v, &offsets, &mods, grid)?;
        let dense = oracle::dense_nonlocal(&q, &k, &v);
        dense_err = dense_err.max(sparse.max_abs_diff(&dense)?);
    }
    record("dense_full_coverage", dense_err, EQUIV_TOL, &mut failed);

    // Fast spatial attention against the scalar enumeration reference.
    let mut enum_err: f64 = 0.0;
    for k_side in [1usize, 3] {
        let grid = GridSpec::new(k_side)?;
        let n = grid.n();
        let q = Tensor::uniform(&[3, 4, 5], &mut rng, -1.0, 1.0)?;
        let key_src = Tensor::uniform(&[3, 4, 5], &mut rng, -1.0, 1.0)?;
        let val_src = Tensor::uniform(&[3, 4, 5], &mut rng, -1.0, 1.0)?;
        let offsets = Tensor::uniform(&[2 * n, 4, 5], &mut rng, -1.5, 1.5)?;
        let mods = Tensor::uniform(&[n, 4, 5], &mut rng, 0.05, 0.95)?;
        let fast = spatial_attention(&q, &key_src, &val_src, &offsets, &mods, grid)?;
        let slow = oracle::spatial_attention_reference(&q, &key_src, &val_src, &offsets, &mods, k_side);
        enum_err = enum_err.max(fast.max_abs_diff(&slow)?);
    }
    record("spatial_enumeration", enum_err, EQUIV_TOL, &mut failed);

    // Whole block against the sum of the residual and both branch
    // enumeration oracles.
    let mut block_err: f64 = 0.0;
    for seed in [cfg.seed, cfg.seed ^ 0xB10C] {
        let p = DdsmParams::init_probe(&mut Rng::new(seed), 3, 3, 4, 5, 5, 3, 3, 2, 2)?;
        let mut irng = Rng::new(seed ^ 0x1234);
        let x_l = Tensor::uniform(&[3, 5, 5], &mut irng, -1.0, 1.0)?;
        let x_h = Tensor::uniform(&[3, 3, 3], &mut irng, -1.0, 1.0)?;
        let (out, ctx) = ddsm_forward_ctx(&x_l, &x_h, &p)?;
        let s_ref = oracle::spatial_attention_reference(
            &ctx.spatial.q,
            &ctx.spatial.key_src,
            &ctx.spatial.val_src,
            &ctx.spatial.offsets,
            &ctx.spatial.mods,
            3,
        );
        let cc = &ctx.channel.core_ctx;
        let c_ref = oracle::channel_attention_reference(
            &cc.x_l_p,
            &cc.x_cat_p,
            &cc.x_h_d,
            5,
            5,
            &p.channel.w_alpha,
            &p.channel.w_beta,
            &p.channel.w_gamma,
            &p.channel.sampler.offset_predictor,
            &p.channel.sampler.modulation_predictor,
            3,
        );
        let mut expect = ctx.x_l_red.clone();
        expect.accumulate(&s_ref)?;
        expect.accumulate(&c_ref)?;
        block_err = block_err.max(out.max_abs_diff(&expect)?);
    }
    record("block_enumeration", block_err, EQUIV_TOL, &mut failed);

    // Closed-form MAC rows equal instrumented loop counts (integer
    // equality, reported as 0 or 1).
    let cost_cfg = CostConfig {
        c: cfg.c,
        c_r: cfg.c_r,
        h: cfg.h.min(8),
        w: cfg.w.min(8),
        n: cfg.k * cfg.k,
        n_c: cfg.k_c * cfg.k_c,
        a: cfg.a,
        d: cfg.d,
    };
    let cost_err = match verify_against_instrumented(cost_cfg) {
        Ok(()) => 0.0,
        Err(_) => 1.0,
    };
    record("cost_instrumented", cost_err, 0.5, &mut failed);

    let outcome = match failed {
        None => Outcome::Pass,
        Some(name) => Outcome::Fail(format!("equivalence check failed: {name}")),
    };
    Ok((outcome, lines))
}

/// Trains the preset network on the synthetic layered-polygon task and
/// writes the loss curve plus a checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<(Outcome, String)> {
    let preset = PyramidPreset::parse(&cfg.preset)?;
    let mut rng = Rng::new(cfg.seed);
    let net = ToyPyramid::init(&mut rng, 3, cfg.h, cfg.w, cfg.classes, preset)?;
    let task = SyntheticTask::new(cfg.classes, cfg.h, cfg.w, cfg.noise)?;
    let data = task.dataset(&mut rng, cfg.samples);
    let train_cfg = TrainConfig {
        steps: cfg.steps,
        base_lr: cfg.lr,
        ..TrainConfig::default()
    };
    match train_toy(net, &data, &train_cfg) {
        Ok((state, rows)) => {
            fs::create_dir_all(&cfg.out)?;
            fs::write(cfg.out.join("loss.csv"), rows_to_csv(&rows))?;
            io::save_checkpoint(&cfg.out.join("checkpoint"), &snapshot(&state.net))?;
            let (loss, acc) = evaluate(&state.net, &data)?;
            let summary = format!(
                "preset={} steps={} final_loss={loss:.6} final_accuracy={acc:.6}",
                preset.name(),
                cfg.steps
            );
            Ok((Outcome::Pass, summary))
        }
        Err(DdsmError::Diverged { step }) => Ok((
            Outcome::Fail(format!("training diverged at step {step}")),
            String::new(),
        )),
        Err(e) => Err(e),
    }
}

/// Analytic cost tables for the block and the dense baseline, plus the
/// exact sampled-over-dense affinity ratio.
pub fn cmd_cost(cfg: &RunConfig) -> Result<String> {
    let cost_cfg = CostConfig {
        c: cfg.c,
        c_r: cfg.c_r,
        h: cfg.h,
        w: cfg.w,
        n: cfg.k * cfg.k,
        n_c: cfg.k_c * cfg.k_c,
        a: cfg.a,
        d: cfg.d,
    };
    let block = count_ddsm(cost_cfg)?;
    let dense = count_dense_nonlocal(cost_cfg)?;
    let (num, den) = affinity_ratio(cost_cfg)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("cost_block.csv"), block.to_csv())?;
    fs::write(cfg.out.join("cost_dense.csv"), dense.to_csv())?;
    let mut out = String::new();
    out.push_str("# block\n");
    out.push_str(&block.to_csv());
    out.push_str("# dense baseline\n");
    out.push_str(&dense.to_csv());
    out.push_str(&format!("affinity_ratio,{num}/{den}\n"));
    Ok(out)
}

/// Boundary precision/recall/F between two graymap label masks.
pub fn cmd_fscore(cfg: &RunConfig, pred_path: &Path, gt_path: &Path) -> Result<String> {
    let pred = io::pgm_to_label_map(&io::parse_pgm(&fs::read(pred_path)?)?)?;
    let gt = io::pgm_to_label_map(&io::parse_pgm(&fs::read(gt_path)?)?)?;
    let result = boundary_eval(&pred, &gt, &cfg.thresholds)?;
    let csv = result.to_csv();
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("fscore.csv"), &csv)?;
    Ok(csv)
}

fn channel_mean(t: &Tensor) -> Vec<f64> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for i in 0..h * w {
            out[i] += t.data()[ch * h * w + i] / c as f64;
        }
    }
    out
}

fn load_input(path: Option<&Path>, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    match path {
        None => Tensor::uniform(shape, rng, -1.0, 1.0),
        Some(p) => {
            let t = io::load_tensor(p)?;
            if t.shape() != shape {
                return Err(DdsmError::Config(format!(
                    "input tensor {} has shape {:?}, the config wants {shape:?}",
                    p.display(),
                    t.shape()
                )));
            }
            Ok(t)
        }
    }
}

/// Renders the block's inputs and branch outputs as graymaps plus a
/// pixmap overlay marking where the query pixel actually sampled.
pub fn cmd_dump(cfg: &RunConfig, x_l_path: Option<&Path>, x_h_path: Option<&Path>) -> Result<String> {
    let mut rng = Rng::new(cfg.seed);
    let mut params = DdsmParams::init(
        &mut rng.fork(),
        cfg.c,
        cfg.c,
        cfg.c_r,
        cfg.h,
        cfg.w,
        cfg.k,
        cfg.k_c,
        cfg.a,
        cfg.d,
    )?;
    if let Some(dir) = &cfg.checkpoint {
        let mut named = io::load_checkpoint(dir)?;
        if let Some(prefix) = &cfg.prefix {
            let want = format!("{}.", prefix.trim_end_matches('.'));
            named = named
                .into_iter()
                .filter_map(|(k, v)| k.strip_prefix(&want).map(|rest| (rest.to_string(), v)))
                .collect();
            if named.is_empty() {
                return Err(DdsmError::Config(format!(
                    "checkpoint has no tensors under prefix {prefix:?}"
                )));
            }
        }
        restore(&mut params, &named)?;
    }
    let x_l = load_input(x_l_path, &[cfg.c, cfg.h, cfg.w], &mut rng)?;
    let x_h = load_input(x_h_path, &[cfg.c, cfg.hh, cfg.wh], &mut rng)?;
    let (_, ctx) = ddsm_forward_ctx(&x_l, &x_h, &params)?;
    let (s_out, _) = spatial_core_forward(&ctx.x_l_red, &ctx.x_h_red, &params.spatial)?;
    let (c_out, _) = channel_branch_forward(&ctx.x_l_red, &ctx.x_h_red, &params.channel)?;
    let mut branch_sum = s_out.clone();
    branch_sum.accumulate(&c_out)?;

    fs::create_dir_all(&cfg.out)?;
    let panels: [(&str, &Tensor); 4] = [
        ("input_low.pgm", &x_l),
        ("input_high.pgm", &x_h),
        ("spatial_out.pgm", &s_out),
        ("branch_sum.pgm", &branch_sum),
    ];
    for (file, tensor) in panels {
        let (h, w) = (tensor.shape()[1], tensor.shape()[2]);
        let gray = io::gray_pgm_from_field(h, w, &channel_mean(tensor))?;
        fs::write(cfg.out.join(file), io::render_pgm_p2(&gray))?;
    }

    // Sampled-coordinate readback for the query pixel: the marker at
    // sample n sits at (query + grid_n + predicted offset_n).
    let qy = cfg.query_y.unwrap_or(cfg.h / 2);
    let qx = cfg.query_x.unwrap_or(cfg.w / 2);
    if qy >= cfg.h || qx >= cfg.w {
        return Err(DdsmError::Config(format!(
            "query ({qy},{qx}) lies outside the {}x{} map",
            cfg.h, cfg.w
        )));
    }
    let grid = params.spatial.grid();
    let mut coords_csv = String::from("n,y,x\n");
    let base = io::gray_pgm_from_field(cfg.h, cfg.w, &channel_mean(&x_l))?;
    let mut rgb: Vec<[u8; 3]> = base.pixels.iter().map(|&g| [g as u8; 3]).collect();
    for s in 0..grid.n() {
        let (dy, dx) = grid.offset(s);
        let sy = qy as f64 + dy as f64 + ctx.spatial.offsets.at3(2 * s, qy, qx);
        let sx = qx as f64 + dx as f64 + ctx.spatial.offsets.at3(2 * s + 1, qy, qx);
        coords_csv.push_str(&format!("{s},{sy},{sx}\n"));
        let (py, px) = (sy.round(), sx.round());
        if py >= 0.0 && px >= 0.0 && (py as usize) < cfg.h && (px as usize) < cfg.w {
            rgb[py as usize * cfg.w + px as usize] = [255, 0, 0];
        }
    }
    rgb[qy * cfg.w + qx] = [0, 255, 0];
    fs::write(cfg.out.join("samples.ppm"), io::render_ppm_p3(cfg.h, cfg.w, &rgb)?)?;
    fs::write(cfg.out.join("samples.csv"), &coords_csv)?;
    Ok(format!(
        "wrote input_low.pgm input_high.pgm spatial_out.pgm branch_sum.pgm samples.ppm samples.csv under {}",
        cfg.out.display()
    ))
}

pub fn usage() -> String {
    let mut s = String::from(
        "usage: ddsm <command> [--config FILE] [--KEY VALUE]... [args]\n\
         \n\
         commands:\n\
           gradcheck              finite-difference check of every parameter group\n\
           equiv                  oracle equivalence sweep (dense, enumeration, cost)\n\
           train                  train a preset on the synthetic polygon task\n\
           dump [x_l.txt x_h.txt] render block inputs/outputs and sampled positions\n\
           cost                   parameter/MAC tables and the affinity ratio\n\
           fscore PRED.pgm GT.pgm boundary precision/recall/F at the thresholds\n\
           help                   this text\n\
         \n\
         The DDSM_SEED environment variable overrides the configured seed;\n\
         --KEY VALUE overrides both. Exit codes: 0 pass, 1 check failure,\n\
         2 usage or configuration error.\n\
         \n\
         config keys (key = default):\n",
    );
    for (key, default, doc) in io::CONFIG_KEYS {
        let shown = if default.is_empty() { "(empty)" } else { default };
        s.push_str(&format!("  {key:<12} = {shown:<10} {doc}\n"));
    }
    s
}

/// Splits raw arguments into a merged configuration and positionals.
/// Precedence: defaults, then `--config` file, then `DDSM_SEED`, then
/// explicit `--key value` flags.
fn build_config(args: &[String]) -> Result<(RunConfig, Vec<String>)> {
    let mut cfg = RunConfig::default();
    let mut flags: Vec<(String, String)> = Vec::new();
    let mut positionals = Vec::new();
    let mut config_file: Option<String> = None;
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if let Some(key) = arg.strip_prefix("--") {
            let value = args
                .get(i + 1)
                .ok_or_else(|| DdsmError::Config(format!("flag --{key} needs a value")))?;
            if key == "config" {
                if config_file.is_some() {
                    return Err(DdsmError::Config("--config given twice".into()));
                }
                config_file = Some(value.clone());
            } else {
                flags.push((key.to_string(), value.clone()));
            }
            i += 2;
        } else {
            positionals.push(arg.clone());
            i += 1;
        }
    }
    if let Some(path) = config_file {
        let src = fs::read_to_string(&path)
            .map_err(|e| DdsmError::Config(format!("cannot read config {path}: {e}")))?;
        for (key, value) in io::parse_config_pairs(&src)? {
            cfg.apply(&key, &value)?;
        }
    }
    if let Ok(seed) = std::env::var("DDSM_SEED") {
        cfg.apply("seed", &seed)?;
    }
    for (key, value) in &flags {
        cfg.apply(key, value)?;
    }
    cfg.validate()?;
    Ok((cfg, positionals))
}

fn expect_positionals(got: &[String], min: usize, max: usize, what: &str) -> Result<()> {
    if got.len() < min || got.len() > max {
        return Err(DdsmError::Config(format!(
            "{what}, got {} positional argument(s)",
            got.len()
        )));
    }
    Ok(())
}

fn run_inner(args: &[String]) -> Result<Outcome> {
    let command = args
        .first()
        .ok_or_else(|| DdsmError::Config("no command given; try `ddsm help`".into()))?;
    if matches!(command.as_str(), "help" | "--help" | "-h") {
        print!("{}", usage());
        return Ok(Outcome::Pass);
    }
    let (cfg, positionals) = build_config(&args[1..])?;
    match command.as_str() {
        "gradcheck" => {
            expect_positionals(&positionals, 0, 0, "gradcheck takes no positionals")?;
            let (outcome, csv) = cmd_gradcheck(&cfg)?;
            fs::create_dir_all(&cfg.out)?;
            fs::write(cfg.out.join("gradcheck.csv"), &csv)?;
            print!("{csv}");
            Ok(outcome)
        }
        "equiv" => {
            expect_positionals(&positionals, 0, 0, "equiv takes no positionals")?;
            let (outcome, report) = cmd_equiv(&cfg)?;
            print!("{report}");
            Ok(outcome)
        }
        "train" => {
            expect_positionals(&positionals, 0, 0, "train takes no positionals")?;
            let (outcome, summary) = cmd_train(&cfg)?;
            if !summary.is_empty() {
                println!("{summary}");
            }
            Ok(outcome)
        }
        "dump" => {
            expect_positionals(&positionals, 0, 2, "dump takes at most x_l and x_h tensor files")?;
            if positionals.len() == 1 {
                return Err(DdsmError::Config(
                    "dump needs both tensor files or neither".into(),
                ));
            }
            let x_l = positionals.first().map(Path::new);
            let x_h = positionals.get(1).map(Path::new);
            let summary = cmd_dump(&cfg, x_l, x_h)?;
            println!("{summary}");
            Ok(Outcome::Pass)
        }
        "cost" => {
            expect_positionals(&positionals, 0, 0, "cost takes no positionals")?;
            let report = cmd_cost(&cfg)?;
            print!("{report}");
            Ok(Outcome::Pass)
        }
        "fscore" => {
            expect_positionals(&positionals, 2, 2, "fscore needs PRED.pgm and GT.pgm")?;
            let csv = cmd_fscore(&cfg, Path::new(&positionals[0]), Path::new(&positionals[1]))?;
            print!("{csv}");
            Ok(Outcome::Pass)
        }
        other => Err(DdsmError::Config(format!(
            "unknown command {other:?}; try `ddsm help`"
        ))),
    }
}

/// Full dispatch: returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match run_inner(args) {
        Ok(Outcome::Pass) => 0,
        Ok(Outcome::Fail(msg)) => {
            eprintln!("FAIL: {msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
