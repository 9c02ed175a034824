//! Deterministic single-threaded trainer for the toy pyramid: SGD with
//! momentum and weight decay, polynomial learning-rate decay, and mean
//! per-pixel cross-entropy with a softmax head.

use crate::error::{DdsmError, Result};
use crate::params::{GradMap, ParamSet};
use crate::pyramid::{pyramid_backward, pyramid_forward_ctx, ToyPyramid};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the (1 - t/T)^power learning-rate schedule.
    pub lr_power: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_power: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(DdsmError::Config(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DdsmError::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(DdsmError::Config(format!(
                "weight decay must be finite and nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !self.lr_power.is_finite() || self.lr_power < 0.0 {
            return Err(DdsmError::Config(format!(
                "learning-rate power must be finite and nonnegative, got {}",
                self.lr_power
            )));
        }
        Ok(())
    }
}

/// One logged step: the loss/accuracy measured before that step's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: ToyPyramid,
    pub velocity: GradMap,
    pub step: usize,
}

/// Mean per-pixel cross-entropy of class scores against labels, plus the
/// score gradient and the pixel accuracy (argmax, ties to the lowest
/// class index).
pub fn softmax_cross_entropy(
    scores: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor, f64)> {
    let s = scores.shape();
    if s.len() != 3 {
        return Err(DdsmError::Shape(format!(
            "cross entropy wants (C,H,W) scores, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if labels.len() != h * w {
        return Err(DdsmError::Shape(format!(
            "{} labels for {h}x{w} scores",
            labels.len()
        )));
    }
    if !scores.is_finite() {
        return Err(DdsmError::NonFinite("class scores"));
    }
    let pixels = (h * w) as f64;
    let mut loss = 0.0;
    let mut hits = 0usize;
    let mut grad = Tensor::zeros(&[c, h, w])?;
    for y in 0..h {
        for x in 0..w {
            let label = labels[y * w + x];
            if label >= c {
                return Err(DdsmError::Config(format!(
                    "label {label} out of range for {c} classes"
                )));
            }
            let mut best = 0usize;
            let mut max = scores.at3(0, y, x);
            for ch in 1..c {
                let v = scores.at3(ch, y, x);
                if v > max {
                    max = v;
                    best = ch;
                }
            }
            if best == label {
                hits += 1;
            }
            let mut z = 0.0;
            for ch in 0..c {
                z += (scores.at3(ch, y, x) - max).exp();
            }
            loss += -(scores.at3(label, y, x) - max - z.ln());
            for ch in 0..c {
                let p = (scores.at3(ch, y, x) - max).exp() / z;
                let target = if ch == label { 1.0 } else { 0.0 };
                grad.set3(ch, y, x, (p - target) / pixels);
            }
        }
    }
    Ok((loss / pixels, grad, hits as f64 / pixels))
}

/// Polynomial decay: base * (1 - t/T)^power.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64).powf(power)
}

/// One SGD update: v <- momentum*v + grad + wd*param; param <- param - lr*v.
pub fn sgd_step<P: ParamSet>(
    params: &mut P,
    velocity: &mut GradMap,
    grads: &GradMap,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for name in params.names() {
        let g = grads
            .get(&name)
            .ok_or_else(|| DdsmError::Config(format!("no gradient for parameter {name}")))?;
        let p = params.get_mut(&name).expect("name listed by the set");
        if g.shape() != p.shape() {
            return Err(DdsmError::Shape(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let v = velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()).expect("same shape"));
        let (vd, pd, gd) = (v.data_mut(), p.data_mut(), g.data());
        for i in 0..gd.len() {
            vd[i] = momentum * vd[i] + gd[i] + weight_decay * pd[i];
            pd[i] -= lr * vd[i];
        }
    }
    Ok(())
}

/// Mean loss and accuracy of the current parameters over a dataset,
/// without updating anything.
pub fn evaluate(net: &ToyPyramid, data: &[(Tensor, Vec<usize>)]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(DdsmError::Config("empty evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut acc = 0.0;
    for (image, labels) in data {
        let (scores, _) = pyramid_forward_ctx(net, image)?;
        let (l, _, a) = softmax_cross_entropy(&scores, labels)?;
        loss += l;
        acc += a;
    }
    let n = data.len() as f64;
    Ok((loss / n, acc / n))
}

/// Run SGD over the dataset in a fixed round-robin order. Returns the
/// final state plus one row per step; a non-finite loss aborts with the
/// step index. Bitwise deterministic: same inputs, same outputs.
pub fn train_toy(
    net: ToyPyramid,
    data: &[(Tensor, Vec<usize>)],
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<LossRow>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DdsmError::Config("empty training set".into()));
    }
    let mut net = net;
    let mut velocity = GradMap::new();
    let mut rows = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let (image, labels) = &data[t % data.len()];
        let (scores, ctx) = pyramid_forward_ctx(&net, image)?;
        let (loss, g_scores, accuracy) = match softmax_cross_entropy(&scores, labels) {
            Ok(v) => v,
            Err(DdsmError::NonFinite(_)) => return Err(DdsmError::Diverged { step: t }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(DdsmError::Diverged { step: t });
        }
        rows.push(LossRow {
            step: t,
            loss,
            accuracy,
        });
        let (grads, _) = pyramid_backward(&g_scores, &net, &ctx)?;
        let lr = poly_lr(cfg.base_lr, t, cfg.steps, cfg.lr_power);
        sgd_step(&mut net, &mut velocity, &grads, lr, cfg.momentum, cfg.weight_decay)?;
    }
    Ok((
        TrainState {
            net,
            velocity,
            step: cfg.steps,
        },
        rows,
    ))
}

/// Render loss rows as the `step,loss,accuracy` CSV used by the CLI and
/// the checked-in regression curves.
pub fn rows_to_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,loss,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.accuracy));
    }
    out
}
