//! Boundary-quality scoring for label maps.
//!
//! A pixel is a boundary pixel for class `c` when it carries label `c` and
//! at least one in-bounds 4-neighbor carries a different label; neighbors
//! outside the image are ignored rather than treated as disagreeing.
//! Precision at a threshold t is the fraction of predicted boundary pixels
//! lying within Euclidean distance t of some reference boundary pixel of
//! the same class, micro-averaged over every class present in either map;
//! recall is the mirror image, and F = 2pr/(p+r) with F = 0 when p+r = 0.
//! Distances come from an exact two-pass squared Euclidean distance
//! transform (lower envelope of parabolas per axis), so threshold checks
//! compare exact integers.

use crate::error::{DdsmError, Result};

/// Per-pixel class labels in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(DdsmError::Config(format!("empty label map {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(DdsmError::Config(format!(
                "label map {h}x{w} needs {} entries, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.w + x]
    }

    fn classes(&self) -> Vec<u32> {
        let mut cs: Vec<u32> = self.data.clone();
        cs.sort_unstable();
        cs.dedup();
        cs
    }
}

/// Row-major mask of boundary pixels for one class.
pub fn boundary_mask(map: &LabelMap, class: u32) -> Vec<bool> {
    let (h, w) = (map.h, map.w);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if map.get(y, x) != class {
                continue;
            }
            let mut differs = false;
            if y > 0 && map.get(y - 1, x) != class {
                differs = true;
            }
            if y + 1 < h && map.get(y + 1, x) != class {
                differs = true;
            }
            if x > 0 && map.get(y, x - 1) != class {
                differs = true;
            }
            if x + 1 < w && map.get(y, x + 1) != class {
                differs = true;
            }
            out[y * w + x] = differs;
        }
    }
    out
}

const INF: f64 = 1e20;

/// One-dimensional squared-distance transform (lower envelope of
/// parabolas rooted at `f`).
fn dt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        d[0] = f[0];
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    let sep = |q: usize, p: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64
    };
    for q in 1..n {
        let mut s = sep(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = sep(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = INF;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        d[q] = dq * dq + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every cell to the nearest `true`
/// cell; cells stay at least `INF` when there are no sites at all.
pub fn squared_distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(sites.len(), h * w, "site mask must cover the grid");
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { INF }).collect();
    // Columns first, then rows, each an exact 1-D transform.
    let mut col = vec![0.0f64; h];
    let mut out_col = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        dt_1d(&col, &mut out_col);
        for y in 0..h {
            grid[y * w + x] = out_col[y];
        }
    }
    let mut out_row = vec![0.0f64; w];
    for y in 0..h {
        dt_1d(&grid[y * w..(y + 1) * w], &mut out_row);
        grid[y * w..(y + 1) * w].copy_from_slice(&out_row);
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdScore {
    pub threshold_px: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEvalResult {
    pub scores: Vec<ThresholdScore>,
    pub mean_f: f64,
}

impl BoundaryEvalResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold_px,precision,recall,f_score\n");
        for s in &self.scores {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                s.threshold_px, s.precision, s.recall, s.f_score
            ));
        }
        out.push_str(&format!("mean,,,{:.6}\n", self.mean_f));
        out
    }
}

pub const DEFAULT_THRESHOLDS: [f64; 4] = [3.0, 5.0, 9.0, 12.0];

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(DdsmError::Config(format!(
            "label maps differ in shape: {}x{} vs {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    Ok(())
}

/// Micro-averaged boundary precision/recall/F at one pixel threshold.
pub fn boundary_f_score(
    pred: &LabelMap,
    gt: &LabelMap,
    threshold_px: f64,
) -> Result<ThresholdScore> {
    check_pair(pred, gt)?;
    if !(threshold_px >= 0.0) {
        return Err(DdsmError::Config(format!(
            "boundary threshold must be non-negative, got {threshold_px}"
        )));
    }
    let (h, w) = (pred.h, pred.w);
    let thr_sq = threshold_px * threshold_px;
    let mut classes = pred.classes();
    classes.extend(gt.classes());
    classes.sort_unstable();
    classes.dedup();

    let mut pred_total = 0u64;
    let mut pred_matched = 0u64;
    let mut gt_total = 0u64;
    let mut gt_matched = 0u64;
    for &class in &classes {
        let bp = boundary_mask(pred, class);
        let bg = boundary_mask(gt, class);
        let dist_to_gt = squared_distance_transform(&bg, h, w);
        let dist_to_pred = squared_distance_transform(&bp, h, w);
        for i in 0..h * w {
            if bp[i] {
                pred_total += 1;
                if dist_to_gt[i] <= thr_sq {
                    pred_matched += 1;
                }
            }
            if bg[i] {
                gt_total += 1;
                if dist_to_pred[i] <= thr_sq {
                    gt_matched += 1;
                }
            }
        }
    }
    let precision = if pred_total == 0 {
        1.0
    } else {
        pred_matched as f64 / pred_total as f64
    };
    let recall = if gt_total == 0 {
        1.0
    } else {
        gt_matched as f64 / gt_total as f64
    };
    let f_score = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ThresholdScore {
        threshold_px,
        precision,
        recall,
        f_score,
    })
}

/// Scores at every threshold plus the mean F across them.
pub fn boundary_eval(
    pred: &LabelMap,
    gt: &LabelMap,
    thresholds: &[f64],
) -> Result<BoundaryEvalResult> {
    if thresholds.is_empty() {
        return Err(DdsmError::Config("no boundary thresholds given".into()));
    }
    let mut scores = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        scores.push(boundary_f_score(pred, gt, t)?);
    }
    let mean_f = scores.iter().map(|s| s.f_score).sum::<f64>() / scores.len() as f64;
    Ok(BoundaryEvalResult { scores, mean_f })
}
