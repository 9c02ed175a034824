//! Analytic parameter and multiply-accumulate counting for the fusion
//! block versus a dense non-local baseline, validated against instrumented
//! loop-nest executions.
//!
//! Counting convention (documented for anyone comparing numbers):
//! - The unit is MACs; a FLOP figure under the common "2 ops per MAC"
//!   convention is exactly twice every number reported here.
//! - Counted: projection weight multiplies, the four interpolation-tap
//!   multiplies of every sample (taps landing in the zero-padded exterior
//!   multiply a zero and still count), affinity logits and the weighted
//!   aggregation.
//! - Not counted: bias adds, modulation gating, pooling, resizes, softmax
//!   normalization and other O(N) bookkeeping.
//! - Both inputs are modeled at the low-branch resolution H x W; the
//!   high-branch resize is interpolation and is not counted either way.

use std::collections::BTreeMap;

use crate::error::{DdsmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostConfig {
    /// Width of both raw inputs.
    pub c: usize,
    /// Common reduced width everything fuses at.
    pub c_r: usize,
    pub h: usize,
    pub w: usize,
    /// Spatial samples per position (k*k).
    pub n: usize,
    /// Channel samples per channel (k_c*k_c).
    pub n_c: usize,
    /// Channel-branch pooling size.
    pub a: usize,
    /// Channel-branch value resolution.
    pub d: usize,
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.c_r == 0 || self.h == 0 || self.w == 0 {
            return Err(DdsmError::Config(format!("degenerate cost config {self:?}")));
        }
        if self.a == 0 || self.d == 0 {
            return Err(DdsmError::Config(
                "pooling sizes in a cost config must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub config: CostConfig,
}

impl CostReport {
    fn from_rows(rows: Vec<CostRow>, config: CostConfig) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        Self {
            rows,
            total_params,
            total_macs,
            config,
        }
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// CSV with one row per sub-block plus a totals row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,params,macs,flops\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.name, r.params, r.macs, 2 * r.macs));
        }
        out.push_str(&format!(
            "total,{},{},{}\n",
            self.total_params,
            self.total_macs,
            2 * self.total_macs
        ));
        out
    }
}

fn linear_params(c_in: usize, c_out: usize) -> u64 {
    (c_in * c_out + c_out) as u64
}

fn conv_macs(c_in: usize, c_out: usize, h: usize, w: usize) -> u64 {
    (c_in * c_out * h * w) as u64
}

/// Closed-form cost of one fusion block.
pub fn count_ddsm(config: CostConfig) -> Result<CostReport> {
    config.validate()?;
    let CostConfig {
        c,
        c_r,
        h,
        w,
        n,
        n_c,
        a,
        d,
    } = config;
    let hw = h * w;
    let rows = vec![
        CostRow {
            name: "reduce_l".into(),
            params: linear_params(c, c_r),
            macs: conv_macs(c, c_r, h, w),
        },
        CostRow {
            name: "reduce_h".into(),
            params: linear_params(c, c_r),
            macs: conv_macs(c, c_r, h, w),
        },
        CostRow {
            name: "spatial_query_proj".into(),
            params: linear_params(c_r, c_r),
            macs: conv_macs(c_r, c_r, h, w),
        },
        CostRow {
            name: "spatial_key_proj".into(),
            params: linear_params(2 * c_r, c_r),
            macs: conv_macs(2 * c_r, c_r, h, w),
        },
        CostRow {
            name: "spatial_value_proj".into(),
            params: linear_params(c_r, c_r),
            macs: conv_macs(c_r, c_r, h, w),
        },
        CostRow {
            name: "position_embeddings".into(),
            params: (2 * c_r * hw) as u64,
            macs: 0,
        },
        CostRow {
            name: "spatial_predictors".into(),
            params: linear_params(2 * c_r, 2 * n) + linear_params(2 * c_r, n),
            macs: conv_macs(2 * c_r, 3 * n, h, w),
        },
        CostRow {
            name: "spatial_key_sampling".into(),
            params: 0,
            macs: (4 * c_r * n * hw) as u64,
        },
        CostRow {
            name: "spatial_value_sampling".into(),
            params: 0,
            macs: (4 * c_r * n * hw) as u64,
        },
        CostRow {
            name: "spatial_affinity".into(),
            params: 0,
            macs: (2 * c_r * n * hw) as u64,
        },
        CostRow {
            name: "channel_query_proj".into(),
            params: linear_params(c_r, c_r),
            macs: conv_macs(c_r, c_r, a, a),
        },
        CostRow {
            name: "channel_key_proj".into(),
            params: linear_params(2 * c_r, c_r),
            macs: conv_macs(2 * c_r, c_r, a, a),
        },
        CostRow {
            name: "channel_value_proj".into(),
            params: linear_params(c_r, c_r),
            macs: conv_macs(c_r, c_r, d, d),
        },
        CostRow {
            name: "channel_predictors".into(),
            params: linear_params(a * a, 2 * n_c) + linear_params(a * a, n_c),
            macs: (a * a * 3 * n_c * c_r) as u64,
        },
        CostRow {
            name: "channel_key_sampling".into(),
            params: 0,
            macs: (4 * a * a * n_c * c_r) as u64,
        },
        CostRow {
            name: "channel_value_sampling".into(),
            params: 0,
            macs: (4 * d * d * n_c * c_r) as u64,
        },
        CostRow {
            name: "channel_affinity".into(),
            params: 0,
            macs: ((a * a + d * d) * n_c * c_r) as u64,
        },
    ];
    Ok(CostReport::from_rows(rows, config))
}

/// Closed-form cost of the dense non-local comparator: identical
/// reductions and projections, full-map affinity, no sampling machinery.
pub fn count_dense_nonlocal(config: CostConfig) -> Result<CostReport> {
    config.validate()?;
    let CostConfig { c, c_r, h, w, .. } = config;
    let hw = (h * w) as u64;
    let rows = vec![
        CostRow {
            name: "reduce_l".into(),
            params: linear_params(c, c_r),
            macs: conv_macs(c, c_r, h, w),
        },
        CostRow {
            name: "reduce_h".into(),
            params: linear_params(c, c_r),
            macs: conv_macs(c, c_r, h, w),
        },
        CostRow {
            name: "spatial_query_proj".into(),
            params: linear_params(c_r, c_r),
            macs: conv_macs(c_r, c_r, h, w),
        },
        CostRow {
            name: "spatial_key_proj".into(),
            params: linear_params(2 * c_r, c_r),
            macs: conv_macs(2 * c_r, c_r, h, w),
        },
        CostRow {
            name: "spatial_value_proj".into(),
            params: linear_params(c_r, c_r),
            macs: conv_macs(c_r, c_r, h, w),
        },
        CostRow {
            name: "dense_affinity".into(),
            params: 0,
            macs: 2 * c_r as u64 * hw * hw,
        },
    ];
    Ok(CostReport::from_rows(rows, config))
}

/// Exact affinity-MAC ratio (sampled over dense) as a reduced fraction.
/// For any config this is N : H*W.
pub fn affinity_ratio(config: CostConfig) -> Result<(u64, u64)> {
    config.validate()?;
    let ddsm = count_ddsm(config)?;
    let dense = count_dense_nonlocal(config)?;
    let s = ddsm.row("spatial_affinity").expect("row exists").macs;
    let f = dense.row("dense_affinity").expect("row exists").macs;
    let g = gcd(s, f);
    if g == 0 {
        return Err(DdsmError::Config("zero-cost affinity rows".into()));
    }
    Ok((s / g, f / g))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

// ---------------------------------------------------------------------
// Instrumented executions: loop nests shaped exactly like the kernels,
// incrementing one counter per multiply-accumulate. These enumerate the
// work instead of closed-form algebra, so a factor slip in either side
// shows up as an integer mismatch.
// ---------------------------------------------------------------------

fn count_conv(counter: &mut u64, c_in: usize, c_out: usize, h: usize, w: usize) {
    for _o in 0..c_out {
        for _y in 0..h {
            for _x in 0..w {
                for _i in 0..c_in {
                    *counter += 1;
                }
            }
        }
    }
}

fn count_sampling(counter: &mut u64, c: usize, positions: usize, samples: usize) {
    for _ch in 0..c {
        for _p in 0..positions {
            for _s in 0..samples {
                // Four interpolation taps per sampled coordinate.
                for _tap in 0..4 {
                    *counter += 1;
                }
            }
        }
    }
}

fn count_affinity(counter: &mut u64, c: usize, c_v: usize, positions: usize, samples: usize) {
    for _p in 0..positions {
        for _s in 0..samples {
            // Logit: one dot product over the key width.
            for _ch in 0..c {
                *counter += 1;
            }
            // Aggregation: one multiply per value channel.
            for _ch in 0..c_v {
                *counter += 1;
            }
        }
    }
}

/// Per-sub-block MAC counts from instrumented loop nests.
pub fn instrumented_ddsm(config: CostConfig) -> Result<BTreeMap<String, u64>> {
    config.validate()?;
    let CostConfig {
        c,
        c_r,
        h,
        w,
        n,
        n_c,
        a,
        d,
    } = config;
    let hw = h * w;
    let mut out = BTreeMap::new();
    let mut put = |name: &str, v: u64| {
        out.insert(name.to_string(), v);
    };

    let mut m = 0;
    count_conv(&mut m, c, c_r, h, w);
    put("reduce_l", m);
    put("reduce_h", m);

    let mut m = 0;
    count_conv(&mut m, c_r, c_r, h, w);
    put("spatial_query_proj", m);
    let mut m = 0;
    count_conv(&mut m, 2 * c_r, c_r, h, w);
    put("spatial_key_proj", m);
    let mut m = 0;
    count_conv(&mut m, c_r, c_r, h, w);
    put("spatial_value_proj", m);
    put("position_embeddings", 0);

    // Offsets (2N channels) and modulations (N channels) from x_cat.
    let mut m = 0;
    count_conv(&mut m, 2 * c_r, 2 * n, h, w);
    count_conv(&mut m, 2 * c_r, n, h, w);
    put("spatial_predictors", m);

    let mut m = 0;
    count_sampling(&mut m, c_r, hw, n);
    put("spatial_key_sampling", m);
    put("spatial_value_sampling", m);

    let mut m = 0;
    count_affinity(&mut m, c_r, c_r, hw, n);
    put("spatial_affinity", m);

    let mut m = 0;
    count_conv(&mut m, c_r, c_r, a, a);
    put("channel_query_proj", m);
    let mut m = 0;
    count_conv(&mut m, 2 * c_r, c_r, a, a);
    put("channel_key_proj", m);
    let mut m = 0;
    count_conv(&mut m, c_r, c_r, d, d);
    put("channel_value_proj", m);

    // Lattice view: c_r cells, each an (a*a)-vector; predictors run per cell.
    let mut m = 0;
    count_conv(&mut m, a * a, 2 * n_c, 1, c_r);
    count_conv(&mut m, a * a, n_c, 1, c_r);
    put("channel_predictors", m);

    let mut m = 0;
    count_sampling(&mut m, a * a, c_r, n_c);
    put("channel_key_sampling", m);
    let mut m = 0;
    count_sampling(&mut m, d * d, c_r, n_c);
    put("channel_value_sampling", m);

    let mut m = 0;
    count_affinity(&mut m, a * a, d * d, c_r, n_c);
    put("channel_affinity", m);

    Ok(out)
}

/// Instrumented dense non-local counterpart.
pub fn instrumented_dense(config: CostConfig) -> Result<BTreeMap<String, u64>> {
    config.validate()?;
    let CostConfig { c, c_r, h, w, .. } = config;
    let hw = h * w;
    let mut out = BTreeMap::new();

    let mut m = 0;
    count_conv(&mut m, c, c_r, h, w);
    out.insert("reduce_l".into(), m);
    out.insert("reduce_h".into(), m);
    let mut m = 0;
    count_conv(&mut m, c_r, c_r, h, w);
    out.insert("spatial_query_proj".into(), m);
    let mut m = 0;
    count_conv(&mut m, 2 * c_r, c_r, h, w);
    out.insert("spatial_key_proj".into(), m);
    let mut m = 0;
    count_conv(&mut m, c_r, c_r, h, w);
    out.insert("spatial_value_proj".into(), m);

    // Every position attends to every position.
    let mut m = 0;
    count_affinity(&mut m, c_r, c_r, hw, hw);
    out.insert("dense_affinity".into(), m);
    Ok(out)
}

/// Integer equality of every closed-form row against its instrumented
/// counterpart; returns the first mismatch if any.
pub fn verify_against_instrumented(config: CostConfig) -> Result<()> {
    let report = count_ddsm(config)?;
    let counted = instrumented_ddsm(config)?;
    for row in &report.rows {
        let c = counted.get(&row.name).copied().ok_or_else(|| {
            DdsmError::Config(format!("instrumented run missing block {}", row.name))
        })?;
        if c != row.macs {
            return Err(DdsmError::Config(format!(
                "block {}: closed form {} MACs, instrumented {c}",
                row.name, row.macs
            )));
        }
    }
    let report = count_dense_nonlocal(config)?;
    let counted = instrumented_dense(config)?;
    for row in &report.rows {
        let c = counted.get(&row.name).copied().unwrap_or(0);
        if c != row.macs {
            return Err(DdsmError::Config(format!(
                "dense block {}: closed form {} MACs, instrumented {c}",
                row.name, row.macs
            )));
        }
    }
    Ok(())
}
