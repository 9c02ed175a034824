//! On-disk formats: flat tensor text, portable graymaps/pixmaps, run
//! configuration files and checkpoint manifests.
//!
//! Every parser here accepts arbitrary bytes without panicking and caps
//! its allocations before trusting any size read from the input, so the
//! same entry points double as fuzzing surfaces.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{DdsmError, Result};
use crate::fscore::LabelMap;
use crate::tensor::Tensor;

/// Hard ceiling on elements in any parsed tensor (128 MiB of f64).
pub const MAX_TENSOR_ELEMENTS: usize = 1 << 24;
/// Hard ceiling on tensor rank.
pub const MAX_TENSOR_RANK: usize = 8;
/// Hard ceiling on pixels in any parsed image.
pub const MAX_IMAGE_PIXELS: usize = 1 << 24;
/// Hard ceiling on tensors listed by one checkpoint manifest.
pub const MAX_MANIFEST_ENTRIES: usize = 4096;

// ---------------------------------------------------------------------
// Tensor text format: `shape: d0 d1 ...` then one real per line in
// row-major order, written with round-trip precision.
// ---------------------------------------------------------------------

pub fn parse_tensor_text(src: &str) -> Result<Tensor> {
    let mut lines = src.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| DdsmError::Parse("empty tensor file".into()))?;
    let dims_part = header
        .strip_prefix("shape:")
        .ok_or_else(|| DdsmError::Parse(format!("tensor header must start with 'shape:', got {header:?}")))?;
    let mut shape = Vec::new();
    for tok in dims_part.split_whitespace() {
        let d: usize = tok
            .parse()
            .map_err(|_| DdsmError::Parse(format!("bad tensor dimension {tok:?}")))?;
        if d == 0 {
            return Err(DdsmError::Parse("zero tensor dimension".into()));
        }
        shape.push(d);
    }
    if shape.is_empty() || shape.len() > MAX_TENSOR_RANK {
        return Err(DdsmError::Parse(format!(
            "tensor rank must be 1..={MAX_TENSOR_RANK}, got {}",
            shape.len()
        )));
    }
    let mut expected: usize = 1;
    for &d in &shape {
        expected = expected
            .checked_mul(d)
            .filter(|&p| p <= MAX_TENSOR_ELEMENTS)
            .ok_or_else(|| {
                DdsmError::Parse(format!(
                    "tensor of shape {shape:?} exceeds the {MAX_TENSOR_ELEMENTS}-element cap"
                ))
            })?;
    }
    let mut data = Vec::with_capacity(expected.min(1 << 16));
    for line in lines {
        if data.len() == expected {
            return Err(DdsmError::Parse(format!(
                "tensor has more than the {expected} declared values"
            )));
        }
        let v: f64 = line
            .parse()
            .map_err(|_| DdsmError::Parse(format!("bad tensor value {line:?}")))?;
        data.push(v);
    }
    if data.len() != expected {
        return Err(DdsmError::Parse(format!(
            "tensor declares {expected} values but provides {}",
            data.len()
        )));
    }
    Tensor::new(shape, data)
}

pub fn render_tensor_text(t: &Tensor) -> String {
    let mut out = String::from("shape:");
    for d in t.shape() {
        out.push_str(&format!(" {d}"));
    }
    out.push('\n');
    for v in t.data() {
        out.push_str(&format!("{v}\n"));
    }
    out
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let src = fs::read_to_string(path)?;
    parse_tensor_text(&src)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, render_tensor_text(t))?;
    Ok(())
}

// ---------------------------------------------------------------------
// Portable graymap (P2 ASCII / P5 binary) and pixmap (P3 ASCII) images.
// Label masks use one label per pixel.
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub w: usize,
    pub h: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

/// Reads header tokens, honoring `#` comments through end of line.
struct TokenReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_filler(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_filler();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(DdsmError::Parse("unexpected end of image header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        let tok = self.token()?;
        let s = std::str::from_utf8(tok)
            .map_err(|_| DdsmError::Parse(format!("non-ASCII {what} in image header")))?;
        s.parse()
            .map_err(|_| DdsmError::Parse(format!("bad {what} {s:?} in image header")))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut r = TokenReader::new(bytes);
    let magic = r.token()?;
    let binary = match magic {
        b"P2" => false,
        b"P5" => true,
        other => {
            return Err(DdsmError::Parse(format!(
                "unsupported image magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let w = r.number("width")? as usize;
    let h = r.number("height")? as usize;
    if w == 0 || h == 0 {
        return Err(DdsmError::Parse(format!("degenerate image size {w}x{h}")));
    }
    let pixels_total = w
        .checked_mul(h)
        .filter(|&p| p <= MAX_IMAGE_PIXELS)
        .ok_or_else(|| {
            DdsmError::Parse(format!(
                "image {w}x{h} exceeds the {MAX_IMAGE_PIXELS}-pixel cap"
            ))
        })?;
    let maxval = r.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(DdsmError::Parse(format!("maxval {maxval} out of range 1..=65535")));
    }
    let maxval = maxval as u16;
    let mut pixels = Vec::with_capacity(pixels_total.min(1 << 16));
    if binary {
        // Exactly one whitespace byte separates the header from the data.
        match bytes.get(r.pos) {
            Some(b) if b.is_ascii_whitespace() => r.pos += 1,
            _ => {
                return Err(DdsmError::Parse(
                    "binary image data must follow a single whitespace".into(),
                ))
            }
        }
        let data = &bytes[r.pos.min(bytes.len())..];
        let per = if maxval < 256 { 1 } else { 2 };
        if data.len() != pixels_total * per {
            return Err(DdsmError::Parse(format!(
                "binary image needs {} data bytes, got {}",
                pixels_total * per,
                data.len()
            )));
        }
        for i in 0..pixels_total {
            let v = if per == 1 {
                data[i] as u16
            } else {
                u16::from_be_bytes([data[2 * i], data[2 * i + 1]])
            };
            if v > maxval {
                return Err(DdsmError::Parse(format!("pixel {v} exceeds maxval {maxval}")));
            }
            pixels.push(v);
        }
    } else {
        for _ in 0..pixels_total {
            let v = r.number("pixel")?;
            if v > maxval as u64 {
                return Err(DdsmError::Parse(format!("pixel {v} exceeds maxval {maxval}")));
            }
            pixels.push(v as u16);
        }
        r.skip_filler();
        if r.pos != bytes.len() {
            return Err(DdsmError::Parse("trailing bytes after image data".into()));
        }
    }
    Ok(Pgm { w, h, maxval, pixels })
}

pub fn render_pgm_p2(pgm: &Pgm) -> String {
    let mut out = format!("P2\n{} {}\n{}\n", pgm.w, pgm.h, pgm.maxval);
    for row in pgm.pixels.chunks(pgm.w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn pgm_to_label_map(pgm: &Pgm) -> Result<LabelMap> {
    LabelMap::new(pgm.h, pgm.w, pgm.pixels.iter().map(|&v| v as u32).collect())
}

pub fn label_map_to_pgm(map: &LabelMap) -> Result<Pgm> {
    let max = map.data.iter().copied().max().unwrap_or(0);
    if max > 65535 {
        return Err(DdsmError::Config(format!("label {max} exceeds the graymap range")));
    }
    Ok(Pgm {
        w: map.w,
        h: map.h,
        maxval: (max.max(1)) as u16,
        pixels: map.data.iter().map(|&v| v as u16).collect(),
    })
}

/// Min-max normalizes one channel-averaged field to 8-bit gray; a constant
/// field renders as mid gray.
pub fn gray_pgm_from_field(h: usize, w: usize, values: &[f64]) -> Result<Pgm> {
    if values.len() != h * w || h == 0 || w == 0 {
        return Err(DdsmError::Shape(format!(
            "field of {} values cannot render as {h}x{w}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DdsmError::NonFinite("image field"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        values
            .iter()
            .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u16)
            .collect()
    } else {
        vec![128; h * w]
    };
    Ok(Pgm { w, h, maxval: 255, pixels })
}

/// ASCII pixmap (P3) from row-major RGB triples.
pub fn render_ppm_p3(h: usize, w: usize, rgb: &[[u8; 3]]) -> Result<String> {
    if rgb.len() != h * w || h == 0 || w == 0 {
        return Err(DdsmError::Shape(format!(
            "{} RGB triples cannot render as {h}x{w}",
            rgb.len()
        )));
    }
    let mut out = format!("P3\n{w} {h}\n255\n");
    for row in rgb.chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|[r, g, b]| format!("{r} {g} {b}"))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Run configuration: a flat `key = value` file; every key has a default,
// unknown keys are rejected, later sources override earlier ones.
// ---------------------------------------------------------------------

/// (key, default, meaning) for every accepted configuration key.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("seed", "7", "RNG seed for init, data and probes"),
    ("preset", "best", "network preset: best | ablation | baseline"),
    ("c", "8", "raw input width for single-block commands"),
    ("c_r", "16", "reduced fusion width (perfect square)"),
    ("h", "16", "low-branch height; train input height (multiple of 16)"),
    ("w", "16", "low-branch width; train input width (multiple of 16)"),
    ("hh", "8", "high-branch input height for single-block commands"),
    ("wh", "8", "high-branch input width for single-block commands"),
    ("k", "5", "spatial sampling grid side (odd)"),
    ("k_c", "3", "channel sampling grid side (odd)"),
    ("a", "4", "channel-branch pooling size for single-block commands"),
    ("d", "4", "channel-branch value resolution for single-block commands"),
    ("lr", "0.01", "base learning rate of the poly schedule"),
    ("steps", "500", "training steps"),
    ("samples", "4", "synthetic scenes in the training set"),
    ("classes", "4", "synthetic task classes"),
    ("noise", "0.1", "synthetic task noise amplitude"),
    ("out", "out", "output directory"),
    ("query_y", "center", "query row for sample dumps, or `center`"),
    ("query_x", "center", "query column for sample dumps, or `center`"),
    ("corrupt", "", "parameter name whose gradient is deliberately corrupted"),
    ("checkpoint", "", "checkpoint directory to load (dump command)"),
    ("prefix", "", "junction prefix selecting a block inside a net checkpoint"),
    ("thresholds", "3,5,9,12", "boundary thresholds in pixels, comma separated"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: String,
    pub c: usize,
    pub c_r: usize,
    pub h: usize,
    pub w: usize,
    pub hh: usize,
    pub wh: usize,
    pub k: usize,
    pub k_c: usize,
    pub a: usize,
    pub d: usize,
    pub lr: f64,
    pub steps: usize,
    pub samples: usize,
    pub classes: usize,
    pub noise: f64,
    pub out: PathBuf,
    pub query_y: Option<usize>,
    pub query_x: Option<usize>,
    pub corrupt: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub prefix: Option<String>,
    pub thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            preset: String::new(),
            c: 0,
            c_r: 0,
            h: 0,
            w: 0,
            hh: 0,
            wh: 0,
            k: 0,
            k_c: 0,
            a: 0,
            d: 0,
            lr: 0.0,
            steps: 0,
            samples: 0,
            classes: 0,
            noise: 0.0,
            out: PathBuf::new(),
            query_y: None,
            query_x: None,
            corrupt: None,
            checkpoint: None,
            prefix: None,
            thresholds: Vec::new(),
        };
        for (key, default, _) in CONFIG_KEYS {
            cfg.apply(key, default).expect("defaults are valid");
        }
        cfg
    }
}

impl RunConfig {
    /// Sets one key from its textual value; unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                DdsmError::Config(format!("bad value {value:?} for config key {key}"))
            })
        }
        fn coord(key: &str, value: &str) -> Result<Option<usize>> {
            if value == "center" {
                Ok(None)
            } else {
                num(key, value).map(Some)
            }
        }
        fn optional(value: &str) -> Option<String> {
            if value.is_empty() {
                None
            } else {
                Some(value.to_string())
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "preset" => {
                crate::pyramid::PyramidPreset::parse(value)?;
                self.preset = value.to_string();
            }
            "c" => self.c = num(key, value)?,
            "c_r" => self.c_r = num(key, value)?,
            "h" => self.h = num(key, value)?,
            "w" => self.w = num(key, value)?,
            "hh" => self.hh = num(key, value)?,
            "wh" => self.wh = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "k_c" => self.k_c = num(key, value)?,
            "a" => self.a = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "query_y" => self.query_y = coord(key, value)?,
            "query_x" => self.query_x = coord(key, value)?,
            "corrupt" => self.corrupt = optional(value),
            "checkpoint" => self.checkpoint = optional(value).map(PathBuf::from),
            "prefix" => self.prefix = optional(value),
            "thresholds" => {
                let mut parsed = Vec::new();
                for part in value.split(',') {
                    let t: f64 = num(key, part.trim())?;
                    if !(t >= 0.0) {
                        return Err(DdsmError::Config(format!(
                            "threshold {t} must be non-negative"
                        )));
                    }
                    parsed.push(t);
                }
                if parsed.is_empty() {
                    return Err(DdsmError::Config("thresholds list is empty".into()));
                }
                self.thresholds = parsed;
            }
            other => {
                return Err(DdsmError::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Cross-key sanity checks shared by file parsing and CLI assembly.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c", self.c),
            ("c_r", self.c_r),
            ("h", self.h),
            ("w", self.w),
            ("hh", self.hh),
            ("wh", self.wh),
            ("k", self.k),
            ("k_c", self.k_c),
            ("a", self.a),
            ("d", self.d),
            ("samples", self.samples),
        ] {
            if v == 0 {
                return Err(DdsmError::Config(format!("config key {name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(DdsmError::Config("classes must be at least 2".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(DdsmError::Config(format!("bad learning rate {}", self.lr)));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(DdsmError::Config(format!("bad noise amplitude {}", self.noise)));
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped, keys may not repeat.
pub fn parse_config_pairs(src: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in src.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            DdsmError::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(DdsmError::Config(format!("line {}: empty key", lineno + 1)));
        }
        if pairs.iter().any(|(k, _)| k == key) {
            return Err(DdsmError::Config(format!("duplicate config key {key:?}")));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// Full config from one file source: defaults, then the file's pairs.
pub fn parse_run_config(src: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (key, value) in parse_config_pairs(src)? {
        cfg.apply(&key, &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------
// Checkpoints: a manifest listing named tensors, one text file each.
// ---------------------------------------------------------------------

fn valid_tensor_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        && !name.starts_with('.')
        && !name.ends_with('.')
}

fn valid_file_name(file: &str) -> bool {
    !file.is_empty()
        && file.len() <= 160
        && file
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
        && !file.contains("..")
}

/// `(name, file)` rows of a checkpoint manifest.
pub fn parse_manifest(src: &str) -> Result<Vec<(String, String)>> {
    let mut lines = src.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| DdsmError::Parse("empty checkpoint manifest".into()))?;
    let count: usize = header
        .strip_prefix("tensors:")
        .map(str::trim)
        .ok_or_else(|| {
            DdsmError::Parse(format!("manifest must start with 'tensors: N', got {header:?}"))
        })?
        .parse()
        .map_err(|_| DdsmError::Parse(format!("bad tensor count in {header:?}")))?;
    if count > MAX_MANIFEST_ENTRIES {
        return Err(DdsmError::Parse(format!(
            "manifest lists {count} tensors, cap is {MAX_MANIFEST_ENTRIES}"
        )));
    }
    let mut rows = Vec::with_capacity(count);
    for line in lines {
        let mut fields = line.split_whitespace();
        let (name, file) = match (fields.next(), fields.next(), fields.next()) {
            (Some(n), Some(f), None) => (n, f),
            _ => {
                return Err(DdsmError::Parse(format!(
                    "manifest row must be '<name> <file>', got {line:?}"
                )))
            }
        };
        if !valid_tensor_name(name) {
            return Err(DdsmError::Parse(format!("bad tensor name {name:?}")));
        }
        if !valid_file_name(file) {
            return Err(DdsmError::Parse(format!("bad tensor file name {file:?}")));
        }
        if rows.iter().any(|(n, _): &(String, String)| n == name) {
            return Err(DdsmError::Parse(format!("duplicate tensor name {name:?}")));
        }
        if rows.len() == count {
            return Err(DdsmError::Parse(format!("manifest declares {count} rows but has more")));
        }
        rows.push((name.to_string(), file.to_string()));
    }
    if rows.len() != count {
        return Err(DdsmError::Parse(format!(
            "manifest declares {count} rows but has {}",
            rows.len()
        )));
    }
    Ok(rows)
}

pub fn render_manifest(rows: &[(String, String)]) -> String {
    let mut out = format!("tensors: {}\n", rows.len());
    for (name, file) in rows {
        out.push_str(&format!("{name} {file}\n"));
    }
    out
}

/// Writes `manifest.txt` plus one tensor file per entry into `dir`.
pub fn save_checkpoint(dir: &Path, named: &BTreeMap<String, Tensor>) -> Result<()> {
    if named.len() > MAX_MANIFEST_ENTRIES {
        return Err(DdsmError::Config(format!(
            "checkpoint of {} tensors exceeds the manifest cap",
            named.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(named.len());
    for (name, tensor) in named {
        if !valid_tensor_name(name) {
            return Err(DdsmError::Config(format!("tensor name {name:?} is not storable")));
        }
        let file = format!("{}.txt", name.replace('.', "_"));
        if rows.iter().any(|(_, f): &(String, String)| *f == file) {
            return Err(DdsmError::Config(format!(
                "tensor names collide on checkpoint file {file}"
            )));
        }
        save_tensor(&dir.join(&file), tensor)?;
        rows.push((name.clone(), file));
    }
    fs::write(dir.join("manifest.txt"), render_manifest(&rows))?;
    Ok(())
}

/// Loads every tensor listed by `dir/manifest.txt`.
pub fn load_checkpoint(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let src = fs::read_to_string(dir.join("manifest.txt"))?;
    let rows = parse_manifest(&src)?;
    let mut named = BTreeMap::new();
    for (name, file) in rows {
        let tensor = load_tensor(&dir.join(&file))?;
        named.insert(name, tensor);
    }
    Ok(named)
}
