//! Value types and configuration shared across the toolkit.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor3};

pub const MIN_IMAGE_SIDE: usize = 32;
pub const ALLOWED_ROTATIONS: [u32; 4] = [0, 90, 180, 270];

/// One RGB image with its image-level label.
///
/// The optional ground-truth mask is for evaluation only. Every call to
/// [`ImageSample::gt_mask`] is counted on a counter shared by all clones of
/// the sample, so tests can prove that training never looked at it.
#[derive(Debug, Clone)]
pub struct ImageSample {
    id: String,
    pixels: Tensor3,
    positive: bool,
    gt_mask: Option<Mask>,
    gt_reads: Arc<AtomicUsize>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Tensor3, label: u8, gt_mask: Option<Mask>) -> Result<Self> {
        let id = id.into();
        if pixels.channels() != 3 {
            return Err(Error::Shape(format!("{id}: expected 3 channels, got {}", pixels.channels())));
        }
        if pixels.height() < MIN_IMAGE_SIDE || pixels.width() < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "{id}: image {}x{} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                pixels.height(),
                pixels.width()
            )));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("{id}: pixel values must lie in [0,1]")));
        }
        if label > 1 {
            return Err(Error::InvalidArgument(format!("{id}: label {label} is not binary")));
        }
        if let Some(m) = &gt_mask {
            if m.shape() != (pixels.height(), pixels.width()) {
                return Err(Error::Shape(format!(
                    "{id}: mask {}x{} does not match image {}x{}",
                    m.height(),
                    m.width(),
                    pixels.height(),
                    pixels.width()
                )));
            }
        }
        Ok(Self {
            id,
            pixels,
            positive: label == 1,
            gt_mask,
            gt_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pixels(&self) -> &Tensor3 {
        &self.pixels
    }

    pub fn label(&self) -> u8 {
        self.positive as u8
    }

    pub fn is_positive(&self) -> bool {
        self.positive
    }

    pub fn size(&self) -> (usize, usize) {
        (self.pixels.height(), self.pixels.width())
    }

    /// Whether a ground-truth mask is attached. Does not count as a read.
    pub fn has_gt_mask(&self) -> bool {
        self.gt_mask.is_some()
    }

    /// Ground-truth mask access; recorded by the leakage audit.
    pub fn gt_mask(&self) -> Option<&Mask> {
        self.gt_reads.fetch_add(1, Ordering::SeqCst);
        self.gt_mask.as_ref()
    }

    /// Number of ground-truth reads made through this sample or its clones.
    pub fn gt_reads(&self) -> usize {
        self.gt_reads.load(Ordering::SeqCst)
    }

    pub fn reset_gt_reads(&self) {
        self.gt_reads.store(0, Ordering::SeqCst);
    }
}

/// Total ground-truth reads over a set of samples.
pub fn total_gt_reads(samples: &[ImageSample]) -> usize {
    samples.iter().map(ImageSample::gt_reads).sum()
}

/// Feature taps from one classifier forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    /// Penultimate block output, `K × H_m × W_m`, post-ReLU.
    pub features: Tensor3,
    /// 1×1-conv class map, `C × H_a × W_a`.
    pub class_map: Tensor3,
    /// Pre-sigmoid scores, the spatial mean of each class map channel.
    pub scores: Vec<f64>,
}

impl ActivationStack {
    /// Largest `|y_c − mean(A_c)|` over the channels.
    pub fn score_residual(&self) -> f64 {
        let n = self.class_map.plane_len() as f64;
        (0..self.class_map.channels())
            .map(|c| (self.scores[c] - self.class_map.plane(c).iter().sum::<f64>() / n).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Cam,
    Midlayer,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Cam => "cam",
            Source::Midlayer => "midlayer",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cam" => Ok(Source::Cam),
            "midlayer" | "mid" => Ok(Source::Midlayer),
            other => Err(Error::InvalidArgument(format!("unknown source '{other}' (expected cam|midlayer)"))),
        }
    }
}

/// Single-channel non-negative map.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub source: Source,
    pub sample_id: String,
}

impl SaliencyMap {
    /// Negative entries are clamped to zero.
    pub fn new(height: usize, width: usize, mut values: Vec<f64>, source: Source, sample_id: impl Into<String>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values cannot fill a {height}x{width} map", values.len())));
        }
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(Self {
            height,
            width,
            values,
            source,
            sample_id: sample_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= k);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub sample_id: String,
    pub mask: Mask,
    pub tau: f64,
    pub source: Source,
}

/// Which activation the equivariance regularizer compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegTap {
    ClassMap,
    Features,
}

/// How per-sample regularizer terms combine over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub tau: f64,
    /// Degrees; validated against {0, 90, 180, 270}.
    pub rotations: Vec<u32>,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub split_fractions: (f64, f64, f64),
    pub seed: u64,
    pub batch_size: usize,
    /// Stage-2 weight of the pseudo-mask term; `1 − beta` weights the
    /// self-estimate term.
    pub beta: f64,
    pub reg_tap: RegTap,
    pub reg_reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.6,
            tau: 0.55,
            rotations: ALLOWED_ROTATIONS.to_vec(),
            lr_stage1: 3e-5,
            lr_stage2: 5e-5,
            weight_decay: 1e-6,
            epochs_stage1: 50,
            epochs_stage2: 50,
            split_fractions: (0.6, 0.2, 0.2),
            seed: 0,
            batch_size: 16,
            beta: 1.0,
            reg_tap: RegTap::ClassMap,
            reg_reduction: Reduction::Mean,
        }
    }
}

/// Keys accepted in config files and as command-line overrides.
pub const CONFIG_KEYS: [&str; 14] = [
    "lambda_reg",
    "tau",
    "rotations",
    "lr_stage1",
    "lr_stage2",
    "weight_decay",
    "epochs_stage1",
    "epochs_stage2",
    "split_fractions",
    "seed",
    "batch_size",
    "beta",
    "reg_tap",
    "reg_reduction",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{}'", value.trim())))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl TrainConfig {
    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda_reg" => self.lambda_reg = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "rotations" => self.rotations = parse_list(key, value)?,
            "lr_stage1" => self.lr_stage1 = parse_num(key, value)?,
            "lr_stage2" => self.lr_stage2 = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "epochs_stage1" => self.epochs_stage1 = parse_num(key, value)?,
            "epochs_stage2" => self.epochs_stage2 = parse_num(key, value)?,
            "split_fractions" => {
                let v: Vec<f64> = parse_list(key, value)?;
                if v.len() != 3 {
                    return Err(Error::Config(format!("{key}: expected 3 values, got {}", v.len())));
                }
                self.split_fractions = (v[0], v[1], v[2]);
            }
            "seed" => self.seed = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "reg_tap" => {
                self.reg_tap = match value {
                    "class_map" => RegTap::ClassMap,
                    "features" => RegTap::Features,
                    other => return Err(Error::Config(format!("{key}: unknown tap '{other}' (class_map|features)"))),
                }
            }
            "reg_reduction" => {
                self.reg_reduction = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    other => return Err(Error::Config(format!("{key}: unknown reduction '{other}' (mean|sum)"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Renders the config in the same `key = value` format `parse` accepts.
    pub fn to_text(&self) -> String {
        let rotations: Vec<String> = self.rotations.iter().map(u32::to_string).collect();
        let (a, b, c) = self.split_fractions;
        let tap = match self.reg_tap {
            RegTap::ClassMap => "class_map",
            RegTap::Features => "features",
        };
        let red = match self.reg_reduction {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        };
        format!(
            "lambda_reg = {}\ntau = {}\nrotations = {}\nlr_stage1 = {}\nlr_stage2 = {}\nweight_decay = {}\n\
             epochs_stage1 = {}\nepochs_stage2 = {}\nsplit_fractions = {a}, {b}, {c}\nseed = {}\n\
             batch_size = {}\nbeta = {}\nreg_tap = {tap}\nreg_reduction = {red}\n",
            self.lambda_reg,
            self.tau,
            rotations.join(", "),
            self.lr_stage1,
            self.lr_stage2,
            self.weight_decay,
            self.epochs_stage1,
            self.epochs_stage2,
            self.seed,
            self.batch_size,
            self.beta,
        )
    }

    /// `Ok(())` when [`validate_config`] reports nothing.
    pub fn check(&self) -> Result<()> {
        let v = validate_config(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// Lists every violated invariant of `cfg`; empty when the config is valid.
pub fn validate_config(cfg: &TrainConfig) -> Vec<String> {
    let mut out = Vec::new();
    if !(cfg.lambda_reg >= 0.0 && cfg.lambda_reg.is_finite()) {
        out.push(format!("lambda_reg {} must be >= 0", cfg.lambda_reg));
    }
    if !(0.0..=1.0).contains(&cfg.tau) {
        out.push(format!("tau {} not in [0,1]", cfg.tau));
    }
    if cfg.rotations.is_empty() {
        out.push("rotations must not be empty".to_string());
    }
    for (i, r) in cfg.rotations.iter().enumerate() {
        if !ALLOWED_ROTATIONS.contains(r) {
            out.push(format!("rotation {r} not in {{0,90,180,270}}"));
        } else if cfg.rotations[..i].contains(r) {
            out.push(format!("rotation {r} listed twice"));
        }
    }
    for (name, lr) in [("lr_stage1", cfg.lr_stage1), ("lr_stage2", cfg.lr_stage2)] {
        if !(lr > 0.0 && lr.is_finite()) {
            out.push(format!("{name} {lr} must be > 0"));
        }
    }
    if !(cfg.weight_decay >= 0.0 && cfg.weight_decay.is_finite()) {
        out.push(format!("weight_decay {} must be >= 0", cfg.weight_decay));
    }
    if cfg.epochs_stage1 == 0 {
        out.push("epochs_stage1 must be > 0".to_string());
    }
    if cfg.epochs_stage2 == 0 {
        out.push("epochs_stage2 must be > 0".to_string());
    }
    let (a, b, c) = cfg.split_fractions;
    for (name, f) in [("train", a), ("val", b), ("test", c)] {
        if !(f > 0.0) {
            out.push(format!("{name} split fraction {f} must be > 0"));
        }
    }
    let sum = a + b + c;
    if (sum - 1.0).abs() > 1e-9 {
        out.push(format!("split fractions sum to {sum}"));
    }
    if cfg.batch_size == 0 {
        out.push("batch_size must be > 0".to_string());
    }
    if !(cfg.beta > 0.0 && cfg.beta <= 1.0) {
        out.push(format!("beta {} not in (0,1]", cfg.beta));
    }
    out
}
