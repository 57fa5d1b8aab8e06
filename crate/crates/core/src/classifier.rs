//! Image-label classifier in rearranged-CAM form.
//!
//! backbone → penultimate block `B` → 1×1 conv → class map `A` → global
//! average pooling → score `y`. Because the head is applied before pooling,
//! `A` is the class activation map and `y_c = mean(A_c)` exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ActivationStack, ImageSample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{self, Activation, Conv, Pool};
use crate::tensor::Tensor3;

pub const CHECKPOINT_FORMAT: &str = "weakseg-classifier";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: (usize, usize),
    /// Output channels of each 3×3 conv block; the last entry is K.
    pub widths: Vec<usize>,
    /// The first `pooled_blocks` blocks end in 2×2 pooling.
    pub pooled_blocks: usize,
    pub pool: Pool,
    pub activation: Activation,
    pub classes: usize,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl Architecture {
    /// Four blocks, three of them pooled, K = 64, 64×64 input.
    pub fn small() -> Self {
        Self {
            input_size: (64, 64),
            widths: vec![8, 8, 8, 64],
            pooled_blocks: 3,
            pool: Pool::Avg,
            activation: Activation::Softplus,
            classes: 1,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }

    pub fn stride(&self) -> usize {
        1 << self.pooled_blocks
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_size.0 / self.stride(), self.input_size.1 / self.stride())
    }

    fn validate(&self) -> Result<()> {
        let s = self.stride();
        if self.widths.is_empty() || self.pooled_blocks > self.widths.len() || self.classes == 0 {
            return Err(Error::Checkpoint("inconsistent architecture".into()));
        }
        if !self.input_size.0.is_multiple_of(s) || !self.input_size.1.is_multiple_of(s) {
            return Err(Error::Checkpoint(format!(
                "input {:?} is not divisible by stride {s}",
                self.input_size
            )));
        }
        if self.channel_std.iter().any(|&v| v <= 0.0) {
            return Err(Error::Checkpoint("channel std must be positive".into()));
        }
        Ok(())
    }

    fn layout(&self) -> (Vec<Conv>, Conv, usize) {
        let mut offset = 0;
        let mut in_c = 3;
        let mut blocks = Vec::with_capacity(self.widths.len());
        for &w in &self.widths {
            let (conv, next) = Conv::at(offset, in_c, w, 3);
            blocks.push(conv);
            offset = next;
            in_c = w;
        }
        let (head, total) = Conv::at(offset, in_c, self.classes, 1);
        (blocks, head, total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    arch: Architecture,
    blocks: Vec<Conv>,
    head: Conv,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input of each block; `block_inputs[0]` is the standardized image.
    block_inputs: Vec<Tensor3>,
    /// Post-ReLU conv output of each block, before pooling.
    activations: Vec<Tensor3>,
    argmax: Vec<Vec<u32>>,
    pub stack: ActivationStack,
}

impl ForwardTrace {
    pub fn block_input(&self, block: usize) -> &Tensor3 {
        &self.block_inputs[block]
    }
}

/// Builds the default desk-scale backbone with seeded initialization.
pub fn default_small_backbone(seed: u64) -> ClassifierModel {
    ClassifierModel::new(Architecture::small(), seed).expect("small architecture is valid")
}

impl ClassifierModel {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (blocks, head, total) = arch.layout();
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &blocks {
            conv.init(&mut params, std::f64::consts::SQRT_2, &mut rng);
        }
        head.init(&mut params, 1.0, &mut rng);
        Ok(Self {
            arch,
            blocks,
            head,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.arch.input_size
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Index of the first block whose output depends on parameter `index`;
    /// `num_blocks()` for head parameters.
    pub fn block_of_param(&self, index: usize) -> usize {
        self.blocks
            .iter()
            .position(|c| c.param_range().contains(&index))
            .unwrap_or(self.blocks.len())
    }

    /// Head weights as `[k][c]` (K × C) and bias (C).
    pub fn head_weights(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let k = self.head.in_channels;
        let c = self.head.out_channels;
        let w = (0..k)
            .map(|ki| (0..c).map(|ci| self.params[self.head.weight_offset + ci * k + ki]).collect())
            .collect();
        let b = self.params[self.head.bias_offset..self.head.bias_offset + c].to_vec();
        (w, b)
    }

    pub fn set_head(&mut self, weights: &[Vec<f64>], bias: &[f64]) -> Result<()> {
        let k = self.head.in_channels;
        let c = self.head.out_channels;
        if weights.len() != k || weights.iter().any(|r| r.len() != c) || bias.len() != c {
            return Err(Error::Shape(format!("head expects {k}x{c} weights and {c} biases")));
        }
        for (ki, row) in weights.iter().enumerate() {
            for (ci, &v) in row.iter().enumerate() {
                self.params[self.head.weight_offset + ci * k + ki] = v;
            }
        }
        self.params[self.head.bias_offset..self.head.bias_offset + c].copy_from_slice(bias);
        Ok(())
    }

    fn check_input(&self, sample: &ImageSample) -> Result<()> {
        if sample.size() != self.arch.input_size {
            return Err(Error::Shape(format!(
                "{}: image {:?} does not match model input {:?}",
                sample.id(),
                sample.size(),
                self.arch.input_size
            )));
        }
        Ok(())
    }

    pub fn standardize(&self, pixels: &Tensor3) -> Tensor3 {
        let mut x = pixels.clone();
        for c in 0..3 {
            let (m, s) = (self.arch.channel_mean[c], self.arch.channel_std[c]);
            x.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        x
    }

    /// Applies the 1×1 head and global average pooling to features `B`.
    pub fn head_forward(&self, features: Tensor3) -> Result<ActivationStack> {
        if features.channels() != self.head.in_channels {
            return Err(Error::Shape(format!(
                "features have {} channels, head expects {}",
                features.channels(),
                self.head.in_channels
            )));
        }
        let class_map = self.head.forward(&self.params, &features);
        let n = class_map.plane_len() as f64;
        let scores = (0..class_map.channels())
            .map(|c| class_map.plane(c).iter().sum::<f64>() / n)
            .collect();
        Ok(ActivationStack {
            features,
            class_map,
            scores,
        })
    }

    /// Runs blocks `start..` on `x`, which must be the input of block `start`.
    pub fn trace_from(&self, start: usize, x: Tensor3, params: &[f64]) -> ForwardTrace {
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut activations = Vec::with_capacity(self.blocks.len());
        let mut argmax = Vec::with_capacity(self.blocks.len());
        let mut cur = x;
        for (b, conv) in self.blocks.iter().enumerate().skip(start) {
            let mut a = conv.forward(params, &cur);
            self.arch.activation.apply_in_place(&mut a);
            block_inputs.push(cur);
            cur = if b < self.arch.pooled_blocks {
                let (p, idx) = nn::pool2(self.arch.pool, &a);
                argmax.push(idx);
                activations.push(a);
                p
            } else {
                argmax.push(Vec::new());
                activations.push(a.clone());
                a
            };
        }
        let class_map = self.head.forward(params, &cur);
        let n = class_map.plane_len() as f64;
        let scores = (0..class_map.channels())
            .map(|c| class_map.plane(c).iter().sum::<f64>() / n)
            .collect();
        ForwardTrace {
            block_inputs,
            activations,
            argmax,
            stack: ActivationStack {
                features: cur,
                class_map,
                scores,
            },
        }
    }

    pub fn trace(&self, pixels: &Tensor3) -> ForwardTrace {
        self.trace_from(0, self.standardize(pixels), &self.params)
    }

    pub fn forward_one(&self, sample: &ImageSample) -> Result<ActivationStack> {
        self.check_input(sample)?;
        Ok(self.trace(sample.pixels()).stack)
    }

    pub fn forward(&self, batch: &[ImageSample]) -> Result<Vec<ActivationStack>> {
        self.forward_with(batch, Execution::default())
    }

    pub fn forward_with(&self, batch: &[ImageSample], exec: Execution) -> Result<Vec<ActivationStack>> {
        for s in batch {
            self.check_input(s)?;
        }
        Ok(exec.map(batch, |s| self.trace(s.pixels()).stack))
    }

    /// Backpropagates gradients w.r.t. the class map (and optionally the
    /// features) of a full trace, accumulating into `grads`.
    pub fn backward(&self, trace: &ForwardTrace, grad_class_map: &Tensor3, grad_features: Option<&Tensor3>, grads: &mut [f64]) {
        debug_assert_eq!(trace.block_inputs.len(), self.blocks.len(), "backward needs a full trace");
        let mut g = self
            .head
            .backward(&self.params, &trace.stack.features, grad_class_map, grads, true)
            .expect("input grad requested");
        if let Some(gf) = grad_features {
            nn::add_into(&mut g, gf);
        }
        for b in (0..self.blocks.len()).rev() {
            let act = &trace.activations[b];
            if b < self.arch.pooled_blocks {
                g = nn::pool2_backward(self.arch.pool, act.shape(), &trace.argmax[b], &g);
            }
            self.arch.activation.backward(act, &mut g);
            let need_input = b > 0;
            match self.blocks[b].backward(&self.params, &trace.block_inputs[b], &g, grads, need_input) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            architecture: &self.arch,
            params: &self.params,
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.architecture.validate()?;
        let (blocks, head, total) = ckpt.architecture.layout();
        if ckpt.params.len() != total {
            return Err(Error::Checkpoint(format!(
                "architecture needs {total} parameters, checkpoint has {}",
                ckpt.params.len()
            )));
        }
        Ok(Self {
            arch: ckpt.architecture,
            blocks,
            head,
            params: ckpt.params,
        })
    }

    /// Loads a checkpoint and requires its metadata to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &Architecture) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.arch != expected {
            return Err(Error::Checkpoint(format!(
                "{}: architecture {:?} does not match expected {:?}",
                path.display(),
                model.arch,
                expected
            )));
        }
        Ok(model)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    architecture: &'a Architecture,
    params: &'a [f64],
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    architecture: Architecture,
    params: Vec<f64>,
}

/// Scores computed by global-average-pooling `B` first and then applying
/// the head weights (the classical CAM ordering).
pub fn scores_pool_then_weight(model: &ClassifierModel, features: &Tensor3) -> Vec<f64> {
    let (w, b) = model.head_weights();
    let n = features.plane_len() as f64;
    let pooled: Vec<f64> = (0..features.channels())
        .map(|k| features.plane(k).iter().sum::<f64>() / n)
        .collect();
    (0..b.len())
        .map(|c| b[c] + pooled.iter().zip(&w).map(|(p, row)| p * row[c]).sum::<f64>())
        .collect()
}

/// Max over the batch and classes of the gap between pool-then-weight and
/// weight-then-pool scores.
pub fn cam_equivalence_check(model: &ClassifierModel, batch: &[ImageSample]) -> Result<f64> {
    let stacks = model.forward(batch)?;
    Ok(stacks
        .iter()
        .map(|s| {
            scores_pool_then_weight(model, &s.features)
                .iter()
                .zip(&s.scores)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max))
}
