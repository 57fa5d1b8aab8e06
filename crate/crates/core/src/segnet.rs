//! Second-stage pixel classifiers.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::ImageSample;
use crate::error::{Error, Result};
use crate::nn::{self, sigmoid, Conv, Pool};
use crate::tensor::{Mask, Tensor3};

pub const SEG_CHECKPOINT_FORMAT: &str = "weakseg-segnet";

/// A pixel classifier producing a foreground probability per pixel.
pub trait SegNetwork: Send + Sync {
    fn input_size(&self) -> (usize, usize);

    /// Probability map `1 × H × W` with values in [0, 1].
    fn predict(&self, sample: &ImageSample) -> Result<Tensor3>;

    fn predict_mask(&self, sample: &ImageSample) -> Result<Mask> {
        let p = self.predict(sample)?;
        Ok(Mask::from_fn(p.height(), p.width(), |i, j| p.get(0, i, j) >= 0.5))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegArchitecture {
    pub input_size: (usize, usize),
    /// Channels of the full-resolution stage; the half-resolution stage and
    /// the bottleneck use twice as many.
    pub base_width: usize,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl SegArchitecture {
    pub fn small() -> Self {
        Self {
            input_size: (64, 64),
            base_width: 8,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
        }
    }
}

/// Two-level encoder–decoder with skip connections.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    arch: SegArchitecture,
    enc1: Conv,
    enc2: Conv,
    bottleneck: Conv,
    dec2: Conv,
    dec1: Conv,
    head: Conv,
    params: Vec<f64>,
}

pub struct SegTrace {
    x0: Tensor3,
    a1: Tensor3,
    p1: Tensor3,
    arg1: Vec<u32>,
    a2: Tensor3,
    p2: Tensor3,
    arg2: Vec<u32>,
    a3: Tensor3,
    c2: Tensor3,
    a4: Tensor3,
    c1: Tensor3,
    a5: Tensor3,
    pub logits: Tensor3,
}

impl EncoderDecoder {
    pub fn new(arch: SegArchitecture, seed: u64) -> Result<Self> {
        let (h, w) = arch.input_size;
        if h % 4 != 0 || w % 4 != 0 || arch.base_width == 0 {
            return Err(Error::Checkpoint(format!("unsupported segmentation architecture {arch:?}")));
        }
        let b = arch.base_width;
        let (enc1, o) = Conv::at(0, 3, b, 3);
        let (enc2, o) = Conv::at(o, b, 2 * b, 3);
        let (bottleneck, o) = Conv::at(o, 2 * b, 2 * b, 3);
        let (dec2, o) = Conv::at(o, 4 * b, b, 3);
        let (dec1, o) = Conv::at(o, 2 * b, b, 3);
        let (head, total) = Conv::at(o, b, 1, 1);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in [&enc1, &enc2, &bottleneck, &dec2, &dec1] {
            c.init(&mut params, std::f64::consts::SQRT_2, &mut rng);
        }
        head.init(&mut params, 1.0, &mut rng);
        Ok(Self {
            arch,
            enc1,
            enc2,
            bottleneck,
            dec2,
            dec1,
            head,
            params,
        })
    }

    pub fn architecture(&self) -> &SegArchitecture {
        &self.arch
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

    fn standardize(&self, px: &Tensor3) -> Tensor3 {
        let mut x = px.clone();
        for c in 0..3 {
            let (m, s) = (self.arch.channel_mean[c], self.arch.channel_std[c]);
            x.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        x
    }

    fn check(&self, sample: &ImageSample) -> Result<()> {
        if sample.size() != self.arch.input_size {
            return Err(Error::Shape(format!(
                "{}: image {:?} does not match segmentation input {:?}",
                sample.id(),
                sample.size(),
                self.arch.input_size
            )));
        }
        Ok(())
    }

    pub fn trace(&self, pixels: &Tensor3) -> SegTrace {
        let p = &self.params;
        let x0 = self.standardize(pixels);
        let mut a1 = self.enc1.forward(p, &x0);
        nn::relu_in_place(&mut a1);
        let (p1, arg1) = nn::pool2(Pool::Max, &a1);
        let mut a2 = self.enc2.forward(p, &p1);
        nn::relu_in_place(&mut a2);
        let (p2, arg2) = nn::pool2(Pool::Max, &a2);
        let mut a3 = self.bottleneck.forward(p, &p2);
        nn::relu_in_place(&mut a3);
        let c2 = nn::concat(&nn::upsample2(&a3), &a2);
        let mut a4 = self.dec2.forward(p, &c2);
        nn::relu_in_place(&mut a4);
        let c1 = nn::concat(&nn::upsample2(&a4), &a1);
        let mut a5 = self.dec1.forward(p, &c1);
        nn::relu_in_place(&mut a5);
        let logits = self.head.forward(p, &a5);
        SegTrace {
            x0,
            a1,
            p1,
            arg1,
            a2,
            p2,
            arg2,
            a3,
            c2,
            a4,
            c1,
            a5,
            logits,
        }
    }

    pub fn logits(&self, sample: &ImageSample) -> Result<Tensor3> {
        self.check(sample)?;
        Ok(self.trace(sample.pixels()).logits)
    }

    /// Accumulates parameter gradients for a gradient on the logits.
    pub fn backward(&self, t: &SegTrace, grad_logits: &Tensor3, grads: &mut [f64]) {
        let p = &self.params;
        let b = self.arch.base_width;
        let mut g5 = self.head.backward(p, &t.a5, grad_logits, grads, true).expect("input grad");
        nn::relu_backward(&t.a5, &mut g5);
        let gc1 = self.dec1.backward(p, &t.c1, &g5, grads, true).expect("input grad");
        let (gu1, g_skip1) = nn::split_channels(&gc1, b);
        let mut g4 = nn::upsample2_backward(&gu1);
        nn::relu_backward(&t.a4, &mut g4);
        let gc2 = self.dec2.backward(p, &t.c2, &g4, grads, true).expect("input grad");
        let (gu2, g_skip2) = nn::split_channels(&gc2, 2 * b);
        let mut g3 = nn::upsample2_backward(&gu2);
        nn::relu_backward(&t.a3, &mut g3);
        let gp2 = self.bottleneck.backward(p, &t.p2, &g3, grads, true).expect("input grad");
        let mut g2 = nn::pool2_backward(Pool::Max, t.a2.shape(), &t.arg2, &gp2);
        nn::add_into(&mut g2, &g_skip2);
        nn::relu_backward(&t.a2, &mut g2);
        let gp1 = self.enc2.backward(p, &t.p1, &g2, grads, true).expect("input grad");
        let mut g1 = nn::pool2_backward(Pool::Max, t.a1.shape(), &t.arg1, &gp1);
        nn::add_into(&mut g1, &g_skip1);
        nn::relu_backward(&t.a1, &mut g1);
        self.enc1.backward(p, &t.x0, &g1, grads, false);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = SegCheckpointRef {
            format: SEG_CHECKPOINT_FORMAT,
            version: 1,
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
        let ckpt: SegCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != SEG_CHECKPOINT_FORMAT || ckpt.version != 1 {
            return Err(Error::Checkpoint(format!("{}: not a segmentation checkpoint", path.display())));
        }
        let mut model = Self::new(ckpt.architecture, 0)?;
        if model.params.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture needs {} parameters, checkpoint has {}",
                model.params.len(),
                ckpt.params.len()
            )));
        }
        model.params = ckpt.params;
        Ok(model)
    }
}

impl SegNetwork for EncoderDecoder {
    fn input_size(&self) -> (usize, usize) {
        self.arch.input_size
    }

    fn predict(&self, sample: &ImageSample) -> Result<Tensor3> {
        let mut l = self.logits(sample)?;
        l.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(l)
    }
}

#[derive(Serialize)]
struct SegCheckpointRef<'a> {
    format: &'a str,
    version: u32,
    architecture: &'a SegArchitecture,
    params: &'a [f64],
}

#[derive(Deserialize)]
struct SegCheckpoint {
    format: String,
    version: u32,
    architecture: SegArchitecture,
    params: Vec<f64>,
}
