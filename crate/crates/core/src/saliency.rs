//! Saliency maps from activation stacks and their τ·max binarization.

use crate::datamodel::{ActivationStack, PseudoMask, SaliencyMap, Source};
use crate::error::{Error, Result};
use crate::tensor::Mask;

/// Class activation map: channel `class_index` of `A`, negatives clamped.
pub fn cam_map(stack: &ActivationStack, class_index: usize, sample_id: &str) -> Result<SaliencyMap> {
    let a = &stack.class_map;
    if class_index >= a.channels() {
        return Err(Error::InvalidArgument(format!(
            "class index {class_index} out of range for {} classes",
            a.channels()
        )));
    }
    SaliencyMap::new(a.height(), a.width(), a.plane(class_index).to_vec(), Source::Cam, sample_id)
}

/// Channel mean of the penultimate features `B`.
pub fn midlayer_map(stack: &ActivationStack, sample_id: &str) -> Result<SaliencyMap> {
    let b = &stack.features;
    let k = b.channels();
    if k == 0 {
        return Err(Error::InvalidArgument("features have no channels".into()));
    }
    let mut acc = vec![0.0; b.plane_len()];
    for c in 0..k {
        for (a, v) in acc.iter_mut().zip(b.plane(c)) {
            *a += v;
        }
    }
    let inv = 1.0 / k as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    SaliencyMap::new(b.height(), b.width(), acc, Source::Midlayer, sample_id)
}

pub fn saliency(stack: &ActivationStack, source: Source, sample_id: &str) -> Result<SaliencyMap> {
    match source {
        Source::Cam => cam_map(stack, 0, sample_id),
        Source::Midlayer => midlayer_map(stack, sample_id),
    }
}

/// Source coordinate of output index `i` under corner-aligned resampling.
#[inline]
fn aligned(i: usize, from: usize, to: usize) -> f64 {
    if to <= 1 || from <= 1 {
        0.0
    } else {
        i as f64 * (from - 1) as f64 / (to - 1) as f64
    }
}

/// Bilinear, corner-aligned upsampling to `target = (height, width)`.
pub fn upsample(map: &SaliencyMap, target: (usize, usize)) -> Result<SaliencyMap> {
    let (h, w) = map.shape();
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::InvalidArgument(format!(
            "target {th}x{tw} is smaller than source {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let y = aligned(i, h, th);
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for j in 0..tw {
            let x = aligned(j, w, tw);
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    SaliencyMap::new(th, tw, out, map.source, map.sample_id.clone())
}

/// Pixels with value ≥ τ·max become 1; an all-zero map gives an empty mask.
pub fn binarize(map: &SaliencyMap, tau: f64) -> Result<PseudoMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} not in [0,1]")));
    }
    let max = map.max();
    let (h, w) = map.shape();
    let mask = if max > 0.0 {
        let threshold = tau * max;
        Mask::from_fn(h, w, |i, j| map.get(i, j) >= threshold)
    } else {
        Mask::zeros(h, w)
    };
    Ok(PseudoMask {
        sample_id: map.sample_id.clone(),
        mask,
        tau,
        source: map.source,
    })
}
