//! Pixel-level evaluation, ablation tables and mask overlays.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ImageSample, PseudoMask};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor3};

/// Stage names in pipeline order.
pub const STAGE_MIDLAYER: &str = "Mid-level vis.";
pub const STAGE_MIDLAYER_REG: &str = "Mid-level vis.+reg. loss";
pub const STAGE_FULL: &str = "Mid-level vis.+reg. loss+segmentation network";
pub const STAGE_ORDER: [&str; 3] = [STAGE_MIDLAYER, STAGE_MIDLAYER_REG, STAGE_FULL];

pub const OVERLAY_ALPHA: f64 = 0.5;
pub const OVERLAY_TINT: [f64; 3] = [0.0, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    #[serde(rename = "method")]
    pub method_name: String,
    /// Percent.
    pub mean_iou: f64,
    #[serde(rename = "n")]
    pub n_samples: usize,
}

/// |pred ∧ gt| / |pred ∨ gt|, with two empty masks scoring 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Which test samples enter the average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Membership {
    #[default]
    PositivesOnly,
    All,
}

impl Membership {
    pub fn includes(self, sample: &ImageSample) -> bool {
        self == Membership::All || sample.is_positive()
    }
}

/// Mean IoU (percent) of `preds[i]` against `testset[i]`.
pub fn evaluate_masks(method: &str, preds: &[Mask], testset: &[ImageSample], membership: Membership) -> Result<EvalRow> {
    if preds.len() != testset.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", preds.len(), testset.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pred, sample) in preds.iter().zip(testset) {
        if !membership.includes(sample) {
            continue;
        }
        let value = match sample.gt_mask() {
            Some(gt) => iou(pred, gt)?,
            // Negatives without an annotation have no foreground.
            None if !sample.is_positive() => iou(pred, &Mask::zeros(pred.height(), pred.width()))?,
            None => return Err(Error::MissingGroundTruth(sample.id().to_string())),
        };
        sum += value;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no samples selected for evaluation".into()));
    }
    Ok(EvalRow {
        method_name: method.to_string(),
        mean_iou: 100.0 * sum / n as f64,
        n_samples: n,
    })
}

/// Matches pseudo-masks to samples by id before evaluating.
pub fn evaluate_pseudomasks(method: &str, masks: &[PseudoMask], testset: &[ImageSample], membership: Membership) -> Result<EvalRow> {
    let by_id: HashMap<&str, &Mask> = masks.iter().map(|m| (m.sample_id.as_str(), &m.mask)).collect();
    let preds = testset
        .iter()
        .map(|s| {
            by_id
                .get(s.id())
                .map(|m| (*m).clone())
                .ok_or_else(|| Error::InvalidArgument(format!("no prediction for sample {}", s.id())))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_masks(method, &preds, testset, membership)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub text: String,
    /// JSON array of `{method, mean_iou, n}` records.
    pub sidecar: String,
}

fn stage_rank(name: &str) -> usize {
    STAGE_ORDER.iter().position(|s| *s == name).unwrap_or(STAGE_ORDER.len())
}

/// Fixed-width table; rows naming a known stage are placed in pipeline
/// order, other rows follow in their given order.
pub fn ablation_table(rows: &[EvalRow]) -> Result<AblationTable> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to tabulate".into()));
    }
    let mut ordered: Vec<&EvalRow> = rows.iter().collect();
    ordered.sort_by_key(|r| stage_rank(&r.method_name));

    let name_w = ordered.iter().map(|r| r.method_name.len()).max().unwrap_or(0).max("Stage".len());
    let iou_w = 6;
    let n_w = ordered.iter().map(|r| r.n_samples.to_string().len()).max().unwrap_or(1).max(1);
    let rule = format!("+-{}-+-{}-+-{}-+\n", "-".repeat(name_w), "-".repeat(iou_w), "-".repeat(n_w));
    let mut text = String::new();
    text.push_str(&rule);
    let _ = writeln!(text, "| {:<name_w$} | {:>iou_w$} | {:>n_w$} |", "Stage", "IOU", "n");
    text.push_str(&rule);
    for r in &ordered {
        let _ = writeln!(text, "| {:<name_w$} | {:>iou_w$.2} | {:>n_w$} |", r.method_name, r.mean_iou, r.n_samples);
    }
    text.push_str(&rule);
    let records: Vec<EvalRow> = ordered.into_iter().cloned().collect();
    let sidecar = serde_json::to_string_pretty(&records).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(AblationTable { text, sidecar })
}

pub fn parse_sidecar(text: &str) -> Result<Vec<EvalRow>> {
    serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad eval sidecar: {e}")))
}

/// Blends a fixed tint into the masked pixels.
pub fn render_overlay(sample: &ImageSample, mask: &Mask) -> Result<Tensor3> {
    let px = sample.pixels();
    if mask.shape() != (px.height(), px.width()) {
        return Err(Error::Shape(format!("mask {:?} vs image {:?}", mask.shape(), (px.height(), px.width()))));
    }
    let mut out = px.clone();
    for (c, &tint) in OVERLAY_TINT.iter().enumerate() {
        let plane = out.plane_mut(c);
        for (v, &m) in plane.iter_mut().zip(mask.data()) {
            if m != 0 {
                *v = (1.0 - OVERLAY_ALPHA) * *v + OVERLAY_ALPHA * tint;
            }
        }
    }
    Ok(out)
}
