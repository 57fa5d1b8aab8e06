//! Two-stage training: image-label classifier, then pseudo-mask supervised
//! segmentation.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{Architecture, ClassifierModel};
use crate::datamodel::{validate_config, ImageSample, PseudoMask, Source, TrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::{iou, Membership};
use crate::exec::Execution;
use crate::losses::{loss_and_grad, LossReport, Objective};
use crate::nn::{bce_with_logit, sigmoid};
use crate::optim::Adam;
use crate::saliency;
use crate::segnet::{EncoderDecoder, SegArchitecture, SegNetwork};
use crate::tensor::{Mask, Tensor3};

pub const CLASSIFIER_CHECKPOINT: &str = "classifier.json";
pub const SEGNET_CHECKPOINT: &str = "segnet.json";
pub const TRAIN_LOG: &str = "train.log";

/// `<run_dir>/stage1/`, `<run_dir>/masks/<source>/`, `<run_dir>/stage2/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }

    pub fn stage2(&self) -> PathBuf {
        self.root.join("stage2")
    }

    pub fn masks(&self, source: Source) -> PathBuf {
        self.root.join("masks").join(source.as_str())
    }

    pub fn classifier_checkpoint(&self) -> PathBuf {
        self.stage1().join(CLASSIFIER_CHECKPOINT)
    }

    pub fn segnet_checkpoint(&self) -> PathBuf {
        self.stage2().join(SEGNET_CHECKPOINT)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageLoss {
    Classifier(LossReport),
    Pixel(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub epochs_run: usize,
    /// `None` when no epoch ran.
    pub final_losses: Option<StageLoss>,
    pub checkpoint_path: Option<PathBuf>,
    pub wall_time_s: f64,
    /// The training log, one line per epoch.
    pub log: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub exec: Execution,
    /// When set, checkpoint and log are written under the stage directory.
    pub run_dir: Option<PathBuf>,
}

/// Config validation for training entry points; zero epochs are allowed
/// here and mean "return the initialization".
fn check_training_config(cfg: &TrainConfig) -> Result<()> {
    let v: Vec<String> = validate_config(cfg)
        .into_iter()
        .filter(|m| !m.starts_with("epochs_stage"))
        .collect();
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v.join("; ")))
    }
}

fn epoch_order(n: usize, seed: u64, stream: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(epoch as u128 * 1024);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn prepare_stage_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log = dir.join(TRAIN_LOG);
    if log.exists() {
        std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    Ok(log)
}

fn common_square_size(samples: &[ImageSample]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("training set is empty".into()))?
        .size();
    if let Some(s) = samples.iter().find(|s| s.size() != first) {
        return Err(Error::Shape(format!("{}: image {:?} differs from {:?}", s.id(), s.size(), first)));
    }
    if first.0 != first.1 {
        return Err(Error::Shape(format!("images must be square for rotation, got {first:?}")));
    }
    Ok(first.0)
}

/// The classifier stage-1 trains for images of `size × size`.
pub fn stage1_architecture(size: usize) -> Architecture {
    Architecture {
        input_size: (size, size),
        ..Architecture::small()
    }
}

/// Adam on `L_ce + λ·L_reg` over the training split.
pub fn train_stage1(train: &[ImageSample], cfg: &TrainConfig, opts: &TrainOptions) -> Result<(ClassifierModel, StageReport)> {
    let start = Instant::now();
    check_training_config(cfg)?;
    let size = common_square_size(train)?;
    let positives = train.iter().filter(|s| s.is_positive()).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::Dataset(format!(
            "training set needs both labels ({positives} positive of {})",
            train.len()
        )));
    }
    let objective = Objective::from_config(cfg)?;
    let mut model = ClassifierModel::new(stage1_architecture(size), cfg.seed)?;
    let mut opt = Adam::new(model.num_params(), cfg.lr_stage1, cfg.weight_decay);

    let log_path = match &opts.run_dir {
        Some(dir) => Some(prepare_stage_dir(&dir.join("stage1"))?),
        None => None,
    };
    let mut log = Vec::new();
    let mut last = None;
    for epoch in 0..cfg.epochs_stage1 {
        let order = epoch_order(train.len(), cfg.seed, 1, epoch);
        let (mut ce, mut reg) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ImageSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (report, grads) = loss_and_grad(&model, &batch, &objective, opts.exec)?;
            ce += report.l_ce * batch.len() as f64;
            reg += report.l_reg * batch.len() as f64;
            opt.update(model.params_mut(), &grads);
        }
        let n = train.len() as f64;
        let report = LossReport::new(ce / n, reg / n, cfg.lambda_reg);
        let line = report.log_line(epoch + 1);
        if let Some(p) = &log_path {
            append_log(p, &line)?;
        }
        log.push(line);
        last = Some(StageLoss::Classifier(report));
    }

    let checkpoint_path = match &opts.run_dir {
        Some(dir) => {
            let p = RunLayout::new(dir).classifier_checkpoint();
            model.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok((
        model,
        StageReport {
            epochs_run: cfg.epochs_stage1,
            final_losses: last,
            checkpoint_path,
            wall_time_s: start.elapsed().as_secs_f64(),
            log,
        },
    ))
}

/// Saliency for one sample, upsampled to image resolution.
pub fn image_saliency(model: &ClassifierModel, sample: &ImageSample, source: Source) -> Result<crate::datamodel::SaliencyMap> {
    let stack = model.forward_one(sample)?;
    let map = saliency::saliency(&stack, source, sample.id())?;
    saliency::upsample(&map, sample.size())
}

/// Pseudo-masks for every sample; negatives get empty masks.
pub fn generate_pseudomasks(model: &ClassifierModel, samples: &[ImageSample], source: Source, tau: f64) -> Result<Vec<PseudoMask>> {
    generate_pseudomasks_with(model, samples, source, tau, Execution::default())
}

pub fn generate_pseudomasks_with(model: &ClassifierModel, samples: &[ImageSample], source: Source, tau: f64, exec: Execution) -> Result<Vec<PseudoMask>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} not in [0,1]")));
    }
    exec.map(samples, |s| {
        if !s.is_positive() {
            let (h, w) = s.size();
            return Ok(PseudoMask {
                sample_id: s.id().to_string(),
                mask: Mask::zeros(h, w),
                tau,
                source,
            });
        }
        let map = image_saliency(model, s, source)?;
        saliency::binarize(&map, tau)
    })
    .into_iter()
    .collect()
}

/// Per-pixel stage-2 loss and its gradient w.r.t. the logits:
/// `β·CE(p, pseudo) + (1−β)·CE(p, [p ≥ 0.5])`, averaged over pixels and
/// scaled by `weight`. The self-estimate target carries no gradient.
pub fn pixel_loss(logits: &Tensor3, target: &Mask, beta: f64, weight: f64) -> (f64, Tensor3) {
    let n = logits.data().len() as f64;
    let mut grad = Tensor3::zeros(logits.channels(), logits.height(), logits.width());
    let mut loss = 0.0;
    for ((g, &l), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(target.data()) {
        let p = sigmoid(l);
        let t = t as f64;
        let own = if p >= 0.5 { 1.0 } else { 0.0 };
        loss += beta * bce_with_logit(l, t);
        let mut d = beta * (p - t);
        if beta < 1.0 {
            loss += (1.0 - beta) * bce_with_logit(l, own);
            d += (1.0 - beta) * (p - own);
        }
        *g = weight * d / n;
    }
    (loss / n, grad)
}

/// Trains the default encoder–decoder on pseudo-masks of the training split.
pub fn train_stage2(masks: &[PseudoMask], train: &[ImageSample], cfg: &TrainConfig, opts: &TrainOptions) -> Result<(EncoderDecoder, StageReport)> {
    let start = Instant::now();
    check_training_config(cfg)?;
    if masks.len() != train.len() {
        return Err(Error::InvalidArgument(format!(
            "{} masks for {} training samples",
            masks.len(),
            train.len()
        )));
    }
    let by_id: HashMap<&str, &Mask> = masks.iter().map(|m| (m.sample_id.as_str(), &m.mask)).collect();
    let mut missing = Vec::new();
    let mut targets = Vec::with_capacity(train.len());
    for s in train {
        match by_id.get(s.id()) {
            Some(m) if m.shape() == s.size() => targets.push((*m).clone()),
            Some(m) => {
                return Err(Error::Shape(format!("{}: mask {:?} vs image {:?}", s.id(), m.shape(), s.size())))
            }
            None => missing.push(s.id().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("missing masks for: {}", missing.join(", "))));
    }
    let size = common_square_size(train)?;
    let arch = SegArchitecture {
        input_size: (size, size),
        ..SegArchitecture::small()
    };
    let mut net = EncoderDecoder::new(arch, cfg.seed.wrapping_add(1))?;
    let mut opt = Adam::new(net.num_params(), cfg.lr_stage2, cfg.weight_decay);
    let log_path = match &opts.run_dir {
        Some(dir) => Some(prepare_stage_dir(&dir.join("stage2"))?),
        None => None,
    };
    let mut log = Vec::new();
    let mut last = None;
    for epoch in 0..cfg.epochs_stage2 {
        let order = epoch_order(train.len(), cfg.seed, 2, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let weight = 1.0 / chunk.len() as f64;
            let per: Vec<(f64, Vec<f64>)> = opts.exec.map(chunk, |&i| {
                let trace = net.trace(train[i].pixels());
                let (loss, g) = pixel_loss(&trace.logits, &targets[i], cfg.beta, weight);
                let mut grads = vec![0.0; net.num_params()];
                net.backward(&trace, &g, &mut grads);
                (loss, grads)
            });
            let mut grads = vec![0.0; net.num_params()];
            for (loss, g) in per {
                total += loss;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b;
                }
            }
            opt.update(net.params_mut(), &grads);
        }
        let mean = total / train.len() as f64;
        let line = format!("{}\t{:e}", epoch + 1, mean);
        if let Some(p) = &log_path {
            append_log(p, &line)?;
        }
        log.push(line);
        last = Some(StageLoss::Pixel(mean));
    }
    let checkpoint_path = match &opts.run_dir {
        Some(dir) => {
            let p = RunLayout::new(dir).segnet_checkpoint();
            net.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok((
        net,
        StageReport {
            epochs_run: cfg.epochs_stage2,
            final_losses: last,
            checkpoint_path,
            wall_time_s: start.elapsed().as_secs_f64(),
            log,
        },
    ))
}

/// 0.05, 0.10, …, 0.95.
pub fn default_tau_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// Evaluates every τ in `grid` on the (positive) validation samples and
/// returns the best τ and its mean IoU in [0, 1]; ties go to the smaller τ.
pub fn calibrate_tau(model: &ClassifierModel, valset: &[ImageSample], source: Source, grid: &[f64]) -> Result<(f64, f64)> {
    let sweep = tau_sweep(model, valset, source, grid)?;
    let mut best = sweep[0];
    for &(tau, score) in &sweep[1..] {
        if score > best.1 || (score == best.1 && tau < best.0) {
            best = (tau, score);
        }
    }
    Ok(best)
}

/// Mean IoU at every grid point, in grid order.
pub fn tau_sweep(model: &ClassifierModel, valset: &[ImageSample], source: Source, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("tau grid is empty".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("tau {t} not in [0,1]")));
    }
    let members: Vec<&ImageSample> = valset.iter().filter(|s| Membership::PositivesOnly.includes(s)).collect();
    if members.is_empty() {
        return Err(Error::MissingGroundTruth("validation set has no positive samples".into()));
    }
    if let Some(s) = members.iter().find(|s| !s.has_gt_mask()) {
        return Err(Error::MissingGroundTruth(s.id().to_string()));
    }
    let prepared: Vec<Result<(crate::datamodel::SaliencyMap, Mask)>> = Execution::default().map(&members, |s| {
        let map = image_saliency(model, s, source)?;
        Ok((map, s.gt_mask().expect("checked above").clone()))
    });
    let prepared: Vec<_> = prepared.into_iter().collect::<Result<_>>()?;
    grid.iter()
        .map(|&tau| {
            let mut sum = 0.0;
            for (map, gt) in &prepared {
                sum += iou(&saliency::binarize(map, tau)?.mask, gt)?;
            }
            Ok((tau, sum / prepared.len() as f64))
        })
        .collect()
}

/// Stage-2 predictions binarized at 0.5.
pub fn predict_masks(net: &dyn SegNetwork, samples: &[ImageSample]) -> Result<Vec<Mask>> {
    samples.iter().map(|s| net.predict_mask(s)).collect()
}

/// Image-label accuracy with the sigmoid threshold at 0.5 (logit 0).
pub fn classification_accuracy(model: &ClassifierModel, samples: &[ImageSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let stacks = model.forward(samples)?;
    let correct = stacks
        .iter()
        .zip(samples)
        .filter(|(st, s)| (st.scores[0] >= 0.0) == s.is_positive())
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_loss_beta_one_is_plain_ce() {
        let logits = Tensor3::from_vec(1, 1, 3, vec![0.0, 2.0, -1.0]).unwrap();
        let target = Mask::from_vec(1, 3, vec![1, 0, 0]).unwrap();
        let (loss, grad) = pixel_loss(&logits, &target, 1.0, 1.0);
        let expected = (bce_with_logit(0.0, 1.0) + bce_with_logit(2.0, 0.0) + bce_with_logit(-1.0, 0.0)) / 3.0;
        assert!((loss - expected).abs() < 1e-15);
        assert!((grad.data()[0] - (0.5 - 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pixel_loss_self_term_uses_own_prediction() {
        let logits = Tensor3::from_vec(1, 1, 2, vec![3.0, -3.0]).unwrap();
        let target = Mask::from_vec(1, 2, vec![0, 1]).unwrap();
        let (loss, _) = pixel_loss(&logits, &target, 0.5, 1.0);
        let ce_pseudo = (bce_with_logit(3.0, 0.0) + bce_with_logit(-3.0, 1.0)) / 2.0;
        let ce_self = (bce_with_logit(3.0, 1.0) + bce_with_logit(-3.0, 0.0)) / 2.0;
        assert!((loss - (0.5 * ce_pseudo + 0.5 * ce_self)).abs() < 1e-12);
    }

    #[test]
    fn epoch_orders_are_seeded_permutations() {
        let a = epoch_order(20, 3, 1, 0);
        assert_eq!(a, epoch_order(20, 3, 1, 0));
        assert_ne!(a, epoch_order(20, 3, 1, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn tau_grid() {
        let g = default_tau_grid();
        assert_eq!(g.len(), 19);
        assert!((g[8] - 0.45).abs() < 1e-12 && (g[10] - 0.55).abs() < 1e-12);
    }
}
