//! Training objectives: label cross-entropy, the rotation-equivariance
//! regularizer and their weighted sum, with analytic gradients and a
//! finite-difference checker.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, ForwardTrace};
use crate::datamodel::{ImageSample, Reduction, RegTap, TrainConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{bce_with_logit, sigmoid};
use crate::tensor::{Mask, Tensor3};

/// Clockwise rotation by a multiple of 90 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RotationOp {
    degrees: u32,
}

impl RotationOp {
    pub const IDENTITY: RotationOp = RotationOp { degrees: 0 };
    pub const ALL: [RotationOp; 4] = [
        RotationOp { degrees: 0 },
        RotationOp { degrees: 90 },
        RotationOp { degrees: 180 },
        RotationOp { degrees: 270 },
    ];

    pub fn new(degrees: u32) -> Result<Self> {
        match degrees {
            0 | 90 | 180 | 270 => Ok(Self { degrees }),
            d => Err(Error::InvalidArgument(format!("rotation {d} not in {{0,90,180,270}}"))),
        }
    }

    pub fn degrees(self) -> u32 {
        self.degrees
    }

    pub fn inverse(self) -> Self {
        Self {
            degrees: (360 - self.degrees) % 360,
        }
    }

    pub fn then(self, other: RotationOp) -> Self {
        Self {
            degrees: (self.degrees + other.degrees) % 360,
        }
    }

    /// Source index in an `n × n` plane for output position `(i, j)`.
    #[inline]
    fn source(self, n: usize, i: usize, j: usize) -> (usize, usize) {
        match self.degrees {
            0 => (i, j),
            90 => (n - 1 - j, i),
            180 => (n - 1 - i, n - 1 - j),
            _ => (j, n - 1 - i),
        }
    }

    /// Rotates an `n × n` row-major plane.
    pub fn apply_plane<T: Copy>(self, plane: &[T], n: usize) -> Vec<T> {
        debug_assert_eq!(plane.len(), n * n);
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = self.source(n, i, j);
                out.push(plane[si * n + sj]);
            }
        }
        out
    }

    pub fn apply(self, x: &Tensor3) -> Result<Tensor3> {
        let (c, h, w) = x.shape();
        if h != w {
            return Err(Error::Shape(format!("cannot rotate a non-square {h}x{w} raster")));
        }
        if self.degrees == 0 {
            return Ok(x.clone());
        }
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            data.extend(self.apply_plane(x.plane(ch), h));
        }
        Tensor3::from_vec(c, h, w, data)
    }

    pub fn apply_mask(self, m: &Mask) -> Result<Mask> {
        if m.height() != m.width() {
            return Err(Error::Shape(format!("cannot rotate a non-square {}x{} mask", m.height(), m.width())));
        }
        Mask::from_vec(m.height(), m.width(), self.apply_plane(m.data(), m.height()))
    }
}

impl fmt::Display for RotationOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.degrees)
    }
}

impl FromStr for RotationOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let d: u32 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad rotation '{s}'")))?;
        Self::new(d)
    }
}

pub fn rotations_from_degrees(degrees: &[u32]) -> Result<Vec<RotationOp>> {
    degrees.iter().map(|&d| RotationOp::new(d)).collect()
}

/// Loss values of one evaluation; `total = l_ce + lambda_reg · l_reg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lambda_reg: f64,
}

impl LossReport {
    pub fn new(l_ce: f64, l_reg: f64, lambda_reg: f64) -> Self {
        Self {
            l_ce,
            l_reg,
            total: l_ce + lambda_reg * l_reg,
            lambda_reg,
        }
    }

    /// Training-log record: `epoch l_ce l_reg total lambda`, tab separated.
    pub fn log_line(&self, epoch: usize) -> String {
        format!(
            "{epoch}\t{:e}\t{:e}\t{:e}\t{:e}",
            self.l_ce, self.l_reg, self.total, self.lambda_reg
        )
    }

    pub fn parse_log_line(line: &str) -> Result<(usize, Self)> {
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::InvalidArgument(format!("expected 5 log fields, got {}", fields.len())));
        }
        let bad = |f: &str| Error::InvalidArgument(format!("bad log field '{f}'"));
        let epoch = fields[0].parse().map_err(|_| bad(fields[0]))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| bad(f))?;
        }
        Ok((
            epoch,
            Self {
                l_ce: v[0],
                l_reg: v[1],
                total: v[2],
                lambda_reg: v[3],
            },
        ))
    }
}

/// Mean sigmoid cross-entropy of logits against binary labels.
pub fn label_ce_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| bce_with_logit(s, l as f64))
        .sum();
    Ok(sum / scores.len() as f64)
}

/// `Σ_α ‖f(x) − T_α⁻¹ f(T_α x)‖_F` for an arbitrary map `f`.
pub fn equivariance_residual<F>(map: F, x: &Tensor3, rotations: &[RotationOp]) -> Result<f64>
where
    F: Fn(&Tensor3) -> Result<Tensor3>,
{
    let base = map(x)?;
    let mut total = 0.0;
    for &r in rotations {
        if r == RotationOp::IDENTITY {
            continue;
        }
        let rotated = map(&r.apply(x)?)?;
        let back = r.inverse().apply(&rotated)?;
        total += base.frobenius_distance(&back);
    }
    Ok(total)
}

/// Objective settings shared by evaluation, training and gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub lambda_reg: f64,
    pub rotations: Vec<RotationOp>,
    pub tap: RegTap,
    pub reduction: Reduction,
}

impl Objective {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            lambda_reg: cfg.lambda_reg,
            rotations: rotations_from_degrees(&cfg.rotations)?,
            tap: cfg.reg_tap,
            reduction: cfg.reg_reduction,
        })
    }

    pub fn new(lambda_reg: f64, rotations: Vec<RotationOp>) -> Self {
        Self {
            lambda_reg,
            rotations,
            tap: RegTap::ClassMap,
            reduction: Reduction::Mean,
        }
    }

    fn reduce(&self, per_sample_sum: f64, n: usize) -> f64 {
        match self.reduction {
            Reduction::Mean => per_sample_sum / n as f64,
            Reduction::Sum => per_sample_sum,
        }
    }
}

fn tapped(trace: &ForwardTrace, tap: RegTap) -> &Tensor3 {
    match tap {
        RegTap::ClassMap => &trace.stack.class_map,
        RegTap::Features => &trace.stack.features,
    }
}

fn check_square(model: &ClassifierModel) -> Result<()> {
    let (h, w) = model.architecture().feature_size();
    if h != w {
        return Err(Error::Shape(format!("feature map {h}x{w} is not square")));
    }
    Ok(())
}

/// Regularizer on the class maps with batch-mean reduction.
pub fn equivariance_loss(model: &ClassifierModel, batch: &[ImageSample], rotations: &[RotationOp]) -> Result<f64> {
    equivariance_loss_with(model, batch, &Objective::new(0.0, rotations.to_vec()))
}

pub fn equivariance_loss_with(model: &ClassifierModel, batch: &[ImageSample], objective: &Objective) -> Result<f64> {
    if objective.rotations.is_empty() {
        return Err(Error::InvalidArgument("rotation set is empty".into()));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_square(model)?;
    let tap = objective.tap;
    let per: Vec<Result<f64>> = Execution::default().map(batch, |s| {
        if s.size() != model.input_size() {
            return Err(Error::Shape(format!("{}: wrong input size", s.id())));
        }
        equivariance_residual(|x| Ok(tapped(&model.trace(x), tap).clone()), s.pixels(), &objective.rotations)
    });
    let sum = per.into_iter().sum::<Result<f64>>()?;
    Ok(objective.reduce(sum, batch.len()))
}

/// Per-sample loss terms and, optionally, the gradient contribution.
struct SampleTerms {
    ce: f64,
    reg: f64,
    grads: Option<Vec<f64>>,
}

fn sample_terms(model: &ClassifierModel, sample: &ImageSample, objective: &Objective, ce_weight: f64, reg_weight: f64, want_grad: bool) -> Result<SampleTerms> {
    let x = sample.pixels();
    let base = model.trace(x);
    let logit = base.stack.scores[0];
    let target = sample.label() as f64;
    let ce = bce_with_logit(logit, target);

    let base_tap = tapped(&base, objective.tap).clone();
    let mut grad_base_tap = Tensor3::zeros(base_tap.channels(), base_tap.height(), base_tap.width());
    let mut grads = want_grad.then(|| vec![0.0; model.num_params()]);
    let mut reg = 0.0;

    for &r in &objective.rotations {
        if r == RotationOp::IDENTITY {
            continue;
        }
        let trace = model.trace(&r.apply(x)?);
        let back = r.inverse().apply(tapped(&trace, objective.tap))?;
        let mut diff = base_tap.clone();
        for (d, b) in diff.data_mut().iter_mut().zip(back.data()) {
            *d -= b;
        }
        let norm = diff.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        reg += norm;
        if let Some(g) = grads.as_mut() {
            if norm > 0.0 {
                // d‖D‖/dD = D/‖D‖; the rotated branch sees −T_α(D/‖D‖).
                let unit = diff.scaled(reg_weight / norm);
                for (gb, u) in grad_base_tap.data_mut().iter_mut().zip(unit.data()) {
                    *gb += u;
                }
                let g_rot = r.apply(&unit.scaled(-1.0))?;
                backprop_tap(model, &trace, objective.tap, &g_rot, None, g);
            }
        }
    }

    if let Some(g) = grads.as_mut() {
        let a = &base.stack.class_map;
        let dlogit = ce_weight * (sigmoid(logit) - target) / a.plane_len() as f64;
        let grad_scores = Tensor3::filled(a.channels(), a.height(), a.width(), dlogit);
        backprop_tap(model, &base, objective.tap, &grad_base_tap, Some(grad_scores), g);
    }
    Ok(SampleTerms { ce, reg, grads })
}

fn backprop_tap(model: &ClassifierModel, trace: &ForwardTrace, tap: RegTap, grad_tap: &Tensor3, grad_class_map: Option<Tensor3>, grads: &mut [f64]) {
    let a = &trace.stack.class_map;
    match tap {
        RegTap::ClassMap => {
            let mut g = grad_class_map.unwrap_or_else(|| Tensor3::zeros(a.channels(), a.height(), a.width()));
            for (gv, t) in g.data_mut().iter_mut().zip(grad_tap.data()) {
                *gv += t;
            }
            model.backward(trace, &g, None, grads);
        }
        RegTap::Features => {
            let g = grad_class_map.unwrap_or_else(|| Tensor3::zeros(a.channels(), a.height(), a.width()));
            model.backward(trace, &g, Some(grad_tap), grads);
        }
    }
}

/// Loss report and summed gradient of `L = L_ce + λ·L_reg` over a batch.
pub fn loss_and_grad(model: &ClassifierModel, batch: &[ImageSample], objective: &Objective, exec: Execution) -> Result<(LossReport, Vec<f64>)> {
    let (report, grads) = evaluate(model, batch, objective, exec, true)?;
    Ok((report, grads.expect("gradient requested")))
}

fn evaluate(model: &ClassifierModel, batch: &[ImageSample], objective: &Objective, exec: Execution, want_grad: bool) -> Result<(LossReport, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if objective.rotations.is_empty() {
        return Err(Error::InvalidArgument("rotation set is empty".into()));
    }
    check_square(model)?;
    for s in batch {
        if s.size() != model.input_size() {
            return Err(Error::Shape(format!("{}: image {:?} does not match model input {:?}", s.id(), s.size(), model.input_size())));
        }
    }
    let n = batch.len();
    let ce_weight = 1.0 / n as f64;
    let reg_weight = objective.lambda_reg * objective.reduce(1.0, n);
    let terms: Vec<Result<SampleTerms>> = exec.map(batch, |s| sample_terms(model, s, objective, ce_weight, reg_weight, want_grad));
    let mut ce = 0.0;
    let mut reg = 0.0;
    let mut grads = want_grad.then(|| vec![0.0; model.num_params()]);
    for t in terms {
        let t = t?;
        ce += t.ce;
        reg += t.reg;
        if let (Some(acc), Some(g)) = (grads.as_mut(), t.grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let report = LossReport::new(ce / n as f64, objective.reduce(reg, n), objective.lambda_reg);
    Ok((report, grads))
}

/// Joint loss on shared forward passes.
pub fn total_loss(model: &ClassifierModel, batch: &[ImageSample], cfg: &TrainConfig) -> Result<LossReport> {
    cfg.check()?;
    let objective = Objective::from_config(cfg)?;
    total_loss_with(model, batch, &objective)
}

pub fn total_loss_with(model: &ClassifierModel, batch: &[ImageSample], objective: &Objective) -> Result<LossReport> {
    Ok(evaluate(model, batch, objective, Execution::default(), false)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter indices that were checked, in order.
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference check of `L_ce + λ·L_reg` on one sample over every
/// model parameter.
pub fn gradcheck_equivariance(model: &ClassifierModel, sample: &ImageSample, rotations: &[RotationOp], lambda_reg: f64, epsilon: f64) -> Result<GradcheckReport> {
    let objective = Objective::new(lambda_reg, rotations.to_vec());
    let all: Vec<usize> = (0..model.num_params()).collect();
    gradcheck_params(model, sample, &objective, epsilon, &all)
}

/// Central-difference check restricted to the parameters in `indices`;
/// parameters outside the set are treated as frozen.
pub fn gradcheck_params(model: &ClassifierModel, sample: &ImageSample, objective: &Objective, epsilon: f64, indices: &[usize]) -> Result<GradcheckReport> {
    let (_, grads) = loss_and_grad(model, std::slice::from_ref(sample), objective, Execution::Sequential)?;
    let analytic: Vec<f64> = indices.iter().map(|&i| grads[i]).collect();

    // Block inputs of the unperturbed passes; a perturbation in block b
    // only requires re-running blocks b.. from these.
    let x = sample.pixels().clone();
    let mut views = vec![(RotationOp::IDENTITY, model.trace(&x))];
    for &r in &objective.rotations {
        if r != RotationOp::IDENTITY {
            views.push((r, model.trace(&r.apply(&x)?)));
        }
    }
    let target = sample.label() as f64;
    let head_block = model.num_blocks();

    let loss_at = |params: &[f64], start: usize| -> Result<f64> {
        let rerun = |t: &ForwardTrace| -> ForwardTrace {
            if start == head_block {
                // Features are unchanged; only the head is re-evaluated.
                let f = t.stack.features.clone();
                let mut m = model.clone();
                m.params_mut().copy_from_slice(params);
                let stack = m.head_forward(f).expect("shape");
                let mut out = t.clone();
                out.stack = stack;
                out
            } else {
                model.trace_from(start, t.block_input(start).clone(), params)
            }
        };
        let base = rerun(&views[0].1);
        let mut loss = bce_with_logit(base.stack.scores[0], target);
        let base_tap = tapped(&base, objective.tap);
        let mut reg = 0.0;
        for (r, t) in &views[1..] {
            let rotated = rerun(t);
            let back = r.inverse().apply(tapped(&rotated, objective.tap))?;
            reg += base_tap.frobenius_distance(&back);
        }
        loss += objective.lambda_reg * objective.reduce(reg, 1);
        Ok(loss)
    };

    let numeric: Vec<Result<f64>> = Execution::default().map(indices, |&i| {
        let start = model.block_of_param(i);
        let mut p = model.params().to_vec();
        p[i] += epsilon;
        let plus = loss_at(&p, start)?;
        p[i] -= 2.0 * epsilon;
        let minus = loss_at(&p, start)?;
        Ok((plus - minus) / (2.0 * epsilon))
    });
    let numeric: Vec<f64> = numeric.into_iter().collect::<Result<_>>()?;
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_error,
        indices: indices.to_vec(),
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::default_small_backbone;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rot(d: u32) -> RotationOp {
        RotationOp::new(d).unwrap()
    }

    fn sample(seed: u64, label: u8) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = Tensor3::from_fn(3, 64, 64, |_, _, _| rng.gen_range(0.0..1.0));
        ImageSample::new(format!("s{seed}"), px, label, None).unwrap()
    }

    #[test]
    fn rotation_is_clockwise() {
        let x = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rot(90).apply(&x).unwrap().data(), &[3.0, 1.0, 4.0, 2.0]);
        assert_eq!(rot(180).apply(&x).unwrap().data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(rot(270).apply(&x).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        assert!(RotationOp::new(45).is_err());
        assert!(rot(90).apply(&Tensor3::zeros(1, 2, 3)).is_err());
    }

    #[test]
    fn inverse_is_complement() {
        assert_eq!(rot(0).inverse(), rot(0));
        assert_eq!(rot(90).inverse(), rot(270));
        assert_eq!(rot(180).inverse(), rot(180));
        assert_eq!(rot(270).inverse(), rot(90));
    }

    #[test]
    fn ce_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((label_ce_loss(&[0.0], &[1]).unwrap() - ln2).abs() < 1e-12);
        let sat = label_ce_loss(&[100.0], &[1]).unwrap();
        assert!(sat.is_finite() && sat < 1e-40);
        assert!((label_ce_loss(&[0.0, 0.0], &[1, 0]).unwrap() - ln2).abs() < 1e-12);
        assert!(label_ce_loss(&[0.0], &[1, 0]).is_err());
    }

    #[test]
    fn identity_rotation_gives_zero_regularizer() {
        let m = default_small_backbone(2);
        let batch = [sample(1, 1), sample(2, 0)];
        assert_eq!(equivariance_loss(&m, &batch, &[rot(0)]).unwrap(), 0.0);
    }

    #[test]
    fn constant_class_map_is_equivariant() {
        let mut m = default_small_backbone(2);
        let k = m.architecture().feature_channels();
        m.set_head(&vec![vec![0.0]; k], &[1.7]).unwrap();
        let batch = [sample(1, 1)];
        assert_eq!(equivariance_loss(&m, &batch, &RotationOp::ALL).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_permutation_oracle() {
        let x = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = |t: &Tensor3| Ok(t.clone());
        assert_eq!(equivariance_residual(id, &x, &[rot(90)]).unwrap(), 0.0);

        // flip(x) = [[2,1],[4,3]]. T90 x = [[3,1],[4,2]], flipped [[1,3],[2,4]],
        // rotated back by 270: [[3,4],[1,2]]. Difference [[-1,-3],[3,1]] → √20.
        let flip = |t: &Tensor3| Ok(Tensor3::from_fn(1, 2, 2, |_, i, j| t.get(0, i, 1 - j)));
        let v = equivariance_residual(flip, &x, &[rot(90)]).unwrap();
        assert!((v - 20f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let r = LossReport::new(1.0, 0.5, 0.6);
        assert!((r.total - 1.3).abs() < 1e-12);
        let m = default_small_backbone(4);
        let batch = [sample(5, 1), sample(6, 0)];
        let cfg = TrainConfig {
            lambda_reg: 0.0,
            ..Default::default()
        };
        let rep = total_loss(&m, &batch, &cfg).unwrap();
        let scores: Vec<f64> = m.forward(&batch).unwrap().iter().map(|s| s.scores[0]).collect();
        assert_eq!(rep.total, label_ce_loss(&scores, &[1, 0]).unwrap());
        assert_eq!(rep.total, rep.l_ce);
    }

    #[test]
    fn log_line_round_trip() {
        let r = LossReport::new(0.25, 0.125, 0.6);
        let (epoch, back) = LossReport::parse_log_line(&r.log_line(3)).unwrap();
        assert_eq!(epoch, 3);
        assert_eq!(back, r);
    }

    #[test]
    fn analytic_gradient_matches_on_sampled_params() {
        let m = default_small_backbone(9);
        let s = sample(10, 1);
        let n = m.num_params();
        let idx: Vec<usize> = (0..n).step_by(97).chain([n - 1, n - 2]).collect();
        for tap in [RegTap::ClassMap, RegTap::Features] {
            let mut obj = Objective::new(0.6, RotationOp::ALL.to_vec());
            obj.tap = tap;
            let rep = gradcheck_params(&m, &s, &obj, 1e-4, &idx).unwrap();
            assert!(rep.max_rel_error < 1e-3, "{tap:?}: {}", rep.max_rel_error);
        }
    }

    #[test]
    fn frozen_model_has_empty_gradients() {
        let m = default_small_backbone(9);
        let rep = gradcheck_params(&m, &sample(1, 0), &Objective::new(0.6, RotationOp::ALL.to_vec()), 1e-3, &[]).unwrap();
        assert!(rep.analytic.is_empty() && rep.numeric.is_empty());
        assert_eq!(rep.max_rel_error, 0.0);
    }
}
