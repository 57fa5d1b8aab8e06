//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p weakseg --test acceptance`.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakseg::classifier::Architecture;
use weakseg::datamodel::{total_gt_reads, Source};
use weakseg::evalkit::{evaluate_pseudomasks, STAGE_FULL, STAGE_MIDLAYER, STAGE_MIDLAYER_REG};
use weakseg::losses::{equivariance_residual, gradcheck_params, Objective};
use weakseg::pipeline::{classification_accuracy, default_tau_grid, predict_masks};
use weakseg::saliency::binarize;
use weakseg::{
    ablation_table, cam_equivalence_check, calibrate_tau, default_small_backbone, equivariance_loss, evaluate_masks,
    generate_pseudomasks, gradcheck_equivariance, iou, synth_dataset, train_stage1, train_stage2, ClassifierModel,
    EvalRow, ImageSample, Mask, Membership, PseudoMask, RotationOp, SaliencyMap, Split, Tensor3, TrainConfig,
    TrainOptions,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(pass: bool, elapsed: Duration, budget: Duration) -> bool {
    pass && elapsed <= budget
}

fn random_sample(rng: &mut ChaCha8Rng, id: &str, size: usize) -> ImageSample {
    let px = Tensor3::from_fn(3, size, size, |_, _, _| rng.gen_range(0.0..1.0));
    ImageSample::new(id, px, rng.gen_range(0..2), None).unwrap()
}

fn cam_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let arch = Architecture {
            classes: 1 + (trial % 3) as usize,
            ..Architecture::small()
        };
        let mut model = ClassifierModel::new(arch, trial).unwrap();
        let (w, b) = model.head_weights();
        let b: Vec<f64> = b.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        model.set_head(&w, &b).unwrap();
        let batch: Vec<ImageSample> = (0..2).map(|i| random_sample(&mut rng, &format!("b{i}"), 64)).collect();
        worst = worst.max(cam_equivalence_check(&model, &batch).unwrap());
    }
    outcome(worst <= 1e-5, format!("max |pool-then-weight − weight-then-pool| = {worst:.2e} over 100 models"))
}

fn equivariance_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<ImageSample> = (0..3).map(|i| random_sample(&mut rng, &format!("e{i}"), 64)).collect();
    let model = default_small_backbone(3);
    let identity_only = equivariance_loss(&model, &batch, &[RotationOp::IDENTITY]).unwrap();

    let mut constant = model.clone();
    let (w, b) = constant.head_weights();
    let zero: Vec<Vec<f64>> = w.iter().map(|row| vec![0.0; row.len()]).collect();
    constant.set_head(&zero, &b).unwrap();
    let constant_loss = equivariance_loss(&constant, &batch, &RotationOp::ALL).unwrap();

    let x = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let flip = |t: &Tensor3| Ok(Tensor3::from_fn(1, 2, 2, |_, i, j| t.get(0, i, 1 - j)));
    let r90 = RotationOp::new(90).unwrap();
    let oracle = equivariance_residual(flip, &x, &[r90]).unwrap();
    let oracle_err = (oracle - 20f64.sqrt()).abs();

    let forward = equivariance_loss(&model, &batch, &RotationOp::ALL).unwrap();
    let reversed: Vec<RotationOp> = RotationOp::ALL.iter().rev().copied().collect();
    let backward = equivariance_loss(&model, &batch, &reversed).unwrap();
    let order_gap = (forward - backward).abs();

    let pass = identity_only == 0.0 && constant_loss == 0.0 && oracle_err <= 1e-9 && order_gap <= 1e-12 * forward;
    outcome(
        pass,
        format!(
            "R={{0}}: {identity_only}, constant map: {constant_loss}, 2x2 oracle err {oracle_err:.1e}, reorder gap {order_gap:.1e}"
        ),
    )
}

fn gradient_check() -> Outcome {
    let model = default_small_backbone(0);
    let sample = synth_dataset(2, 64, 0).unwrap().samples[0].clone();
    let full = gradcheck_equivariance(&model, &sample, &RotationOp::ALL, 0.6, 1e-3).unwrap();
    let ce_only = gradcheck_equivariance(&model, &sample, &RotationOp::ALL, 0.0, 1e-3).unwrap();
    let worst = full
        .analytic
        .iter()
        .zip(&full.numeric)
        .enumerate()
        .max_by(|a, b| {
            let e = |(x, y): (&f64, &f64)| weakseg::losses::relative_error(*x, *y);
            e(a.1).total_cmp(&e(b.1))
        })
        .map(|(i, _)| full.indices[i])
        .unwrap();
    // Shrinking the step on the worst parameter separates truncation error
    // from a wrong analytic gradient.
    let objective = Objective::new(0.6, RotationOp::ALL.to_vec());
    let fine = gradcheck_params(&model, &sample, &objective, 1e-4, &[worst]).unwrap();
    outcome(
        full.max_rel_error < 1e-3 && ce_only.max_rel_error < 1e-3,
        format!(
            "{} params, max rel err {:.3e} (L_ce only {:.3e}); worst param {worst}: |g| = {:.2e}, rel err {:.2e} at eps 1e-4",
            full.indices.len(),
            full.max_rel_error,
            ce_only.max_rel_error,
            fine.analytic[0].abs(),
            fine.max_rel_error
        ),
    )
}

fn rotation_group() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = true;
    for n in 1..=16 {
        let plane: Vec<i64> = (0..n * n).map(|_| rng.gen_range(-1000..1000)).collect();
        let r90 = RotationOp::new(90).unwrap();
        let mut p = plane.clone();
        for _ in 0..4 {
            p = r90.apply_plane(&p, n);
        }
        ok &= p == plane;
        for a in RotationOp::ALL {
            ok &= a.inverse().apply_plane(&a.apply_plane(&plane, n), n) == plane;
            ok &= (a.degrees() + a.inverse().degrees()) % 360 == 0;
            for b in RotationOp::ALL {
                ok &= RotationOp::ALL.contains(&a.then(b));
            }
        }
    }
    outcome(ok, "T90^4 = id, inverse law and closure on integer rasters up to 16x16")
}

fn random_map(rng: &mut ChaCha8Rng) -> SaliencyMap {
    let (h, w) = (rng.gen_range(1..16), rng.gen_range(1..16));
    let vals = (0..h * w).map(|_| rng.gen_range(0.0..5.0)).collect();
    SaliencyMap::new(h, w, vals, Source::Midlayer, "m").unwrap()
}

fn threshold_rule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut scale, mut nest, mut argmax) = (0, 0, 0);
    for _ in 0..1000 {
        let m = random_map(&mut rng);
        // Powers of two scale exactly, so the comparison is exact.
        let k = 2f64.powi(rng.gen_range(-20..20));
        let tau = rng.gen_range(0.0..=1.0);
        scale += usize::from(binarize(&m, tau).unwrap().mask == binarize(&m.scaled(k), tau).unwrap().mask);
        let t2 = rng.gen_range(tau..=1.0);
        let lo = binarize(&m, tau).unwrap().mask;
        let hi = binarize(&m, t2).unwrap().mask;
        nest += usize::from(lo.data().iter().zip(hi.data()).all(|(a, b)| a >= b));
        let top = binarize(&m, 1.0).unwrap().mask;
        let max = m.max();
        argmax += usize::from(m.values().iter().zip(top.data()).all(|(v, b)| (*b == 1) == (*v == max)));
    }
    outcome(
        scale == 1000 && nest == 1000 && argmax == 1000,
        format!("scale invariance {scale}/1000, nesting {nest}/1000, tau=1 argmax {argmax}/1000"),
    )
}

fn iou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut preds, mut samples, mut want) = (Vec::new(), Vec::new(), 0.0);
    let (mut sym, mut ident) = (true, true);
    for k in 0..1000 {
        let (h, w) = (rng.gen_range(32..48), rng.gen_range(32..48));
        let (d1, d2) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5));
        let a = Mask::from_fn(h, w, |_, _| rng.gen_bool(d1));
        let b = Mask::from_fn(h, w, |_, _| rng.gen_bool(d2));
        let (mut i, mut u) = (0usize, 0usize);
        for (x, y) in a.data().iter().zip(b.data()) {
            i += usize::from(*x == 1 && *y == 1);
            u += usize::from(*x == 1 || *y == 1);
        }
        want += if u == 0 { 1.0 } else { i as f64 / u as f64 };
        sym &= iou(&a, &b).unwrap() == iou(&b, &a).unwrap();
        ident &= iou(&a, &a).unwrap() == 1.0;
        samples.push(ImageSample::new(format!("m{k}"), Tensor3::zeros(3, h, w), 1, Some(b)).unwrap());
        preds.push(a);
    }
    ident &= iou(&Mask::zeros(4, 4), &Mask::zeros(4, 4)).unwrap() == 1.0;
    let row = evaluate_masks("oracle", &preds, &samples, Membership::PositivesOnly).unwrap();
    let err = (row.mean_iou - want / 10.0).abs();
    outcome(
        err <= 1e-9 && sym && ident,
        format!("|evaluate_masks − counting oracle| = {err:.1e} over 1000 pairs; symmetry {sym}, identity {ident}"),
    )
}

/// Everything criterion 7 measures, plus the artifacts criterion 9 compares.
struct Experiment {
    accuracy: f64,
    cam: (f64, f64),
    midlayer: (f64, f64),
    pseudo_iou: f64,
    stage2_iou: f64,
    classifier_bytes: Vec<u8>,
    segnet_bytes: Vec<u8>,
    masks: Vec<PseudoMask>,
    gt_reads_in_training: usize,
    elapsed: Duration,
}

fn experiment_config() -> TrainConfig {
    TrainConfig {
        lambda_reg: 0.01,
        lr_stage1: 3e-3,
        lr_stage2: 3e-3,
        epochs_stage1: 30,
        epochs_stage2: 30,
        seed: 0,
        ..Default::default()
    }
}

fn run_experiment(run_dir: &Path) -> Experiment {
    let start = Instant::now();
    let cfg = experiment_config();
    let ds = synth_dataset(200, 64, 0).unwrap().with_split(cfg.split_fractions, cfg.seed).unwrap();
    let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
    let opts = TrainOptions {
        run_dir: Some(run_dir.to_path_buf()),
        ..Default::default()
    };
    let all: Vec<ImageSample> = train.iter().chain(&val).cloned().collect();
    all.iter().for_each(|s| s.reset_gt_reads());

    let (model, r1) = train_stage1(&train, &cfg, &opts).unwrap();
    let mut gt_reads = total_gt_reads(&all);
    let accuracy = classification_accuracy(&model, &val).unwrap();
    let grid = default_tau_grid();
    let cam = calibrate_tau(&model, &val, Source::Cam, &grid).unwrap();
    let midlayer = calibrate_tau(&model, &val, Source::Midlayer, &grid).unwrap();

    let masks = generate_pseudomasks(&model, &train, Source::Midlayer, midlayer.0).unwrap();
    let val_masks = generate_pseudomasks(&model, &val, Source::Midlayer, midlayer.0).unwrap();
    let pseudo_iou = evaluate_pseudomasks("pseudo", &val_masks, &val, Membership::PositivesOnly)
        .unwrap()
        .mean_iou;

    all.iter().for_each(|s| s.reset_gt_reads());
    let (net, r2) = train_stage2(&masks, &train, &cfg, &opts).unwrap();
    gt_reads += total_gt_reads(&all);
    let stage2_iou = evaluate_masks("stage2", &predict_masks(&net, &val).unwrap(), &val, Membership::PositivesOnly)
        .unwrap()
        .mean_iou;

    Experiment {
        accuracy,
        cam,
        midlayer,
        pseudo_iou,
        stage2_iou,
        classifier_bytes: std::fs::read(r1.checkpoint_path.unwrap()).unwrap(),
        segnet_bytes: std::fs::read(r2.checkpoint_path.unwrap()).unwrap(),
        masks,
        gt_reads_in_training: gt_reads,
        elapsed: start.elapsed(),
    }
}

fn synthetic_end_to_end(e: &Experiment) -> Outcome {
    let (cam, mid) = (e.cam.1 * 100.0, e.midlayer.1 * 100.0);
    let pass = e.accuracy >= 0.95 && mid >= cam - 2.0 && e.stage2_iou >= e.pseudo_iou - 2.0;
    outcome(
        within(pass, e.elapsed, Duration::from_secs(15 * 60)),
        format!(
            "val acc {:.1}%, CAM {cam:.2} (tau {:.2}), mid-layer {mid:.2} (tau {:.2}), pseudo-mask {:.2}, stage 2 {:.2}, {:.0}s",
            e.accuracy * 100.0,
            e.cam.0,
            e.midlayer.0,
            e.pseudo_iou,
            e.stage2_iou,
            e.elapsed.as_secs_f64()
        ),
    )
}

fn table_fixture() -> Outcome {
    let rows = [
        (STAGE_FULL, 72.86),
        (STAGE_MIDLAYER, 65.29),
        (STAGE_MIDLAYER_REG, 67.37),
    ]
    .map(|(m, v)| EvalRow {
        method_name: m.to_string(),
        mean_iou: v,
        n_samples: 100,
    });
    let table = ablation_table(&rows).unwrap();
    let pos: Vec<Option<usize>> = ["65.29", "67.37", "72.86"].iter().map(|v| table.text.find(v)).collect();
    let ordered = pos.iter().all(Option::is_some) && pos.windows(2).all(|w| w[0] < w[1]);
    outcome(ordered, "65.29 / 67.37 / 72.86 rendered in stage order")
}

fn determinism(a: &Experiment, b: &Experiment) -> Outcome {
    let ckpt = a.classifier_bytes == b.classifier_bytes && a.segnet_bytes == b.segnet_bytes;
    let masks = a.masks == b.masks;
    outcome(ckpt && masks, format!("checkpoints identical: {ckpt}, pseudo-masks identical: {masks}"))
}

fn leakage(a: &Experiment, b: &Experiment) -> Outcome {
    let reads = a.gt_reads_in_training + b.gt_reads_in_training;
    outcome(reads == 0, format!("{reads} ground-truth reads inside stage-1/stage-2 training"))
}

fn timed(budget: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let t = start.elapsed();
    o.pass = within(o.pass, t, budget);
    o.detail = format!("{} [{:.1}s / {}s]", o.detail, t.as_secs_f64(), budget.as_secs());
    o
}

fn main() {
    let secs = Duration::from_secs;
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 cam-equivalence", timed(secs(30), cam_equivalence)),
        ("2 equivariance-loss", timed(secs(10), equivariance_correctness)),
        ("3 gradient-check", timed(secs(120), gradient_check)),
        ("4 rotation-group", timed(secs(1), rotation_group)),
        ("5 threshold-rule", timed(secs(10), threshold_rule)),
        ("6 iou-oracle", timed(secs(10), iou_oracle)),
    ];
    for (name, o) in &results {
        print_line(name, o);
    }
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let first = run_experiment(dirs[0].path());
    let tail = [
        ("7 synthetic-end-to-end", synthetic_end_to_end(&first)),
        ("8 table-fixture", table_fixture()),
    ];
    for (name, o) in &tail {
        print_line(name, o);
    }
    results.extend(tail);
    let second = run_experiment(dirs[1].path());
    let tail = [
        ("9 determinism", determinism(&first, &second)),
        ("10 leakage-audit", leakage(&first, &second)),
    ];
    for (name, o) in &tail {
        print_line(name, o);
    }
    results.extend(tail);

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_line(name: &str, o: &Outcome) {
    println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}
