use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weakseg::datamodel::{Source, CONFIG_KEYS};
use weakseg::datasets::{load_samples, Dataset, DatasetManifest};
use weakseg::evalkit::{evaluate_pseudomasks, STAGE_FULL};
use weakseg::io::{read_mask, write_mask, write_rgb, write_saliency};
use weakseg::pipeline::{classification_accuracy, default_tau_grid, image_saliency, stage1_architecture, StageLoss};
use weakseg::saliency::binarize;
use weakseg::segnet::EncoderDecoder;
use weakseg::{
    ablation_table, calibrate_tau, evaluate_masks, generate_pseudomasks, ingest_directory, render_overlay,
    synth_dataset, train_stage1, train_stage2, ClassifierModel, Error, EvalRow, Execution, ImageSample, Membership,
    PseudoMask, Result, RunLayout, SegNetwork, Split, TrainConfig, TrainOptions,
};

#[derive(Parser)]
#[command(name = "weakseg", version, about = "Weakly-supervised binary segmentation from image-level labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the image-label classifier (stage 1).
    TrainCls {
        #[command(flatten)]
        common: Common,
        /// Shorthand for --epochs-stage1.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write one pseudo-mask PNG per sample from a stage-1 checkpoint.
    GenMasks {
        #[command(flatten)]
        common: Common,
        /// Defaults to <run_dir>/stage1/classifier.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value = "midlayer")]
        source: Source,
        /// Pick tau on the validation split instead of using --tau.
        #[arg(long)]
        calibrate: bool,
        /// Defaults to <run_dir>/masks/<source>.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the segmentation network on pseudo-masks (stage 2).
    TrainSeg {
        #[command(flatten)]
        common: Common,
        /// Defaults to <run_dir>/masks/midlayer.
        #[arg(long)]
        masks_dir: Option<PathBuf>,
        /// Shorthand for --epochs-stage2.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Mean IoU of mask directories and/or a segmentation checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
        /// NAME=DIR of predicted masks; repeatable.
        #[arg(long = "masks", value_name = "NAME=DIR")]
        masks: Vec<String>,
        #[arg(long)]
        seg_checkpoint: Option<PathBuf>,
        #[arg(long, default_value = STAGE_FULL)]
        seg_name: String,
        /// Score negatives too (empty prediction on empty truth counts as 1).
        #[arg(long)]
        include_negatives: bool,
        /// Print the ablation table and write it next to the sidecar.
        #[arg(long)]
        table: bool,
        /// Defaults to <run_dir>/eval.json.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Render saliency and overlay images for selected samples.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated sample ids.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
        #[arg(long, default_value = "midlayer")]
        source: Source,
        /// Defaults to <run_dir>/vis.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, env = "WEAKSEG_RUN_DIR", default_value = "run")]
    run_dir: PathBuf,
    /// Run every batch on the calling thread.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct DataArgs {
    /// Generate N synthetic images instead of reading directories.
    #[arg(long, value_name = "N", conflicts_with_all = ["pos_dir", "neg_dir", "mask_dir"])]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, requires = "neg_dir")]
    pos_dir: Option<PathBuf>,
    #[arg(long, requires = "pos_dir")]
    neg_dir: Option<PathBuf>,
    #[arg(long)]
    mask_dir: Option<PathBuf>,
}

/// Every training-config key as a flag; flags override the config file.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda_reg: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    rotations: Option<String>,
    #[arg(long)]
    lr_stage1: Option<String>,
    #[arg(long)]
    lr_stage2: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    epochs_stage1: Option<String>,
    #[arg(long)]
    epochs_stage2: Option<String>,
    #[arg(long)]
    split_fractions: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    reg_tap: Option<String>,
    #[arg(long)]
    reg_reduction: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> [(&'static str, Option<&String>); 14] {
        let v = [
            self.lambda_reg.as_ref(),
            self.tau.as_ref(),
            self.rotations.as_ref(),
            self.lr_stage1.as_ref(),
            self.lr_stage2.as_ref(),
            self.weight_decay.as_ref(),
            self.epochs_stage1.as_ref(),
            self.epochs_stage2.as_ref(),
            self.split_fractions.as_ref(),
            self.seed.as_ref(),
            self.batch_size.as_ref(),
            self.beta.as_ref(),
            self.reg_tap.as_ref(),
            self.reg_reduction.as_ref(),
        ];
        std::array::from_fn(|i| (CONFIG_KEYS[i], v[i]))
    }

    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

/// Validates everything except the epoch counts, which may be zero.
fn check(cfg: &TrainConfig) -> Result<()> {
    let problems: Vec<String> = weakseg::validate_config(cfg)
        .into_iter()
        .filter(|m| !m.starts_with("epochs_stage"))
        .collect();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("; ")))
    }
}

struct Context {
    cfg: TrainConfig,
    dataset: Dataset,
    layout: RunLayout,
    exec: Execution,
    image_size: usize,
}

impl Context {
    fn new(common: &Common, adjust: impl FnOnce(&mut TrainConfig)) -> Result<Self> {
        let mut cfg = common.config.resolve()?;
        adjust(&mut cfg);
        check(&cfg)?;
        let d = &common.data;
        let size = d.image_size;
        let dataset = match (d.synthetic, &d.pos_dir, &d.neg_dir) {
            (Some(n), _, _) => synth_dataset(n, size, d.data_seed)?,
            (None, Some(pos), Some(neg)) => {
                let manifest = ingest_directory(pos, neg, d.mask_dir.as_deref())?;
                let samples = load_samples(&manifest, size)?;
                Dataset { manifest, samples }
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "no data: pass --synthetic N or --pos-dir and --neg-dir".into(),
                ))
            }
        };
        let dataset = dataset.with_split(cfg.split_fractions, cfg.seed)?;
        let layout = RunLayout::new(&common.run_dir);
        Ok(Self {
            cfg,
            dataset,
            layout,
            exec: if common.sequential {
                Execution::Sequential
            } else {
                Execution::default()
            },
            image_size: size,
        })
    }

    fn options(&self) -> TrainOptions {
        TrainOptions {
            exec: self.exec,
            run_dir: Some(self.layout.root.clone()),
        }
    }

    fn split(&self, s: Split) -> Vec<ImageSample> {
        self.dataset.split(s)
    }

    fn classifier(&self, path: Option<&Path>) -> Result<ClassifierModel> {
        let p = path.map(Path::to_path_buf).unwrap_or_else(|| self.layout.classifier_checkpoint());
        ClassifierModel::load_expecting(&p, &stage1_architecture(self.image_size))
    }

    fn save_manifest(&self) -> Result<()> {
        let p = self.layout.root.join("manifest.tsv");
        std::fs::create_dir_all(&self.layout.root).map_err(|e| Error::Io {
            path: self.layout.root.clone(),
            source: e,
        })?;
        let manifest: &DatasetManifest = &self.dataset.manifest;
        manifest.save(&p)
    }
}

fn train_cls(common: &Common, epochs: Option<usize>) -> Result<()> {
    let ctx = Context::new(common, |c| {
        if let Some(e) = epochs {
            c.epochs_stage1 = e;
        }
    })?;
    ctx.save_manifest()?;
    let train = ctx.split(Split::Train);
    let (model, report) = train_stage1(&train, &ctx.cfg, &ctx.options())?;
    if let Some(StageLoss::Classifier(l)) = &report.final_losses {
        println!("final l_ce {:.6} l_reg {:.6} total {:.6}", l.l_ce, l.l_reg, l.total);
    }
    let val = ctx.split(Split::Val);
    if !val.is_empty() {
        println!("val accuracy {:.2}%", 100.0 * classification_accuracy(&model, &val)?);
    }
    println!(
        "trained {} epochs in {:.1}s; checkpoint {}",
        report.epochs_run,
        report.wall_time_s,
        report.checkpoint_path.map(|p| p.display().to_string()).unwrap_or_default()
    );
    Ok(())
}

fn gen_masks(
    common: &Common,
    checkpoint: Option<&Path>,
    split: Split,
    source: Source,
    calibrate: bool,
    out_dir: Option<&Path>,
) -> Result<()> {
    let ctx = Context::new(common, |_| {})?;
    let model = ctx.classifier(checkpoint)?;
    let tau = if calibrate {
        let (tau, score) = calibrate_tau(&model, &ctx.split(Split::Val), source, &default_tau_grid())?;
        println!("calibrated tau {tau:.2} (val IoU {:.2})", score * 100.0);
        tau
    } else {
        ctx.cfg.tau
    };
    let samples = ctx.split(split);
    let masks = weakseg::pipeline::generate_pseudomasks_with(&model, &samples, source, tau, ctx.exec)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| ctx.layout.masks(source));
    for m in &masks {
        write_mask(&dir.join(format!("{}.png", m.sample_id)), &m.mask)?;
    }
    println!("wrote {} masks to {}", masks.len(), dir.display());
    Ok(())
}

fn read_masks(dir: &Path, samples: &[ImageSample], source: Source) -> Result<Vec<PseudoMask>> {
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| !dir.join(format!("{}.png", s.id())).is_file())
        .map(|s| s.id())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "{} is missing masks for: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    samples
        .iter()
        .map(|s| {
            Ok(PseudoMask {
                sample_id: s.id().to_string(),
                mask: read_mask(&dir.join(format!("{}.png", s.id())), Some(s.size()))?,
                tau: f64::NAN,
                source,
            })
        })
        .collect()
}

fn train_seg(common: &Common, masks_dir: Option<&Path>, epochs: Option<usize>) -> Result<()> {
    let ctx = Context::new(common, |c| {
        if let Some(e) = epochs {
            c.epochs_stage2 = e;
        }
    })?;
    let train = ctx.split(Split::Train);
    let dir = masks_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.layout.masks(Source::Midlayer));
    let masks = read_masks(&dir, &train, Source::Midlayer)?;
    let (_, report) = train_stage2(&masks, &train, &ctx.cfg, &ctx.options())?;
    if let Some(StageLoss::Pixel(l)) = report.final_losses {
        println!("final pixel loss {l:.6}");
    }
    println!(
        "trained {} epochs in {:.1}s; checkpoint {}",
        report.epochs_run,
        report.wall_time_s,
        report.checkpoint_path.map(|p| p.display().to_string()).unwrap_or_default()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    common: &Common,
    split: Split,
    mask_specs: &[String],
    seg_checkpoint: Option<&Path>,
    seg_name: &str,
    include_negatives: bool,
    table: bool,
    sidecar: Option<&Path>,
) -> Result<()> {
    let ctx = Context::new(common, |_| {})?;
    let membership = if include_negatives {
        Membership::All
    } else {
        Membership::PositivesOnly
    };
    let samples = ctx.split(split);
    let scored: Vec<ImageSample> = samples.iter().filter(|s| membership.includes(s)).cloned().collect();
    let mut rows: Vec<EvalRow> = Vec::new();
    for spec in mask_specs {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--masks expects NAME=DIR, got '{spec}'")))?;
        let masks = read_masks(Path::new(dir), &scored, Source::Midlayer)?;
        rows.push(evaluate_pseudomasks(name, &masks, &scored, membership)?);
    }
    if let Some(p) = seg_checkpoint {
        let net = EncoderDecoder::load(p)?;
        let preds = scored.iter().map(|s| net.predict_mask(s)).collect::<Result<Vec<_>>>()?;
        rows.push(evaluate_masks(seg_name, &preds, &scored, membership)?);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate: pass --masks or --seg-checkpoint".into()));
    }
    for r in &rows {
        println!("{}\t{:.2}\t{}", r.method_name, r.mean_iou, r.n_samples);
    }
    let rendered = ablation_table(&rows)?;
    let sidecar = sidecar.map(Path::to_path_buf).unwrap_or_else(|| ctx.layout.root.join("eval.json"));
    write_text(&sidecar, &rendered.sidecar)?;
    if table {
        print!("{}", rendered.text);
        write_text(&sidecar.with_extension("txt"), &rendered.text)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

fn visualize(
    common: &Common,
    checkpoint: Option<&Path>,
    ids: &[String],
    source: Source,
    out_dir: Option<&Path>,
) -> Result<()> {
    let ctx = Context::new(common, |_| {})?;
    let model = ctx.classifier(checkpoint)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| ctx.layout.root.join("vis"));
    let samples = &ctx.dataset.samples;
    let chosen = ids
        .iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| s.id() == id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown sample id '{id}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    for s in chosen {
        let map = image_saliency(&model, s, source)?;
        let mask = if s.is_positive() {
            binarize(&map, ctx.cfg.tau)?.mask
        } else {
            generate_pseudomasks(&model, std::slice::from_ref(s), source, ctx.cfg.tau)?
                .remove(0)
                .mask
        };
        write_saliency(&dir.join(format!("{}_saliency.png", s.id())), &map)?;
        write_rgb(&dir.join(format!("{}_overlay.png", s.id())), &render_overlay(s, &mask)?)?;
    }
    println!("wrote {} visualizations to {}", ids.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::TrainCls { common, epochs } => train_cls(common, *epochs),
        Command::GenMasks {
            common,
            checkpoint,
            split,
            source,
            calibrate,
            out_dir,
        } => gen_masks(common, checkpoint.as_deref(), *split, *source, *calibrate, out_dir.as_deref()),
        Command::TrainSeg {
            common,
            masks_dir,
            epochs,
        } => train_seg(common, masks_dir.as_deref(), *epochs),
        Command::Eval {
            common,
            split,
            masks,
            seg_checkpoint,
            seg_name,
            include_negatives,
            table,
            sidecar,
        } => eval(
            common,
            *split,
            masks,
            seg_checkpoint.as_deref(),
            seg_name,
            *include_negatives,
            *table,
            sidecar.as_deref(),
        ),
        Command::Visualize {
            common,
            checkpoint,
            ids,
            source,
            out_dir,
        } => visualize(common, checkpoint.as_deref(), ids, *source, out_dir.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
