//! Weakly-supervised binary segmentation from image-level labels.
//!
//! A classifier is trained with the 1×1 head applied before global average
//! pooling, so its last layer is a class activation map. Saliency is read
//! either from that map (CAM) or from the channel mean of the penultimate
//! block (mid-layer), thresholded at a fraction of its maximum, and used
//! as pseudo ground truth for a second, pixel-supervised network. Training
//! may add a rotation-equivariance penalty on the class map.

pub mod classifier;
pub mod datamodel;
pub mod datasets;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod io;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod saliency;
pub mod segnet;
pub mod tensor;

pub use classifier::{cam_equivalence_check, default_small_backbone, Architecture, ClassifierModel};
pub use datamodel::{
    validate_config, ActivationStack, ImageSample, PseudoMask, Reduction, RegTap, SaliencyMap, Source, TrainConfig,
};
pub use datasets::{ingest_directory, split, synth_dataset, Dataset, DatasetManifest, Split};
pub use error::{Error, Result};
pub use evalkit::{ablation_table, evaluate_masks, iou, render_overlay, EvalRow, Membership};
pub use exec::Execution;
pub use losses::{equivariance_loss, gradcheck_equivariance, label_ce_loss, total_loss, LossReport, RotationOp};
pub use pipeline::{calibrate_tau, generate_pseudomasks, train_stage1, train_stage2, RunLayout, StageReport, TrainOptions};
pub use segnet::{EncoderDecoder, SegNetwork};
pub use tensor::{Mask, Tensor3};
