//! Synthetic-CT generation from CBCT, optionally fused with a misaligned
//! planning CT: volumes and phantoms, affine misalignment, a 3D U-Net,
//! the MAE/SSIM/perceptual losses, training and evaluation.
//!
//! All computation is CPU-only, single-threaded and deterministic given
//! the seeds carried by the configs.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod extractor;
pub mod io;
pub mod losses;
pub mod misalign;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod split;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod volume;

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetManifest, LoadOptions};
pub use error::{Error, Result};
pub use eval::{aggregate, emit_report, CellKey, ExperimentResult, MetricRecord, Metrics, Modality, ReportFormat};
pub use experiment::{plan_cells, run_experiment, CellSpec, Experiment, ExperimentConfig, Grid};
pub use extractor::{ExtractorConfig, ExtractorVariant, FeatureExtractor};
pub use io::{load_volume, save_volume};
pub use losses::{composite_loss, LossBreakdown, LossWeights};
pub use misalign::{apply_affine, mean_voxel_displacement, misalign_ct, sample_affine, AffineParams, MisalignmentSpec};
pub use phantom::{build_dataset, default_tier, default_tiers, generate_phantom, PhantomConfig, QualityTier};
pub use split::{make_splits, SplitRatios, SplitSet};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainHistory, TrainSample};
pub use unet::{build_model, forward, ModelConfig, NetworkWeights};
pub use volume::{Domain, PairedSample, Volume};
