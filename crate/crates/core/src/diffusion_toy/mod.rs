//! Toy DDIM pipeline on 32×32 shape images with an editable bottleneck.

mod dataset;
mod ddim;
mod denoiser;
mod edit;
mod grid;
mod image;
mod schedule;
mod train;

pub use dataset::{
    background_mae, brightness_probe, brightness_word, radius_probe, Attribute, Sample, Shape, Split,
    SyntheticDataset, BACKGROUND,
};
pub use ddim::{EditHook, Generated, Pipeline};
pub use edit::{
    edit_curve_csv, edit_pairs, evaluate_edit, load_edit_block, mean_offset_norm, new_edit_block, train_edit_module, EditConfig, EditCurvePoint,
    EditEval, EditPair, EditTrainConfig, BASE_SOURCE_TEXT, BASE_TARGET_TEXT,
};
pub use grid::{grid_csv, grid_trend_violations, recon_grid, GridCell, GridConfig};
pub use denoiser::{DenoiserConfig, Encoded, PruneSpec, ToyDenoiser};
pub use image::{ToyImage, PIXELS, SIDE};
pub use schedule::{timestep_embedding, NoiseSchedule};
pub use train::{bottleneck_samples, denoiser_loss, loss_csv, noised_batch, train_denoiser, DenoiserTrainConfig, LossPoint, NoisedBatch};
