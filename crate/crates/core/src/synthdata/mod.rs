//! Deterministic synthetic segmentation scenes under controllable
//! intensity shifts, and their PGM files.

mod dataset;
mod domain;
pub mod pgm;

pub use dataset::{
    image_path, mask_path, read_domain, read_plan, write_dataset, DatasetPlan, DomainPlan, DOMAINS_FILE,
};
pub use domain::{
    generate, generate_one, generate_range, DomainSpec, Sample, MAX_FG_FRACTION, MIN_FG_FRACTION,
    SIZE_MULTIPLE,
};
pub use pgm::{read_image, read_mask, read_pgm, write_image, write_mask, Pgm};
