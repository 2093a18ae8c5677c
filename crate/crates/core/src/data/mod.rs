//! Instances, the synthetic generator and the dataset file format.

pub mod format;
mod instance;
pub mod synth;

pub use format::{load, open_dataset, save_dataset, write_dataset, DatasetReader};
pub use instance::{FieldValue, RawInstance};
pub use synth::{generate, SynthConfig};

/// Splits off the last `fraction` of instances (by index) as the held-out set.
pub fn holdout_split(instances: &[RawInstance], fraction: f64) -> (&[RawInstance], &[RawInstance]) {
    let n = instances.len();
    let test = ((n as f64) * fraction).round() as usize;
    instances.split_at(n - test.min(n))
}
