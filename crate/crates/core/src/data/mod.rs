//! Synthetic data generation, dataset files and the caption tokenizer.

pub mod dataset;
pub mod synth;
pub mod vocab;

pub use dataset::{read_dataset, write_dataset, Payload, Split, TrainSample};
pub use vocab::Vocab;
