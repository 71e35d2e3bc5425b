//! Vocabulary, dataset loading, synthetic generation and batching.

pub mod batch;
pub mod bitmap;
pub mod dataset;
pub mod synth;
pub mod vocab;

pub use batch::{make_batches, Batch};
pub use bitmap::Bitmap;
pub use dataset::{load_dataset, load_dir, split, write_synthetic, DatasetPaths, Sample};
pub use synth::{gen_synthetic, synthetic_vocabulary, SynthConfig, SynthSample};
pub use vocab::{TokenId, TokenSequence, Vocabulary, EOS, PAD, RESERVED, SOS};
