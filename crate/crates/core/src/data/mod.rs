//! Corpus generation and loading, tensor files and checkpoints.

pub mod checkpoint;
pub mod corpus;
pub mod synth;
pub mod tnsr;

pub use checkpoint::Checkpoint;
pub use corpus::{load_corpus, load_examples, split, write_corpus, Example, RecipeRecord};
pub use synth::{synth_corpus, synth_examples, SynthExample, SyntheticWorld};
pub use tnsr::{load_tensor, save_tensor};
