//! Transformer crowd counting at desk scale.
//!
//! The pipeline: an image is cut into overlapping patches and reduced to a
//! short token sequence, a context token is appended and the sequence runs
//! through a residual transformer encoder, the context feature gates the
//! patch features channel-wise, and a small decoder emits a nonnegative
//! density map whose total mass is the predicted person count. Training
//! combines a count loss, an entropic optimal-transport loss, a total
//! variation loss, and an auxiliary count regression from the context token.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
