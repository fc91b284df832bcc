//! Toy-scale vision-language model building blocks.
//!
//! * [`numcore`]: tensors, reverse-mode autodiff, finite-difference oracle.
//! * [`layers`]: 1D/2D RoPE, grouped-query attention, blockwise attention.
//! * [`model`]: patchifier, vision encoder, merger, decoder, MTP head,
//!   sampling and checkpoints.
//! * [`posttrain`]: SFT, DPO, GROUPER and GRPO objectives.
//! * [`datagen`]: synthetic shape scenes, boxes and balanced counting data.

pub mod datagen;
pub mod layers;
pub mod model;
pub mod numcore;
pub mod posttrain;
