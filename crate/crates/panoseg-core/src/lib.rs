//! Core library for seam-aware panoramic video object segmentation.
//!
//! The pipeline: synthesize equirectangular sequences whose objects cross the
//! left/right seam ([`synth`]), train a small mask-propagation transformer
//! whose attention stack stitches the seam by circularly shifting reference
//! features before a windowed match ([`attention`], [`model`], [`train`]),
//! propagate first-frame masks through a sequence ([`propagate`]), and score
//! the results with region and boundary measures ([`metrics`]).

pub mod attention;
pub mod tensor;
