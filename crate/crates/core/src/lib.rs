//! MKANet: multi-branch kernel-sharing atrous convolution networks for
//! semantic segmentation, trained and evaluated on the CPU.
//!
//! The crate is layered bottom-up. [`tensor`], [`conv`] and [`graph`] form a
//! small reverse-mode autodiff engine; [`mka`], [`backbone`], [`decoder`] and
//! [`heads`] build the network on top of it; the remaining modules cover
//! losses, metrics, optimization and file formats.

pub mod augment;
pub mod boundary;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod mask;
pub mod metrics;
pub mod mka;
pub mod model;
pub mod backbone;
pub mod decoder;
pub mod nn;
pub mod optim;
pub mod palette;
pub mod param;
pub mod pnm;
pub mod synth;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
pub use mask::{ClassMask, IGNORE};
pub use tensor::Tensor;
