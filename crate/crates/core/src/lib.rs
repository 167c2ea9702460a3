//! Unified-domain style alignment for domain generalization.
//!
//! Every sample's intermediate feature map is summarized by its per-channel
//! mean and standard deviation (its *style*). Styles harvested from the
//! training set are clustered with a Gaussian mixture, the clusters are
//! merged into a single *unified domain* Gaussian, and during training every
//! feature map is re-styled with a draw from that Gaussian. At inference the
//! test feature map is partially projected towards the unified mean.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! front end and wall-clock measurements live in the `conststyle` crate.
//!
//! | module      | contents                                                  |
//! |-------------|-----------------------------------------------------------|
//! | [`numerics`]| symmetric eigensolver, PSD square root, Cholesky          |
//! | [`style`]   | feature maps, instance/domain styles, Fréchet distance    |
//! | [`cluster`] | Gaussian mixture EM over style vectors                    |
//! | [`unified`] | barycenter / averaging of clusters, style sampling        |
//! | [`align`]   | full and partial style projection                         |
//! | [`datagen`] | procedural multi-domain dataset                           |
//! | [`net`]     | small convolutional classifier with manual backprop       |
//! | [`pipeline`]| training schedule, inference, experiment protocols        |

#![no_std]

extern crate alloc;

mod error;

pub mod align;
pub mod cluster;
pub mod datagen;
pub mod net;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod style;
pub mod unified;

pub use error::{Error, Result};
