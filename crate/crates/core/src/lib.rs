//! CPU renderer for hybrid base/reflective 2D Gaussian splatting with
//! per-Gaussian baked reflection tracing, gradients and pruning.

pub mod cli;
pub mod compositor;
pub mod consts;
pub mod error;
pub mod fit;
pub mod grad;
pub mod io;
pub mod loss;
pub mod math;
pub mod oracle;
pub mod projection;
pub mod prune;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod synth;
pub mod trace;

pub use compositor::{forward, render, ForwardCache, OutputMode, RenderOutput};
pub use error::{Error, Result};
pub use raster::{Branch, ChannelImage, RenderOptions, Renderer};
pub use scene::{Appearance, CameraView, GaussianKind, GaussianPrimitive, Scene};
pub use trace::Phi;
