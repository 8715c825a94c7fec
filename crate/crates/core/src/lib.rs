//! Content-adaptive motion alignment toolkit.
//!
//! Building blocks for flow-guided deformable motion compensation and its
//! evaluation at desk scale:
//!
//! - [`numerics`] — dense tensors with reverse-mode differentiation for the
//!   warp/alignment operator set, plus finite-difference verification.
//! - [`imageio`] — raw YUV420 ingestion, BT.709 color conversion, padding,
//!   PNG single-frame I/O and deterministic synthetic sequences.
//! - [`flow`] — classical coarse-to-fine optical flow, warping, flow
//!   magnitude and scale-consistent resampling.
//! - [`sme`] — training-free adaptive downsampling-scale search for flow
//!   estimation, gated by flow magnitude.
//! - [`tsmc`] — two-stage motion compensation: feature pyramid, coarse
//!   warp, offset/mask prediction and deformable alignment.
//! - [`mrqa`] — quality-aware hierarchical training-weight scheduling.
//! - [`metrics`] — PSNR, MS-SSIM, BD-rate and quality-fluctuation traces.
//! - [`harness`] — experiment orchestration: toy training, GOP-structured
//!   evaluation, plots and the command-line interface.

pub mod error;
pub mod flow;
pub mod harness;
pub mod imageio;
pub mod metrics;
pub mod mrqa;
pub mod numerics;
pub(crate) mod resample;
pub mod sme;
pub mod tsmc;

pub use error::{Error, Result};
