//! Template-free pairwise point-cloud deformation learned with
//! cycle-consistency self-supervision, plus few-shot part-label transfer.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`pointcloud`]: geometry kernel (clouds, kd-tree, Chamfer, ICP, mIoU)
//! - [`autodiff`]: tape-based reverse-mode differentiation
//! - [`model`]: dual PointNet encoders, parameter predictor, deformation net
//! - [`losses`]: Chamfer, 2-/3-cycle and self-reconstruction objectives
//! - [`training`]: triplet sampling, Adam, checkpoints
//! - [`transfer`]: source selection, voting, baselines
//! - [`dataio`]: file formats, manifests, synthetic shape generator

pub mod autodiff;
pub mod diagnostics;
pub mod losses;
pub mod model;
pub mod pointcloud;
