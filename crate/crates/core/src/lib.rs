//! Canonical saliency maps for black-box face models.
//!
//! Occlusion drops measured at dense mesh vertices of an input face are
//! splatted onto a shared canonical face ([`canonical::compute_cis`]), then
//! averaged over a dataset into a model-level map ([`canonical::compute_cms`]).
//! [`evaluation`] scores any heatmap with negative explanation images and
//! [`sanity`] checks that maps degrade as the model is randomized.

pub mod canonical;
pub mod correspondence;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod occlusion;
pub mod oracle;
pub mod saliency;
pub mod sanity;
pub mod synth;
pub mod tasks;

pub use crate::canonical::{compute_cis, compute_cms, reproject, CmsStream};
pub use crate::correspondence::{DenseCorrespondence, LoadOptions};
pub use crate::error::{Error, Result};
pub use crate::image::{Dims, FaceImage, Point2};
pub use crate::occlusion::{occlude, vertex_drops, OcclusionSpec, VertexDrop};
pub use crate::oracle::{ConfidenceOracle, Embedding, OracleInfo};
pub use crate::saliency::{read_saliency, write_saliency, CountMatrix, Frame, SaliencyMap};
