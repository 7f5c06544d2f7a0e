//! Black-box access to face models.
//!
//! Everything downstream sees a model only through [`ConfidenceOracle`]:
//! a per-class confidence for a batch of images, plus optional embeddings and
//! optional top-down layer randomization. Local adapters live in
//! [`synthetic`]; [`http`] talks to a model served over HTTP.

pub mod http;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::FaceImage;

/// Client-side batch size used when none is configured.
pub const DEFAULT_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "c")]
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub scores: bool,
    pub embeddings: bool,
    pub randomizable: bool,
}

/// What a model's scores mean. Only `Probability` scores are range-checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Probability,
    Logit,
    Similarity,
    Unknown,
}

impl OutputKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutputKind::Probability => "probability",
            OutputKind::Logit => "logit",
            OutputKind::Similarity => "similarity",
            OutputKind::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub id: String,
    /// `None` when the model accepts any image size.
    pub input: Option<InputShape>,
    /// `None` when the class id is not range-checked.
    pub classes: Option<usize>,
    pub capabilities: Capabilities,
    pub output: OutputKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("embedding must have at least one dimension".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("embedding has a non-finite component".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A face model seen as a black box.
///
/// Implementations must be deterministic: identical images give identical
/// scores, independent of how the images are batched. None of the methods
/// mutate the oracle.
pub trait ConfidenceOracle: Send + Sync {
    fn info(&self) -> &OracleInfo;

    /// One confidence per image for `class`, in input order.
    fn score(&self, images: &[FaceImage], class: usize) -> Result<Vec<f64>>;

    fn embed(&self, _images: &[FaceImage]) -> Result<Vec<Embedding>> {
        Err(Error::Unsupported(format!(
            "{} does not expose embeddings",
            self.info().id
        )))
    }

    /// Number of parameter groups that [`ConfidenceOracle::randomized`] can reset.
    fn layer_count(&self) -> usize {
        0
    }

    /// Copy of this oracle whose top `k` layers are re-drawn from `seed`.
    fn randomized(&self, _k: usize, _seed: u64) -> Result<Box<dyn ConfidenceOracle>> {
        Err(Error::Unsupported(format!("{} cannot be randomized", self.info().id)))
    }
}

fn check_inputs(info: &OracleInfo, images: &[FaceImage]) -> Result<()> {
    if let Some(shape) = info.input {
        for (i, img) in images.iter().enumerate() {
            if img.width() != shape.width || img.height() != shape.height || img.channels() != shape.channels {
                return Err(Error::Input(format!(
                    "image {i} is {}x{}x{}, {} expects {}x{}x{}",
                    img.width(),
                    img.height(),
                    img.channels(),
                    info.id,
                    shape.width,
                    shape.height,
                    shape.channels
                )));
            }
        }
    }
    Ok(())
}

/// Scores `images` for `class`, sending at most `batch` images per oracle call.
pub fn score_batch(
    oracle: &dyn ConfidenceOracle,
    images: &[FaceImage],
    class: usize,
    batch: usize,
) -> Result<Vec<f64>> {
    let info = oracle.info();
    if batch == 0 {
        return Err(Error::Input("batch size must be >= 1".into()));
    }
    if let Some(n) = info.classes {
        if class >= n {
            return Err(Error::Input(format!(
                "class {class} out of range for {} ({n} classes)",
                info.id
            )));
        }
    }
    check_inputs(info, images)?;

    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch) {
        let scores = oracle.score(chunk, class)?;
        if scores.len() != chunk.len() {
            return Err(Error::Transport {
                msg: format!(
                    "{} returned {} scores for {} images",
                    info.id,
                    scores.len(),
                    chunk.len()
                ),
                attempts: 1,
                retryable: false,
            });
        }
        for &s in &scores {
            if !s.is_finite() {
                return Err(Error::Domain(format!("{} produced a non-finite score", info.id)));
            }
            if info.output == OutputKind::Probability && !(0.0..=1.0).contains(&s) {
                return Err(Error::Domain(format!(
                    "{} declared probabilities but scored {s}",
                    info.id
                )));
            }
        }
        out.extend(scores);
    }
    Ok(out)
}

pub fn embed_batch(oracle: &dyn ConfidenceOracle, images: &[FaceImage], batch: usize) -> Result<Vec<Embedding>> {
    let info = oracle.info();
    if !info.capabilities.embeddings {
        return Err(Error::Unsupported(format!("{} does not expose embeddings", info.id)));
    }
    if batch == 0 {
        return Err(Error::Input("batch size must be >= 1".into()));
    }
    check_inputs(info, images)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch) {
        let feats = oracle.embed(chunk)?;
        if feats.len() != chunk.len() {
            return Err(Error::Transport {
                msg: format!(
                    "{} returned {} embeddings for {} images",
                    info.id,
                    feats.len(),
                    chunk.len()
                ),
                attempts: 1,
                retryable: false,
            });
        }
        out.extend(feats);
    }
    Ok(out)
}

/// Re-initializes the top `k` layers of `oracle`, leaving `oracle` untouched.
/// The same `(k, seed)` always yields the same randomized model.
pub fn randomize_top_layers(oracle: &dyn ConfidenceOracle, k: usize, seed: u64) -> Result<Box<dyn ConfidenceOracle>> {
    let info = oracle.info();
    if !info.capabilities.randomizable {
        return Err(Error::Unsupported(format!("{} cannot be randomized", info.id)));
    }
    if k > oracle.layer_count() {
        return Err(Error::Input(format!(
            "cannot randomize {k} layers of {} ({} layers)",
            info.id,
            oracle.layer_count()
        )));
    }
    oracle.randomized(k, seed)
}
