//! Occluded variants of an input image and the confidence drop each causes.

use rayon::prelude::*;

use crate::correspondence::DenseCorrespondence;
use crate::error::{Error, Result};
use crate::image::{Dims, FaceImage, Point2};
use crate::oracle::{score_batch, ConfidenceOracle, DEFAULT_BATCH};

/// Patch side used when none is configured.
pub const DEFAULT_PATCH: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OcclusionSpec {
    /// Side of the occluding square, in input-image pixels.
    pub size: usize,
    /// Intensity written into every channel of the occluded square.
    pub fill: u8,
    /// Images per oracle call.
    pub batch: usize,
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self {
            size: DEFAULT_PATCH,
            fill: 0,
            batch: DEFAULT_BATCH,
        }
    }
}

impl OcclusionSpec {
    pub fn new(size: usize, fill: u8, batch: usize) -> Result<Self> {
        let spec = Self { size, fill, batch };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Validation("occlusion size must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Validation("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Confidence drop caused by occluding around vertex `vertex`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexDrop {
    pub vertex: usize,
    pub drop: f64,
}

/// Pixel rows (or columns) covered by a `size`-wide square centred on `center`,
/// clipped to `[0, len)`. Odd sizes are symmetric; even sizes extend one
/// pixel further on the low side.
pub(crate) fn patch_span(center: i64, size: usize, len: usize) -> std::ops::Range<usize> {
    let start = center - (size / 2) as i64;
    let end = start + size as i64;
    let lo = start.clamp(0, len as i64) as usize;
    let hi = end.clamp(0, len as i64) as usize;
    lo..hi
}

/// Pixels `(x, y)` of the square patch around `center`, clipped to `dims`.
pub(crate) fn patch_pixels(center: Point2, size: usize, dims: Dims) -> impl Iterator<Item = (usize, usize)> {
    let (cx, cy) = center.pixel();
    let xs = patch_span(cx, size, dims.width);
    patch_span(cy, size, dims.height).flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

/// Copy of `image` with the `spec.size` square around `center` set to `spec.fill`.
pub fn occlude(image: &FaceImage, center: Point2, spec: &OcclusionSpec) -> Result<FaceImage> {
    spec.validate()?;
    let (cx, cy) = center.pixel();
    if !image.dims().contains(cx, cy) {
        return Err(Error::Input(format!(
            "occlusion centre ({}, {}) outside {}x{} image",
            center.x,
            center.y,
            image.width(),
            image.height()
        )));
    }
    let mut out = image.clone();
    for (x, y) in patch_pixels(center, spec.size, image.dims()) {
        out.pixel_mut(x, y).fill(spec.fill);
    }
    Ok(out)
}

/// Runs `score` over `vertices` in chunks of `batch`, possibly in parallel.
/// Results come back in vertex order whatever the scheduling. A failing chunk
/// is reported with the vertex index range it covered.
pub(crate) fn sweep<F>(vertices: &[usize], batch: usize, score: F) -> Result<Vec<f64>>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    let chunks: Vec<Vec<f64>> = vertices
        .par_chunks(batch.max(1))
        .map(|chunk| {
            score(chunk).map_err(|e| Error::Oracle {
                vertices: chunk[0]..chunk[chunk.len() - 1] + 1,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Drop in `class` confidence when the patch around each visible vertex is
/// occluded. The unoccluded confidence is evaluated once.
pub fn vertex_drops(
    image: &FaceImage,
    corr: &DenseCorrespondence,
    oracle: &dyn ConfidenceOracle,
    class: usize,
    spec: &OcclusionSpec,
) -> Result<Vec<VertexDrop>> {
    spec.validate()?;
    if corr.input_dims() != image.dims() {
        return Err(Error::Validation(format!(
            "correspondence is for {}x{} images, input is {}x{}",
            corr.input_dims().width,
            corr.input_dims().height,
            image.width(),
            image.height()
        )));
    }
    let base = score_batch(oracle, std::slice::from_ref(image), class, 1)?[0];
    let visible: Vec<usize> = corr.visible_indices().collect();
    let points = corr.input_points();
    let occluded_scores = sweep(&visible, spec.batch, |chunk| {
        let images = chunk
            .iter()
            .map(|&n| occlude(image, points[n], spec))
            .collect::<Result<Vec<_>>>()?;
        score_batch(oracle, &images, class, spec.batch)
    })?;
    Ok(visible
        .into_iter()
        .zip(occluded_scores)
        .map(|(vertex, s)| VertexDrop { vertex, drop: base - s })
        .collect())
}
