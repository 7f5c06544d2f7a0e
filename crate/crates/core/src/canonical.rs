//! Projection of occlusion drops onto the canonical face.
//!
//! Each visible vertex's drop is added to every pixel of a square patch
//! around its canonical location while a parallel count matrix records how
//! many vertices touched each pixel. Dividing the two (0 where nothing
//! landed) removes the bias from vertices that crowd together where the face
//! curves away from the camera. Dataset-level maps are the pixelwise mean of
//! per-image maps.

use rayon::prelude::*;

use crate::correspondence::DenseCorrespondence;
use crate::error::{Error, Result};
use crate::image::{round_half_up, Dims, FaceImage, Point2};
use crate::occlusion::{patch_pixels, vertex_drops, OcclusionSpec, VertexDrop};
use crate::oracle::ConfidenceOracle;
use crate::saliency::{CountMatrix, Frame, MapMeta, SaliencyMap};

/// Occlusion size rescaled from input to canonical pixels, rounding halves
/// up and never below 1.
pub fn canonical_patch_size(size: usize, canonical_height: usize, input_height: usize) -> usize {
    let scaled = size as f64 * canonical_height as f64 / input_height as f64;
    round_half_up(scaled).max(1) as usize
}

/// One input of a dataset run.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: FaceImage,
    pub corr: DenseCorrespondence,
    pub class: usize,
}

/// Running sums and contribution counts on a fixed grid.
#[derive(Debug, Clone)]
pub struct CanonicalAccumulator {
    dims: Dims,
    patch: usize,
    sums: Vec<f64>,
    counts: CountMatrix,
}

impl CanonicalAccumulator {
    pub fn new(dims: Dims, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Validation("patch size must be >= 1".into()));
        }
        Ok(Self {
            dims,
            patch,
            sums: vec![0.0; dims.area()],
            counts: CountMatrix::zeros(dims),
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn counts(&self) -> &CountMatrix {
        &self.counts
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    /// Adds `value` to every pixel of the patch around `center`.
    pub fn splat(&mut self, center: Point2, value: f64) {
        for (x, y) in patch_pixels(center, self.patch, self.dims) {
            let i = y * self.dims.width + x;
            self.sums[i] += value;
            self.counts.bump(i);
        }
    }

    /// Sums divided by counts, 0 where the count is 0.
    pub fn normalized(&self) -> Vec<f64> {
        self.sums
            .iter()
            .zip(self.counts.counts())
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / f64::from(c) })
            .collect()
    }

    pub fn to_map(&self, frame: Frame) -> Result<SaliencyMap> {
        SaliencyMap::from_f64(self.dims, frame, &self.normalized())
    }
}

/// Splats precomputed drops onto the canonical grid of `corr`.
pub fn accumulate_drops(
    drops: &[VertexDrop],
    corr: &DenseCorrespondence,
    patch: usize,
) -> Result<CanonicalAccumulator> {
    let mut acc = CanonicalAccumulator::new(corr.canonical_dims(), patch)?;
    let points = corr.canonical_points();
    for d in drops {
        let p = points.get(d.vertex).ok_or_else(|| {
            Error::Validation(format!("drop for vertex {} beyond mesh of {}", d.vertex, points.len()))
        })?;
        acc.splat(*p, d.drop);
    }
    Ok(acc)
}

/// Canonical image saliency of `image` for `class`.
pub fn compute_cis(
    image: &FaceImage,
    corr: &DenseCorrespondence,
    canonical: Dims,
    oracle: &dyn ConfidenceOracle,
    class: usize,
    spec: &OcclusionSpec,
) -> Result<SaliencyMap> {
    Ok(cis_accumulator(image, corr, canonical, oracle, class, spec)?
        .to_map(Frame::Canonical)?
        .with_meta(MapMeta {
            patch_size: spec.size,
            stride: 1,
            source: oracle.info().id.clone(),
            output_kind: oracle.info().output.as_str().to_string(),
        }))
}

/// [`compute_cis`] before the final rounding to `f32`.
pub fn cis_accumulator(
    image: &FaceImage,
    corr: &DenseCorrespondence,
    canonical: Dims,
    oracle: &dyn ConfidenceOracle,
    class: usize,
    spec: &OcclusionSpec,
) -> Result<CanonicalAccumulator> {
    if corr.canonical_dims() != canonical {
        return Err(Error::Validation(format!(
            "correspondence targets a {}x{} canonical face, not {}x{}",
            corr.canonical_dims().width,
            corr.canonical_dims().height,
            canonical.width,
            canonical.height
        )));
    }
    if corr.visible_indices().next().is_none() {
        return Err(Error::Validation("no visible vertices".into()));
    }
    let drops = vertex_drops(image, corr, oracle, class, spec)?;
    let patch = canonical_patch_size(spec.size, canonical.height, image.height());
    accumulate_drops(&drops, corr, patch)
}

/// Distance from the running mean to the final mean after `images` maps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub images: usize,
    /// Mean absolute per-pixel difference.
    pub l1_per_pixel: f64,
}

/// 100, 500, 1000, 5000, 10000, ...
pub fn is_default_checkpoint(k: usize) -> bool {
    if k < 100 {
        return false;
    }
    let mut m = k;
    while m.is_multiple_of(10) {
        m /= 10;
    }
    m == 1 || m == 5
}

/// Streaming pixelwise mean of canonical maps.
///
/// Pixel sums are kept exactly, so the mean does not depend on the order the
/// maps arrive in and matches [`compute_cms`] bit for bit.
#[derive(Debug, Clone)]
pub struct CmsStream {
    frame: Frame,
    dims: Option<Dims>,
    sums: Vec<ExactSum>,
    count: usize,
    checkpoint: fn(usize) -> bool,
    snapshots: Vec<(usize, Vec<f32>)>,
}

impl Default for CmsStream {
    fn default() -> Self {
        Self::new()
    }
}

impl CmsStream {
    pub fn new() -> Self {
        Self::with_checkpoints(is_default_checkpoint)
    }

    pub fn with_checkpoints(checkpoint: fn(usize) -> bool) -> Self {
        Self::for_frame(Frame::Canonical, checkpoint)
    }

    /// Averages maps of `frame` instead of canonical maps. Image-frame means
    /// only make sense when every input shares one pixel grid, as in the
    /// unaligned baselines.
    pub fn for_frame(frame: Frame, checkpoint: fn(usize) -> bool) -> Self {
        Self {
            frame,
            dims: None,
            sums: Vec::new(),
            count: 0,
            checkpoint,
            snapshots: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, map: &SaliencyMap) -> Result<()> {
        if map.frame() != self.frame {
            return Err(Error::Validation(format!(
                "expected {:?}-frame maps, got {:?}",
                self.frame,
                map.frame()
            )));
        }
        match self.dims {
            None => {
                self.dims = Some(map.dims());
                self.sums = vec![ExactSum::default(); map.dims().area()];
            }
            Some(d) if d != map.dims() => {
                return Err(Error::Validation(format!(
                    "map is {}x{}, earlier maps were {}x{}",
                    map.dims().width,
                    map.dims().height,
                    d.width,
                    d.height
                )))
            }
            Some(_) => {}
        }
        self.sums
            .par_iter_mut()
            .zip(map.values().par_iter())
            .for_each(|(s, &v)| s.add(f64::from(v)));
        self.count += 1;
        if (self.checkpoint)(self.count) {
            self.snapshots.push((self.count, self.mean_values()));
        }
        Ok(())
    }

    fn mean_values(&self) -> Vec<f32> {
        let n = self.count as f64;
        self.sums.par_iter().map(|s| (s.value() / n) as f32).collect()
    }

    pub fn mean(&self) -> Result<SaliencyMap> {
        let dims = self
            .dims
            .ok_or_else(|| Error::Validation("model saliency needs at least one map".into()))?;
        SaliencyMap::new(dims, self.frame, self.mean_values())
    }

    /// Final mean plus the distance of every checkpoint snapshot to it.
    pub fn finish(self) -> Result<(SaliencyMap, Vec<Checkpoint>)> {
        let cms = self.mean()?;
        let trace = self
            .snapshots
            .iter()
            .map(|(k, snap)| Checkpoint {
                images: *k,
                l1_per_pixel: snap
                    .iter()
                    .zip(cms.values())
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
                    .sum::<f64>()
                    / snap.len() as f64,
            })
            .collect();
        Ok((cms, trace))
    }
}

/// Canonical model saliency: the pixelwise mean of canonical maps.
pub fn compute_cms(maps: &[SaliencyMap]) -> Result<SaliencyMap> {
    let mut stream = CmsStream::with_checkpoints(|_| false);
    for m in maps {
        stream.push(m)?;
    }
    stream.mean()
}

/// Streams `maps` into a mean, recording the default convergence checkpoints.
pub fn cms_streaming<I>(maps: I) -> Result<(SaliencyMap, Vec<Checkpoint>)>
where
    I: IntoIterator<Item = Result<SaliencyMap>>,
{
    let mut stream = CmsStream::new();
    for m in maps {
        stream.push(&m?)?;
    }
    stream.finish()
}

/// Carries a canonical map back onto an input face: each visible vertex reads
/// the canonical value under `M_F[n]` and splats it over a `patch`-wide square
/// around `M_I[n]`, count-normalized like the forward projection.
pub fn reproject(map: &SaliencyMap, corr: &DenseCorrespondence, target: Dims, patch: usize) -> Result<SaliencyMap> {
    if map.frame() != Frame::Canonical {
        return Err(Error::Validation("only canonical maps can be reprojected".into()));
    }
    if map.dims() != corr.canonical_dims() {
        return Err(Error::Validation(format!(
            "map is {}x{}, correspondence expects a {}x{} canonical face",
            map.dims().width,
            map.dims().height,
            corr.canonical_dims().width,
            corr.canonical_dims().height
        )));
    }
    if target != corr.input_dims() {
        return Err(Error::Validation(format!(
            "target is {}x{}, correspondence was fitted on {}x{}",
            target.width,
            target.height,
            corr.input_dims().width,
            corr.input_dims().height
        )));
    }
    let mut acc = CanonicalAccumulator::new(target, patch)?;
    for n in corr.visible_indices() {
        let (fx, fy) = corr.canonical_points()[n].pixel();
        let v = map.get(fx as usize, fy as usize);
        acc.splat(corr.input_points()[n], f64::from(v));
    }
    acc.to_map(Frame::Image)
}

/// Exactly rounded floating-point sum kept as non-overlapping partials.
#[derive(Debug, Clone, Default)]
struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    fn add(&mut self, mut x: f64) {
        let mut kept = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        self.partials.truncate(kept);
        self.partials.push(x);
    }

    /// The exact sum rounded once to nearest, ties to even.
    fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            let y = p[n - 1];
            n -= 1;
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}
