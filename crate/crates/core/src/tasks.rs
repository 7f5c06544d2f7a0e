//! Confidence functions for embedding-based tasks: zero-shot recognition
//! against a labelled gallery, and pairwise face verification.

use std::path::Path;

use crate::canonical::{accumulate_drops, canonical_patch_size};
use crate::correspondence::DenseCorrespondence;
use crate::error::{Error, Result};
use crate::image::{Dims, FaceImage};
use crate::occlusion::{occlude, sweep, OcclusionSpec, VertexDrop};
use crate::oracle::{embed_batch, Capabilities, ConfidenceOracle, Embedding, OracleInfo, OutputKind};
use crate::saliency::{Frame, MapMeta, SaliencyMap};

/// Cosine similarity of two same-length, non-zero embeddings.
pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::Domain(format!(
            "embedding sizes differ: {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine of a zero-norm embedding".into()));
    }
    let dot: f64 = u.values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Labelled reference embeddings for nearest-neighbour recognition.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    entries: Vec<(usize, Embedding)>,
}

impl Gallery {
    pub fn new(entries: Vec<(usize, Embedding)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Validation("gallery is empty".into()));
        }
        let dim = entries[0].1.dim();
        for (i, (_, e)) in entries.iter().enumerate() {
            if e.dim() != dim {
                return Err(Error::Validation(format!(
                    "gallery entry {i} has {} dims, expected {dim}",
                    e.dim()
                )));
            }
            if e.norm() == 0.0 {
                return Err(Error::Validation(format!("gallery entry {i} has zero norm")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, Embedding)] {
        &self.entries
    }

    /// Reads `D N` followed by `N` lines of `class v1 .. vD`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hl, header) = lines.next().ok_or_else(|| err(1, "missing `D N` header".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(hl, format!("bad header {header:?}")))?;
        let [dim, count] = nums[..] else {
            return Err(err(hl, format!("header needs `D N`, found {header:?}")));
        };
        let mut entries = Vec::with_capacity(count);
        for (line, row) in lines {
            let mut fields = row.split_whitespace();
            let class: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| err(line, "bad class id".into()))?;
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>().map_err(|_| err(line, format!("bad value {f:?}"))))
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(err(line, format!("expected {dim} values, found {}", values.len())));
            }
            entries.push((class, Embedding::new(values).map_err(|e| err(line, e.to_string()))?));
        }
        if entries.len() != count {
            return Err(Error::Validation(format!(
                "gallery header declares {count} entries, found {}",
                entries.len()
            )));
        }
        Self::new(entries)
    }

    /// Highest cosine between `query` and any entry labelled `class`; ties go
    /// to the lowest gallery index.
    pub fn best_match(&self, query: &Embedding, class: usize) -> Result<f64> {
        let mut best: Option<f64> = None;
        for (c, e) in &self.entries {
            if *c == class {
                let s = cosine(query, e)?;
                if best.is_none_or(|b| s > b) {
                    best = Some(s);
                }
            }
        }
        best.ok_or_else(|| Error::Input(format!("class {class} has no gallery entries")))
    }
}

/// Confidence that `query` belongs to `class`: cosine to the closest gallery
/// entry with that label.
pub fn zero_shot_confidence(
    query: &FaceImage,
    class: usize,
    gallery: &Gallery,
    oracle: &dyn ConfidenceOracle,
) -> Result<f64> {
    let q = embed_batch(oracle, std::slice::from_ref(query), 1)?.remove(0);
    gallery.best_match(&q, class)
}

/// Scores images with [`zero_shot_confidence`] so the occlusion pipeline can
/// use an embedding model as an ordinary oracle.
pub struct ZeroShotOracle<'a> {
    inner: &'a dyn ConfidenceOracle,
    gallery: &'a Gallery,
    info: OracleInfo,
}

impl<'a> ZeroShotOracle<'a> {
    pub fn new(inner: &'a dyn ConfidenceOracle, gallery: &'a Gallery) -> Result<Self> {
        if !inner.info().capabilities.embeddings {
            return Err(Error::Unsupported(format!(
                "{} does not expose embeddings",
                inner.info().id
            )));
        }
        let info = OracleInfo {
            id: format!("zero-shot({})", inner.info().id),
            input: inner.info().input,
            classes: None,
            capabilities: Capabilities {
                scores: true,
                ..Capabilities::default()
            },
            output: OutputKind::Similarity,
        };
        Ok(Self { inner, gallery, info })
    }
}

impl ConfidenceOracle for ZeroShotOracle<'_> {
    fn info(&self) -> &OracleInfo {
        &self.info
    }

    fn score(&self, images: &[FaceImage], class: usize) -> Result<Vec<f64>> {
        self.inner
            .embed(images)?
            .iter()
            .map(|q| self.gallery.best_match(q, class))
            .collect()
    }
}

/// Which way the verification label turns the threshold margin into a
/// confidence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelConvention {
    /// `c * (tau - cos)`.
    #[default]
    Literal,
    /// `c * (cos - tau)`.
    Flipped,
}

#[derive(Debug, Clone)]
pub struct VerificationPair {
    pub first: FaceImage,
    pub second: FaceImage,
    label: i8,
    threshold: f64,
    pub convention: LabelConvention,
}

impl VerificationPair {
    pub fn new(first: FaceImage, second: FaceImage, label: i8, threshold: f64) -> Result<Self> {
        if label != 1 && label != -1 {
            return Err(Error::Validation(format!("pair label must be -1 or +1, got {label}")));
        }
        if !threshold.is_finite() {
            return Err(Error::Validation("verification threshold must be finite".into()));
        }
        Ok(Self {
            first,
            second,
            label,
            threshold,
            convention: LabelConvention::Literal,
        })
    }

    pub fn with_convention(mut self, convention: LabelConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn label(&self) -> i8 {
        self.label
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn confidence_from_cosine(&self, cos: f64) -> f64 {
        let c = f64::from(self.label);
        match self.convention {
            LabelConvention::Literal => c * (self.threshold - cos),
            LabelConvention::Flipped => c * (cos - self.threshold),
        }
    }

    fn confidence_from(&self, a: &Embedding, b: &Embedding) -> Result<f64> {
        Ok(self.confidence_from_cosine(cosine(a, b)?))
    }
}

pub fn verification_confidence(pair: &VerificationPair, oracle: &dyn ConfidenceOracle) -> Result<f64> {
    let e = embed_batch(oracle, &[pair.first.clone(), pair.second.clone()], 2)?;
    pair.confidence_from(&e[0], &e[1])
}

/// Canonical saliency of a verification decision: vertex `n` is occluded in
/// both images at once (at each image's own `M_I[n]`), the drop in
/// verification confidence is splatted at the canonical location taken from
/// `corr_first`.
pub fn paired_cis(
    pair: &VerificationPair,
    corr_first: &DenseCorrespondence,
    corr_second: &DenseCorrespondence,
    canonical: Dims,
    oracle: &dyn ConfidenceOracle,
    spec: &OcclusionSpec,
) -> Result<SaliencyMap> {
    spec.validate()?;
    if corr_first.len() != corr_second.len() {
        return Err(Error::Validation(format!(
            "pair meshes differ in size: {} vs {}",
            corr_first.len(),
            corr_second.len()
        )));
    }
    if corr_first.canonical_dims() != canonical || corr_second.canonical_dims() != canonical {
        return Err(Error::Validation(
            "pair correspondences target a different canonical face".into(),
        ));
    }
    if corr_first.input_dims() != pair.first.dims() || corr_second.input_dims() != pair.second.dims() {
        return Err(Error::Validation(
            "pair correspondences do not match the image sizes".into(),
        ));
    }
    let visible: Vec<usize> = (0..corr_first.len())
        .filter(|&n| corr_first.visible()[n] && corr_second.visible()[n])
        .collect();
    if visible.is_empty() {
        return Err(Error::Validation("no vertex is visible in both images".into()));
    }

    let base = verification_confidence(pair, oracle)?;
    let occluded = sweep(&visible, spec.batch, |chunk| {
        let mut images = Vec::with_capacity(2 * chunk.len());
        for &n in chunk {
            images.push(occlude(&pair.first, corr_first.input_points()[n], spec)?);
            images.push(occlude(&pair.second, corr_second.input_points()[n], spec)?);
        }
        let feats = embed_batch(oracle, &images, 2 * spec.batch)?;
        feats
            .chunks_exact(2)
            .map(|p| pair.confidence_from(&p[0], &p[1]))
            .collect()
    })?;
    let drops: Vec<VertexDrop> = visible
        .into_iter()
        .zip(occluded)
        .map(|(vertex, s)| VertexDrop { vertex, drop: base - s })
        .collect();
    let patch = canonical_patch_size(spec.size, canonical.height, pair.first.height());
    Ok(accumulate_drops(&drops, corr_first, patch)?
        .to_map(Frame::Canonical)?
        .with_meta(MapMeta {
            patch_size: spec.size,
            stride: 1,
            source: format!("verification({})", oracle.info().id),
            output_kind: OutputKind::Similarity.as_str().into(),
        }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::synthetic::IdentityEmbeddingOracle;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_fixtures() {
        assert!((cosine(&emb(&[1.0, 2.0, 3.0]), &emb(&[1.0, 2.0, 3.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let r = cosine(&emb(&[1.0, 0.0]), &emb(&[1.0, 1.0])).unwrap();
        assert!((r - 0.707_106_78).abs() < 1e-8);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&emb(&[0.0, 0.0]), &emb(&[1.0, 0.0])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(cosine(&emb(&[1.0]), &emb(&[1.0, 0.0])), Err(Error::Domain(_))));
    }

    #[test]
    fn gallery_picks_best_same_class_entry() {
        let q = emb(&[1.0, 0.0]);
        // cosines to q: 0.3 and 0.8 for class 4, 1.0 for class 1
        let g = Gallery::new(vec![
            (4, emb(&[0.3, (1.0f64 - 0.09).sqrt()])),
            (1, emb(&[2.0, 0.0])),
            (4, emb(&[0.8, 0.6])),
        ])
        .unwrap();
        assert!((g.best_match(&q, 4).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(g.best_match(&q, 9), Err(Error::Input(_))));
    }

    #[test]
    fn zero_shot_with_identity_embeddings() {
        let o = IdentityEmbeddingOracle::new();
        let img = FaceImage::new(2, 1, 1, vec![3, 4]).unwrap();
        let g = Gallery::new(vec![(0, emb(&[3.0, 4.0])), (1, emb(&[-4.0, 3.0]))]).unwrap();
        assert!((zero_shot_confidence(&img, 0, &g, &o).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(zero_shot_confidence(&img, 1, &g, &o).unwrap(), 0.0);
    }

    #[test]
    fn gallery_file_format() {
        let g = Gallery::parse("2 2\n0 1 0\n3 0.5 0.5\n", Path::new("g.txt")).unwrap();
        assert_eq!(g.entries()[1].0, 3);
        assert!(Gallery::parse("2 2\n0 1 0\n", Path::new("g")).is_err());
        assert!(matches!(
            Gallery::parse("2 1\n0 1 0 4\n", Path::new("g")),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(Gallery::parse("2 1\n0 0 0\n", Path::new("g")).is_err());
    }

    #[test]
    fn verification_formula() {
        let img = FaceImage::new(1, 1, 1, vec![1]).unwrap();
        let pair = |label, tau| VerificationPair::new(img.clone(), img.clone(), label, tau).unwrap();
        assert!((pair(1, 0.5).confidence_from_cosine(0.9) - -0.4).abs() < 1e-15);
        assert!((pair(-1, 0.5).confidence_from_cosine(0.9) - 0.4).abs() < 1e-15);
        assert_eq!(pair(1, 0.3).confidence_from_cosine(0.3), 0.0);
        assert_eq!(pair(-1, 0.3).confidence_from_cosine(0.3), 0.0);
        let flipped = pair(1, 0.5).with_convention(LabelConvention::Flipped);
        assert!((flipped.confidence_from_cosine(0.9) - 0.4).abs() < 1e-15);
        assert!(VerificationPair::new(img.clone(), img, 0, 0.5).is_err());
    }
}
