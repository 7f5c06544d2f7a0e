//! Layer-randomization sanity check for canonical model saliency.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::{compute_cis, compute_cms, Sample};
use crate::error::{Error, Result};
use crate::image::Dims;
use crate::occlusion::OcclusionSpec;
use crate::oracle::{randomize_top_layers, ConfidenceOracle};
use crate::saliency::SaliencyMap;

/// Pearson correlation of the flattened maps; 0 if either map is constant.
pub fn map_similarity(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    if a.dims() != b.dims() || a.frame() != b.frame() {
        return Err(Error::Validation("maps differ in shape or frame".into()));
    }
    let n = a.values().len() as f64;
    let mean = |m: &SaliencyMap| m.values().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub k: Vec<usize>,
    pub similarity: Vec<f64>,
    pub seed: u64,
    pub oracle: String,
}

impl SanityReport {
    /// Advisory verdict: similarity never rises by more than `slack` from one
    /// step to the next, and ends below `final_max`.
    pub fn decays(&self, slack: f64, final_max: f64) -> bool {
        let monotone = self.similarity.windows(2).all(|w| w[1] <= w[0] + slack);
        monotone
            && self
                .similarity
                .last()
                .is_some_and(|&s| self.k.len() == 1 || s < final_max)
    }
}

fn cms_for(
    oracle: &dyn ConfidenceOracle,
    samples: &[Sample],
    canonical: Dims,
    spec: &OcclusionSpec,
) -> Result<SaliencyMap> {
    let maps = samples
        .iter()
        .map(|s| compute_cis(&s.image, &s.corr, canonical, oracle, s.class, spec))
        .collect::<Result<Vec<_>>>()?;
    compute_cms(&maps)
}

/// Compares the model saliency of `oracle` with that of copies whose top
/// `k = 1..=max_k` layers were re-drawn from `seed`.
pub fn sanity_check(
    oracle: &dyn ConfidenceOracle,
    samples: &[Sample],
    canonical: Dims,
    spec: &OcclusionSpec,
    max_k: usize,
    seed: u64,
) -> Result<SanityReport> {
    if samples.is_empty() {
        return Err(Error::Input("sanity check needs at least one image".into()));
    }
    let reference = cms_for(oracle, samples, canonical, spec)?;
    let rest = (1..=max_k)
        .into_par_iter()
        .map(|k| {
            let randomized = randomize_top_layers(oracle, k, seed)?;
            map_similarity(&reference, &cms_for(randomized.as_ref(), samples, canonical, spec)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut similarity = Vec::with_capacity(max_k + 1);
    // k = 0 is the intact oracle compared with itself
    similarity.push(1.0);
    similarity.extend(rest);
    Ok(SanityReport {
        k: (0..=max_k).collect(),
        similarity,
        seed,
        oracle: oracle.info().id.clone(),
    })
}
