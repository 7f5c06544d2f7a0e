//! Faithfulness metrics built on negative explanation images.
//!
//! A heatmap is min-max normalized, rescaled to a fixed pixel budget `s`, and
//! used to darken the image: `E = (1 - H) * I`. Comparing the model's
//! confidence on `E` with that on `I` gives Average Drop %, % Increase in
//! Confidence, and (across methods) Win %.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Dims, FaceImage};
use crate::saliency::{read_saliency, Frame, SaliencyMap};

/// Fraction of the pixel count used as the heatmap budget `s` by default.
pub const DEFAULT_BUDGET_FRACTION: f64 = 0.15;

pub fn default_scale(dims: Dims) -> f64 {
    DEFAULT_BUDGET_FRACTION * dims.area() as f64
}

/// Non-negative heatmap whose pixels sum to `scale` (or all zero when the
/// source was constant).
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedHeatmap {
    dims: Dims,
    values: Vec<f64>,
    scale: f64,
}

impl StandardizedHeatmap {
    /// Wraps values that are already on the explanation scale; `scale` is
    /// recorded as their budget.
    pub fn from_values(dims: Dims, values: Vec<f64>, scale: f64) -> Result<Self> {
        if values.len() != dims.area() {
            return Err(Error::Validation(format!(
                "{} values for a {}x{} heatmap",
                values.len(),
                dims.width,
                dims.height
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("heatmap values must be finite".into()));
        }
        Ok(Self { dims, values, scale })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

pub fn standardize(h: &SaliencyMap, scale: f64) -> Result<StandardizedHeatmap> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Input(format!("heatmap budget must be positive, got {scale}")));
    }
    let vals: Vec<f64> = h.values().iter().map(|&v| f64::from(v)).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        let unit: Vec<f64> = vals.iter().map(|v| (v - lo) / (hi - lo)).collect();
        let total: f64 = unit.iter().sum();
        unit.into_iter().map(|v| v * scale / total).collect()
    } else {
        vec![0.0; vals.len()]
    };
    Ok(StandardizedHeatmap {
        dims: h.dims(),
        values,
        scale,
    })
}

/// `E = (1 - H) * I` per channel, with `H` clipped to `[0, 1]` and the result
/// rounded half-up to integer intensities.
pub fn negative_explanation(image: &FaceImage, h: &StandardizedHeatmap) -> Result<FaceImage> {
    if h.dims != image.dims() {
        return Err(Error::Validation(format!(
            "heatmap is {}x{}, image is {}x{}",
            h.dims.width,
            h.dims.height,
            image.width(),
            image.height()
        )));
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let keep = 1.0 - h.values[y * h.dims.width + x].clamp(0.0, 1.0);
            for v in out.pixel_mut(x, y) {
                *v = (keep * f64::from(*v) + 0.5).floor() as u8;
            }
        }
    }
    Ok(out)
}

/// Confidences for one image: unmodified, and on each method's explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub image: String,
    pub original: f64,
    pub explanations: BTreeMap<String, f64>,
}

impl EvaluationRecord {
    pub fn new(image: impl Into<String>, original: f64) -> Self {
        Self {
            image: image.into(),
            original,
            explanations: BTreeMap::new(),
        }
    }

    pub fn with(mut self, method: impl Into<String>, confidence: f64) -> Self {
        self.explanations.insert(method.into(), confidence);
        self
    }

    fn explanation(&self, method: &str) -> Result<f64> {
        let v = self
            .explanations
            .get(method)
            .copied()
            .ok_or_else(|| Error::Input(format!("image {} has no confidence for method {method}", self.image)))?;
        if !v.is_finite() || !self.original.is_finite() {
            return Err(Error::Input(format!(
                "image {} has a non-finite confidence",
                self.image
            )));
        }
        Ok(v)
    }
}

fn non_empty(records: &[EvaluationRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::Input("no evaluation records".into()))
    } else {
        Ok(())
    }
}

/// Mean over images of `max(0, (M(I) - M(E)) / M(I)) * 100`.
pub fn average_drop(records: &[EvaluationRecord], method: &str) -> Result<f64> {
    non_empty(records)?;
    let mut total = 0.0;
    for r in records {
        let e = r.explanation(method)?;
        if r.original <= 0.0 {
            return Err(Error::Input(format!(
                "image {} has non-positive confidence {}",
                r.image, r.original
            )));
        }
        total += ((r.original - e) / r.original).max(0.0) * 100.0;
    }
    Ok(total / records.len() as f64)
}

/// Percentage of images whose explanation confidence is strictly above the
/// original confidence.
pub fn pct_increase(records: &[EvaluationRecord], method: &str) -> Result<f64> {
    non_empty(records)?;
    let mut hits = 0usize;
    for r in records {
        if r.explanation(method)? > r.original {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// Share of images on which each method gives the lowest explanation
/// confidence. Exact ties split the image equally between the tied methods.
pub fn win_pct(records: &[EvaluationRecord]) -> Result<BTreeMap<String, f64>> {
    non_empty(records)?;
    let methods: BTreeSet<&String> = records.iter().flat_map(|r| r.explanations.keys()).collect();
    if methods.is_empty() {
        return Err(Error::Input("no methods to compare".into()));
    }
    let mut wins: BTreeMap<String, f64> = methods.iter().map(|m| ((*m).clone(), 0.0)).collect();
    for r in records {
        let scores = methods
            .iter()
            .map(|m| Ok((*m, r.explanation(m)?)))
            .collect::<Result<Vec<_>>>()?;
        let best = scores.iter().map(|(_, s)| *s).fold(f64::INFINITY, f64::min);
        let tied: Vec<&String> = scores.iter().filter(|(_, s)| *s == best).map(|(m, _)| *m).collect();
        let share = 1.0 / tied.len() as f64;
        for m in tied {
            *wins.get_mut(m).expect("known method") += share;
        }
    }
    let n = records.len() as f64;
    Ok(wins.into_iter().map(|(m, w)| (m, 100.0 * w / n)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub avg_drop: f64,
    pub pct_increase: f64,
    pub win_pct: f64,
}

/// All three metrics for every method found in `records`.
pub fn score_methods(records: &[EvaluationRecord]) -> Result<BTreeMap<String, MethodScores>> {
    let wins = win_pct(records)?;
    wins.into_iter()
        .map(|(m, win)| {
            Ok((
                m.clone(),
                MethodScores {
                    avg_drop: average_drop(records, &m)?,
                    pct_increase: pct_increase(records, &m)?,
                    win_pct: win,
                },
            ))
        })
        .collect()
}

/// Loads a heatmap produced elsewhere: a `.csm` file, or any 8-bit image
/// whose gray levels are rescaled to `[0, 1]`.
pub fn import_heatmap(path: impl AsRef<Path>) -> Result<SaliencyMap> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csm")) {
        return read_saliency(path);
    }
    let img = FaceImage::load(path)?;
    let mut values = Vec::with_capacity(img.width() * img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = img.pixel(x, y);
            let g = px.iter().map(|&v| f32::from(v)).sum::<f32>() / px.len() as f32;
            values.push(g / 255.0);
        }
    }
    SaliencyMap::new(img.dims(), Frame::Image, values)
}
