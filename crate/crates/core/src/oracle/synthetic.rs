//! In-process oracles with closed-form behaviour, used as test fixtures,
//! benchmarks, and local plugins for the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Capabilities, ConfidenceOracle, Embedding, InputShape, OracleInfo, OutputKind};
use crate::error::{Error, Result};
use crate::image::{Dims, FaceImage};

fn scores_only(id: impl Into<String>, output: OutputKind) -> OracleInfo {
    OracleInfo {
        id: id.into(),
        input: None,
        classes: None,
        capabilities: Capabilities {
            scores: true,
            ..Capabilities::default()
        },
        output,
    }
}

/// Mean over channels of pixel `(x, y)`.
fn gray(img: &FaceImage, x: usize, y: usize) -> f64 {
    let px = img.pixel(x, y);
    px.iter().map(|&v| f64::from(v)).sum::<f64>() / px.len() as f64
}

/// Scores every image with the same value.
#[derive(Debug, Clone)]
pub struct ConstantOracle {
    info: OracleInfo,
    value: f64,
}

impl ConstantOracle {
    pub fn new(value: f64) -> Self {
        Self {
            info: scores_only(format!("constant:{value}"), OutputKind::Unknown),
            value,
        }
    }

    pub fn with_input(mut self, shape: InputShape) -> Self {
        self.info.input = Some(shape);
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.info.classes = Some(classes);
        self
    }

    pub fn with_output(mut self, output: OutputKind) -> Self {
        self.info.output = output;
        self
    }
}

impl ConfidenceOracle for ConstantOracle {
    fn info(&self) -> &OracleInfo {
        &self.info
    }

    fn score(&self, images: &[FaceImage], _class: usize) -> Result<Vec<f64>> {
        Ok(vec![self.value; images.len()])
    }
}

/// Mean intensity over all pixels and channels, scaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct MeanIntensityOracle {
    info: OracleInfo,
}

impl MeanIntensityOracle {
    pub fn new() -> Self {
        Self {
            info: scores_only("mean-intensity", OutputKind::Probability),
        }
    }
}

impl Default for MeanIntensityOracle {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfidenceOracle for MeanIntensityOracle {
    fn info(&self) -> &OracleInfo {
        &self.info
    }

    fn score(&self, images: &[FaceImage], _class: usize) -> Result<Vec<f64>> {
        Ok(images
            .iter()
            .map(|img| {
                let total: u64 = img.data().iter().map(|&v| u64::from(v)).sum();
                total as f64 / (255.0 * img.data().len() as f64)
            })
            .collect())
    }
}

/// `sum_i w_i * I_i` over the raw interleaved intensities.
#[derive(Debug, Clone)]
pub struct LinearOracle {
    info: OracleInfo,
    weights: Vec<f64>,
}

impl LinearOracle {
    pub fn new(shape: InputShape, weights: Vec<f64>) -> Result<Self> {
        let n = shape.width * shape.height * shape.channels;
        if weights.len() != n {
            return Err(Error::Validation(format!(
                "{} weights for {n} intensities",
                weights.len()
            )));
        }
        let mut info = scores_only("linear", OutputKind::Unknown);
        info.input = Some(shape);
        Ok(Self { info, weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl ConfidenceOracle for LinearOracle {
    fn info(&self) -> &OracleInfo {
        &self.info
    }

    fn score(&self, images: &[FaceImage], _class: usize) -> Result<Vec<f64>> {
        Ok(images
            .iter()
            .map(|img| {
                img.data()
                    .iter()
                    .zip(&self.weights)
                    .map(|(&v, w)| w * f64::from(v))
                    .sum()
            })
            .collect())
    }
}

/// Reads only the pixels inside a disk; scores their mean intensity in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct DiskOracle {
    info: OracleInfo,
    cx: f64,
    cy: f64,
    radius: f64,
}

impl DiskOracle {
    pub fn new(cx: f64, cy: f64, radius: f64) -> Self {
        Self {
            info: scores_only(format!("disk:{cx},{cy},{radius}"), OutputKind::Probability),
            cx,
            cy,
            radius,
        }
    }
}

impl ConfidenceOracle for DiskOracle {
    fn info(&self) -> &OracleInfo {
        &self.info
    }

    fn score(&self, images: &[FaceImage], _class: usize) -> Result<Vec<f64>> {
        Ok(images
            .iter()
            .map(|img| {
                let (mut sum, mut n) = (0.0, 0usize);
                for y in 0..img.height() {
                    for x in 0..img.width() {
                        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
                        if dx * dx + dy * dy <= self.radius * self.radius {
                            sum += gray(img, x, y);
                            n += 1;
                        }
                    }
                }
                if n == 0 {
                    0.0
                } else {
                    sum / (255.0 * n as f64)
                }
            })
            .collect())
    }
}

/// Translation-invariant detector: the brightest `window`x`window` mean
/// anywhere in the image, scaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct PeakOracle {
    info: OracleInfo,
    window: usize,
}

impl PeakOracle {
    pub fn new(window: usize) -> Self {
        Self {
            info: scores_only(format!("peak:{window}"), OutputKind::Probability),
            window: window.max(1),
        }
    }
}

impl ConfidenceOracle for PeakOracle {
    fn info(&self) -> &OracleInfo {
        &self.info
    }

    fn score(&self, images: &[FaceImage], _class: usize) -> Result<Vec<f64>> {
        Ok(images
            .iter()
            .map(|img| {
                let (w, h) = (img.width(), img.height());
                let win = self.window.min(w).min(h);
                // summed-area table over the gray image
                let mut sat = vec![0.0f64; (w + 1) * (h + 1)];
                for y in 0..h {
                    for x in 0..w {
                        sat[(y + 1) * (w + 1) + x + 1] =
                            gray(img, x, y) + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x]
                                - sat[y * (w + 1) + x];
                    }
                }
                let mut best = 0.0f64;
                for y in 0..=h - win {
                    for x in 0..=w - win {
                        let s = sat[(y + win) * (w + 1) + x + win]
                            - sat[y * (w + 1) + x + win]
                            - sat[(y + win) * (w + 1) + x]
                            + sat[y * (w + 1) + x];
                        best = best.max(s);
                    }
                }
                best / (255.0 * (win * win) as f64)
            })
            .collect())
    }
}

/// Embeds an image as its flattened intensities.
#[derive(Debug, Clone)]
pub struct IdentityEmbeddingOracle {
    info: OracleInfo,
}

impl IdentityEmbeddingOracle {
    pub fn new() -> Self {
        let mut info = scores_only("identity-embedding", OutputKind::Unknown);
        info.capabilities.embeddings = true;
        Self { info }
    }
}

impl Default for IdentityEmbeddingOracle {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfidenceOracle for IdentityEmbeddingOracle {
    fn info(&self) -> &OracleInfo {
        &self.info
    }

    fn score(&self, images: &[FaceImage], _class: usize) -> Result<Vec<f64>> {
        MeanIntensityOracle::new().score(images, 0)
    }

    fn embed(&self, images: &[FaceImage]) -> Result<Vec<Embedding>> {
        images
            .iter()
            .map(|img| Embedding::new(img.data().iter().map(|&v| f64::from(v)).collect()))
            .collect()
    }
}

/// Fully connected layer, `outputs x inputs` weights stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 || weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::Validation(format!(
                "dense layer {inputs}->{outputs} needs {} weights and {outputs} biases, got {} and {}",
                inputs * outputs,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    /// He-initialized layer with zero bias.
    pub fn he(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Same shape, parameters re-drawn i.i.d. from zero-mean normals with
    /// the standard deviation the weights (and biases) had before.
    fn redrawn(&self, rng: &mut ChaCha8Rng) -> Self {
        let redraw = |v: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
            let std = std_dev(v);
            if std == 0.0 {
                return vec![0.0; v.len()];
            }
            let normal = Normal::new(0.0, std).expect("positive std");
            v.iter().map(|_| normal.sample(rng)).collect()
        };
        let weights = redraw(&self.weights, rng);
        let bias = redraw(&self.bias, rng);
        Self {
            inputs: self.inputs,
            outputs: self.outputs,
            weights,
            bias,
        }
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Small ReLU network over grayscale intensities in `[0, 1]`, with a softmax
/// head. Layer 0 touches the input; the last layer produces class logits.
#[derive(Debug, Clone)]
pub struct MlpOracle {
    info: OracleInfo,
    layers: Vec<Dense>,
}

impl MlpOracle {
    pub fn new(id: impl Into<String>, input: Dims, layers: Vec<Dense>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Validation("network needs at least one layer".into()))?;
        if first.inputs != input.area() {
            return Err(Error::Validation(format!(
                "first layer takes {} inputs, image has {} pixels",
                first.inputs,
                input.area()
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Validation("consecutive layer sizes do not chain".into()));
            }
        }
        let classes = layers.last().map(|l| l.outputs);
        Ok(Self {
            info: OracleInfo {
                id: id.into(),
                input: Some(InputShape {
                    width: input.width,
                    height: input.height,
                    channels: 1,
                }),
                classes,
                capabilities: Capabilities {
                    scores: true,
                    embeddings: true,
                    randomizable: true,
                },
                output: OutputKind::Probability,
            },
            layers,
        })
    }

    /// He-initialized network with the given hidden and output widths.
    pub fn random(input: Dims, widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = input.area();
        let mut layers = Vec::with_capacity(widths.len());
        for &w in widths {
            layers.push(Dense::he(inputs, w, &mut rng));
            inputs = w;
        }
        Self::new(format!("mlp-random:{seed}"), input, layers)
    }

    /// Three-layer face-like network: first-layer units have Gaussian
    /// receptive fields on `features` (pixel centres), the upper layers
    /// combine them with positive weights so class 0 grows with brightness
    /// at the features.
    pub fn feature_detector(input: Dims, features: &[(f64, f64)], sigma: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.002).expect("positive std");
        let hidden1 = features.len();
        let mut w1 = Vec::with_capacity(hidden1 * input.area());
        for &(fx, fy) in features {
            for y in 0..input.height {
                for x in 0..input.width {
                    let d2 = (x as f64 - fx).powi(2) + (y as f64 - fy).powi(2);
                    w1.push((-d2 / (2.0 * sigma * sigma)).exp() / (sigma * sigma) + noise.sample(&mut rng));
                }
            }
        }
        let hidden2 = hidden1.div_ceil(2).max(2);
        let w2: Vec<f64> = (0..hidden2 * hidden1).map(|_| rng.random_range(0.3..1.0)).collect();
        let mut w3 = Vec::with_capacity(2 * hidden2);
        w3.extend((0..hidden2).map(|_| rng.random_range(0.5..1.0)));
        w3.extend((0..hidden2).map(|_| -rng.random_range(0.5..1.0)));
        let layers = vec![
            Dense::new(input.area(), hidden1, w1, vec![-0.5; hidden1])?,
            Dense::new(hidden1, hidden2, w2, vec![0.0; hidden2])?,
            Dense::new(hidden2, 2, w3, vec![0.0, 0.0])?,
        ];
        Self::new(format!("mlp-features:{seed}"), input, layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    fn input_vector(img: &FaceImage) -> Vec<f64> {
        let mut v = Vec::with_capacity(img.width() * img.height());
        for y in 0..img.height() {
            for x in 0..img.width() {
                v.push(gray(img, x, y) / 255.0);
            }
        }
        v
    }

    /// Activations of the last hidden layer, or the logits for a one-layer net.
    fn penultimate(&self, img: &FaceImage) -> Vec<f64> {
        let mut x = Self::input_vector(img);
        let hidden = self.layers.len().saturating_sub(1).max(1);
        for layer in &self.layers[..hidden] {
            x = layer.forward(&x);
            if self.layers.len() > 1 {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        x
    }

    fn probabilities(&self, img: &FaceImage) -> Vec<f64> {
        let mut x = Self::input_vector(img);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x);
            if i < last {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

impl ConfidenceOracle for MlpOracle {
    fn info(&self) -> &OracleInfo {
        &self.info
    }

    fn score(&self, images: &[FaceImage], class: usize) -> Result<Vec<f64>> {
        let classes = self.layers.last().map_or(0, |l| l.outputs);
        if class >= classes {
            return Err(Error::Input(format!("class {class} out of range ({classes} classes)")));
        }
        Ok(images.iter().map(|img| self.probabilities(img)[class]).collect())
    }

    fn embed(&self, images: &[FaceImage]) -> Result<Vec<Embedding>> {
        images.iter().map(|img| Embedding::new(self.penultimate(img))).collect()
    }

    fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn randomized(&self, k: usize, seed: u64) -> Result<Box<dyn ConfidenceOracle>> {
        let n = self.layers.len();
        if k > n {
            return Err(Error::Input(format!("cannot randomize {k} of {n} layers")));
        }
        let mut layers = self.layers.clone();
        for (idx, layer) in layers.iter_mut().enumerate().skip(n - k) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            *layer = layer.redrawn(&mut rng);
        }
        let mut out = self.clone();
        out.layers = layers;
        out.info.id = format!("{}+rand{k}@{seed}", self.info.id);
        Ok(Box::new(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{randomize_top_layers, score_batch};

    fn random_images(n: usize, dims: Dims, seed: u64) -> Vec<FaceImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| FaceImage::from_fn(dims.width, dims.height, |_, _| rng.random()).unwrap())
            .collect()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn randomizing_zero_layers_is_identity() {
        let dims = Dims::new(8, 8);
        let net = MlpOracle::random(dims, &[6, 3], 11).unwrap();
        let same = randomize_top_layers(&net, 0, 5).unwrap();
        let imgs = random_images(10, dims, 1);
        assert_eq!(
            score_batch(&net, &imgs, 1, 4).unwrap(),
            score_batch(same.as_ref(), &imgs, 1, 4).unwrap()
        );
    }

    #[test]
    fn seeded_randomization_repeats() {
        let dims = Dims::new(8, 8);
        let net = MlpOracle::random(dims, &[6, 3], 11).unwrap();
        let a = randomize_top_layers(&net, 1, 99).unwrap();
        let b = randomize_top_layers(&net, 1, 99).unwrap();
        let imgs = random_images(10, dims, 2);
        assert_eq!(
            score_batch(a.as_ref(), &imgs, 0, 3).unwrap(),
            score_batch(b.as_ref(), &imgs, 0, 3).unwrap()
        );
        // original untouched
        let c = MlpOracle::random(dims, &[6, 3], 11).unwrap();
        assert_eq!(net.layers(), c.layers());
    }

    #[test]
    fn full_randomization_decorrelates_scores() {
        let dims = Dims::new(8, 8);
        let net = MlpOracle::random(dims, &[16, 2], 3).unwrap();
        let rand = randomize_top_layers(&net, 2, 4).unwrap();
        let imgs = random_images(100, dims, 5);
        let a = score_batch(&net, &imgs, 0, 32).unwrap();
        let b = score_batch(rand.as_ref(), &imgs, 0, 32).unwrap();
        let r = pearson(&a, &b);
        assert!(r < 0.5, "r = {r}");
    }

    #[test]
    fn too_many_layers_is_an_input_error() {
        let net = MlpOracle::random(Dims::new(4, 4), &[3, 2], 0).unwrap();
        assert!(matches!(randomize_top_layers(&net, 3, 0), Err(Error::Input(_))));
    }

    #[test]
    fn disk_oracle_only_sees_its_disk() {
        let o = DiskOracle::new(5.0, 5.0, 2.0);
        let mut img = FaceImage::filled(12, 12, 1, 100).unwrap();
        let before = o.score(std::slice::from_ref(&img), 0).unwrap()[0];
        img.pixel_mut(11, 0)[0] = 0;
        assert_eq!(o.score(std::slice::from_ref(&img), 0).unwrap()[0], before);
        img.pixel_mut(5, 6)[0] = 0;
        assert!(o.score(std::slice::from_ref(&img), 0).unwrap()[0] < before);
    }

    #[test]
    fn peak_oracle_is_translation_invariant() {
        let o = PeakOracle::new(3);
        let make = |ox: usize| {
            FaceImage::from_fn(20, 20, |x, y| {
                if (ox..ox + 3).contains(&x) && (4..7).contains(&y) {
                    255
                } else {
                    40
                }
            })
            .unwrap()
        };
        let s = o.score(&[make(2), make(13)], 0).unwrap();
        assert_eq!(s, vec![1.0, 1.0]);
    }
}
