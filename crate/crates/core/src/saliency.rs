//! Saliency heatmaps, contribution counts, and the `.csm` binary format.
//!
//! A `.csm` file is the 4 magic bytes `CSM1`, a little-endian `u32` width and
//! `u32` height, one frame byte (0 canonical, 1 image), 3 reserved zero bytes,
//! then `width * height` little-endian `f32` values in row-major order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Dims, FaceImage};

const MAGIC: &[u8; 4] = b"CSM1";
const HEADER_LEN: usize = 16;

/// Coordinate frame a heatmap lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Canonical,
    Image,
}

impl Frame {
    fn tag(self) -> u8 {
        match self {
            Frame::Canonical => 0,
            Frame::Image => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Frame::Canonical),
            1 => Ok(Frame::Image),
            t => Err(Error::Format(format!("unknown frame tag {t}"))),
        }
    }
}

/// Provenance of a map. Not stored in `.csm` files; the CLI writes it next to
/// them in the run's config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub patch_size: usize,
    pub stride: usize,
    pub source: String,
    /// How the source oracle's scores should be read, e.g. `"probability"`.
    pub output_kind: String,
}

/// Finite single-channel heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    dims: Dims,
    frame: Frame,
    values: Vec<f32>,
    meta: Option<MapMeta>,
}

impl SaliencyMap {
    pub fn new(dims: Dims, frame: Frame, values: Vec<f32>) -> Result<Self> {
        if dims.width == 0 || dims.height == 0 {
            return Err(Error::Validation("saliency map must be at least 1x1".into()));
        }
        if values.len() != dims.area() {
            return Err(Error::Validation(format!(
                "{} values for a {}x{} map",
                values.len(),
                dims.width,
                dims.height
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            dims,
            frame,
            values,
            meta: None,
        })
    }

    pub fn zeros(dims: Dims, frame: Frame) -> Self {
        Self {
            dims,
            frame,
            values: vec![0.0; dims.area()],
            meta: None,
        }
    }

    /// Builds a map from `f64` values, rounding each to the nearest `f32`.
    pub fn from_f64(dims: Dims, frame: Frame, values: &[f64]) -> Result<Self> {
        Self::new(dims, frame, values.iter().map(|&v| v as f32).collect())
    }

    pub fn with_meta(mut self, meta: MapMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn meta(&self) -> Option<&MapMeta> {
        self.meta.as_ref()
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.dims.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.height as u32).to_le_bytes());
        out.push(self.frame.tag());
        out.extend_from_slice(&[0, 0, 0]);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let frame = Frame::from_tag(bytes[12])?;
        let payload = &bytes[HEADER_LEN..];
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, {width}x{height} needs {expected}",
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(Dims::new(width, height), frame, values).map_err(|e| Error::Format(e.to_string()))
    }

    /// Renders min → blue and max → red through a blue, cyan, yellow, red ramp.
    /// A constant map renders entirely blue.
    pub fn to_color_image(&self) -> FaceImage {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = f64::from(hi) - f64::from(lo);
        let mut data = Vec::with_capacity(self.values.len() * 3);
        for &v in &self.values {
            let t = if span > 0.0 {
                (f64::from(v) - f64::from(lo)) / span
            } else {
                0.0
            };
            data.extend_from_slice(&ramp(t));
        }
        FaceImage::new(self.dims.width, self.dims.height, 3, data).expect("sized buffer")
    }
}

const RAMP: [[f64; 3]; 4] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Colour for `t` in `[0, 1]` on the blue-cyan-yellow-red ramp.
pub fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let seg = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - seg as f64;
    let (a, b) = (RAMP[seg], RAMP[seg + 1]);
    std::array::from_fn(|c| (a[c] + (b[c] - a[c]) * f).round() as u8)
}

/// Number of contributions each heatmap pixel received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    dims: Dims,
    counts: Vec<u32>,
}

impl CountMatrix {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            counts: vec![0; dims.area()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.dims.width + x]
    }

    pub(crate) fn bump(&mut self, index: usize) {
        self.counts[index] += 1;
    }
}

pub fn write_saliency(map: &SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &map.to_bytes())
}

pub fn read_saliency(path: impl AsRef<Path>) -> Result<SaliencyMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    SaliencyMap::from_bytes(&bytes)
}

/// Writes the colour rendering of `map` as PNG.
pub fn write_saliency_png(map: &SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &map.to_color_image().encode_png()?)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> SaliencyMap {
        SaliencyMap::new(Dims::new(2, 2), Frame::Canonical, vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn two_by_two_layout() {
        let bytes = two_by_two().to_bytes();
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(&bytes[..4], b"CSM1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &[0, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(SaliencyMap::from_bytes(&bytes).unwrap(), two_by_two());
    }

    #[test]
    fn nan_is_refused() {
        assert!(SaliencyMap::new(Dims::new(1, 2), Frame::Image, vec![0.0, f32::NAN]).is_err());
        assert!(SaliencyMap::from_f64(Dims::new(1, 1), Frame::Image, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let mut bytes = two_by_two().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(SaliencyMap::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = two_by_two().to_bytes();
        assert!(matches!(SaliencyMap::from_bytes(&bytes[..30]), Err(Error::Format(_))));
        assert!(matches!(SaliencyMap::from_bytes(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn nan_payload_is_a_format_error() {
        let mut bytes = two_by_two().to_bytes();
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(SaliencyMap::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csm");
        let m = SaliencyMap::new(Dims::new(3, 1), Frame::Image, vec![-1.5, 0.0, 1e-30]).unwrap();
        write_saliency(&m, &path).unwrap();
        assert_eq!(read_saliency(&path).unwrap(), m);
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), [0, 0, 255]);
        assert_eq!(ramp(1.0 / 3.0), [0, 255, 255]);
        assert_eq!(ramp(2.0 / 3.0), [255, 255, 0]);
        assert_eq!(ramp(1.0), [255, 0, 0]);
    }

    #[test]
    fn color_render_maps_extremes() {
        let img = two_by_two().to_color_image();
        assert_eq!(img.pixel(0, 0), &[0, 0, 255]);
        assert_eq!(img.pixel(1, 1), &[255, 0, 0]);
    }
}
