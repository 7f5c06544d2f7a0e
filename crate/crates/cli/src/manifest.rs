//! Dataset manifests: one `image<TAB>dcorr<TAB>class` line per sample.
//! Relative paths are taken relative to the manifest's directory.

use std::path::{Path, PathBuf};

use csm_core::canonical::Sample;
use csm_core::{DenseCorrespondence, Dims, FaceImage, LoadOptions};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub dcorr: PathBuf,
    pub class: usize,
}

impl ManifestEntry {
    pub fn name(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into())
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::NotFound {
                what: "manifest",
                path: path.to_path_buf(),
            }
        } else {
            CliError::io(path, e)
        }
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        let [image, dcorr, class] = fields[..] else {
            return Err(CliError::Config(format!(
                "{}: line {}: expected image<TAB>dcorr<TAB>class",
                path.display(),
                i + 1
            )));
        };
        let class = class
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{}: line {}: bad class {class:?}", path.display(), i + 1)))?;
        entries.push(ManifestEntry {
            image: base.join(image),
            dcorr: base.join(dcorr),
            class,
        });
    }
    if entries.is_empty() {
        return Err(CliError::Config(format!("{} lists no samples", path.display())));
    }
    Ok(entries)
}

fn not_found<'a>(what: &'static str, path: &'a Path) -> impl Fn(csm_core::Error) -> CliError + 'a {
    move |e| {
        if e.is_not_found() {
            CliError::NotFound {
                what,
                path: path.to_path_buf(),
            }
        } else {
            e.into()
        }
    }
}

pub fn load_image(path: &Path) -> Result<FaceImage> {
    FaceImage::load(path).map_err(not_found("image", path))
}

pub fn load_correspondence(path: &Path, input: Dims, canonical: Dims, stride: usize) -> Result<DenseCorrespondence> {
    let opts = LoadOptions::new(input, canonical).with_stride(stride);
    DenseCorrespondence::load(path, &opts).map_err(not_found("correspondence", path))
}

pub fn load_sample(image: &Path, dcorr: &Path, class: usize, canonical: Dims, stride: usize) -> Result<Sample> {
    let img = load_image(image)?;
    let corr = load_correspondence(dcorr, img.dims(), canonical, stride)?;
    Ok(Sample {
        name: image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into()),
        image: img,
        corr,
        class,
    })
}
