use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use csm_core::canonical::{cis_accumulator, is_default_checkpoint, Checkpoint, CmsStream, Sample};
use csm_core::evaluation::{
    import_heatmap, negative_explanation, score_methods, standardize, EvaluationRecord, MethodScores,
};
use csm_core::oracle::{score_batch, ConfidenceOracle};
use csm_core::saliency::{write_atomic, write_saliency_png, MapMeta};
use csm_core::sanity::{sanity_check, SanityReport};
use csm_core::synth::{FaceModel, Jitter, PlantedFeature};
use csm_core::{compute_cis, reproject, write_saliency, DenseCorrespondence, Dims, Frame, SaliencyMap};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{load_correspondence, load_image, load_sample, read_manifest, ManifestEntry};

/// Images handed to the worker pool at a time.
const CHUNK: usize = 16;

fn pool(config: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| CliError::Failed(format!("thread pool: {e}")))
}

fn prepare_out(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out).map_err(|e| CliError::io(&config.out, e))?;
    write_text(&config.out.join("config.echo"), &config.echo())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_map(out: &Path, stem: &str, map: &SaliencyMap) -> Result<(PathBuf, PathBuf)> {
    let csm = out.join(format!("{stem}.csm"));
    let png = out.join(format!("{stem}.png"));
    write_saliency(map, &csm)?;
    write_saliency_png(map, &png)?;
    Ok((csm, png))
}

fn manifest_entries(config: &RunConfig) -> Result<Vec<ManifestEntry>> {
    let path = config
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Config("no manifest configured".into()))?;
    read_manifest(path)
}

fn meta_for(config: &RunConfig, oracle: &dyn ConfidenceOracle) -> MapMeta {
    MapMeta {
        patch_size: config.occlusion.size,
        stride: config.stride,
        source: oracle.info().id.clone(),
        output_kind: oracle.info().output.as_str().to_string(),
    }
}

/// Files written by `csm cis`.
#[derive(Debug, Clone)]
pub struct CisOutputs {
    pub csm: PathBuf,
    pub png: PathBuf,
}

pub fn cmd_cis(config: &RunConfig, image: &Path, dcorr: &Path, class: usize) -> Result<CisOutputs> {
    let canonical = config.canonical_dims()?;
    let sample = load_sample(image, dcorr, class, canonical, config.stride)?;
    let oracle = config.build_oracle()?;
    prepare_out(config)?;
    let map = pool(config)?.install(|| {
        compute_cis(
            &sample.image,
            &sample.corr,
            canonical,
            oracle.as_ref(),
            class,
            &config.occlusion,
        )
    })?;
    let meta = meta_for(config, oracle.as_ref());
    let (csm, png) = write_map(&config.out, &format!("{}.cis", sample.name), &map)?;
    write_json(&config.out.join(format!("{}.cis.meta.json", sample.name)), &meta)?;
    info!("wrote {}", csm.display());
    Ok(CisOutputs { csm, png })
}

/// How per-image maps are brought into a shared frame before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentMode {
    /// Slide the occluder over the whole image on a `stride` grid; average in
    /// image coordinates.
    None,
    /// Occlude at the mesh vertices but keep image coordinates, as for
    /// images that were already aligned by keypoints.
    Keypoint,
    /// Project through the dense correspondence onto the canonical face.
    Canonical,
}

impl std::str::FromStr for AlignmentMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "keypoint" => Ok(Self::Keypoint),
            "canonical" => Ok(Self::Canonical),
            other => Err(CliError::Config(format!("unknown alignment mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Convergence {
    pub images: usize,
    pub failed: usize,
    pub checkpoints: Vec<Checkpoint>,
}

/// Per-image maps for `entries`, computed in parallel chunks and streamed in
/// manifest order. Images that fail are logged and skipped.
fn model_saliency<F>(entries: &[ManifestEntry], frame: Frame, per_image: F) -> Result<(SaliencyMap, Convergence)>
where
    F: Fn(&ManifestEntry) -> Result<SaliencyMap> + Sync,
{
    let mut stream = CmsStream::for_frame(frame, is_default_checkpoint);
    let mut failed = 0usize;
    for chunk in entries.chunks(CHUNK) {
        let maps: Vec<Result<SaliencyMap>> = chunk.par_iter().map(&per_image).collect();
        for (entry, map) in chunk.iter().zip(maps) {
            match map.and_then(|m| stream.push(&m).map_err(CliError::from)) {
                Ok(()) => {}
                Err(e) => {
                    failed += 1;
                    warn!("skipping {}: {e}", entry.image.display());
                }
            }
        }
    }
    if stream.count() == 0 {
        return Err(CliError::Failed(format!("all {failed} images failed")));
    }
    if failed > 0 {
        warn!("{failed} of {} images skipped", entries.len());
    }
    let images = stream.count();
    let (map, checkpoints) = stream.finish()?;
    Ok((
        map,
        Convergence {
            images,
            failed,
            checkpoints,
        },
    ))
}

/// Files written by `csm cms` and `csm ablate-alignment`.
#[derive(Debug, Clone)]
pub struct CmsOutputs {
    pub csm: PathBuf,
    pub png: PathBuf,
    pub convergence: Convergence,
}

fn write_model_map(config: &RunConfig, map: &SaliencyMap, convergence: Convergence) -> Result<CmsOutputs> {
    let (csm, png) = write_map(&config.out, "cms", map)?;
    write_json(&config.out.join("convergence.json"), &convergence)?;
    info!("wrote {} from {} images", csm.display(), convergence.images);
    Ok(CmsOutputs { csm, png, convergence })
}

pub fn cmd_cms(config: &RunConfig) -> Result<CmsOutputs> {
    cmd_ablation_alignment(config, AlignmentMode::Canonical)
}

pub fn cmd_ablation_alignment(config: &RunConfig, mode: AlignmentMode) -> Result<CmsOutputs> {
    let entries = manifest_entries(config)?;
    let oracle = config.build_oracle()?;
    let oracle = oracle.as_ref();
    prepare_out(config)?;
    let spec = &config.occlusion;
    let (map, convergence) = pool(config)?.install(|| match mode {
        AlignmentMode::Canonical => {
            let canonical = config.canonical_dims()?;
            model_saliency(&entries, Frame::Canonical, |e| {
                let s = load_sample(&e.image, &e.dcorr, e.class, canonical, config.stride)?;
                Ok(compute_cis(&s.image, &s.corr, canonical, oracle, s.class, spec)?)
            })
        }
        AlignmentMode::None => model_saliency(&entries, Frame::Image, |e| {
            let image = load_image(&e.image)?;
            let grid = DenseCorrespondence::identity_grid(image.dims(), config.stride)?;
            Ok(cis_accumulator(&image, &grid, image.dims(), oracle, e.class, spec)?.to_map(Frame::Image)?)
        }),
        AlignmentMode::Keypoint => model_saliency(&entries, Frame::Image, |e| {
            let image = load_image(&e.image)?;
            let corr = load_correspondence(&e.dcorr, image.dims(), image.dims(), config.stride)?;
            let pixels = DenseCorrespondence::new(
                corr.input_points().to_vec(),
                corr.input_points().to_vec(),
                Some(corr.visible().to_vec()),
                image.dims(),
                image.dims(),
            )?;
            Ok(cis_accumulator(&image, &pixels, image.dims(), oracle, e.class, spec)?.to_map(Frame::Image)?)
        }),
    })?;
    if mode != AlignmentMode::Canonical {
        write_json(&config.out.join("ablation.json"), &serde_json::json!({ "mode": mode }))?;
    }
    write_model_map(config, &map, convergence)
}

pub fn cmd_reproject(config: &RunConfig, cms: &Path, dcorr: &Path, image: &Path) -> Result<CisOutputs> {
    let map = csm_core::read_saliency(cms).map_err(|e| {
        if e.is_not_found() {
            CliError::NotFound {
                what: "saliency map",
                path: cms.to_path_buf(),
            }
        } else {
            e.into()
        }
    })?;
    let img = load_image(image)?;
    let corr = load_correspondence(dcorr, img.dims(), map.dims(), config.stride)?;
    prepare_out(config)?;
    let out = reproject(&map, &corr, img.dims(), config.occlusion.size)?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let (csm, png) = write_map(&config.out, &format!("{stem}.reproj"), &out)?;
    Ok(CisOutputs { csm, png })
}

/// Where a method's heatmaps come from.
#[derive(Debug, Clone)]
pub enum HeatmapSource {
    /// Directory with `<image stem>.csm` or `<image stem>.png` per image.
    Dir(PathBuf),
    /// A canonical model map, reprojected onto each image.
    Reprojected(PathBuf),
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub methods: BTreeMap<String, MethodScores>,
    pub images: usize,
    pub budget_fraction: f64,
    pub oracle: String,
    pub config: String,
}

fn heatmap_for(
    source: &HeatmapSource,
    cms: Option<&SaliencyMap>,
    entry: &ManifestEntry,
    config: &RunConfig,
) -> Result<SaliencyMap> {
    match source {
        HeatmapSource::Dir(dir) => {
            let stem = entry.name();
            let csm = dir.join(format!("{stem}.csm"));
            let png = dir.join(format!("{stem}.png"));
            let path = if csm.exists() { csm } else { png };
            import_heatmap(&path).map_err(|e| {
                if e.is_not_found() {
                    CliError::NotFound { what: "heatmap", path }
                } else {
                    e.into()
                }
            })
        }
        HeatmapSource::Reprojected(_) => {
            let cms = cms.expect("loaded above");
            let img = load_image(&entry.image)?;
            let corr = load_correspondence(&entry.dcorr, img.dims(), cms.dims(), config.stride)?;
            Ok(reproject(cms, &corr, img.dims(), config.occlusion.size)?)
        }
    }
}

pub fn cmd_evaluate(config: &RunConfig, methods: &[(String, HeatmapSource)]) -> Result<EvaluationReport> {
    if methods.is_empty() {
        return Err(CliError::Config("evaluate needs at least one method".into()));
    }
    let entries = manifest_entries(config)?;
    let oracle = config.build_oracle()?;
    let oracle = oracle.as_ref();
    prepare_out(config)?;
    let cms_maps: BTreeMap<&str, SaliencyMap> = methods
        .iter()
        .filter_map(|(name, src)| match src {
            HeatmapSource::Reprojected(p) => Some((name.as_str(), p)),
            HeatmapSource::Dir(_) => None,
        })
        .map(|(name, p)| Ok((name, csm_core::read_saliency(p)?)))
        .collect::<Result<_>>()?;

    let records = pool(config)?.install(|| {
        entries
            .par_iter()
            .map(|entry| {
                let image = load_image(&entry.image)?;
                let original = score_batch(oracle, std::slice::from_ref(&image), entry.class, 1)?[0];
                let scale = config.budget * image.dims().area() as f64;
                let mut record = EvaluationRecord::new(entry.image.display().to_string(), original);
                for (name, src) in methods {
                    let heatmap = heatmap_for(src, cms_maps.get(name.as_str()), entry, config)?;
                    if heatmap.dims() != image.dims() {
                        return Err(CliError::Failed(format!(
                            "{name} heatmap for {} is {}x{}, image is {}x{}",
                            entry.image.display(),
                            heatmap.dims().width,
                            heatmap.dims().height,
                            image.width(),
                            image.height()
                        )));
                    }
                    let explanation = negative_explanation(&image, &standardize(&heatmap, scale)?)?;
                    let conf = score_batch(oracle, &[explanation], entry.class, 1)?[0];
                    record = record.with(name.clone(), conf);
                }
                Ok(record)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = EvaluationReport {
        methods: score_methods(&records)?,
        images: records.len(),
        budget_fraction: config.budget,
        oracle: oracle.info().id.clone(),
        config: config.echo(),
    };
    write_json(&config.out.join("report.json"), &report)?;
    Ok(report)
}

pub fn cmd_sanity(config: &RunConfig, max_k: usize) -> Result<SanityReport> {
    let entries = manifest_entries(config)?;
    let canonical = config.canonical_dims()?;
    let oracle = config.build_oracle()?;
    prepare_out(config)?;
    let samples: Vec<Sample> = entries
        .iter()
        .map(|e| load_sample(&e.image, &e.dcorr, e.class, canonical, config.stride))
        .collect::<Result<_>>()?;
    let report = pool(config)?.install(|| {
        sanity_check(
            oracle.as_ref(),
            &samples,
            canonical,
            &config.occlusion,
            max_k,
            config.seed,
        )
    })?;
    write_json(&config.out.join("sanity.json"), &report)?;
    if report.decays(0.1, 0.5) {
        info!("similarity decays with randomization depth");
    } else {
        warn!("similarity does not decay as expected: {:?}", report.similarity);
    }
    Ok(report)
}

/// Parameters of a generated demo dataset.
#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub count: usize,
    pub seed: u64,
    pub input: Dims,
    pub canonical: Dims,
    /// Maximum face centre offset in pixels.
    pub shift: f64,
    /// Paint a bright disk on the left cheek of every face.
    pub planted: bool,
}

/// Writes a canonical face, `count` placed faces with their `.dcorr` files,
/// `manifest.tsv`, and a ready-to-use `csm.conf` into `dir`.
pub fn cmd_synth(dir: &Path, opts: &SynthOptions) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut model = FaceModel::new(opts.canonical);
    if opts.planted {
        model = model.with_feature(PlantedFeature {
            u: -0.45,
            v: 0.2,
            radius: 0.14,
        });
    }
    let scale = opts.input.height as f64 / opts.canonical.height as f64;
    model.render_canonical()?.save_png(dir.join("canonical.png"))?;
    model.canonical_correspondence()?.save(dir.join("canonical.dcorr"))?;

    let jitter = Jitter {
        shift: opts.shift,
        scale: (0.85 * scale, scale),
        angle: 0.15,
    };
    let samples = model.dataset(opts.input, opts.count, &jitter, 0, opts.seed)?;
    let mut manifest = String::new();
    for s in &samples {
        s.image.save_png(dir.join(format!("{}.png", s.name)))?;
        s.corr.save(dir.join(format!("{}.dcorr", s.name)))?;
        manifest.push_str(&format!("{0}.png\t{0}.dcorr\t{1}\n", s.name, s.class));
    }
    write_text(&dir.join("manifest.tsv"), &manifest)?;
    let oracle = if opts.planted {
        "peak:3".to_string()
    } else {
        "mean-intensity".to_string()
    };
    let conf = format!(
        "oracle = {oracle}\ncanonical = canonical.png\ncanonical_dcorr = canonical.dcorr\nmanifest = manifest.tsv\nsz = {}\nout = out\nseed = {}\n",
        (opts.input.height / 16).max(3) | 1,
        opts.seed
    );
    let conf_path = dir.join("csm.conf");
    write_text(&conf_path, &conf)?;
    Ok(conf_path)
}
