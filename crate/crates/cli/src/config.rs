//! Run configuration: a `key = value` text file, per-command overrides, and
//! the `CSM_ORACLE_URL` fallback. Every run writes the resolved config back
//! out in the same format (`config.echo`), so the echo can be fed to
//! `--config` to repeat the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use csm_core::occlusion::OcclusionSpec;
use csm_core::oracle::http::{HttpConfig, HttpOracle};
use csm_core::oracle::synthetic::{
    ConstantOracle, DiskOracle, IdentityEmbeddingOracle, MeanIntensityOracle, MlpOracle, PeakOracle,
};
use csm_core::oracle::ConfidenceOracle;
use csm_core::synth::FaceModel;
use csm_core::Dims;

use crate::error::{CliError, Result};

pub const ORACLE_URL_ENV: &str = "CSM_ORACLE_URL";

#[derive(Debug, Clone, PartialEq)]
pub enum OracleSource {
    /// Built-in model, e.g. `mean-intensity` or `disk:32,20,4`.
    Local(String),
    Url(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub oracle: OracleSource,
    pub canonical_image: Option<PathBuf>,
    pub canonical_dcorr: Option<PathBuf>,
    pub occlusion: OcclusionSpec,
    pub stride: usize,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    /// 0 lets the thread pool pick.
    pub workers: usize,
    /// Heatmap budget as a fraction of the pixel count.
    pub budget: f64,
    pub timeout_secs: u64,
}

/// Values given on the command line; they win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub oracle: Option<String>,
    pub oracle_url: Option<String>,
    pub canonical: Option<PathBuf>,
    pub sz: Option<usize>,
    pub stride: Option<usize>,
    pub fill: Option<u8>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Debug, Default)]
struct Raw {
    oracle: Option<String>,
    oracle_url: Option<String>,
    canonical: Option<PathBuf>,
    canonical_dcorr: Option<PathBuf>,
    sz: Option<usize>,
    fill: Option<u8>,
    batch: Option<usize>,
    stride: Option<usize>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    workers: Option<usize>,
    budget: Option<f64>,
    timeout: Option<u64>,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("line {line}: bad value {value:?} for {key}")))
}

impl Raw {
    fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut raw = Raw::default();
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {line_no}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "oracle" => raw.oracle = Some(value.to_string()),
                "oracle_url" => raw.oracle_url = Some(value.to_string()),
                "canonical" => raw.canonical = Some(path(value)),
                "canonical_dcorr" => raw.canonical_dcorr = Some(path(value)),
                "sz" => raw.sz = Some(parse_value(key, value, line_no)?),
                "fill" => raw.fill = Some(parse_value(key, value, line_no)?),
                "batch" => raw.batch = Some(parse_value(key, value, line_no)?),
                "stride" => raw.stride = Some(parse_value(key, value, line_no)?),
                "manifest" => raw.manifest = Some(path(value)),
                "out" => raw.out = Some(path(value)),
                "seed" => raw.seed = Some(parse_value(key, value, line_no)?),
                "workers" => raw.workers = Some(parse_value(key, value, line_no)?),
                "budget" => raw.budget = Some(parse_value(key, value, line_no)?),
                "timeout" => raw.timeout = Some(parse_value(key, value, line_no)?),
                other => return Err(CliError::Config(format!("line {line_no}: unknown key {other:?}"))),
            }
        }
        Ok(raw)
    }
}

impl RunConfig {
    /// Resolves file, overrides, and environment. `env_url` is the value of
    /// `CSM_ORACLE_URL`, used only when no other oracle is named.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides, env_url: Option<String>) -> Result<Self> {
        let mut raw = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::NotFound {
                        CliError::NotFound {
                            what: "config",
                            path: path.to_path_buf(),
                        }
                    } else {
                        CliError::io(path, e)
                    }
                })?;
                Raw::parse(&text, path.parent().unwrap_or(Path::new(".")))?
            }
            None => Raw::default(),
        };

        // a command-line oracle of either kind replaces whatever the file named
        if overrides.oracle.is_some() || overrides.oracle_url.is_some() {
            raw.oracle = overrides.oracle.clone();
            raw.oracle_url = overrides.oracle_url.clone();
        }
        macro_rules! over {
            ($($field:ident),*) => { $( if let Some(v) = overrides.$field.clone() { raw.$field = Some(v); } )* };
        }
        over!(canonical, sz, stride, fill, batch, seed, out, manifest, workers);

        let oracle = match (raw.oracle, raw.oracle_url) {
            (Some(_), Some(_)) => return Err(CliError::Config("give either oracle or oracle_url, not both".into())),
            (Some(id), None) => OracleSource::Local(id),
            (None, Some(url)) => OracleSource::Url(url),
            (None, None) => match env_url {
                Some(url) if !url.is_empty() => OracleSource::Url(url),
                _ => {
                    return Err(CliError::Config(format!(
                        "no oracle configured (set oracle, oracle_url, or {ORACLE_URL_ENV})"
                    )))
                }
            },
        };
        let defaults = OcclusionSpec::default();
        let occlusion = OcclusionSpec {
            size: raw.sz.unwrap_or(defaults.size),
            fill: raw.fill.unwrap_or(defaults.fill),
            batch: raw.batch.unwrap_or(defaults.batch),
        };
        occlusion.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let stride = raw.stride.unwrap_or(1);
        if stride == 0 {
            return Err(CliError::Config("stride must be >= 1".into()));
        }
        let budget = raw.budget.unwrap_or(csm_core::evaluation::DEFAULT_BUDGET_FRACTION);
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(CliError::Config("budget must be positive".into()));
        }
        Ok(Self {
            oracle,
            canonical_image: raw.canonical,
            canonical_dcorr: raw.canonical_dcorr,
            occlusion,
            stride,
            manifest: raw.manifest,
            out: raw.out.unwrap_or_else(|| PathBuf::from("csm-out")),
            seed: raw.seed.unwrap_or(0),
            workers: raw.workers.unwrap_or(0),
            budget,
            timeout_secs: raw.timeout.unwrap_or(30),
        })
    }

    /// The resolved configuration in config-file syntax, with absolute paths.
    pub fn echo(&self) -> String {
        let abs = |p: &Path| {
            std::path::absolute(p)
                .unwrap_or_else(|_| p.to_path_buf())
                .display()
                .to_string()
        };
        let mut s = String::from("# resolved run configuration\n");
        match &self.oracle {
            OracleSource::Local(id) => writeln!(s, "oracle = {id}"),
            OracleSource::Url(url) => writeln!(s, "oracle_url = {url}"),
        }
        .unwrap();
        if let Some(p) = &self.canonical_image {
            writeln!(s, "canonical = {}", abs(p)).unwrap();
        }
        if let Some(p) = &self.canonical_dcorr {
            writeln!(s, "canonical_dcorr = {}", abs(p)).unwrap();
        }
        writeln!(s, "sz = {}", self.occlusion.size).unwrap();
        writeln!(s, "fill = {}", self.occlusion.fill).unwrap();
        writeln!(s, "batch = {}", self.occlusion.batch).unwrap();
        writeln!(s, "stride = {}", self.stride).unwrap();
        if let Some(p) = &self.manifest {
            writeln!(s, "manifest = {}", abs(p)).unwrap();
        }
        writeln!(s, "out = {}", abs(&self.out)).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "workers = {}", self.workers).unwrap();
        writeln!(s, "budget = {}", self.budget).unwrap();
        writeln!(s, "timeout = {}", self.timeout_secs).unwrap();
        s
    }

    pub fn canonical_dims(&self) -> Result<Dims> {
        let path = self
            .canonical_image
            .as_ref()
            .ok_or_else(|| CliError::Config("canonical face image not configured".into()))?;
        let img = csm_core::FaceImage::load(path).map_err(|e| {
            if e.is_not_found() {
                CliError::NotFound {
                    what: "canonical face",
                    path: path.clone(),
                }
            } else {
                e.into()
            }
        })?;
        Ok(img.dims())
    }

    pub fn build_oracle(&self) -> Result<Box<dyn ConfidenceOracle>> {
        match &self.oracle {
            OracleSource::Url(url) => {
                let cfg = HttpConfig {
                    timeout: Duration::from_secs(self.timeout_secs),
                    ..HttpConfig::default()
                };
                Ok(Box::new(HttpOracle::connect(url, cfg)?))
            }
            OracleSource::Local(id) => local_oracle(id),
        }
    }
}

fn numbers(args: &str, n: usize, id: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = args
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Config(format!("bad arguments in oracle {id:?}")))?;
    if v.len() != n {
        return Err(CliError::Config(format!(
            "oracle {id:?} takes {n} comma-separated numbers"
        )));
    }
    Ok(v)
}

fn dims_arg(s: &str, id: &str) -> Result<Dims> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| CliError::Config(format!("oracle {id:?}: expected WxH")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| CliError::Config(format!("oracle {id:?}: bad size")))
    };
    Ok(Dims::new(parse(w)?, parse(h)?))
}

/// Built-in oracles:
/// `constant:V`, `mean-intensity`, `identity-embedding`, `disk:CX,CY,R`,
/// `peak:W`, `mlp-features:WxH:SEED`, `mlp-random:WxH:SEED`.
pub fn local_oracle(id: &str) -> Result<Box<dyn ConfidenceOracle>> {
    let (name, args) = id.split_once(':').unwrap_or((id, ""));
    let seeded = |args: &str| -> Result<(Dims, u64)> {
        let (d, seed) = args
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("oracle {id:?}: expected WxH:SEED")))?;
        let seed = seed
            .parse()
            .map_err(|_| CliError::Config(format!("oracle {id:?}: bad seed")))?;
        Ok((dims_arg(d, id)?, seed))
    };
    Ok(match name {
        "constant" => Box::new(ConstantOracle::new(numbers(args, 1, id)?[0])),
        "mean-intensity" => Box::new(MeanIntensityOracle::new()),
        "identity-embedding" => Box::new(IdentityEmbeddingOracle::new()),
        "disk" => {
            let v = numbers(args, 3, id)?;
            Box::new(DiskOracle::new(v[0], v[1], v[2]))
        }
        "peak" => Box::new(PeakOracle::new(numbers(args, 1, id)?[0] as usize)),
        "mlp-features" => {
            let (dims, seed) = seeded(args)?;
            Box::new(feature_network(dims, seed)?)
        }
        "mlp-random" => {
            let (dims, seed) = seeded(args)?;
            Box::new(MlpOracle::random(dims, &[16, 8, 2], seed)?)
        }
        _ => return Err(CliError::Config(format!("unknown oracle {id:?}"))),
    })
}

/// Three-layer network tuned to the eyes and mouth of a centred synthetic face.
pub fn feature_network(dims: Dims, seed: u64) -> Result<MlpOracle> {
    let model = FaceModel::new(dims);
    let placement = FaceModel::centred(dims);
    let features: Vec<(f64, f64)> = [(-0.38, -0.25), (0.38, -0.25), (0.0, 0.48), (0.0, 0.1)]
        .iter()
        .map(|&(u, v)| {
            let p = model.project(&placement, u, v);
            (p.x, p.y)
        })
        .collect();
    let sigma = dims.width.min(dims.height) as f64 / 16.0;
    Ok(MlpOracle::feature_detector(dims, &features, sigma, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides() -> Overrides {
        Overrides::default()
    }

    #[test]
    fn file_values_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# demo\noracle = mean-intensity\ncanonical = face.png\nsz = 9\nstride=3\nseed = 7\n",
        )
        .unwrap();
        let c = RunConfig::resolve(Some(&path), &overrides(), None).unwrap();
        assert_eq!(c.oracle, OracleSource::Local("mean-intensity".into()));
        assert_eq!(c.canonical_image, Some(dir.path().join("face.png")));
        assert_eq!((c.occlusion.size, c.stride, c.seed), (9, 3, 7));
        assert_eq!(c.occlusion.fill, 0);
    }

    #[test]
    fn overrides_win_and_env_is_fallback() {
        let o = Overrides {
            canonical: Some("f.png".into()),
            sz: Some(5),
            ..overrides()
        };
        let c = RunConfig::resolve(None, &o, Some("http://x:1".into())).unwrap();
        assert_eq!(c.oracle, OracleSource::Url("http://x:1".into()));
        assert_eq!(c.occlusion.size, 5);

        let o = Overrides {
            oracle: Some("constant:0.5".into()),
            ..o
        };
        let c = RunConfig::resolve(None, &o, Some("http://x:1".into())).unwrap();
        assert_eq!(c.oracle, OracleSource::Local("constant:0.5".into()));
    }

    #[test]
    fn invalid_configs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        std::fs::write(&path, "oracle = a\noracle_url = http://b\ncanonical = f\n").unwrap();
        assert!(matches!(
            RunConfig::resolve(Some(&path), &overrides(), None),
            Err(CliError::Config(_))
        ));
        std::fs::write(&path, "oracle = a\ncanonical = f\nsz = 0\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &overrides(), None).is_err());
        std::fs::write(&path, "oracle = a\ncanonical = f\nstride = 0\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &overrides(), None).is_err());
        std::fs::write(&path, "bogus = 1\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &overrides(), None).is_err());
        let none = Overrides {
            canonical: Some("f".into()),
            ..overrides()
        };
        assert!(RunConfig::resolve(None, &none, None).is_err());
    }

    #[test]
    fn echo_reparses_to_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let o = Overrides {
            oracle: Some("disk:3,4,2".into()),
            canonical: Some(dir.path().join("f.png")),
            out: Some(dir.path().join("out")),
            sz: Some(7),
            seed: Some(42),
            ..overrides()
        };
        let c = RunConfig::resolve(None, &o, None).unwrap();
        let path = dir.path().join("echo");
        std::fs::write(&path, c.echo()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), &overrides(), None).unwrap(), c);
    }

    #[test]
    fn local_oracle_ids() {
        for id in [
            "constant:0.2",
            "mean-intensity",
            "disk:1,2,3",
            "peak:3",
            "mlp-features:16x16:1",
            "mlp-random:8x8:2",
        ] {
            assert!(local_oracle(id).is_ok(), "{id}");
        }
        for id in ["constant", "disk:1,2", "mlp-random:8:2", "nope"] {
            assert!(local_oracle(id).is_err(), "{id}");
        }
    }
}
