use csm_core::canonical::{canonical_patch_size, cms_streaming, compute_cis};
use csm_core::oracle::synthetic::{DiskOracle, IdentityEmbeddingOracle};
use csm_core::oracle::{Capabilities, ConfidenceOracle, OracleInfo, OutputKind};
use csm_core::tasks::{
    paired_cis, verification_confidence, zero_shot_confidence, Gallery, VerificationPair, ZeroShotOracle,
};
use csm_core::{
    compute_cms, DenseCorrespondence, Dims, Embedding, FaceImage, Frame, OcclusionSpec, Point2, Result, SaliencyMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn embedding_info(id: &str) -> OracleInfo {
    OracleInfo {
        id: id.into(),
        input: None,
        classes: None,
        capabilities: Capabilities {
            scores: false,
            embeddings: true,
            randomizable: false,
        },
        output: OutputKind::Unknown,
    }
}

struct ConstantEmbedding(OracleInfo);

impl ConfidenceOracle for ConstantEmbedding {
    fn info(&self) -> &OracleInfo {
        &self.0
    }

    fn score(&self, _: &[FaceImage], _: usize) -> Result<Vec<f64>> {
        unreachable!()
    }

    fn embed(&self, images: &[FaceImage]) -> Result<Vec<Embedding>> {
        images.iter().map(|_| Embedding::new(vec![0.3, -1.0, 2.0])).collect()
    }
}

/// Two-dimensional embedding whose first component is the mean intensity
/// inside a disk.
struct DiskEmbedding(OracleInfo, DiskOracle);

impl ConfidenceOracle for DiskEmbedding {
    fn info(&self) -> &OracleInfo {
        &self.0
    }

    fn score(&self, _: &[FaceImage], _: usize) -> Result<Vec<f64>> {
        unreachable!()
    }

    fn embed(&self, images: &[FaceImage]) -> Result<Vec<Embedding>> {
        self.1
            .score(images, 0)?
            .into_iter()
            .map(|d| Embedding::new(vec![d, 0.2]))
            .collect()
    }
}

/// Scores an image by verifying it against itself.
struct SelfPair<'a> {
    info: OracleInfo,
    inner: &'a dyn ConfidenceOracle,
    threshold: f64,
}

impl ConfidenceOracle for SelfPair<'_> {
    fn info(&self) -> &OracleInfo {
        &self.info
    }

    fn score(&self, images: &[FaceImage], _: usize) -> Result<Vec<f64>> {
        images
            .iter()
            .map(|img| {
                verification_confidence(
                    &VerificationPair::new(img.clone(), img.clone(), 1, self.threshold)?,
                    self.inner,
                )
            })
            .collect()
    }
}

fn grid(dims: Dims, step: usize) -> DenseCorrespondence {
    DenseCorrespondence::identity_grid(dims, step).unwrap()
}

fn textured(w: usize, h: usize, seed: u64) -> FaceImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FaceImage::from_fn(w, h, |_, _| rng.random_range(20..240)).unwrap()
}

/// Fraction of positive map mass within Chebyshev distance `r` of `(cx, cy)`.
fn mass_near(map: &SaliencyMap, cx: i64, cy: i64, r: i64) -> f64 {
    let (mut near, mut total) = (0.0, 0.0);
    for y in 0..map.dims().height {
        for x in 0..map.dims().width {
            let v = f64::from(map.get(x, y)).max(0.0);
            total += v;
            if (x as i64 - cx).abs() <= r && (y as i64 - cy).abs() <= r {
                near += v;
            }
        }
    }
    near / total
}

#[test]
fn cms_of_many_maps_matches_plain_sums() {
    let dims = Dims::new(8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let maps: Vec<SaliencyMap> = (0..1000)
        .map(|_| {
            let v = (0..dims.area()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            SaliencyMap::new(dims, Frame::Canonical, v).unwrap()
        })
        .collect();
    let cms = compute_cms(&maps).unwrap();
    for i in 0..dims.area() {
        let brute: f64 = maps.iter().map(|m| f64::from(m.values()[i])).sum::<f64>() / 1000.0;
        assert!((f64::from(cms.values()[i]) - brute).abs() < 1e-6, "pixel {i}");
    }
}

#[test]
fn convergence_trace_shrinks_for_iid_maps() {
    let dims = Dims::new(10, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let maps: Vec<Result<SaliencyMap>> = (0..2000)
        .map(|_| {
            let v = (0..dims.area()).map(|_| rng.random_range(0.0f32..1.0)).collect();
            SaliencyMap::new(dims, Frame::Canonical, v)
        })
        .collect();
    let (_, trace) = cms_streaming(maps).unwrap();
    let images: Vec<usize> = trace.iter().map(|c| c.images).collect();
    assert_eq!(images, vec![100, 500, 1000]);
    assert!(trace[2].l1_per_pixel < trace[0].l1_per_pixel);
    assert!(trace[1].l1_per_pixel < trace[0].l1_per_pixel);
}

#[test]
fn planted_disk_dominates_the_canonical_map() {
    let input = Dims::new(48, 48);
    let canonical = Dims::new(24, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 150;
    let input_pts: Vec<Point2> = (0..n)
        .map(|_| Point2::new(rng.random_range(2.0..45.0), rng.random_range(2.0..45.0)))
        .collect();
    let canonical_pts: Vec<Point2> = input_pts.iter().map(|p| Point2::new(p.x / 2.0, p.y / 2.0)).collect();
    let star = 17;
    let disk = input_pts[star];
    let corr = DenseCorrespondence::new(input_pts, canonical_pts.clone(), None, input, canonical).unwrap();
    let oracle = DiskOracle::new(disk.x, disk.y, 2.0);
    let spec = OcclusionSpec::new(5, 0, 16).unwrap();
    let map = compute_cis(&textured(48, 48, 9), &corr, canonical, &oracle, 0, &spec).unwrap();
    let fsz = canonical_patch_size(5, 24, 48) as i64;
    let (cx, cy) = canonical_pts[star].pixel();
    let frac = mass_near(&map, cx, cy, 2 * fsz);
    assert!(frac >= 0.9, "only {frac} of the mass near the planted vertex");
}

#[test]
fn paired_map_of_constant_embeddings_is_zero() {
    let dims = Dims::new(12, 12);
    let img = textured(12, 12, 1);
    let pair = VerificationPair::new(img.clone(), img, 1, 0.5).unwrap();
    let corr = grid(dims, 2);
    let oracle = ConstantEmbedding(embedding_info("constant-embedding"));
    let map = paired_cis(
        &pair,
        &corr,
        &corr,
        dims,
        &oracle,
        &OcclusionSpec::new(3, 0, 8).unwrap(),
    )
    .unwrap();
    assert!(map.values().iter().all(|&v| v == 0.0));
}

#[test]
fn paired_map_finds_the_disk_in_the_first_image() {
    let dims = Dims::new(24, 24);
    let (dx, dy) = (6.0, 15.0);
    let first = FaceImage::from_fn(24, 24, |x, y| {
        if (x as f64 - dx).hypot(y as f64 - dy) <= 2.0 {
            255
        } else {
            90
        }
    })
    .unwrap();
    let second = FaceImage::from_fn(24, 24, |x, y| {
        if (x as f64 - dx).hypot(y as f64 - dy) <= 2.0 {
            0
        } else {
            90
        }
    })
    .unwrap();
    let pair = VerificationPair::new(first, second, 1, 0.5).unwrap();
    let corr = grid(dims, 1);
    let oracle = DiskEmbedding(embedding_info("disk-embedding"), DiskOracle::new(dx, dy, 2.0));
    let spec = OcclusionSpec::new(3, 0, 32).unwrap();
    let map = paired_cis(&pair, &corr, &corr, dims, &oracle, &spec).unwrap();
    let frac = mass_near(&map, dx as i64, dy as i64, 2 * 3);
    assert!(frac >= 0.9, "{frac}");
    assert!(map.get(dx as usize, dy as usize) > 0.0);
}

#[test]
fn self_pair_matches_single_image_wrapper() {
    let dims = Dims::new(10, 10);
    let img = textured(10, 10, 4);
    let inner = IdentityEmbeddingOracle::new();
    let corr = grid(dims, 1);
    let spec = OcclusionSpec::new(3, 0, 7).unwrap();
    let pair = VerificationPair::new(img.clone(), img.clone(), 1, 0.4).unwrap();
    let paired = paired_cis(&pair, &corr, &corr, dims, &inner, &spec).unwrap();
    let wrapper = SelfPair {
        info: OracleInfo {
            capabilities: Capabilities {
                scores: true,
                ..Capabilities::default()
            },
            ..embedding_info("self-pair")
        },
        inner: &inner,
        threshold: 0.4,
    };
    let single = compute_cis(&img, &corr, dims, &wrapper, 0, &spec).unwrap();
    assert_eq!(paired.values(), single.values());
}

#[test]
fn zero_shot_oracle_drives_the_occlusion_pipeline() {
    let dims = Dims::new(12, 12);
    let query = textured(12, 12, 21);
    let inner = IdentityEmbeddingOracle::new();
    let emb = |img: &FaceImage| inner.embed(std::slice::from_ref(img)).unwrap().remove(0);
    let gallery = Gallery::new(vec![
        (0, emb(&textured(12, 12, 22))),
        (0, emb(&query)),
        (1, emb(&textured(12, 12, 23))),
    ])
    .unwrap();
    assert!((zero_shot_confidence(&query, 0, &gallery, &inner).unwrap() - 1.0).abs() < 1e-12);

    let oracle = ZeroShotOracle::new(&inner, &gallery).unwrap();
    assert_eq!(
        oracle.score(std::slice::from_ref(&query), 1).unwrap()[0],
        zero_shot_confidence(&query, 1, &gallery, &inner).unwrap()
    );
    let map = compute_cis(
        &query,
        &grid(dims, 3),
        dims,
        &oracle,
        0,
        &OcclusionSpec::new(3, 0, 4).unwrap(),
    )
    .unwrap();
    assert!(map.values().iter().all(|&v| v >= 0.0));
    assert!(map.sum() > 0.0);
    assert!(ZeroShotOracle::new(&DiskOracle::new(1.0, 1.0, 1.0), &gallery).is_err());
}
