use csm_core::canonical::{cis_accumulator, compute_cms, CmsStream};
use csm_core::evaluation::{negative_explanation, standardize, win_pct, EvaluationRecord};
use csm_core::oracle::synthetic::{IdentityEmbeddingOracle, LinearOracle};
use csm_core::oracle::{score_batch, InputShape};
use csm_core::tasks::{cosine, verification_confidence, zero_shot_confidence, Gallery, VerificationPair};
use csm_core::{
    occlude, vertex_drops, DenseCorrespondence, Dims, Embedding, FaceImage, Frame, OcclusionSpec, Point2, SaliencyMap,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_image(w: usize, h: usize, seed: u64) -> FaceImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FaceImage::from_fn(w, h, |_, _| rng.random()).unwrap()
}

fn random_corr(input: Dims, canonical: Dims, n: usize, seed: u64) -> DenseCorrespondence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pt = |d: Dims| {
        Point2::new(
            rng.random_range(0.0..d.width as f64 - 0.5),
            rng.random_range(0.0..d.height as f64 - 0.5),
        )
    };
    let (a, b): (Vec<_>, Vec<_>) = (0..n).map(|_| (pt(input), pt(canonical))).unzip();
    DenseCorrespondence::new(a, b, None, input, canonical).unwrap()
}

fn linear(dims: Dims, seed: u64) -> LinearOracle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..dims.area()).map(|_| rng.random_range(-1e-3..1e-3)).collect();
    LinearOracle::new(
        InputShape {
            width: dims.width,
            height: dims.height,
            channels: 1,
        },
        weights,
    )
    .unwrap()
}

/// Square membership written independently of the library's span arithmetic.
fn in_square(x: i64, c: i64, sz: i64) -> bool {
    if sz % 2 == 1 {
        (x - c).abs() <= (sz - 1) / 2
    } else {
        x - c >= -sz / 2 && x - c < sz / 2
    }
}

fn map_strategy() -> impl Strategy<Value = SaliencyMap> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        prop::collection::vec(-1e3f32..1e3, w * h)
            .prop_map(move |v| SaliencyMap::new(Dims::new(w, h), Frame::Canonical, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn csm_bytes_round_trip(map in map_strategy(), image_frame in any::<bool>()) {
        let map = if image_frame {
            SaliencyMap::new(map.dims(), Frame::Image, map.values().to_vec()).unwrap()
        } else {
            map
        };
        let back = SaliencyMap::from_bytes(&map.to_bytes()).unwrap();
        prop_assert_eq!(back.dims(), map.dims());
        prop_assert_eq!(back.frame(), map.frame());
        prop_assert_eq!(
            back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            map.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn occlusion_is_local(w in 1usize..24, h in 1usize..24, sz in 1usize..12, fill: u8, fx in 0.0f64..1.0, fy in 0.0f64..1.0, seed: u64) {
        let img = noise_image(w, h, seed);
        let c = Point2::new(fx * (w as f64 - 1.0), fy * (h as f64 - 1.0));
        let out = occlude(&img, c, &OcclusionSpec::new(sz, fill, 1).unwrap()).unwrap();
        let (cx, cy) = c.pixel();
        for y in 0..h {
            for x in 0..w {
                let inside = in_square(x as i64, cx, sz as i64) && in_square(y as i64, cy, sz as i64);
                let expected = if inside { fill } else { img.get(x, y, 0) };
                prop_assert_eq!(out.get(x, y, 0), expected, "pixel ({}, {})", x, y);
            }
        }
    }

    #[test]
    fn drops_do_not_depend_on_batch(n in 1usize..40, batch in 1usize..70, sz in 1usize..9, seed: u64) {
        let dims = Dims::new(16, 12);
        let img = noise_image(16, 12, seed);
        let corr = random_corr(dims, dims, n, seed ^ 1);
        let oracle = linear(dims, seed ^ 2);
        let a = vertex_drops(&img, &corr, &oracle, 0, &OcclusionSpec::new(sz, 0, 1).unwrap()).unwrap();
        let b = vertex_drops(&img, &corr, &oracle, 0, &OcclusionSpec::new(sz, 0, batch).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn uncovered_pixels_are_zero(n in 1usize..30, sz in 1usize..9, seed: u64) {
        let input = Dims::new(20, 20);
        let canonical = Dims::new(10, 14);
        let img = noise_image(20, 20, seed);
        let corr = random_corr(input, canonical, n, seed ^ 7);
        let acc = cis_accumulator(&img, &corr, canonical, &linear(input, seed), 0, &OcclusionSpec::new(sz, 0, 8).unwrap()).unwrap();
        let map = acc.to_map(Frame::Canonical).unwrap();
        for (i, &c) in acc.counts().counts().iter().enumerate() {
            if c == 0 {
                prop_assert_eq!(map.values()[i], 0.0);
                prop_assert_eq!(acc.sums()[i], 0.0);
            }
        }
    }

    #[test]
    fn cis_is_linear_in_the_oracle(a in -3.0f64..3.0, b in -3.0f64..3.0, seed: u64) {
        let dims = Dims::new(14, 14);
        let img = noise_image(14, 14, seed);
        let corr = random_corr(dims, Dims::new(9, 9), 25, seed ^ 3);
        let (o1, o2) = (linear(dims, seed ^ 4), linear(dims, seed ^ 5));
        let mixed: Vec<f64> = o1.weights().iter().zip(o2.weights()).map(|(w1, w2)| a * w1 + b * w2).collect();
        let o = LinearOracle::new(InputShape { width: 14, height: 14, channels: 1 }, mixed).unwrap();
        let spec = OcclusionSpec::new(5, 0, 4).unwrap();
        let cis = |o: &LinearOracle| cis_accumulator(&img, &corr, Dims::new(9, 9), o, 0, &spec).unwrap().normalized();
        let (m, m1, m2) = (cis(&o), cis(&o1), cis(&o2));
        for i in 0..m.len() {
            let expected = a * m1[i] + b * m2[i];
            prop_assert!((m[i] - expected).abs() <= 1e-9, "pixel {}: {} vs {}", i, m[i], expected);
        }
    }

    #[test]
    fn cms_ignores_order(maps in prop::collection::vec(prop::collection::vec(-50f32..50.0, 6), 1..20), seed: u64) {
        let dims = Dims::new(3, 2);
        let maps: Vec<SaliencyMap> = maps.into_iter().map(|v| SaliencyMap::new(dims, Frame::Canonical, v).unwrap()).collect();
        let mut shuffled = maps.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let a = compute_cms(&maps).unwrap();
        let b = compute_cms(&shuffled).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        let mut stream = CmsStream::new();
        for m in &shuffled {
            stream.push(m).unwrap();
        }
        prop_assert_eq!(stream.finish().unwrap().0.to_bytes(), a.to_bytes());
    }

    #[test]
    fn cosine_symmetric_and_scale_free(u in prop::collection::vec(-10.0f64..10.0, 4), v in prop::collection::vec(-10.0f64..10.0, 4), alpha in 1e-3f64..1e3) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let (eu, ev) = (Embedding::new(u.clone()).unwrap(), Embedding::new(v).unwrap());
        let scaled = Embedding::new(u.iter().map(|x| alpha * x).collect()).unwrap();
        prop_assert_eq!(cosine(&eu, &ev).unwrap(), cosine(&ev, &eu).unwrap());
        prop_assert!((cosine(&scaled, &ev).unwrap() - cosine(&eu, &ev).unwrap()).abs() < 1e-12);
        let c = cosine(&eu, &ev).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn verification_flips_with_label(s1: u64, s2: u64, tau in -1.0f64..1.0) {
        let (a, b) = (noise_image(6, 6, s1), noise_image(6, 6, s2));
        let oracle = IdentityEmbeddingOracle::new();
        let pos = verification_confidence(&VerificationPair::new(a.clone(), b.clone(), 1, tau).unwrap(), &oracle).unwrap();
        let neg = verification_confidence(&VerificationPair::new(a, b, -1, tau).unwrap(), &oracle).unwrap();
        prop_assert_eq!(pos, -neg);
    }

    #[test]
    fn zero_shot_stays_in_range(q: u64, g in prop::collection::vec(any::<u64>(), 1..5)) {
        let oracle = IdentityEmbeddingOracle::new();
        let entries = g.iter().map(|&s| {
            let e = oracle_embed(&oracle, &noise_image(5, 5, s));
            (0usize, e)
        }).collect();
        let gallery = Gallery::new(entries).unwrap();
        let s = zero_shot_confidence(&noise_image(5, 5, q), 0, &gallery, &oracle).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn wins_add_up_to_100(conf in prop::collection::vec(prop::collection::vec(0u8..4, 3), 1..30)) {
        let records: Vec<EvaluationRecord> = conf
            .iter()
            .enumerate()
            .map(|(i, c)| {
                EvaluationRecord::new(format!("img{i}"), 1.0)
                    .with("a", f64::from(c[0]) / 4.0)
                    .with("b", f64::from(c[1]) / 4.0)
                    .with("c", f64::from(c[2]) / 4.0)
            })
            .collect();
        let total: f64 = win_pct(&records).unwrap().values().sum();
        prop_assert!((total - 100.0).abs() <= 1e-9, "total {}", total);
    }

    #[test]
    fn standardize_ignores_affine_changes(v in prop::collection::vec(0.0f32..1.0, 2..40), alpha in 0.1f32..10.0, beta in -5.0f32..5.0, s in 0.5f64..20.0) {
        let dims = Dims::new(v.len(), 1);
        let h = SaliencyMap::new(dims, Frame::Image, v.clone()).unwrap();
        let g = SaliencyMap::new(dims, Frame::Image, v.iter().map(|x| alpha * x + beta).collect()).unwrap();
        let (a, b) = (standardize(&h, s).unwrap(), standardize(&g, s).unwrap());
        let range = v.iter().cloned().fold(f32::MIN, f32::max) - v.iter().cloned().fold(f32::MAX, f32::min);
        prop_assume!(range > 1e-2);
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-4 * s, "{} vs {}", x, y);
        }
        let total: f64 = a.values().iter().sum();
        prop_assert!((total - s).abs() <= 1e-6);
    }

    #[test]
    fn darker_heatmap_never_brightens(v in prop::collection::vec(0.0f32..1.0, 16), bump in 0usize..16, extra in 0.0f32..1.0, seed: u64) {
        let dims = Dims::new(4, 4);
        let img = noise_image(4, 4, seed);
        let lo = standardize(&SaliencyMap::new(dims, Frame::Image, v).unwrap(), 4.0).unwrap();
        let mut hi_vals = lo.values().to_vec();
        hi_vals[bump] += f64::from(extra);
        let e_lo = negative_explanation(&img, &lo).unwrap();
        let e_hi = negative_explanation(&img, &with_values(&lo, hi_vals)).unwrap();
        for (a, b) in e_lo.data().iter().zip(e_hi.data()) {
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn batched_scores_match_single_scores(n in 1usize..12, batch in 1usize..8, seed: u64) {
        let dims = Dims::new(6, 5);
        let oracle = linear(dims, seed);
        let imgs: Vec<FaceImage> = (0..n as u64).map(|i| noise_image(6, 5, seed.wrapping_add(i))).collect();
        let all = score_batch(&oracle, &imgs, 0, batch).unwrap();
        for (j, img) in imgs.iter().enumerate() {
            prop_assert_eq!(all[j], score_batch(&oracle, std::slice::from_ref(img), 0, 1).unwrap()[0]);
        }
    }
}

fn oracle_embed(oracle: &IdentityEmbeddingOracle, img: &FaceImage) -> Embedding {
    csm_core::oracle::embed_batch(oracle, std::slice::from_ref(img), 1)
        .unwrap()
        .remove(0)
}

fn with_values(
    h: &csm_core::evaluation::StandardizedHeatmap,
    values: Vec<f64>,
) -> csm_core::evaluation::StandardizedHeatmap {
    csm_core::evaluation::StandardizedHeatmap::from_values(h.dims(), values, h.scale()).unwrap()
}
