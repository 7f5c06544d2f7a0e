//! Procedural faces with exact dense correspondences.
//!
//! A face is parameterized by coordinates `(u, v)` on the unit disk. The
//! canonical face is a flat frontal projection of that disk; an input face
//! wraps `u` around a cylinder (so mesh vertices crowd toward the cheeks),
//! then scales, rotates, and translates it. Having both projections in closed
//! form gives ground-truth correspondences for tests, benchmarks, and demos.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canonical::Sample;
use crate::correspondence::DenseCorrespondence;
use crate::error::Result;
use crate::image::{Dims, FaceImage, Point2};

const BACKGROUND: u8 = 30;
const SKIN: u8 = 150;

/// Bright disk painted on the face, in face coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedFeature {
    pub u: f64,
    pub v: f64,
    pub radius: f64,
}

/// Pose of a face in an input image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub angle: f64,
}

/// Ranges placements are drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Maximum centre offset from the image centre, in pixels.
    pub shift: f64,
    pub scale: (f64, f64),
    /// Maximum absolute rotation, in radians.
    pub angle: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        shift: 0.0,
        scale: (1.0, 1.0),
        angle: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceModel {
    pub canonical: Dims,
    /// Face half-width and half-height at scale 1, in pixels.
    pub radius_x: f64,
    pub radius_y: f64,
    /// Mesh spacing in face coordinates.
    pub mesh_step: f64,
    pub feature: Option<PlantedFeature>,
}

impl FaceModel {
    /// Face filling most of a `canonical` frame.
    pub fn new(canonical: Dims) -> Self {
        Self {
            canonical,
            radius_x: canonical.width as f64 * 0.38,
            radius_y: canonical.height as f64 * 0.45,
            mesh_step: 0.05,
            feature: None,
        }
    }

    pub fn with_feature(mut self, feature: PlantedFeature) -> Self {
        self.feature = Some(feature);
        self
    }

    pub fn with_mesh_step(mut self, step: f64) -> Self {
        self.mesh_step = step;
        self
    }

    /// Face coordinates of every mesh vertex, row by row.
    pub fn mesh(&self) -> Vec<(f64, f64)> {
        let steps = (1.0 / self.mesh_step).floor() as i64;
        let mut out = Vec::new();
        for j in -steps..=steps {
            for i in -steps..=steps {
                let (u, v) = (i as f64 * self.mesh_step, j as f64 * self.mesh_step);
                if u * u + v * v <= 1.0 {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn canonical_point(&self, u: f64, v: f64) -> Point2 {
        Point2::new(
            (self.canonical.width as f64 - 1.0) / 2.0 + self.radius_x * u,
            (self.canonical.height as f64 - 1.0) / 2.0 + self.radius_y * v,
        )
    }

    /// Placement that puts a face on the canonical frame's centre at scale 1.
    pub fn centred(dims: Dims) -> Placement {
        Placement {
            cx: (dims.width as f64 - 1.0) / 2.0,
            cy: (dims.height as f64 - 1.0) / 2.0,
            scale: 1.0,
            angle: 0.0,
        }
    }

    pub fn project(&self, p: &Placement, u: f64, v: f64) -> Point2 {
        let a = p.scale * self.radius_x * (u * FRAC_PI_2).sin();
        let b = p.scale * self.radius_y * v;
        let (s, c) = p.angle.sin_cos();
        Point2::new(p.cx + c * a - s * b, p.cy + s * a + c * b)
    }

    /// Face coordinates under input pixel `(x, y)`, if it is on the face.
    fn unproject(&self, p: &Placement, x: f64, y: f64) -> Option<(f64, f64)> {
        let (s, c) = p.angle.sin_cos();
        let (dx, dy) = (x - p.cx, y - p.cy);
        let a = (c * dx + s * dy) / (p.scale * self.radius_x);
        let b = (-s * dx + c * dy) / (p.scale * self.radius_y);
        if a.abs() > 1.0 {
            return None;
        }
        let u = a.asin() / FRAC_PI_2;
        (u * u + b * b <= 1.0).then_some((u, b))
    }

    /// Intensity of the face surface at `(u, v)`.
    pub fn texture(&self, u: f64, v: f64) -> u8 {
        let inside = |cu: f64, cv: f64, ru: f64, rv: f64| ((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2) <= 1.0;
        if let Some(f) = self.feature {
            if inside(f.u, f.v, f.radius, f.radius) {
                return 255;
            }
        }
        if inside(-0.38, -0.25, 0.14, 0.09) || inside(0.38, -0.25, 0.14, 0.09) {
            50
        } else if inside(-0.38, -0.42, 0.18, 0.04) || inside(0.38, -0.42, 0.18, 0.04) {
            70
        } else if inside(0.0, 0.48, 0.3, 0.08) {
            80
        } else if inside(0.0, 0.1, 0.07, 0.18) {
            120
        } else {
            SKIN
        }
    }

    pub fn render(&self, p: &Placement, dims: Dims) -> Result<FaceImage> {
        FaceImage::from_fn(dims.width, dims.height, |x, y| {
            self.unproject(p, x as f64, y as f64)
                .map_or(BACKGROUND, |(u, v)| self.texture(u, v))
        })
    }

    pub fn render_canonical(&self) -> Result<FaceImage> {
        let (w, h) = (self.canonical.width as f64, self.canonical.height as f64);
        FaceImage::from_fn(self.canonical.width, self.canonical.height, |x, y| {
            let u = (x as f64 - (w - 1.0) / 2.0) / self.radius_x;
            let v = (y as f64 - (h - 1.0) / 2.0) / self.radius_y;
            if u * u + v * v <= 1.0 {
                self.texture(u, v)
            } else {
                BACKGROUND
            }
        })
    }

    /// Mesh correspondence for a placed face. Vertices that land outside the
    /// image are left out.
    pub fn correspondence(&self, p: &Placement, dims: Dims) -> Result<DenseCorrespondence> {
        let (input, canonical): (Vec<_>, Vec<_>) = self
            .mesh()
            .into_iter()
            .map(|(u, v)| (self.project(p, u, v), self.canonical_point(u, v)))
            .filter(|(q, _)| {
                let (x, y) = q.pixel();
                dims.contains(x, y)
            })
            .unzip();
        DenseCorrespondence::new(input, canonical, None, dims, self.canonical)
    }

    /// Mesh of the canonical face onto itself.
    pub fn canonical_correspondence(&self) -> Result<DenseCorrespondence> {
        let pts: Vec<Point2> = self
            .mesh()
            .into_iter()
            .map(|(u, v)| self.canonical_point(u, v))
            .collect();
        DenseCorrespondence::new(pts.clone(), pts, None, self.canonical, self.canonical)
    }

    pub fn random_placement(&self, dims: Dims, jitter: &Jitter, rng: &mut impl Rng) -> Placement {
        let mut draw = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let base = Self::centred(dims);
        let (dx, dy, angle) = (draw(jitter.shift), draw(jitter.shift), draw(jitter.angle));
        let scale = if jitter.scale.0 < jitter.scale.1 {
            rng.random_range(jitter.scale.0..=jitter.scale.1)
        } else {
            jitter.scale.0
        };
        Placement {
            cx: base.cx + dx,
            cy: base.cy + dy,
            scale,
            angle,
        }
    }

    /// `n` rendered faces with their correspondences, all labelled `class`.
    pub fn dataset(&self, dims: Dims, n: usize, jitter: &Jitter, class: usize, seed: u64) -> Result<Vec<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let p = self.random_placement(dims, jitter, &mut rng);
                Ok(Sample {
                    name: format!("face{i:04}"),
                    image: self.render(&p, dims)?,
                    corr: self.correspondence(&p, dims)?,
                    class,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_and_unproject_agree() {
        let model = FaceModel::new(Dims::new(64, 64));
        let p = Placement {
            cx: 40.0,
            cy: 30.0,
            scale: 0.9,
            angle: 0.2,
        };
        for (u, v) in model.mesh() {
            let q = model.project(&p, u, v);
            let (u2, v2) = model.unproject(&p, q.x, q.y).expect("on face");
            assert!((u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-9);
        }
    }

    #[test]
    fn vertices_crowd_at_the_sides() {
        let model = FaceModel::new(Dims::new(64, 64));
        let p = FaceModel::centred(Dims::new(64, 64));
        let gap = |u: f64| model.project(&p, u + 0.05, 0.0).x - model.project(&p, u, 0.0).x;
        assert!(gap(0.9) < gap(0.0) / 3.0);
    }

    #[test]
    fn dataset_is_seeded() {
        let model = FaceModel::new(Dims::new(32, 32)).with_mesh_step(0.2);
        let jitter = Jitter {
            shift: 3.0,
            scale: (0.9, 1.0),
            angle: 0.1,
        };
        let a = model.dataset(Dims::new(40, 40), 3, &jitter, 0, 9).unwrap();
        let b = model.dataset(Dims::new(40, 40), 3, &jitter, 0, 9).unwrap();
        assert_eq!(a[2].image, b[2].image);
        assert_eq!(a[2].corr, b[2].corr);
        assert_ne!(a[0].image, a[1].image);
    }
}
