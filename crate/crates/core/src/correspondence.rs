//! Dense vertex correspondences between an input face and the canonical face.
//!
//! On disk a correspondence is a `.dcorr` text file: the first non-comment
//! line holds the vertex count `N`, then `N` rows of `x_I y_I x_F y_F [v]`
//! in pixel units, where the optional `v` is a 0/1 visibility flag. Lines
//! starting with `#` are comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Dims, Point2};

/// 1:1 mapping of mesh vertices projected onto the input image and onto the
/// canonical face. Index `n` in both lists refers to the same facial point.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCorrespondence {
    input_points: Vec<Point2>,
    canonical_points: Vec<Point2>,
    visible: Vec<bool>,
    input_dims: Dims,
    canonical_dims: Dims,
}

/// Frame sizes a correspondence is validated against, plus the vertex stride.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub input_dims: Dims,
    pub canonical_dims: Dims,
    /// Keep every `stride`-th vertex, starting with vertex 0.
    pub stride: usize,
}

impl LoadOptions {
    pub fn new(input_dims: Dims, canonical_dims: Dims) -> Self {
        Self {
            input_dims,
            canonical_dims,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

impl DenseCorrespondence {
    pub fn new(
        input_points: Vec<Point2>,
        canonical_points: Vec<Point2>,
        visible: Option<Vec<bool>>,
        input_dims: Dims,
        canonical_dims: Dims,
    ) -> Result<Self> {
        if input_points.is_empty() {
            return Err(Error::Validation("correspondence has no vertices".into()));
        }
        if input_points.len() != canonical_points.len() {
            return Err(Error::Validation(format!(
                "{} input points but {} canonical points",
                input_points.len(),
                canonical_points.len()
            )));
        }
        let visible = visible.unwrap_or_else(|| vec![true; input_points.len()]);
        if visible.len() != input_points.len() {
            return Err(Error::Validation(format!(
                "{} visibility flags for {} vertices",
                visible.len(),
                input_points.len()
            )));
        }
        check_bounds(&input_points, input_dims, "input")?;
        check_bounds(&canonical_points, canonical_dims, "canonical")?;
        Ok(Self {
            input_points,
            canonical_points,
            visible,
            input_dims,
            canonical_dims,
        })
    }

    /// Correspondence that maps every `step`-th pixel of `dims` onto itself.
    /// Used when pixel positions are taken as already aligned.
    pub fn identity_grid(dims: Dims, step: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::Validation("grid step must be >= 1".into()));
        }
        let points: Vec<Point2> = (0..dims.height)
            .step_by(step)
            .flat_map(|y| {
                (0..dims.width)
                    .step_by(step)
                    .map(move |x| Point2::new(x as f64, y as f64))
            })
            .collect();
        Self::new(points.clone(), points, None, dims, dims)
    }

    pub fn len(&self) -> usize {
        self.input_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_points.is_empty()
    }

    pub fn input_points(&self) -> &[Point2] {
        &self.input_points
    }

    pub fn canonical_points(&self) -> &[Point2] {
        &self.canonical_points
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }

    pub fn canonical_dims(&self) -> Dims {
        self.canonical_dims
    }

    /// Indices of vertices flagged visible, in ascending order.
    pub fn visible_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.visible.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i)
    }

    /// Keeps every `stride`-th vertex, starting at vertex 0.
    pub fn with_stride(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Validation("stride must be >= 1".into()));
        }
        let pick = |v: &[Point2]| v.iter().step_by(stride).copied().collect::<Vec<_>>();
        Ok(Self {
            input_points: pick(&self.input_points),
            canonical_points: pick(&self.canonical_points),
            visible: self.visible.iter().step_by(stride).copied().collect(),
            input_dims: self.input_dims,
            canonical_dims: self.canonical_dims,
        })
    }

    pub fn load(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, opts)
    }

    /// Parses `.dcorr` text. `origin` only labels parse errors.
    pub fn parse(text: &str, origin: impl Into<PathBuf>, opts: &LoadOptions) -> Result<Self> {
        let origin = origin.into();
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: origin.clone(),
            line,
            msg,
        };

        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (header_line, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing vertex count header".into()))?;
        let expected: usize = header
            .parse()
            .map_err(|_| parse_err(header_line, format!("expected vertex count, found {header:?}")))?;

        let mut input = Vec::with_capacity(expected);
        let mut canonical = Vec::with_capacity(expected);
        let mut visible = Vec::with_capacity(expected);
        for (line, row) in lines {
            let fields: Vec<&str> = row.split_whitespace().collect();
            if fields.len() != 4 && fields.len() != 5 {
                return Err(parse_err(
                    line,
                    format!("expected 4 or 5 fields, found {}", fields.len()),
                ));
            }
            let mut coords = [0.0f64; 4];
            for (slot, field) in coords.iter_mut().zip(&fields) {
                *slot = field
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("bad coordinate {field:?}")))?;
            }
            let vis = match fields.get(4) {
                None | Some(&"1") => true,
                Some(&"0") => false,
                Some(other) => return Err(parse_err(line, format!("visibility must be 0 or 1, found {other:?}"))),
            };
            input.push(Point2::new(coords[0], coords[1]));
            canonical.push(Point2::new(coords[2], coords[3]));
            visible.push(vis);
        }
        if input.len() != expected {
            return Err(Error::Validation(format!(
                "{}: header declares {expected} vertices but {} rows follow",
                origin.display(),
                input.len()
            )));
        }

        let corr = Self::new(input, canonical, Some(visible), opts.input_dims, opts.canonical_dims)?;
        if opts.stride == 1 {
            Ok(corr)
        } else {
            corr.with_stride(opts.stride)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.len());
        for ((i, f), v) in self.input_points.iter().zip(&self.canonical_points).zip(&self.visible) {
            let _ = writeln!(out, "{} {} {} {} {}", i.x, i.y, f.x, f.y, u8::from(*v));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn check_bounds(points: &[Point2], dims: Dims, which: &str) -> Result<()> {
    for (n, p) in points.iter().enumerate() {
        let (x, y) = p.pixel();
        if !dims.contains(x, y) {
            return Err(Error::Validation(format!(
                "{which} vertex {n} at ({}, {}) lies outside {}x{}",
                p.x, p.y, dims.width, dims.height
            )));
        }
    }
    Ok(())
}
