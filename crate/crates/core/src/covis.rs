//! Face mask MF, landmark box MB, covisible mask MC = MB ⊙ MF and mouth exclusion.

use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::assets::LandmarkBinding;
use crate::camera::Camera;
use crate::decoder::embed_landmarks;
use crate::error::{Error, Result};
use crate::image::save_mask_png;
use crate::render::{point_visible, FrameBuffer};
use crate::texture::VISIBILITY_EPS;

/// Default MB dilation as a fraction of the landmark box diagonal.
pub const DEFAULT_BOX_MARGIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Face,
    LandmarkBox,
    Covisible,
    MouthExcluded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
    pub source: MaskSource,
}

impl BinaryMask {
    pub fn filled(width: usize, height: usize, value: bool, source: MaskSource) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            source,
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_mask_png(&self.data, self.width, self.height, path)
    }
}

/// MF: pixels covered by any triangle.
pub fn face_mask(fb: &FrameBuffer) -> BinaryMask {
    BinaryMask {
        width: fb.width,
        height: fb.height,
        data: fb.triangle_id.iter().map(|&t| t >= 0).collect(),
        source: MaskSource::Face,
    }
}

/// Landmark indices whose surface points pass the depth test in both views.
/// Each view is `(framebuffer, camera)` rasterized from `vertices`.
pub fn covisible_landmarks(
    view_a: (&FrameBuffer, &Camera),
    view_b: (&FrameBuffer, &Camera),
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    embedding: &[LandmarkBinding],
) -> Vec<usize> {
    let points = embed_landmarks(vertices, faces, embedding);
    let visible = |(fb, cam): (&FrameBuffer, &Camera), x: &Vector3<f64>| point_visible(fb, vertices, faces, cam, x, VISIBILITY_EPS);
    points
        .iter()
        .enumerate()
        .filter(|(_, x)| visible(view_a, x) && visible(view_b, x))
        .map(|(i, _)| i)
        .collect()
}

/// MB: axis-aligned box of `points` dilated by `margin` × diagonal (at least
/// one pixel), tested at pixel centres and clipped to the image.
pub fn landmark_bbox_mask(points: &[Vector2<f64>], width: usize, height: usize, margin: f64) -> BinaryMask {
    let mut mask = BinaryMask::filled(width, height, false, MaskSource::LandmarkBox);
    if points.is_empty() {
        return mask;
    }
    let lo = points.iter().fold(Vector2::repeat(f64::INFINITY), |m, p| m.inf(p));
    let hi = points.iter().fold(Vector2::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
    let pad = (margin * (hi - lo).norm()).max(1.0);
    let (lo, hi) = (lo - Vector2::repeat(pad), hi + Vector2::repeat(pad));
    for y in 0..height {
        let cy = y as f64 + 0.5;
        if cy < lo.y || cy > hi.y {
            continue;
        }
        for x in 0..width {
            let cx = x as f64 + 0.5;
            if cx >= lo.x && cx <= hi.x {
                mask.data[y * width + x] = true;
            }
        }
    }
    mask
}

/// MC = MB ⊙ MF.
pub fn covisible_mask(mb: &BinaryMask, mf: &BinaryMask) -> Result<BinaryMask> {
    if mb.width != mf.width || mb.height != mf.height {
        return Err(Error::ResolutionMismatch(format!(
            "MB {}x{} vs MF {}x{}",
            mb.width, mb.height, mf.width, mf.height
        )));
    }
    Ok(BinaryMask {
        width: mb.width,
        height: mb.height,
        data: mb.data.iter().zip(&mf.data).map(|(&a, &b)| a && b).collect(),
        source: MaskSource::Covisible,
    })
}

/// Even-odd point-in-polygon test.
pub fn inside_polygon(polygon: &[Vector2<f64>], p: &Vector2<f64>) -> bool {
    let mut inside = false;
    let n = polygon.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Removes pixels whose centres fall inside the mouth polygon. Returns the
/// mask and `false` when the polygon is degenerate (fewer than 3 points),
/// in which case the mask is returned unchanged.
pub fn mouth_exclusion(mask: &BinaryMask, polygon: &[Vector2<f64>]) -> (BinaryMask, bool) {
    let mut out = mask.clone();
    if polygon.len() < 3 {
        return (out, false);
    }
    let lo = polygon.iter().fold(Vector2::repeat(f64::INFINITY), |m, p| m.inf(p));
    let hi = polygon.iter().fold(Vector2::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
    let y0 = lo.y.floor().max(0.0) as usize;
    let x0 = lo.x.floor().max(0.0) as usize;
    let y1 = (hi.y.ceil().max(0.0) as usize).min(mask.height);
    let x1 = (hi.x.ceil().max(0.0) as usize).min(mask.width);
    for y in y0..y1 {
        for x in x0..x1 {
            let i = y * mask.width + x;
            if out.data[i] && inside_polygon(polygon, &Vector2::new(x as f64 + 0.5, y as f64 + 0.5)) {
                out.data[i] = false;
            }
        }
    }
    out.source = MaskSource::MouthExcluded;
    (out, true)
}
