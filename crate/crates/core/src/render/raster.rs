use nalgebra::{Vector2, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;

const NEAR: f64 = 1e-6;

/// Per-pixel rasterizer output. Geometry channels are filled by [`rasterize`];
/// `color` is left black for a renderer to fill.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffer {
    pub width: usize,
    pub height: usize,
    pub color: Image,
    pub depth: Vec<f64>,
    /// `-1` where no triangle covers the pixel centre.
    pub triangle_id: Vec<i64>,
    /// Perspective-correct barycentrics of the pixel centre.
    pub barycentric: Vec<[f64; 3]>,
    pub face_mask: Vec<bool>,
}

impl FrameBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: Image::new(width, height),
            depth: vec![f64::INFINITY; n],
            triangle_id: vec![-1; n],
            barycentric: vec![[0.0; 3]; n],
            face_mask: vec![false; n],
        }
    }

    pub fn covered(&self, index: usize) -> Option<usize> {
        let t = self.triangle_id[index];
        (t >= 0).then_some(t as usize)
    }

    pub fn coverage(&self) -> usize {
        self.face_mask.iter().filter(|&&m| m).count()
    }
}

#[inline]
pub(crate) fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Screen-space projection of a triangle with camera-space depths.
#[derive(Clone, Copy, Debug)]
pub struct ScreenTriangle {
    pub pixels: [Vector2<f64>; 3],
    pub depths: [f64; 3],
}

impl ScreenTriangle {
    /// Perspective-correct barycentrics and depth at a screen location
    /// (may be outside the triangle; then some weights are negative).
    pub fn interpolate(&self, p: &Vector2<f64>) -> Option<([f64; 3], f64)> {
        let [p0, p1, p2] = &self.pixels;
        let area = edge(p0, p1, p2);
        if area.abs() < 1e-14 {
            return None;
        }
        let b = [edge(p1, p2, p) / area, edge(p2, p0, p) / area, edge(p0, p1, p) / area];
        let w = [b[0] / self.depths[0], b[1] / self.depths[1], b[2] / self.depths[2]];
        let s = w[0] + w[1] + w[2];
        if s.abs() < 1e-300 {
            return None;
        }
        Some(([w[0] / s, w[1] / s, w[2] / s], 1.0 / s))
    }
}

/// Whether the triangle faces the camera (outward counter-clockwise winding).
pub fn is_front_facing(camera: &Camera, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> bool {
    let n = (b - a).cross(&(c - a));
    n.dot(&(camera.center() - a)) > 0.0
}

pub fn screen_triangle(camera: &Camera, vertices: &[Vector3<f64>], face: &[usize; 3]) -> Option<ScreenTriangle> {
    let mut pixels = [Vector2::zeros(); 3];
    let mut depths = [0.0; 3];
    for i in 0..3 {
        let p = camera.project_point(&vertices[face[i]]);
        if p.depth <= NEAR {
            return None;
        }
        pixels[i] = p.pixel;
        depths[i] = p.depth;
    }
    Some(ScreenTriangle { pixels, depths })
}

/// Z-buffered triangle rasterization with back-face culling; samples at pixel centres.
pub fn rasterize(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    camera: &Camera,
    width: usize,
    height: usize,
) -> Result<FrameBuffer> {
    if width == 0 || height == 0 {
        return Err(Error::Degenerate("zero-area image".into()));
    }
    let mut fb = FrameBuffer::empty(width, height);
    for (fi, face) in faces.iter().enumerate() {
        let (a, b, c) = (&vertices[face[0]], &vertices[face[1]], &vertices[face[2]]);
        if !is_front_facing(camera, a, b, c) {
            continue;
        }
        let Some(tri) = screen_triangle(camera, vertices, face) else {
            continue;
        };
        let [p0, p1, p2] = &tri.pixels;
        let area = edge(p0, p1, p2);
        if area.abs() < 1e-14 {
            continue;
        }
        let min_x = p0.x.min(p1.x).min(p2.x).floor().max(0.0) as usize;
        let min_y = p0.y.min(p1.y).min(p2.y).floor().max(0.0) as usize;
        let max_x = (p0.x.max(p1.x).max(p2.x).ceil() as i64).min(width as i64 - 1);
        let max_y = (p0.y.max(p1.y).max(p2.y).ceil() as i64).min(height as i64 - 1);
        if max_x < 0 || max_y < 0 {
            continue;
        }
        for y in min_y..=max_y as usize {
            for x in min_x..=max_x as usize {
                let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let b = [edge(p1, p2, &p) / area, edge(p2, p0, &p) / area, edge(p0, p1, &p) / area];
                if b.iter().any(|&v| v < 0.0) {
                    continue;
                }
                let w = [b[0] / tri.depths[0], b[1] / tri.depths[1], b[2] / tri.depths[2]];
                let s = w[0] + w[1] + w[2];
                let z = 1.0 / s;
                let idx = y * width + x;
                if z < fb.depth[idx] {
                    fb.depth[idx] = z;
                    fb.triangle_id[idx] = fi as i64;
                    fb.barycentric[idx] = [w[0] / s, w[1] / s, w[2] / s];
                    fb.face_mask[idx] = true;
                }
            }
        }
    }
    Ok(fb)
}

/// Depth-test visibility of a surface point against a framebuffer rasterized
/// from `vertices` with `camera`: the point is visible when it is no farther
/// than the visible surface at its own projected location plus `eps`.
pub fn point_visible(
    fb: &FrameBuffer,
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    camera: &Camera,
    point: &Vector3<f64>,
    eps: f64,
) -> bool {
    let proj = camera.project_point(point);
    if !proj.in_front() {
        return false;
    }
    let (x, y) = (proj.pixel.x.floor(), proj.pixel.y.floor());
    if x < 0.0 || y < 0.0 || x >= fb.width as f64 || y >= fb.height as f64 {
        return false;
    }
    let idx = y as usize * fb.width + x as usize;
    let Some(tri) = fb.covered(idx) else {
        return false;
    };
    let surface_depth = screen_triangle(camera, vertices, &faces[tri])
        .and_then(|st| st.interpolate(&proj.pixel))
        .map(|(_, z)| z)
        .unwrap_or(fb.depth[idx]);
    proj.depth <= surface_depth + eps
}
