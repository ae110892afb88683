//! Seeded synthetic multi-view scenes rendered from known model parameters.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::assets::FlameAssets;
use crate::camera::Camera;
use crate::decoder::{decode, embed_landmarks, FlameParams};
use crate::error::Result;
use crate::fitter::View;
use crate::image::{Image, Rgb};
use crate::render::{SHLighting, ShadingScene, UvRaster};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_views: usize,
    /// Outermost camera yaw in radians; views are spread evenly in `[-yaw, yaw]`.
    pub max_yaw: f64,
    /// Uniform per-view jitter added to yaw and pitch, radians.
    pub jitter: f64,
    pub distance: f64,
    pub resolution: usize,
    pub albedo_size: usize,
    /// Standard deviation of Gaussian noise on observed landmarks, pixels.
    pub landmark_noise: f64,
    /// Bounds on the drawn parameters.
    pub max_shape_norm: f64,
    pub max_expr_norm: f64,
    pub max_jaw: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_views: 3,
            max_yaw: 35f64.to_radians(),
            jitter: 3f64.to_radians(),
            distance: 0.3,
            resolution: 128,
            albedo_size: 128,
            landmark_noise: 0.0,
            max_shape_norm: 1.0,
            max_expr_norm: 1.0,
            max_jaw: 0.3,
        }
    }
}

/// Ground truth and observations of one synthetic subject.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub params: FlameParams,
    pub cameras: Vec<Camera>,
    pub lighting: SHLighting,
    pub albedo: Image,
    pub views: Vec<View>,
}

impl SyntheticScene {
    /// The scene restricted to a subset of its views.
    pub fn subset(&self, indices: &[usize]) -> SyntheticScene {
        SyntheticScene {
            params: self.params.clone(),
            cameras: indices.iter().map(|&i| self.cameras[i].clone()).collect(),
            lighting: self.lighting.clone(),
            albedo: self.albedo.clone(),
            views: indices.iter().map(|&i| self.views[i].clone()).collect(),
        }
    }

    /// Index of the view closest to frontal.
    pub fn frontal_view(&self) -> usize {
        (0..self.cameras.len())
            .max_by(|&a, &b| {
                let fa = -self.cameras[a].rotation[(2, 2)];
                let fb = -self.cameras[b].rotation[(2, 2)];
                fa.total_cmp(&fb)
            })
            .unwrap_or(0)
    }
}

fn vector_in_ball(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let r = radius * rng.gen_range(0.3f64..1.0);
    v.into_iter().map(|x| x / norm * r).collect()
}

/// Random parameters with `‖β‖ ≤ max_shape_norm`, `‖ψ‖ ≤ max_expr_norm`,
/// non-root joints opening by at most `max_jaw` radians, and zero root pose.
pub fn ground_truth_params(assets: &FlameAssets, rng: &mut ChaCha8Rng, config: &SyntheticConfig) -> FlameParams {
    let mut params = FlameParams::zeros(assets);
    params.beta = vector_in_ball(rng, assets.n_shape(), config.max_shape_norm);
    params.psi = vector_in_ball(rng, assets.n_expr(), config.max_expr_norm);
    for theta in params.theta.iter_mut().skip(1) {
        let open = rng.gen_range(0.3..1.0) * config.max_jaw;
        let side: f64 = rng.gen_range(-0.2..0.2) * config.max_jaw;
        let w = Vector3::new(open, side, 0.5 * side);
        let n = w.norm();
        *theta = if n > config.max_jaw { w * (config.max_jaw / n) } else { w };
    }
    params
}

/// Smooth skin-like albedo with blotches, giving the flow estimator texture.
pub fn procedural_albedo(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let base = Rgb::new(rng.gen_range(0.55..0.7), rng.gen_range(0.4..0.5), rng.gen_range(0.3..0.4));
    let waves: Vec<(f64, f64, f64, Rgb)> = (0..6)
        .map(|_| {
            let fu = rng.gen_range(4.0..18.0);
            let fv = rng.gen_range(4.0..18.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = Rgb::new(rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06), rng.gen_range(-0.05..0.05));
            (fu, fv, phase, amp)
        })
        .collect();
    let blobs: Vec<(Vector2<f64>, f64, Rgb)> = (0..60)
        .map(|_| {
            let c = Vector2::new(rng.gen_range(0.2..0.8), rng.gen_range(0.15..0.85));
            let r = rng.gen_range(0.008..0.025);
            let tint = Rgb::repeat(rng.gen_range(-0.25..0.2));
            (c, r, tint)
        })
        .collect();
    let mut img = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let uv = Vector2::new((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let mut c = base;
            for (fu, fv, phase, amp) in &waves {
                c += amp * (fu * uv.x * std::f64::consts::TAU + fv * uv.y * std::f64::consts::TAU + phase).sin();
            }
            for (centre, r, tint) in &blobs {
                let d2 = (uv - centre).norm_squared() / (r * r);
                c += tint * (-0.5 * d2).exp();
            }
            img.set(x, y, c.map(|v| v.clamp(0.02, 0.98)));
        }
    }
    img
}

/// Front-lit environment: ambient plus a soft key light from the upper front.
pub fn studio_lighting(rng: &mut ChaCha8Rng) -> SHLighting {
    let mut l = SHLighting::ambient(rng.gen_range(0.8..1.0));
    let key = Rgb::repeat(rng.gen_range(0.15..0.3));
    l.coeffs[1] = key * 0.4;
    l.coeffs[2] = key;
    l.coeffs[3] = key * rng.gen_range(-0.4..0.4);
    l
}

/// Renders `config.n_views` views of a random subject drawn with `seed`.
pub fn synthesize(assets: &FlameAssets, seed: u64, config: &SyntheticConfig) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ground_truth_params(assets, &mut rng, config);
    let albedo = procedural_albedo(config.albedo_size, &mut rng);
    let lighting = studio_lighting(&mut rng);
    let mesh = decode(assets, &params)?;
    let uv = UvRaster::new(assets, config.albedo_size);
    let landmarks3d = embed_landmarks(&mesh.vertices, &assets.faces, &assets.landmark_embedding);

    let mut cameras = Vec::with_capacity(config.n_views);
    let mut views = Vec::with_capacity(config.n_views);
    for v in 0..config.n_views {
        let t = if config.n_views == 1 { 0.5 } else { v as f64 / (config.n_views - 1) as f64 };
        let yaw = config.max_yaw * (2.0 * t - 1.0) + rng.gen_range(-1.0..=1.0) * config.jitter;
        let pitch = rng.gen_range(-1.0..=1.0) * config.jitter;
        let camera = Camera::orbit(yaw, pitch, config.distance, Vector3::zeros(), config.resolution, config.resolution);
        let scene = ShadingScene {
            assets,
            vertices: &mesh.vertices,
            camera: &camera,
            uv: &uv,
            albedo: &albedo,
            lighting: &lighting,
        };
        let image = scene.render()?.color;
        let landmarks = landmarks3d
            .iter()
            .map(|x| {
                let p = camera.project_point(x).pixel;
                if config.landmark_noise > 0.0 {
                    let nx: f64 = StandardNormal.sample(&mut rng);
                    let ny: f64 = StandardNormal.sample(&mut rng);
                    p + Vector2::new(nx, ny) * config.landmark_noise
                } else {
                    p
                }
            })
            .collect();
        views.push(View {
            image,
            landmarks,
            camera: None,
        });
        cameras.push(camera);
    }
    Ok(SyntheticScene {
        params,
        cameras,
        lighting,
        albedo,
        views,
    })
}

/// Root-mean-square distance between corresponding vertices.
pub fn vertex_rmse(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let sse: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
    (sse / a.len().max(1) as f64).sqrt()
}

/// Diagonal of the axis-aligned bounding box.
pub fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    let lo = points.iter().fold(Vector3::repeat(f64::INFINITY), |m, p| m.inf(p));
    let hi = points.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
    (hi - lo).norm()
}
