//! Hard z-buffer rendering of the posed mesh with SH shading in UV space,
//! and the reverse pass at frozen pixel coverage.

pub mod raster;
pub mod sh;
pub mod uv;

use nalgebra::{Vector2, Vector3};

use crate::assets::FlameAssets;
use crate::camera::Camera;
use crate::decoder::{vertex_normals, vertex_normals_backward};
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};

pub use raster::{is_front_facing, point_visible, rasterize, screen_triangle, FrameBuffer, ScreenTriangle};
pub use sh::{sh_basis, sh_basis_jacobian, sh_basis_unit, shade, SHLighting};
pub use uv::{normal_map, normal_map_backward, UvRaster};

/// Interpolated UV coordinate of a covered pixel.
pub fn pixel_uv(assets: &FlameAssets, triangle: usize, bary: &[f64; 3]) -> Vector2<f64> {
    let f = assets.uv_faces[triangle];
    (0..3).fold(Vector2::zeros(), |acc, k| {
        let c = assets.uv_coords[f[k]];
        acc + Vector2::new(c[0], c[1]) * bary[k]
    })
}

/// Samples a UV map (bilinear) at every covered pixel; background stays 0.
pub fn render_texture(assets: &FlameAssets, fb: &FrameBuffer, texture: &Image) -> Result<Image> {
    if texture.width == 0 || texture.height == 0 {
        return Err(Error::Empty("texture".into()));
    }
    let mut out = Image::new(fb.width, fb.height);
    for i in 0..fb.width * fb.height {
        if let Some(t) = fb.covered(i) {
            let uv = pixel_uv(assets, t, &fb.barycentric[i]);
            out.data[i] = texture.sample(uv.x * texture.width as f64, uv.y * texture.height as f64);
        }
    }
    Ok(out)
}

/// Everything the shaded render `R(M, B, c)` depends on.
pub struct ShadingScene<'a> {
    pub assets: &'a FlameAssets,
    pub vertices: &'a [Vector3<f64>],
    pub camera: &'a Camera,
    pub uv: &'a UvRaster,
    pub albedo: &'a Image,
    pub lighting: &'a SHLighting,
}

impl ShadingScene<'_> {
    pub fn normal_map(&self) -> Image {
        normal_map(self.uv, &self.assets.faces, &vertex_normals(self.vertices, &self.assets.faces))
    }

    pub fn shaded_texture(&self) -> Result<Image> {
        shade(self.albedo, self.lighting, &self.normal_map())
    }

    pub fn rasterize(&self) -> Result<FrameBuffer> {
        rasterize(self.vertices, &self.assets.faces, self.camera, self.camera.width, self.camera.height)
    }

    /// Rasterizes and fills `color` with the shaded texture.
    pub fn render(&self) -> Result<FrameBuffer> {
        let mut fb = self.rasterize()?;
        fb.color = render_texture(self.assets, &fb, &self.shaded_texture()?)?;
        Ok(fb)
    }
}

/// Gradients of an image loss with respect to the shaded render's inputs.
#[derive(Clone, Debug)]
pub struct RenderGrad {
    pub vertices: Vec<Vector3<f64>>,
    pub lighting: SHLighting,
    pub albedo: Image,
}

/// Reverse pass of the perspective-correct barycentric map. Given
/// `dL/dλ`, returns `dL/d(pixel_i)` and `dL/d(depth_i)` for the three corners.
pub fn barycentric_backward(tri: &ScreenTriangle, p: &Vector2<f64>, grad_lambda: &[f64; 3]) -> ([Vector2<f64>; 3], [f64; 3]) {
    let [p0, p1, p2] = tri.pixels;
    let z = tri.depths;
    let area = raster::edge(&p0, &p1, &p2);
    let e = [raster::edge(&p1, &p2, p), raster::edge(&p2, &p0, p), raster::edge(&p0, &p1, p)];
    let b = [e[0] / area, e[1] / area, e[2] / area];
    let w = [b[0] / z[0], b[1] / z[1], b[2] / z[2]];
    let s = w[0] + w[1] + w[2];
    let lambda = [w[0] / s, w[1] / s, w[2] / s];
    let dot: f64 = (0..3).map(|k| grad_lambda[k] * lambda[k]).sum();

    let mut g_b = [0.0; 3];
    let mut g_z = [0.0; 3];
    for k in 0..3 {
        let g_w = (grad_lambda[k] - dot) / s;
        g_b[k] = g_w / z[k];
        g_z[k] = -g_w * b[k] / (z[k] * z[k]);
    }
    let g_area = -(0..3).map(|k| g_b[k] * e[k]).sum::<f64>() / (area * area);
    let g_e = [g_b[0] / area, g_b[1] / area, g_b[2] / area];

    // dE(a,b,p)/da = (b.y − p.y, p.x − b.x); dE(a,b,p)/db = (p.y − a.y, a.x − p.x)
    let mut g_p = [Vector2::zeros(); 3];
    let add_edge = |ia: usize, ib: usize, pt: &Vector2<f64>, g: f64, g_p: &mut [Vector2<f64>; 3]| {
        let (a, bb) = (tri.pixels[ia], tri.pixels[ib]);
        g_p[ia] += Vector2::new(bb.y - pt.y, pt.x - bb.x) * g;
        g_p[ib] += Vector2::new(pt.y - a.y, a.x - pt.x) * g;
    };
    add_edge(1, 2, p, g_e[0], &mut g_p);
    add_edge(2, 0, p, g_e[1], &mut g_p);
    add_edge(0, 1, p, g_e[2], &mut g_p);
    // area = E(p0, p1, p2): the third argument also moves
    add_edge(0, 1, &p2, g_area, &mut g_p);
    g_p[2] += Vector2::new(-(p1.y - p0.y), p1.x - p0.x) * g_area;
    (g_p, g_z)
}

/// Scatters `dL/d(pixel)` and `dL/d(depth)` of a world point onto the point.
pub fn projection_backward(camera: &Camera, x: &Vector3<f64>, g_pixel: &Vector2<f64>, g_depth: f64) -> Vector3<f64> {
    camera.pixel_jacobian(x).transpose() * g_pixel + camera.rotation.row(2).transpose() * g_depth
}

/// Reverse pass of [`ShadingScene::render`] for `dL/dI_r = grad_image`, holding
/// the framebuffer's pixel coverage and triangle ids fixed.
pub fn render_gradient(scene: &ShadingScene, fb: &FrameBuffer, grad_image: &[Rgb]) -> Result<RenderGrad> {
    if grad_image.len() != fb.width * fb.height {
        return Err(Error::ResolutionMismatch(format!(
            "image gradient has {} pixels, framebuffer {}",
            grad_image.len(),
            fb.width * fb.height
        )));
    }
    let assets = scene.assets;
    let faces = &assets.faces;
    let size = scene.uv.size;
    if !(scene.albedo.width == size && scene.albedo.height == size) {
        return Err(Error::ResolutionMismatch("albedo vs UV raster".into()));
    }
    let vnormals = vertex_normals(scene.vertices, faces);
    let nmap = normal_map(scene.uv, faces, &vnormals);
    let shaded = shade(scene.albedo, scene.lighting, &nmap)?;
    let scale = size as f64;

    let mut g_vertices = vec![Vector3::zeros(); scene.vertices.len()];
    let mut g_shaded = vec![Rgb::zeros(); size * size];
    for (i, g_pix) in grad_image.iter().enumerate() {
        let Some(t) = fb.covered(i) else { continue };
        if *g_pix == Rgb::zeros() {
            continue;
        }
        let uv = pixel_uv(assets, t, &fb.barycentric[i]);
        let (sx, sy) = (uv.x * scale, uv.y * scale);
        for (tap, w) in shaded.bilinear_taps(sx, sy) {
            g_shaded[tap] += g_pix * w;
        }
        let s = shaded.sample_with_gradient(sx, sy);
        let g_uv = Vector2::new(g_pix.dot(&s.d_dx) * scale, g_pix.dot(&s.d_dy) * scale);
        let uf = assets.uv_faces[t];
        let g_lambda = [0, 1, 2].map(|k| {
            let c = assets.uv_coords[uf[k]];
            g_uv.x * c[0] + g_uv.y * c[1]
        });
        let f = faces[t];
        let Some(tri) = screen_triangle(scene.camera, scene.vertices, &f) else { continue };
        let p = Vector2::new((i % fb.width) as f64 + 0.5, (i / fb.width) as f64 + 0.5);
        let (g_p, g_z) = barycentric_backward(&tri, &p, &g_lambda);
        for k in 0..3 {
            g_vertices[f[k]] += projection_backward(scene.camera, &scene.vertices[f[k]], &g_p[k], g_z[k]);
        }
    }

    let mut g_albedo = Image::new(size, size);
    let mut g_light = SHLighting::zeros();
    let mut g_nmap = vec![Vector3::zeros(); size * size];
    for t in 0..size * size {
        let gb = g_shaded[t];
        if gb == Rgb::zeros() {
            continue;
        }
        let n = nmap.data[t];
        let basis = sh_basis_unit(&n);
        let a = scene.albedo.data[t];
        g_albedo.data[t] = gb.component_mul(&scene.lighting.irradiance(&basis));
        let ga = gb.component_mul(&a);
        let jac = sh_basis_jacobian(&n);
        let mut gn = Vector3::zeros();
        for k in 0..9 {
            g_light.coeffs[k] += ga * basis[k];
            gn += jac[k] * ga.dot(&scene.lighting.coeffs[k]);
        }
        g_nmap[t] = gn;
    }
    let mut g_vnormals = vec![Vector3::zeros(); scene.vertices.len()];
    normal_map_backward(scene.uv, faces, &vnormals, &g_nmap, &mut g_vnormals);
    for (g, gn) in g_vertices.iter_mut().zip(vertex_normals_backward(scene.vertices, faces, &g_vnormals)) {
        *g += gn;
    }
    Ok(RenderGrad {
        vertices: g_vertices,
        lighting: g_light,
        albedo: g_albedo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mini::make_mini_model;
    use nalgebra::Matrix3;

    fn textured_albedo(size: usize) -> Image {
        let mut a = Image::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                a.set(x, y, Rgb::new(0.5 + 0.3 * (9.0 * u).sin(), 0.5 + 0.3 * (7.0 * v).cos(), 0.4 + 0.2 * (5.0 * (u + v)).sin()));
            }
        }
        a
    }

    fn lighting() -> SHLighting {
        let mut l = SHLighting::ambient(0.8);
        l.coeffs[2] = Rgb::new(0.3, 0.25, 0.2);
        l.coeffs[3] = Rgb::new(-0.2, 0.1, 0.15);
        l.coeffs[4] = Rgb::new(0.05, -0.1, 0.08);
        l.coeffs[6] = Rgb::new(0.1, 0.05, -0.07);
        l
    }

    #[test]
    fn uniform_white_texture_renders_white_on_black() {
        let a = make_mini_model(0);
        let cam = Camera::orbit(0.0, 0.0, 0.3, Vector3::zeros(), 32, 32);
        let fb = rasterize(&a.template, &a.faces, &cam, 32, 32).unwrap();
        let img = render_texture(&a, &fb, &Image::filled(8, 8, Rgb::repeat(1.0))).unwrap();
        for i in 0..32 * 32 {
            let expected = if fb.face_mask[i] { Rgb::repeat(1.0) } else { Rgb::zeros() };
            assert_eq!(img.data[i], expected);
        }
        assert_eq!(img, render_texture(&a, &fb, &Image::filled(8, 8, Rgb::repeat(1.0))).unwrap());
        assert!(render_texture(&a, &fb, &Image::new(0, 0)).is_err());
    }

    #[test]
    fn single_triangle_scene_matches_per_pixel_sampling() {
        let mut a = make_mini_model(0);
        a.template = vec![Vector3::new(-0.3, -0.3, 0.0), Vector3::new(0.3, -0.3, 0.0), Vector3::new(0.0, 0.3, 0.1)];
        a.faces = vec![[0, 1, 2]];
        a.uv_coords = vec![[0.1, 0.9], [0.9, 0.9], [0.5, 0.1]];
        a.uv_faces = vec![[0, 1, 2]];
        let cam = Camera::looking_from(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)), Vector3::new(0.0, 0.0, 1.0), 16, 16);
        let fb = rasterize(&a.template, &a.faces, &cam, 16, 16).unwrap();
        let tex = textured_albedo(16);
        let img = render_texture(&a, &fb, &tex).unwrap();
        let mut covered = 0;
        for y in 0..16 {
            for x in 0..16 {
                // independent oracle: intersect the pixel ray with the triangle's plane
                let d_cam = Vector3::new((x as f64 + 0.5 - cam.cx) / cam.fx, (y as f64 + 0.5 - cam.cy) / cam.fy, 1.0);
                let d = cam.rotation.transpose() * d_cam;
                let o = cam.center();
                let (v0, v1, v2) = (a.template[0], a.template[1], a.template[2]);
                let n = (v1 - v0).cross(&(v2 - v0));
                let s = n.dot(&(v0 - o)) / n.dot(&d);
                let hit = o + d * s;
                let area = n.norm();
                let b = [
                    (v1 - hit).cross(&(v2 - hit)).dot(&n) / (area * area),
                    (v2 - hit).cross(&(v0 - hit)).dot(&n) / (area * area),
                    (v0 - hit).cross(&(v1 - hit)).dot(&n) / (area * area),
                ];
                let i = y * 16 + x;
                if b.iter().all(|&w| w >= 1e-9) {
                    covered += 1;
                    assert!(fb.face_mask[i]);
                    let u = b[0] * 0.1 + b[1] * 0.9 + b[2] * 0.5;
                    let v = b[0] * 0.9 + b[1] * 0.9 + b[2] * 0.1;
                    let expected = tex.sample(u * 16.0, v * 16.0);
                    assert!((img.data[i] - expected).norm() < 1e-9);
                } else if b.iter().any(|&w| w < -1e-9) {
                    assert_eq!(img.data[i], Rgb::zeros());
                }
            }
        }
        assert!(covered > 30);
    }

    fn scene_parts(seed: u64) -> (FlameAssets, Camera, UvRaster, Image, SHLighting) {
        let a = make_mini_model(seed);
        let cam = Camera::orbit(0.25, 0.1, 0.3, Vector3::zeros(), 32, 32);
        let uv = UvRaster::new(&a, 32);
        (a, cam, uv, textured_albedo(32), lighting())
    }

    fn mean_intensity(img: &Image) -> f64 {
        img.data.iter().map(|c| c.sum()).sum::<f64>() / (3 * img.data.len()) as f64
    }

    #[test]
    fn dc_lighting_gradient_of_mean_intensity_is_mean_albedo_times_h1() {
        let (a, cam, uv, albedo, light) = scene_parts(0);
        let scene = ShadingScene { assets: &a, vertices: &a.template, camera: &cam, uv: &uv, albedo: &albedo, lighting: &light };
        let fb = scene.render().unwrap();
        let n = (fb.width * fb.height) as f64;
        let grad_image = vec![Rgb::repeat(1.0 / (3.0 * n)); fb.width * fb.height];
        let g = render_gradient(&scene, &fb, &grad_image).unwrap();
        // closed form: dI/dl_0[c] = A_c(sample)·H₁ at every covered pixel
        let rendered_albedo = render_texture(&a, &fb, &albedo).unwrap();
        for c in 0..3 {
            let closed: f64 = rendered_albedo.data.iter().map(|p| p[c]).sum::<f64>() * sh::SH_C0 / (3.0 * n);
            assert!((g.lighting.coeffs[0][c] - closed).abs() < 1e-12 * (1.0 + closed.abs()));
            // and against finite differences
            let h = 1e-6;
            let mut lp = light.clone();
            let mut lm = light.clone();
            lp.coeffs[0][c] += h;
            lm.coeffs[0][c] -= h;
            let render_with = |l: &SHLighting| {
                let s = ShadingScene { assets: &a, vertices: &a.template, camera: &cam, uv: &uv, albedo: &albedo, lighting: l };
                mean_intensity(&s.render().unwrap().color)
            };
            let fd = (render_with(&lp) - render_with(&lm)) / (2.0 * h);
            assert!((fd - closed).abs() < 1e-8);
        }
    }

    #[test]
    fn barycentric_backward_matches_finite_differences() {
        let tri = ScreenTriangle {
            pixels: [Vector2::new(3.0, 4.0), Vector2::new(20.0, 6.5), Vector2::new(9.0, 18.0)],
            depths: [0.3, 0.45, 0.38],
        };
        let p = Vector2::new(10.5, 9.5);
        let g_lambda = [0.7, -1.3, 0.4];
        let f = |t: &ScreenTriangle| -> f64 {
            let (l, _) = t.interpolate(&p).unwrap();
            (0..3).map(|k| l[k] * g_lambda[k]).sum()
        };
        let (g_p, g_z) = barycentric_backward(&tri, &p, &g_lambda);
        let h = 1e-6;
        for k in 0..3 {
            for ax in 0..2 {
                let (mut a, mut b) = (tri, tri);
                a.pixels[k][ax] += h;
                b.pixels[k][ax] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - g_p[k][ax]).abs() < 1e-8, "p{k}{ax}: {fd} vs {}", g_p[k][ax]);
            }
            let (mut a, mut b) = (tri, tri);
            a.depths[k] += h;
            b.depths[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - g_z[k]).abs() < 1e-7, "z{k}: {fd} vs {}", g_z[k]);
        }
    }

    #[test]
    fn zero_image_gradient_gives_zero_gradients() {
        let (a, cam, uv, albedo, light) = scene_parts(1);
        let scene = ShadingScene { assets: &a, vertices: &a.template, camera: &cam, uv: &uv, albedo: &albedo, lighting: &light };
        let fb = scene.render().unwrap();
        let g = render_gradient(&scene, &fb, &vec![Rgb::zeros(); 32 * 32]).unwrap();
        assert!(g.vertices.iter().all(|v| *v == Vector3::zeros()));
        assert!(g.albedo.data.iter().all(|v| *v == Rgb::zeros()));
        assert_eq!(g.lighting, SHLighting::zeros());
    }

    #[test]
    fn vertex_gradient_matches_central_differences_at_fixed_coverage() {
        let (a, cam, uv, albedo, light) = scene_parts(2);
        let weights: Vec<Rgb> = (0..32 * 32).map(|i| Rgb::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 0.3)).collect();
        let loss = |verts: &[Vector3<f64>]| -> (f64, Vec<i64>) {
            let s = ShadingScene { assets: &a, vertices: verts, camera: &cam, uv: &uv, albedo: &albedo, lighting: &light };
            let fb = s.render().unwrap();
            (fb.color.data.iter().zip(&weights).map(|(c, w)| c.dot(w)).sum(), fb.triangle_id)
        };
        let scene = ShadingScene { assets: &a, vertices: &a.template, camera: &cam, uv: &uv, albedo: &albedo, lighting: &light };
        let fb = scene.render().unwrap();
        let g = render_gradient(&scene, &fb, &weights).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for v in (0..a.n_vertices()).step_by(5) {
            for ax in 0..3 {
                let mut p = a.template.clone();
                let mut m = a.template.clone();
                p[v][ax] += h;
                m[v][ax] -= h;
                let (lp, idp) = loss(&p);
                let (lm, idm) = loss(&m);
                if idp != fb.triangle_id || idm != fb.triangle_id {
                    continue;
                }
                let fd = (lp - lm) / (2.0 * h);
                let an = g.vertices[v][ax];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-4, "v{v} ax{ax}: fd {fd} analytic {an}");
                checked += 1;
            }
        }
        assert!(checked > 60, "{checked}");
    }

    #[test]
    fn albedo_and_lighting_gradients_match_finite_differences() {
        let (a, cam, uv, albedo, light) = scene_parts(4);
        let weights: Vec<Rgb> = (0..32 * 32).map(|i| Rgb::new((i as f64 * 0.21).cos(), 0.4, (i as f64 * 0.05).sin())).collect();
        let scene = ShadingScene { assets: &a, vertices: &a.template, camera: &cam, uv: &uv, albedo: &albedo, lighting: &light };
        let fb = scene.render().unwrap();
        let g = render_gradient(&scene, &fb, &weights).unwrap();
        let eval = |alb: &Image, l: &SHLighting| -> f64 {
            let s = ShadingScene { assets: &a, vertices: &a.template, camera: &cam, uv: &uv, albedo: alb, lighting: l };
            s.render().unwrap().color.data.iter().zip(&weights).map(|(c, w)| c.dot(w)).sum()
        };
        let h = 1e-6;
        for t in (0..32 * 32).step_by(37) {
            for c in 0..3 {
                let mut ap = albedo.clone();
                let mut am = albedo.clone();
                ap.data[t][c] += h;
                am.data[t][c] -= h;
                let fd = (eval(&ap, &light) - eval(&am, &light)) / (2.0 * h);
                assert!((fd - g.albedo.data[t][c]).abs() < 1e-7 * (1.0 + fd.abs()));
            }
        }
        for k in 0..9 {
            for c in 0..3 {
                let mut lp = light.clone();
                let mut lm = light.clone();
                lp.coeffs[k][c] += h;
                lm.coeffs[k][c] -= h;
                let fd = (eval(&albedo, &lp) - eval(&albedo, &lm)) / (2.0 * h);
                assert!((fd - g.lighting.coeffs[k][c]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
