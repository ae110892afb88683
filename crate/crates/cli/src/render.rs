use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mvflame_core::fitter::BASE_ALBEDO;
use mvflame_core::render::{render_texture, ShadingScene, UvRaster};
use mvflame_core::{decode, load_assets, rasterize, Camera, FlameAssets, Image, Rgb, SHLighting};
use nalgebra::Vector3;

use crate::io::{read_camera, read_json, read_params};

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long, env = "MVFLAME_ASSETS")]
    pub assets: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    /// UV texture to paint the mesh with; without it the mesh is shaded.
    #[arg(long)]
    pub texture: Option<PathBuf>,
    /// SH lighting for the shaded mode.
    #[arg(long)]
    pub lighting: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub uv_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Unlit texture lookup at every covered pixel.
pub fn render_textured(assets: &FlameAssets, vertices: &[Vector3<f64>], camera: &Camera, texture: &Image) -> Result<Image> {
    let fb = rasterize(vertices, &assets.faces, camera, camera.width, camera.height)?;
    Ok(render_texture(assets, &fb, texture)?)
}

/// Ambient plus a soft light from the camera side of the face.
fn default_lighting() -> SHLighting {
    let mut l = SHLighting::ambient(0.8);
    l.coeffs[2] = Rgb::repeat(0.3);
    l
}

pub fn run(args: &RenderArgs) -> Result<()> {
    let assets = load_assets(&args.assets).with_context(|| format!("cannot load assets from {}", args.assets.display()))?;
    let params = read_params(&args.params)?;
    let camera = read_camera(&args.camera)?;
    let mesh = decode(&assets, &params)?;
    let image = match &args.texture {
        Some(t) => render_textured(&assets, &mesh.vertices, &camera, &Image::load_png(t)?)?,
        None => {
            let lighting = match &args.lighting {
                Some(p) => read_json(p)?,
                None => default_lighting(),
            };
            let albedo = Image::filled(args.uv_size, args.uv_size, Rgb::repeat(BASE_ALBEDO));
            let uv = UvRaster::new(&assets, args.uv_size);
            let scene = ShadingScene {
                assets: &assets,
                vertices: &mesh.vertices,
                camera: &camera,
                uv: &uv,
                albedo: &albedo,
                lighting: &lighting,
            };
            scene.render()?.color
        }
    };
    image.save_png(&args.out)?;
    Ok(())
}
