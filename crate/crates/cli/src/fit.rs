use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mvflame_core::covis::face_mask;
use mvflame_core::fitter::{FitObserver, PairDebug};
use mvflame_core::mesh_io::{write_mtl, write_obj};
use mvflame_core::{decode, fit_with_flow, load_assets, rasterize, FitConfig, FlowSource, Image};

use crate::io::{write_json, ViewSpec};
use crate::render::render_textured;

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long, env = "MVFLAME_ASSETS")]
    pub assets: PathBuf,
    /// `image.png:landmarks.json[:camera.json]`; repeat once per view.
    #[arg(long = "view", required = true)]
    pub views: Vec<ViewSpec>,
    /// Base configuration (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda_multiop: Option<f64>,
    #[arg(long)]
    pub lambda_lmk: Option<f64>,
    #[arg(long)]
    pub lambda_eye: Option<f64>,
    #[arg(long)]
    pub lambda_lip: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub iters_a: Option<usize>,
    #[arg(long)]
    pub iters_b: Option<usize>,
    #[arg(long)]
    pub iters_c: Option<usize>,
    /// Longest image side used while fitting.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write masks, cross-renders and flow color maps under `debug/`.
    #[arg(long)]
    pub debug: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl FitArgs {
    pub fn config(&self) -> Result<FitConfig> {
        let mut cfg = match &self.config {
            Some(p) => crate::io::read_json(p)?,
            None => FitConfig::default(),
        };
        let w = &mut cfg.weights;
        for (flag, slot) in [
            (self.lambda_multiop, &mut w.multiop),
            (self.lambda_lmk, &mut w.lmk),
            (self.lambda_eye, &mut w.eye),
            (self.lambda_lip, &mut w.lip),
            (self.lambda_reg, &mut w.reg),
        ] {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        for (i, iters) in [self.iters_a, self.iters_b, self.iters_c].into_iter().enumerate() {
            if let Some(n) = iters {
                let Some(stage) = cfg.stages.get_mut(i) else {
                    bail!("configuration has no stage {i} to set iterations on");
                };
                stage.iterations = n;
            }
        }
        if self.resolution.is_some() {
            cfg.resolution = self.resolution;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.check()?;
        Ok(cfg)
    }
}

/// Keeps the latest debug products of every view pair.
struct DebugDump {
    dir: PathBuf,
    error: Option<anyhow::Error>,
}

impl DebugDump {
    fn write(&self, pairs: &[PairDebug]) -> Result<()> {
        for p in pairs {
            let tag = format!("{}_{}", p.source, p.target);
            p.mb.save_png(self.dir.join(format!("mb_{tag}.png")))?;
            p.mc.save_png(self.dir.join(format!("mc_{tag}.png")))?;
            p.flow.save_color_png(self.dir.join(format!("flow_{tag}.png")))?;
            p.cross_render.save_png(self.dir.join(format!("cross_{tag}.png")))?;
        }
        Ok(())
    }
}

impl FitObserver for DebugDump {
    fn wants_debug(&self) -> bool {
        true
    }

    fn flow_refreshed(&mut self, _stage: &str, _iteration: usize, pairs: &[PairDebug]) {
        if self.error.is_none() {
            self.error = self.write(pairs).err();
        }
    }
}

struct Quiet;
impl FitObserver for Quiet {}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub fn run(args: &FitArgs) -> Result<()> {
    let config = args.config()?;
    let assets = load_assets(&args.assets).with_context(|| format!("cannot load assets from {}", args.assets.display()))?;
    let views = args.views.iter().enumerate().map(|(i, v)| v.load(i)).collect::<Result<Vec<_>>>()?;
    create_dir(&args.out)?;
    let mut debug = DebugDump {
        dir: args.out.join("debug"),
        error: None,
    };
    if args.debug {
        create_dir(&debug.dir)?;
    }
    let observer: &mut dyn FitObserver = if args.debug { &mut debug } else { &mut Quiet };
    let result = fit_with_flow(&views, &assets, &config, &FlowSource::Estimator(config.flow.estimator()), observer)?;
    if let Some(e) = debug.error.take() {
        return Err(e.context("writing debug output"));
    }
    log::info!("fit finished in {:.2} s with {} flow calls", result.wall_time, result.flow_calls);

    let out = &args.out;
    let mesh = decode(&assets, &result.params)?;
    write_obj(out.join("result.obj"), &assets, &mesh.vertices, Some("result"))?;
    write_mtl(out.join("result.mtl"), "result", "texture.png")?;
    result.texture.save_png(out, "texture")?;
    result.albedo().save_png(out.join("albedo.png"))?;
    write_json(&out.join("params.json"), &result.params)?;
    std::fs::write(out.join("trace.jsonl"), result.trace_jsonl()?).context("cannot write trace.jsonl")?;
    // renders come from the written texture so `render` reproduces them exactly
    let texture = Image::load_png(out.join("texture.png"))?;
    for (v, camera) in result.cameras.iter().enumerate() {
        write_json(&out.join(format!("camera_{v}.json")), camera)?;
        write_json(&out.join(format!("lighting_{v}.json")), &result.lighting[v])?;
        render_textured(&assets, &mesh.vertices, camera, &texture)?.save_png(out.join(format!("render_{v}.png")))?;
        if args.debug {
            let fb = rasterize(&mesh.vertices, &assets.faces, camera, camera.width, camera.height)?;
            face_mask(&fb).save_png(debug.dir.join(format!("mf_{v}.png")))?;
        }
    }
    Ok(())
}
