//! `mvflame`: fit, render, evaluate and generate test assets from the command line.

mod fit;
mod io;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mvflame_core::mesh_io::{read_obj, write_obj};
use mvflame_core::metrics::evaluate;
use mvflame_core::synthetic::{synthesize, SyntheticConfig};
use mvflame_core::{decode, load_assets, make_mini_model, save_assets, AlignedMeshPair, MetricsConfig, Similarity};

use crate::io::{read_json, write_json, write_landmarks, CorrespondenceFile};

#[derive(Parser, Debug)]
#[command(name = "mvflame", version, about = "Multi-view parametric face reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the head model to posed views with landmarks.
    Fit(fit::FitArgs),
    /// Re-render fitted parameters through a camera.
    Render(render::RenderArgs),
    /// Compare a predicted mesh against ground truth.
    Eval(EvalArgs),
    /// Write a small procedural model in the asset format.
    MakeMini(MakeMiniArgs),
    /// Render a random synthetic subject into fit-ready views.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct EvalArgs {
    pred: PathBuf,
    gt: PathBuf,
    /// Vertex pairs for similarity alignment; without it the meshes are taken as aligned.
    correspondences: Option<PathBuf>,
    #[arg(long, default_value_t = MetricsConfig::default().samples)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = MetricsConfig::default().unit_to_mm)]
    unit_to_mm: f64,
    #[arg(long, default_value_t = MetricsConfig::default().completeness_threshold_mm)]
    threshold_mm: f64,
}

#[derive(Args, Debug)]
struct MakeMiniArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, env = "MVFLAME_ASSETS")]
    assets: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Gaussian landmark noise, pixels.
    #[arg(long, default_value_t = 0.0)]
    landmark_noise: f64,
    #[arg(long)]
    out: PathBuf,
}

fn eval(args: &EvalArgs) -> Result<()> {
    let pred = read_obj(&args.pred)?;
    let gt = read_obj(&args.gt)?;
    let pair = match &args.correspondences {
        Some(p) => {
            let c: CorrespondenceFile = read_json(p)?;
            AlignedMeshPair::aligned(pred, gt, &c.pairs)?
        }
        None => AlignedMeshPair::new(pred, gt, Similarity::identity())?,
    };
    let config = MetricsConfig {
        samples: args.samples,
        seed: args.seed,
        unit_to_mm: args.unit_to_mm,
        completeness_threshold_mm: args.threshold_mm,
    };
    println!("{}", serde_json::to_string(&evaluate(&pair, &config)?)?);
    Ok(())
}

fn make_mini(args: &MakeMiniArgs) -> Result<()> {
    save_assets(&make_mini_model(args.seed), &args.out).with_context(|| format!("cannot write assets to {}", args.out.display()))?;
    // reload so a written directory is known to be loadable
    load_assets(&args.out)?;
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let assets = load_assets(&args.assets).with_context(|| format!("cannot load assets from {}", args.assets.display()))?;
    let config = SyntheticConfig {
        n_views: args.views,
        resolution: args.resolution,
        landmark_noise: args.landmark_noise,
        ..SyntheticConfig::default()
    };
    let scene = synthesize(&assets, args.seed, &config)?;
    let out = &args.out;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    for (v, (view, camera)) in scene.views.iter().zip(&scene.cameras).enumerate() {
        view.image.save_png(out.join(format!("view_{v}.png")))?;
        write_landmarks(&out.join(format!("landmarks_{v}.json")), &view.landmarks)?;
        write_json(&out.join(format!("camera_{v}.json")), camera)?;
    }
    write_json(&out.join("gt_params.json"), &scene.params)?;
    write_json(&out.join("gt_lighting.json"), &scene.lighting)?;
    scene.albedo.save_png(out.join("gt_albedo.png"))?;
    write_obj(out.join("gt.obj"), &assets, &decode(&assets, &scene.params)?.vertices, None)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => fit::run(a),
        Command::Render(a) => render::run(a),
        Command::Eval(a) => eval(a),
        Command::MakeMini(a) => make_mini(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
