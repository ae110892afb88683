//! Multi-view reconstruction of a FLAME-style parametric head from a handful
//! of face images with 68-point landmarks.

pub mod assets;
pub mod camera;
pub mod covis;
pub mod decoder;
pub mod error;
pub mod fitter;
pub mod flow;
pub mod image;
pub mod losses;
pub mod mesh_io;
pub mod metrics;
pub mod mini;
pub mod render;
pub mod rotation;
pub mod synthetic;
pub mod texture;

pub use assets::{load_assets, save_assets, FlameAssets, UvMask};
pub use camera::{estimate_initial_camera, project, Camera};
pub use covis::{BinaryMask, MaskSource};
pub use decoder::{decode, FlameParams, PosedMesh};
pub use error::{Error, Result};
pub use fitter::{fit, fit_with_flow, init_fit, FitConfig, FitResult, FitState, FlowSource, LossTerm, ParamGroup, StageConfig, View};
pub use flow::{FlowEstimator, FlowField, LucasKanade};
pub use image::{Image, Rgb};
pub use losses::{LossReport, LossTerms, LossWeights};
pub use mesh_io::{read_obj, write_obj};
pub use metrics::{align_similarity, AlignedMeshPair, MetricReport, MetricsConfig, Similarity, TriMesh};
pub use mini::make_mini_model;
pub use render::{rasterize, FrameBuffer, SHLighting};
pub use texture::UVTexture;
