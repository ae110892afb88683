//! Staged analysis-by-synthesis fitting of the head model to several views.
//!
//! The default schedule has three stages:
//! - **A** moves only cameras and the root rotation, on the landmark term,
//!   so coverage is roughly right before any term depends on it.
//! - **B** adds identity, expression, jaw, lighting and albedo, with the
//!   eye, lip and regularization terms.
//! - **C** releases everything and adds the multi-view flow term, whose
//!   targets are re-estimated every `flow_refresh` iterations and held fixed
//!   in between.
//!
//! Each camera is parameterized as `R = exp(ω)·R₀`, `t`, with `ω = 0` at the
//! start of a fit, so the initial camera is reproduced bit-for-bit. Focal
//! lengths and principal points stay fixed.

use std::time::Instant;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assets::{FlameAssets, UvMask, NUM_LANDMARKS};
use crate::camera::{estimate_initial_camera, Camera};
use crate::covis::{covisible_landmarks, covisible_mask, face_mask, landmark_bbox_mask, mouth_exclusion, BinaryMask, DEFAULT_BOX_MARGIN};
use crate::decoder::{decode, decode_backward, decode_with_tape, embed_landmarks, embed_landmarks_backward, surface_point, FlameParams, PosedMesh};
use crate::error::{Error, Result};
use crate::flow::{mean_flow_magnitude, oracle_flow, FlowEstimator, FlowField, LucasKanade};
use crate::image::{Image, Rgb};
use crate::losses::{
    flow_surrogate_grad, flow_targets, landmark_inclusion, landmark_loss_grad, pair_offset_loss_grad, reg_loss_grad, FlowTarget, LossReport, LossTerms, LossWeights,
    PairReport, ViewReport,
};
use crate::render::{rasterize, render_texture, FrameBuffer, SHLighting, UvRaster};
use crate::rotation::{clamp_axis_angle, rodrigues, rodrigues_with_jacobian};
use crate::texture::{apply_face_mask, build_uv_correspondence, extract_texture, fuse_views, inpaint_bilinear, view_weights, UVTexture};

/// Gray level of the initial albedo; the optimized offset is added to it.
pub const BASE_ALBEDO: f64 = 0.5;

/// One input view: linear-light image, 68 observed landmarks in pixels, and
/// optionally a known camera (skips estimation).
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    pub landmarks: Vec<Vector2<f64>>,
    pub camera: Option<Camera>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Cameras,
    GlobalPose,
    JointPose,
    Shape,
    Expression,
    Lighting,
    Albedo,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Cameras,
        ParamGroup::GlobalPose,
        ParamGroup::JointPose,
        ParamGroup::Shape,
        ParamGroup::Expression,
        ParamGroup::Lighting,
        ParamGroup::Albedo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Cameras => "cameras",
            ParamGroup::GlobalPose => "global_pose",
            ParamGroup::JointPose => "joint_pose",
            ParamGroup::Shape => "shape",
            ParamGroup::Expression => "expression",
            ParamGroup::Lighting => "lighting",
            ParamGroup::Albedo => "albedo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Multiop,
    Lmk,
    Eye,
    Lip,
    Reg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub terms: Vec<LossTerm>,
    pub iterations: usize,
    /// Adam step size before group scaling and decay.
    pub step_size: f64,
    pub groups: Vec<ParamGroup>,
}

impl StageConfig {
    /// `weights` with every term outside this stage set to zero.
    pub fn active_weights(&self, weights: &LossWeights) -> LossWeights {
        let on = |t: LossTerm, w: f64| if self.terms.contains(&t) { w } else { 0.0 };
        LossWeights {
            multiop: on(LossTerm::Multiop, weights.multiop),
            lmk: on(LossTerm::Lmk, weights.lmk),
            eye: on(LossTerm::Eye, weights.eye),
            lip: on(LossTerm::Lip, weights.lip),
            reg: on(LossTerm::Reg, weights.reg),
        }
    }
}

/// Multipliers on the stage step size per parameter kind. Adam steps are
/// roughly `step_size × scale` in parameter units, so these set the natural
/// unit of each group (radians, metres, blendshape coefficients).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupScales {
    pub camera_rotation: f64,
    pub camera_translation: f64,
    pub global_pose: f64,
    pub joint_pose: f64,
    pub shape: f64,
    pub expression: f64,
    pub lighting: f64,
    pub albedo: f64,
}

impl Default for GroupScales {
    fn default() -> Self {
        Self {
            camera_rotation: 2.0,
            camera_translation: 1.0,
            global_pose: 2.0,
            joint_pose: 5.0,
            shape: 20.0,
            expression: 20.0,
            lighting: 10.0,
            albedo: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowChoice {
    LucasKanade(LucasKanade),
}

impl Default for FlowChoice {
    fn default() -> Self {
        FlowChoice::LucasKanade(LucasKanade::default())
    }
}

impl FlowChoice {
    pub fn estimator(&self) -> Box<dyn FlowEstimator> {
        match self {
            FlowChoice::LucasKanade(lk) => Box::new(*lk),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub stages: Vec<StageConfig>,
    pub weights: LossWeights,
    /// Longest image side used for fitting; `None` keeps input resolution.
    pub resolution: Option<usize>,
    /// Side of the UV maps (albedo offset, textures).
    pub uv_size: usize,
    pub flow: FlowChoice,
    /// Recorded with the result. The optimizer itself draws no random numbers.
    pub seed: u64,
    /// `true` freezes that joint's rotation (index 0 is the root). Shorter
    /// masks leave the remaining joints free.
    pub frozen_joints: Vec<bool>,
    pub group_scales: GroupScales,
    /// Step size at the last iteration of a stage relative to the first;
    /// the decay in between is geometric.
    pub final_step_fraction: f64,
    /// Iterations between flow re-estimations while the flow term is active.
    pub flow_refresh: usize,
    /// Iterations between texture re-fusions while the flow term is active.
    pub texture_refresh: usize,
    pub box_margin: f64,
    /// Sum instead of average inside each term (landmarks, pairs, pixels).
    pub literal_sums: bool,
    /// Use all 68 landmarks regardless of whether they fall on the face mask.
    pub all_landmarks: bool,
}

fn default_stages() -> Vec<StageConfig> {
    use LossTerm::*;
    use ParamGroup::*;
    vec![
        StageConfig {
            name: "A".into(),
            terms: vec![Lmk],
            iterations: 200,
            step_size: 1e-3,
            groups: vec![Cameras, GlobalPose],
        },
        StageConfig {
            name: "B".into(),
            terms: vec![Lmk, Eye, Lip, Reg],
            iterations: 300,
            step_size: 1e-3,
            groups: vec![Cameras, GlobalPose, JointPose, Shape, Expression, Lighting, Albedo],
        },
        StageConfig {
            name: "C".into(),
            terms: vec![Multiop, Lmk, Eye, Lip, Reg],
            iterations: 200,
            step_size: 1e-3,
            groups: ParamGroup::ALL.to_vec(),
        },
    ]
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            stages: default_stages(),
            weights: LossWeights::default(),
            resolution: None,
            uv_size: 128,
            flow: FlowChoice::default(),
            seed: 0,
            frozen_joints: Vec::new(),
            group_scales: GroupScales::default(),
            final_step_fraction: 0.05,
            flow_refresh: 10,
            texture_refresh: 50,
            box_margin: DEFAULT_BOX_MARGIN,
            literal_sums: false,
            all_landmarks: false,
        }
    }
}

impl FitConfig {
    pub fn check(&self) -> Result<()> {
        self.weights.check()?;
        for s in &self.stages {
            if !(s.step_size.is_finite() && s.step_size > 0.0) {
                return Err(Error::invariant("FitConfig", format!("stage {} step size {} must be > 0", s.name, s.step_size)));
            }
        }
        let g = &self.group_scales;
        for v in [g.camera_rotation, g.camera_translation, g.global_pose, g.joint_pose, g.shape, g.expression, g.lighting, g.albedo] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invariant("FitConfig", format!("group scale {v} must be > 0")));
            }
        }
        if !(self.final_step_fraction > 0.0 && self.final_step_fraction <= 1.0) {
            return Err(Error::invariant("FitConfig", "final_step_fraction must lie in (0, 1]"));
        }
        if self.uv_size == 0 || self.flow_refresh == 0 || self.texture_refresh == 0 || self.resolution == Some(0) {
            return Err(Error::invariant("FitConfig", "uv_size, refresh intervals and resolution must be positive"));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}

/// A camera as optimized: `R = exp(ω)·base.R`, `t = translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraParam {
    pub base: Camera,
    pub omega: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraParam {
    pub fn new(base: Camera) -> Self {
        Self {
            omega: Vector3::zeros(),
            translation: base.translation,
            base,
        }
    }

    pub fn camera(&self) -> Camera {
        let mut c = self.base.clone();
        c.rotation = rodrigues(&self.omega) * self.base.rotation;
        c.translation = self.translation;
        c
    }

    fn linearize(&self) -> CameraChain {
        let (e, de) = rodrigues_with_jacobian(&self.omega);
        let mut camera = self.base.clone();
        camera.rotation = e * self.base.rotation;
        camera.translation = self.translation;
        CameraChain {
            d_rotation: de.map(|d| d * self.base.rotation),
            camera,
        }
    }
}

/// Camera with `∂R/∂ω_j` for back-propagating pixel gradients.
struct CameraChain {
    camera: Camera,
    d_rotation: [Matrix3<f64>; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CameraGrad {
    pub omega: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraChain {
    /// Accumulates the camera gradient of `g_pixel · π(x)` and returns its world-point gradient.
    fn backprop(&self, x: &Vector3<f64>, g_pixel: &Vector2<f64>, grad: &mut CameraGrad) -> Vector3<f64> {
        let xc = self.camera.to_camera(x);
        let g_xc = self.camera.pixel_jacobian_camera_space(&xc).transpose() * g_pixel;
        grad.translation += g_xc;
        for j in 0..3 {
            grad.omega[j] += g_xc.dot(&(self.d_rotation[j] * x));
        }
        self.camera.rotation.transpose() * g_xc
    }
}

/// Everything the optimizer moves.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub params: FlameParams,
    pub cameras: Vec<CameraParam>,
    pub lighting: Vec<SHLighting>,
    /// UV albedo offset from [`BASE_ALBEDO`].
    pub albedo_offset: Image,
}

/// Gradient in the shape of [`FitState`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub beta: Vec<f64>,
    pub theta: Vec<Vector3<f64>>,
    pub psi: Vec<f64>,
    pub cameras: Vec<CameraGrad>,
    pub lighting: Vec<SHLighting>,
    pub albedo_offset: Image,
}

/// Tag of one entry of the flattened parameter vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    pub group: ParamGroup,
    pub joint: Option<usize>,
    pub camera_translation: bool,
}

impl FitState {
    /// Flattening order: per view `ω, t`; then `θ` (root first); `β`; `ψ`;
    /// per view lighting; albedo offset texels.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.cameras {
            out.extend(c.omega.iter());
            out.extend(c.translation.iter());
        }
        for t in &self.params.theta {
            out.extend(t.iter());
        }
        out.extend(&self.params.beta);
        out.extend(&self.params.psi);
        for l in &self.lighting {
            out.extend(l.as_flat());
        }
        for c in &self.albedo_offset.data {
            out.extend(c.iter());
        }
        out
    }

    pub fn set_from_vec(&mut self, x: &[f64]) {
        let mut it = x.iter().copied();
        let v3 = |it: &mut dyn Iterator<Item = f64>| Vector3::new(it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        for c in &mut self.cameras {
            c.omega = v3(&mut it);
            c.translation = v3(&mut it);
        }
        for t in &mut self.params.theta {
            *t = v3(&mut it);
        }
        for b in &mut self.params.beta {
            *b = it.next().unwrap();
        }
        for p in &mut self.params.psi {
            *p = it.next().unwrap();
        }
        for l in &mut self.lighting {
            let flat: Vec<f64> = (0..27).map(|_| it.next().unwrap()).collect();
            *l = SHLighting::from_flat(&flat);
        }
        for c in &mut self.albedo_offset.data {
            *c = v3(&mut it);
        }
    }

    pub fn slots(&self) -> Vec<Slot> {
        let slot = |group, joint, camera_translation| Slot {
            group,
            joint,
            camera_translation,
        };
        let mut out = Vec::new();
        for _ in &self.cameras {
            out.extend([slot(ParamGroup::Cameras, None, false); 3]);
            out.extend([slot(ParamGroup::Cameras, None, true); 3]);
        }
        for k in 0..self.params.theta.len() {
            let g = if k == 0 { ParamGroup::GlobalPose } else { ParamGroup::JointPose };
            out.extend([slot(g, Some(k), false); 3]);
        }
        out.extend(vec![slot(ParamGroup::Shape, None, false); self.params.beta.len()]);
        out.extend(vec![slot(ParamGroup::Expression, None, false); self.params.psi.len()]);
        out.extend(vec![slot(ParamGroup::Lighting, None, false); 27 * self.lighting.len()]);
        out.extend(vec![slot(ParamGroup::Albedo, None, false); 3 * self.albedo_offset.data.len()]);
        out
    }

    pub fn camera(&self, view: usize) -> Camera {
        self.cameras[view].camera()
    }
}

impl Gradient {
    fn zeros(state: &FitState) -> Self {
        Self {
            beta: vec![0.0; state.params.beta.len()],
            theta: vec![Vector3::zeros(); state.params.theta.len()],
            psi: vec![0.0; state.params.psi.len()],
            cameras: vec![CameraGrad::default(); state.cameras.len()],
            lighting: vec![SHLighting::zeros(); state.lighting.len()],
            albedo_offset: Image::new(state.albedo_offset.width, state.albedo_offset.height),
        }
    }

    /// Same order as [`FitState::to_vec`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.cameras {
            out.extend(c.omega.iter());
            out.extend(c.translation.iter());
        }
        for t in &self.theta {
            out.extend(t.iter());
        }
        out.extend(&self.beta);
        out.extend(&self.psi);
        for l in &self.lighting {
            out.extend(l.as_flat());
        }
        for c in &self.albedo_offset.data {
            out.extend(c.iter());
        }
        out
    }

    fn check_finite(&self) -> Result<()> {
        let finite = |mut it: &mut dyn Iterator<Item = f64>| Iterator::all(&mut it, |x| x.is_finite());
        let checks: [(ParamGroup, bool); 7] = [
            (ParamGroup::Cameras, finite(&mut self.cameras.iter().flat_map(|c| c.omega.iter().chain(c.translation.iter()).copied()))),
            (ParamGroup::GlobalPose, finite(&mut self.theta.iter().take(1).flat_map(|t| t.iter().copied()))),
            (ParamGroup::JointPose, finite(&mut self.theta.iter().skip(1).flat_map(|t| t.iter().copied()))),
            (ParamGroup::Shape, finite(&mut self.beta.iter().copied())),
            (ParamGroup::Expression, finite(&mut self.psi.iter().copied())),
            (ParamGroup::Lighting, self.lighting.iter().all(SHLighting::is_finite)),
            (ParamGroup::Albedo, finite(&mut self.albedo_offset.data.iter().flat_map(|c| c.iter().copied()))),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((g, _)) => Err(Error::NonFinite(g.name().into())),
            None => Ok(()),
        }
    }
}

/// Flow targets of one ordered view pair, frozen at the last refresh.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTargets {
    pub source: usize,
    pub target: usize,
    pub targets: Vec<FlowTarget>,
    pub covisible_pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowCache {
    pub pairs: Vec<PairTargets>,
}

/// Intermediate masks and flow of one pair, kept for debugging output.
#[derive(Clone, Debug)]
pub struct PairDebug {
    pub source: usize,
    pub target: usize,
    pub cross_render: Image,
    pub mb: BinaryMask,
    pub mc: BinaryMask,
    pub flow: FlowField,
}

/// Where flow comes from: an image-based estimator, or the exact
/// correspondence to a known reference mesh seen from known cameras.
pub enum FlowSource {
    Estimator(Box<dyn FlowEstimator>),
    Oracle { vertices: Vec<Vector3<f64>>, cameras: Vec<Camera> },
}

/// The fitting problem: resampled views plus fixed UV-space helpers.
pub struct Problem<'a> {
    pub assets: &'a FlameAssets,
    pub views: Vec<View>,
    pub config: FitConfig,
    pub uv: UvRaster,
    pub face_mask_uv: UvMask,
}

fn resample_view(view: &View, resolution: Option<usize>) -> View {
    let Some(r) = resolution else { return view.clone() };
    let long = view.image.width.max(view.image.height);
    if long == r {
        return view.clone();
    }
    let s = r as f64 / long as f64;
    let w = ((view.image.width as f64 * s).round() as usize).max(1);
    let h = ((view.image.height as f64 * s).round() as usize).max(1);
    let (sx, sy) = (w as f64 / view.image.width as f64, h as f64 / view.image.height as f64);
    View {
        image: view.image.resized(w, h),
        landmarks: view.landmarks.iter().map(|p| Vector2::new(p.x * sx, p.y * sy)).collect(),
        camera: view.camera.as_ref().map(|c| Camera {
            fx: c.fx * sx,
            fy: c.fy * sy,
            cx: c.cx * sx,
            cy: c.cy * sy,
            width: w,
            height: h,
            ..c.clone()
        }),
    }
}

/// Per-view evaluation products shared by the loss and flow code.
struct ViewGeometry {
    camera: Camera,
    fb: FrameBuffer,
}

impl<'a> Problem<'a> {
    pub fn new(views: &[View], assets: &'a FlameAssets, config: &FitConfig) -> Result<Self> {
        config.check()?;
        if views.is_empty() {
            return Err(Error::Empty("views".into()));
        }
        let views: Vec<View> = views.iter().map(|v| resample_view(v, config.resolution)).collect();
        for (i, v) in views.iter().enumerate() {
            if v.landmarks.len() != NUM_LANDMARKS {
                return Err(Error::DimensionMismatch(format!("view {i} has {} landmarks, expected {NUM_LANDMARKS}", v.landmarks.len())));
            }
            if v.landmarks.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
                return Err(Error::Degenerate(format!("view {i} has non-finite landmarks")));
            }
            if v.image.width == 0 || v.image.height == 0 {
                return Err(Error::Empty(format!("view {i} image")));
            }
        }
        Ok(Self {
            assets,
            views,
            config: config.clone(),
            uv: UvRaster::new(assets, config.uv_size),
            face_mask_uv: assets.face_mask_uv_at(config.uv_size),
        })
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    /// Zero model parameters, DC-only gray lighting, zero albedo offset, and
    /// per-view cameras estimated from the template's landmarks (or taken
    /// from the view when given).
    pub fn init_state(&self) -> Result<FitState> {
        let params = FlameParams::zeros(self.assets);
        let template_landmarks = embed_landmarks(&self.assets.template, &self.assets.faces, &self.assets.landmark_embedding);
        let mut cameras = Vec::with_capacity(self.views.len());
        for (i, v) in self.views.iter().enumerate() {
            let camera = match &v.camera {
                Some(c) => {
                    c.check()?;
                    c.clone()
                }
                None => {
                    estimate_initial_camera(&v.landmarks, &template_landmarks, v.image.width, v.image.height)
                        .map_err(|e| Error::Degenerate(format!("view {i}: {e}")))?
                        .camera
                }
            };
            cameras.push(CameraParam::new(camera));
        }
        Ok(FitState {
            params,
            cameras,
            lighting: vec![SHLighting::ambient(1.0); self.views.len()],
            albedo_offset: Image::new(self.config.uv_size, self.config.uv_size),
        })
    }

    fn geometry(&self, state: &FitState, mesh: &PosedMesh) -> Result<Vec<ViewGeometry>> {
        self.views
            .iter()
            .enumerate()
            .map(|(v, view)| {
                let camera = state.camera(v);
                let fb = rasterize(&mesh.vertices, &self.assets.faces, &camera, view.image.width, view.image.height)?;
                Ok(ViewGeometry { camera, fb })
            })
            .collect()
    }

    /// Loss report and full gradient at `state` under `weights`; `flow`
    /// supplies the frozen flow targets of the multi-view term.
    pub fn evaluate(&self, state: &FitState, weights: &LossWeights, flow: Option<&FlowCache>) -> Result<(LossReport, Gradient)> {
        let assets = self.assets;
        let faces = &assets.faces;
        let (mesh, tape) = decode_with_tape(assets, &state.params)?;
        let landmarks = embed_landmarks(&mesh.vertices, faces, &assets.landmark_embedding);
        let mut grad = Gradient::zeros(state);
        let mut g_vertices = vec![Vector3::zeros(); mesh.vertices.len()];
        let mut g_landmarks = vec![Vector3::zeros(); landmarks.len()];
        let n_views = self.views.len() as f64;
        let literal = self.config.literal_sums;

        let chains: Vec<CameraChain> = state.cameras.iter().map(CameraParam::linearize).collect();
        let mut terms = LossTerms::default();
        let mut per_view = Vec::with_capacity(self.views.len());
        for (v, view) in self.views.iter().enumerate() {
            let chain = &chains[v];
            let projected: Vec<Vector2<f64>> = landmarks.iter().map(|x| chain.camera.project_point(x).pixel).collect();
            let include = if self.config.all_landmarks {
                vec![true; projected.len()]
            } else {
                let fb = rasterize(&mesh.vertices, faces, &chain.camera, view.image.width, view.image.height)?;
                landmark_inclusion(&view.landmarks, &face_mask(&fb))
            };
            let included = include.iter().filter(|&&b| b).count();
            let (lmk, g_lmk) = landmark_loss_grad(&view.landmarks, &projected, &include);
            let (eye, g_eye) = pair_offset_loss_grad(&view.landmarks, &projected, &assets.eye_pairs);
            let (lip, g_lip) = pair_offset_loss_grad(&view.landmarks, &projected, &assets.lip_pairs);
            // Mean over views, or raw sums over landmarks / pairs and views.
            let (s_lmk, s_eye, s_lip) = if literal {
                (included as f64, assets.eye_pairs.len() as f64, assets.lip_pairs.len() as f64)
            } else {
                (1.0 / n_views, 1.0 / n_views, 1.0 / n_views)
            };
            terms.lmk += s_lmk * lmk;
            terms.eye += s_eye * eye;
            terms.lip += s_lip * lip;
            per_view.push(ViewReport {
                lmk,
                eye,
                lip,
                included_landmarks: included,
            });
            let cg = &mut grad.cameras[v];
            for i in 0..landmarks.len() {
                let g = g_lmk[i] * (weights.lmk * s_lmk) + g_eye[i] * (weights.eye * s_eye) + g_lip[i] * (weights.lip * s_lip);
                if g != Vector2::zeros() {
                    g_landmarks[i] += chain.backprop(&landmarks[i], &g, cg);
                }
            }
        }
        embed_landmarks_backward(faces, &assets.landmark_embedding, &g_landmarks, &mut g_vertices);

        let mut pairs = Vec::new();
        if let Some(cache) = flow {
            let n_pairs = cache.pairs.len().max(1) as f64;
            for p in &cache.pairs {
                let chain = &chains[p.target];
                let (value, g_pixels) = flow_surrogate_grad(&p.targets, &mesh.vertices, faces, &chain.camera);
                let scale = if literal { p.targets.len() as f64 } else { 1.0 / n_pairs };
                terms.multiop += scale * value;
                pairs.push(PairReport {
                    source: p.source,
                    target: p.target,
                    flow: value,
                    covisible_pixels: p.covisible_pixels,
                });
                if weights.multiop == 0.0 {
                    continue;
                }
                let cg = &mut grad.cameras[p.target];
                for (t, g) in p.targets.iter().zip(&g_pixels) {
                    let f = faces[t.triangle];
                    let x = surface_point(&mesh.vertices, &f, &t.bary);
                    let gx = chain.backprop(&x, &(g * (weights.multiop * scale)), cg);
                    for k in 0..3 {
                        g_vertices[f[k]] += gx * t.bary[k];
                    }
                }
            }
        }

        let alpha: Vec<f64> = state.albedo_offset.data.iter().flat_map(|c| c.iter().copied()).collect();
        let (reg, g_beta, g_psi, g_alpha) = reg_loss_grad(&state.params.beta, &state.params.psi, &alpha);
        terms.reg = reg;

        let pg = decode_backward(assets, &tape, &g_vertices);
        grad.theta = pg.theta;
        grad.beta = pg.beta.iter().zip(&g_beta).map(|(a, b)| a + weights.reg * b).collect();
        grad.psi = pg.psi.iter().zip(&g_psi).map(|(a, b)| a + weights.reg * b).collect();
        for (c, g) in grad.albedo_offset.data.iter_mut().zip(g_alpha.chunks_exact(3)) {
            *c = Rgb::new(g[0], g[1], g[2]) * weights.reg;
        }
        grad.check_finite()?;
        Ok((LossReport::new(terms, weights, per_view, pairs), grad))
    }

    /// Flattened gradient with entries outside `active` set to zero.
    pub fn gradient(&self, state: &FitState, weights: &LossWeights, flow: Option<&FlowCache>, active: &[bool]) -> Result<(LossReport, Vec<f64>)> {
        let (report, grad) = self.evaluate(state, weights, flow)?;
        let mut g = grad.to_vec();
        for (x, &on) in g.iter_mut().zip(active) {
            if !on {
                *x = 0.0;
            }
        }
        Ok((report, g))
    }

    /// Which flattened entries a stage may move.
    pub fn active_mask(&self, state: &FitState, groups: &[ParamGroup]) -> Vec<bool> {
        state
            .slots()
            .iter()
            .map(|s| {
                let frozen_joint = s.joint.is_some_and(|k| self.config.frozen_joints.get(k).copied().unwrap_or(false));
                groups.contains(&s.group) && !frozen_joint
            })
            .collect()
    }

    fn step_scales(&self, state: &FitState) -> Vec<f64> {
        let g = &self.config.group_scales;
        state
            .slots()
            .iter()
            .map(|s| match s.group {
                ParamGroup::Cameras if s.camera_translation => g.camera_translation,
                ParamGroup::Cameras => g.camera_rotation,
                ParamGroup::GlobalPose => g.global_pose,
                ParamGroup::JointPose => g.joint_pose,
                ParamGroup::Shape => g.shape,
                ParamGroup::Expression => g.expression,
                ParamGroup::Lighting => g.lighting,
                ParamGroup::Albedo => g.albedo,
            })
            .collect()
    }

    /// Per-view UV texture `M_face ⊙ inpaint(I′_uv)` from the current geometry.
    fn view_textures(&self, mesh: &PosedMesh, geometry: &[ViewGeometry]) -> Vec<UVTexture> {
        self.views
            .par_iter()
            .zip(geometry)
            .map(|(view, g)| {
                let corr = build_uv_correspondence(&g.fb, &self.uv, &mesh.vertices, &self.assets.faces, &g.camera);
                let extracted = extract_texture(&view.image, &corr);
                let filled = inpaint_bilinear(&extracted, Some(&self.face_mask_uv));
                apply_face_mask(&filled, &self.face_mask_uv).expect("mask resolution matches uv_size")
            })
            .collect()
    }

    /// Visibility-weighted fusion of all views, inpainted inside and masked to the face region.
    pub fn fused_texture(&self, state: &FitState) -> Result<UVTexture> {
        let mesh = decode(self.assets, &state.params)?;
        let geometry = self.geometry(state, &mesh)?;
        let mut textures = Vec::with_capacity(self.views.len());
        let mut weights = Vec::with_capacity(self.views.len());
        for (view, g) in self.views.iter().zip(&geometry) {
            let corr = build_uv_correspondence(&g.fb, &self.uv, &mesh.vertices, &self.assets.faces, &g.camera);
            weights.push(view_weights(&self.uv, &corr, &mesh.vertices, &mesh.vertex_normals, &self.assets.faces, &g.camera));
            textures.push(extract_texture(&view.image, &corr));
        }
        let fused = fuse_views(&textures, &weights)?;
        apply_face_mask(&inpaint_bilinear(&fused, Some(&self.face_mask_uv)), &self.face_mask_uv)
    }

    /// Re-estimates flow for every ordered view pair and freezes it into
    /// surrogate targets. Returns the cache, the number of estimator calls,
    /// and per-pair debug products when `debug` is set.
    pub fn refresh_flow(&self, state: &FitState, source: &FlowSource, debug: bool) -> Result<(FlowCache, usize, Vec<PairDebug>)> {
        let assets = self.assets;
        let faces = &assets.faces;
        let mesh = decode(assets, &state.params)?;
        let geometry = self.geometry(state, &mesh)?;
        let textures = match source {
            FlowSource::Estimator(_) => self.view_textures(&mesh, &geometry),
            FlowSource::Oracle { .. } => Vec::new(),
        };
        let reference = match source {
            FlowSource::Oracle { vertices, cameras } => {
                if cameras.len() != self.views.len() {
                    return Err(Error::DimensionMismatch(format!("{} oracle cameras for {} views", cameras.len(), self.views.len())));
                }
                cameras
                    .iter()
                    .zip(&self.views)
                    .map(|(c, v)| rasterize(vertices, faces, c, v.image.width, v.image.height))
                    .collect::<Result<Vec<_>>>()?
            }
            FlowSource::Estimator(_) => Vec::new(),
        };
        let n = self.views.len();
        let ordered: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).collect();
        let results: Vec<Result<(PairTargets, bool, Option<PairDebug>)>> = ordered
            .par_iter()
            .map(|&(a, b)| {
                let (ga, gb) = (&geometry[a], &geometry[b]);
                let view_b = &self.views[b];
                let (w, h) = (view_b.image.width, view_b.image.height);
                let covis = covisible_landmarks((&ga.fb, &ga.camera), (&gb.fb, &gb.camera), &mesh.vertices, faces, &assets.landmark_embedding);
                let points: Vec<Vector2<f64>> = covis.iter().map(|&i| view_b.landmarks[i]).collect();
                let mb = landmark_bbox_mask(&points, w, h, self.config.box_margin);
                let mc = covisible_mask(&mb, &face_mask(&gb.fb))?;
                let mouth: Vec<Vector2<f64>> = assets.mouth_polygon.iter().map(|&i| view_b.landmarks[i]).collect();
                let (mc, _) = mouth_exclusion(&mc, &mouth);
                let mut called = false;
                let (flow, cross) = if mc.count() == 0 {
                    (FlowField::zeros(w, h, false), Image::new(w, h))
                } else {
                    match source {
                        FlowSource::Estimator(est) => {
                            let cross = render_texture(assets, &gb.fb, &textures[a].data)?;
                            called = true;
                            let flow = est.estimate(&cross.masked(&mc.data), &view_b.image.masked(&mc.data))?;
                            (flow, cross)
                        }
                        FlowSource::Oracle { vertices, cameras } => {
                            (oracle_flow(&reference[b], &gb.fb, vertices, faces, &cameras[b]), Image::new(w, h))
                        }
                    }
                };
                let (_, covisible_pixels) = mean_flow_magnitude(&flow, &mc)?;
                let targets = flow_targets(&gb.fb, &flow, &mc);
                let dbg = debug.then_some(PairDebug {
                    source: a,
                    target: b,
                    cross_render: cross,
                    mb,
                    mc,
                    flow,
                });
                Ok((
                    PairTargets {
                        source: a,
                        target: b,
                        targets,
                        covisible_pixels,
                    },
                    called,
                    dbg,
                ))
            })
            .collect();
        let mut cache = FlowCache::default();
        let mut calls = 0;
        let mut debug_out = Vec::new();
        for r in results {
            let (p, called, dbg) = r?;
            cache.pairs.push(p);
            calls += called as usize;
            debug_out.extend(dbg);
        }
        Ok((cache, calls, debug_out))
    }
}

/// One optimizer iteration as recorded in the trace (values before the step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: String,
    pub iteration: usize,
    pub step_size: f64,
    pub report: LossReport,
    /// Lowest total seen so far in this stage.
    pub best_total: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: FlameParams,
    pub cameras: Vec<Camera>,
    pub lighting: Vec<SHLighting>,
    pub albedo_offset: Image,
    pub texture: UVTexture,
    pub trace: Vec<TraceEntry>,
    /// Seconds.
    pub wall_time: f64,
    pub flow_calls: usize,
    pub seed: u64,
    /// Final optimizer state, for resuming or re-evaluation.
    pub state: FitState,
}

impl FitResult {
    /// Albedo `BASE_ALBEDO + offset`.
    pub fn albedo(&self) -> Image {
        Image {
            width: self.albedo_offset.width,
            height: self.albedo_offset.height,
            data: self.albedo_offset.data.iter().map(|c| c.add_scalar(BASE_ALBEDO)).collect(),
        }
    }

    /// Trace as JSON lines.
    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: &[f64], active: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..x.len() {
            if !active[i] {
                continue;
            }
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            x[i] -= lr[i] * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Observer hook for per-iteration progress and debug dumps.
pub trait FitObserver {
    /// Whether flow refreshes should keep masks, cross-renders and flow fields.
    fn wants_debug(&self) -> bool {
        false
    }
    fn iteration(&mut self, _entry: &TraceEntry) {}
    fn flow_refreshed(&mut self, _stage: &str, _iteration: usize, _pairs: &[PairDebug]) {}
    fn texture_refreshed(&mut self, _stage: &str, _iteration: usize, _texture: &UVTexture) {}
}

struct NoObserver;
impl FitObserver for NoObserver {}

/// Initial state for `views` (see [`Problem::init_state`]).
pub fn init_fit(views: &[View], assets: &FlameAssets, config: &FitConfig) -> Result<FitState> {
    Problem::new(views, assets, config)?.init_state()
}

/// Fits with the flow estimator named in `config`.
pub fn fit(views: &[View], assets: &FlameAssets, config: &FitConfig) -> Result<FitResult> {
    fit_with_flow(views, assets, config, &FlowSource::Estimator(config.flow.estimator()), &mut NoObserver)
}

pub fn fit_with_flow(views: &[View], assets: &FlameAssets, config: &FitConfig, flow: &FlowSource, observer: &mut dyn FitObserver) -> Result<FitResult> {
    let start = Instant::now();
    let problem = Problem::new(views, assets, config)?;
    let mut state = problem.init_state()?;
    let scales = problem.step_scales(&state);
    let mut trace = Vec::with_capacity(config.total_iterations());
    let mut flow_calls = 0;
    let debug = observer.wants_debug();

    for stage in &config.stages {
        if stage.iterations == 0 {
            continue;
        }
        let weights = stage.active_weights(&config.weights);
        let active = problem.active_mask(&state, &stage.groups);
        let mut adam = Adam::new(active.len());
        let mut cache: Option<FlowCache> = None;
        let mut best = f64::INFINITY;
        let uses_flow = weights.multiop > 0.0;
        let decay = if stage.iterations > 1 {
            config.final_step_fraction.powf(1.0 / (stage.iterations - 1) as f64)
        } else {
            1.0
        };
        log::info!("stage {}: {} iterations, {} active parameters", stage.name, stage.iterations, active.iter().filter(|&&a| a).count());
        for it in 0..stage.iterations {
            if uses_flow && it % config.flow_refresh == 0 {
                let (c, calls, dbg) = problem.refresh_flow(&state, flow, debug)?;
                log::debug!("stage {} iteration {it}: flow refreshed over {} pairs", stage.name, c.pairs.len());
                flow_calls += calls;
                observer.flow_refreshed(&stage.name, it, &dbg);
                cache = Some(c);
            }
            if uses_flow && it % config.texture_refresh == 0 {
                observer.texture_refreshed(&stage.name, it, &problem.fused_texture(&state)?);
            }
            let (report, g) = problem.gradient(&state, &weights, cache.as_ref(), &active)?;
            best = best.min(report.total);
            let step_size = stage.step_size * decay.powi(it as i32);
            let entry = TraceEntry {
                stage: stage.name.clone(),
                iteration: it,
                step_size,
                report,
                best_total: best,
            };
            if it + 1 == stage.iterations {
                log::info!("stage {} done: total {:.6e}, best {:.6e}", stage.name, entry.report.total, best);
            }
            observer.iteration(&entry);
            trace.push(entry);
            let lr: Vec<f64> = scales.iter().map(|s| s * step_size).collect();
            let mut x = state.to_vec();
            adam.step(&mut x, &g, &lr, &active);
            state.set_from_vec(&x);
            for t in &mut state.params.theta {
                *t = clamp_axis_angle(t, std::f64::consts::PI);
            }
        }
    }
    let texture = problem.fused_texture(&state)?;
    Ok(FitResult {
        params: state.params.clone(),
        cameras: (0..state.cameras.len()).map(|v| state.camera(v)).collect(),
        lighting: state.lighting.clone(),
        albedo_offset: state.albedo_offset.clone(),
        texture,
        trace,
        wall_time: start.elapsed().as_secs_f64(),
        flow_calls,
        seed: config.seed,
        state,
    })
}

/// Central finite differences of the weighted total at flattened entries
/// `indices` of `state`, with flow targets held fixed.
pub fn finite_difference(
    problem: &Problem,
    state: &FitState,
    weights: &LossWeights,
    flow: Option<&FlowCache>,
    h: f64,
    indices: &[usize],
) -> Result<Vec<f64>> {
    let x0 = state.to_vec();
    let mut probe = state.clone();
    let mut total_at = |x: &[f64]| -> Result<f64> {
        probe.set_from_vec(x);
        Ok(problem.evaluate(&probe, weights, flow)?.0.total)
    };
    indices
        .iter()
        .map(|&i| {
            let mut x = x0.clone();
            x[i] = x0[i] + h;
            let up = total_at(&x)?;
            x[i] = x0[i] - h;
            let down = total_at(&x)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}
