//! Pose estimation: the multi-view polyrigid objective, its gradient, the
//! anchor-camera objective and two-block Adam ascent in se(3).

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{pixel_rays, CameraMatrix, CameraPose, GeometryError, IntrinsicMeta, Ray};
use crate::grid::{sample_continuous, GridError, LabelMap, Volume};
use crate::liealg::{point_jacobian, se3_exp, Twist, TwistMatrix};
use crate::render::{mask_volume, render_rays_adjoint, DetectorImage, Marcher, QuadratureSpec, RenderError};
use crate::similarity::{gmncc, gmncc_with_gradient, PatchSpec, SimilarityError};
use crate::warpfield::{build_weights, PolyrigidField, WarpError, WeightField, WeightMode};

/// Finite-difference step for rotation components (rad).
pub const FD_STEP_ROT: f64 = 1e-4;
/// Finite-difference step for translation components (mm).
pub const FD_STEP_XYZ: f64 = 1e-2;

/// Voxels handled per task in parallel reductions. Fixed so results do not
/// depend on the thread count.
const CHUNK: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("at least one view is required")]
    NoViews,
    #[error("view {index}: image is {image:?} but the camera expects {camera:?}")]
    ViewShape {
        index: usize,
        image: (usize, usize),
        camera: (usize, usize),
    },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("anchor structure {0} does not occur in the label map")]
    UnknownAnchor(u16),
    #[error("camera registration diverged: loss decreased on every one of {} iterations", history.len())]
    Diverged { history: Vec<f64> },
}

/// One observed X-ray and its calibrated camera.
#[derive(Debug, Clone)]
pub struct View {
    pub image: DetectorImage,
    pub camera: CameraMatrix,
    pub meta: IntrinsicMeta,
}

#[derive(Debug, Clone)]
pub struct RegistrationProblem {
    pub moving: Volume,
    pub labels: LabelMap,
    pub weight_mode: WeightMode,
    pub views: Vec<View>,
    pub quadrature: QuadratureSpec,
    pub patch: PatchSpec,
}

impl RegistrationProblem {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.views.is_empty() {
            return Err(RegistrationError::NoViews);
        }
        self.labels.check_aligned(&self.moving)?;
        self.weight_mode.validate()?;
        self.quadrature.validate()?;
        self.patch.validate()?;
        for (index, v) in self.views.iter().enumerate() {
            let camera = (v.meta.height(), v.meta.width());
            if v.image.shape() != camera {
                return Err(RegistrationError::ViewShape {
                    index,
                    image: v.image.shape(),
                    camera,
                });
            }
            if camera.0 < self.patch.patch_size || camera.1 < self.patch.patch_size {
                return Err(SimilarityError::PatchTooLarge(camera, self.patch.patch_size).into());
            }
        }
        Ok(())
    }
}

/// Adam settings. Columns 0–2 (ω) use `step_rot`, columns 3–5 (u) use
/// `step_xyz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub step_rot: f64,
    pub step_xyz: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_iters: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    /// Per-iteration multiplicative decay of both step sizes; 1 keeps them
    /// constant.
    pub step_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            step_rot: 1e-2,
            step_xyz: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_iters: 250,
            convergence_window: 25,
            convergence_tol: 1e-5,
            step_decay: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |msg: &str| Err(RegistrationError::InvalidConfig(msg.into()));
        if !(self.step_rot > 0.0 && self.step_xyz > 0.0) {
            return bad("step sizes must be positive");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if self.convergence_window == 0 {
            return bad("convergence_window must be positive");
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return bad("step_decay must lie in (0, 1]");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be non-negative");
        }
        Ok(())
    }
}

/// Result of [`optimize_poses`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// Best-scoring iterate.
    pub twists: TwistMatrix,
    /// Objective at every evaluated iterate.
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

/// Result of [`register_camera`].
#[derive(Debug, Clone, PartialEq)]
pub struct CameraEstimate {
    pub pose: CameraPose,
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

/// Voxels of `vol` within two voxels (Chebyshev) of a nonzero voxel.
fn reach_mask(vol: &Volume) -> Vec<bool> {
    let g = vol.geometry();
    let [nx, ny, nz] = g.shape;
    let mut mask: Vec<bool> = vol.data().iter().map(|&v| v != 0.0).collect();
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = g.shape[axis];
        let src = mask.clone();
        for (idx, m) in mask.iter_mut().enumerate() {
            let c = [idx % nx, (idx / nx) % ny, idx / (nx * ny)][axis];
            let lo = c.saturating_sub(2);
            let hi = (c + 2).min(n - 1);
            *m = (lo..=hi).any(|t| src[idx - c * strides[axis] + t * strides[axis]]);
        }
    }
    debug_assert_eq!(mask.len(), nx * ny * nz);
    mask
}

/// The multi-view polyrigid objective with everything that does not depend
/// on the twists precomputed.
pub struct Objective<'p> {
    problem: &'p RegistrationProblem,
    weights: WeightField,
    rays: Vec<Vec<Ray>>,
    reach: Vec<bool>,
}

struct Forward {
    fused: Vec<Twist>,
    coords: Vec<Vector3<f64>>,
    warped: Volume,
    renders: Vec<DetectorImage>,
}

impl<'p> Objective<'p> {
    pub fn new(problem: &'p RegistrationProblem) -> Result<Self, RegistrationError> {
        problem.validate()?;
        let weights = build_weights(&problem.labels, &problem.moving, problem.weight_mode)?;
        let rays = problem
            .views
            .iter()
            .map(|v| pixel_rays(&v.camera, &v.meta))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            problem,
            weights,
            rays,
            reach: reach_mask(&problem.moving),
        })
    }

    pub fn weights(&self) -> &WeightField {
        &self.weights
    }

    pub fn structure_count(&self) -> usize {
        self.weights.structure_count()
    }

    fn forward(&self, twists: &TwistMatrix) -> Result<Forward, RegistrationError> {
        let field = PolyrigidField::new(twists.clone(), &self.weights)?;
        let g = *self.problem.moving.geometry();
        let fused = field.fused_twists();
        let coords: Vec<Vector3<f64>> = fused
            .par_iter()
            .enumerate()
            .map(|(i, v)| se3_exp(v).transform_point(&g.center(i)))
            .collect();
        let data = self.problem.moving.data();
        let warped: Vec<f64> = coords
            .par_iter()
            .map(|p| sample_continuous(data, &g.shape, &g.world_to_voxel(p)))
            .collect();
        let warped = Volume::from_parts_unchecked(g, warped);
        let marcher = Marcher::new(&warped);
        let q = self.problem.quadrature;
        let renders = self
            .rays
            .iter()
            .zip(&self.problem.views)
            .map(|(rays, v)| {
                let px = rays.par_iter().map(|r| marcher.trace(r, &q)).collect();
                DetectorImage::new(v.meta.height(), v.meta.width(), px)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Forward {
            fused,
            coords,
            warped,
            renders,
        })
    }

    /// Warped volume `V ∘ Φ` and its renders for the given twists.
    pub fn renders(&self, twists: &TwistMatrix) -> Result<(Volume, Vec<DetectorImage>), RegistrationError> {
        let f = self.forward(twists)?;
        Ok((f.warped, f.renders))
    }

    /// Mean gmNCC over views.
    pub fn value(&self, twists: &TwistMatrix) -> Result<f64, RegistrationError> {
        let f = self.forward(twists)?;
        let mut total = 0.0;
        for (v, r) in self.problem.views.iter().zip(&f.renders) {
            total += gmncc(&v.image, r, &self.problem.patch)?.value;
        }
        Ok(total / self.problem.views.len() as f64)
    }

    /// Objective and its `K × 6` gradient.
    ///
    /// The image-side derivative is exact (adjoint of the metric and of the
    /// renderer). Through the warp, each voxel uses a central secant of the
    /// trilinear sample along the displacement that a finite-difference step
    /// of each twist component induces, so the result tracks finite
    /// differences of the objective even across interpolation kinks.
    pub fn value_and_gradient(&self, twists: &TwistMatrix) -> Result<(f64, Vec<[f64; 6]>), RegistrationError> {
        let f = self.forward(twists)?;
        let p = self.problem;
        let g = *p.moving.geometry();
        let n_views = p.views.len() as f64;
        let k = self.structure_count();

        let mut value = 0.0;
        let mut image_grads = Vec::with_capacity(p.views.len());
        for (v, r) in p.views.iter().zip(&f.renders) {
            let (score, grad) = gmncc_with_gradient(&v.image, r, &p.patch)?;
            value += score.value / n_views;
            image_grads.push(grad.into_iter().map(|x| x / n_views).collect::<Vec<_>>());
        }

        // Output voxels whose secant samples can read a nonzero moving voxel.
        let contributing: Vec<usize> = (0..g.len())
            .into_par_iter()
            .filter(|&i| self.reaches(&g.world_to_voxel(&f.coords[i])))
            .collect();
        let mut grad = vec![[0.0; 6]; k];
        let Some(region) = bounding_box(&contributing, &g.shape) else {
            return Ok((value, grad));
        };
        let mut dl_dwarped = vec![0.0; g.len()];
        for (rays, up) in self.rays.iter().zip(&image_grads) {
            render_rays_adjoint(&g, rays, &p.quadrature, up, region, &mut dl_dwarped);
        }

        let steps = [FD_STEP_ROT, FD_STEP_ROT, FD_STEP_ROT, FD_STEP_XYZ, FD_STEP_XYZ, FD_STEP_XYZ];
        let data = p.moving.data();
        let partials: Vec<Vec<f64>> = contributing
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0; 6 * k];
                for &i in chunk {
                    let upstream = dl_dwarped[i];
                    if upstream == 0.0 {
                        continue;
                    }
                    let y = f.coords[i];
                    let jac = point_jacobian(&f.fused[i], &y);
                    for (s, &w) in self.weights.row(i).iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for (j, &h) in steps.iter().enumerate() {
                            let delta = jac.column(j) * (w * h);
                            let plus = sample_continuous(data, &g.shape, &g.world_to_voxel(&(y + delta)));
                            let minus = sample_continuous(data, &g.shape, &g.world_to_voxel(&(y - delta)));
                            acc[6 * s + j] += upstream * (plus - minus) / (2.0 * h);
                        }
                    }
                }
                acc
            })
            .collect();
        for part in partials {
            for (s, row) in grad.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += part[6 * s + j];
                }
            }
        }
        Ok((value, grad))
    }

    /// Whether trilinear samples within one voxel of continuous index `c`
    /// can be nonzero.
    fn reaches(&self, c: &Vector3<f64>) -> bool {
        let shape = self.problem.moving.geometry().shape;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if !(r >= -2.0 && r <= shape[a] as f64 + 1.0) {
                return false;
            }
            idx[a] = r.clamp(0.0, (shape[a] - 1) as f64) as usize;
        }
        self.reach[idx[0] + shape[0] * (idx[1] + shape[1] * idx[2])]
    }
}

fn bounding_box(voxels: &[usize], shape: &[usize; 3]) -> Option<([usize; 3], [usize; 3])> {
    let [nx, ny, _] = *shape;
    voxels.iter().fold(None, |acc, &i| {
        let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
        Some(match acc {
            None => (c, c),
            Some((lo, hi)) => (
                [lo[0].min(c[0]), lo[1].min(c[1]), lo[2].min(c[2])],
                [hi[0].max(c[0]), hi[1].max(c[1]), hi[2].max(c[2])],
            ),
        })
    })
}

/// Mean gmNCC of the problem's views at `twists`.
pub fn objective(problem: &RegistrationProblem, twists: &TwistMatrix) -> Result<f64, RegistrationError> {
    Objective::new(problem)?.value(twists)
}

/// Gradient of [`objective`] with respect to the `K × 6` twist parameters.
pub fn gradient(problem: &RegistrationProblem, twists: &TwistMatrix) -> Result<Vec<[f64; 6]>, RegistrationError> {
    Ok(Objective::new(problem)?.value_and_gradient(twists)?.1)
}

/// Central finite differences of `f` over `K × 6` parameters with the
/// contract steps.
pub fn finite_difference_gradient(
    params: &[[f64; 6]],
    mut f: impl FnMut(&[[f64; 6]]) -> Result<f64, RegistrationError>,
) -> Result<Vec<[f64; 6]>, RegistrationError> {
    let steps = [FD_STEP_ROT, FD_STEP_ROT, FD_STEP_ROT, FD_STEP_XYZ, FD_STEP_XYZ, FD_STEP_XYZ];
    let mut out = vec![[0.0; 6]; params.len()];
    let mut probe = params.to_vec();
    for s in 0..params.len() {
        for (j, &h) in steps.iter().enumerate() {
            probe[s][j] = params[s][j] + h;
            let plus = f(&probe)?;
            probe[s][j] = params[s][j] - h;
            let minus = f(&probe)?;
            probe[s][j] = params[s][j];
            out[s][j] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(out)
}

#[derive(Debug)]
struct AscentResult {
    best: Vec<[f64; 6]>,
    history: Vec<f64>,
    converged: bool,
}

/// Adam ascent with separate step sizes for the ω and u blocks.
fn adam_ascent(
    init: Vec<[f64; 6]>,
    config: &OptimConfig,
    mut eval: impl FnMut(&[[f64; 6]]) -> Result<(f64, Vec<[f64; 6]>), RegistrationError>,
) -> Result<AscentResult, RegistrationError> {
    config.validate()?;
    let n = init.len();
    let mut params = init;
    let mut m = vec![[0.0; 6]; n];
    let mut v = vec![[0.0; 6]; n];
    let mut history = Vec::with_capacity(config.max_iters);
    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut running_best = Vec::with_capacity(config.max_iters);
    let mut converged = false;
    for iteration in 0..config.max_iters {
        let (loss, grad) = eval(&params)?;
        if !loss.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(RegistrationError::NonFiniteLoss { iteration, loss });
        }
        history.push(loss);
        if loss > best.0 {
            best = (loss, params.clone());
        }
        running_best.push(best.0);
        let w = config.convergence_window;
        if iteration >= w && running_best[iteration] - running_best[iteration - w] < config.convergence_tol {
            converged = true;
            break;
        }
        if iteration + 1 == config.max_iters {
            break;
        }
        let t = (iteration + 1) as i32;
        let c1 = 1.0 - config.adam_beta1.powi(t);
        let c2 = 1.0 - config.adam_beta2.powi(t);
        let decay = config.step_decay.powi(iteration as i32);
        for s in 0..n {
            for j in 0..6 {
                let gj = grad[s][j];
                m[s][j] = config.adam_beta1 * m[s][j] + (1.0 - config.adam_beta1) * gj;
                v[s][j] = config.adam_beta2 * v[s][j] + (1.0 - config.adam_beta2) * gj * gj;
                let step = decay * if j < 3 { config.step_rot } else { config.step_xyz };
                params[s][j] += step * (m[s][j] / c1) / ((v[s][j] / c2).sqrt() + config.adam_eps);
            }
        }
    }
    Ok(AscentResult {
        best: best.1,
        history,
        converged,
    })
}

/// Mean voxel center of each structure (mm).
fn structure_centroids(labels: &LabelMap, ids: &[u16]) -> Vec<Vector3<f64>> {
    let g = labels.geometry();
    ids.iter()
        .map(|&id| {
            let (sum, n) = labels
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == id)
                .fold((Vector3::zeros(), 0usize), |(s, n), (i, _)| (s + g.center(i), n + 1));
            sum / n.max(1) as f64
        })
        .collect()
}

/// Twist about pivot `c` expressed about the origin: `exp(ξ')` equals
/// `T_c exp(ξ) T_c⁻¹`, so only the translation part changes.
fn recenter(xi: &[f64; 6], c: &Vector3<f64>) -> [f64; 6] {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let u = Vector3::new(xi[3], xi[4], xi[5]) + c.cross(&w);
    [xi[0], xi[1], xi[2], u.x, u.y, u.z]
}

/// Gradient with respect to the pivot-centered twist.
fn pull_back(g: &[f64; 6], c: &Vector3<f64>) -> [f64; 6] {
    let gw = Vector3::new(g[0], g[1], g[2]) - c.cross(&Vector3::new(g[3], g[4], g[5]));
    [gw.x, gw.y, gw.z, g[3], g[4], g[5]]
}

/// Estimates one twist per structure by Adam ascent from `init`. Each
/// structure is optimized about its own centroid, which decouples its
/// rotation from its translation; returned twists are about the origin.
pub fn optimize_poses(
    problem: &RegistrationProblem,
    config: &OptimConfig,
    init: &TwistMatrix,
) -> Result<PoseEstimate, RegistrationError> {
    let objective = Objective::new(problem)?;
    if init.len() != objective.structure_count() {
        return Err(WarpError::TwistCount {
            expected: objective.structure_count(),
            got: init.len(),
        }
        .into());
    }
    let pivots = structure_centroids(&problem.labels, objective.weights().ids());
    let local: Vec<[f64; 6]> = init
        .to_arrays()
        .iter()
        .zip(&pivots)
        .map(|(xi, c)| recenter(xi, &-c))
        .collect();
    let result = adam_ascent(local, config, |params| {
        let world: Vec<[f64; 6]> = params.iter().zip(&pivots).map(|(xi, c)| recenter(xi, c)).collect();
        let (value, grad) = objective.value_and_gradient(&TwistMatrix::from_arrays(&world))?;
        let grad = grad.iter().zip(&pivots).map(|(g, c)| pull_back(g, c)).collect();
        Ok((value, grad))
    })?;
    let best: Vec<[f64; 6]> = result.best.iter().zip(&pivots).map(|(xi, c)| recenter(xi, c)).collect();
    Ok(PoseEstimate {
        twists: TwistMatrix::from_arrays(&best),
        loss_history: result.history,
        converged: result.converged,
    })
}

/// Inputs of the anchor-camera objective.
#[derive(Debug, Clone, Copy)]
pub struct CameraProblem<'a> {
    pub moving: &'a Volume,
    pub labels: &'a LabelMap,
    pub anchor_id: u16,
    pub observed: &'a DetectorImage,
    pub meta: &'a IntrinsicMeta,
    pub quadrature: QuadratureSpec,
    pub patch: PatchSpec,
}

/// `init · exp(ξ)` as a camera pose.
pub fn perturb_pose(init: &CameraPose, xi: &Twist) -> CameraPose {
    CameraPose::from_rigid(&(init.to_rigid() * se3_exp(xi)))
}

/// The anchor-only objective, rendering the masked anchor structure.
pub struct CameraObjective<'a> {
    problem: CameraProblem<'a>,
    anchor: Volume,
}

impl<'a> CameraObjective<'a> {
    pub fn new(problem: CameraProblem<'a>) -> Result<Self, RegistrationError> {
        if problem.anchor_id == 0 || !problem.labels.structure_ids().contains(&problem.anchor_id) {
            return Err(RegistrationError::UnknownAnchor(problem.anchor_id));
        }
        if problem.observed.shape() != (problem.meta.height(), problem.meta.width()) {
            return Err(RegistrationError::ViewShape {
                index: 0,
                image: problem.observed.shape(),
                camera: (problem.meta.height(), problem.meta.width()),
            });
        }
        problem.quadrature.validate()?;
        problem.patch.validate()?;
        let anchor = mask_volume(problem.moving, problem.labels, &[problem.anchor_id])?;
        Ok(Self { problem, anchor })
    }

    pub fn render(&self, pose: CameraPose) -> Result<DetectorImage, RegistrationError> {
        let camera = CameraMatrix::from_meta(self.problem.meta, pose)?;
        let rays = pixel_rays(&camera, self.problem.meta)?;
        let marcher = Marcher::new(&self.anchor);
        let q = self.problem.quadrature;
        let px = rays.par_iter().map(|r| marcher.trace(r, &q)).collect();
        Ok(DetectorImage::new(self.problem.meta.height(), self.problem.meta.width(), px)?)
    }

    pub fn value(&self, pose: CameraPose) -> Result<f64, RegistrationError> {
        let rendered = self.render(pose)?;
        Ok(gmncc(self.problem.observed, &rendered, &self.problem.patch)?.value)
    }
}

/// Registers one camera by maximizing gmNCC between the rendered anchor
/// structure and the observed image over a right perturbation of
/// `init_pose`. The gradient is a central finite difference of the
/// objective.
pub fn register_camera(
    problem: &CameraProblem,
    init_pose: &CameraPose,
    config: &OptimConfig,
) -> Result<CameraEstimate, RegistrationError> {
    let objective = CameraObjective::new(*problem)?;
    let eval_at = |xi: &[f64; 6]| objective.value(perturb_pose(init_pose, &Twist::from_array(*xi)));
    let result = adam_ascent(vec![[0.0; 6]], config, |params| {
        let value = eval_at(&params[0])?;
        let grad = finite_difference_gradient(params, |p| eval_at(&p[0]))?;
        Ok((value, grad))
    })?;
    let h = &result.history;
    if h.len() >= 2 && h.windows(2).all(|w| w[1] < w[0]) {
        return Err(RegistrationError::Diverged { history: result.history });
    }
    Ok(CameraEstimate {
        pose: perturb_pose(init_pose, &Twist::from_array(result.best[0])),
        loss_history: result.history,
        converged: result.converged,
    })
}
