//! X-ray rendering by interpolating quadrature along back-projected rays.
//!
//! Each ray is sampled with the midpoint rule on the part of the segment
//! `S → P` that crosses the volume's sampling support, so the sample count
//! is spent where the volume can be nonzero. A pixel holds the negative
//! log-intensity `‖P − S‖ Σ_m V(S + λ_m (P − S)) Δλ`.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{pixel_rays, CameraMatrix, GeometryError, IntrinsicMeta, Ray};
use crate::grid::{sample_continuous, trilinear_stencil, GridGeometry, LabelMap, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid quadrature: {0}")]
    InvalidQuadrature(String),
    #[error("structure id {0} does not occur in the label map")]
    UnknownStructure(u16),
    #[error("no structure ids given")]
    NoStructures,
    #[error("label map does not match the volume grid")]
    Misaligned,
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

/// A rendered or observed X-ray image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl DetectorImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, RenderError> {
        if pixels.len() != height * width {
            return Err(RenderError::InvalidImage(format!(
                "expected {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(RenderError::InvalidImage(format!("pixel {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }
}

/// Number of quadrature nodes per ray and whether to jitter them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadratureSpec {
    pub sample_count: usize,
    /// Stratified jitter of the nodes inside their cells, seeded from the
    /// ray geometry so repeated renders stay identical.
    pub jitter: bool,
}

impl QuadratureSpec {
    pub fn new(sample_count: usize) -> Result<Self, RenderError> {
        if sample_count < 2 {
            return Err(RenderError::InvalidQuadrature(format!(
                "sample count must be at least 2, got {sample_count}"
            )));
        }
        Ok(Self {
            sample_count,
            jitter: false,
        })
    }

    /// Twice the largest grid dimension.
    pub fn for_grid(geometry: &GridGeometry) -> Self {
        Self {
            sample_count: 2 * geometry.shape.iter().copied().max().unwrap_or(1).max(1),
            jitter: false,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        Self::new(self.sample_count).map(|_| ())
    }
}

/// Inclusive box of continuous voxel indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct IndexBox {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl IndexBox {
    /// Continuous-index region where trilinear samples can touch voxels in
    /// `[lo, hi]`.
    pub fn around_voxels(lo: [usize; 3], hi: [usize; 3]) -> Self {
        Self {
            lo: Vector3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64) - Vector3::repeat(1.0),
            hi: Vector3::new(hi[0] as f64, hi[1] as f64, hi[2] as f64) + Vector3::repeat(1.0),
        }
    }

    fn of_grid(g: &GridGeometry) -> Self {
        Self::around_voxels([0, 0, 0], [g.shape[0] - 1, g.shape[1] - 1, g.shape[2] - 1])
    }
}

/// Parameter interval where `a + λ b` lies inside `bx`, intersected with
/// `[lo, hi]`.
fn clip_line(a: &Vector3<f64>, b: &Vector3<f64>, bx: &IndexBox, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (lo, hi);
    for axis in 0..3 {
        if b[axis] == 0.0 {
            if a[axis] < bx.lo[axis] || a[axis] > bx.hi[axis] {
                return None;
            }
            continue;
        }
        let ta = (bx.lo[axis] - a[axis]) / b[axis];
        let tb = (bx.hi[axis] - a[axis]) / b[axis];
        let (near, far) = if ta < tb { (ta, tb) } else { (tb, ta) };
        t0 = t0.max(near);
        t1 = t1.min(far);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Sampling layout of one ray through a grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RayPlan {
    /// Ray start in continuous voxel indices.
    a: Vector3<f64>,
    /// Ray direction (P − S) in continuous voxel indices.
    b: Vector3<f64>,
    lambda_near: f64,
    step: f64,
    /// ‖P − S‖·Δλ.
    weight: f64,
    samples: usize,
    jitter_seed: Option<u64>,
}

impl RayPlan {
    pub fn new(geometry: &GridGeometry, ray: &Ray, q: &QuadratureSpec) -> Option<Self> {
        let a = geometry.world_to_voxel(&ray.source);
        let b = (ray.target - ray.source).component_div(&geometry.spacing);
        let (near, far) = clip_line(&a, &b, &IndexBox::of_grid(geometry), 0.0, 1.0)?;
        let step = (far - near) / q.sample_count as f64;
        Some(Self {
            a,
            b,
            lambda_near: near,
            step,
            weight: ray.length() * step,
            samples: q.sample_count,
            jitter_seed: q.jitter.then(|| ray_seed(ray)),
        })
    }

    #[inline]
    fn node(&self, m: usize) -> Vector3<f64> {
        let offset = match self.jitter_seed {
            None => 0.5,
            Some(seed) => unit_hash(seed ^ (m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        };
        let lambda = self.lambda_near + (m as f64 + offset) * self.step;
        self.a + self.b * lambda
    }

    /// Node indices whose samples can fall inside `region`.
    fn node_range(&self, region: &IndexBox) -> std::ops::Range<usize> {
        let far = self.lambda_near + self.step * self.samples as f64;
        match clip_line(&self.a, &self.b, region, self.lambda_near, far) {
            None => 0..0,
            Some((t0, t1)) => {
                let lo = ((t0 - self.lambda_near) / self.step).floor() - 1.0;
                let hi = ((t1 - self.lambda_near) / self.step).ceil() + 1.0;
                let lo = lo.max(0.0) as usize;
                let hi = (hi.max(0.0) as usize).min(self.samples);
                lo.min(hi)..hi
            }
        }
    }
}

fn ray_seed(ray: &Ray) -> u64 {
    ray.source
        .iter()
        .chain(ray.target.iter())
        .fold(0xCBF2_9CE4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3)
        })
}

/// SplitMix64 finalizer mapped to `[0, 1)`.
fn unit_hash(mut z: u64) -> f64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Read-only view of a volume prepared for repeated ray marching.
pub(crate) struct Marcher<'a> {
    geometry: GridGeometry,
    data: &'a [f64],
    /// Samples outside this region are exactly zero.
    nonzero: Option<IndexBox>,
}

impl<'a> Marcher<'a> {
    pub fn new(vol: &'a Volume) -> Self {
        Self {
            geometry: *vol.geometry(),
            data: vol.data(),
            nonzero: vol.nonzero_bounds().map(|(lo, hi)| IndexBox::around_voxels(lo, hi)),
        }
    }

    pub fn trace(&self, ray: &Ray, q: &QuadratureSpec) -> f64 {
        let Some(nonzero) = &self.nonzero else {
            return 0.0;
        };
        let Some(plan) = RayPlan::new(&self.geometry, ray, q) else {
            return 0.0;
        };
        let mut sum = 0.0;
        for m in plan.node_range(nonzero) {
            sum += sample_continuous(self.data, &self.geometry.shape, &plan.node(m));
        }
        plan.weight * sum
    }
}

/// Line integral of `vol` along one ray.
pub fn render_ray(vol: &Volume, ray: &Ray, q: &QuadratureSpec) -> f64 {
    Marcher::new(vol).trace(ray, q)
}

/// Renders one value per ray; output order follows `rays`.
pub fn render_rays(vol: &Volume, rays: &[Ray], q: &QuadratureSpec) -> Vec<f64> {
    let marcher = Marcher::new(vol);
    rays.par_iter().map(|r| marcher.trace(r, q)).collect()
}

/// Digitally reconstructed radiograph of `vol` seen by `camera`.
pub fn render_drr(
    vol: &Volume,
    camera: &CameraMatrix,
    meta: &IntrinsicMeta,
    q: &QuadratureSpec,
) -> Result<DetectorImage, RenderError> {
    q.validate()?;
    let rays = pixel_rays(camera, meta)?;
    Ok(DetectorImage {
        height: meta.height(),
        width: meta.width(),
        pixels: render_rays(vol, &rays, q),
    })
}

/// Volume zeroed outside the listed label ids (0 keeps the background).
pub fn mask_volume(vol: &Volume, labels: &LabelMap, ids: &[u16]) -> Result<Volume, RenderError> {
    if ids.is_empty() {
        return Err(RenderError::NoStructures);
    }
    labels.check_aligned(vol).map_err(|_| RenderError::Misaligned)?;
    let present = labels.structure_ids();
    if let Some(&bad) = ids.iter().find(|&&id| id != 0 && !present.contains(&id)) {
        return Err(RenderError::UnknownStructure(bad));
    }
    let mut keep = vec![false; u16::MAX as usize + 1];
    for &id in ids {
        keep[id as usize] = true;
    }
    let data = vol
        .data()
        .iter()
        .zip(labels.labels())
        .map(|(&v, &l)| if keep[l as usize] { v } else { 0.0 })
        .collect();
    Ok(Volume::from_parts_unchecked(*vol.geometry(), data))
}

/// Renders only the listed structures.
pub fn render_masked(
    vol: &Volume,
    labels: &LabelMap,
    ids: &[u16],
    camera: &CameraMatrix,
    meta: &IntrinsicMeta,
    q: &QuadratureSpec,
) -> Result<DetectorImage, RenderError> {
    let masked = mask_volume(vol, labels, ids)?;
    render_drr(&masked, camera, meta, q)
}

/// Adjoint of [`render_rays`]: accumulates `Σ_r upstream[r] · ∂I_r/∂V` into
/// `grad`, restricted to samples that can touch voxels inside `region`
/// (inclusive voxel index bounds). Accumulation order is fixed.
pub(crate) fn render_rays_adjoint(
    geometry: &GridGeometry,
    rays: &[Ray],
    q: &QuadratureSpec,
    upstream: &[f64],
    region: ([usize; 3], [usize; 3]),
    grad: &mut [f64],
) {
    assert_eq!(rays.len(), upstream.len());
    assert_eq!(grad.len(), geometry.len());
    let bx = IndexBox::around_voxels(region.0, region.1);
    for (ray, &g) in rays.iter().zip(upstream) {
        if g == 0.0 {
            continue;
        }
        let Some(plan) = RayPlan::new(geometry, ray, q) else {
            continue;
        };
        let coef = g * plan.weight;
        for m in plan.node_range(&bx) {
            if let Some(stencil) = trilinear_stencil(&geometry.shape, &plan.node(m)) {
                for (idx, w) in stencil {
                    if let Some(idx) = idx {
                        grad[idx] += coef * w;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraPose;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(n: usize, spacing: f64) -> Volume {
        let g = GridGeometry::centered([n, n, n], spacing).unwrap();
        Volume::new(g, vec![1.0; g.len()]).unwrap()
    }

    /// Chord length of a segment through an axis-aligned box (slab method).
    fn chord(lo: Vector3<f64>, hi: Vector3<f64>, s: Vector3<f64>, p: Vector3<f64>) -> f64 {
        let d = p - s;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for a in 0..3 {
            if d[a] == 0.0 {
                if s[a] < lo[a] || s[a] > hi[a] {
                    return 0.0;
                }
                continue;
            }
            let ta = (lo[a] - s[a]) / d[a];
            let tb = (hi[a] - s[a]) / d[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        (t1 - t0).max(0.0) * d.norm()
    }

    fn camera(n: usize) -> (CameraMatrix, IntrinsicMeta) {
        let meta = IntrinsicMeta::new(1500.0, [0.0, 0.0], [2.0, 2.0], [n, n]).unwrap();
        let pose = CameraPose::look_at(&Vector3::new(0.0, -1000.0, 0.0), &Vector3::zeros(), &Vector3::z())
            .unwrap();
        (CameraMatrix::from_meta(&meta, pose).unwrap(), meta)
    }

    fn sphere(n: usize, spacing: f64, radius: f64) -> Volume {
        let g = GridGeometry::centered([n, n, n], spacing).unwrap();
        let data = (0..g.len())
            .map(|i| {
                let r = g.center(i).norm();
                // Smooth radial profile.
                if r < radius {
                    0.02 * (1.0 - (r / radius).powi(2))
                } else {
                    0.0
                }
            })
            .collect();
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn quadrature_validation() {
        assert!(QuadratureSpec::new(1).is_err());
        assert_eq!(QuadratureSpec::new(2).unwrap().sample_count, 2);
        let g = GridGeometry::centered([10, 30, 20], 1.0).unwrap();
        assert_eq!(QuadratureSpec::for_grid(&g).sample_count, 60);
    }

    #[test]
    fn empty_volume_renders_zero() {
        let g = GridGeometry::centered([8, 8, 8], 4.0).unwrap();
        let vol = Volume::zeros(g);
        let (cam, meta) = camera(16);
        let img = render_drr(&vol, &cam, &meta, &QuadratureSpec::new(64).unwrap()).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 0.0));
        let ray = Ray::new(Vector3::new(0.0, -100.0, 0.0), Vector3::new(0.0, 100.0, 0.0)).unwrap();
        assert_eq!(render_ray(&vol, &ray, &QuadratureSpec::new(16).unwrap()), 0.0);
    }

    #[test]
    fn axis_aligned_chord_through_unit_cube() {
        let vol = cube(32, 2.0);
        let q = QuadratureSpec::new(512).unwrap();
        let ray = Ray::new(Vector3::new(0.3, -500.0, -0.7), Vector3::new(0.3, 800.0, -0.7)).unwrap();
        let value = render_ray(&vol, &ray, &q);
        assert!((value - 64.0).abs() / 64.0 < 2.0 / 512.0, "{value}");
    }

    #[test]
    fn oblique_chords_match_ray_box_intersection() {
        let vol = cube(32, 2.0);
        let q = QuadratureSpec::new(512).unwrap();
        let half = 32.0;
        let (lo, hi) = (Vector3::repeat(-half), Vector3::repeat(half));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            // Enter and leave through opposite faces away from edges.
            let axis = rng.gen_range(0..3);
            let mut s = Vector3::new(rng.gen_range(-26.0..26.0), rng.gen_range(-26.0..26.0), rng.gen_range(-26.0..26.0));
            let mut p = Vector3::new(rng.gen_range(-26.0..26.0), rng.gen_range(-26.0..26.0), rng.gen_range(-26.0..26.0));
            s[axis] = -half;
            p[axis] = half;
            let d = p - s;
            let ray = Ray::new(s - d * 3.0, p + d * 2.0).unwrap();
            let expected = chord(lo, hi, ray.source, ray.target);
            let value = render_ray(&vol, &ray, &q);
            assert!((value - expected).abs() / expected < 2.0 / 512.0, "{value} vs {expected}");
        }
    }

    #[test]
    fn drr_is_linear_in_the_volume() {
        let (cam, meta) = camera(24);
        let q = QuadratureSpec::new(96).unwrap();
        let a = sphere(20, 4.0, 30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Volume::new(*a.geometry(), (0..a.data().len()).map(|_| rng.gen_range(0.0..0.01)).collect()).unwrap();
        let combo = a.linear_combination(2.5, &b, 0.75).unwrap();
        let ia = render_drr(&a, &cam, &meta, &q).unwrap();
        let ib = render_drr(&b, &cam, &meta, &q).unwrap();
        let ic = render_drr(&combo, &cam, &meta, &q).unwrap();
        for ((x, y), z) in ia.pixels().iter().zip(ib.pixels()).zip(ic.pixels()) {
            assert_abs_diff_eq!(2.5 * x + 0.75 * y, *z, epsilon = 1e-9);
        }
        let doubled = a.linear_combination(2.0, &a, 0.0).unwrap();
        let id = render_drr(&doubled, &cam, &meta, &q).unwrap();
        for (x, y) in ia.pixels().iter().zip(id.pixels()) {
            assert_abs_diff_eq!(2.0 * x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn centered_sphere_renders_radially_symmetric() {
        let (cam, meta) = camera(32);
        let vol = sphere(33, 2.0, 24.0);
        let img = render_drr(&vol, &cam, &meta, &QuadratureSpec::new(128).unwrap()).unwrap();
        let n = 32;
        let peak = img.pixels().iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.0);
        // The principal point is the image center: compare pixels mirrored
        // through it.
        for i in 0..n {
            for j in 0..n {
                let v = img.get(i, j);
                for (a, b) in [(n - 1 - i, j), (i, n - 1 - j), (j, i)] {
                    assert!((v - img.get(a, b)).abs() <= 1e-3 * peak, "{i},{j}");
                }
            }
        }
    }

    #[test]
    fn masked_rendering_is_additive() {
        let (cam, meta) = camera(20);
        let q = QuadratureSpec::new(80).unwrap();
        let vol = sphere(16, 5.0, 35.0);
        let g = *vol.geometry();
        let labels: Vec<u16> = (0..g.len())
            .map(|i| {
                let c = g.center(i);
                if c.x < 0.0 { 1 } else if c.z > 10.0 { 2 } else { 0 }
            })
            .collect();
        let lm = LabelMap::new(g, labels).unwrap();
        let full = render_drr(&vol, &cam, &meta, &q).unwrap();
        let all = render_masked(&vol, &lm, &[0, 1, 2], &cam, &meta, &q).unwrap();
        assert_eq!(full, all);
        let one = render_masked(&vol, &lm, &[1], &cam, &meta, &q).unwrap();
        let rest = render_masked(&vol, &lm, &[0, 2], &cam, &meta, &q).unwrap();
        for ((a, b), c) in one.pixels().iter().zip(rest.pixels()).zip(full.pixels()) {
            assert_abs_diff_eq!(a + b, *c, epsilon = 1e-9);
        }
        let background_only = LabelMap::new(g, vec![0; g.len()]).unwrap();
        let masked_out = render_masked(&vol, &lm, &[2], &cam, &meta, &q).unwrap();
        assert!(masked_out.pixels().iter().any(|&p| p > 0.0));
        assert!(matches!(
            render_masked(&vol, &background_only, &[1], &cam, &meta, &q),
            Err(RenderError::UnknownStructure(1))
        ));
        assert!(matches!(
            render_masked(&vol, &lm, &[], &cam, &meta, &q),
            Err(RenderError::NoStructures)
        ));
        // Masking out every voxel leaves nothing to render.
        let zeroed = LabelMap::new(g, vec![1; g.len()]).unwrap();
        let img = render_masked(&vol, &zeroed, &[0], &cam, &meta, &q).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn skipping_empty_space_is_bit_identical() {
        let vol = sphere(24, 3.0, 20.0);
        let g = *vol.geometry();
        let q = QuadratureSpec::new(200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let s = Vector3::new(rng.gen_range(-80.0..80.0), -400.0, rng.gen_range(-80.0..80.0));
            let p = Vector3::new(rng.gen_range(-80.0..80.0), 400.0, rng.gen_range(-80.0..80.0));
            let ray = Ray::new(s, p).unwrap();
            let fast = render_ray(&vol, &ray, &q);
            let slow = match RayPlan::new(&g, &ray, &q) {
                None => 0.0,
                Some(plan) => {
                    let mut sum = 0.0;
                    for m in 0..q.sample_count {
                        sum += sample_continuous(vol.data(), &g.shape, &plan.node(m));
                    }
                    plan.weight * sum
                }
            };
            assert_eq!(fast.to_bits(), slow.to_bits());
        }
    }

    #[test]
    fn translation_equivariance() {
        let (cam, meta) = camera(24);
        let q = QuadratureSpec::new(100).unwrap();
        let vol = sphere(20, 4.0, 30.0);
        let g = *vol.geometry();
        let shifted_geometry = GridGeometry::new(g.shape, g.spacing, g.origin + Vector3::new(4.0, 0.0, 0.0)).unwrap();
        let shifted = Volume::new(shifted_geometry, vol.data().to_vec()).unwrap();
        let pose = cam.pose();
        // Moving the world content by +d is undone by t' = t − R d.
        let moved = CameraPose::new(pose.rotation, pose.translation - pose.rotation * Vector3::new(4.0, 0.0, 0.0)).unwrap();
        let cam2 = CameraMatrix::from_meta(&meta, moved).unwrap();
        let a = render_drr(&vol, &cam, &meta, &q).unwrap();
        let b = render_drr(&shifted, &cam2, &meta, &q).unwrap();
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn quadrature_error_decays_at_least_first_order() {
        let vol = sphere(24, 3.0, 30.0);
        let ray = Ray::new(Vector3::new(3.3, -300.0, 1.7), Vector3::new(-2.1, 300.0, 4.9)).unwrap();
        let reference = render_ray(&vol, &ray, &QuadratureSpec::new(4096).unwrap());
        let errors: Vec<f64> = [16, 32, 64, 128]
            .iter()
            .map(|&m| (render_ray(&vol, &ray, &QuadratureSpec::new(m).unwrap()) - reference).abs())
            .collect();
        for w in errors.windows(2) {
            assert!(w[1] <= 0.75 * w[0] + 1e-12, "{errors:?}");
        }
        assert!(errors[3] < errors[0] / 8.0, "{errors:?}");
    }

    #[test]
    fn jitter_is_deterministic_and_unbiased() {
        let vol = cube(16, 2.0);
        let q = QuadratureSpec {
            sample_count: 256,
            jitter: true,
        };
        let ray = Ray::new(Vector3::new(0.5, -100.0, 0.2), Vector3::new(-0.5, 100.0, 0.1)).unwrap();
        let a = render_ray(&vol, &ray, &q);
        assert_eq!(a, render_ray(&vol, &ray, &q));
        assert!((a - 32.0).abs() / 32.0 < 0.01, "{a}");
    }

    #[test]
    fn adjoint_matches_forward_inner_product() {
        let vol = sphere(12, 6.0, 30.0);
        let g = *vol.geometry();
        let (cam, meta) = camera(10);
        let q = QuadratureSpec::new(40).unwrap();
        let rays = pixel_rays(&cam, &meta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let upstream: Vec<f64> = (0..rays.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut grad = vec![0.0; g.len()];
        render_rays_adjoint(&g, &rays, &q, &upstream, ([0, 0, 0], [11, 11, 11]), &mut grad);
        let forward = render_rays(&Volume::new(g, probe.clone()).unwrap(), &rays, &q);
        let lhs: f64 = forward.iter().zip(&upstream).map(|(a, b)| a * b).sum();
        let rhs: f64 = grad.iter().zip(&probe).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9 * lhs.abs().max(1.0));
    }
}
