//! Synthetic articulated phantoms with known polyrigid deformations.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{CameraMatrix, CameraPose, GeometryError, IntrinsicMeta};
use crate::grid::{GridError, GridGeometry, LabelMap, Volume};
use crate::liealg::{RigidTransform, Twist, TwistMatrix};
use crate::registration::{RegistrationProblem, View};
use crate::render::{render_drr, DetectorImage, QuadratureSpec, RenderError};
use crate::similarity::PatchSpec;
use crate::warpfield::{build_weights, resample, warp_labels, PolyrigidField, WarpError, WeightMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("invalid phantom: {0}")]
    InvalidSpec(String),
    #[error("structures {0} and {1} overlap or touch")]
    Overlap(u16, u16),
    #[error("structure {0} covers no voxel center")]
    EmptyStructure(u16),
    #[error("invalid view set: {0}")]
    InvalidViews(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

/// Solid shape in its local frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Box { half_extents: Vector3<f64> },
    /// Segment along local z from `-half_length` to `half_length`, swept by
    /// a sphere of `radius`.
    Capsule { half_length: f64, radius: f64 },
    Ellipsoid { radii: Vector3<f64> },
}

impl Primitive {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        match *self {
            Primitive::Box { half_extents } => (0..3).all(|a| p[a].abs() <= half_extents[a]),
            Primitive::Capsule { half_length, radius } => {
                let z = p.z.clamp(-half_length, half_length);
                (p - Vector3::new(0.0, 0.0, z)).norm() <= radius
            }
            Primitive::Ellipsoid { radii } => p.component_div(&radii).norm_squared() <= 1.0,
        }
    }

    fn validate(&self) -> bool {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            Primitive::Box { half_extents } => half_extents.iter().all(|&v| positive(v)),
            Primitive::Capsule { half_length, radius } => half_length.is_finite() && half_length >= 0.0 && positive(radius),
            Primitive::Ellipsoid { radii } => radii.iter().all(|&v| positive(v)),
        }
    }
}

/// One labeled structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureSpec {
    pub id: u16,
    pub primitive: Primitive,
    /// Local → world placement.
    pub pose: RigidTransform,
    pub attenuation: f64,
    /// Relative amplitude of the seeded internal texture (0 = uniform).
    pub texture: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: f64,
    pub structures: Vec<StructureSpec>,
    pub background: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn geometry(&self) -> Result<GridGeometry, PhantomError> {
        Ok(GridGeometry::centered(self.shape, self.spacing)?)
    }

    fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if !(self.background.is_finite() && self.background >= 0.0) {
            return bad(format!("background attenuation must be non-negative, got {}", self.background));
        }
        let mut ids: Vec<u16> = self.structures.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("structure ids must be unique".into());
        }
        for s in &self.structures {
            if s.id == 0 {
                return bad("structure id 0 is reserved for background".into());
            }
            if !(s.attenuation.is_finite() && s.attenuation >= 0.0) {
                return bad(format!("structure {}: attenuation must be non-negative", s.id));
            }
            if !(s.texture.is_finite() && (0.0..1.0).contains(&s.texture)) {
                return bad(format!("structure {}: texture must lie in [0, 1)", s.id));
            }
            if !s.primitive.validate() {
                return bad(format!("structure {}: sizes must be positive", s.id));
            }
        }
        Ok(())
    }
}

/// Sum of three plane waves with wavelengths between 8 and 16 mm,
/// normalized to `[-1, 1]`.
struct Texture {
    waves: [(Vector3<f64>, f64); 3],
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut wave = || {
            let dir = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            let k = std::f64::consts::TAU / rng.gen_range(8.0..16.0);
            (dir * k, rng.gen_range(0.0..std::f64::consts::TAU))
        };
        Self {
            waves: [wave(), wave(), wave()],
        }
    }

    fn at(&self, p: &Vector3<f64>) -> f64 {
        self.waves.iter().map(|(k, phase)| (k.dot(p) + phase).cos()).sum::<f64>() / 3.0
    }
}

/// Rasterizes `spec` at voxel centers.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap), PhantomError> {
    spec.validate()?;
    let g = spec.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let textures: Vec<Texture> = spec.structures.iter().map(|_| Texture::new(&mut rng)).collect();
    let inverse: Vec<RigidTransform> = spec.structures.iter().map(|s| s.pose.inverse()).collect();
    let mut labels = vec![0u16; g.len()];
    let mut data = vec![spec.background; g.len()];
    for i in 0..g.len() {
        let x = g.center(i);
        for (s, (st, inv)) in spec.structures.iter().zip(&inverse).enumerate() {
            let local = inv.transform_point(&x);
            if !st.primitive.contains(&local) {
                continue;
            }
            if labels[i] != 0 {
                return Err(PhantomError::Overlap(labels[i], st.id));
            }
            labels[i] = st.id;
            data[i] = st.attenuation * (1.0 + st.texture * textures[s].at(&local));
        }
    }
    check_separation(&g, &labels)?;
    for st in &spec.structures {
        if !labels.contains(&st.id) {
            return Err(PhantomError::EmptyStructure(st.id));
        }
    }
    Ok((Volume::new(g, data)?, LabelMap::new(g, labels)?))
}

/// Requires a background voxel between any two structures (26-neighborhood).
fn check_separation(g: &GridGeometry, labels: &[u16]) -> Result<(), PhantomError> {
    let [nx, ny, nz] = g.shape;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let a = labels[g.index(x, y, z)];
                if a == 0 {
                    continue;
                }
                for dz in 0..=1usize {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            // Visit each unordered pair once.
                            if dz == 0 && (dy < 0 || (dy == 0 && dx <= 0)) {
                                continue;
                            }
                            let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z + dz);
                            if xx < 0 || yy < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz {
                                continue;
                            }
                            let b = labels[g.index(xx as usize, yy as usize, zz)];
                            if b != 0 && b != a {
                                return Err(PhantomError::Overlap(a.min(b), a.max(b)));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Committed phantom layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Pelvis-like anchor box (id 1) above two capsules (ids 2, 3).
    FemurPair,
    /// Skull ellipsoid (id 1) above three vertebra boxes (ids 2–4).
    Neck,
    /// One large ellipsoid (id 1) and one small box (id 2).
    Unequal,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::FemurPair, Preset::Neck, Preset::Unequal];

    /// Edge length (mm) of the cubic region every layout fits in.
    pub const FIELD_OF_VIEW: f64 = 128.0;

    pub fn name(&self) -> &'static str {
        match self {
            Preset::FemurPair => "femur-pair",
            Preset::Neck => "neck",
            Preset::Unequal => "unequal",
        }
    }

    /// Id of the structure used to register cameras.
    pub fn anchor_id(&self) -> u16 {
        1
    }

    /// The preset on a cubic grid of `n` voxels at `spacing` mm. The layout
    /// fits in a 128 mm field of view.
    pub fn spec(&self, n: usize, spacing: f64, seed: u64) -> PhantomSpec {
        let place = |t: [f64; 3]| RigidTransform::from_translation(Vector3::new(t[0], t[1], t[2]));
        let tilted = |t: [f64; 3], about_y: f64| {
            let r = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), about_y.to_radians());
            RigidTransform::new(*r.matrix(), Vector3::new(t[0], t[1], t[2])).expect("rotation is orthonormal")
        };
        let structure = |id, primitive, pose, attenuation| StructureSpec {
            id,
            primitive,
            pose,
            attenuation,
            texture: 0.3,
        };
        let boxed = |h: [f64; 3]| Primitive::Box {
            half_extents: Vector3::new(h[0], h[1], h[2]),
        };
        let structures = match self {
            Preset::FemurPair => {
                let femur = Primitive::Capsule {
                    half_length: 12.0,
                    radius: 11.0,
                };
                vec![
                    structure(1, boxed([45.0, 15.0, 7.0]), place([0.0, 0.0, 44.0]), 0.02),
                    structure(2, femur, tilted([-32.0, 0.0, -30.0], 8.0), 0.03),
                    structure(3, femur, tilted([32.0, 0.0, -30.0], -8.0), 0.03),
                ]
            }
            Preset::Neck => vec![
                structure(
                    1,
                    Primitive::Ellipsoid {
                        radii: Vector3::new(40.0, 35.0, 25.0),
                    },
                    place([0.0, 0.0, 36.0]),
                    0.02,
                ),
                structure(2, boxed([14.0, 12.0, 6.0]), place([0.0, 0.0, -1.0]), 0.03),
                structure(3, boxed([14.0, 12.0, 6.0]), place([0.0, 0.0, -21.0]), 0.03),
                structure(4, boxed([14.0, 12.0, 6.0]), place([0.0, 0.0, -41.0]), 0.03),
            ],
            Preset::Unequal => vec![
                structure(
                    1,
                    Primitive::Ellipsoid {
                        radii: Vector3::new(28.0, 24.0, 34.0),
                    },
                    place([-18.0, 0.0, 0.0]),
                    0.02,
                ),
                structure(2, boxed([7.0, 6.0, 9.0]), place([30.0, 0.0, 8.0]), 0.03),
            ],
        };
        PhantomSpec {
            shape: [n, n, n],
            spacing,
            structures,
            background: 0.0,
            seed,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = PhantomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PhantomError::UnknownPreset(s.to_string()))
    }
}

/// C-arm geometry of a generated case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitGeometry {
    /// Source-to-isocenter distance (mm).
    pub source_distance: f64,
    /// Source-to-detector distance (mm), the focal length.
    pub detector_distance: f64,
    pub detector_pixels: usize,
    pub pixel_spacing: f64,
}

impl Default for OrbitGeometry {
    fn default() -> Self {
        Self {
            source_distance: 1000.0,
            detector_distance: 1500.0,
            detector_pixels: 128,
            pixel_spacing: 2.0,
        }
    }
}

impl OrbitGeometry {
    pub fn meta(&self) -> Result<IntrinsicMeta, PhantomError> {
        Ok(IntrinsicMeta::new(
            self.detector_distance,
            [0.0, 0.0],
            [self.pixel_spacing, self.pixel_spacing],
            [self.detector_pixels, self.detector_pixels],
        )?)
    }

    /// Camera at `angle` degrees on the orbit around the world z axis. Angle
    /// 0 puts the source on the −y axis.
    pub fn camera_at(&self, angle: f64) -> Result<CameraMatrix, PhantomError> {
        let a = angle.to_radians();
        let source = Vector3::new(a.sin(), -a.cos(), 0.0) * self.source_distance;
        let pose = CameraPose::look_at(&source, &Vector3::zeros(), &Vector3::z())?;
        Ok(CameraMatrix::from_meta(&self.meta()?, pose)?)
    }
}

/// Orbit angles (degrees) of `n` views over `arc` degrees. A full circle
/// does not repeat its first view.
pub fn view_angles(n: usize, arc: f64) -> Result<Vec<f64>, PhantomError> {
    if n == 0 {
        return Err(PhantomError::InvalidViews("at least one view is required".into()));
    }
    if !(arc > 0.0 && arc <= 360.0) {
        return Err(PhantomError::InvalidViews(format!("arc must lie in (0, 360], got {arc}")));
    }
    Ok(match n {
        1 => vec![0.0],
        _ if arc >= 360.0 => (0..n).map(|i| arc * i as f64 / n as f64).collect(),
        _ => (0..n).map(|i| arc * i as f64 / (n - 1) as f64).collect(),
    })
}

/// A phantom, its true deformation and the X-rays of the deformed phantom.
#[derive(Debug, Clone)]
pub struct GroundTruthCase {
    pub moving: Volume,
    pub labels: LabelMap,
    pub twists: TwistMatrix,
    pub weight_mode: WeightMode,
    pub angles: Vec<f64>,
    pub cameras: Vec<CameraMatrix>,
    pub meta: IntrinsicMeta,
    pub images: Vec<DetectorImage>,
    /// `V ∘ Φ`, the volume the images were rendered from.
    pub fixed: Volume,
    /// Nearest-neighbor pull-back of the labels.
    pub fixed_labels: LabelMap,
    pub quadrature: QuadratureSpec,
}

/// Settings of [`make_case`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseSettings {
    pub views: usize,
    pub arc_degrees: f64,
    pub orbit: OrbitGeometry,
    pub weight_mode: WeightMode,
    /// Defaults to twice the largest grid dimension.
    pub quadrature: Option<QuadratureSpec>,
}

impl CaseSettings {
    pub fn new(views: usize, arc_degrees: f64) -> Self {
        Self {
            views,
            arc_degrees,
            orbit: OrbitGeometry::default(),
            weight_mode: WeightMode::Mass,
            quadrature: None,
        }
    }
}

pub fn make_case(spec: &PhantomSpec, twists: &TwistMatrix, settings: &CaseSettings) -> Result<GroundTruthCase, PhantomError> {
    let angles = view_angles(settings.views, settings.arc_degrees)?;
    let (moving, labels) = make_phantom(spec)?;
    let weights = build_weights(&labels, &moving, settings.weight_mode)?;
    let field = PolyrigidField::new(twists.clone(), &weights)?;
    let coords = field.apply_to_grid();
    let fixed = resample(&moving, &coords);
    let fixed_labels = warp_labels(&labels, &coords)?;
    let quadrature = settings.quadrature.unwrap_or_else(|| QuadratureSpec::for_grid(moving.geometry()));
    let meta = settings.orbit.meta()?;
    let cameras = angles
        .iter()
        .map(|&a| settings.orbit.camera_at(a))
        .collect::<Result<Vec<_>, _>>()?;
    let images = cameras
        .iter()
        .map(|c| render_drr(&fixed, c, &meta, &quadrature))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GroundTruthCase {
        moving,
        labels,
        twists: twists.clone(),
        weight_mode: settings.weight_mode,
        angles,
        cameras,
        meta,
        images,
        fixed,
        fixed_labels,
        quadrature,
    })
}

impl GroundTruthCase {
    /// The registration problem of recovering this case's twists with known
    /// cameras.
    pub fn problem(&self, weight_mode: WeightMode, patch: PatchSpec) -> RegistrationProblem {
        RegistrationProblem {
            moving: self.moving.clone(),
            labels: self.labels.clone(),
            weight_mode,
            views: self
                .images
                .iter()
                .zip(&self.cameras)
                .map(|(image, camera)| View {
                    image: image.clone(),
                    camera: *camera,
                    meta: self.meta,
                })
                .collect(),
            quadrature: self.quadrature,
            patch,
        }
    }
}

/// A twist with uniformly random rotation axis and translation direction,
/// angle in `[0, max_angle]` and translation length in `[0, max_translation]`.
pub fn random_twist(rng: &mut impl Rng, max_angle: f64, max_translation: f64) -> Twist {
    let axis = random_unit(rng);
    let angle = rng.gen_range(0.0..=max_angle);
    let dir = random_unit(rng);
    let length = rng.gen_range(0.0..=max_translation);
    Twist::new(axis * angle, dir * length)
}

/// Uniform direction by rejection sampling in the unit ball.
fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Ground-truth twists: the anchor stays fixed, every other structure gets
/// a random bounded twist.
pub fn random_case_twists(
    rng: &mut impl Rng,
    ids: &[u16],
    anchor_id: u16,
    max_angle: f64,
    max_translation: f64,
) -> TwistMatrix {
    TwistMatrix::new(
        ids.iter()
            .map(|&id| {
                if id == anchor_id {
                    Twist::zero()
                } else {
                    random_twist(rng, max_angle, max_translation)
                }
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::structure_masses;

    #[test]
    fn centered_box_voxel_count() {
        let spec = PhantomSpec {
            shape: [40, 40, 40],
            spacing: 2.0,
            structures: vec![StructureSpec {
                id: 1,
                primitive: Primitive::Box {
                    half_extents: Vector3::new(10.0, 6.0, 15.0),
                },
                pose: RigidTransform::identity(),
                attenuation: 0.02,
                texture: 0.0,
            }],
            background: 0.0,
            seed: 0,
        };
        let (vol, labels) = make_phantom(&spec).unwrap();
        let per_axis = [20.0 / 2.0, 12.0 / 2.0, 30.0 / 2.0];
        let count = labels.count(1) as f64;
        let lo: f64 = per_axis.iter().map(|n| n - 1.0).product();
        let hi: f64 = per_axis.iter().map(|n| n + 1.0).product();
        assert!(count >= lo && count <= hi, "{count}");
        assert!(vol.data().iter().all(|&v| v == 0.0 || v == 0.02));
    }

    #[test]
    fn empty_structure_list_gives_background() {
        let spec = PhantomSpec {
            shape: [8, 8, 8],
            spacing: 1.0,
            structures: vec![],
            background: 0.001,
            seed: 0,
        };
        let (vol, labels) = make_phantom(&spec).unwrap();
        assert!(vol.data().iter().all(|&v| v == 0.001));
        assert!(labels.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn overlapping_structures_are_rejected() {
        let ball = |id, x: f64| StructureSpec {
            id,
            primitive: Primitive::Ellipsoid {
                radii: Vector3::repeat(5.0),
            },
            pose: RigidTransform::from_translation(Vector3::new(x, 0.0, 0.0)),
            attenuation: 0.01,
            texture: 0.2,
        };
        let mut spec = PhantomSpec {
            shape: [32, 16, 16],
            spacing: 1.0,
            structures: vec![ball(1, -6.0), ball(2, 3.0)],
            background: 0.0,
            seed: 0,
        };
        assert!(matches!(make_phantom(&spec), Err(PhantomError::Overlap(1, 2))));
        // Touching without a background voxel in between is also rejected.
        spec.structures[1] = ball(2, 4.0);
        assert!(matches!(make_phantom(&spec), Err(PhantomError::Overlap(1, 2))));
        spec.structures[1] = ball(2, 7.0);
        assert!(make_phantom(&spec).is_ok());
    }

    #[test]
    fn presets_are_valid_and_deterministic() {
        for preset in Preset::ALL {
            for (n, s) in [(64, 2.0), (32, 4.0)] {
                let spec = preset.spec(n, s, 7);
                let (a, la) = make_phantom(&spec).unwrap();
                let (b, lb) = make_phantom(&spec).unwrap();
                assert_eq!(a, b);
                assert_eq!(la, lb);
                assert_eq!(la.structure_ids().len(), spec.structures.len());
                assert!(a.data().iter().all(|&v| v >= 0.0));
            }
            assert_eq!(preset.name().parse::<Preset>().unwrap(), preset);
        }
        assert!("pelvis".parse::<Preset>().is_err());
    }

    #[test]
    fn femur_capsules_have_equal_mass() {
        let (_, labels) = make_phantom(&Preset::FemurPair.spec(64, 2.0, 0)).unwrap();
        let m = structure_masses(&labels).unwrap();
        let pair = m[1] / (m[1] + m[2]);
        assert!((pair - 0.5).abs() < 0.02 * 0.5, "{pair}");
    }

    #[test]
    fn view_angle_layouts() {
        assert_eq!(view_angles(2, 30.0).unwrap(), vec![0.0, 30.0]);
        assert_eq!(view_angles(3, 180.0).unwrap(), vec![0.0, 90.0, 180.0]);
        assert_eq!(view_angles(4, 360.0).unwrap(), vec![0.0, 90.0, 180.0, 270.0]);
        assert!(view_angles(0, 30.0).is_err());
        assert!(view_angles(2, 0.0).is_err());
        assert!(view_angles(2, 400.0).is_err());
    }

    #[test]
    fn orbit_cameras_are_spaced_by_the_arc() {
        let orbit = OrbitGeometry::default();
        let a = orbit.camera_at(0.0).unwrap().source();
        let b = orbit.camera_at(30.0).unwrap().source();
        assert!((a.norm() - 1000.0).abs() < 1e-9);
        let angle = (a.dot(&b) / (a.norm() * b.norm())).acos().to_degrees();
        assert!((angle - 30.0).abs() < 1e-9);
    }

    #[test]
    fn zero_twists_render_the_undeformed_phantom() {
        let spec = Preset::FemurPair.spec(24, 5.0, 1);
        let mut settings = CaseSettings::new(2, 30.0);
        settings.orbit.detector_pixels = 32;
        settings.orbit.pixel_spacing = 8.0;
        let case = make_case(&spec, &TwistMatrix::zeros(3), &settings).unwrap();
        assert_eq!(case.fixed, case.moving);
        for (img, cam) in case.images.iter().zip(&case.cameras) {
            let direct = render_drr(&case.moving, cam, &case.meta, &case.quadrature).unwrap();
            for (x, y) in img.pixels().iter().zip(direct.pixels()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert_eq!(case.fixed_labels, case.labels);
    }

    #[test]
    fn random_twists_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = random_case_twists(&mut rng, &[1, 2, 3], 1, 0.2, 15.0);
        assert_eq!(t[0], Twist::zero());
        for v in &t.rows()[1..] {
            assert!(v.angle() <= 0.2 && v.u.norm() <= 15.0 + 1e-12);
        }
    }
}
