//! Voxel grids: volumes, label maps, trilinear sampling and exact Euclidean
//! distance transforms.
//!
//! Voxel `(i, j, k)` has its center at `origin + (i·sx, j·sy, k·sz)` and is
//! stored at linear index `i + nx·(j + ny·k)` (x fastest).

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid volume data: {0}")]
    InvalidData(String),
    #[error("structure {0} is empty")]
    EmptyStructure(u16),
    #[error("label map contains no structures")]
    NoStructures,
    #[error("grid shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
}

/// Shape, spacing (mm/voxel) and world position of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub shape: [usize; 3],
    pub spacing: Vector3<f64>,
    pub origin: Vector3<f64>,
}

impl GridGeometry {
    pub fn new(
        shape: [usize; 3],
        spacing: Vector3<f64>,
        origin: Vector3<f64>,
    ) -> Result<Self, GridError> {
        let g = Self {
            shape,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    /// A grid of the given shape and isotropic spacing centered on the world
    /// origin.
    pub fn centered(shape: [usize; 3], spacing: f64) -> Result<Self, GridError> {
        let spacing = Vector3::repeat(spacing);
        let origin = Vector3::new(
            -0.5 * (shape[0] as f64 - 1.0) * spacing.x,
            -0.5 * (shape[1] as f64 - 1.0) * spacing.y,
            -0.5 * (shape[2] as f64 - 1.0) * spacing.z,
        );
        Self::new(shape, spacing, origin)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.shape.contains(&0) {
            return Err(GridError::InvalidGeometry(format!(
                "shape must be positive, got {:?}",
                self.shape
            )));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(GridError::InvalidGeometry(format!(
                "spacing must be positive, got {:?}",
                self.spacing.as_slice()
            )));
        }
        if !self.origin.iter().all(|o| o.is_finite()) {
            return Err(GridError::InvalidGeometry("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.shape;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.product()
    }

    #[inline]
    pub fn world_to_voxel(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.origin).component_div(&self.spacing)
    }

    #[inline]
    pub fn voxel_to_world(&self, c: &Vector3<f64>) -> Vector3<f64> {
        self.origin + c.component_mul(&self.spacing)
    }

    /// World coordinates of the center of voxel `idx`.
    #[inline]
    pub fn center(&self, idx: usize) -> Vector3<f64> {
        let [i, j, k] = self.coords(idx);
        self.voxel_to_world(&Vector3::new(i as f64, j as f64, k as f64))
    }

    /// All voxel centers in storage order.
    pub fn centers(&self) -> Vec<Vector3<f64>> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    /// World-space box outside of which trilinear samples vanish: one spacing
    /// beyond the outermost voxel centers.
    pub fn support_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let last = Vector3::new(
            self.shape[0] as f64,
            self.shape[1] as f64,
            self.shape[2] as f64,
        );
        (
            self.origin - self.spacing,
            self.origin + last.component_mul(&self.spacing),
        )
    }
}

/// A scalar volume of linear attenuation coefficients (1/mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: GridGeometry,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(geometry: GridGeometry, data: Vec<f64>) -> Result<Self, GridError> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(GridError::InvalidData(format!(
                "expected {} values, got {}",
                geometry.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(GridError::InvalidData(format!(
                "value {} at voxel {i} is not a finite nonnegative attenuation",
                data[i]
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        Self {
            data: vec![0.0; geometry.len()],
            geometry,
        }
    }

    /// Constructor for data already known to satisfy the invariants.
    pub(crate) fn from_parts_unchecked(geometry: GridGeometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(geometry.len(), data.len());
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Elementwise `a·self + b·other`; both coefficients must be nonnegative.
    pub fn linear_combination(&self, a: f64, other: &Volume, b: f64) -> Result<Volume, GridError> {
        if self.geometry.shape != other.geometry.shape {
            return Err(GridError::ShapeMismatch(
                self.geometry.shape,
                other.geometry.shape,
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Volume::new(self.geometry, data)
    }

    /// Trilinear sample at a world point; see [`trilinear_sample`].
    #[inline]
    pub fn sample(&self, p: &Vector3<f64>) -> f64 {
        trilinear_sample(self, p)
    }

    /// Bounding box, in voxel indices, of the nonzero voxels.
    pub fn nonzero_bounds(&self) -> Option<([usize; 3], [usize; 3])> {
        bounds_where(&self.geometry, |i| self.data[i] != 0.0)
    }
}

pub(crate) fn bounds_where(
    geometry: &GridGeometry,
    pred: impl Fn(usize) -> bool,
) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for idx in 0..geometry.len() {
        if pred(idx) {
            any = true;
            let c = geometry.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    any.then_some((lo, hi))
}

/// Structure labels aligned with a volume; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: GridGeometry,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(geometry: GridGeometry, labels: Vec<u16>) -> Result<Self, GridError> {
        geometry.validate()?;
        if labels.len() != geometry.len() {
            return Err(GridError::InvalidData(format!(
                "expected {} labels, got {}",
                geometry.len(),
                labels.len()
            )));
        }
        Ok(Self { geometry, labels })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Distinct nonzero ids in ascending order. Structure index `k` in every
    /// K-sized array refers to the k-th entry of this list.
    pub fn structure_ids(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&id| seen[id as usize]).collect()
    }

    pub fn mask(&self, id: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }

    pub fn count(&self, id: u16) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }

    /// Checks that this map is aligned with `vol`.
    pub fn check_aligned(&self, vol: &Volume) -> Result<(), GridError> {
        if self.geometry != vol.geometry {
            return Err(GridError::ShapeMismatch(self.geometry.shape, vol.geometry.shape));
        }
        Ok(())
    }
}

/// Trilinear interpolation of the 8 voxel centers surrounding `p`.
///
/// Neighbors outside the grid contribute zero, so samples fade to 0 within
/// one spacing of the outermost centers and vanish beyond.
#[inline]
pub fn trilinear_sample(vol: &Volume, p: &Vector3<f64>) -> f64 {
    let g = &vol.geometry;
    sample_continuous(&vol.data, &g.shape, &g.world_to_voxel(p))
}

/// Trilinear interpolation at a continuous voxel index.
#[inline]
pub fn sample_continuous(data: &[f64], shape: &[usize; 3], c: &Vector3<f64>) -> f64 {
    let [nx, ny, nz] = *shape;
    if !(c.x > -1.0
        && c.y > -1.0
        && c.z > -1.0
        && c.x < nx as f64
        && c.y < ny as f64
        && c.z < nz as f64)
    {
        return 0.0;
    }
    let fx = c.x.floor();
    let fy = c.y.floor();
    let fz = c.z.floor();
    let (tx, ty, tz) = (c.x - fx, c.y - fy, c.z - fz);
    let (ix, iy, iz) = (fx as isize, fy as isize, fz as isize);
    let stride_y = nx;
    let stride_z = nx * ny;

    if ix >= 0
        && iy >= 0
        && iz >= 0
        && (ix as usize) + 1 < nx
        && (iy as usize) + 1 < ny
        && (iz as usize) + 1 < nz
    {
        let base = ix as usize + stride_y * iy as usize + stride_z * iz as usize;
        let c000 = data[base];
        let c100 = data[base + 1];
        let c010 = data[base + stride_y];
        let c110 = data[base + stride_y + 1];
        let c001 = data[base + stride_z];
        let c101 = data[base + stride_z + 1];
        let c011 = data[base + stride_z + stride_y];
        let c111 = data[base + stride_z + stride_y + 1];
        blend(
            [c000, c100, c010, c110, c001, c101, c011, c111],
            tx,
            ty,
            tz,
        )
    } else {
        let fetch = |i: isize, j: isize, k: isize| -> f64 {
            if i < 0 || j < 0 || k < 0 || i as usize >= nx || j as usize >= ny || k as usize >= nz {
                0.0
            } else {
                data[i as usize + stride_y * j as usize + stride_z * k as usize]
            }
        };
        blend(
            [
                fetch(ix, iy, iz),
                fetch(ix + 1, iy, iz),
                fetch(ix, iy + 1, iz),
                fetch(ix + 1, iy + 1, iz),
                fetch(ix, iy, iz + 1),
                fetch(ix + 1, iy, iz + 1),
                fetch(ix, iy + 1, iz + 1),
                fetch(ix + 1, iy + 1, iz + 1),
            ],
            tx,
            ty,
            tz,
        )
    }
}

#[inline]
fn blend(c: [f64; 8], tx: f64, ty: f64, tz: f64) -> f64 {
    let (sx, sy, sz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    let c00 = c[0] * sx + c[1] * tx;
    let c10 = c[2] * sx + c[3] * tx;
    let c01 = c[4] * sx + c[5] * tx;
    let c11 = c[6] * sx + c[7] * tx;
    let c0 = c00 * sy + c10 * ty;
    let c1 = c01 * sy + c11 * ty;
    c0 * sz + c1 * tz
}

/// The 8 corner indices and trilinear weights of a continuous voxel index.
/// Corners outside the grid are reported as `None`.
#[inline]
pub(crate) fn trilinear_stencil(
    shape: &[usize; 3],
    c: &Vector3<f64>,
) -> Option<[(Option<usize>, f64); 8]> {
    let [nx, ny, nz] = *shape;
    if !(c.x > -1.0
        && c.y > -1.0
        && c.z > -1.0
        && c.x < nx as f64
        && c.y < ny as f64
        && c.z < nz as f64)
    {
        return None;
    }
    let fx = c.x.floor();
    let fy = c.y.floor();
    let fz = c.z.floor();
    let (tx, ty, tz) = (c.x - fx, c.y - fy, c.z - fz);
    let (ix, iy, iz) = (fx as isize, fy as isize, fz as isize);
    let at = |i: isize, j: isize, k: isize| -> Option<usize> {
        (i >= 0 && j >= 0 && k >= 0 && (i as usize) < nx && (j as usize) < ny && (k as usize) < nz)
            .then(|| i as usize + nx * (j as usize + ny * k as usize))
    };
    let (sx, sy, sz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    Some([
        (at(ix, iy, iz), sx * sy * sz),
        (at(ix + 1, iy, iz), tx * sy * sz),
        (at(ix, iy + 1, iz), sx * ty * sz),
        (at(ix + 1, iy + 1, iz), tx * ty * sz),
        (at(ix, iy, iz + 1), sx * sy * tz),
        (at(ix + 1, iy, iz + 1), tx * sy * tz),
        (at(ix, iy + 1, iz + 1), sx * ty * tz),
        (at(ix + 1, iy + 1, iz + 1), tx * ty * tz),
    ])
}

/// Minimum Euclidean distance (mm) from each voxel center to a structure.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub id: u16,
    pub distances: Vec<f64>,
}

/// Exact Euclidean distance transform of a boolean mask under anisotropic
/// spacing: each entry is the distance from that voxel center to the nearest
/// `true` voxel center. Entries are `+∞` when the mask is empty.
///
/// Separable lower-envelope algorithm: one squared-distance parabola sweep
/// per axis.
pub fn euclidean_distance_transform(mask: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = shape;
    assert_eq!(mask.len(), nx * ny * nz, "mask length must match shape");
    let mut sq: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = shape[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        let starts: Vec<usize> = (0..nx * ny * nz)
            .filter(|&idx| {
                let c = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
                c[axis] == 0
            })
            .collect();
        let lines: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&start| {
                let line: Vec<f64> = (0..n).map(|t| sq[start + t * stride]).collect();
                let mut out = vec![0.0; n];
                lower_envelope_1d(&line, spacing[axis], &mut out);
                out
            })
            .collect();
        for (start, line) in starts.iter().zip(lines) {
            for (t, v) in line.into_iter().enumerate() {
                sq[start + t * stride] = v;
            }
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// One-dimensional squared distance transform `out[p] = min_q ((p−q)·h)² + f[q]`
/// over the finite entries of `f`.
fn lower_envelope_1d(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let mut vertices: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    let pos = |q: usize| q as f64 * h;
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        let fq = f[q] + pos(q) * pos(q);
        loop {
            match vertices.last() {
                None => {
                    vertices.push(q);
                    bounds.clear();
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&v) => {
                    let fv = f[v] + pos(v) * pos(v);
                    let s = (fq - fv) / (2.0 * (pos(q) - pos(v)));
                    if s <= *bounds.last().unwrap() {
                        vertices.pop();
                        bounds.pop();
                        continue;
                    }
                    vertices.push(q);
                    bounds.push(s);
                    break;
                }
            }
        }
    }
    if vertices.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while k + 1 < vertices.len() && bounds[k + 1] < x {
            k += 1;
        }
        let d = x - pos(vertices[k]);
        *o = d * d + f[vertices[k]];
    }
}

/// Distance field of structure `id`.
pub fn distance_transform(labels: &LabelMap, id: u16) -> Result<DistanceField, GridError> {
    let mask = labels.mask(id);
    if !mask.iter().any(|&m| m) {
        return Err(GridError::EmptyStructure(id));
    }
    let g = labels.geometry();
    Ok(DistanceField {
        id,
        distances: euclidean_distance_transform(
            &mask,
            g.shape,
            [g.spacing.x, g.spacing.y, g.spacing.z],
        ),
    })
}

/// Normalized structure masses under constant density, ordered as
/// [`LabelMap::structure_ids`].
pub fn structure_masses(labels: &LabelMap) -> Result<Vec<f64>, GridError> {
    let ids = labels.structure_ids();
    if ids.is_empty() {
        return Err(GridError::NoStructures);
    }
    let voxel_volume = labels.geometry().voxel_volume();
    let volumes: Vec<f64> = ids
        .iter()
        .map(|&id| labels.count(id) as f64 * voxel_volume)
        .collect();
    let total: f64 = volumes.iter().sum();
    Ok(volumes.into_iter().map(|v| v / total).collect())
}
