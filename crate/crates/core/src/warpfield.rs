//! Polyrigid deformation fields.
//!
//! Each structure k carries a twist `log T_k`. A point x receives the
//! convex blend `Σ_k w_k(x) log T_k`, which is exponentiated into an exact
//! rigid transform. Weights decay with the distance to each structure.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{
    distance_transform, sample_continuous, structure_masses, trilinear_stencil, GridError,
    GridGeometry, LabelMap, Volume,
};
use crate::liealg::{se3_exp, RigidTransform, Twist, TwistMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid weight mode: {0}")]
    InvalidMode(String),
    #[error("expected {expected} twists, got {got}")]
    TwistCount { expected: usize, got: usize },
    #[error("non-finite twist for structure {0}")]
    NonFiniteTwist(usize),
    #[error("field grid does not match the volume grid")]
    GridMismatch,
    #[error("jacobian statistics need at least 3 voxels per axis, got {0:?}")]
    DegenerateGrid([usize; 3]),
    #[error("expected {expected} coordinates, got {got}")]
    CoordinateCount { expected: usize, got: usize },
}

/// Distance kernel used to build the weight field.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum WeightMode {
    /// `w_k = m_k / (1 + d_k²)` with `m_k` the normalized structure mass.
    #[default]
    Mass,
    /// `w_k = 1 / (1 + ε d_k²)`.
    Reciprocal { epsilon: f64 },
}

impl WeightMode {
    pub fn validate(&self) -> Result<(), WarpError> {
        match *self {
            WeightMode::Mass => Ok(()),
            WeightMode::Reciprocal { epsilon } if epsilon > 0.0 && epsilon.is_finite() => Ok(()),
            WeightMode::Reciprocal { epsilon } => Err(WarpError::InvalidMode(format!(
                "epsilon must be positive and finite, got {epsilon}"
            ))),
        }
    }
}

/// Row-normalized weights, one row per voxel and one column per structure.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    geometry: GridGeometry,
    ids: Vec<u16>,
    weights: Vec<f64>,
}

impl WeightField {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    /// Structure ids in column order.
    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn structure_count(&self) -> usize {
        self.ids.len()
    }

    /// Row-major `M × K` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn row(&self, voxel: usize) -> &[f64] {
        let k = self.ids.len();
        &self.weights[voxel * k..(voxel + 1) * k]
    }

    /// Weights at an arbitrary point: per-structure trilinear interpolation
    /// with the query clamped to the grid, then renormalized.
    pub fn at(&self, x: &Vector3<f64>) -> Vec<f64> {
        let g = &self.geometry;
        let c = g.world_to_voxel(x);
        let clamped = Vector3::from_fn(|a, _| c[a].clamp(0.0, (g.shape[a] - 1) as f64));
        let k = self.ids.len();
        let mut out = vec![0.0; k];
        let stencil = trilinear_stencil(&g.shape, &clamped).expect("clamped index lies in the grid");
        for (idx, w) in stencil {
            if let Some(idx) = idx {
                for (o, v) in out.iter_mut().zip(self.row(idx)) {
                    *o += w * v;
                }
            }
        }
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|w| *w /= total);
        out
    }
}

/// Builds the weight field of every nonzero structure in `labels`.
/// `vol` only fixes the grid the field lives on.
pub fn build_weights(labels: &LabelMap, vol: &Volume, mode: WeightMode) -> Result<WeightField, WarpError> {
    mode.validate()?;
    labels.check_aligned(vol)?;
    let ids = labels.structure_ids();
    if ids.is_empty() {
        return Err(GridError::NoStructures.into());
    }
    let masses = structure_masses(labels)?;
    let distances = ids
        .iter()
        .map(|&id| distance_transform(labels, id).map(|f| f.distances))
        .collect::<Result<Vec<_>, _>>()?;
    let k = ids.len();
    let m = labels.geometry().len();
    let mut weights = vec![0.0; m * k];
    weights
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(i, row)| {
            for (s, w) in row.iter_mut().enumerate() {
                let d2 = distances[s][i] * distances[s][i];
                *w = match mode {
                    WeightMode::Mass => masses[s] / (1.0 + d2),
                    WeightMode::Reciprocal { epsilon } => 1.0 / (1.0 + epsilon * d2),
                };
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= total);
        });
    Ok(WeightField {
        geometry: *labels.geometry(),
        ids,
        weights,
    })
}

/// One twist per structure blended by a weight field.
#[derive(Debug, Clone)]
pub struct PolyrigidField<'a> {
    twists: TwistMatrix,
    weights: &'a WeightField,
}

impl<'a> PolyrigidField<'a> {
    pub fn new(twists: TwistMatrix, weights: &'a WeightField) -> Result<Self, WarpError> {
        if twists.len() != weights.structure_count() {
            return Err(WarpError::TwistCount {
                expected: weights.structure_count(),
                got: twists.len(),
            });
        }
        if let Some(k) = twists.rows().iter().position(|t| !t.is_finite()) {
            return Err(WarpError::NonFiniteTwist(k));
        }
        Ok(Self { twists, weights })
    }

    pub fn twists(&self) -> &TwistMatrix {
        &self.twists
    }

    pub fn weights(&self) -> &WeightField {
        self.weights
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.weights.geometry
    }

    /// Blended twist for a weight row.
    #[inline]
    pub fn blend(&self, row: &[f64]) -> Twist {
        let mut omega = Vector3::zeros();
        let mut u = Vector3::zeros();
        for (w, t) in row.iter().zip(self.twists.rows()) {
            omega += t.omega * *w;
            u += t.u * *w;
        }
        Twist::new(omega, u)
    }

    /// The fused rigid transform at an arbitrary point.
    pub fn fuse_at(&self, x: &Vector3<f64>) -> RigidTransform {
        se3_exp(&self.blend(&self.weights.at(x)))
    }

    /// `W · 𝔗`: the blended twist at every voxel center.
    pub fn fused_twists(&self) -> Vec<Twist> {
        (0..self.geometry().len())
            .into_par_iter()
            .map(|i| self.blend(self.weights.row(i)))
            .collect()
    }

    /// Warped coordinates `Φ(x_i)` of every voxel center.
    pub fn apply_to_grid(&self) -> Vec<Vector3<f64>> {
        let g = *self.geometry();
        self.fused_twists()
            .par_iter()
            .enumerate()
            .map(|(i, v)| se3_exp(v).transform_point(&g.center(i)))
            .collect()
    }
}

/// Pull-back resampling `V ∘ Φ` on the input grid.
pub fn warp_volume(vol: &Volume, field: &PolyrigidField) -> Result<Volume, WarpError> {
    if vol.geometry() != field.geometry() {
        return Err(WarpError::GridMismatch);
    }
    let coords = field.apply_to_grid();
    Ok(resample(vol, &coords))
}

/// Trilinear samples of `vol` at world points, on `vol`'s grid.
pub fn resample(vol: &Volume, coords: &[Vector3<f64>]) -> Volume {
    let g = *vol.geometry();
    assert_eq!(coords.len(), g.len());
    let data = coords
        .par_iter()
        .map(|p| sample_continuous(vol.data(), &g.shape, &g.world_to_voxel(p)))
        .collect();
    Volume::from_parts_unchecked(g, data)
}

/// Nearest-neighbor pull-back of a label map; points leaving the grid read 0.
pub fn warp_labels(labels: &LabelMap, coords: &[Vector3<f64>]) -> Result<LabelMap, WarpError> {
    let g = *labels.geometry();
    if coords.len() != g.len() {
        return Err(WarpError::CoordinateCount {
            expected: g.len(),
            got: coords.len(),
        });
    }
    let data = coords
        .par_iter()
        .map(|p| {
            let c = g.world_to_voxel(p);
            let idx: Option<Vec<usize>> = (0..3)
                .map(|a| {
                    let r = c[a].round();
                    (r >= 0.0 && r < g.shape[a] as f64).then_some(r as usize)
                })
                .collect();
            idx.map_or(0, |i| labels.labels()[g.index(i[0], i[1], i[2])])
        })
        .collect();
    Ok(LabelMap::new(g, data)?)
}

/// Fold and volume-change statistics of a warped-coordinate field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianStats {
    /// Percentage (0–100) of voxels with `det J ≤ 0`.
    pub percent_folds: f64,
    /// Population standard deviation of `log det J` over voxels with
    /// `det J > 0`.
    pub sigma_log_jac: f64,
}

/// Jacobian determinants of `coords` by central differences on the lattice,
/// one-sided at the boundary.
pub fn jacobian_determinants(geometry: &GridGeometry, coords: &[Vector3<f64>]) -> Result<Vec<f64>, WarpError> {
    if geometry.shape.iter().any(|&n| n < 3) {
        return Err(WarpError::DegenerateGrid(geometry.shape));
    }
    if coords.len() != geometry.len() {
        return Err(WarpError::CoordinateCount {
            expected: geometry.len(),
            got: coords.len(),
        });
    }
    let g = *geometry;
    Ok((0..g.len())
        .into_par_iter()
        .map(|idx| {
            let c = g.coords(idx);
            let mut jac = nalgebra::Matrix3::zeros();
            for axis in 0..3 {
                let n = g.shape[axis];
                let (lo, hi) = match c[axis] {
                    0 => (0, 1),
                    i if i == n - 1 => (i - 1, i),
                    i => (i - 1, i + 1),
                };
                let at = |t: usize| {
                    let mut q = c;
                    q[axis] = t;
                    coords[g.index(q[0], q[1], q[2])]
                };
                let d = (at(hi) - at(lo)) / ((hi - lo) as f64 * g.spacing[axis]);
                jac.set_column(axis, &d);
            }
            jac.determinant()
        })
        .collect())
}

pub fn jacobian_stats(geometry: &GridGeometry, coords: &[Vector3<f64>]) -> Result<JacobianStats, WarpError> {
    let dets = jacobian_determinants(geometry, coords)?;
    let folds = dets.iter().filter(|&&d| d <= 0.0).count();
    let logs: Vec<f64> = dets.iter().filter(|&&d| d > 0.0).map(|d| d.ln()).collect();
    let sigma_log_jac = if logs.is_empty() {
        0.0
    } else {
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    Ok(JacobianStats {
        percent_folds: 100.0 * folds as f64 / dets.len() as f64,
        sigma_log_jac,
    })
}
