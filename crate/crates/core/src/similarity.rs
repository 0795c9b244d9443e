//! Image similarity (NCC family) and segmentation overlap metrics.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::euclidean_distance_transform;
use crate::render::DetectorImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("invalid patch: {0}")]
    InvalidPatch(String),
    #[error("image {0:?} is smaller than the {1}-pixel patch")]
    PatchTooLarge((usize, usize), usize),
    #[error("mask lengths differ: {0} vs {1}")]
    MaskMismatch(usize, usize),
    #[error("hd95 is undefined for an empty mask")]
    EmptyMask,
}

/// Patch geometry of the local NCC term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_size: 13,
            stride: 13,
        }
    }
}

impl PatchSpec {
    pub fn new(patch_size: usize, stride: usize) -> Result<Self, SimilarityError> {
        let p = Self { patch_size, stride };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SimilarityError> {
        if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
            return Err(SimilarityError::InvalidPatch(format!(
                "patch size must be odd and at least 3, got {}",
                self.patch_size
            )));
        }
        if self.stride == 0 {
            return Err(SimilarityError::InvalidPatch("stride must be positive".into()));
        }
        Ok(())
    }

    fn origins(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let rows = (0..=height - self.patch_size).step_by(self.stride);
        rows.flat_map(|r| {
            (0..=width - self.patch_size)
                .step_by(self.stride)
                .map(move |c| (r, c))
        })
        .collect()
    }
}

/// A similarity value. `zero_variance` records that at least one term met a
/// constant image or patch and was scored 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScore {
    pub value: f64,
    pub zero_variance: bool,
}

impl SimilarityScore {
    fn mean(a: Self, b: Self) -> Self {
        Self {
            value: 0.5 * (a.value + b.value),
            zero_variance: a.zero_variance || b.zero_variance,
        }
    }
}

/// Row-major image view used by the metric kernels.
#[derive(Clone, Copy)]
struct Plane<'a> {
    h: usize,
    w: usize,
    data: &'a [f64],
}

impl<'a> Plane<'a> {
    fn of(img: &'a DetectorImage) -> Self {
        Self {
            h: img.height(),
            w: img.width(),
            data: img.pixels(),
        }
    }
}

/// Rectangular pixel window.
#[derive(Clone, Copy)]
struct Window {
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
}

impl Window {
    fn full(p: &Plane) -> Self {
        Self {
            r0: 0,
            c0: 0,
            rows: p.h,
            cols: p.w,
        }
    }

    fn indices(self, w: usize) -> impl Iterator<Item = usize> {
        (self.r0..self.r0 + self.rows)
            .flat_map(move |r| (self.c0..self.c0 + self.cols).map(move |c| r * w + c))
    }

    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Sum of squares below this fraction of the data scale counts as constant.
fn is_constant(sxx: f64, n: usize, scale: f64) -> bool {
    sxx <= n as f64 * (1e-12 * scale).powi(2)
}

/// Reference patches whose standard deviation is at most this fraction of
/// the whole reference image's are left out of the patch mean. In X-ray
/// images such patches hold only the faint corner of a silhouette.
const PATCH_FLOOR: f64 = 3e-2;

/// Lower bound on the other image's patch standard deviation in the NCC
/// denominator, as a fraction of the reference image's. Near-empty patches
/// of `b` then fade continuously to 0 instead of amplifying interpolation
/// dust into full-strength correlation.
const PATCH_SOFTENING: f64 = 3e-4;

/// Population standard deviation of a plane.
fn plane_std(p: &Plane) -> f64 {
    let n = p.data.len() as f64;
    let mean = p.data.iter().sum::<f64>() / n;
    (p.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-window NCC outcome.
#[derive(Clone, Copy)]
struct WindowScore {
    value: f64,
    a_constant: bool,
    b_constant: bool,
}

/// NCC of `a` and `b` on a window, 0 when either side is constant. When
/// `grad` is given, adds `coef · ∂ncc/∂b` into it.
/// A window whose `a` standard deviation is at most `floor` counts as
/// constant, on top of the round-off rule. A positive `soft` bounds the
/// variance of `b` in the denominator from below by `soft²`.
fn window_ncc(a: &Plane, b: &Plane, win: Window, floor: f64, soft: f64, grad: Option<(&mut [f64], f64)>) -> WindowScore {
    let n = win.len();
    let (mut sa, mut sb, mut max_a, mut max_b) = (0.0, 0.0, 0.0f64, 0.0f64);
    for i in win.indices(a.w) {
        sa += a.data[i];
        sb += b.data[i];
        max_a = max_a.max(a.data[i].abs());
        max_b = max_b.max(b.data[i].abs());
    }
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for i in win.indices(a.w) {
        let (da, db) = (a.data[i] - ma, b.data[i] - mb);
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    let a_constant = is_constant(saa, n, max_a) || saa <= n as f64 * floor * floor;
    let b_constant = is_constant(sbb, n, max_b);
    if a_constant || (b_constant && soft == 0.0) {
        return WindowScore {
            value: 0.0,
            a_constant,
            b_constant,
        };
    }
    let bound = n as f64 * soft * soft;
    let clamped = sbb < bound;
    let norm = (saa * sbb.max(bound)).sqrt();
    let r = sab / norm;
    if let Some((g, coef)) = grad {
        for i in win.indices(a.w) {
            let (da, db) = (a.data[i] - ma, b.data[i] - mb);
            g[i] += coef * if clamped { da / norm } else { da / norm - r * db / sbb };
        }
    }
    WindowScore {
        value: r.clamp(-1.0, 1.0),
        a_constant,
        b_constant,
    }
}

/// Mean patch NCC. Patches where the reference `a` is constant carry no
/// information and are left out of the mean; patches where only `b` is
/// constant count as 0. Scores 0 when every reference patch is constant.
fn local_terms(a: &Plane, b: &Plane, p: &PatchSpec, grad: Option<(&mut [f64], f64)>) -> (f64, bool) {
    let windows: Vec<Window> = p
        .origins(a.h, a.w)
        .into_iter()
        .map(|(r0, c0)| Window {
            r0,
            c0,
            rows: p.patch_size,
            cols: p.patch_size,
        })
        .collect();
    let scale = plane_std(a);
    let (floor, soft) = (PATCH_FLOOR * scale, PATCH_SOFTENING * scale);
    let scores: Vec<WindowScore> = windows
        .par_iter()
        .map(|&win| window_ncc(a, b, win, floor, soft, None))
        .collect();
    let used = scores.iter().filter(|s| !s.a_constant).count();
    let flag = scores.iter().any(|s| s.a_constant || s.b_constant);
    if used == 0 {
        return (0.0, true);
    }
    let total: f64 = scores.iter().filter(|s| !s.a_constant).map(|s| s.value).sum();
    if let Some((g, coef)) = grad {
        // Windows may overlap when stride < patch size, so accumulate
        // sequentially.
        let scale = coef / used as f64;
        for (win, s) in windows.iter().zip(&scores) {
            if !s.a_constant {
                window_ncc(a, b, *win, floor, soft, Some((&mut *g, scale)));
            }
        }
    }
    (total / used as f64, flag)
}

fn mncc_plane(a: &Plane, b: &Plane, p: &PatchSpec, mut grad: Option<(&mut [f64], f64)>) -> SimilarityScore {
    let global = window_ncc(a, b, Window::full(a), 0.0, 0.0, grad.as_mut().map(|(g, c)| (&mut **g, 0.5 * *c)));
    let (local, z2) = local_terms(a, b, p, grad.map(|(g, c)| (g, 0.5 * c)));
    SimilarityScore {
        value: 0.5 * (global.value + local),
        zero_variance: global.a_constant || global.b_constant || z2,
    }
}

/// Reflect-padded index (`-1 → 1`, `n → n − 2`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Horizontal and vertical Sobel responses.
fn sobel(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (p.h, p.w);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (dr, (kx, ky)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                let rr = reflect(r as isize + dr as isize - 1, h);
                for dc in 0..3 {
                    let cc = reflect(c as isize + dc as isize - 1, w);
                    let v = p.data[rr * w + cc];
                    sx += kx[dc] * v;
                    sy += ky[dc] * v;
                }
            }
            gx[r * w + c] = sx;
            gy[r * w + c] = sy;
        }
    }
    (gx, gy)
}

/// Adjoint of [`sobel`]: scatters `(ux, uy)` back onto pixels.
fn sobel_adjoint(h: usize, w: usize, ux: &[f64], uy: &[f64], out: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            let (vx, vy) = (ux[r * w + c], uy[r * w + c]);
            if vx == 0.0 && vy == 0.0 {
                continue;
            }
            for (dr, (kx, ky)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                let rr = reflect(r as isize + dr as isize - 1, h);
                for dc in 0..3 {
                    let cc = reflect(c as isize + dc as isize - 1, w);
                    out[rr * w + cc] += kx[dc] * vx + ky[dc] * vy;
                }
            }
        }
    }
}

fn magnitude(gx: &[f64], gy: &[f64]) -> Vec<f64> {
    gx.iter().zip(gy).map(|(x, y)| x.hypot(*y)).collect()
}

/// Sobel gradient-magnitude image.
pub fn gradient_magnitude(img: &DetectorImage) -> DetectorImage {
    let (gx, gy) = sobel(&Plane::of(img));
    DetectorImage::new(img.height(), img.width(), magnitude(&gx, &gy)).expect("finite input gives finite output")
}

fn check_pair(a: &DetectorImage, b: &DetectorImage) -> Result<(), SimilarityError> {
    if a.shape() != b.shape() {
        return Err(SimilarityError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

fn check_patch(a: &DetectorImage, p: &PatchSpec) -> Result<(), SimilarityError> {
    p.validate()?;
    if a.height() < p.patch_size || a.width() < p.patch_size {
        return Err(SimilarityError::PatchTooLarge(a.shape(), p.patch_size));
    }
    Ok(())
}

/// Global zero-normalized cross correlation.
pub fn ncc(a: &DetectorImage, b: &DetectorImage) -> Result<SimilarityScore, SimilarityError> {
    check_pair(a, b)?;
    let (pa, pb) = (Plane::of(a), Plane::of(b));
    let s = window_ncc(&pa, &pb, Window::full(&pa), 0.0, 0.0, None);
    Ok(SimilarityScore {
        value: s.value,
        zero_variance: s.a_constant || s.b_constant,
    })
}

/// Mean patch NCC over the stride grid. Patches where `a` is constant are
/// left out; patches where only `b` is constant score 0. A reference patch
/// counts as constant when its standard deviation is at most 3% of its
/// image's; patches of `b` fade to 0 below 0.03% of that scale.
pub fn local_ncc(a: &DetectorImage, b: &DetectorImage, p: &PatchSpec) -> Result<SimilarityScore, SimilarityError> {
    check_pair(a, b)?;
    check_patch(a, p)?;
    let (value, zero_variance) = local_terms(&Plane::of(a), &Plane::of(b), p, None);
    Ok(SimilarityScore { value, zero_variance })
}

/// Average of global and patch-local NCC.
pub fn multiscale_ncc(a: &DetectorImage, b: &DetectorImage, p: &PatchSpec) -> Result<SimilarityScore, SimilarityError> {
    Ok(SimilarityScore::mean(ncc(a, b)?, local_ncc(a, b, p)?))
}

/// Multiscale NCC of the Sobel gradient magnitudes.
pub fn gradient_ncc(a: &DetectorImage, b: &DetectorImage, p: &PatchSpec) -> Result<SimilarityScore, SimilarityError> {
    check_pair(a, b)?;
    check_patch(a, p)?;
    multiscale_ncc(&gradient_magnitude(a), &gradient_magnitude(b), p)
}

/// Gradient multiscale NCC: the mean of [`multiscale_ncc`] and
/// [`gradient_ncc`].
pub fn gmncc(a: &DetectorImage, b: &DetectorImage, p: &PatchSpec) -> Result<SimilarityScore, SimilarityError> {
    Ok(SimilarityScore::mean(multiscale_ncc(a, b, p)?, gradient_ncc(a, b, p)?))
}

/// [`gmncc`] together with its derivative with respect to every pixel of
/// the second image.
pub fn gmncc_with_gradient(
    a: &DetectorImage,
    b: &DetectorImage,
    p: &PatchSpec,
) -> Result<(SimilarityScore, Vec<f64>), SimilarityError> {
    check_pair(a, b)?;
    check_patch(a, p)?;
    let (h, w) = a.shape();
    let (pa, pb) = (Plane::of(a), Plane::of(b));
    let mut grad = vec![0.0; h * w];
    let intensity = mncc_plane(&pa, &pb, p, Some((&mut grad, 0.5)));

    let (ax, ay) = sobel(&pa);
    let (bx, by) = sobel(&pb);
    let (ga, gb) = (magnitude(&ax, &ay), magnitude(&bx, &by));
    let mut grad_mag = vec![0.0; h * w];
    let edges = mncc_plane(
        &Plane { h, w, data: &ga },
        &Plane { h, w, data: &gb },
        p,
        Some((&mut grad_mag, 0.5)),
    );
    let (mut ux, mut uy) = (vec![0.0; h * w], vec![0.0; h * w]);
    for i in 0..h * w {
        if gb[i] > 0.0 {
            ux[i] = grad_mag[i] * bx[i] / gb[i];
            uy[i] = grad_mag[i] * by[i] / gb[i];
        }
    }
    sobel_adjoint(h, w, &ux, &uy, &mut grad);
    Ok((SimilarityScore::mean(intensity, edges), grad))
}

/// Sørensen–Dice overlap. Two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::MaskMismatch(a.len(), b.len()));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Mask voxels with at least one face neighbor outside the mask. Axes of
/// extent 1 are ignored, so 2D masks can be passed with `shape[2] = 1`.
pub fn boundary(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [nx, ny, _] = shape;
    let strides = [1, nx, nx * ny];
    (0..mask.len())
        .map(|idx| {
            if !mask[idx] {
                return false;
            }
            let c = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
            (0..3).filter(|&a| shape[a] > 1).any(|a| {
                c[a] == 0 || c[a] == shape[a] - 1 || !mask[idx - strides[a]] || !mask[idx + strides[a]]
            })
        })
        .collect()
}

/// Linearly interpolated percentile (`q` in 0–100) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (v.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Symmetric 95th-percentile boundary distance (mm) of 3D masks laid out
/// x-fastest.
pub fn hd95(a: &[bool], b: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::MaskMismatch(a.len(), b.len()));
    }
    assert_eq!(a.len(), shape.iter().product::<usize>(), "mask length must match shape");
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return Err(SimilarityError::EmptyMask);
    }
    let (ba, bb) = (boundary(a, shape), boundary(b, shape));
    let directed = |from: &[bool], to: &[bool]| {
        let dist = euclidean_distance_transform(to, shape, spacing);
        let d: Vec<f64> = from
            .iter()
            .zip(&dist)
            .filter(|(f, _)| **f)
            .map(|(_, d)| *d)
            .collect();
        percentile(&d, 95.0)
    };
    Ok(directed(&ba, &bb).max(directed(&bb, &ba)))
}

/// [`hd95`] for row-major 2D masks with `(row, col)` spacing.
pub fn hd95_2d(a: &[bool], b: &[bool], height: usize, width: usize, spacing: [f64; 2]) -> Result<f64, SimilarityError> {
    hd95(a, b, [width, height, 1], [spacing[1], spacing[0], 1.0])
}
