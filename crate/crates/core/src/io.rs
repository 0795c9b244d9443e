//! On-disk formats.
//!
//! Binary files carry a one-line ASCII header followed by a little-endian
//! payload:
//!
//! | magic   | header fields                     | payload                 |
//! |---------|-----------------------------------|-------------------------|
//! | `PVOL1` | `nx ny nz sx sy sz ox oy oz`      | `f32`, x fastest        |
//! | `PLAB1` | `nx ny nz sx sy sz ox oy oz`      | `u16`, x fastest        |
//! | `PIMG1` | `h w`                             | `f32`, row-major        |
//! | `PWRP1` | `nx ny nz`                        | `f32` triples, x fastest|
//!
//! Text files (camera configs, manifests) are `key = value` lines with `#`
//! comments. Twist files hold six numbers per line, `ω` then `u`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{CameraPose, GeometryError, IntrinsicMeta};
use crate::grid::{GridError, GridGeometry, LabelMap, Volume};
use crate::liealg::{LieError, RigidTransform, Twist, TwistMatrix};
use crate::registration::OptimConfig;
use crate::render::{DetectorImage, RenderError};
use crate::similarity::{PatchSpec, SimilarityError};
use crate::warpfield::WeightMode;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot access {}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("in {}", path.display())]
    In { path: PathBuf, source: Box<IoError> },
    #[error("byte {offset}: {message}")]
    Binary { offset: usize, message: String },
    #[error("line {line}: {message}")]
    Text { line: usize, message: String },
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("key `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("key `{key}`: file {} does not exist", path.display())]
    MissingFile { key: String, path: PathBuf },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Lie(#[from] LieError),
}

impl IoError {
    fn binary(offset: usize, message: impl Into<String>) -> Self {
        IoError::Binary {
            offset,
            message: message.into(),
        }
    }

    fn text(line: usize, message: impl Into<String>) -> Self {
        IoError::Text {
            line,
            message: message.into(),
        }
    }

    fn bad(key: &str, message: impl ToString) -> Self {
        IoError::BadValue {
            key: key.into(),
            message: message.to_string(),
        }
    }

    fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (IoError::File { .. } | IoError::In { .. }) => e,
            e => IoError::In {
                path: path.into(),
                source: Box::new(e),
            },
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.into(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.into(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.into(),
        source,
    })
}

/// Reads a file and decodes it, tagging errors with the path.
fn load<T>(path: &Path, decode: impl FnOnce(&[u8]) -> Result<T, IoError>) -> Result<T, IoError> {
    decode(&read_bytes(path)?).map_err(|e| e.in_file(path))
}

fn load_text<T>(path: &Path, parse: impl FnOnce(&str) -> Result<T, IoError>) -> Result<T, IoError> {
    parse(&read_text(path)?).map_err(|e| e.in_file(path))
}

// ---------------------------------------------------------------------------
// Binary headers

const MAX_HEADER: usize = 1024;

/// Header tokens with their byte offsets, and the payload start.
struct Header<'a> {
    tokens: Vec<(usize, &'a str)>,
    payload: usize,
}

impl<'a> Header<'a> {
    fn parse(bytes: &'a [u8], magic: &str, fields: usize) -> Result<Self, IoError> {
        let found = &bytes[..bytes.len().min(magic.len())];
        if found != magic.as_bytes() {
            return Err(IoError::binary(
                0,
                format!("expected magic `{magic}`, found `{}`", String::from_utf8_lossy(found)),
            ));
        }
        let end = bytes
            .iter()
            .take(MAX_HEADER)
            .position(|&b| b == b'\n')
            .ok_or_else(|| IoError::binary(bytes.len().min(MAX_HEADER), "header line is not terminated"))?;
        let line = std::str::from_utf8(&bytes[..end])
            .map_err(|e| IoError::binary(e.valid_up_to(), "header is not ASCII"))?;
        let mut tokens = Vec::new();
        let mut offset = 0;
        for part in line.split(' ') {
            if part.is_empty() {
                return Err(IoError::binary(offset, "header fields must be separated by single spaces"));
            }
            tokens.push((offset, part));
            offset += part.len() + 1;
        }
        if tokens[0].1 != magic {
            return Err(IoError::binary(0, format!("expected magic `{magic}`, found `{}`", tokens[0].1)));
        }
        if tokens.len() != fields + 1 {
            return Err(IoError::binary(
                end,
                format!("{magic} header needs {fields} fields, found {}", tokens.len() - 1),
            ));
        }
        Ok(Self {
            tokens,
            payload: end + 1,
        })
    }

    fn dim(&self, i: usize) -> Result<usize, IoError> {
        let (offset, text) = self.tokens[i + 1];
        match text.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(IoError::binary(offset, format!("expected a positive integer, found `{text}`"))),
        }
    }

    fn real(&self, i: usize) -> Result<f64, IoError> {
        let (offset, text) = self.tokens[i + 1];
        match text.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(IoError::binary(offset, format!("expected a finite number, found `{text}`"))),
        }
    }

    /// The payload as `count` little-endian words of `width` bytes.
    fn payload<'b>(&self, bytes: &'b [u8], count: usize, width: usize) -> Result<std::slice::ChunksExact<'b, u8>, IoError> {
        let end = self.payload + count * width;
        if bytes.len() < end {
            return Err(IoError::binary(
                end,
                format!("payload truncated: expected {end} bytes in total, file has {}", bytes.len()),
            ));
        }
        if bytes.len() > end {
            return Err(IoError::binary(end, format!("{} trailing bytes after payload", bytes.len() - end)));
        }
        Ok(bytes[self.payload..].chunks_exact(width))
    }
}

fn decode_f32s(header: &Header, bytes: &[u8], count: usize) -> Result<Vec<f64>, IoError> {
    header
        .payload(bytes, count, 4)?
        .enumerate()
        .map(|(i, chunk)| {
            let x = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
            if x.is_finite() {
                Ok(f64::from(x))
            } else {
                Err(IoError::binary(header.payload + 4 * i, format!("non-finite value {x}")))
            }
        })
        .collect()
}

fn encode_f32s(out: &mut Vec<u8>, values: impl Iterator<Item = f64>) -> Result<(), IoError> {
    for (i, v) in values.enumerate() {
        let x = v as f32;
        if !x.is_finite() {
            return Err(IoError::binary(out.len(), format!("value {v} at index {i} is not representable")));
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

fn grid_header(magic: &str, g: &GridGeometry) -> String {
    let [nx, ny, nz] = g.shape;
    let (s, o) = (g.spacing, g.origin);
    format!("{magic} {nx} {ny} {nz} {} {} {} {} {} {}\n", s.x, s.y, s.z, o.x, o.y, o.z)
}

fn parse_grid(header: &Header) -> Result<GridGeometry, IoError> {
    let shape = [header.dim(0)?, header.dim(1)?, header.dim(2)?];
    let spacing = Vector3::new(header.real(3)?, header.real(4)?, header.real(5)?);
    let origin = Vector3::new(header.real(6)?, header.real(7)?, header.real(8)?);
    Ok(GridGeometry::new(shape, spacing, origin)?)
}

// ---------------------------------------------------------------------------
// Volumes, label maps, images, warp fields

/// Payload values are stored as `f32`; finer detail is rounded away.
pub fn encode_volume(vol: &Volume) -> Result<Vec<u8>, IoError> {
    let mut out = grid_header("PVOL1", vol.geometry()).into_bytes();
    encode_f32s(&mut out, vol.data().iter().copied())?;
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume, IoError> {
    let header = Header::parse(bytes, "PVOL1", 9)?;
    let geometry = parse_grid(&header)?;
    let data = decode_f32s(&header, bytes, geometry.len())?;
    Ok(Volume::new(geometry, data)?)
}

pub fn encode_labels(labels: &LabelMap) -> Vec<u8> {
    let mut out = grid_header("PLAB1", labels.geometry()).into_bytes();
    out.extend(labels.labels().iter().flat_map(|l| l.to_le_bytes()));
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap, IoError> {
    let header = Header::parse(bytes, "PLAB1", 9)?;
    let geometry = parse_grid(&header)?;
    let labels = header
        .payload(bytes, geometry.len(), 2)?
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(LabelMap::new(geometry, labels)?)
}

pub fn encode_image(image: &DetectorImage) -> Result<Vec<u8>, IoError> {
    let (h, w) = image.shape();
    let mut out = format!("PIMG1 {h} {w}\n").into_bytes();
    encode_f32s(&mut out, image.pixels().iter().copied())?;
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<DetectorImage, IoError> {
    let header = Header::parse(bytes, "PIMG1", 2)?;
    let (h, w) = (header.dim(0)?, header.dim(1)?);
    let pixels = decode_f32s(&header, bytes, h * w)?;
    Ok(DetectorImage::new(h, w, pixels)?)
}

/// Warped world coordinates of every voxel of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    pub shape: [usize; 3],
    pub coords: Vec<Vector3<f64>>,
}

pub fn encode_warp(field: &WarpField) -> Result<Vec<u8>, IoError> {
    let [nx, ny, nz] = field.shape;
    if field.coords.len() != nx * ny * nz {
        return Err(IoError::binary(
            0,
            format!("{} coordinates for a {nx}x{ny}x{nz} grid", field.coords.len()),
        ));
    }
    let mut out = format!("PWRP1 {nx} {ny} {nz}\n").into_bytes();
    encode_f32s(&mut out, field.coords.iter().flat_map(|c| [c.x, c.y, c.z]))?;
    Ok(out)
}

pub fn decode_warp(bytes: &[u8]) -> Result<WarpField, IoError> {
    let header = Header::parse(bytes, "PWRP1", 3)?;
    let shape = [header.dim(0)?, header.dim(1)?, header.dim(2)?];
    let values = decode_f32s(&header, bytes, 3 * shape.iter().product::<usize>())?;
    let coords = values.chunks_exact(3).map(Vector3::from_column_slice).collect();
    Ok(WarpField { shape, coords })
}

/// 16-bit binary PGM, min-max normalized. Constant images map to 0.
pub fn encode_pgm(image: &DetectorImage) -> Vec<u8> {
    let (h, w) = image.shape();
    let (lo, hi) = image
        .pixels()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    let range = hi - lo;
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &p in image.pixels() {
        let level = if range > 0.0 {
            ((p - lo) / range * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

pub fn read_volume(path: &Path) -> Result<Volume, IoError> {
    load(path, decode_volume)
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<(), IoError> {
    write_file(path, &encode_volume(vol)?)
}

pub fn read_labels(path: &Path) -> Result<LabelMap, IoError> {
    load(path, decode_labels)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<(), IoError> {
    write_file(path, &encode_labels(labels))
}

pub fn read_image(path: &Path) -> Result<DetectorImage, IoError> {
    load(path, decode_image)
}

pub fn write_image(path: &Path, image: &DetectorImage) -> Result<(), IoError> {
    write_file(path, &encode_image(image)?)
}

pub fn read_warp(path: &Path) -> Result<WarpField, IoError> {
    load(path, decode_warp)
}

pub fn write_warp(path: &Path, field: &WarpField) -> Result<(), IoError> {
    write_file(path, &encode_warp(field)?)
}

pub fn write_pgm(path: &Path, image: &DetectorImage) -> Result<(), IoError> {
    write_file(path, &encode_pgm(image))
}

// ---------------------------------------------------------------------------
// Text formats

/// Significant lines of a text file: trimmed, comments and blanks removed,
/// paired with their 1-based line numbers.
fn significant_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_reals(line: usize, text: &str) -> Result<Vec<f64>, IoError> {
    text.split_whitespace()
        .map(|t| match t.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(IoError::text(line, format!("expected a finite number, found `{t}`"))),
        })
        .collect()
}

/// One twist per line: `ωx ωy ωz ux uy uz`.
pub fn encode_twists(twists: &TwistMatrix) -> String {
    twists
        .rows()
        .iter()
        .map(|t| {
            let a = t.to_array();
            format!("{} {} {} {} {} {}\n", a[0], a[1], a[2], a[3], a[4], a[5])
        })
        .collect()
}

pub fn parse_twists(text: &str) -> Result<TwistMatrix, IoError> {
    let rows = significant_lines(text)
        .map(|(line, body)| {
            let v = parse_reals(line, body)?;
            let v: [f64; 6] = v
                .try_into()
                .map_err(|v: Vec<f64>| IoError::text(line, format!("expected 6 numbers, found {}", v.len())))?;
            Ok(Twist::from_array(v))
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    let twists = TwistMatrix::new(rows);
    twists.validate()?;
    Ok(twists)
}

pub fn read_twists(path: &Path) -> Result<TwistMatrix, IoError> {
    load_text(path, parse_twists)
}

pub fn write_twists(path: &Path, twists: &TwistMatrix) -> Result<(), IoError> {
    write_file(path, encode_twists(twists).as_bytes())
}

/// Homogeneous 4×4 matrices, one block per structure.
pub fn encode_transforms(ids: &[u16], transforms: &[RigidTransform]) -> String {
    let mut out = String::new();
    for (id, t) in ids.iter().zip(transforms) {
        out.push_str(&format!("# structure {id}\n"));
        let m = t.matrix();
        for r in 0..4 {
            out.push_str(&format!("{} {} {} {}\n", m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)]));
        }
    }
    out
}

/// `iteration,loss` rows with a header.
pub fn encode_loss_history(history: &[f64]) -> String {
    std::iter::once("iteration,loss\n".to_string())
        .chain(history.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
        .collect()
}

/// Ordered `key = value` entries.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: Vec<(String, String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (line, body) in significant_lines(text) {
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| IoError::text(line, format!("expected `key = value`, found `{body}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(IoError::text(line, "empty key"));
            }
            if let Some((_, _, first)) = entries.iter().find(|(k, _, _)| k == key) {
                return Err(IoError::text(line, format!("key `{key}` already set on line {first}")));
            }
            entries.push((key.into(), value.trim().into(), line));
        }
        Ok(Self { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, IoError> {
        self.get(key).ok_or_else(|| IoError::MissingKey(key.into()))
    }

    fn reals(&self, key: &str, n: usize) -> Result<Vec<f64>, IoError> {
        let values = parse_reals(0, self.require(key)?).map_err(|e| match e {
            IoError::Text { message, .. } => IoError::bad(key, message),
            e => e,
        })?;
        if values.len() != n {
            return Err(IoError::bad(key, format!("expected {n} numbers, found {}", values.len())));
        }
        Ok(values)
    }

    fn real(&self, key: &str) -> Result<f64, IoError> {
        Ok(self.reals(key, 1)?[0])
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, IoError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| IoError::bad(key, e)))
            .transpose()
    }

    /// Rejects keys outside `known`, naming the first stray one.
    fn only(&self, known: impl Fn(&str) -> bool) -> Result<(), IoError> {
        match self.entries.iter().find(|(k, _, _)| !known(k)) {
            Some((k, _, line)) => Err(IoError::text(*line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Detector metadata plus extrinsic pose of one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraConfig {
    pub meta: IntrinsicMeta,
    pub pose: CameraPose,
}

const CAMERA_KEYS: [&str; 6] = [
    "focal_length_mm",
    "optical_center_mm",
    "pixel_spacing_mm",
    "image_hw",
    "rotation_rowmajor9",
    "translation_mm",
];

pub fn encode_camera(config: &CameraConfig) -> String {
    let m = &config.meta;
    let r = &config.pose.rotation;
    let t = &config.pose.translation;
    let rotation: Vec<String> = (0..3)
        .flat_map(|i| (0..3).map(move |j| r[(i, j)].to_string()))
        .collect();
    format!(
        "focal_length_mm = {}\noptical_center_mm = {} {}\npixel_spacing_mm = {} {}\nimage_hw = {} {}\nrotation_rowmajor9 = {}\ntranslation_mm = {} {} {}\n",
        m.focal_length,
        m.optical_center[0],
        m.optical_center[1],
        m.pixel_spacing[0],
        m.pixel_spacing[1],
        m.image_size[0],
        m.image_size[1],
        rotation.join(" "),
        t.x,
        t.y,
        t.z
    )
}

pub fn parse_camera(text: &str) -> Result<CameraConfig, IoError> {
    let kv = KeyValues::parse(text)?;
    kv.only(|k| CAMERA_KEYS.contains(&k))?;
    let hw = kv.require("image_hw")?;
    let size: Vec<usize> = hw
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| IoError::bad("image_hw", e)))
        .collect::<Result<_, _>>()?;
    let size: [usize; 2] = size
        .try_into()
        .map_err(|_| IoError::bad("image_hw", "expected height and width"))?;
    let oc = kv.reals("optical_center_mm", 2)?;
    let ps = kv.reals("pixel_spacing_mm", 2)?;
    let meta = IntrinsicMeta::new(kv.real("focal_length_mm")?, [oc[0], oc[1]], [ps[0], ps[1]], size)?;
    let rotation = Matrix3::from_row_slice(&kv.reals("rotation_rowmajor9", 9)?);
    let translation = Vector3::from_column_slice(&kv.reals("translation_mm", 3)?);
    let pose = CameraPose::new(rotation, translation)?;
    Ok(CameraConfig { meta, pose })
}

pub fn read_camera(path: &Path) -> Result<CameraConfig, IoError> {
    load_text(path, parse_camera)
}

pub fn write_camera(path: &Path, config: &CameraConfig) -> Result<(), IoError> {
    write_file(path, encode_camera(config).as_bytes())
}

/// One view of a registration manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub image: PathBuf,
    pub camera: PathBuf,
}

/// Everything a registration run needs, with paths resolved against the
/// manifest's directory.
///
/// Keys: `moving`, `labels`, `weight_mode` (`mass` or `reciprocal`),
/// `epsilon`, `view.<i>.image` and `view.<i>.camera` for `i = 0, 1, …`,
/// `anchor`, `samples`, `patch_size`, `patch_stride`, and the optimizer
/// fields `step_rot`, `step_xyz`, `adam_beta1`, `adam_beta2`, `adam_eps`,
/// `max_iters`, `convergence_window`, `convergence_tol`, `step_decay`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub moving: PathBuf,
    pub labels: PathBuf,
    pub weight_mode: WeightMode,
    pub views: Vec<ViewEntry>,
    pub anchor: Option<u16>,
    /// Quadrature samples per ray; `None` picks the grid default.
    pub samples: Option<usize>,
    pub patch: PatchSpec,
    pub optim: OptimConfig,
}

const MANIFEST_KEYS: [&str; 17] = [
    "moving",
    "labels",
    "weight_mode",
    "epsilon",
    "anchor",
    "samples",
    "patch_size",
    "patch_stride",
    "step_rot",
    "step_xyz",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "max_iters",
    "convergence_window",
    "convergence_tol",
    "step_decay",
];

fn view_key(key: &str) -> Option<(usize, &str)> {
    let rest = key.strip_prefix("view.")?;
    let (index, field) = rest.split_once('.')?;
    let index = index.parse().ok()?;
    matches!(field, "image" | "camera").then_some((index, field))
}

impl Manifest {
    /// Parses manifest text; relative paths are joined onto `base`, and every
    /// referenced file must exist.
    pub fn parse(text: &str, base: &Path) -> Result<Self, IoError> {
        let kv = KeyValues::parse(text)?;
        kv.only(|k| MANIFEST_KEYS.contains(&k) || view_key(k).is_some())?;
        let path = |key: &str| -> Result<PathBuf, IoError> {
            let p = base.join(kv.require(key)?);
            if p.is_file() {
                Ok(p)
            } else {
                Err(IoError::MissingFile { key: key.into(), path: p })
            }
        };
        let view_count = kv.keys().filter_map(view_key).map(|(i, _)| i + 1).max().unwrap_or(0);
        if view_count == 0 {
            return Err(IoError::MissingKey("view.0.image".into()));
        }
        let views = (0..view_count)
            .map(|i| {
                Ok(ViewEntry {
                    image: path(&format!("view.{i}.image"))?,
                    camera: path(&format!("view.{i}.camera"))?,
                })
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        let weight_mode = match kv.get("weight_mode").unwrap_or("mass") {
            "mass" => {
                if kv.get("epsilon").is_some() {
                    return Err(IoError::bad("epsilon", "only used with weight_mode = reciprocal"));
                }
                WeightMode::Mass
            }
            "reciprocal" => WeightMode::Reciprocal {
                epsilon: kv.real("epsilon")?,
            },
            other => return Err(IoError::bad("weight_mode", format!("expected mass or reciprocal, found `{other}`"))),
        };
        let defaults = PatchSpec::default();
        let patch = PatchSpec::new(
            kv.parsed("patch_size")?.unwrap_or(defaults.patch_size),
            kv.parsed("patch_stride")?.unwrap_or(defaults.stride),
        )
        .map_err(|e: SimilarityError| IoError::bad("patch_size", e))?;
        let mut optim = OptimConfig::default();
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = kv.parsed(stringify!($field))? {
                    optim.$field = v;
                })*
            };
        }
        set!(
            step_rot,
            step_xyz,
            adam_beta1,
            adam_beta2,
            adam_eps,
            max_iters,
            convergence_window,
            convergence_tol,
            step_decay
        );
        optim.validate().map_err(|e| IoError::bad("optimizer", e))?;
        Ok(Self {
            moving: path("moving")?,
            labels: path("labels")?,
            weight_mode,
            views,
            anchor: kv.parsed("anchor")?,
            samples: kv.parsed("samples")?,
            patch,
            optim,
        })
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let base = path.parent().unwrap_or(Path::new("."));
        load_text(path, |text| Self::parse(text, base))
    }
}
