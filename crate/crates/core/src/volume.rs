//! Volume containers, the SVOL/SMSK file formats, intensity conversion,
//! label interpolation between slice thicknesses, reslicing into anatomical
//! projections and isotropic resampling.
//!
//! Volumes are stored row-major in `(z, y, x)` order with `z` the axial
//! slice index.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Raw,
    Hu,
    /// Window-scaled intensities in `[0, 1]` used as network input.
    Windowed,
    Probability,
    /// Foreground mask with values in `{0, 1}`.
    Binary,
    /// Non-negative fused score.
    Score,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub dims: Dims,
    pub spacing: Spacing,
    pub values: Vec<f32>,
    pub kind: VolumeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Background = 0,
    Ischemic = 1,
    Hemorrhagic = 2,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Background),
            1 => Some(Self::Ischemic),
            2 => Some(Self::Hemorrhagic),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub labels: Vec<u8>,
}

/// Anatomical slicing plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Axial,
    Coronal,
    Sagittal,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Axial, Projection::Coronal, Projection::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Axial => "axial",
            Projection::Coronal => "coronal",
            Projection::Sagittal => "sagittal",
        }
    }
}

impl std::str::FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Self::Axial),
            "coronal" => Ok(Self::Coronal),
            "sagittal" => Ok(Self::Sagittal),
            _ => Err(invalid("projection", format!("unknown projection {s:?}"))),
        }
    }
}

fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

fn check_geometry(context: &'static str, dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(invalid(context, format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(invalid(context, format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

impl VolumeGrid {
    pub fn new(dims: Dims, spacing: Spacing, values: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        check_geometry("volume", dims, spacing)?;
        if values.len() != numel(dims) {
            return Err(invalid(
                "volume",
                format!("dims {dims:?} need {} values, got {}", numel(dims), values.len()),
            ));
        }
        if kind == VolumeKind::Probability && values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("volume", "probability volume has values outside [0, 1]"));
        }
        if kind == VolumeKind::Binary && values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid("volume", "binary volume has values other than 0 and 1"));
        }
        Ok(Self {
            dims,
            spacing,
            values,
            kind,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32, kind: VolumeKind) -> Result<Self> {
        Self::new(dims, spacing, vec![value; numel(dims)], kind)
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(z, y, x)]
    }

    /// One axial slice as a row-major `H x W` buffer.
    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.values[z * plane..(z + 1) * plane]
    }
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u8>) -> Result<Self> {
        check_geometry("labels", dims, spacing)?;
        if labels.len() != numel(dims) {
            return Err(invalid(
                "labels",
                format!("dims {dims:?} need {} labels, got {}", numel(dims), labels.len()),
            ));
        }
        if let Some(pos) = labels.iter().position(|&l| l > 2) {
            return Err(invalid("labels", format!("label {} at index {pos} is not 0, 1 or 2", labels[pos])));
        }
        Ok(Self { dims, spacing, labels })
    }

    pub fn empty(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0; numel(dims)])
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let plane = self.dims[1] * self.dims[2];
        &self.labels[z * plane..(z + 1) * plane]
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, label: Label) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label as u8).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label as u8).count()
    }
}

// ---------------------------------------------------------------------------
// SVOL / SMSK files: one line of JSON header, '\n', then the raw payload.

pub const SVOL_MAGIC: &str = "SVOL1";
pub const SMSK_MAGIC: &str = "SMSK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub magic: String,
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub dtype: String,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<VolumeKind>,
}

fn write_with_header(path: &Path, header: &FileHeader, payload: &[u8]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(payload);
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

fn read_with_header(path: &Path, magic: &str, dtype: &str, elem: usize) -> Result<(FileHeader, Vec<u8>, usize)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt("missing header terminator".into()))?;
    let header: FileHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| fmt(format!("bad header: {e}")))?;
    if header.magic != magic {
        return Err(fmt(format!("bad magic {:?}, expected {magic:?}", header.magic)));
    }
    if header.dtype != dtype {
        return Err(fmt(format!("dtype {:?}, expected {dtype:?}", header.dtype)));
    }
    let offset = nl + 1;
    let payload = bytes[offset..].to_vec();
    let expected = numel(header.dims) * elem;
    if payload.len() != expected {
        return Err(fmt(format!(
            "payload is {} bytes, expected {expected} for dims {:?}",
            payload.len(),
            header.dims
        )));
    }
    Ok((header, payload, offset))
}

/// Writes a volume. `slope`/`intercept` record the raw-to-HU mapping.
pub fn write_svol(path: &Path, v: &VolumeGrid, slope: f64, intercept: f64) -> Result<()> {
    let header = FileHeader {
        magic: SVOL_MAGIC.into(),
        dims: v.dims,
        spacing_mm: v.spacing,
        dtype: "f32le".into(),
        rescale_slope: slope,
        rescale_intercept: intercept,
        kind: Some(v.kind),
    };
    let payload: Vec<u8> = v.values.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_with_header(path, &header, &payload)
}

pub fn read_svol(path: &Path) -> Result<(VolumeGrid, FileHeader)> {
    let (header, payload, _) = read_with_header(path, SVOL_MAGIC, "f32le", 4)?;
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let kind = header.kind.unwrap_or(VolumeKind::Raw);
    let v = VolumeGrid::new(header.dims, header.spacing_mm, values, kind).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok((v, header))
}

pub fn write_smsk(path: &Path, m: &LabelVolume) -> Result<()> {
    let header = FileHeader {
        magic: SMSK_MAGIC.into(),
        dims: m.dims,
        spacing_mm: m.spacing,
        dtype: "u8".into(),
        rescale_slope: 1.0,
        rescale_intercept: 0.0,
        kind: None,
    };
    write_with_header(path, &header, &m.labels)
}

pub fn read_smsk(path: &Path) -> Result<LabelVolume> {
    let (header, payload, offset) = read_with_header(path, SMSK_MAGIC, "u8", 1)?;
    if let Some(pos) = payload.iter().position(|&b| b > 2) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("label byte {} at byte offset {} is not 0, 1 or 2", payload[pos], offset + pos),
        });
    }
    LabelVolume::new(header.dims, header.spacing_mm, payload).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Intensity conversion

/// `hu = raw * slope + intercept`.
pub fn hu_normalize(raw: &VolumeGrid, slope: f64, intercept: f64) -> Result<VolumeGrid> {
    if raw.kind != VolumeKind::Raw {
        return Err(invalid("hu_normalize", format!("expected a raw volume, got {:?}", raw.kind)));
    }
    if slope == 0.0 || !slope.is_finite() || !intercept.is_finite() {
        return Err(invalid("hu_normalize", format!("invalid rescale slope {slope} / intercept {intercept}")));
    }
    let values = raw
        .values
        .iter()
        .map(|&r| (r as f64 * slope + intercept) as f32)
        .collect();
    VolumeGrid::new(raw.dims, raw.spacing, values, VolumeKind::Hu)
}

/// Default brain window in HU.
pub const BRAIN_WINDOW: (f32, f32) = (0.0, 80.0);

/// Clips to `[lo, hi]` and maps linearly onto `[0, 1]`.
pub fn window_scale(hu: &VolumeGrid, lo: f32, hi: f32) -> Result<VolumeGrid> {
    if !(lo < hi) {
        return Err(invalid("window_scale", format!("window [{lo}, {hi}] is empty")));
    }
    let values = hu.values.iter().map(|&v| window_value(v, lo, hi)).collect();
    VolumeGrid::new(hu.dims, hu.spacing, values, VolumeKind::Windowed)
}

#[inline]
pub fn window_value(v: f32, lo: f32, hi: f32) -> f32 {
    (v.clamp(lo, hi) - lo) / (hi - lo)
}

// ---------------------------------------------------------------------------
// Thick -> thin label interpolation

/// Interpolates each lesion class independently along `z`: the class
/// indicator is linearly interpolated between the bracketing thick slices
/// and kept where it reaches 0.5. A voxel reaching 0.5 for both classes is
/// labeled hemorrhagic.
pub fn interpolate_labels(thick: &LabelVolume, thick_z: &[f64], thin_z: &[f64]) -> Result<LabelVolume> {
    let [d, h, w] = thick.dims;
    if thick_z.len() != d {
        return Err(invalid(
            "interpolate_labels",
            format!("{} slice positions for {d} thick slices", thick_z.len()),
        ));
    }
    if thick_z.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(invalid("interpolate_labels", "thick slice positions must be strictly increasing"));
    }
    if thin_z.is_empty() {
        return Err(invalid("interpolate_labels", "no thin slice positions"));
    }
    let (zmin, zmax) = (thick_z[0], thick_z[d - 1]);
    if let Some(z) = thin_z.iter().find(|&&z| !(zmin..=zmax).contains(&z)) {
        return Err(invalid(
            "interpolate_labels",
            format!("thin position {z} outside thick range [{zmin}, {zmax}]"),
        ));
    }
    let plane = h * w;
    let mut labels = Vec::with_capacity(thin_z.len() * plane);
    for &z in thin_z {
        // bracketing pair k, k+1 with thick_z[k] <= z <= thick_z[k+1]
        let k = thick_z.partition_point(|&t| t <= z).saturating_sub(1).min(d.saturating_sub(2));
        let (lo, hi, t) = if d == 1 {
            (0, 0, 0.0)
        } else {
            (k, k + 1, (z - thick_z[k]) / (thick_z[k + 1] - thick_z[k]))
        };
        let (a, b) = (thick.slice(lo), thick.slice(hi));
        for i in 0..plane {
            let field = |class: u8| {
                let m0 = if a[i] == class { 1.0 } else { 0.0 };
                let m1 = if b[i] == class { 1.0 } else { 0.0 };
                (1.0 - t) * m0 + t * m1
            };
            let label = if field(2) >= 0.5 {
                2
            } else if field(1) >= 0.5 {
                1
            } else {
                0
            };
            labels.push(label);
        }
    }
    let sz = if thin_z.len() > 1 {
        (thin_z[thin_z.len() - 1] - thin_z[0]) / (thin_z.len() - 1) as f64
    } else {
        thick.spacing[0]
    };
    LabelVolume::new([thin_z.len(), h, w], [sz, thick.spacing[1], thick.spacing[2]], labels)
}

// ---------------------------------------------------------------------------
// Reslicing

/// Dims of a volume of axial dims `dims` viewed in projection `p`.
pub fn projected_dims(dims: Dims, p: Projection) -> Dims {
    let [d, h, w] = dims;
    match p {
        Projection::Axial => [d, h, w],
        Projection::Coronal => [h, d, w],
        Projection::Sagittal => [w, d, h],
    }
}

fn projected_spacing(s: Spacing, p: Projection) -> Spacing {
    let [sz, sy, sx] = s;
    match p {
        Projection::Axial => [sz, sy, sx],
        Projection::Coronal => [sy, sz, sx],
        Projection::Sagittal => [sx, sz, sy],
    }
}

fn axial_dims(projected: Dims, p: Projection) -> Dims {
    let [a, b, c] = projected;
    match p {
        Projection::Axial => [a, b, c],
        Projection::Coronal => [b, a, c],
        Projection::Sagittal => [b, c, a],
    }
}

fn axial_spacing(s: Spacing, p: Projection) -> Spacing {
    let [a, b, c] = s;
    match p {
        Projection::Axial => [a, b, c],
        Projection::Coronal => [b, a, c],
        Projection::Sagittal => [b, c, a],
    }
}

/// Index in projected storage of axial voxel `(z, y, x)`.
#[inline]
fn projected_index(dims: Dims, p: Projection, z: usize, y: usize, x: usize) -> usize {
    let [d, h, w] = dims;
    match p {
        Projection::Axial => (z * h + y) * w + x,
        Projection::Coronal => (y * d + z) * w + x,
        Projection::Sagittal => (x * d + z) * h + y,
    }
}

/// Applies the axial -> `p` permutation (`forward`) or its inverse to a
/// buffer whose axial dims are `axial`.
fn permute<T: Copy + Default>(data: &[T], axial: Dims, p: Projection, forward: bool) -> Vec<T> {
    if p == Projection::Axial {
        return data.to_vec();
    }
    let [d, h, w] = axial;
    let mut out = vec![T::default(); data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let a = (z * h + y) * w + x;
                let q = projected_index(axial, p, z, y, x);
                if forward {
                    out[q] = data[a];
                } else {
                    out[a] = data[q];
                }
            }
        }
    }
    out
}

/// Re-indexes an axial volume so that its leading axis runs across `p`
/// slices: coronal is `(y, z, x)`, sagittal `(x, z, y)`.
pub fn reslice(v: &VolumeGrid, p: Projection) -> VolumeGrid {
    VolumeGrid {
        dims: projected_dims(v.dims, p),
        spacing: projected_spacing(v.spacing, p),
        values: permute(&v.values, v.dims, p, true),
        kind: v.kind,
    }
}

/// Inverse of [`reslice`].
pub fn unreslice(v: &VolumeGrid, p: Projection) -> VolumeGrid {
    let axial = axial_dims(v.dims, p);
    VolumeGrid {
        dims: axial,
        spacing: axial_spacing(v.spacing, p),
        values: permute(&v.values, axial, p, false),
        kind: v.kind,
    }
}

pub fn reslice_labels(m: &LabelVolume, p: Projection) -> LabelVolume {
    LabelVolume {
        dims: projected_dims(m.dims, p),
        spacing: projected_spacing(m.spacing, p),
        labels: permute(&m.labels, m.dims, p, true),
    }
}

pub fn unreslice_labels(m: &LabelVolume, p: Projection) -> LabelVolume {
    let axial = axial_dims(m.dims, p);
    LabelVolume {
        dims: axial,
        spacing: axial_spacing(m.spacing, p),
        labels: permute(&m.labels, axial, p, false),
    }
}

// ---------------------------------------------------------------------------
// Isotropic resampling

fn resampled_dims(dims: Dims, spacing: Spacing, target_mm: f64) -> Result<Dims> {
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(invalid("resample_isotropic", format!("target spacing {target_mm} must be positive")));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = (dims[a] as f64 * spacing[a] / target_mm).round() as usize;
        if out[a] == 0 {
            return Err(invalid(
                "resample_isotropic",
                format!("axis {a} would have 0 voxels ({} x {} mm at {target_mm} mm)", dims[a], spacing[a]),
            ));
        }
    }
    Ok(out)
}

/// Source coordinate of output voxel centre `o` (voxel-centre aligned),
/// clamped into the input.
fn source_coord(o: usize, scale: f64, len: usize) -> f64 {
    ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64)
}

/// Trilinear resampling to `target_mm` isotropic spacing.
pub fn resample_isotropic(v: &VolumeGrid, target_mm: f64) -> Result<VolumeGrid> {
    let out = resampled_dims(v.dims, v.spacing, target_mm)?;
    let taps = |axis: usize| -> Vec<(usize, usize, f64)> {
        let scale = target_mm / v.spacing[axis];
        (0..out[axis])
            .map(|o| {
                let s = source_coord(o, scale, v.dims[axis]);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(v.dims[axis] - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (tz, ty, tx) = (taps(0), taps(1), taps(2));
    let mut values = Vec::with_capacity(out.iter().product());
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let at = |z, y, x| v.get(z, y, x) as f64;
                let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                values.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz) as f32);
            }
        }
    }
    VolumeGrid::new(out, [target_mm; 3], values, v.kind)
}

/// Nearest-neighbour resampling of labels to `target_mm` isotropic spacing.
pub fn resample_labels_isotropic(m: &LabelVolume, target_mm: f64) -> Result<LabelVolume> {
    let out = resampled_dims(m.dims, m.spacing, target_mm)?;
    let nearest = |axis: usize| -> Vec<usize> {
        let scale = target_mm / m.spacing[axis];
        (0..out[axis])
            .map(|o| source_coord(o, scale, m.dims[axis]).round() as usize)
            .collect()
    };
    let (nz, ny, nx) = (nearest(0), nearest(1), nearest(2));
    let mut labels = Vec::with_capacity(out.iter().product());
    for &z in &nz {
        for &y in &ny {
            for &x in &nx {
                labels.push(m.labels[m.index(z, y, x)]);
            }
        }
    }
    LabelVolume::new(out, [target_mm; 3], labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: Dims, spacing: Spacing) -> VolumeGrid {
        let values = (0..numel(dims)).map(|i| i as f32).collect();
        VolumeGrid::new(dims, spacing, values, VolumeKind::Hu).unwrap()
    }

    #[test]
    fn hu_normalize_affine_examples() {
        let raw = VolumeGrid::new([1, 1, 3], [1.0; 3], vec![1024.0, 0.0, 2.0], VolumeKind::Raw).unwrap();
        let hu = hu_normalize(&raw, 1.0, -1024.0).unwrap();
        assert_eq!(&hu.values[..2], &[0.0, -1024.0]);
        assert_eq!(hu_normalize(&raw, 2.5, 10.0).unwrap().values[2], 15.0);
        assert!(hu_normalize(&raw, 0.0, 10.0).is_err());
        assert!(hu_normalize(&hu, 1.0, 0.0).is_err());
    }

    #[test]
    fn window_examples() {
        let hu = VolumeGrid::new([1, 1, 3], [1.0; 3], vec![-10.0, 200.0, 40.0], VolumeKind::Hu).unwrap();
        let w = window_scale(&hu, 0.0, 80.0).unwrap();
        assert_eq!(w.values, vec![0.0, 1.0, 0.5]);
        assert!(window_scale(&hu, 80.0, 80.0).is_err());
    }

    #[test]
    fn reslice_moves_voxels_and_dims() {
        let v = ramp_volume([10, 20, 30], [1.0, 2.0, 3.0]);
        let c = reslice(&v, Projection::Coronal);
        assert_eq!(c.dims, [20, 10, 30]);
        assert_eq!(c.spacing, [2.0, 1.0, 3.0]);
        // axial (z,y,x) = (2,3,4) lands at coronal (3,2,4)
        assert_eq!(c.get(3, 2, 4), v.get(2, 3, 4));
        let s = reslice(&v, Projection::Sagittal);
        assert_eq!(s.dims, [30, 10, 20]);
        assert_eq!(s.get(4, 2, 3), v.get(2, 3, 4));
        for p in Projection::ALL {
            assert_eq!(unreslice(&reslice(&v, p), p), v);
        }
    }

    #[test]
    fn interpolation_rules() {
        // one column, two thick slices 5mm apart: labeled / unlabeled
        let thick = LabelVolume::new([2, 1, 1], [5.0, 1.0, 1.0], vec![1, 0]).unwrap();
        let out = interpolate_labels(&thick, &[0.0, 5.0], &[0.0, 2.5, 3.75, 5.0]).unwrap();
        assert_eq!(out.labels, vec![1, 1, 0, 0]);
        let both = LabelVolume::new([2, 1, 1], [5.0, 1.0, 1.0], vec![2, 2]).unwrap();
        assert_eq!(interpolate_labels(&both, &[0.0, 5.0], &[1.0, 4.0]).unwrap().labels, vec![2, 2]);
        // 0.5/0.5 collision resolves to hemorrhagic
        let clash = LabelVolume::new([2, 1, 1], [5.0, 1.0, 1.0], vec![1, 2]).unwrap();
        assert_eq!(interpolate_labels(&clash, &[0.0, 5.0], &[2.5]).unwrap().labels, vec![2]);
        assert!(interpolate_labels(&thick, &[0.0, 5.0], &[5.5]).is_err());
        assert!(interpolate_labels(&thick, &[5.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn resample_identity_and_errors() {
        let v = ramp_volume([4, 5, 6], [1.0; 3]);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims, v.dims);
        assert!(r.values.iter().zip(&v.values).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(resample_isotropic(&v, 100.0).is_err());
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn resample_preserves_z_ramp() {
        let dims = [6, 3, 3];
        let values = (0..numel(dims)).map(|i| (i / 9) as f32 * 5.0 + 2.0).collect();
        let v = VolumeGrid::new(dims, [5.0, 1.0, 1.0], values, VolumeKind::Hu).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims, [30, 3, 3]);
        // value is linear in physical z (mm from the first slice centre) away from the clamped ends
        for z in 0..30 {
            let mm = z as f64 + 0.5 - 2.5;
            if !(0.0..=25.0).contains(&mm) {
                continue;
            }
            let want = mm + 2.0;
            assert!((r.get(z, 1, 1) as f64 - want).abs() < 1e-5, "z={z}");
        }
    }

    #[test]
    fn label_resampling_stays_in_alphabet() {
        let labels = (0..60).map(|i| (i % 3) as u8).collect();
        let m = LabelVolume::new([3, 4, 5], [2.0, 1.5, 1.0], labels).unwrap();
        let r = resample_labels_isotropic(&m, 0.7).unwrap();
        assert!(r.labels.iter().all(|&l| l <= 2));
        assert_eq!(r.dims, [9, 9, 7]);
    }
}
