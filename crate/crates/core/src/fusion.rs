//! Three-view prediction, threshold fusion, morphological closing, the
//! `V_pred` score and case classification, plus grid-search tuning of the
//! fusion and classifier constants.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::dsc_masks;
use crate::train::{predict_volume, prepare_view, Ensemble, Predictor, Tta};
use crate::volume::{unreslice, Dims, Label, LabelVolume, Projection, VolumeGrid, VolumeKind};
use crate::CaseClass;

/// Output channel of each lesion class.
pub const ISCHEMIC: usize = 0;
pub const HEMORRHAGIC: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionParams {
    pub k_axial: f64,
    pub k_coronal: f64,
    pub k_sagittal: f64,
    pub closing_radius: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            k_axial: 0.47,
            k_coronal: 0.56,
            k_sagittal: 0.56,
            closing_radius: 3,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("k_axial", self.k_axial), ("k_coronal", self.k_coronal), ("k_sagittal", self.k_sagittal)] {
            if !(k > 0.0 && k < 1.0) {
                return Err(invalid("fusion params", format!("{name} = {k} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    fn thresholds(&self) -> [f32; 3] {
        [self.k_axial as f32, self.k_coronal as f32, self.k_sagittal as f32]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierParams {
    pub voxel_floor: f64,
    pub ischemic_mean_thresh: f64,
    pub hemorrhagic_mean_thresh: f64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            voxel_floor: 0.9,
            ischemic_mean_thresh: 1.16,
            hemorrhagic_mean_thresh: 1.52,
        }
    }
}

impl ClassifierParams {
    pub fn validate(&self) -> Result<()> {
        if [self.voxel_floor, self.ischemic_mean_thresh, self.hemorrhagic_mean_thresh]
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(invalid("classifier params", "all constants must be positive"));
        }
        Ok(())
    }
}

/// Per-class probability maps of one view, in axial index space.
pub type ClassMaps = [VolumeGrid; 2];

#[derive(Clone, Debug)]
pub struct ProjectionMaps {
    pub axial: ClassMaps,
    pub coronal: ClassMaps,
    pub sagittal: ClassMaps,
}

impl ProjectionMaps {
    pub fn get(&self, p: Projection) -> &ClassMaps {
        match p {
            Projection::Axial => &self.axial,
            Projection::Coronal => &self.coronal,
            Projection::Sagittal => &self.sagittal,
        }
    }

    pub fn dims(&self) -> Dims {
        self.axial[0].dims
    }
}

/// Models for each view: the axial ensemble and exactly two models each for
/// the coronal and sagittal views.
pub struct ProjectionModels<P> {
    pub axial: Vec<P>,
    pub coronal: Vec<P>,
    pub sagittal: Vec<P>,
}

impl<P> ProjectionModels<P> {
    pub fn validate(&self) -> Result<()> {
        if self.axial.is_empty() {
            return Err(invalid("predict_projections", "the axial ensemble is empty"));
        }
        for (name, models) in [("coronal", &self.coronal), ("sagittal", &self.sagittal)] {
            if models.len() != 2 {
                return Err(invalid(
                    "predict_projections",
                    format!("{name} view needs exactly 2 models, got {}", models.len()),
                ));
            }
        }
        Ok(())
    }

    fn get(&self, p: Projection) -> &[P] {
        match p {
            Projection::Axial => &self.axial,
            Projection::Coronal => &self.coronal,
            Projection::Sagittal => &self.sagittal,
        }
    }
}

/// Predicts one view of an HU volume: window, reslice, run the TTA-wrapped
/// ensemble on every slice and map the class probabilities back to axial
/// index space.
pub fn predict_view<P: Predictor>(models: &[P], hu: &VolumeGrid, p: Projection, batch_size: usize) -> Result<ClassMaps> {
    let empty = LabelVolume::empty(hu.dims, hu.spacing)?;
    let (image, _) = prepare_view(hu, &empty, p)?;
    let predictor = Tta(Ensemble(models.iter().collect::<Vec<_>>()));
    let maps = predict_volume(&predictor, &image, batch_size)?;
    let [isch, hem]: [VolumeGrid; 2] = maps
        .try_into()
        .map_err(|m: Vec<VolumeGrid>| invalid("predict_view", format!("expected 2 output channels, got {}", m.len())))?;
    let back = [unreslice(&isch, p), unreslice(&hem, p)];
    assert!(back.iter().all(|v| v.dims == hu.dims), "inverse reslice must restore the axial dims");
    Ok(back)
}

/// Predicts all three views of an isotropic HU volume.
pub fn predict_projections<P: Predictor>(models: &ProjectionModels<P>, hu: &VolumeGrid, batch_size: usize) -> Result<ProjectionMaps> {
    models.validate()?;
    let [sz, sy, sx] = hu.spacing;
    if (sz - sy).abs() > 1e-6 * sy || (sx - sy).abs() > 1e-6 * sy {
        return Err(invalid(
            "predict_projections",
            format!("volume must be isotropic, spacing is {:?}; resample it first", hu.spacing),
        ));
    }
    let [a, c, s] = Projection::ALL.map(|p| predict_view(models.get(p), hu, p, batch_size));
    Ok(ProjectionMaps {
        axial: a?,
        coronal: c?,
        sagittal: s?,
    })
}

fn check_aligned(context: &'static str, vs: &[&VolumeGrid]) -> Result<()> {
    for v in &vs[1..] {
        if v.dims != vs[0].dims {
            return Err(Error::DimMismatch {
                context,
                lhs: vs[0].dims.to_vec(),
                rhs: v.dims.to_vec(),
            });
        }
    }
    Ok(())
}

/// A voxel is foreground when any view's probability strictly exceeds its
/// threshold.
pub fn fuse_projections(pa: &VolumeGrid, pc: &VolumeGrid, ps: &VolumeGrid, params: &FusionParams) -> Result<VolumeGrid> {
    check_aligned("fuse_projections", &[pa, pc, ps])?;
    let [ka, kc, ks] = params.thresholds();
    let values = pa
        .values
        .iter()
        .zip(&pc.values)
        .zip(&ps.values)
        .map(|((&a, &c), &s)| if a > ka || c > kc || s > ks { 1.0 } else { 0.0 })
        .collect();
    VolumeGrid::new(pa.dims, pa.spacing, values, VolumeKind::Binary)
}

/// `pa / k_axial + pc / k_coronal + ps / k_sagittal` per voxel.
pub fn v_pred(pa: &VolumeGrid, pc: &VolumeGrid, ps: &VolumeGrid, params: &FusionParams) -> Result<VolumeGrid> {
    check_aligned("v_pred", &[pa, pc, ps])?;
    let [ka, kc, ks] = params.thresholds();
    let values = pa
        .values
        .iter()
        .zip(&pc.values)
        .zip(&ps.values)
        .map(|((&a, &c), &s)| a / ka + c / kc + s / ks)
        .collect();
    VolumeGrid::new(pa.dims, pa.spacing, values, VolumeKind::Score)
}

// ---------------------------------------------------------------------------
// Morphology

/// For every `(dz, dy)` row offset of the discrete ball of `radius`, the
/// half-width of the ball along `x`.
fn ball_rows(radius: usize) -> Vec<(isize, isize, isize)> {
    let r = radius as isize;
    let mut rows = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            let rem = r * r - dz * dz - dy * dy;
            if rem >= 0 {
                rows.push((dz, dy, (rem as f64).sqrt().floor() as isize));
            }
        }
    }
    rows
}

/// Padded grid with per-row prefix counts, so the number of set voxels in
/// any x-interval is two lookups.
struct RowPrefix {
    dims: [usize; 3],
    /// `prefix[(z * h + y) * (w + 1) + x]` = set voxels in row `(z, y)` before `x`.
    prefix: Vec<u32>,
}

impl RowPrefix {
    fn new(mask: &[bool], dims: [usize; 3]) -> Self {
        let [d, h, w] = dims;
        let mut prefix = vec![0u32; d * h * (w + 1)];
        for (row, out) in mask.chunks_exact(w).zip(prefix.chunks_exact_mut(w + 1)) {
            for x in 0..w {
                out[x + 1] = out[x] + row[x] as u32;
            }
        }
        Self { dims, prefix }
    }

    /// Set voxels in row `(z, y)` over `[x0, x1]`, clipped to the grid.
    fn count(&self, z: isize, y: isize, x0: isize, x1: isize) -> u32 {
        let [d, h, w] = self.dims;
        if z < 0 || y < 0 || z >= d as isize || y >= h as isize {
            return 0;
        }
        let (lo, hi) = (x0.max(0), (x1 + 1).min(w as isize));
        if lo >= hi {
            return 0;
        }
        let base = (z as usize * h + y as usize) * (w + 1);
        self.prefix[base + hi as usize] - self.prefix[base + lo as usize]
    }
}

/// Dilation by the ball, evaluated on the grid `out_dims` whose origin sits
/// at `offset` inside the input grid coordinates.
fn dilate(mask: &[bool], dims: [usize; 3], radius: usize, out_dims: [usize; 3], offset: isize) -> Vec<bool> {
    let rows = ball_rows(radius);
    let p = RowPrefix::new(mask, dims);
    let [od, oh, ow] = out_dims;
    let mut out = vec![false; od * oh * ow];
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let (zi, yi, xi) = (z as isize + offset, y as isize + offset, x as isize + offset);
                out[(z * oh + y) * ow + x] = rows.iter().any(|&(dz, dy, hw)| p.count(zi - dz, yi - dy, xi - hw, xi + hw) > 0);
            }
        }
    }
    out
}

/// Erosion by the ball of a mask on a grid padded by `pad` on every side,
/// evaluated on the unpadded region. Voxels beyond the padded grid count as
/// background.
fn erode(mask: &[bool], dims: [usize; 3], radius: usize, pad: usize) -> Vec<bool> {
    let rows = ball_rows(radius);
    let p = RowPrefix::new(mask, dims);
    let [d, h, w] = dims.map(|n| n - 2 * pad);
    let mut out = vec![false; d * h * w];
    let pad = pad as isize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (zi, yi, xi) = (z as isize + pad, y as isize + pad, x as isize + pad);
                out[(z * h + y) * w + x] = rows
                    .iter()
                    .all(|&(dz, dy, hw)| p.count(zi + dz, yi + dy, xi - hw, xi + hw) == (2 * hw + 1) as u32);
            }
        }
    }
    out
}

/// Closing of a boolean mask by the Euclidean ball `{o : |o| <= radius}`.
/// The volume is treated as embedded in unbounded background, so the result
/// always contains the input.
pub fn close_mask(mask: &[bool], dims: Dims, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let padded = dims.map(|n| n + 2 * radius);
    let dilated = dilate(mask, dims, radius, padded, -(radius as isize));
    erode(&dilated, padded, radius, radius)
}

/// Morphological closing of a binary volume (non-zero is foreground).
pub fn morph_close(b: &VolumeGrid, radius: usize) -> VolumeGrid {
    let mask: Vec<bool> = b.values.iter().map(|&v| v != 0.0).collect();
    let closed = close_mask(&mask, b.dims, radius);
    VolumeGrid {
        dims: b.dims,
        spacing: b.spacing,
        values: closed.into_iter().map(|c| c as u8 as f32).collect(),
        kind: VolumeKind::Binary,
    }
}

// ---------------------------------------------------------------------------
// Classification

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: CaseClass,
    /// Mean `V_pred` over ischemic voxels above the floor, if any.
    pub m_isch: Option<f64>,
    pub m_hem: Option<f64>,
}

/// Mean of the values strictly above `floor`. Values are sorted first, so
/// the result depends only on their multiset.
pub fn mean_above(v: &VolumeGrid, floor: f64) -> Option<f64> {
    let mut above: Vec<f32> = v.values.iter().copied().filter(|&x| x as f64 > floor).collect();
    if above.is_empty() {
        return None;
    }
    above.sort_by(f32::total_cmp);
    Some(above.iter().map(|&x| x as f64).sum::<f64>() / above.len() as f64)
}

/// Decision rule on the two class means.
pub fn decide(m_isch: Option<f64>, m_hem: Option<f64>, params: &ClassifierParams) -> CaseClass {
    let ratio = |m: Option<f64>, t: f64| m.filter(|&m| m > t).map(|m| m / t);
    match (
        ratio(m_isch, params.ischemic_mean_thresh),
        ratio(m_hem, params.hemorrhagic_mean_thresh),
    ) {
        (None, None) => CaseClass::Healthy,
        (Some(_), None) => CaseClass::Ischemic,
        (None, Some(_)) => CaseClass::Hemorrhagic,
        (Some(ri), Some(rh)) => {
            if ri > rh {
                CaseClass::Ischemic
            } else {
                CaseClass::Hemorrhagic
            }
        }
    }
}

pub fn classify(vpred_isch: &VolumeGrid, vpred_hem: &VolumeGrid, params: &ClassifierParams) -> Classification {
    let m_isch = mean_above(vpred_isch, params.voxel_floor);
    let m_hem = mean_above(vpred_hem, params.voxel_floor);
    Classification {
        class: decide(m_isch, m_hem, params),
        m_isch,
        m_hem,
    }
}

// ---------------------------------------------------------------------------
// Per-case pipeline

/// Fused masks and scores of one case, per class channel.
#[derive(Clone, Debug)]
pub struct FusedPrediction {
    /// Binary masks after fusion and closing.
    pub binary: ClassMaps,
    pub vpred: ClassMaps,
}

impl FusedPrediction {
    /// Single label volume. A voxel claimed by both classes takes the class
    /// with the larger `V_pred`, hemorrhagic on ties.
    pub fn labels(&self) -> Result<LabelVolume> {
        let [bi, bh] = &self.binary;
        let [vi, vh] = &self.vpred;
        let labels = (0..bi.values.len())
            .map(|k| match (bi.values[k] != 0.0, bh.values[k] != 0.0) {
                (false, false) => Label::Background as u8,
                (true, false) => Label::Ischemic as u8,
                (false, true) => Label::Hemorrhagic as u8,
                (true, true) if vi.values[k] > vh.values[k] => Label::Ischemic as u8,
                _ => Label::Hemorrhagic as u8,
            })
            .collect();
        LabelVolume::new(bi.dims, bi.spacing, labels)
    }
}

/// Fuses one class channel of the three views, without closing.
pub fn fuse_channel(maps: &ProjectionMaps, channel: usize, params: &FusionParams) -> Result<VolumeGrid> {
    fuse_projections(&maps.axial[channel], &maps.coronal[channel], &maps.sagittal[channel], params)
}

/// Fusion, then closing, per class; `V_pred` per class.
pub fn fuse_case(maps: &ProjectionMaps, params: &FusionParams) -> Result<FusedPrediction> {
    params.validate()?;
    let channel = |c: usize| -> Result<(VolumeGrid, VolumeGrid)> {
        let fused = fuse_channel(maps, c, params)?;
        let vp = v_pred(&maps.axial[c], &maps.coronal[c], &maps.sagittal[c], params)?;
        Ok((morph_close(&fused, params.closing_radius), vp))
    };
    let (bi, vi) = channel(ISCHEMIC)?;
    let (bh, vh) = channel(HEMORRHAGIC)?;
    Ok(FusedPrediction {
        binary: [bi, bh],
        vpred: [vi, vh],
    })
}

// ---------------------------------------------------------------------------
// Tuning

/// Candidate thresholds for the three views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionGrid {
    pub k_axial: Vec<f64>,
    pub k_coronal: Vec<f64>,
    pub k_sagittal: Vec<f64>,
}

impl Default for FusionGrid {
    fn default() -> Self {
        let ks: Vec<f64> = (0..=10).map(|i| (35 + 3 * i) as f64 / 100.0).collect();
        Self {
            k_axial: ks.clone(),
            k_coronal: ks.clone(),
            k_sagittal: ks,
        }
    }
}

/// One tuning case: the three views and the ground truth.
pub struct FusionCase<'a> {
    pub maps: &'a ProjectionMaps,
    pub gt: &'a LabelVolume,
    pub class: CaseClass,
}

fn sorted_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("tune", format!("grid {name} must be non-empty and strictly increasing")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTuning {
    pub params: FusionParams,
    pub mean_dsc: f64,
}

/// Exhaustive search for the thresholds maximizing the mean DSC of the
/// fused masks (before closing) over the lesion cases, on each case's
/// ground-truth class channel. Ties go to the lexicographically smallest
/// `(k_axial, k_coronal, k_sagittal)`. `closing_radius` is copied from
/// `base`.
pub fn tune_fusion(cases: &[FusionCase<'_>], grid: &FusionGrid, base: &FusionParams) -> Result<FusionTuning> {
    sorted_grid("k_axial", &grid.k_axial)?;
    sorted_grid("k_coronal", &grid.k_coronal)?;
    sorted_grid("k_sagittal", &grid.k_sagittal)?;
    let lesion: Vec<&FusionCase<'_>> = cases.iter().filter(|c| c.class != CaseClass::Healthy).collect();
    if lesion.is_empty() {
        return Err(invalid("tune_fusion", "no lesion cases in the tuning set"));
    }
    let (na, nc, ns) = (grid.k_axial.len(), grid.k_coronal.len(), grid.k_sagittal.len());
    let mut total = vec![0.0f64; na * nc * ns];
    for case in &lesion {
        let dsc = case_dsc_table(case, grid)?;
        for (t, d) in total.iter_mut().zip(dsc) {
            *t += d;
        }
    }
    let mut best = 0;
    for (i, &t) in total.iter().enumerate() {
        if t > total[best] {
            best = i;
        }
    }
    let (ia, ic, is) = (best / (nc * ns), (best / ns) % nc, best % ns);
    Ok(FusionTuning {
        params: FusionParams {
            k_axial: grid.k_axial[ia],
            k_coronal: grid.k_coronal[ic],
            k_sagittal: grid.k_sagittal[is],
            closing_radius: base.closing_radius,
        },
        mean_dsc: total[best] / lesion.len() as f64,
    })
}

/// DSC of one case for every grid point, flattened `(a, c, s)` row-major.
///
/// A voxel with probability `p` in a view is on for the grid thresholds
/// below `p`, i.e. for grid indices `< rank(p)`. The fused voxel is off
/// exactly when every chosen index is at or above its view's rank, so
/// off-counts are a 3-D cumulative histogram over the rank triples.
fn case_dsc_table(case: &FusionCase<'_>, grid: &FusionGrid) -> Result<Vec<f64>> {
    let channel = match case.class.label() {
        Label::Ischemic => ISCHEMIC,
        _ => HEMORRHAGIC,
    };
    let views = [&case.maps.axial[channel], &case.maps.coronal[channel], &case.maps.sagittal[channel]];
    check_aligned("tune_fusion", &views)?;
    if views[0].dims != case.gt.dims {
        return Err(Error::DimMismatch {
            context: "tune_fusion",
            lhs: views[0].dims.to_vec(),
            rhs: case.gt.dims.to_vec(),
        });
    }
    let grids = [&grid.k_axial, &grid.k_coronal, &grid.k_sagittal];
    let (na, nc, ns) = (grids[0].len() + 1, grids[1].len() + 1, grids[2].len() + 1);
    let mut hist_all = vec![0u64; na * nc * ns];
    let mut hist_gt = vec![0u64; na * nc * ns];
    let gt_label = case.class.label() as u8;
    let mut gt_total = 0u64;
    for k in 0..views[0].values.len() {
        let rank = |v: usize| grids[v].partition_point(|&t| (t as f32) < views[v].values[k]);
        let cell = (rank(0) * nc + rank(1)) * ns + rank(2);
        hist_all[cell] += 1;
        if case.gt.labels[k] == gt_label {
            hist_gt[cell] += 1;
            gt_total += 1;
        }
    }
    let voxels = views[0].values.len() as u64;
    let cum_all = cumulate(hist_all, [na, nc, ns]);
    let cum_gt = cumulate(hist_gt, [na, nc, ns]);
    let mut out = Vec::with_capacity((na - 1) * (nc - 1) * (ns - 1));
    for a in 0..na - 1 {
        for c in 0..nc - 1 {
            for s in 0..ns - 1 {
                let cell = (a * nc + c) * ns + s;
                let pred = voxels - cum_all[cell];
                let inter = gt_total - cum_gt[cell];
                let denom = pred + gt_total;
                out.push(if denom == 0 { 1.0 } else { 2.0 * inter as f64 / denom as f64 });
            }
        }
    }
    Ok(out)
}

/// Inclusive prefix sums along all three axes.
fn cumulate(mut h: Vec<u64>, [na, nc, ns]: [usize; 3]) -> Vec<u64> {
    for a in 0..na {
        for c in 0..nc {
            for s in 1..ns {
                h[(a * nc + c) * ns + s] += h[(a * nc + c) * ns + s - 1];
            }
        }
    }
    for a in 0..na {
        for c in 1..nc {
            for s in 0..ns {
                h[(a * nc + c) * ns + s] += h[(a * nc + c - 1) * ns + s];
            }
        }
    }
    for a in 1..na {
        for c in 0..nc {
            for s in 0..ns {
                h[(a * nc + c) * ns + s] += h[((a - 1) * nc + c) * ns + s];
            }
        }
    }
    h
}

/// Mean DSC of the fused masks over the lesion cases for fixed thresholds,
/// optionally with closing.
pub fn fusion_dsc(cases: &[FusionCase<'_>], params: &FusionParams, closing: bool) -> Result<f64> {
    let lesion: Vec<&FusionCase<'_>> = cases.iter().filter(|c| c.class != CaseClass::Healthy).collect();
    if lesion.is_empty() {
        return Err(invalid("fusion_dsc", "no lesion cases"));
    }
    let mut total = 0.0;
    for case in &lesion {
        let channel = if case.class == CaseClass::Ischemic { ISCHEMIC } else { HEMORRHAGIC };
        let mut fused = fuse_channel(case.maps, channel, params)?;
        if closing {
            fused = morph_close(&fused, params.closing_radius);
        }
        let pred: Vec<bool> = fused.values.iter().map(|&v| v != 0.0).collect();
        total += dsc_masks(&pred, &case.gt.class_mask(case.class.label()))?;
    }
    Ok(total / lesion.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierGrid {
    pub voxel_floor: Vec<f64>,
    pub ischemic_mean_thresh: Vec<f64>,
    pub hemorrhagic_mean_thresh: Vec<f64>,
}

impl Default for ClassifierGrid {
    fn default() -> Self {
        Self {
            voxel_floor: vec![0.8, 0.9, 1.0],
            ischemic_mean_thresh: (0..=15).map(|i| (100 + 4 * i) as f64 / 100.0).collect(),
            hemorrhagic_mean_thresh: (0..=15).map(|i| (120 + 4 * i) as f64 / 100.0).collect(),
        }
    }
}

/// One classifier tuning case: both `V_pred` volumes and the true class.
pub struct ClassifierCase<'a> {
    pub vpred: &'a ClassMaps,
    pub class: CaseClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTuning {
    pub params: ClassifierParams,
    pub accuracy: f64,
}

/// Exhaustive search maximizing three-way accuracy; ties go to the
/// lexicographically smallest `(voxel_floor, ischemic, hemorrhagic)`.
pub fn tune_classifier(cases: &[ClassifierCase<'_>], grid: &ClassifierGrid) -> Result<ClassifierTuning> {
    sorted_grid("voxel_floor", &grid.voxel_floor)?;
    sorted_grid("ischemic_mean_thresh", &grid.ischemic_mean_thresh)?;
    sorted_grid("hemorrhagic_mean_thresh", &grid.hemorrhagic_mean_thresh)?;
    if cases.is_empty() {
        return Err(invalid("tune_classifier", "empty tuning set"));
    }
    let mut best: Option<(usize, ClassifierParams)> = None;
    for &floor in &grid.voxel_floor {
        let means: Vec<(Option<f64>, Option<f64>)> = cases
            .iter()
            .map(|c| (mean_above(&c.vpred[ISCHEMIC], floor), mean_above(&c.vpred[HEMORRHAGIC], floor)))
            .collect();
        for &ti in &grid.ischemic_mean_thresh {
            for &th in &grid.hemorrhagic_mean_thresh {
                let params = ClassifierParams {
                    voxel_floor: floor,
                    ischemic_mean_thresh: ti,
                    hemorrhagic_mean_thresh: th,
                };
                let correct = cases
                    .iter()
                    .zip(&means)
                    .filter(|(c, (mi, mh))| decide(*mi, *mh, &params) == c.class)
                    .count();
                if best.as_ref().is_none_or(|(b, _)| correct > *b) {
                    best = Some((correct, params));
                }
            }
        }
    }
    let (correct, params) = best.expect("grids are non-empty");
    Ok(ClassifierTuning {
        params,
        accuracy: correct as f64 / cases.len() as f64,
    })
}

/// Classification output record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub case_id: String,
    pub predicted_class: CaseClass,
    pub m_isch: Option<f64>,
    pub m_hem: Option<f64>,
}
