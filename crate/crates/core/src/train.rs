//! Training: slice pools and batch sampling, augmentation, the RMSProp loop
//! with validation-IoU checkpoint selection, test-time augmentation and
//! ensembling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use strokeseg_tensor::{BatchNormMode, RmsProp, Tape, Tensor};

use crate::error::{invalid, io_err, Error, Result};
use crate::model::SegModel;
use crate::phantom::{gen_phantom, load_case, DatasetManifest, PhantomSpec, Split};
use crate::stats::iou_masks;
use crate::volume::{reslice, reslice_labels, window_scale, Label, LabelVolume, Projection, VolumeGrid, BRAIN_WINDOW};
use crate::CaseClass;

/// Probability above which a voxel counts as lesion during validation.
pub const VALIDATION_THRESHOLD: f32 = 0.5;
pub const TRAIN_LOG_FILE: &str = "train_log.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rot90: bool,
    pub flip_lr: bool,
    pub flip_ud: bool,
    pub scale: bool,
    pub rotate: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rot90: true,
            flip_lr: true,
            flip_ud: true,
            scale: true,
            rotate: true,
            scale_min: 0.9,
            scale_max: 1.1,
            max_rotation_deg: 45.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rot90: false,
            flip_lr: false,
            flip_ud: false,
            scale: false,
            rotate: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub rms_rho: f64,
    pub rms_eps: f64,
    pub stroke_sample_prob: f64,
    pub eval_every: u64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Healthy phantoms appended to the all-slices pool only.
    pub extra_healthy: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr0: 1e-4,
            lr_decay: 0.99977,
            rms_rho: 0.9,
            rms_eps: 1e-8,
            stroke_sample_prob: 0.5,
            eval_every: 100,
            focal_gamma: 2.0,
            focal_alpha: 0.75,
            augment: AugmentConfig::default(),
            seed: 0,
            extra_healthy: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(invalid("train config", msg));
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return fail("steps, batch_size and eval_every must be positive".into());
        }
        if self.eval_every > self.steps {
            return fail(format!(
                "eval_every {} exceeds steps {}: no checkpoint would be recorded",
                self.eval_every, self.steps
            ));
        }
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("need lr0 > 0 and lr_decay in (0, 1], got {} / {}", self.lr0, self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.rms_rho) || !(self.rms_eps > 0.0) {
            return fail("rms_rho must be in [0, 1) and rms_eps positive".into());
        }
        if !(0.0..=1.0).contains(&self.stroke_sample_prob) {
            return fail(format!("stroke_sample_prob {} not in [0, 1]", self.stroke_sample_prob));
        }
        if !(self.focal_gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return fail(format!(
                "need focal_gamma >= 0 and focal_alpha in [0, 1], got {} / {}",
                self.focal_gamma, self.focal_alpha
            ));
        }
        let a = &self.augment;
        if !(a.scale_min > 0.0 && a.scale_min <= a.scale_max) || !(a.max_rotation_deg >= 0.0) {
            return fail("augment: need 0 < scale_min <= scale_max and max_rotation_deg >= 0".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> RmsProp {
        RmsProp {
            lr0: self.lr0,
            decay: self.lr_decay,
            rho: self.rms_rho,
            eps: self.rms_eps,
        }
    }
}

// ---------------------------------------------------------------------------
// Slices and sampling

/// Indices of slices that contain a lesion, and of all slices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pools {
    pub stroke: Vec<usize>,
    pub all: Vec<usize>,
}

/// Draws `n` slice indices. Each draw flips a coin with probability `p` for
/// the stroke pool, then picks uniformly inside the chosen pool. An empty
/// stroke pool sends every draw to the all-slices pool.
pub fn sample_batch(pools: &Pools, n: usize, p: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if pools.all.is_empty() {
        return Err(invalid("sample_batch", "no slices to sample from"));
    }
    Ok((0..n)
        .map(|_| {
            let stroke = rng.random_bool(p);
            let pool = if stroke && !pools.stroke.is_empty() {
                &pools.stroke
            } else {
                &pools.all
            };
            pool[rng.random_range(0..pool.len())]
        })
        .collect())
}

/// Windowed 2-D slices and their label masks, all of one size.
#[derive(Clone, Debug, Default)]
pub struct SliceSet {
    height: usize,
    width: usize,
    images: Vec<f32>,
    masks: Vec<u8>,
    pub pools: Pools,
}

impl SliceSet {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Self::default()
        }
    }

    pub fn slice_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pools.all.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.all.is_empty()
    }

    pub fn push(&mut self, image: &[f32], mask: &[u8]) -> Result<()> {
        let n = self.height * self.width;
        if image.len() != n || mask.len() != n {
            return Err(Error::DimMismatch {
                context: "slice set",
                lhs: vec![self.height, self.width],
                rhs: vec![image.len(), mask.len()],
            });
        }
        let i = self.len();
        self.images.extend_from_slice(image);
        self.masks.extend_from_slice(mask);
        if mask.iter().any(|&m| m != 0) {
            self.pools.stroke.push(i);
        }
        self.pools.all.push(i);
        Ok(())
    }

    /// Appends every slice of an already windowed, resliced volume.
    pub fn push_volume(&mut self, image: &VolumeGrid, labels: &LabelVolume) -> Result<()> {
        if image.dims != labels.dims {
            return Err(Error::DimMismatch {
                context: "slice set",
                lhs: image.dims.to_vec(),
                rhs: labels.dims.to_vec(),
            });
        }
        for z in 0..image.dims[0] {
            self.push(image.slice(z), labels.slice(z))?;
        }
        Ok(())
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.masks[i * n..(i + 1) * n]
    }
}

/// A validation case viewed in one projection.
#[derive(Clone, Debug)]
pub struct ValCase {
    pub id: String,
    pub class: CaseClass,
    /// Windowed intensities, resliced.
    pub image: VolumeGrid,
    /// Labels, resliced.
    pub labels: LabelVolume,
}

/// Window-scales `hu` and reslices it together with `labels` into `p`.
pub fn prepare_view(hu: &VolumeGrid, labels: &LabelVolume, p: Projection) -> Result<(VolumeGrid, LabelVolume)> {
    let (lo, hi) = BRAIN_WINDOW;
    let windowed = window_scale(hu, lo, hi)?;
    Ok((reslice(&windowed, p), reslice_labels(labels, p)))
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub projection: Projection,
    pub train: SliceSet,
    pub val: Vec<ValCase>,
}

impl TrainData {
    /// Loads the manifest's cases in projection `p`. `extra_healthy` fresh
    /// healthy phantoms (seeded from `seed`) join the training slices.
    pub fn load(dir: &Path, manifest: &DatasetManifest, p: Projection, extra_healthy: usize, seed: u64) -> Result<Self> {
        let [_, h, w] = crate::volume::projected_dims(manifest.dims, p);
        let mut train = SliceSet::new(h, w);
        let mut val = Vec::new();
        for entry in &manifest.cases {
            let case = load_case(dir, entry)?;
            let (image, labels) = prepare_view(&case.hu, &case.labels, p)?;
            match entry.split {
                Split::Train => train.push_volume(&image, &labels)?,
                Split::Val => val.push(ValCase {
                    id: entry.id.clone(),
                    class: entry.class,
                    image,
                    labels,
                }),
            }
        }
        for k in 0..extra_healthy {
            let mut spec = PhantomSpec::new(CaseClass::Healthy, extra_seed(seed, k));
            spec.dims = manifest.dims;
            spec.spacing_mm = manifest.spacing_mm;
            spec.noise_sigma = manifest.noise_sigma;
            let (hu, labels) = gen_phantom(&spec)?;
            let (image, labels) = prepare_view(&hu, &labels, p)?;
            train.push_volume(&image, &labels)?;
        }
        if train.is_empty() {
            return Err(invalid("train data", "the manifest has no training cases"));
        }
        Ok(Self {
            projection: p,
            train,
            val,
        })
    }
}

fn extra_seed(seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_414c_5448_5921);
    rng.set_stream(k as u64);
    rng.random()
}

/// Independent random stream for training step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

// ---------------------------------------------------------------------------
// Augmentation

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Number of counter-clockwise quarter turns.
    pub quarter_turns: u8,
    pub flip_lr: bool,
    pub flip_ud: bool,
    pub scale: f64,
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        quarter_turns: 0,
        flip_lr: false,
        flip_ud: false,
        scale: 1.0,
        rotation_deg: 0.0,
    };

    /// Draws all five parameters regardless of the toggles, so switching a
    /// transform off leaves the random stream of the others unchanged.
    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let k = rng.random_range(0..4u8);
        let lr = rng.random_bool(0.5);
        let ud = rng.random_bool(0.5);
        let s = rng.random_range(cfg.scale_min..=cfg.scale_max);
        let r = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        Self {
            quarter_turns: if cfg.rot90 { k } else { 0 },
            flip_lr: cfg.flip_lr && lr,
            flip_ud: cfg.flip_ud && ud,
            scale: if cfg.scale { s } else { 1.0 },
            rotation_deg: if cfg.rotate { r } else { 0.0 },
        }
    }
}

/// Augments a square slice and its mask with freshly drawn parameters.
pub fn augment(image: &[f32], mask: &[u8], dims: (usize, usize), cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Vec<f32>, Vec<u8>)> {
    let params = AugmentParams::draw(cfg, rng);
    apply_augment(image, mask, dims, &params)
}

/// Applies, in order: quarter turns, left-right flip, up-down flip, then
/// scaling and rotation about the slice centre (bilinear for the image,
/// nearest for the mask, zero outside).
pub fn apply_augment(image: &[f32], mask: &[u8], dims: (usize, usize), params: &AugmentParams) -> Result<(Vec<f32>, Vec<u8>)> {
    let (h, w) = dims;
    if h != w {
        return Err(invalid("augment", format!("slice must be square, got {h}x{w}")));
    }
    if image.len() != h * w || mask.len() != h * w {
        return Err(Error::DimMismatch {
            context: "augment",
            lhs: vec![h, w],
            rhs: vec![image.len(), mask.len()],
        });
    }
    let n = h;
    let mut img = image.to_vec();
    let mut msk = mask.to_vec();
    for _ in 0..params.quarter_turns % 4 {
        img = rotate90(&img, n);
        msk = rotate90(&msk, n);
    }
    if params.flip_lr {
        flip_rows(&mut img, n);
        flip_rows(&mut msk, n);
    }
    if params.flip_ud {
        img = flip_ud(&img, n);
        msk = flip_ud(&msk, n);
    }
    if params.scale != 1.0 || params.rotation_deg != 0.0 {
        let (i2, m2) = resample_affine(&img, &msk, n, params.scale, params.rotation_deg);
        img = i2;
        msk = m2;
    }
    Ok((img, msk))
}

/// Counter-clockwise quarter turn of an `n x n` row-major image.
fn rotate90<T: Copy>(src: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            out.push(src[x * n + (n - 1 - y)]);
        }
    }
    out
}

fn flip_rows<T>(buf: &mut [T], n: usize) {
    for row in buf.chunks_exact_mut(n) {
        row.reverse();
    }
}

fn flip_ud<T: Copy>(src: &[T], n: usize) -> Vec<T> {
    src.chunks_exact(n).rev().flatten().copied().collect()
}

/// Output pixel `p` samples the source at `c + R(-theta) (p - c) / s`.
fn resample_affine(img: &[f32], mask: &[u8], n: usize, scale: f64, rotation_deg: f64) -> (Vec<f32>, Vec<u8>) {
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    let mut out_img = vec![0.0f32; n * n];
    let mut out_mask = vec![0u8; n * n];
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= n as isize || x >= n as isize {
            0.0
        } else {
            img[y as usize * n + x as usize] as f64
        }
    };
    for oy in 0..n {
        for ox in 0..n {
            let (dy, dx) = (oy as f64 - c, ox as f64 - c);
            let sy = (cos * dy - sin * dx) / scale + c;
            let sx = (sin * dy + cos * dx) / scale + c;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out_img[oy * n + ox] = v as f32;
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && ny < n as f64 && nx < n as f64 {
                out_mask[oy * n + ox] = mask[ny as usize * n + nx as usize];
            }
        }
    }
    (out_img, out_mask)
}

// ---------------------------------------------------------------------------
// Prediction, TTA and ensembles

/// Anything mapping a slice batch `[N, 1, H, W]` to per-class probabilities
/// `[N, C, H, W]`.
pub trait Predictor {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Predictor for SegModel<f32> {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        SegModel::predict(self, batch)
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        (**self).predict(batch)
    }
}

/// Test-time augmentation around a predictor.
pub struct Tta<P>(pub P);

impl<P: Predictor> Predictor for Tta<P> {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        tta_predict(&self.0, batch)
    }
}

/// Unweighted ensemble of predictors.
pub struct Ensemble<P>(pub Vec<P>);

impl<P: Predictor> Predictor for Ensemble<P> {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        ensemble_predict(&self.0, batch)
    }
}

/// Which spatial axis of an `[N, C, H, W]` tensor to mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    LeftRight,
    UpDown,
}

pub fn flip(t: &Tensor<f32>, axis: Flip) -> Result<Tensor<f32>> {
    let (n, c, h, w) = t.dims4("flip")?;
    let mut data = t.data().to_vec();
    match axis {
        Flip::LeftRight => flip_rows(&mut data, w),
        Flip::UpDown => {
            for plane in data.chunks_exact_mut(h * w) {
                let flipped = flip_ud(plane, w);
                plane.copy_from_slice(&flipped);
            }
        }
    }
    Ok(Tensor::from_vec([n, c, h, w], data)?)
}

/// Mean of the prediction on `batch` and the un-flipped predictions on its
/// left-right and up-down mirror images.
pub fn tta_predict<P: Predictor + ?Sized>(model: &P, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    let plain = model.predict(batch)?;
    let lr = flip(&model.predict(&flip(batch, Flip::LeftRight)?)?, Flip::LeftRight)?;
    let ud = flip(&model.predict(&flip(batch, Flip::UpDown)?)?, Flip::UpDown)?;
    mean_of(&[plain, lr, ud])
}

pub fn ensemble_predict<P: Predictor>(models: &[P], batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    if models.is_empty() {
        return Err(invalid("ensemble_predict", "empty model list"));
    }
    let outputs = models.iter().map(|m| m.predict(batch)).collect::<Result<Vec<_>>>()?;
    mean_of(&outputs)
}

fn mean_of(maps: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = &maps[0];
    let mut acc = vec![0.0f64; first.numel()];
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::DimMismatch {
                context: "prediction average",
                lhs: first.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v as f64;
        }
    }
    let k = maps.len() as f64;
    Ok(Tensor::from_vec(first.shape(), acc.into_iter().map(|a| (a / k) as f32).collect())?)
}

/// Indices of the `k` best scores, best first; equal scores keep their
/// original order.
pub fn select_best(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(invalid("select_best", format!("cannot select {k} of {} candidates", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    Ok(order)
}

/// Predicts every slice of a windowed, resliced volume and returns one
/// probability volume per output channel, in the same layout.
pub fn predict_volume<P: Predictor + ?Sized>(model: &P, image: &VolumeGrid, batch_size: usize) -> Result<Vec<VolumeGrid>> {
    let [d, h, w] = image.dims;
    let plane = h * w;
    let mut channels: Vec<Vec<f32>> = Vec::new();
    for start in (0..d).step_by(batch_size.max(1)) {
        let n = batch_size.max(1).min(d - start);
        let x = Tensor::from_vec([n, 1, h, w], image.values[start * plane..(start + n) * plane].to_vec())?;
        let y = model.predict(&x)?;
        let (yn, c, yh, yw) = y.dims4("predict_volume")?;
        if (yn, yh, yw) != (n, h, w) {
            return Err(Error::DimMismatch {
                context: "predict_volume",
                lhs: vec![n, c, h, w],
                rhs: y.shape().to_vec(),
            });
        }
        if channels.is_empty() {
            channels = vec![Vec::with_capacity(d * plane); c];
        }
        for (i, chunk) in y.data().chunks_exact(plane).enumerate() {
            channels[i % c].extend_from_slice(chunk);
        }
    }
    channels
        .into_iter()
        .map(|v| VolumeGrid::new(image.dims, image.spacing, v, crate::volume::VolumeKind::Probability))
        .collect()
}

/// IoU of the thresholded prediction for one case: the ground-truth class
/// channel for lesion cases, the union of both channels against an empty
/// mask for healthy cases.
pub fn case_iou(probs: &[VolumeGrid], labels: &LabelVolume, class: CaseClass) -> Result<f64> {
    let on = |v: &VolumeGrid| -> Vec<bool> { v.values.iter().map(|&p| p > VALIDATION_THRESHOLD).collect() };
    let (pred, gt) = match class {
        CaseClass::Healthy => {
            let pred: Vec<bool> = probs.iter().map(on).reduce(|a, b| a.iter().zip(&b).map(|(x, y)| *x || *y).collect()).unwrap_or_default();
            let gt = vec![false; pred.len()];
            (pred, gt)
        }
        lesion => {
            let channel = match lesion.label() {
                Label::Ischemic => 0,
                _ => 1,
            };
            let probs = probs.get(channel).ok_or_else(|| invalid("case_iou", "prediction has too few channels"))?;
            (on(probs), labels.class_mask(lesion.label()))
        }
    };
    iou_masks(&pred, &gt)
}

/// Mean patientwise validation IoU.
pub fn validation_iou<P: Predictor + ?Sized>(model: &P, cases: &[ValCase], batch_size: usize) -> Result<f64> {
    if cases.is_empty() {
        return Err(invalid("validation", "no validation cases"));
    }
    let mut total = 0.0;
    for case in cases {
        let probs = predict_volume(model, &case.image, batch_size)?;
        total += case_iou(&probs, &case.labels, case.class)?;
    }
    Ok(total / cases.len() as f64)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub val_iou: f64,
    /// Directory holding the saved parameters, relative to the run
    /// directory, when the run writes to disk.
    pub dir: Option<PathBuf>,
}

/// Contents of `train_log.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub projection: Projection,
    pub checkpoints: Vec<Checkpoint>,
    pub best_step: u64,
    pub best_val_iou: f64,
    pub losses: Vec<f32>,
}

pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    /// Index into `checkpoints` of the selected checkpoint.
    pub best: usize,
    /// Parameters at the selected checkpoint.
    pub model: SegModel<f32>,
    /// Training loss of every step.
    pub losses: Vec<f32>,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints[self.best]
    }
}

/// Assembles one augmented batch: input `[N, 1, H, W]` and the two-channel
/// target (ischemic, hemorrhagic).
pub fn make_batch(slices: &SliceSet, indices: &[usize], cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = slices.slice_dims();
    let plane = h * w;
    let n = indices.len();
    let mut x = Vec::with_capacity(n * plane);
    let mut y = vec![0.0f32; n * 2 * plane];
    for (b, &i) in indices.iter().enumerate() {
        let (img, mask) = augment(slices.image(i), slices.mask(i), (h, w), cfg, rng)?;
        x.extend_from_slice(&img);
        let target = &mut y[b * 2 * plane..(b + 1) * 2 * plane];
        for (k, &m) in mask.iter().enumerate() {
            match m {
                1 => target[k] = 1.0,
                2 => target[plane + k] = 1.0,
                _ => {}
            }
        }
    }
    Ok((Tensor::from_vec([n, 1, h, w], x)?, Tensor::from_vec([n, 2, h, w], y)?))
}

/// Batch size used for validation inference.
const EVAL_BATCH: usize = 16;

/// Trains `model` on `data`. Every `eval_every` steps the validation IoU is
/// computed and the parameters are kept if they beat every earlier
/// checkpoint. With `out_dir`, each checkpoint is written to
/// `step_NNNNNN/`, the selected one again to `best/`, and the log to
/// `train_log.json`.
pub fn train(
    config: &TrainConfig,
    data: &TrainData,
    mut model: SegModel<f32>,
    out_dir: Option<&Path>,
    mut on_checkpoint: impl FnMut(&Checkpoint, f32),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.val.is_empty() {
        return Err(invalid("train", "checkpoint selection needs at least one validation case"));
    }
    let opt = config.optimizer();
    let mut state = opt.init_state(model.store().tensors());
    let mut losses = Vec::with_capacity(config.steps as usize);
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut best: Option<(usize, SegModel<f32>)> = None;
    for step in 0..config.steps {
        let mut rng = step_rng(config.seed, step);
        let indices = sample_batch(&data.train.pools, config.batch_size, config.stroke_sample_prob, &mut rng)?;
        let (x, y) = make_batch(&data.train, &indices, &config.augment, &mut rng)?;

        let mut tape = Tape::new();
        let params = model.store().bind(&mut tape, true);
        let input = tape.leaf(x);
        let pass = model.forward_on(&mut tape, &params, input, BatchNormMode::Train)?;
        let loss = tape.focal_loss(pass.logits, &y, config.focal_gamma, config.focal_alpha)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        tape.backward(loss)?;
        let grads: Vec<&[f32]> = params
            .iter()
            .map(|&p| tape.grad(p).expect("trainable parameter has a gradient"))
            .collect();
        opt.step(model.store_mut().tensors_mut(), &grads, &mut state)?;
        model.apply_batch_stats(&pass.batch_stats);
        losses.push(value);

        let done = step + 1;
        if done % config.eval_every == 0 {
            let val_iou = validation_iou(&model, &data.val, EVAL_BATCH)?;
            let dir = match out_dir {
                Some(root) => {
                    let d = PathBuf::from(format!("step_{done:06}"));
                    model.save(&root.join(&d), Some(&state))?;
                    Some(d)
                }
                None => None,
            };
            let ckpt = Checkpoint { step: done, val_iou, dir };
            let window = &losses[losses.len() - config.eval_every as usize..];
            on_checkpoint(&ckpt, window.iter().sum::<f32>() / window.len() as f32);
            if best.as_ref().is_none_or(|(i, _)| val_iou > checkpoints[*i].val_iou) {
                best = Some((checkpoints.len(), model.clone()));
            }
            checkpoints.push(ckpt);
        }
    }
    let (best, best_model) = best.expect("validated: at least one checkpoint");
    if let Some(root) = out_dir {
        best_model.save(&root.join("best"), None)?;
        let log = TrainLog {
            config: config.clone(),
            projection: data.projection,
            best_step: checkpoints[best].step,
            best_val_iou: checkpoints[best].val_iou,
            checkpoints: checkpoints.clone(),
            losses: losses.clone(),
        };
        let path = root.join(TRAIN_LOG_FILE);
        fs::write(&path, serde_json::to_string_pretty(&log)? + "\n").map_err(io_err(&path))?;
    }
    Ok(TrainOutcome {
        checkpoints,
        best,
        model: best_model,
        losses,
    })
}
