//! Deterministic synthetic head-CT phantoms with labeled lesions.
//!
//! Each phantom is an ellipsoidal skull shell (~1000 HU) around a brain of
//! ~33 HU with low-frequency texture and Gaussian noise. Hemorrhagic
//! lesions are hyperdense (60-80 HU) with sharp edges; ischemic lesions are
//! a faint 10-14 HU hypodensity with a blurred edge.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::volume::{
    hu_normalize, read_smsk, read_svol, write_smsk, write_svol, Dims, LabelVolume, VolumeGrid, VolumeKind,
};
use crate::CaseClass;

pub const BRAIN_HU: f32 = 33.0;
pub const SKULL_HU: f32 = 1000.0;
pub const AIR_HU: f32 = -1000.0;
/// Raw storage offset: files hold `hu + 1024` with slope 1, intercept -1024.
pub const RAW_OFFSET: f64 = 1024.0;

const TEXTURE_AMPLITUDE: f64 = 3.0;
const SKULL_THICKNESS: f64 = 3.0;
const ISCHEMIC_EDGE_SIGMA: f64 = 2.0;
const MAX_PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub class: CaseClass,
    pub dims: Dims,
    pub spacing_mm: f64,
    pub seed: u64,
    pub lesion_count: usize,
    pub noise_sigma: f64,
}

impl PhantomSpec {
    pub fn new(class: CaseClass, seed: u64) -> Self {
        Self {
            class,
            dims: [64, 64, 64],
            spacing_mm: 1.0,
            seed,
            lesion_count: 1,
            noise_sigma: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.dims;
        if d < 16 || h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(invalid(
                "phantom",
                format!("dims {:?}: need D >= 16 and H, W positive multiples of 32", self.dims),
            ));
        }
        if !(1..=2).contains(&self.lesion_count) {
            return Err(invalid("phantom", format!("lesion_count {} not in 1..=2", self.lesion_count)));
        }
        if !(self.noise_sigma >= 0.0 && self.spacing_mm > 0.0) {
            return Err(invalid("phantom", "noise_sigma must be >= 0 and spacing positive"));
        }
        Ok(())
    }
}

/// Normalized ellipsoid radius: `<= 1` inside.
#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Abramowitz & Stegun 7.1.26 (|error| < 1.5e-7).
fn erf(x: f64) -> f64 {
    let s = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    s * (1.0 - poly * (-x * x).exp())
}

struct Wave {
    k: [f64; 3],
    phase: f64,
    amp: f64,
}

fn place_lesion(rng: &mut ChaCha8Rng, brain: &Ellipsoid, dims: Dims) -> Result<Ellipsoid> {
    let scale = dims[1].min(dims[2]) as f64 / 64.0;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let semi = [
            rng.random_range(4.0..8.0) * scale * dims[0] as f64 / dims[1] as f64,
            rng.random_range(4.0..9.0) * scale,
            rng.random_range(4.0..9.0) * scale,
        ];
        let center = [
            brain.center[0] + rng.random_range(-0.6..0.6) * brain.semi[0],
            brain.center[1] + rng.random_range(-0.6..0.6) * brain.semi[1],
            brain.center[2] + rng.random_range(-0.6..0.6) * brain.semi[2],
        ];
        // conservative containment: centre radius plus the largest relative extent
        let extent = (0..3).map(|a| semi[a] / brain.semi[a]).fold(0.0, f64::max);
        if brain.radius(center) + extent <= 0.9 {
            return Ok(Ellipsoid { center, semi });
        }
    }
    Err(invalid("phantom", "could not place a lesion inside the brain"))
}

/// Generates one phantom in HU plus its label volume. Pure function of `spec`.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(VolumeGrid, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.dims;
    let center = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let outer = Ellipsoid {
        center,
        semi: [
            d as f64 * rng.random_range(0.42..0.47),
            h as f64 * rng.random_range(0.42..0.47),
            w as f64 * rng.random_range(0.40..0.45),
        ],
    };
    let brain = Ellipsoid {
        center,
        semi: outer.semi.map(|s| s - SKULL_THICKNESS),
    };
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            k: [
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
            ],
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: TEXTURE_AMPLITUDE / 2.0,
        })
        .collect();
    let mut lesions = Vec::new();
    if spec.class != CaseClass::Healthy {
        for _ in 0..spec.lesion_count {
            let shape = place_lesion(&mut rng, &brain, spec.dims)?;
            let level = match spec.class {
                CaseClass::Hemorrhagic => rng.random_range(60.0..80.0),
                _ => rng.random_range(-14.0..-10.0),
            };
            lesions.push((shape, level));
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid("phantom", e.to_string()))?;
    let label = spec.class.label() as u8;
    let mut values = Vec::with_capacity(d * h * w);
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut hu;
                let mut lab = 0u8;
                if outer.radius(p) > 1.0 {
                    hu = AIR_HU as f64;
                } else if brain.radius(p) > 1.0 {
                    hu = SKULL_HU as f64;
                } else {
                    hu = BRAIN_HU as f64
                        + waves
                            .iter()
                            .map(|wv| wv.amp * (wv.k[0] * p[0] + wv.k[1] * p[1] + wv.k[2] * p[2] + wv.phase).sin())
                            .sum::<f64>();
                    for (shape, level) in &lesions {
                        let r = shape.radius(p);
                        match spec.class {
                            CaseClass::Hemorrhagic => {
                                if r <= 1.0 {
                                    hu = *level;
                                    lab = label;
                                }
                            }
                            _ => {
                                // signed distance to the surface, approximated along the mean semi-axis
                                let mean_semi = shape.semi.iter().sum::<f64>() / 3.0;
                                let dist = (r - 1.0) * mean_semi;
                                let weight = 0.5 * (1.0 - erf(dist / (ISCHEMIC_EDGE_SIGMA * std::f64::consts::SQRT_2)));
                                hu += level * weight;
                                if r <= 1.0 {
                                    lab = label;
                                }
                            }
                        }
                    }
                }
                hu += noise.sample(&mut rng);
                values.push(hu as f32);
                labels.push(lab);
            }
        }
    }
    let spacing = [spec.spacing_mm; 3];
    Ok((
        VolumeGrid::new(spec.dims, spacing, values, VolumeKind::Hu)?,
        LabelVolume::new(spec.dims, spacing, labels)?,
    ))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Fractions of ischemic, hemorrhagic and healthy cases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMix {
    pub ischemic: f64,
    pub hemorrhagic: f64,
    pub healthy: f64,
}

impl ClassMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.ischemic, self.hemorrhagic, self.healthy];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid(
                "class mix",
                format!(
                    "fractions must be in [0,1] and sum to 1, got {} + {} + {}",
                    self.ischemic, self.hemorrhagic, self.healthy
                ),
            ));
        }
        Ok(())
    }
}

impl Default for ClassMix {
    fn default() -> Self {
        Self {
            ischemic: 0.4,
            hemorrhagic: 0.2,
            healthy: 0.4,
        }
    }
}

/// Splits `n` into integer parts proportional to `weights`, assigning the
/// leftover units by largest remainder (ties to the earlier part).
pub fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - counts[a] as f64, exact[b] - counts[b] as f64);
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub class: CaseClass,
    pub seed: u64,
    pub lesion_count: usize,
    pub split: Split,
    pub volume: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub dims: Dims,
    pub spacing_mm: f64,
    pub noise_sigma: f64,
    pub class_mix: ClassMix,
    pub val_fraction: f64,
    pub cases: Vec<CaseEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub count: usize,
    pub mix: ClassMix,
    pub seed: u64,
    pub dims: Dims,
    pub noise_sigma: f64,
    pub val_fraction: f64,
}

impl DatasetOptions {
    pub fn new(count: usize, mix: ClassMix, seed: u64) -> Self {
        Self {
            count,
            mix,
            seed,
            dims: [64, 64, 64],
            noise_sigma: 2.0,
            val_fraction: 0.1,
        }
    }
}

fn case_seed(seed: u64, i: usize) -> u64 {
    // splitmix64 of (seed, i)
    let mut z = seed ^ (i as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Plans the dataset (classes, seeds, split) without writing anything.
pub fn plan_dataset(opts: &DatasetOptions) -> Result<DatasetManifest> {
    opts.mix.validate()?;
    if opts.count == 0 {
        return Err(invalid("dataset", "count must be positive"));
    }
    let classes = [CaseClass::Ischemic, CaseClass::Hemorrhagic, CaseClass::Healthy];
    let counts = largest_remainder(opts.count, &[opts.mix.ischemic, opts.mix.hemorrhagic, opts.mix.healthy]);
    let n_val = (opts.count as f64 * opts.val_fraction).round() as usize;
    let val_counts = largest_remainder(n_val, &counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<(CaseClass, Split)> = Vec::with_capacity(opts.count);
    for ((&class, &n), &v) in classes.iter().zip(&counts).zip(&val_counts) {
        for k in 0..n {
            order.push((class, if k < v { Split::Val } else { Split::Train }));
        }
    }
    // Fisher-Yates with the dataset seed so class and split are interleaved
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let cases = order
        .into_iter()
        .enumerate()
        .map(|(i, (class, split))| {
            let seed = case_seed(opts.seed, i);
            let id = format!("case_{i:03}");
            CaseEntry {
                volume: format!("{id}.svol"),
                mask: format!("{id}.smsk"),
                id,
                class,
                seed,
                lesion_count: 1 + (seed >> 63) as usize,
                split,
            }
        })
        .collect();
    Ok(DatasetManifest {
        seed: opts.seed,
        dims: opts.dims,
        spacing_mm: 1.0,
        noise_sigma: opts.noise_sigma,
        class_mix: opts.mix,
        val_fraction: opts.val_fraction,
        cases,
    })
}

impl DatasetManifest {
    pub fn spec(&self, case: &CaseEntry) -> PhantomSpec {
        PhantomSpec {
            class: case.class,
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            seed: case.seed,
            lesion_count: case.lesion_count,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(&path))
    }

    pub fn cases_in(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }
}

/// Writes every case of `manifest` into `dir` plus the manifest itself.
pub fn write_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for case in &manifest.cases {
        let (hu, mask) = gen_phantom(&manifest.spec(case))?;
        let raw = VolumeGrid::new(
            hu.dims,
            hu.spacing,
            hu.values.iter().map(|&v| (v as f64 + RAW_OFFSET) as f32).collect(),
            VolumeKind::Raw,
        )?;
        write_svol(&dir.join(&case.volume), &raw, 1.0, -RAW_OFFSET)?;
        write_smsk(&dir.join(&case.mask), &mask)?;
    }
    manifest.save(dir)
}

/// Plans and writes a dataset.
pub fn gen_dataset(opts: &DatasetOptions, out_dir: &Path) -> Result<DatasetManifest> {
    let manifest = plan_dataset(opts)?;
    write_dataset(&manifest, out_dir)?;
    Ok(manifest)
}

/// A case loaded from disk: HU volume (after slope/intercept) and labels.
#[derive(Clone, Debug)]
pub struct LoadedCase {
    pub entry: CaseEntry,
    pub hu: VolumeGrid,
    pub labels: LabelVolume,
}

pub fn load_case(dir: &Path, entry: &CaseEntry) -> Result<LoadedCase> {
    let (raw, header) = read_svol(&dir.join(&entry.volume))?;
    let hu = match raw.kind {
        VolumeKind::Raw => hu_normalize(&raw, header.rescale_slope, header.rescale_intercept)?,
        _ => raw,
    };
    let labels = read_smsk(&dir.join(&entry.mask))?;
    if labels.dims != hu.dims {
        return Err(Error::DimMismatch {
            context: "case",
            lhs: hu.dims.to_vec(),
            rhs: labels.dims.to_vec(),
        });
    }
    Ok(LoadedCase {
        entry: entry.clone(),
        hu,
        labels,
    })
}

pub fn dataset_paths(dir: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    manifest
        .cases
        .iter()
        .flat_map(|c| [dir.join(&c.volume), dir.join(&c.mask)])
        .collect()
}
