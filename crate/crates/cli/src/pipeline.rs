//! The subcommands. Each returns a [`Report`] whose JSON part is the
//! command's machine-readable output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use strokeseg_core::fusion::{
    classify, fuse_case, predict_projections, ClassMaps, ClassificationRecord, ProjectionMaps, ProjectionModels,
    HEMORRHAGIC, ISCHEMIC,
};
use strokeseg_core::gradcheck::{model_suite, GRADCHECK_TOLERANCE};
use strokeseg_core::model::SegModel;
use strokeseg_core::phantom::{load_case, plan_dataset, write_dataset, CaseEntry, ClassMix, DatasetManifest, DatasetOptions, Split};
use strokeseg_core::stats::{
    classification_summary, fisher_exact, patientwise_report, render_report, CaseInput, ClassificationSummary, TestResult,
};
use strokeseg_core::train::{train, TrainData, TrainLog, TRAIN_LOG_FILE};
use strokeseg_core::volume::{read_smsk, read_svol, write_smsk, write_svol, Dims, LabelVolume, Projection, VolumeGrid, VolumeKind};
use strokeseg_core::CaseClass;
use strokeseg_tensor::gradcheck::{op_suite, GradCheckOptions, GradCheckReport};

use crate::config::ViewEnsemble;
use crate::{EvaluateArgs, Failure, FuseArgs, PhantomArgs, PredictArgs, Report, RunConfig, StatsArgs, TrainArgs};

pub const SUMMARY_FILE: &str = "summary.json";
pub const INDEX_FILE: &str = "index.json";
pub const CLASSES_FILE: &str = "classes.json";
pub const BEST_DIR: &str = "best";

const CLASS_NAMES: [&str; 2] = ["ischemic", "hemorrhagic"];

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// defaults

pub fn cmd_defaults(config: &RunConfig) -> Result<Report, Failure> {
    let text = serde_json::to_string_pretty(config).map_err(|e| Failure::usage(e.to_string()))?;
    Report::new(text, config)
}

// ---------------------------------------------------------------------------
// phantom

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseRow {
    pub id: String,
    pub class: CaseClass,
    pub split: Split,
    pub lesion_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PhantomOutput {
    pub dataset: PathBuf,
    pub seed: u64,
    pub count: usize,
    pub dims: Dims,
    pub class_counts: ClassCounts,
    pub val_count: usize,
    pub cases: Vec<CaseRow>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub ischemic: usize,
    pub hemorrhagic: usize,
    pub healthy: usize,
}

fn lesions(c: &CaseEntry) -> usize {
    if c.class == CaseClass::Healthy {
        0
    } else {
        c.lesion_count
    }
}

pub fn cmd_phantom(config: &mut RunConfig, a: &PhantomArgs) -> Result<Report, Failure> {
    let p = &mut config.phantom;
    if let Some(n) = a.count {
        p.count = n;
    }
    if let Some(m) = &a.mix {
        if m.len() != 3 {
            return Err(Failure::usage(format!("--mix needs 3 comma-separated fractions, got {}", m.len())));
        }
        p.mix = ClassMix {
            ischemic: m[0],
            hemorrhagic: m[1],
            healthy: m[2],
        };
    }
    if let Some(v) = a.val_fraction {
        p.val_fraction = v;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(o) = &a.out {
        config.paths.data = o.clone();
    }
    config.validate()?;
    let p = &config.phantom;
    let opts = DatasetOptions {
        dims: p.dims,
        noise_sigma: p.noise_sigma,
        val_fraction: p.val_fraction,
        ..DatasetOptions::new(p.count, p.mix, config.seed)
    };
    let manifest = plan_dataset(&opts)?;
    let dir = &config.paths.data;
    create_dir(dir)?;
    write_dataset(&manifest, dir)?;

    let mut counts = ClassCounts::default();
    let mut text = format!("{:<10} {:<12} {:<6} lesions\n", "case", "class", "split");
    for c in &manifest.cases {
        match c.class {
            CaseClass::Ischemic => counts.ischemic += 1,
            CaseClass::Hemorrhagic => counts.hemorrhagic += 1,
            CaseClass::Healthy => counts.healthy += 1,
        }
        let split = if c.split == Split::Val { "val" } else { "train" };
        let _ = writeln!(text, "{:<10} {:<12} {:<6} {}", c.id, c.class, split, lesions(c));
    }
    let out = PhantomOutput {
        dataset: dir.clone(),
        seed: manifest.seed,
        count: manifest.cases.len(),
        dims: manifest.dims,
        class_counts: counts,
        val_count: manifest.cases_in(Split::Val).count(),
        cases: manifest
            .cases
            .iter()
            .map(|c| CaseRow {
                id: c.id.clone(),
                class: c.class,
                split: c.split,
                lesion_count: lesions(c),
            })
            .collect(),
    };
    Report::new(text, &out)
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    /// Run directory relative to the view directory.
    pub dir: PathBuf,
    pub best_step: u64,
    pub best_val_iou: f64,
    pub final_loss: f32,
}

/// Contents of `<runs>/<view>/summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSummary {
    pub projection: Projection,
    pub runs: Vec<RunSummary>,
    /// Seeds of the kept runs, best first.
    pub selected: Vec<u64>,
}

impl ViewSummary {
    /// Directories of the selected best checkpoints, relative to the view
    /// directory.
    pub fn selected_dirs(&self) -> Vec<PathBuf> {
        self.selected
            .iter()
            .map(|s| {
                let run = self.runs.iter().find(|r| r.seed == *s).expect("selected seed has a run");
                run.dir.join(BEST_DIR)
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainOutput {
    pub runs_dir: PathBuf,
    pub views: Vec<ViewSummary>,
}

pub fn run_dir_name(seed: u64) -> String {
    format!("seed_{seed:03}")
}

/// Keeps the `keep` runs with the highest validation IoU, earlier runs
/// first on ties.
fn select_runs(runs: &[RunSummary], keep: usize) -> Result<Vec<u64>, Failure> {
    let scores: Vec<f64> = runs.iter().map(|r| r.best_val_iou).collect();
    let best = strokeseg_core::train::select_best(&scores, keep)?;
    Ok(best.into_iter().map(|i| runs[i].seed).collect())
}

pub fn cmd_train(config: &mut RunConfig, a: &TrainArgs, progress: &crate::Progress) -> Result<Report, Failure> {
    if let Some(d) = &a.data {
        config.paths.data = d.clone();
    }
    if let Some(o) = &a.out {
        config.paths.runs = o.clone();
    }
    if let Some(s) = a.steps {
        config.train.steps = s;
    }
    if let Some(e) = a.eval_every {
        config.train.eval_every = e;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    let views: Vec<Projection> = if a.projection.is_empty() { Projection::ALL.to_vec() } else { a.projection.clone() };
    for &p in &views {
        let e = match p {
            Projection::Axial => &mut config.ensemble.axial,
            Projection::Coronal => &mut config.ensemble.coronal,
            Projection::Sagittal => &mut config.ensemble.sagittal,
        };
        if let Some(n) = a.seeds {
            e.seeds = n;
            e.keep = e.keep.min(n);
        }
        if let Some(k) = a.keep {
            e.keep = k;
        }
    }
    config.validate()?;
    let manifest = DatasetManifest::load(&config.paths.data)?;
    let runs_dir = config.paths.runs.clone();
    create_dir(&runs_dir)?;

    // One job per (view, seed). Runs are independent, so they can share
    // the worker threads without changing any result.
    let mut data = Vec::new();
    for &p in &views {
        data.push(TrainData::load(
            &config.paths.data,
            &manifest,
            p,
            config.train.extra_healthy,
            config.train.seed,
        )?);
    }
    let jobs: Vec<(usize, u64)> = views
        .iter()
        .enumerate()
        .flat_map(|(v, &p)| {
            let ViewEnsemble { seeds, .. } = config.ensemble.get(p);
            (0..seeds as u64).map(move |i| (v, i))
        })
        .collect();
    let config_ref = &*config;
    let results: Vec<Result<RunSummary, Failure>> = jobs
        .par_iter()
        .map(|&(v, i)| {
            let p = views[v];
            let mut cfg = config_ref.train.clone();
            cfg.seed = config_ref.train.seed + i;
            let dir = PathBuf::from(run_dir_name(cfg.seed));
            let out = runs_dir.join(p.name()).join(&dir);
            let model = SegModel::<f32>::new(config_ref.model.clone(), cfg.seed)?;
            let outcome = train(&cfg, &data[v], model, Some(&out), |ck, loss| {
                let line = format!(
                    "{} seed {} step {} loss {loss:.4} val_iou {:.4}",
                    p.name(),
                    cfg.seed,
                    ck.step,
                    ck.val_iou
                );
                progress(&line);
            })?;
            let best = outcome.best_checkpoint();
            Ok(RunSummary {
                seed: cfg.seed,
                dir,
                best_step: best.step,
                best_val_iou: best.val_iou,
                final_loss: *outcome.losses.last().expect("at least one step"),
            })
        })
        .collect();

    let mut summaries = Vec::new();
    let mut results = results.into_iter();
    for &p in &views {
        let e = config.ensemble.get(p);
        let runs = results.by_ref().take(e.seeds).collect::<Result<Vec<_>, _>>()?;
        let selected = select_runs(&runs, e.keep)?;
        let summary = ViewSummary {
            projection: p,
            runs,
            selected,
        };
        write_json(&runs_dir.join(p.name()).join(SUMMARY_FILE), &summary)?;
        summaries.push(summary);
    }

    let mut text = format!("{:<9} {:>5} {:>10} {:>8} {:>10} kept\n", "view", "seed", "best_step", "val_iou", "final_loss");
    for s in &summaries {
        for r in &s.runs {
            let kept = if s.selected.contains(&r.seed) { "*" } else { "" };
            let _ = writeln!(
                text,
                "{:<9} {:>5} {:>10} {:>8.4} {:>10.4} {kept}",
                s.projection.name(),
                r.seed,
                r.best_step,
                r.best_val_iou,
                r.final_loss
            );
        }
    }
    Report::new(
        text,
        &TrainOutput {
            runs_dir,
            views: summaries,
        },
    )
}

/// Reads a view's summary and loads its selected models.
pub fn load_view_models(runs_dir: &Path, p: Projection) -> Result<(ViewSummary, Vec<SegModel<f32>>), Failure> {
    let view_dir = runs_dir.join(p.name());
    let summary: ViewSummary = read_json(&view_dir.join(SUMMARY_FILE))?;
    let models = summary
        .selected_dirs()
        .iter()
        .map(|d| SegModel::load(&view_dir.join(d)).map(|(m, _)| m))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((summary, models))
}

/// Reads one run's training log.
pub fn load_train_log(runs_dir: &Path, p: Projection, seed: u64) -> Result<TrainLog, Failure> {
    read_json(&runs_dir.join(p.name()).join(run_dir_name(seed)).join(TRAIN_LOG_FILE))
}

// ---------------------------------------------------------------------------
// predict

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn includes(self, s: Split) -> bool {
        match self {
            SplitArg::All => true,
            SplitArg::Train => s == Split::Train,
            SplitArg::Val => s == Split::Val,
        }
    }
}

/// Files of one view: ischemic then hemorrhagic probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewFiles {
    pub axial: [PathBuf; 2],
    pub coronal: [PathBuf; 2],
    pub sagittal: [PathBuf; 2],
}

impl ViewFiles {
    fn for_case(id: &str) -> Self {
        let f = |p: Projection| CLASS_NAMES.map(|c| Path::new(id).join(format!("{}_{c}.svol", p.name())));
        Self {
            axial: f(Projection::Axial),
            coronal: f(Projection::Coronal),
            sagittal: f(Projection::Sagittal),
        }
    }

    fn get(&self, p: Projection) -> &[PathBuf; 2] {
        match p {
            Projection::Axial => &self.axial,
            Projection::Coronal => &self.coronal,
            Projection::Sagittal => &self.sagittal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedCase {
    pub case_id: String,
    pub dims: Dims,
    /// Paths relative to the predictions directory.
    pub maps: ViewFiles,
}

/// Contents of `<predictions>/index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictIndex {
    /// Number of models used per view.
    pub models: [usize; 3],
    pub cases: Vec<PredictedCase>,
}

/// Loads the six probability maps of one predicted case.
pub fn load_maps(pred_dir: &Path, case: &PredictedCase) -> Result<ProjectionMaps, Failure> {
    let read = |p: Projection| -> Result<ClassMaps, Failure> {
        let [i, h] = case.maps.get(p);
        Ok([read_svol(&pred_dir.join(i))?.0, read_svol(&pred_dir.join(h))?.0])
    };
    Ok(ProjectionMaps {
        axial: read(Projection::Axial)?,
        coronal: read(Projection::Coronal)?,
        sagittal: read(Projection::Sagittal)?,
    })
}

pub fn cmd_predict(config: &mut RunConfig, a: &PredictArgs) -> Result<Report, Failure> {
    if let Some(d) = &a.data {
        config.paths.data = d.clone();
    }
    if let Some(r) = &a.runs {
        config.paths.runs = r.clone();
    }
    if let Some(o) = &a.out {
        config.paths.predictions = o.clone();
    }
    config.validate()?;
    let manifest = DatasetManifest::load(&config.paths.data)?;
    let (_, axial) = load_view_models(&config.paths.runs, Projection::Axial)?;
    let (_, coronal) = load_view_models(&config.paths.runs, Projection::Coronal)?;
    let (_, sagittal) = load_view_models(&config.paths.runs, Projection::Sagittal)?;
    let models = ProjectionModels { axial, coronal, sagittal };
    models.validate()?;
    let out_dir = config.paths.predictions.clone();
    create_dir(&out_dir)?;

    let entries: Vec<_> = manifest.cases.iter().filter(|c| a.split.includes(c.split)).collect();
    if entries.is_empty() {
        return Err(Failure::usage(format!("no cases in split {:?}", a.split)));
    }
    let batch = config.predict_batch;
    let cases = entries
        .par_iter()
        .map(|entry| -> Result<PredictedCase, Failure> {
            let case = load_case(&config.paths.data, entry)?;
            let maps = predict_projections(&models, &case.hu, batch)?;
            let files = ViewFiles::for_case(&entry.id);
            create_dir(&out_dir.join(&entry.id))?;
            for p in Projection::ALL {
                for (v, path) in maps.get(p).iter().zip(files.get(p)) {
                    write_svol(&out_dir.join(path), v, 1.0, 0.0)?;
                }
            }
            Ok(PredictedCase {
                case_id: entry.id.clone(),
                dims: case.hu.dims,
                maps: files,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let index = PredictIndex {
        models: [models.axial.len(), models.coronal.len(), models.sagittal.len()],
        cases,
    };
    write_json(&out_dir.join(INDEX_FILE), &index)?;
    let text = format!(
        "predicted {} cases with {}/{}/{} axial/coronal/sagittal models into {}\n",
        index.cases.len(),
        index.models[0],
        index.models[1],
        index.models[2],
        out_dir.display()
    );
    Report::new(text, &index)
}

// ---------------------------------------------------------------------------
// fuse

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedCase {
    pub case_id: String,
    /// Label volume after fusion and closing, relative to the fused directory.
    pub labels: PathBuf,
    /// `V_pred` per class, relative to the fused directory.
    pub vpred: [PathBuf; 2],
    /// Foreground voxels per class after closing.
    pub voxels: [usize; 2],
}

/// Contents of `<fused>/index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseIndex {
    pub params: strokeseg_core::fusion::FusionParams,
    pub cases: Vec<FusedCase>,
}

pub fn cmd_fuse(config: &mut RunConfig, a: &FuseArgs) -> Result<Report, Failure> {
    if let Some(p) = &a.pred {
        config.paths.predictions = p.clone();
    }
    if let Some(o) = &a.out {
        config.paths.fused = o.clone();
    }
    let f = &mut config.fusion;
    for (dst, src) in [(&mut f.k_axial, a.k_axial), (&mut f.k_coronal, a.k_coronal), (&mut f.k_sagittal, a.k_sagittal)] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    if let Some(r) = a.closing_radius {
        f.closing_radius = r;
    }
    config.validate()?;
    let pred_dir = &config.paths.predictions;
    let index: PredictIndex = read_json(&pred_dir.join(INDEX_FILE))?;
    let out_dir = config.paths.fused.clone();
    create_dir(&out_dir)?;
    let params = config.fusion.clone();
    let cases = index
        .cases
        .par_iter()
        .map(|case| -> Result<FusedCase, Failure> {
            let maps = load_maps(pred_dir, case)?;
            let fused = fuse_case(&maps, &params)?;
            let labels = fused.labels()?;
            create_dir(&out_dir.join(&case.case_id))?;
            let id = Path::new(&case.case_id);
            let labels_path = id.join("labels.smsk");
            write_smsk(&out_dir.join(&labels_path), &labels)?;
            let vpred = CLASS_NAMES.map(|c| id.join(format!("vpred_{c}.svol")));
            for (v, path) in fused.vpred.iter().zip(&vpred) {
                write_svol(&out_dir.join(path), v, 1.0, 0.0)?;
            }
            let count = |c: usize| fused.binary[c].values.iter().filter(|&&v| v != 0.0).count();
            Ok(FusedCase {
                case_id: case.case_id.clone(),
                labels: labels_path,
                vpred,
                voxels: [count(ISCHEMIC), count(HEMORRHAGIC)],
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let out = FuseIndex { params, cases };
    write_json(&out_dir.join(INDEX_FILE), &out)?;
    let mut text = format!("{:<10} {:>9} {:>12}\n", "case", "ischemic", "hemorrhagic");
    for c in &out.cases {
        let _ = writeln!(text, "{:<10} {:>9} {:>12}", c.case_id, c.voxels[0], c.voxels[1]);
    }
    Report::new(text, &out)
}

// ---------------------------------------------------------------------------
// classify

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyOutput {
    pub params: strokeseg_core::fusion::ClassifierParams,
    pub records: Vec<ClassificationRecord>,
}

pub fn cmd_classify(config: &mut RunConfig, a: &crate::ClassifyArgs) -> Result<Report, Failure> {
    if let Some(f) = &a.fused {
        config.paths.fused = f.clone();
    }
    config.validate()?;
    let dir = &config.paths.fused;
    let index: FuseIndex = read_json(&dir.join(INDEX_FILE))?;
    let params = config.classifier.clone();
    let records = index
        .cases
        .par_iter()
        .map(|case| -> Result<ClassificationRecord, Failure> {
            let vi = read_vpred(&dir.join(&case.vpred[0]))?;
            let vh = read_vpred(&dir.join(&case.vpred[1]))?;
            let c = classify(&vi, &vh, &params);
            Ok(ClassificationRecord {
                case_id: case.case_id.clone(),
                predicted_class: c.class,
                m_isch: c.m_isch,
                m_hem: c.m_hem,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_json(&dir.join(CLASSES_FILE), &records)?;
    let mut text = format!("{:<10} {:<12} {:>8} {:>8}\n", "case", "class", "m_isch", "m_hem");
    let fmt = |m: Option<f64>| m.map_or("-".to_string(), |v| format!("{v:.3}"));
    for r in &records {
        let _ = writeln!(
            text,
            "{:<10} {:<12} {:>8} {:>8}",
            r.case_id,
            r.predicted_class,
            fmt(r.m_isch),
            fmt(r.m_hem)
        );
    }
    Report::new(text, &ClassifyOutput { params, records })
}

fn read_vpred(path: &Path) -> Result<VolumeGrid, Failure> {
    let (v, _) = read_svol(path)?;
    if v.kind != VolumeKind::Score {
        return Err(Failure::usage(format!("{}: expected a V_pred score volume, found {:?}", path.display(), v.kind)));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// evaluate

/// Reads the fused label volume of every case in `index`.
pub fn load_fused_labels(fused_dir: &Path, index: &FuseIndex) -> Result<Vec<LabelVolume>, Failure> {
    index
        .cases
        .iter()
        .map(|c| read_smsk(&fused_dir.join(&c.labels)).map_err(Failure::from))
        .collect()
}

pub fn cmd_evaluate(config: &mut RunConfig, a: &EvaluateArgs) -> Result<Report, Failure> {
    if let (Some(t), Some(p)) = (&a.truth, &a.predicted) {
        return evaluate_class_lists(t, p);
    }
    if let Some(d) = &a.data {
        config.paths.data = d.clone();
    }
    if let Some(f) = &a.fused {
        config.paths.fused = f.clone();
    }
    if let Some(o) = &a.out {
        config.paths.metrics = o.clone();
    }
    config.validate()?;
    let manifest = DatasetManifest::load(&config.paths.data)?;
    let dir = &config.paths.fused;
    let index: FuseIndex = read_json(&dir.join(INDEX_FILE))?;
    let classes_path = dir.join(CLASSES_FILE);
    let classes: Option<Vec<ClassificationRecord>> =
        if classes_path.exists() { Some(read_json(&classes_path)?) } else { None };
    let preds = load_fused_labels(dir, &index)?;
    let mut gts = Vec::new();
    let mut truth = Vec::new();
    for c in &index.cases {
        let entry = manifest
            .cases
            .iter()
            .find(|e| e.id == c.case_id)
            .ok_or_else(|| Failure::usage(format!("case {} is not in the dataset manifest", c.case_id)))?;
        gts.push(load_case(&config.paths.data, entry)?.labels);
        truth.push(entry.class);
    }
    let predicted_class = |id: &str| {
        classes
            .as_ref()
            .and_then(|cs| cs.iter().find(|r| r.case_id == id).map(|r| r.predicted_class))
    };
    let inputs: Vec<CaseInput<'_>> = index
        .cases
        .iter()
        .zip(preds.iter().zip(&gts))
        .zip(&truth)
        .map(|((c, (pred, gt)), &class)| CaseInput {
            id: &c.case_id,
            class,
            pred,
            gt,
            predicted_class: predicted_class(&c.case_id),
        })
        .collect();
    let report = patientwise_report(&inputs)?;
    write_json(&config.paths.metrics, &report)?;
    Report::new(render_report(&report), &report)
}

fn evaluate_class_lists(truth: &Path, predicted: &Path) -> Result<Report, Failure> {
    let t: Vec<CaseClass> = read_json(truth)?;
    let p: Vec<CaseClass> = read_json(predicted)?;
    let summary: ClassificationSummary = classification_summary(&t, &p)?;
    let text = format!(
        "{} cases, {} errors, accuracy {:.4}\n",
        summary.n, summary.errors, summary.accuracy
    );
    Report::new(text, &summary)
}

// ---------------------------------------------------------------------------
// stats and gradcheck

pub fn cmd_stats(a: &StatsArgs) -> Result<Report, Failure> {
    let r: TestResult = fisher_exact(a.a, a.b, a.n)?;
    let text = format!(
        "{} vs {} errors of {} each: p = {:.4} ({})\n",
        a.a, a.b, a.n, r.p_value, r.method
    );
    Report::new(text, &r)
}

#[derive(Debug, Serialize)]
pub struct GradcheckOutput {
    pub tolerance: f64,
    pub passed: bool,
    pub checks: Vec<GradCheckReport>,
}

/// Runs every gradient check. The report comes back even when a check
/// fails, together with the failure.
pub fn gradcheck_report() -> Result<GradcheckOutput, Failure> {
    let opts = GradCheckOptions::default();
    let mut checks = op_suite(opts)?;
    checks.extend(model_suite(opts)?);
    let passed = checks.iter().all(|r| r.passes(GRADCHECK_TOLERANCE));
    Ok(GradcheckOutput {
        tolerance: GRADCHECK_TOLERANCE,
        passed,
        checks,
    })
}

pub fn cmd_gradcheck() -> Result<Report, (Failure, Option<Box<Report>>)> {
    let out = gradcheck_report().map_err(|f| (f, None))?;
    let mut text = format!("{:<28} {:>12} {:>8}\n", "check", "max_rel_err", "entries");
    for r in &out.checks {
        let flag = if r.passes(out.tolerance) { "" } else { "  FAIL" };
        let _ = writeln!(text, "{:<28} {:>12.3e} {:>8}{flag}", r.name, r.max_rel_error, r.checked);
    }
    let report = Report::new(text, &out).map_err(|f| (f, None))?;
    if out.passed {
        Ok(report)
    } else {
        let failing = out.checks.iter().filter(|r| !r.passes(out.tolerance)).count();
        Err((
            Failure::check(format!("{failing} checks exceed relative error {:e}", out.tolerance)),
            Some(Box::new(report)),
        ))
    }
}
