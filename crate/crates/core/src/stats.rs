//! Segmentation overlap metrics, patientwise reports, classification
//! accuracy and Fisher's exact test.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::{LabelVolume, VolumeGrid};
use crate::CaseClass;

// ---------------------------------------------------------------------------
// Overlap

/// `(|A ∩ B|, |A|, |B|)`.
pub fn overlap_counts(a: &[bool], b: &[bool]) -> Result<(usize, usize, usize)> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            context: "overlap",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let mut counts = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        counts.0 += (x && y) as usize;
        counts.1 += x as usize;
        counts.2 += y as usize;
    }
    Ok(counts)
}

fn dsc_from_counts(inter: usize, na: usize, nb: usize) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

fn iou_from_counts(inter: usize, na: usize, nb: usize) -> f64 {
    let union = na + nb - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Dice coefficient; two empty masks score 1.
pub fn dsc_masks(a: &[bool], b: &[bool]) -> Result<f64> {
    let (i, na, nb) = overlap_counts(a, b)?;
    Ok(dsc_from_counts(i, na, nb))
}

/// Intersection over union; two empty masks score 1.
pub fn iou_masks(a: &[bool], b: &[bool]) -> Result<f64> {
    let (i, na, nb) = overlap_counts(a, b)?;
    Ok(iou_from_counts(i, na, nb))
}

fn binary(context: &'static str, a: &VolumeGrid, b: &VolumeGrid) -> Result<(Vec<bool>, Vec<bool>)> {
    if a.dims != b.dims {
        return Err(Error::DimMismatch {
            context,
            lhs: a.dims.to_vec(),
            rhs: b.dims.to_vec(),
        });
    }
    let on = |v: &VolumeGrid| v.values.iter().map(|&x| x != 0.0).collect();
    Ok((on(a), on(b)))
}

/// Dice coefficient of two binary volumes (non-zero voxels are foreground).
pub fn dsc(pred: &VolumeGrid, gt: &VolumeGrid) -> Result<f64> {
    let (a, b) = binary("dsc", pred, gt)?;
    dsc_masks(&a, &b)
}

pub fn iou(pred: &VolumeGrid, gt: &VolumeGrid) -> Result<f64> {
    let (a, b) = binary("iou", pred, gt)?;
    iou_masks(&a, &b)
}

// ---------------------------------------------------------------------------
// Patientwise report

/// One case to score: predicted and ground-truth labels plus the
/// ground-truth class.
pub struct CaseInput<'a> {
    pub id: &'a str,
    pub class: CaseClass,
    pub pred: &'a LabelVolume,
    pub gt: &'a LabelVolume,
    /// Predicted case class, when the classifier ran.
    pub predicted_class: Option<CaseClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub id: String,
    pub class: CaseClass,
    pub dsc: f64,
    pub iou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_class: Option<CaseClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub n: usize,
    pub dsc_mean: Option<f64>,
    pub dsc_std: Option<f64>,
    pub iou_mean: Option<f64>,
    pub iou_std: Option<f64>,
}

impl ColumnSummary {
    fn from_scores(scores: &[&CaseScore]) -> Self {
        let (dm, ds) = mean_std(scores.iter().map(|s| s.dsc));
        let (im, is) = mean_std(scores.iter().map(|s| s.iou));
        Self {
            n: scores.len(),
            dsc_mean: dm,
            dsc_std: ds,
            iou_mean: im,
            iou_std: is,
        }
    }
}

/// Mean and population standard deviation, summed in input order.
pub fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (Option<f64>, Option<f64>) {
    let n = values.clone().count();
    if n == 0 {
        return (None, None);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (Some(mean), Some(var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Columns {
    /// Hemorrhagic cases.
    pub ih: ColumnSummary,
    /// Ischemic cases.
    pub is: ColumnSummary,
    /// All lesion cases.
    pub ih_is: ColumnSummary,
}

/// Three-way classification outcome. Rows are true classes and columns
/// predictions, both in the order healthy, ischemic, hemorrhagic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub n: usize,
    pub confusion: [[usize; 3]; 3],
    pub errors: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseScore>,
    pub columns: Columns,
    /// Always "population".
    pub std_kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationSummary>,
}

fn class_index(c: CaseClass) -> usize {
    match c {
        CaseClass::Healthy => 0,
        CaseClass::Ischemic => 1,
        CaseClass::Hemorrhagic => 2,
    }
}

/// Scores one case on the mask of its ground-truth class. Healthy cases
/// compare every predicted lesion voxel against an empty mask.
pub fn score_case(case: &CaseInput<'_>) -> Result<CaseScore> {
    if case.pred.dims != case.gt.dims {
        return Err(Error::DimMismatch {
            context: "patientwise report",
            lhs: case.pred.dims.to_vec(),
            rhs: case.gt.dims.to_vec(),
        });
    }
    let (pred, gt): (Vec<bool>, Vec<bool>) = match case.class {
        CaseClass::Healthy => (case.pred.labels.iter().map(|&l| l != 0).collect(), vec![false; case.gt.labels.len()]),
        c => (case.pred.class_mask(c.label()), case.gt.class_mask(c.label())),
    };
    let (i, na, nb) = overlap_counts(&pred, &gt)?;
    Ok(CaseScore {
        id: case.id.to_string(),
        class: case.class,
        dsc: dsc_from_counts(i, na, nb),
        iou: iou_from_counts(i, na, nb),
        predicted_class: case.predicted_class,
    })
}

pub fn patientwise_report(cases: &[CaseInput<'_>]) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(invalid("patientwise report", "empty case list"));
    }
    let scores = cases.iter().map(score_case).collect::<Result<Vec<_>>>()?;
    let pick = |f: &dyn Fn(CaseClass) -> bool| scores.iter().filter(|s| f(s.class)).collect::<Vec<_>>();
    let columns = Columns {
        ih: ColumnSummary::from_scores(&pick(&|c| c == CaseClass::Hemorrhagic)),
        is: ColumnSummary::from_scores(&pick(&|c| c == CaseClass::Ischemic)),
        ih_is: ColumnSummary::from_scores(&pick(&|c| c != CaseClass::Healthy)),
    };
    let classification = if cases.iter().all(|c| c.predicted_class.is_some()) {
        let truth: Vec<CaseClass> = cases.iter().map(|c| c.class).collect();
        let pred: Vec<CaseClass> = cases.iter().filter_map(|c| c.predicted_class).collect();
        Some(classification_summary(&truth, &pred)?)
    } else {
        None
    };
    Ok(MetricsReport {
        cases: scores,
        columns,
        std_kind: "population".into(),
        classification,
    })
}

pub fn classification_summary(truth: &[CaseClass], pred: &[CaseClass]) -> Result<ClassificationSummary> {
    let errors = error_count(truth, pred)?;
    let mut confusion = [[0usize; 3]; 3];
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[class_index(t)][class_index(p)] += 1;
    }
    Ok(ClassificationSummary {
        n: truth.len(),
        confusion,
        errors,
        accuracy: accuracy(truth, pred)?,
    })
}

/// Number of positions where the two label lists disagree.
pub fn error_count(truth: &[CaseClass], pred: &[CaseClass]) -> Result<usize> {
    if truth.len() != pred.len() {
        return Err(Error::DimMismatch {
            context: "accuracy",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    Ok(truth.iter().zip(pred).filter(|(t, p)| t != p).count())
}

pub fn accuracy(truth: &[CaseClass], pred: &[CaseClass]) -> Result<f64> {
    let errors = error_count(truth, pred)?;
    if truth.is_empty() {
        return Err(invalid("accuracy", "empty label lists"));
    }
    Ok((truth.len() - errors) as f64 / truth.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Plain-text rendering: a per-case table, the column summary and the
/// confusion matrix.
pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:<12} {:>7} {:>7} {:<12}", "case", "class", "DSC", "IoU", "predicted");
    for c in &report.cases {
        let pred = c.predicted_class.map_or("-", CaseClass::name);
        let _ = writeln!(out, "{:<12} {:<12} {:>7.3} {:>7.3} {:<12}", c.id, c.class.name(), c.dsc, c.iou, pred);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<10} {:>4} {:>15} {:>15}", "column", "n", "DSC mean±std", "IoU mean±std");
    for (name, col) in [("IH", &report.columns.ih), ("IS", &report.columns.is), ("IH+IS", &report.columns.ih_is)] {
        let _ = writeln!(
            out,
            "{:<10} {:>4} {:>15} {:>15}",
            name,
            col.n,
            format!("{}±{}", fmt_opt(col.dsc_mean), fmt_opt(col.dsc_std)),
            format!("{}±{}", fmt_opt(col.iou_mean), fmt_opt(col.iou_std)),
        );
    }
    let _ = writeln!(out, "(std is the {} standard deviation)", report.std_kind);
    if let Some(cls) = &report.classification {
        let _ = writeln!(out);
        let _ = writeln!(out, "accuracy {:.4} ({} errors of {})", cls.accuracy, cls.errors, cls.n);
        let _ = writeln!(out, "{:<12} {:>8} {:>9} {:>12}", "true\\pred", "healthy", "ischemic", "hemorrhagic");
        for (row, class) in cls.confusion.iter().zip(CaseClass::ALL) {
            let _ = writeln!(out, "{:<12} {:>8} {:>9} {:>12}", class.name(), row[0], row[1], row[2]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Fisher's exact test

pub const FISHER_METHOD: &str = "fisher-exact-two-sided";
/// Tables whose probability is within this relative margin of the observed
/// one count as equally extreme.
const TIE_SLACK: f64 = 1e-7;
const MAX_TOTAL: u64 = 4_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub p_value: f64,
    pub table: [[u64; 2]; 2],
    pub method: String,
}

/// `ln k!` for `k = 0..=n`, accumulated in order.
fn log_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0f64;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Two-sided Fisher exact test on a 2x2 table: the total probability of
/// every table with the same margins that is no more likely than the
/// observed one.
pub fn fisher_exact_table(table: [[u64; 2]; 2]) -> Result<TestResult> {
    let [[a, b], [c, d]] = table;
    let total = a + b + c + d;
    if total == 0 || total > MAX_TOTAL {
        return Err(invalid("fisher_exact", format!("table total {total} must be in 1..={MAX_TOTAL}")));
    }
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let lf = log_factorials(total);
    let f = |k: u64| lf[k as usize];
    let fixed = f(r1) + f(r2) + f(c1) + f(total - c1) - f(total);
    let log_p = |x: u64| fixed - f(x) - f(r1 - x) - f(c1 - x) - f(r2 + x - c1);
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let observed = log_p(a);
    let cutoff = observed + TIE_SLACK.ln_1p();
    let p: f64 = (lo..=hi).map(log_p).filter(|&lp| lp <= cutoff).map(f64::exp).sum();
    Ok(TestResult {
        p_value: p.min(1.0),
        table,
        method: FISHER_METHOD.into(),
    })
}

/// Compares two error counts out of `n` cases each.
pub fn fisher_exact(errors_a: u64, errors_b: u64, n: u64) -> Result<TestResult> {
    if errors_a > n || errors_b > n || n == 0 {
        return Err(invalid(
            "fisher_exact",
            format!("error counts {errors_a} and {errors_b} must lie in 0..={n} with n > 0"),
        ));
    }
    fisher_exact_table([[errors_a, n - errors_a], [errors_b, n - errors_b]])
}
