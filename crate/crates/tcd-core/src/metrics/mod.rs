//! Evaluation metrics: confusion-matrix accumulation, binary metrics
//! (F1 / IoU / OA), semantic change metrics (mIoU / SeK / F_scd) and the
//! change-size stratified report.
//!
//! The semantic metrics follow the common semantic-change-detection
//! benchmark convention; see `docs/metrics.md` for the exact formulas that
//! the in-repo brute-force oracle pins down. All metric values are
//! percentages in `[0, 100]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square count matrix; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![0; classes * classes],
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, r: usize) -> u64 {
        (0..self.classes).map(|c| self.get(r, c)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|r| self.get(r, c)).sum()
    }

    /// Count `pred` against `gt`, skipping `ignore` pixels in the ground truth.
    pub fn accumulate(
        &mut self,
        pred: &Array2<u8>,
        gt: &Array2<u8>,
        ignore: Option<u8>,
    ) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape {
                context: "confusion accumulate".into(),
                expected: vec![gt.nrows(), gt.ncols()],
                found: vec![pred.nrows(), pred.ncols()],
            });
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if Some(g) == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= self.classes || p >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: p.max(g),
                    num_classes: self.classes,
                });
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Merge another matrix into this one (parallel-shard reduction).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging mismatched matrices");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Binary change-detection metrics, as percentages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcdMetrics {
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    /// Metrics whose denominator was zero and were therefore pinned to 0.
    pub flagged: Vec<String>,
}

/// F1 / IoU / OA of the change class from a 2x2 matrix
/// (index 0 = no-change, 1 = change).
pub fn bcd_metrics(cm: &ConfusionMatrix) -> Result<BcdMetrics> {
    if cm.classes() != 2 {
        return Err(Error::Shape {
            context: "bcd metrics need a 2x2 matrix".into(),
            expected: vec![2, 2],
            found: vec![cm.classes(), cm.classes()],
        });
    }
    let tp = cm.get(1, 1) as f64;
    let fp = cm.get(0, 1) as f64;
    let fn_ = cm.get(1, 0) as f64;
    let tn = cm.get(0, 0) as f64;
    let mut flagged = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            flagged.push(name.to_string());
            0.0
        } else {
            100.0 * num / den
        }
    };
    let f1 = ratio("f1", 2.0 * tp, 2.0 * tp + fp + fn_);
    let iou = ratio("iou", tp, tp + fp + fn_);
    let oa = ratio("oa", tp + tn, tp + tn + fp + fn_);
    Ok(BcdMetrics { f1, iou, oa, flagged })
}

/// Semantic change-detection metrics, as percentages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScdMetrics {
    pub miou: f64,
    pub sek: f64,
    pub f_scd: f64,
    pub flagged: Vec<String>,
}

/// Map a semantic label map and a change mask into the no-change-aware
/// layout used for SCD scoring: 0 where unchanged, `class + 1` elsewhere.
pub fn semantic_change_map(sem: &Array2<u8>, change: &Array2<u8>) -> Array2<u8> {
    let mut out = Array2::<u8>::zeros(sem.dim());
    for ((o, &s), &c) in out.iter_mut().zip(sem.iter()).zip(change.iter()) {
        if c != 0 {
            *o = s + 1;
        }
    }
    out
}

/// mIoU / SeK / F_scd from a `(K+1) x (K+1)` matrix with index 0 = no-change.
///
/// - `mIoU` averages the binary no-change IoU and the binary change IoU.
/// - `SeK` is Cohen's kappa of the matrix with the `(0,0)` entry zeroed,
///   scaled by `exp(IoU_change - 1)`.
/// - `F_scd` is the harmonic mean of semantic precision and recall
///   restricted to change regions.
pub fn scd_metrics(cm: &ConfusionMatrix) -> Result<ScdMetrics> {
    let n = cm.classes();
    if n < 2 {
        return Err(Error::Shape {
            context: "scd metrics need at least 2 classes".into(),
            expected: vec![2, 2],
            found: vec![n, n],
        });
    }
    let mut flagged = Vec::new();
    let total = cm.total() as f64;

    let nc_nc = cm.get(0, 0) as f64;
    let gt_nc = cm.row_sum(0) as f64;
    let pred_nc = cm.col_sum(0) as f64;
    let fg: f64 = (1..n).map(|r| (1..n).map(|c| cm.get(r, c) as f64).sum::<f64>()).sum();

    // binary 2x2 collapse: [ [nc_nc, gt-nc pred-c], [gt-c pred-nc, both changed] ]
    let c2 = [[nc_nc, gt_nc - nc_nc], [pred_nc - nc_nc, fg]];
    let iou_of = |i: usize, flagged: &mut Vec<String>, name: &str| {
        let den = c2[i][0] + c2[i][1] + c2[0][i] + c2[1][i] - c2[i][i];
        if den == 0.0 {
            flagged.push(name.to_string());
            0.0
        } else {
            c2[i][i] / den
        }
    };
    let iou_nc = iou_of(0, &mut flagged, "iou_nochange");
    let iou_fg = iou_of(1, &mut flagged, "iou_change");
    let miou = 100.0 * (iou_nc + iou_fg) / 2.0;

    // kappa on the matrix with (0,0) zeroed
    let n0_total = total - nc_nc;
    let sek = if n0_total == 0.0 {
        flagged.push("sek".to_string());
        0.0
    } else {
        let diag_n0: f64 = (1..n).map(|i| cm.get(i, i) as f64).sum();
        let po = diag_n0 / n0_total;
        let mut pe = 0.0;
        for i in 0..n {
            let row = if i == 0 { gt_nc - nc_nc } else { cm.row_sum(i) as f64 };
            let col = if i == 0 { pred_nc - nc_nc } else { cm.col_sum(i) as f64 };
            pe += row * col / (n0_total * n0_total);
        }
        if (1.0 - pe).abs() < 1e-12 {
            flagged.push("sek".to_string());
            0.0
        } else {
            let kappa = (po - pe) / (1.0 - pe);
            100.0 * kappa * (iou_fg - 1.0).exp()
        }
    };

    // semantic F1 restricted to change regions
    let sc_tp: f64 = (1..n).map(|i| cm.get(i, i) as f64).sum();
    let pred_change = total - pred_nc;
    let gt_change = total - gt_nc;
    let f_scd = if pred_change == 0.0 || gt_change == 0.0 || sc_tp == 0.0 {
        flagged.push("f_scd".to_string());
        0.0
    } else {
        let precision = sc_tp / pred_change;
        let recall = sc_tp / gt_change;
        100.0 * 2.0 * precision * recall / (precision + recall)
    };

    Ok(ScdMetrics {
        miou,
        sek,
        f_scd,
        flagged,
    })
}

// ---------------------------------------------------------------------------
// stratified reporting
// ---------------------------------------------------------------------------

/// Change-ratio stratum bounds: small `< 5%`, large `> 25%`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Small,
    Large,
    All,
}

impl Stratum {
    pub fn contains(self, change_ratio: f64) -> bool {
        match self {
            Stratum::Small => change_ratio < 0.05,
            Stratum::Large => change_ratio > 0.25,
            Stratum::All => true,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stratum::Small => "small (<5%)",
            Stratum::Large => "large (>25%)",
            Stratum::All => "all",
        }
    }
}

/// One evaluated sample entering the stratified report.
#[derive(Debug, Clone)]
pub struct StratSample {
    pub pred_sem_t1: Array2<u8>,
    pub pred_sem_t2: Array2<u8>,
    pub gt_sem_t1: Array2<u8>,
    pub gt_sem_t2: Array2<u8>,
    /// Fraction of changed pixels in the GT change mask.
    pub change_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassOaRow {
    pub class_index: usize,
    pub class_name: String,
    /// Per-class OA of the first run, percent; None when the class has no
    /// ground-truth pixels in the stratum.
    pub oa_a: Option<f64>,
    pub oa_b: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumBlock {
    pub stratum: Stratum,
    pub samples: usize,
    pub per_class: Vec<ClassOaRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub strata: Vec<StratumBlock>,
    pub notes: Vec<String>,
}

/// Per-class overall accuracy: fraction of ground-truth pixels of each
/// class (pooled over both phases) predicted with the correct class.
fn per_class_oa(samples: &[&StratSample], num_classes: usize) -> Vec<Option<f64>> {
    let mut correct = vec![0u64; num_classes];
    let mut total = vec![0u64; num_classes];
    for s in samples {
        for (pred, gt) in [(&s.pred_sem_t1, &s.gt_sem_t1), (&s.pred_sem_t2, &s.gt_sem_t2)] {
            for (&p, &g) in pred.iter().zip(gt.iter()) {
                let g = g as usize;
                if g < num_classes {
                    total[g] += 1;
                    if p == g as u8 {
                        correct[g] += 1;
                    }
                }
            }
        }
    }
    (0..num_classes)
        .map(|c| {
            if total[c] == 0 {
                None
            } else {
                Some(100.0 * correct[c] as f64 / total[c] as f64)
            }
        })
        .collect()
}

/// Change-size stratified per-class accuracy comparison of two runs.
///
/// Both runs must score the same samples in the same order. Empty strata
/// are omitted from the blocks and recorded in `notes`.
pub fn stratified_report(
    run_a: &[StratSample],
    run_b: Option<&[StratSample]>,
    class_names: &[String],
) -> Result<StratifiedReport> {
    if let Some(b) = run_b {
        if b.len() != run_a.len() {
            return Err(Error::Data(format!(
                "stratified report: run sizes differ ({} vs {})",
                run_a.len(),
                b.len()
            )));
        }
    }
    for s in run_a {
        if !(0.0..=1.0).contains(&s.change_ratio) {
            return Err(Error::Data(format!(
                "change ratio {} outside [0, 1]",
                s.change_ratio
            )));
        }
    }
    let k = class_names.len();
    let mut strata = Vec::new();
    let mut notes = Vec::new();
    for stratum in [Stratum::Small, Stratum::Large, Stratum::All] {
        let idx: Vec<usize> = (0..run_a.len())
            .filter(|&i| stratum.contains(run_a[i].change_ratio))
            .collect();
        if idx.is_empty() {
            notes.push(format!("stratum {} is empty; omitted", stratum.label()));
            continue;
        }
        let sel_a: Vec<&StratSample> = idx.iter().map(|&i| &run_a[i]).collect();
        let oa_a = per_class_oa(&sel_a, k);
        let oa_b = run_b.map(|b| {
            let sel_b: Vec<&StratSample> = idx.iter().map(|&i| &b[i]).collect();
            per_class_oa(&sel_b, k)
        });
        let per_class = (0..k)
            .map(|c| {
                let a = oa_a[c];
                let b = oa_b.as_ref().and_then(|v| v[c]);
                ClassOaRow {
                    class_index: c,
                    class_name: class_names[c].clone(),
                    oa_a: a,
                    oa_b: b,
                    delta: match (a, b) {
                        (Some(a), Some(b)) => Some(b - a),
                        _ => None,
                    },
                }
            })
            .collect();
        strata.push(StratumBlock {
            stratum,
            samples: idx.len(),
            per_class,
        });
    }
    Ok(StratifiedReport { strata, notes })
}

/// Render the stratified report as an aligned plain-text table.
pub fn render_stratified_table(report: &StratifiedReport) -> String {
    let mut out = String::new();
    for block in &report.strata {
        out.push_str(&format!("stratum: {} ({} samples)\n", block.stratum.label(), block.samples));
        out.push_str(&format!("{:<18} {:>8} {:>8} {:>8}\n", "category", "run A", "run B", "delta"));
        for row in &block.per_class {
            let fmt = |v: Option<f64>| match v {
                Some(v) => format!("{v:.2}"),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{:<18} {:>8} {:>8} {:>8}\n",
                row.class_name,
                fmt(row.oa_a),
                fmt(row.oa_b),
                fmt(row.delta)
            ));
        }
        out.push('\n');
    }
    for note in &report.notes {
        out.push_str(&format!("note: {note}\n"));
    }
    out
}
