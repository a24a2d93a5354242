//! Test-time aggregation, binary and multi-class metrics, fold aggregation
//! and report writers.
//!
//! The positive class is `abnormal` and the binary score is `P(abnormal)`;
//! for the seven-class task that is the summed probability of classes 4-7.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::augment::{crop_view, normalize, sample_at, AugmentConfig, N_CHANNELS};
use crate::data::{Category, CellRecord, Task};
use crate::error::{Error, Result};
use crate::nn::{softmax, Network, Tensor};
use crate::rng;
use crate::train::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TTAConfig {
    /// Shifted views per cell; shifts are uniform in `[-d, d]^2` with `d`
    /// the augmentation's maximum translation.
    pub n_random_views: usize,
    /// 1 (center crop) or 10 (center and four corners, each also mirrored).
    pub n_crops: usize,
    pub seed: u64,
}

impl Default for TTAConfig {
    fn default() -> Self {
        TTAConfig {
            n_random_views: 10,
            n_crops: 10,
            seed: 0,
        }
    }
}

impl TTAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_random_views == 0 {
            return Err(Error::Config("tta.n_random_views must be at least 1".into()));
        }
        if self.n_crops != 1 && self.n_crops != 10 {
            return Err(Error::Config(format!(
                "tta.n_crops must be 1 or 10, got {}",
                self.n_crops
            )));
        }
        Ok(())
    }

    /// `(row, col, mirror)` of every crop for a sample of side `size`.
    pub fn crop_offsets(&self, size: usize, crop: usize) -> Vec<(usize, usize, bool)> {
        let c = (size - crop) / 2;
        let e = size - crop;
        if self.n_crops == 1 {
            return vec![(c, c, false)];
        }
        let mut out = Vec::with_capacity(10);
        for (r, q) in [(c, c), (0, 0), (0, e), (e, 0), (e, e)] {
            out.push((r, q, false));
            out.push((r, q, true));
        }
        out
    }
}

/// A trained network together with the input pipeline it was trained on.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    pub net: &'a Network,
    pub augment: &'a AugmentConfig,
    pub means: &'a [f32],
    pub tta: &'a TTAConfig,
}

impl Predictor<'_> {
    fn crop(&self) -> usize {
        self.net.spec().input.height
    }

    /// Mean softmax over all views and crops of one cell.
    pub fn predict_cell(&self, records: &[CellRecord], cell: usize) -> Result<Vec<f64>> {
        self.tta.validate()?;
        let channels = self.net.input_channels();
        if channels > N_CHANNELS {
            return Err(Error::Config(format!("network expects {channels} input channels")));
        }
        if self.means.len() != N_CHANNELS {
            return Err(Error::Config(format!(
                "expected {N_CHANNELS} channel means, got {}",
                self.means.len()
            )));
        }
        let crop = self.crop();
        if crop > self.augment.out_size || self.net.spec().input.width != crop {
            return Err(Error::Config(format!(
                "network input {}x{} does not fit samples of side {}",
                crop,
                self.net.spec().input.width,
                self.augment.out_size
            )));
        }
        let offsets = self.tta.crop_offsets(self.augment.out_size, crop);
        let mut views = Vec::with_capacity(self.tta.n_random_views * offsets.len());
        for v in 0..self.tta.n_random_views {
            let mut r = rng::stream(self.tta.seed, &[rng::TAG_TTA, cell as u64, v as u64]);
            let shift = crate::augment::jitter_offset(self.augment.max_translation, &mut r);
            let sample = sample_at(records, cell, 0.0, shift, self.augment)?;
            for &(oy, ox, mirror) in &offsets {
                let mut t = crop_view(&sample.tensor, oy, ox, crop, mirror, channels)?;
                normalize(&mut t, self.means)?;
                views.push(t);
            }
        }
        let n_views = views.len();
        let mut data = Vec::with_capacity(n_views * crop * crop * channels);
        for v in &views {
            data.extend_from_slice(v.data());
        }
        let batch = Tensor::from_vec(&[n_views, crop, crop, channels], data)?;
        let probs = softmax(&self.net.infer(&batch)?)?;
        let n = self.net.n_classes();
        let mut mean = vec![0f64; n];
        for row in probs.data().chunks(n) {
            for (m, &p) in mean.iter_mut().zip(row) {
                *m += p as f64;
            }
        }
        let total: f64 = mean.iter().sum();
        Ok(mean.into_iter().map(|m| m / total).collect())
    }

    pub fn predict_cells(&self, records: &[CellRecord], cells: &[usize]) -> Result<Vec<Vec<f64>>> {
        cells.par_iter().map(|&c| self.predict_cell(records, c)).collect()
    }
}

/// `P(abnormal)` from a probability vector of either task.
pub fn abnormal_score(task: Task, probs: &[f64]) -> f64 {
    match task {
        Task::TwoClass => probs[1],
        Task::SevenClass => probs[3..].iter().sum(),
    }
}

/// Counts and rates of a thresholded binary classifier. Rates whose
/// denominator is zero are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    pub sens: Option<f64>,
    pub spec: Option<f64>,
    pub acc: f64,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// A cell is called abnormal when its score is strictly above `threshold`,
/// which matches argmax with ties going to `normal` at 0.5.
pub fn binary_metrics(scores: &[f64], abnormal: &[bool], threshold: f64) -> Result<BinaryMetrics> {
    if scores.len() != abnormal.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            abnormal.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("binary metrics"));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Numeric(format!("score {s} outside [0, 1]")));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    for (&s, &pos) in scores.iter().zip(abnormal) {
        match (pos, s > threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    Ok(BinaryMetrics {
        tp,
        fn_,
        tn,
        fp,
        sens: ratio(tp, tp + fn_),
        spec: ratio(tn, tn + fp),
        acc: (tp + tn) as f64 / scores.len() as f64,
    })
}

fn ser_threshold<S: Serializer>(t: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if t.is_finite() {
        s.serialize_f64(*t)
    } else if *t > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Cells with `score >= threshold` are called positive.
    #[serde(serialize_with = "ser_threshold")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl Roc {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold);
        }
        out
    }
}

/// ROC over every distinct score plus the `+inf` and `-inf` thresholds, and
/// the trapezoidal area under it. Tied scores move along the diagonal of
/// their block, so the area equals the Mann-Whitney statistic.
pub fn roc_auc(scores: &[f64], abnormal: &[bool]) -> Result<Roc> {
    if scores.len() != abnormal.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            abnormal.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = abnormal.iter().filter(|&&a| a).count();
    let neg = abnormal.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let point = |tp: usize, fp: usize, threshold| RocPoint {
        fpr: fp as f64 / neg as f64,
        tpr: tp as f64 / pos as f64,
        threshold,
    };
    let mut points = vec![point(0, 0, f64::INFINITY)];
    let (mut tp, mut fp) = (0usize, 0usize);
    // Twice the area in units of one positive-negative pair, kept exact.
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if abnormal[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) * (tp + tp0)) as u128;
        points.push(point(tp, fp, s));
    }
    points.push(point(tp, fp, f64::NEG_INFINITY));
    Ok(Roc {
        points,
        auc: area2 as f64 / (2.0 * pos as f64 * neg as f64),
    })
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> usize {
        self.row_sums().iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.n()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.trace(), self.total())
    }

    /// Collapses a seven-class matrix to normal/abnormal.
    pub fn by_category(&self) -> Confusion {
        let mut counts = vec![vec![0; 2]; 2];
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                counts[Category::of_class(t as u8 + 1).index()][Category::of_class(p as u8 + 1).index()] += v;
            }
        }
        Confusion { counts }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for j in 0..self.n() {
            let _ = write!(out, ",{j}");
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], n: usize) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0; n]; n];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n || l >= n {
            return Err(Error::LabelOutOfRange {
                label: p.max(l),
                n_classes: n,
            });
        }
        counts[l][p] += 1;
    }
    Ok(Confusion { counts })
}

/// Mean over classes of `diag / row_sum`.
pub fn average_accuracy(c: &Confusion) -> Result<f64> {
    if c.n() == 0 {
        return Err(Error::EmptyInput("confusion matrix"));
    }
    let mut sum = 0.0;
    for (i, row) in c.counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            return Err(Error::Numeric(format!("class {i} has no cells")));
        }
        sum += row[i] as f64 / total as f64;
    }
    Ok(sum / c.n() as f64)
}

/// Mean and sample standard deviation of a metric over folds. `mean` is
/// `None` when any fold left the metric undefined; `std` needs two folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n_folds: usize,
}

pub fn aggregate_folds(values: &[Option<f64>]) -> Aggregate {
    let n = values.len();
    if n == 0 || values.iter().any(Option::is_none) {
        return Aggregate {
            mean: None,
            std: None,
            n_folds: n,
        };
    }
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Aggregate {
        mean: Some(mean),
        std,
        n_folds: n,
    }
}

impl Aggregate {
    /// `mean±std` with values multiplied by `scale`, as in a results table.
    pub fn format(&self, scale: f64, decimals: usize) -> String {
        match (self.mean, self.std) {
            (None, _) => "undefined".into(),
            (Some(m), None) => format!("{:.*}", decimals, m * scale),
            (Some(m), Some(s)) => format!("{:.*}±{:.*}", decimals, m * scale, decimals, s * scale),
        }
    }
}

/// Prediction for one validation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub cell: usize,
    pub patient_id: String,
    pub class_label: u8,
    pub target: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub abnormal_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldEval {
    pub fold: usize,
    pub n_cells: usize,
    /// Task-level confusion (2x2 or 7x7).
    pub confusion: Confusion,
    pub accuracy: f64,
    /// Mean per-class recall of `confusion`; `None` when a class is absent.
    pub average_accuracy: Option<f64>,
    /// Normal/abnormal metrics at threshold 0.5 on `P(abnormal)`.
    pub binary: BinaryMetrics,
    pub roc: Option<Roc>,
    pub auc: Option<f64>,
    /// Reasons some metric of this fold is undefined.
    pub flags: Vec<String>,
}

/// Scores one fold from its cell predictions.
pub fn evaluate_fold(fold: usize, task: Task, preds: &[CellPrediction]) -> Result<FoldEval> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("fold predictions"));
    }
    let n = task.n_classes();
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let targets: Vec<usize> = preds.iter().map(|p| p.target).collect();
    let conf = confusion(&predicted, &targets, n)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.abnormal_score.clamp(0.0, 1.0)).collect();
    let abnormal: Vec<bool> = preds
        .iter()
        .map(|p| Category::of_class(p.class_label) == Category::Abnormal)
        .collect();
    let binary = binary_metrics(&scores, &abnormal, 0.5)?;
    let mut flags = Vec::new();
    let roc = match roc_auc(&scores, &abnormal) {
        Ok(r) => Some(r),
        Err(Error::SingleClass) => {
            flags.push("only one category present: AUC undefined".to_string());
            None
        }
        Err(e) => return Err(e),
    };
    if binary.sens.is_none() {
        flags.push("no abnormal cells: sensitivity undefined".into());
    }
    if binary.spec.is_none() {
        flags.push("no normal cells: specificity undefined".into());
    }
    let average = average_accuracy(&conf).ok();
    if average.is_none() {
        flags.push("a class has no cells: average accuracy undefined".into());
    }
    Ok(FoldEval {
        fold,
        n_cells: preds.len(),
        accuracy: conf.accuracy().expect("non-empty fold"),
        average_accuracy: average,
        binary,
        auc: roc.as_ref().map(|r| r.auc),
        roc,
        confusion: conf,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    /// Task-level accuracy (`trace / total`).
    pub accuracy: Aggregate,
    pub average_accuracy: Aggregate,
    pub sens: Aggregate,
    pub spec: Aggregate,
    /// Normal/abnormal accuracy, equal to `accuracy` for the 2-class task.
    pub binary_acc: Aggregate,
    pub auc: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: Task,
    pub channels: usize,
    pub folds: Vec<FoldEval>,
    pub summary: Summary,
    /// Folds with at least one undefined metric.
    pub flagged_folds: Vec<usize>,
    /// Sum of the per-fold confusion matrices.
    pub pooled_confusion: Confusion,
}

impl EvalReport {
    pub fn new(task: Task, channels: usize, folds: Vec<FoldEval>) -> Self {
        let col = |f: &dyn Fn(&FoldEval) -> Option<f64>| aggregate_folds(&folds.iter().map(f).collect::<Vec<_>>());
        let summary = Summary {
            accuracy: col(&|f| Some(f.accuracy)),
            average_accuracy: col(&|f| f.average_accuracy),
            sens: col(&|f| f.binary.sens),
            spec: col(&|f| f.binary.spec),
            binary_acc: col(&|f| Some(f.binary.acc)),
            auc: col(&|f| f.auc),
        };
        let n = task.n_classes();
        let mut pooled = vec![vec![0; n]; n];
        for f in &folds {
            for (i, row) in f.confusion.counts.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    pooled[i][j] += v;
                }
            }
        }
        EvalReport {
            task,
            channels,
            flagged_folds: folds.iter().filter(|f| !f.flags.is_empty()).map(|f| f.fold).collect(),
            folds,
            summary,
            pooled_confusion: Confusion { counts: pooled },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per fold plus a `mean±std` row.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("fold,n_cells,acc,sens,spec,auc,average_acc\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                f.fold,
                f.n_cells,
                f.accuracy,
                opt(f.binary.sens),
                opt(f.binary.spec),
                opt(f.auc),
                opt(f.average_accuracy)
            );
        }
        let s = &self.summary;
        let _ = writeln!(
            out,
            "mean±std,,{},{},{},{},{}",
            s.accuracy.format(100.0, 1),
            s.sens.format(100.0, 1),
            s.spec.format(100.0, 1),
            s.auc.format(1.0, 3),
            s.average_accuracy.format(100.0, 1)
        );
        out
    }

    /// Writes `report.json`, `summary.csv`, per-fold `roc_foldN.csv` and
    /// `confusion_foldN.csv`, `confusion.csv` (pooled) and SVG plots.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        put("report.json", self.to_json())?;
        put("summary.csv", self.summary_csv())?;
        put("confusion.csv", self.pooled_confusion.to_csv())?;
        put("confusion.svg", confusion_svg(&self.pooled_confusion))?;
        for f in &self.folds {
            put(&format!("confusion_fold{}.csv", f.fold), f.confusion.to_csv())?;
            if let Some(roc) = &f.roc {
                put(&format!("roc_fold{}.csv", f.fold), roc.to_csv())?;
            }
        }
        put("roc.svg", roc_svg(&self.folds))?;
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    /// Table-style summary: AUC, Acc, Sens, Spec (2-class) or Acc and
    /// average accuracy (7-class).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.summary;
        let name = format!("{}C", self.channels);
        match self.task {
            Task::TwoClass => {
                writeln!(
                    f,
                    "{:<8} {:>14} {:>12} {:>12} {:>12}",
                    "input", "AUC", "Acc (%)", "Sens (%)", "Spec (%)"
                )?;
                writeln!(
                    f,
                    "{:<8} {:>14} {:>12} {:>12} {:>12}",
                    name,
                    s.auc.format(1.0, 3),
                    s.accuracy.format(100.0, 1),
                    s.sens.format(100.0, 1),
                    s.spec.format(100.0, 1)
                )?;
            }
            Task::SevenClass => {
                writeln!(f, "{:<8} {:>12} {:>18}", "input", "Acc (%)", "Average acc (%)")?;
                writeln!(
                    f,
                    "{:<8} {:>12} {:>18}",
                    name,
                    s.accuracy.format(100.0, 1),
                    s.average_accuracy.format(100.0, 1)
                )?;
            }
        }
        if !self.flagged_folds.is_empty() {
            writeln!(f, "folds with undefined metrics: {:?}", self.flagged_folds)?;
        }
        Ok(())
    }
}

const SVG_COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// ROC curves of all folds on the unit square.
pub fn roc_svg(folds: &[FoldEval]) -> String {
    let (size, pad) = (400.0, 40.0);
    let span = size - 2.0 * pad;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect x=\"{pad}\" y=\"{pad}\" width=\"{span}\" height=\"{span}\" fill=\"none\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{pad}\" stroke=\"#999\" stroke-dasharray=\"4\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">false positive rate</text>\n\
         <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">true positive rate</text>\n",
        pad + span,
        pad + span,
        size / 2.0,
        size - 8.0,
        size / 2.0,
        size / 2.0
    );
    for (k, f) in folds.iter().enumerate() {
        let Some(roc) = &f.roc else { continue };
        let pts: Vec<String> = roc
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", pad + p.fpr * span, pad + (1.0 - p.tpr) * span))
            .collect();
        let color = SVG_COLORS[k % SVG_COLORS.len()];
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">fold {} AUC {:.3}</text>",
            pad + span - 120.0,
            pad + span - 10.0 - 16.0 * k as f64,
            f.fold,
            roc.auc
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Row-normalized confusion heatmap with counts in each cell.
pub fn confusion_svg(c: &Confusion) -> String {
    let n = c.n().max(1);
    let cell = 48.0;
    let pad = 40.0;
    let size = pad + cell * n as f64 + 10.0;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let sums = c.row_sums();
    for (i, row) in c.counts.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let frac = if sums[i] > 0 { v as f64 / sums[i] as f64 } else { 0.0 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (pad + j as f64 * cell, pad + i as f64 * cell);
            let _ = writeln!(
                out,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"white\"/>\n\
                 <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{i}</text>\n<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{i}</text>",
            pad - 6.0,
            pad + i as f64 * cell + cell / 2.0 + 4.0,
            pad + i as f64 * cell + cell / 2.0,
            pad - 8.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Predicts every cell in `cells` and packages the results.
pub fn predict_fold(
    predictor: &Predictor<'_>,
    records: &[CellRecord],
    cells: &[usize],
    task: Task,
) -> Result<Vec<CellPrediction>> {
    if predictor.net.n_classes() != task.n_classes() {
        return Err(Error::Config(format!(
            "network has {} outputs but task {task} needs {}",
            predictor.net.n_classes(),
            task.n_classes()
        )));
    }
    let probs = predictor.predict_cells(records, cells)?;
    Ok(cells
        .iter()
        .zip(probs)
        .map(|(&cell, probs)| {
            let r = &records[cell];
            CellPrediction {
                cell,
                patient_id: r.patient_id.clone(),
                class_label: r.class_label,
                target: task.target(r.class_label),
                predicted: argmax(&probs),
                abnormal_score: abnormal_score(task, &probs),
                probs,
            }
        })
        .collect())
}

pub fn predictions_csv(preds: &[CellPrediction]) -> String {
    let mut out = String::from("cell,patient,class,target,predicted,p_abnormal,probs\n");
    for p in preds {
        let probs: Vec<String> = p.probs.iter().map(f64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.cell,
            p.patient_id,
            p.class_label,
            p.target,
            p.predicted,
            p.abnormal_score,
            probs.join(" ")
        );
    }
    out
}
