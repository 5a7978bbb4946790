//! Classification metrics: confusion matrix, per-class and averaged
//! precision / sensitivity / F1, one-vs-rest ROC-AUC and PR-AUC, and a normal
//! approximation confidence interval for sensitivity.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self::with_names((0..num_classes).map(|c| format!("class{c}")).collect())
    }

    pub fn with_names(class_names: Vec<String>) -> Self {
        let c = class_names.len();
        Self { counts: vec![vec![0; c]; c], class_names }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::shape("confusion matrix must be square and non-empty"));
        }
        let mut cm = Self::new(c);
        cm.counts = counts;
        Ok(cm)
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], class_names: Vec<String>) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::shape(format!("{} labels vs {} predictions", labels.len(), predictions.len())));
        }
        let mut cm = Self::with_names(class_names);
        for (&t, &p) in labels.iter().zip(predictions) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.num_classes();
        if truth >= c || predicted >= c {
            return Err(Error::data(format!("class pair ({truth}, {predicted}) outside {c} classes")));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// One-vs-rest `(tp, fp, fn, tn)` for `class`.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[class][class];
        let predicted: u64 = self.counts.iter().map(|r| r[class]).sum();
        let actual: u64 = self.counts[class].iter().sum();
        let (fp, fn_) = (predicted - tp, actual - tp);
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.class_names.iter().cloned());
        write_record(&mut w, path, &header)?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            write_record(&mut w, path, &rec)?;
        }
        flush(w, path)
    }
}

/// Multiclass accuracy in percent: `100 · trace / total`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::data("accuracy of an empty confusion matrix")),
        total => Ok(100.0 * cm.trace() as f64 / total as f64),
    }
}

/// Harmonic mean of precision and sensitivity; 0 when both are 0.
pub fn f1_score(precision: f64, sensitivity: f64) -> f64 {
    let denom = precision + sensitivity;
    if denom > 0.0 { 2.0 * precision * sensitivity / denom } else { 0.0 }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub f1: f64,
    /// Number of true samples of the class.
    pub support: u64,
    /// Set when a zero denominator forced a value to 0.
    pub undefined: bool,
}

pub fn per_class_prf(cm: &ConfusionMatrix, class: usize) -> ClassMetrics {
    let (tp, fp, fn_, _) = cm.one_vs_rest(class);
    let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fn_);
    let (p, s) = (precision.unwrap_or(0.0), sensitivity.unwrap_or(0.0));
    ClassMetrics {
        precision: p,
        sensitivity: s,
        f1: f1_score(p, s),
        support: tp + fn_,
        undefined: precision.is_none() || sensitivity.is_none(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Average {
    /// Unweighted mean over classes.
    #[default]
    Macro,
    /// Mean weighted by class support.
    Weighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Averaged {
    pub precision: f64,
    pub sensitivity: f64,
    /// Mean of per-class F1 values, not F1 of the averaged precision and sensitivity.
    pub f1: f64,
}

pub fn averaged_metrics(cm: &ConfusionMatrix, average: Average) -> Averaged {
    let per: Vec<ClassMetrics> = (0..cm.num_classes()).map(|c| per_class_prf(cm, c)).collect();
    let weights: Vec<f64> = match average {
        Average::Macro => vec![1.0; per.len()],
        Average::Weighted => per.iter().map(|m| m.support as f64).collect(),
    };
    let total: f64 = weights.iter().sum();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if total == 0.0 { 0.0 } else { per.iter().zip(&weights).map(|(m, w)| f(m) * w).sum::<f64>() / total }
    };
    Averaged { precision: mean(|m| m.precision), sensitivity: mean(|m| m.sensitivity), f1: mean(|m| m.f1) }
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> Averaged {
    averaged_metrics(cm, Average::Macro)
}

/// Per-sample class probabilities with their true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPredictions {
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl ScoredPredictions {
    pub fn new(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::shape(format!("{} score rows vs {} labels", probs.len(), labels.len())));
        }
        let c = probs.first().map_or(0, Vec::len);
        for (row, &label) in probs.iter().zip(&labels) {
            if row.len() != c || label >= c {
                return Err(Error::shape("score rows must share one class count covering every label"));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::data("score rows must be probability vectors"));
            }
        }
        Ok(Self { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Arg-max predictions, lowest class index on ties.
    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|row| row.iter().enumerate().fold(0, |best, (i, &p)| if p > row[best] { i } else { best }))
            .collect()
    }

    /// One-vs-rest scores and positive flags for `class`.
    pub fn binary(&self, class: usize) -> (Vec<f64>, Vec<bool>) {
        (self.probs.iter().map(|r| r[class]).collect(), self.labels.iter().map(|&l| l == class).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// Samples grouped by distinct score, highest first, as `(score, positives, negatives)`.
fn score_groups(scores: &[f64], positive: &[bool]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in order {
        let (p, n) = if positive[i] { (1, 0) } else { (0, 1) };
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += p;
                g.2 += n;
            }
            _ => groups.push((scores[i], p, n)),
        }
    }
    groups
}

/// ROC curve points `(threshold, fpr, tpr)` from `(inf, 0, 0)` to `(min, 1, 1)`.
/// `None` unless both classes are present.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Option<Vec<CurvePoint>> {
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let neg = positive.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    let mut points = vec![CurvePoint { threshold: f64::INFINITY, x: 0.0, y: 0.0 }];
    let (mut tp, mut fp) = (0, 0);
    for (threshold, p, n) in score_groups(scores, positive) {
        tp += p;
        fp += n;
        points.push(CurvePoint { threshold, x: fp as f64 / neg, y: tp as f64 / pos });
    }
    Some(points)
}

/// Area under the ROC curve by the trapezoid rule; tied scores contribute half credit.
pub fn binary_roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let curve = roc_curve(scores, positive)?;
    Some(curve.windows(2).map(|w| (w[1].x - w[0].x) * (w[1].y + w[0].y) / 2.0).sum())
}

/// Precision-recall points `(threshold, recall, precision)`, one per distinct score.
pub fn pr_curve(scores: &[f64], positive: &[bool]) -> Option<Vec<CurvePoint>> {
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    if pos == 0.0 {
        return None;
    }
    let (mut tp, mut fp) = (0, 0);
    Some(
        score_groups(scores, positive)
            .into_iter()
            .map(|(threshold, p, n)| {
                tp += p;
                fp += n;
                CurvePoint { threshold, x: tp as f64 / pos, y: tp as f64 / (tp + fp) as f64 }
            })
            .collect(),
    )
}

/// Average precision: precision at each threshold weighted by the recall gained there.
pub fn binary_pr_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let curve = pr_curve(scores, positive)?;
    let mut prev = 0.0;
    Some(
        curve
            .iter()
            .map(|p| {
                let area = (p.x - prev) * p.y;
                prev = p.x;
                area
            })
            .sum(),
    )
}

pub fn roc_auc(scores: &ScoredPredictions, class: usize) -> Option<f64> {
    let (s, p) = scores.binary(class);
    binary_roc_auc(&s, &p)
}

pub fn pr_auc(scores: &ScoredPredictions, class: usize) -> Option<f64> {
    let (s, p) = scores.binary(class);
    binary_pr_auc(&s, &p)
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean one-vs-rest ROC-AUC over the classes where it is defined.
pub fn macro_roc_auc(scores: &ScoredPredictions) -> Option<f64> {
    mean_defined(&(0..scores.num_classes()).map(|c| roc_auc(scores, c)).collect::<Vec<_>>())
}

pub fn macro_pr_auc(scores: &ScoredPredictions) -> Option<f64> {
    mean_defined(&(0..scores.num_classes()).map(|c| pr_auc(scores, c)).collect::<Vec<_>>())
}

pub const Z_95: f64 = 1.96;

/// Normal-approximation 95% interval for a sensitivity measured on `n_pos` positives.
pub fn sensitivity_ci(sen: f64, n_pos: u64) -> Result<(f64, f64)> {
    if n_pos == 0 {
        return Err(Error::data("confidence interval needs at least one positive sample"));
    }
    if !(0.0..=1.0).contains(&sen) {
        return Err(Error::data(format!("sensitivity {sen} outside [0, 1]")));
    }
    let half = Z_95 * (sen * (1.0 - sen) / n_pos as f64).sqrt();
    Ok(((sen - half).max(0.0), (sen + half).min(1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub name: String,
    pub metrics: ClassMetrics,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub sensitivity_ci: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub classes: Vec<ClassReport>,
    pub average: Average,
    pub averaged: Averaged,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn new(scores: &ScoredPredictions, class_names: &[String], average: Average) -> Result<Self> {
        if scores.num_classes() != class_names.len() {
            return Err(Error::shape(format!(
                "{} score columns for {} classes",
                scores.num_classes(),
                class_names.len()
            )));
        }
        let confusion = ConfusionMatrix::from_predictions(scores.labels(), &scores.predictions(), class_names.to_vec())?;
        let classes = class_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let metrics = per_class_prf(&confusion, c);
                ClassReport {
                    name: name.clone(),
                    metrics,
                    roc_auc: roc_auc(scores, c),
                    pr_auc: pr_auc(scores, c),
                    sensitivity_ci: sensitivity_ci(metrics.sensitivity, metrics.support).ok(),
                }
            })
            .collect();
        Ok(Self {
            accuracy: accuracy(&confusion)?,
            classes,
            average,
            averaged: averaged_metrics(&confusion, average),
            roc_auc: macro_roc_auc(scores),
            pr_auc: macro_pr_auc(scores),
            confusion,
        })
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = format!("accuracy: {:.2}%\n", self.accuracy);
        out.push_str(&format!(
            "{:<16} {:>9} {:>11} {:>7} {:>8} {:>8} {:>8} {:>17}\n",
            "class", "precision", "sensitivity", "f1", "support", "roc_auc", "pr_auc", "sensitivity 95% ci"
        ));
        for c in &self.classes {
            let m = &c.metrics;
            let ci = c.sensitivity_ci.map_or_else(|| "n/a".to_string(), |(lo, hi)| format!("[{lo:.4}, {hi:.4}]"));
            let flag = if m.undefined { " *" } else { "" };
            out.push_str(&format!(
                "{:<16} {:>9.4} {:>11.4} {:>7.4} {:>8} {:>8} {:>8} {:>17}{flag}\n",
                c.name,
                m.precision,
                m.sensitivity,
                m.f1,
                m.support,
                opt(c.roc_auc),
                opt(c.pr_auc),
                ci
            ));
        }
        let a = &self.averaged;
        let label = match self.average {
            Average::Macro => "macro",
            Average::Weighted => "weighted",
        };
        out.push_str(&format!(
            "{label:<16} {:>9.4} {:>11.4} {:>7.4} {:>8} {:>8} {:>8}\n",
            a.precision,
            a.sensitivity,
            a.f1,
            self.confusion.total(),
            opt(self.roc_auc),
            opt(self.pr_auc)
        ));
        if self.classes.iter().any(|c| c.metrics.undefined) {
            out.push_str("* zero denominator, value reported as 0\n");
        }
        out
    }

    /// Header, one row per class, then the averaged row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let header = ["class", "precision", "sensitivity", "f1", "support", "roc_auc", "pr_auc", "sen_ci_lo", "sen_ci_hi", "undefined"];
        write_record(&mut w, path, &header)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for c in &self.classes {
            let m = &c.metrics;
            write_record(
                &mut w,
                path,
                &[
                    c.name.clone(),
                    m.precision.to_string(),
                    m.sensitivity.to_string(),
                    m.f1.to_string(),
                    m.support.to_string(),
                    opt(c.roc_auc),
                    opt(c.pr_auc),
                    opt(c.sensitivity_ci.map(|ci| ci.0)),
                    opt(c.sensitivity_ci.map(|ci| ci.1)),
                    m.undefined.to_string(),
                ],
            )?;
        }
        let a = &self.averaged;
        let label = match self.average {
            Average::Macro => "macro",
            Average::Weighted => "weighted",
        };
        write_record(
            &mut w,
            path,
            &[
                label.to_string(),
                a.precision.to_string(),
                a.sensitivity.to_string(),
                a.f1.to_string(),
                self.confusion.total().to_string(),
                opt(self.roc_auc),
                opt(self.pr_auc),
                String::new(),
                String::new(),
                String::new(),
            ],
        )?;
        flush(w, path)
    }
}

/// Writes ROC and PR curve points of every class as `kind,class,threshold,x,y`.
pub fn write_curves_csv(scores: &ScoredPredictions, class_names: &[String], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(&mut w, path, &["curve", "class", "threshold", "x", "y"])?;
    for (c, name) in class_names.iter().enumerate() {
        let (s, p) = scores.binary(c);
        for (kind, curve) in [("roc", roc_curve(&s, &p)), ("pr", pr_curve(&s, &p))] {
            for pt in curve.unwrap_or_default() {
                write_record(
                    &mut w,
                    path,
                    &[kind.to_string(), name.clone(), pt.threshold.to_string(), pt.x.to_string(), pt.y.to_string()],
                )?;
            }
        }
    }
    flush(w, path)
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

pub(crate) fn write_record<S: AsRef<[u8]>>(w: &mut csv::Writer<std::fs::File>, path: &Path, rec: &[S]) -> Result<()> {
    w.write_record(rec).map_err(|e| csv_error(path, e))
}

pub(crate) fn flush(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let _kind = std::io::ErrorKind::Other;
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    /// Average precision by enumerating every threshold independently.
    fn enumerated_ap(scores: &[f64], positive: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = positive.iter().filter(|&&p| p).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let tp = (0..scores.len()).filter(|&i| scores[i] >= t && positive[i]).count() as f64;
            let pp = (0..scores.len()).filter(|&i| scores[i] >= t).count() as f64;
            let recall = tp / pos;
            ap += (recall - prev_recall) * tp / pp;
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn f1_from_reported_precision_and_sensitivity() {
        assert!((f1_score(0.9604, 0.9621) - 0.9613).abs() < 1e-4);
    }

    #[test]
    fn accuracy_cases() {
        let diag = ConfusionMatrix::from_counts(vec![vec![3, 0], vec![0, 4]]).unwrap();
        assert_eq!(accuracy(&diag).unwrap(), 100.0);
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 1, 0], vec![0, 3, 1], vec![0, 0, 0]]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 80.0);
        assert!(accuracy(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn two_class_hand_computed() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 1], vec![2, 4]]).unwrap();
        let a = per_class_prf(&cm, 0);
        assert_eq!((a.precision, a.sensitivity), (3.0 / 5.0, 3.0 / 4.0));
        let b = per_class_prf(&cm, 1);
        assert_eq!((b.precision, b.sensitivity), (4.0 / 5.0, 4.0 / 6.0));
        let m = macro_metrics(&cm);
        assert_eq!(m.precision, (3.0 / 5.0 + 4.0 / 5.0) / 2.0);
        assert_eq!(m.sensitivity, (3.0 / 4.0 + 4.0 / 6.0) / 2.0);
        let f1_a = 2.0 * 0.6 * 0.75 / 1.35;
        let f1_b = 2.0 * 0.8 * (4.0 / 6.0) / (0.8 + 4.0 / 6.0);
        assert!((m.f1 - (f1_a + f1_b) / 2.0).abs() < 1e-15);
        assert!((m.f1 - f1_score(m.precision, m.sensitivity)).abs() > 1e-6);
    }

    #[test]
    fn perfect_and_degenerate_classes() {
        let cm = ConfusionMatrix::from_counts(vec![vec![4, 0, 0], vec![0, 2, 1], vec![0, 0, 0]]).unwrap();
        let p = per_class_prf(&cm, 0);
        assert_eq!((p.precision, p.sensitivity, p.f1, p.undefined), (1.0, 1.0, 1.0, false));
        let empty = ConfusionMatrix::from_counts(vec![vec![4, 0, 0], vec![0, 3, 0], vec![0, 0, 0]]).unwrap();
        let d = per_class_prf(&empty, 2);
        assert_eq!((d.precision, d.sensitivity, d.f1, d.undefined), (0.0, 0.0, 0.0, true));
    }

    #[test]
    fn identical_classes_average_to_themselves() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 1], vec![1, 3]]).unwrap();
        let m = macro_metrics(&cm);
        assert_eq!((m.precision, m.sensitivity, m.f1), (0.75, 0.75, 0.75));
        let w = averaged_metrics(&cm, Average::Weighted);
        assert_eq!(w, m);
    }

    #[test]
    fn weighted_average_uses_support() {
        let cm = ConfusionMatrix::from_counts(vec![vec![1, 0], vec![3, 6]]).unwrap();
        let w = averaged_metrics(&cm, Average::Weighted);
        assert!((w.sensitivity - (1.0 * 1.0 + 9.0 * (6.0 / 9.0)) / 10.0).abs() < 1e-15);
    }

    #[test]
    fn roc_edge_cases() {
        assert_eq!(binary_roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(binary_roc_auc(&[0.5; 6], &[true, false, true, false, false, true]), Some(0.5));
        assert_eq!(binary_roc_auc(&[0.3, 0.4], &[true, true]), None);
    }

    #[test]
    fn roc_matches_pairwise_on_twenty_samples() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.7, 0.4, 0.9, 0.05, 0.6, 0.6, 0.2, 0.3, 0.55, 0.45, 0.4, 0.95, 0.15, 0.65, 0.75, 0.5];
        let positive: Vec<bool> = (0..20).map(|i| (i * 7) % 3 == 0).collect();
        let auc = binary_roc_auc(&scores, &positive).unwrap();
        assert!((auc - pairwise_auc(&scores, &positive)).abs() < 1e-12);
    }

    #[test]
    fn pr_cases() {
        assert_eq!(binary_pr_auc(&[0.9, 0.8, 0.2], &[true, true, false]), Some(1.0));
        assert_eq!(binary_pr_auc(&[0.1, 0.7, 0.3], &[true, true, true]), Some(1.0));
        assert_eq!(binary_pr_auc(&[0.1, 0.7], &[false, false]), None);
        let s = [0.9, 0.8, 0.7, 0.7, 0.3, 0.2];
        let p = [true, false, true, false, true, false];
        assert!((binary_pr_auc(&s, &p).unwrap() - enumerated_ap(&s, &p)).abs() < 1e-12);
    }

    #[test]
    fn roc_curve_is_monotone() {
        let s = [0.3, 0.1, 0.9, 0.5, 0.5, 0.7];
        let p = [true, false, true, false, true, false];
        let curve = roc_curve(&s, &p).unwrap();
        assert!(curve.windows(2).all(|w| w[1].x >= w[0].x && w[1].y >= w[0].y && w[1].threshold < w[0].threshold));
        assert_eq!((curve.last().unwrap().x, curve.last().unwrap().y), (1.0, 1.0));
    }

    #[test]
    fn confidence_interval() {
        assert_eq!(sensitivity_ci(1.0, 30).unwrap(), (1.0, 1.0));
        let (lo, hi) = sensitivity_ci(0.5, 100).unwrap();
        assert!((lo - 0.402).abs() < 1e-12 && (hi - 0.598).abs() < 1e-12);
        let w = |n| {
            let (lo, hi) = sensitivity_ci(0.7, n).unwrap();
            hi - lo
        };
        assert!((w(100) / w(400) - 2.0).abs() < 1e-12);
        assert!(sensitivity_ci(0.5, 0).is_err());
        assert_eq!(sensitivity_ci(0.02, 5).unwrap().0, 0.0);
    }

    #[test]
    fn scored_predictions_validation() {
        assert!(ScoredPredictions::new(vec![vec![0.5, 0.5]], vec![1]).is_ok());
        assert!(ScoredPredictions::new(vec![vec![0.6, 0.5]], vec![1]).is_err());
        assert!(ScoredPredictions::new(vec![vec![0.5, 0.5]], vec![2]).is_err());
        let s = ScoredPredictions::new(vec![vec![0.5, 0.5], vec![0.2, 0.8]], vec![0, 1]).unwrap();
        assert_eq!(s.predictions(), [0, 1]);
    }

    #[test]
    fn report_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let probs = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4], vec![0.5, 0.4, 0.1]];
        let scores = ScoredPredictions::new(probs, vec![0, 1, 2, 1]).unwrap();
        let report = MetricsReport::new(&scores, &names, Average::Macro).unwrap();
        assert_eq!(report.accuracy, 75.0);
        let path = dir.path().join("m.csv");
        report.write_csv(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1 + 3 + 1);
        assert!(report.to_text().contains("macro"));
        write_curves_csv(&scores, &names, &dir.path().join("c.csv")).unwrap();
        report.confusion.write_csv(&dir.path().join("cm.csv")).unwrap();
    }

    fn permute_cm(cm: &ConfusionMatrix, perm: &[usize]) -> ConfusionMatrix {
        let c = cm.num_classes();
        let mut counts = vec![vec![0; c]; c];
        for i in 0..c {
            for j in 0..c {
                counts[perm[i]][perm[j]] = cm.get(i, j);
            }
        }
        ConfusionMatrix::from_counts(counts).unwrap()
    }

    proptest! {
        #[test]
        fn roc_auc_equals_pairwise(
            data in proptest::collection::vec((0u8..8, any::<bool>()), 2..50),
        ) {
            let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 8.0).collect();
            let positive: Vec<bool> = data.iter().map(|d| d.1).collect();
            match binary_roc_auc(&scores, &positive) {
                Some(auc) => prop_assert!((auc - pairwise_auc(&scores, &positive)).abs() < 1e-12),
                None => prop_assert!(positive.iter().all(|&p| p) || positive.iter().all(|&p| !p)),
            }
        }

        #[test]
        fn pr_auc_equals_enumeration(
            data in proptest::collection::vec((0u8..8, any::<bool>()), 1..40),
        ) {
            let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 8.0).collect();
            let positive: Vec<bool> = data.iter().map(|d| d.1).collect();
            if let Some(ap) = binary_pr_auc(&scores, &positive) {
                prop_assert!((ap - enumerated_ap(&scores, &positive)).abs() < 1e-12);
            }
        }

        #[test]
        fn metrics_follow_class_permutation(
            counts in proptest::collection::vec(0u64..20, 16),
            perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let cm = ConfusionMatrix::from_counts(counts.chunks(4).map(<[u64]>::to_vec).collect()).unwrap();
            let pm = permute_cm(&cm, &perm);
            if cm.total() > 0 {
                prop_assert_eq!(accuracy(&cm).unwrap(), accuracy(&pm).unwrap());
            }
            for c in 0..4 {
                prop_assert_eq!(per_class_prf(&cm, c), per_class_prf(&pm, perm[c]));
            }
            let (a, b) = (macro_metrics(&cm), macro_metrics(&pm));
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
            for m in (0..4).map(|c| per_class_prf(&cm, c)) {
                prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.f1));
            }
        }
    }
}
