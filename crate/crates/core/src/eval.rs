//! Train/test splitting and classification metrics.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureConfig};
use crate::imaging::RgbImage;
use crate::rng::Rng;
use crate::severity::{RandomForestModel, SeverityGrade};
use crate::vit::{predict_batch, DefectClass, ViTModel};

const K: usize = DefectClass::COUNT;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffled split of item indices by their class codes.
///
/// Each class contributes `floor(f·n_c)` training items (at least one when
/// `n_c ≥ 2`); the remaining `floor(f·N) − Σ` slots go to the classes with the
/// largest fractional remainders, lowest code first on ties, never taking a
/// class's last test item.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let floor = |v: f64| (v + 1e-9).floor() as usize;
    let mut take: Vec<usize> = by_class
        .iter()
        .map(|m| {
            let k = floor(train_fraction * m.len() as f64);
            if m.len() >= 2 {
                k.max(1)
            } else {
                k
            }
        })
        .collect();
    let target = floor(train_fraction * labels.len() as f64);
    let remainder: Vec<f64> = (0..classes)
        .map(|c| train_fraction * by_class[c].len() as f64 - take[c] as f64)
        .collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| remainder[b].total_cmp(&remainder[a]).then(a.cmp(&b)));
    let mut assigned: usize = take.iter().sum();
    for &c in &order {
        if assigned >= target {
            break;
        }
        if take[c] + 1 < by_class[c].len() && remainder[c] > 0.0 {
            take[c] += 1;
            assigned += 1;
        }
    }

    let mut rng = Rng::new(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (members, k) in by_class.iter_mut().zip(&take) {
        rng.shuffle(members);
        train.extend_from_slice(&members[..*k]);
        test.extend_from_slice(&members[*k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// `K×K` counts, rows = true class, columns = predicted class.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize]) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(Error::Argument(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = vec![vec![0usize; K]; K];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= K || p >= K {
            return Err(Error::Argument(format!("class code outside 0..{K}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Precision, recall and F1 per class. Zero denominators give 0 and add a warning.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn class_scores(confusion: &[Vec<usize>]) -> ClassScores {
    let k = confusion.len();
    let mut s = ClassScores {
        precision: vec![0.0; k],
        recall: vec![0.0; k],
        f1: vec![0.0; k],
        warnings: Vec::new(),
    };
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let name = DefectClass::from_code(c).map_or_else(|_| c.to_string(), |d| d.to_string());
        if predicted > 0 {
            s.precision[c] = tp / predicted as f64;
        } else {
            s.warnings
                .push(format!("precision of {name} undefined (never predicted), set to 0"));
        }
        if actual > 0 {
            s.recall[c] = tp / actual as f64;
        } else {
            s.warnings
                .push(format!("recall of {name} undefined (no true samples), set to 0"));
        }
        let denom = s.precision[c] + s.recall[c];
        if denom > 0.0 {
            s.f1[c] = 2.0 * s.precision[c] * s.recall[c] / denom;
        }
    }
    s
}

/// Unweighted mean of per-class F1 over every class, including absent ones (F1 = 0).
pub fn macro_f1(confusion: &[Vec<usize>]) -> f64 {
    let f1 = class_scores(confusion).f1;
    f1.iter().sum::<f64>() / f1.len().max(1) as f64
}

pub fn accuracy(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let trace: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    trace as f64 / total as f64
}

/// Mann-Whitney AUC: `(concordant + ½·tied) / (#pos·#neg)`.
/// `None` when either class is missing.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk tie groups in ascending score order; pair counts stay exact integers.
    let (mut neg_below, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if positive[idx[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        concordant += pos_here * neg_below;
        tied += pos_here * neg_here;
        neg_below += neg_here;
        i = j;
    }
    Some((concordant as f64 + 0.5 * tied as f64) / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC per class from an `N×K` score table.
pub fn roc_auc_ovr(scores: &[Vec<f64>], truth: &[usize]) -> Result<Vec<Option<f64>>> {
    if scores.len() != truth.len() {
        return Err(Error::Argument("score rows and labels differ in count".into()));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != K) {
        return Err(Error::Argument(format!(
            "score row has {} columns, expected {K}",
            row.len()
        )));
    }
    Ok((0..K)
        .map(|c| {
            let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            binary_auc(&col, &pos)
        })
        .collect())
}

/// Severity regression quality on labeled test images.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeverityReport {
    pub n_samples: usize,
    pub mse: f64,
    pub grade_accuracy: f64,
    /// 3×3 counts, rows = true grade (nil, minor, major).
    pub grade_confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<usize>>,
    /// `None` where the test set lacks positives or negatives for that class.
    pub per_class_auc: Vec<Option<f64>>,
    pub warnings: Vec<String>,
    pub severity: Option<SeverityReport>,
}

impl EvaluationReport {
    /// Assembles every classification metric from labels and probability rows.
    pub fn from_predictions(truth: &[usize], probabilities: &[Vec<f64>]) -> Result<Self> {
        let predicted: Vec<usize> = probabilities.iter().map(|p| crate::vit::argmax_row(p)).collect();
        let confusion = confusion_matrix(truth, &predicted)?;
        let scores = class_scores(&confusion);
        let per_class_auc = roc_auc_ovr(probabilities, truth)?;
        let mut warnings = scores.warnings.clone();
        if truth.is_empty() {
            warnings.insert(0, "no samples: all metrics set to 0".into());
        }
        for (c, auc) in per_class_auc.iter().enumerate() {
            if auc.is_none() {
                warnings.push(format!(
                    "AUC of {} absent (needs positives and negatives)",
                    DefectClass::ALL[c]
                ));
            }
        }
        Ok(Self {
            n_samples: truth.len(),
            accuracy: accuracy(&confusion),
            macro_f1: scores.f1.iter().sum::<f64>() / K as f64,
            per_class_precision: scores.precision,
            per_class_recall: scores.recall,
            per_class_f1: scores.f1,
            confusion,
            per_class_auc,
            warnings,
            severity: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples   {}", self.n_samples);
        let _ = writeln!(s, "accuracy  {:.4}", self.accuracy);
        let _ = writeln!(s, "macro F1  {:.4}", self.macro_f1);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<18} {:>9} {:>9} {:>9} {:>9}",
            "class", "precision", "recall", "f1", "auc"
        );
        for c in 0..K {
            let auc = self.per_class_auc[c].map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                s,
                "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                DefectClass::ALL[c].slug(),
                self.per_class_precision[c],
                self.per_class_recall[c],
                self.per_class_f1[c],
                auc
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "confusion (rows = true, columns = predicted)");
        for (c, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>4}")).collect();
            let _ = writeln!(s, "{:<18} {}", DefectClass::ALL[c].slug(), cells.join(""));
        }
        if let Some(sev) = &self.severity {
            let _ = writeln!(s);
            let _ = writeln!(s, "severity samples   {}", sev.n_samples);
            let _ = writeln!(s, "severity MSE       {:.4}", sev.mse);
            let _ = writeln!(s, "grade accuracy     {:.4}", sev.grade_accuracy);
        }
        if !self.warnings.is_empty() {
            let _ = writeln!(s);
            for w in &self.warnings {
                let _ = writeln!(s, "warning: {w}");
            }
        }
        s
    }
}

/// A held-out image with its class and optional severity label.
#[derive(Debug, Clone)]
pub struct TestItem {
    pub image: RgbImage,
    pub class: DefectClass,
    pub severity: Option<SeverityGrade>,
}

/// Classifies every test image and, where severity labels exist, scores the forest
/// on features segmented with the predicted class.
pub fn evaluate(
    model: &ViTModel,
    forest: &RandomForestModel,
    test_set: &[TestItem],
    features: &FeatureConfig,
) -> Result<EvaluationReport> {
    if test_set.is_empty() {
        return Err(Error::Argument("test set is empty".into()));
    }
    let images: Vec<RgbImage> = test_set.iter().map(|t| t.image.clone()).collect();
    let preds = predict_batch(model, &images)?;
    let truth: Vec<usize> = test_set.iter().map(|t| t.class.code()).collect();
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probabilities.clone()).collect();
    let mut report = EvaluationReport::from_predictions(&truth, &probs)?;

    let mut grade_confusion = vec![vec![0usize; 3]; 3];
    let (mut n, mut sq) = (0usize, 0.0);
    for (item, pred) in test_set.iter().zip(&preds) {
        let Some(label) = item.severity else { continue };
        let f = extract_features(&item.image, pred.class, features)?;
        let (score, g) = forest.grade(&f)?;
        sq += (score - label.target()).powi(2);
        grade_confusion[label.code()][g.code()] += 1;
        n += 1;
    }
    if n > 0 {
        let correct: usize = (0..3).map(|i| grade_confusion[i][i]).sum();
        report.severity = Some(SeverityReport {
            n_samples: n,
            mse: sq / n as f64,
            grade_accuracy: correct as f64 / n as f64,
            grade_confusion,
        });
    }
    Ok(report)
}
