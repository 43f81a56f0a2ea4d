//! Segmentation loss and evaluation measures.
//!
//! The training objective uses the soft overlap `sum(y p) / (sum(y) + sum(p))`
//! per class, which tops out at 1/2 for a perfect prediction, so the
//! class-averaged dice loss `1 - 2 * mean(overlap)` reaches 0 exactly there.
//! Reported scores are hard intersection-over-union on argmax labels.

use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Tape, Tensor};

pub const NUM_CLASSES: usize = 3;
pub const BACKGROUND: usize = 0;
pub const BA44: usize = 1;
pub const BA45: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "BA44", "BA45"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("row {row} of the probabilities sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("row {0} of the targets is not one-hot")]
    NotOneHot(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} at position {index} is not a valid class")]
    BadLabel { index: usize, label: usize },
    #[error("class {0} out of range")]
    BadClass(usize),
    #[error("aggregation needs at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub fn one_hot(labels: &[usize]) -> Result<Array> {
    let mut data = vec![0.0; labels.len() * NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        if l >= NUM_CLASSES {
            return Err(MetricsError::BadLabel { index: i, label: l });
        }
        data[i * NUM_CLASSES + l] = 1.0;
    }
    Ok(Array::matrix(labels.len(), NUM_CLASSES, data)?)
}

pub fn argmax_rows(p: &Array) -> Vec<usize> {
    (0..p.rows())
        .map(|r| {
            let row = p.row(r);
            // first maximum wins on ties
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn check_pair(y: &Array, p: &Array) -> Result<()> {
    if y.shape() != p.shape() || y.shape().len() != 2 {
        return Err(MetricsError::Shape(format!(
            "targets {:?} vs probabilities {:?}",
            y.shape(),
            p.shape()
        )));
    }
    for r in 0..y.rows() {
        let row = y.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(MetricsError::NotOneHot(r));
        }
        let sum: f64 = p.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::NotNormalized { row: r, sum });
        }
    }
    Ok(())
}

/// `sum_i y_ic p_ic / (sum_i y_ic + sum_i p_ic)`; 1/2 when both sums vanish.
pub fn soft_overlap(y: &Array, p: &Array, class: usize) -> Result<f64> {
    check_pair(y, p)?;
    if class >= y.cols() {
        return Err(MetricsError::BadClass(class));
    }
    let (mut inter, mut total) = (0.0, 0.0);
    for r in 0..y.rows() {
        inter += y.get(r, class) * p.get(r, class);
        total += y.get(r, class) + p.get(r, class);
    }
    Ok(if total == 0.0 { 0.5 } else { inter / total })
}

/// Class-averaged dice loss of one mesh.
pub fn dice_loss<'t>(tape: &'t Tape, y: &Array, p: Tensor<'t>) -> Result<Tensor<'t>> {
    let groups: Rc<[usize]> = vec![0; y.rows()].into();
    dice_loss_grouped(tape, y, p, groups, 1)
}

/// Dice loss computed separately for each group of rows (one group per mesh
/// in a stacked batch) and averaged over groups and classes.
pub fn dice_loss_grouped<'t>(
    tape: &'t Tape,
    y: &Array,
    p: Tensor<'t>,
    groups: Rc<[usize]>,
    num_groups: usize,
) -> Result<Tensor<'t>> {
    {
        let pv = p.value();
        check_pair(y, &pv)?;
    }
    if groups.len() != y.rows() {
        return Err(MetricsError::Shape(format!(
            "{} group ids for {} rows",
            groups.len(),
            y.rows()
        )));
    }
    let classes = y.cols();
    let yt = tape.constant(y.clone());
    let inter = p.mul(yt)?.segment_sum(groups.clone(), num_groups)?;
    let psum = p.segment_sum(groups.clone(), num_groups)?;
    let ysum = tape.constant(y.clone()).segment_sum(groups, num_groups)?;
    let denom = psum.add(ysum)?;
    // Vacuous (group, class) cells: numerator 1/2, denominator 1.
    let mask: Vec<f64> = denom
        .value()
        .data()
        .iter()
        .map(|&d| if d == 0.0 { 1.0 } else { 0.0 })
        .collect();
    let mask = Array::matrix(num_groups, classes, mask)?;
    let half_mask = Array::matrix(
        num_groups,
        classes,
        mask.data().iter().map(|m| 0.5 * m).collect(),
    )?;
    let overlap = inter
        .add(tape.constant(half_mask))?
        .div(denom.add(tape.constant(mask))?)?;
    Ok(overlap.mean()?.scale(-2.0)?.add_scalar(1.0)?)
}

fn check_labels(y: &[usize], yhat: &[usize], class: usize) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(MetricsError::Shape(format!(
            "{} labels vs {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    if class >= NUM_CLASSES {
        return Err(MetricsError::BadClass(class));
    }
    for (i, &l) in y.iter().chain(yhat).enumerate() {
        if l >= NUM_CLASSES {
            return Err(MetricsError::BadLabel {
                index: i % y.len().max(1),
                label: l,
            });
        }
    }
    Ok(())
}

/// Hard intersection over union for one class; 1 when the union is empty.
pub fn jaccard(y: &[usize], yhat: &[usize], class: usize) -> Result<f64> {
    check_labels(y, yhat, class)?;
    let inter = y
        .iter()
        .zip(yhat)
        .filter(|(&a, &b)| a == class && b == class)
        .count();
    let union = y
        .iter()
        .zip(yhat)
        .filter(|(&a, &b)| a == class || b == class)
        .count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Hard Dice coefficient `2|A∩B| / (|A| + |B|)`; 1 when both sets are empty.
pub fn dice_coefficient(y: &[usize], yhat: &[usize], class: usize) -> Result<f64> {
    check_labels(y, yhat, class)?;
    let inter = y
        .iter()
        .zip(yhat)
        .filter(|(&a, &b)| a == class && b == class)
        .count();
    let total =
        y.iter().filter(|&&a| a == class).count() + yhat.iter().filter(|&&b| b == class).count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Per-class scores in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub background: f64,
    pub ba44: f64,
    pub ba45: f64,
}

impl ClassScores {
    pub fn new(background: f64, ba44: f64, ba45: f64) -> Self {
        Self {
            background,
            ba44,
            ba45,
        }
    }

    /// Mean of the two foreground areas.
    pub fn average(&self) -> f64 {
        (self.ba44 + self.ba45) / 2.0
    }

    pub fn get(&self, class: usize) -> f64 {
        match class {
            BACKGROUND => self.background,
            BA44 => self.ba44,
            BA45 => self.ba45,
            _ => panic!("class {class} out of range"),
        }
    }

    pub fn jaccard_of(y: &[usize], yhat: &[usize]) -> Result<Self> {
        Ok(Self::new(
            jaccard(y, yhat, BACKGROUND)?,
            jaccard(y, yhat, BA44)?,
            jaccard(y, yhat, BA45)?,
        ))
    }

    pub fn dice_of(y: &[usize], yhat: &[usize]) -> Result<Self> {
        Ok(Self::new(
            dice_coefficient(y, yhat, BACKGROUND)?,
            dice_coefficient(y, yhat, BA44)?,
            dice_coefficient(y, yhat, BA45)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        // shifted by the first value so identical folds give an exact zero spread
        let v0 = values[0];
        let mean = v0 + values.iter().map(|v| v - v0).sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        Self {
            mean,
            std: (ss / (n - 1.0)).sqrt(),
        }
    }

    /// `"57.4±3.8"`: percent, one decimal.
    pub fn cell(&self) -> String {
        format!("{:.1}±{:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub folds: Vec<ClassScores>,
    pub background: Summary,
    pub ba44: Summary,
    pub ba45: Summary,
    pub average: Summary,
}

impl FoldReport {
    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }
}

pub fn aggregate(folds: &[ClassScores]) -> Result<FoldReport> {
    if folds.len() < 2 {
        return Err(MetricsError::TooFewFolds(folds.len()));
    }
    let pick = |f: fn(&ClassScores) -> f64| Summary::of(&folds.iter().map(f).collect::<Vec<_>>());
    Ok(FoldReport {
        folds: folds.to_vec(),
        background: pick(|s| s.background),
        ba44: pick(|s| s.ba44),
        ba45: pick(|s| s.ba45),
        average: pick(ClassScores::average),
    })
}

/// One aggregated cell group of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub model: String,
    pub condition: String,
    pub report: FoldReport,
}

/// Results laid out as models x {BA44, BA45, average} rows and one column per
/// condition, cells `mean±std` in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub models: Vec<String>,
    /// `(key, column header)` in display order.
    pub conditions: Vec<(String, String)>,
    pub entries: Vec<ReportEntry>,
}

const AREAS: [&str; 3] = ["BA44", "BA45", "average"];

fn area_summary(report: &FoldReport, area: &str) -> Summary {
    match area {
        "BA44" => report.ba44,
        "BA45" => report.ba45,
        _ => report.average,
    }
}

impl ReportTable {
    fn lookup(&self, model: &str, condition: &str) -> Option<&FoldReport> {
        self.entries
            .iter()
            .find(|e| e.model == model && e.condition == condition)
            .map(|e| &e.report)
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["Model".to_string(), "Area".to_string()];
        header.extend(self.conditions.iter().map(|c| c.1.clone()));
        let mut rows = vec![header];
        for model in &self.models {
            for (i, area) in AREAS.iter().enumerate() {
                let mut row = vec![
                    if i == 1 {
                        model.to_uppercase()
                    } else {
                        String::new()
                    },
                    area.to_string(),
                ];
                for (key, _) in &self.conditions {
                    row.push(
                        self.lookup(model, key)
                            .map(|r| area_summary(r, area).cell())
                            .unwrap_or_else(|| "-".to_string()),
                    );
                }
                rows.push(row);
            }
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
        let mut out = String::new();
        for (ri, row) in rows.iter().enumerate() {
            if ri == 0 || (ri - 1) % AREAS.len() == 0 {
                out.push_str(&rule);
                out.push('\n');
            }
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}", w = *w))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out.push_str(&rule);
        out.push('\n');
        out
    }

    /// `model,condition,area,mean_pct,std_pct,folds`, one line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,condition,area,mean_pct,std_pct,folds\n");
        for model in &self.models {
            for (key, _) in &self.conditions {
                let Some(report) = self.lookup(model, key) else {
                    continue;
                };
                for area in AREAS {
                    let s = area_summary(report, area);
                    let _ = writeln!(
                        out,
                        "{model},{key},{area},{:.1},{:.1},{}",
                        100.0 * s.mean,
                        100.0 * s.std,
                        report.num_folds()
                    );
                }
            }
        }
        out
    }

    /// Full-precision per-fold scores.
    pub fn folds_csv(&self) -> String {
        let mut out = String::from("model,condition,fold,background,BA44,BA45,average\n");
        for e in &self.entries {
            for (i, f) in e.report.folds.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{i},{:?},{:?},{:?},{:?}",
                    e.model,
                    e.condition,
                    f.background,
                    f.ba44,
                    f.ba45,
                    f.average()
                );
            }
        }
        out
    }
}
