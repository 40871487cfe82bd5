//! Confusion matrix, per-class metrics, and report rendering.
//!
//! Metrics are one-vs-rest per rhythm class: sensitivity `TP/(TP+FN)`,
//! specificity `TN/(TN+FP)`, precision `TP/(TP+FP)`, negative predictive
//! value `TN/(TN+FN)`, accuracy `(TP+TN)/total`. A zero denominator yields
//! the value 0 with a named flag rather than NaN, so reports always
//! render; the flags keep the degeneracy visible.

use std::fmt::Write as _;

use thiserror::Error;

use crate::segment::Label;

/// 3×3 confusion counts; rows are true classes, columns predictions, in
/// (NSR, AF, PAC/PVC) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    cells: [[u64; 3]; 3],
}

/// Errors from evaluation inputs.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction/label length mismatch: {preds} vs {labels}")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("malformed CSV at line {line}: {reason}")]
    BadCsv { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ConfusionMatrix {
    pub fn from_counts(cells: [[u64; 3]; 3]) -> Self {
        Self { cells }
    }

    /// Count `(true, predicted)` pairs.
    pub fn from_pairs(preds: &[Label], labels: &[Label]) -> Result<Self, EvalError> {
        if preds.len() != labels.len() {
            return Err(EvalError::LengthMismatch {
                preds: preds.len(),
                labels: labels.len(),
            });
        }
        let mut cm = Self::default();
        for (&p, &t) in preds.iter().zip(labels.iter()) {
            cm.cells[t.index()][p.index()] += 1;
        }
        Ok(cm)
    }

    pub fn cell(&self, true_class: usize, predicted: usize) -> u64 {
        self.cells[true_class][predicted]
    }

    pub fn row_total(&self, true_class: usize) -> u64 {
        self.cells[true_class].iter().sum()
    }

    pub fn col_total(&self, predicted: usize) -> u64 {
        (0..3).map(|t| self.cells[t][predicted]).sum()
    }

    pub fn total(&self) -> u64 {
        (0..3).map(|t| self.row_total(t)).sum()
    }
}

/// Which metrics had a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetricFlags {
    pub sens: bool,
    pub spec: bool,
    pub prec: bool,
    pub npv: bool,
    pub acc: bool,
}

impl MetricFlags {
    pub fn any(&self) -> bool {
        self.sens || self.spec || self.prec || self.npv || self.acc
    }

    /// Semicolon-joined flag names, as stored in the CSV `flags` column.
    pub fn encode(&self) -> String {
        let mut names = Vec::new();
        if self.sens {
            names.push("sens");
        }
        if self.spec {
            names.push("spec");
        }
        if self.prec {
            names.push("prec");
        }
        if self.npv {
            names.push("npv");
        }
        if self.acc {
            names.push("acc");
        }
        names.join(";")
    }

    pub fn decode(text: &str) -> Self {
        let mut flags = Self::default();
        for name in text.split(';').filter(|s| !s.is_empty()) {
            match name {
                "sens" => flags.sens = true,
                "spec" => flags.spec = true,
                "prec" => flags.prec = true,
                "npv" => flags.npv = true,
                "acc" => flags.acc = true,
                _ => {}
            }
        }
        flags
    }
}

/// The five metrics for one rhythm class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub rhythm: Label,
    pub sens: f64,
    pub spec: f64,
    pub prec: f64,
    pub npv: f64,
    pub acc: f64,
    /// True-instance count of this class.
    pub support: u64,
    pub flags: MetricFlags,
}

/// Per-class metrics in (NSR, AF, PAC/PVC) order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: [ClassMetrics; 3],
}

impl MetricsReport {
    pub fn class(&self, label: Label) -> &ClassMetrics {
        &self.classes[label.index()]
    }
}

/// One-vs-rest metrics from a confusion matrix.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let total = cm.total();
    let classes = std::array::from_fn(|c| {
        let tp = cm.cell(c, c);
        let fn_ = cm.row_total(c) - tp;
        let fp = cm.col_total(c) - tp;
        let tn = total - tp - fn_ - fp;
        let mut flags = MetricFlags::default();
        let ratio = |num: u64, den: u64, flag: &mut bool| -> f64 {
            if den == 0 {
                *flag = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let sens = ratio(tp, tp + fn_, &mut flags.sens);
        let spec = ratio(tn, tn + fp, &mut flags.spec);
        let prec = ratio(tp, tp + fp, &mut flags.prec);
        let npv = ratio(tn, tn + fn_, &mut flags.npv);
        let acc = ratio(tp + tn, total, &mut flags.acc);
        ClassMetrics {
            rhythm: Label::from_index(c).unwrap(),
            sens,
            spec,
            prec,
            npv,
            acc,
            support: cm.row_total(c),
            flags,
        }
    });
    MetricsReport { classes }
}

/// Render the per-rhythm table: percentages with two decimals, columns in
/// Sens. / Spec. / Prec. / NPV / Acc. order.
pub fn render_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<9} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "Rhythm", "Sens.", "Spec.", "Prec.", "NPV", "Acc."
    )
    .unwrap();
    for m in &report.classes {
        writeln!(
            out,
            "{:<9} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}{}",
            m.rhythm.name(),
            100.0 * m.sens,
            100.0 * m.spec,
            100.0 * m.prec,
            100.0 * m.npv,
            100.0 * m.acc,
            if m.flags.any() {
                format!("  [zero-denominator: {}]", m.flags.encode())
            } else {
                String::new()
            }
        )
        .unwrap();
    }
    out
}

/// Machine-readable CSV: `rhythm,sens,spec,prec,npv,acc,support,flags`.
/// Values are raw ratios with shortest-round-trip formatting.
pub fn metrics_to_csv(report: &MetricsReport) -> String {
    let mut out = String::from("rhythm,sens,spec,prec,npv,acc,support,flags\n");
    for m in &report.classes {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.rhythm.name(),
            m.sens,
            m.spec,
            m.prec,
            m.npv,
            m.acc,
            m.support,
            m.flags.encode()
        )
        .unwrap();
    }
    out
}

/// Parse the CSV produced by [`metrics_to_csv`].
pub fn metrics_from_csv(text: &str) -> Result<MetricsReport, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "rhythm,sens,spec,prec,npv,acc,support,flags" => {}
        _ => {
            return Err(EvalError::BadCsv {
                line: 1,
                reason: "bad or missing header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(EvalError::BadCsv {
                line: idx + 1,
                reason: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let rhythm = match fields[0] {
            "NSR" => Label::Nsr,
            "AF" => Label::Af,
            "PAC/PVC" => Label::PacPvc,
            other => {
                return Err(EvalError::BadCsv {
                    line: idx + 1,
                    reason: format!("unknown rhythm {other:?}"),
                })
            }
        };
        let num = |s: &str| -> Result<f64, EvalError> {
            s.parse().map_err(|e| EvalError::BadCsv {
                line: idx + 1,
                reason: format!("{e}"),
            })
        };
        rows.push(ClassMetrics {
            rhythm,
            sens: num(fields[1])?,
            spec: num(fields[2])?,
            prec: num(fields[3])?,
            npv: num(fields[4])?,
            acc: num(fields[5])?,
            support: fields[6].parse().map_err(|e| EvalError::BadCsv {
                line: idx + 1,
                reason: format!("{e}"),
            })?,
            flags: MetricFlags::decode(fields[7]),
        });
    }
    if rows.len() != 3 || rows[0].rhythm != Label::Nsr || rows[1].rhythm != Label::Af {
        return Err(EvalError::BadCsv {
            line: 1,
            reason: "expected exactly the three rhythm rows in NSR, AF, PAC/PVC order".into(),
        });
    }
    Ok(MetricsReport {
        classes: [rows[0], rows[1], rows[2]],
    })
}

/// One pooled subject-independent prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub subject_id: String,
    pub segment_index: usize,
    pub label: Label,
    pub pred: Label,
    pub probs: [f64; 3],
    /// Which fold's model produced this prediction (1 or 2).
    pub model_fold: u8,
}

const PREDICTIONS_HEADER: &str = "subject_id,segment_index,label,pred,p_nsr,p_af,p_pacpvc,model_fold";

/// Serialize predictions as CSV.
pub fn predictions_to_csv(preds: &[Prediction]) -> String {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for p in preds {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.subject_id,
            p.segment_index,
            p.label.index(),
            p.pred.index(),
            p.probs[0],
            p.probs[1],
            p.probs[2],
            p.model_fold
        )
        .unwrap();
    }
    out
}

/// Parse a predictions CSV.
pub fn predictions_from_csv(text: &str) -> Result<Vec<Prediction>, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == PREDICTIONS_HEADER => {}
        _ => {
            return Err(EvalError::BadCsv {
                line: 1,
                reason: "bad or missing header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(EvalError::BadCsv {
                line: idx + 1,
                reason: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let bad = |reason: String| EvalError::BadCsv {
            line: idx + 1,
            reason,
        };
        let class = |s: &str| -> Result<Label, EvalError> {
            let v: usize = s.parse().map_err(|e| bad(format!("{e}")))?;
            Label::from_index(v).ok_or_else(|| bad(format!("class {v} out of range")))
        };
        out.push(Prediction {
            subject_id: fields[0].to_string(),
            segment_index: fields[1].parse().map_err(|e| bad(format!("{e}")))?,
            label: class(fields[2])?,
            pred: class(fields[3])?,
            probs: [
                fields[4].parse().map_err(|e| bad(format!("{e}")))?,
                fields[5].parse().map_err(|e| bad(format!("{e}")))?,
                fields[6].parse().map_err(|e| bad(format!("{e}")))?,
            ],
            model_fold: fields[7].parse().map_err(|e| bad(format!("{e}")))?,
        });
    }
    Ok(out)
}
