//! Per-group accuracy and two-group fairness metrics.
//!
//! Everything is derived from one-vs-rest counts per (group, class). Per-class
//! rates whose denominator is zero in either group are undefined and that class
//! is left out of the corresponding mean.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: u64,
    #[serde(rename = "true")]
    pub truth: usize,
    #[serde(rename = "pred")]
    pub predicted: usize,
    pub group: usize,
}

/// Rows of `(sample id, true class, predicted class, group)` with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionLog {
    rows: Vec<Prediction>,
}

impl PredictionLog {
    pub fn new(rows: Vec<Prediction>) -> Result<Self> {
        let mut ids: Vec<u64> = rows.iter().map(|r| r.sample_id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return invalid("PredictionLog", format!("duplicate sample id {}", w[0]));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Prediction] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows satisfying `keep`, as a new log.
    pub fn filter(&self, keep: impl Fn(&Prediction) -> bool) -> Self {
        Self {
            rows: self.rows.iter().copied().filter(|r| keep(r)).collect(),
        }
    }

    /// Fraction of rows predicted correctly; `None` when empty.
    pub fn accuracy(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        let hits = self.rows.iter().filter(|r| r.truth == r.predicted).count();
        Some(hits as f64 / self.rows.len() as f64)
    }

    /// CSV with header `sample_id,true,pred,group`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let rows = rd
            .deserialize()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|e| Error::Manifest {
                    line: i + 2,
                    detail: e.to_string(),
                })
            })
            .collect::<Result<Vec<Prediction>>>()?;
        Self::new(rows)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// One-vs-rest counts for a single (group, class) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn fpr(&self) -> Option<f64> {
        self.tnr().map(|t| 1.0 - t)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        self.tpr()
    }

    /// `2TP / (2TP + FP + FN)`, the harmonic mean of precision and recall.
    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per group, per class one-vs-rest counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupClassConfusion {
    classes: usize,
    groups: usize,
    cells: Vec<Counts>,
}

impl GroupClassConfusion {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn get(&self, group: usize, class: usize) -> &Counts {
        &self.cells[group * self.classes + class]
    }

    /// Counts with groups summed out.
    pub fn merged(&self) -> Vec<Counts> {
        let mut out = vec![Counts::default(); self.classes];
        for g in 0..self.groups {
            for (c, acc) in out.iter_mut().enumerate() {
                acc.add(self.get(g, c));
            }
        }
        out
    }
}

pub fn confusion(log: &PredictionLog, classes: usize, groups: usize) -> Result<GroupClassConfusion> {
    if log.is_empty() {
        return invalid("confusion", "empty prediction log");
    }
    let mut sizes = vec![0u64; groups];
    let mut hits = vec![(0u64, 0u64, 0u64); groups * classes]; // (tp, fp, fn)
    for r in log.rows() {
        if r.truth >= classes || r.predicted >= classes {
            return invalid(
                "confusion",
                format!("sample {}: class outside [0, {classes})", r.sample_id),
            );
        }
        if r.group >= groups {
            return invalid(
                "confusion",
                format!("sample {}: group {} outside [0, {groups})", r.sample_id, r.group),
            );
        }
        sizes[r.group] += 1;
        let base = r.group * classes;
        if r.truth == r.predicted {
            hits[base + r.truth].0 += 1;
        } else {
            hits[base + r.predicted].1 += 1;
            hits[base + r.truth].2 += 1;
        }
    }
    let cells = hits
        .iter()
        .enumerate()
        .map(|(i, &(tp, fp, fn_))| Counts {
            tp,
            fp,
            fn_,
            tn: sizes[i / classes] - tp - fp - fn_,
        })
        .collect();
    Ok(GroupClassConfusion {
        classes,
        groups,
        cells,
    })
}

/// Two-group gaps: mean over classes of `|dTNR|`, `|dTPR|` and
/// `(|dTPR| + |dFPR|) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessGaps {
    pub eopp0: f64,
    pub eopp1: f64,
    pub eodd: f64,
}

pub fn eopp_eodd(conf: &GroupClassConfusion) -> Result<FairnessGaps> {
    if conf.groups != 2 {
        return invalid("eopp_eodd", format!("needs exactly two groups, got {}", conf.groups));
    }
    let mut tnr_gaps = Vec::new();
    let mut tpr_gaps = Vec::new();
    let mut odds_gaps = Vec::new();
    for c in 0..conf.classes {
        let (a, b) = (conf.get(0, c), conf.get(1, c));
        let tnr = a.tnr().zip(b.tnr()).map(|(x, y)| (x - y).abs());
        let tpr = a.tpr().zip(b.tpr()).map(|(x, y)| (x - y).abs());
        let fpr = a.fpr().zip(b.fpr()).map(|(x, y)| (x - y).abs());
        tnr_gaps.extend(tnr);
        tpr_gaps.extend(tpr);
        if let (Some(p), Some(f)) = (tpr, fpr) {
            odds_gaps.push(0.5 * (p + f));
        }
    }
    Ok(FairnessGaps {
        eopp0: mean_or_zero(&tnr_gaps),
        eopp1: mean_or_zero(&tpr_gaps),
        eodd: mean_or_zero(&odds_gaps),
    })
}

// No class with a defined rate in both groups means no measurable gap.
fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Fairness/accuracy trade-off versus a baseline: relative accuracy gain minus
/// relative change of the (lower-is-better) fairness gap.
pub fn fate(acc_m: f64, acc_v: f64, fair_m: f64, fair_v: f64) -> Result<f64> {
    if !(acc_v > 0.0) || !(fair_v > 0.0) {
        return invalid(
            "fate",
            format!("baseline accuracy {acc_v} and fairness {fair_v} must be positive"),
        );
    }
    Ok((acc_m - acc_v) / acc_v - (fair_m - fair_v) / fair_v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro precision/recall/F1 per group plus the Avg and Diff rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub per_group: Vec<Prf1>,
    pub avg: Prf1,
    /// `max - min` across groups; `|A - B|` for two groups.
    pub diff: Prf1,
}

pub fn group_prf1(conf: &GroupClassConfusion) -> Result<AccuracySummary> {
    if conf.groups == 0 || conf.classes == 0 {
        return invalid("group_prf1", "confusion is empty");
    }
    let per_group: Vec<Prf1> = (0..conf.groups)
        .map(|g| {
            let cells: Vec<&Counts> = (0..conf.classes).map(|c| conf.get(g, c)).collect();
            let macro_avg = |f: fn(&Counts) -> Option<f64>| {
                let v: Vec<f64> = cells.iter().filter_map(|c| f(c)).collect();
                mean_or_zero(&v)
            };
            Prf1 {
                precision: macro_avg(Counts::precision),
                recall: macro_avg(Counts::recall),
                f1: macro_avg(Counts::f1),
            }
        })
        .collect();
    let across = |f: fn(&Prf1) -> f64| {
        let v: Vec<f64> = per_group.iter().map(f).collect();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        (v.iter().sum::<f64>() / v.len() as f64, max - min)
    };
    let (p, r, f) = (across(|m| m.precision), across(|m| m.recall), across(|m| m.f1));
    Ok(AccuracySummary {
        avg: Prf1 {
            precision: p.0,
            recall: r.0,
            f1: f.0,
        },
        diff: Prf1 {
            precision: p.1,
            recall: r.1,
            f1: f.1,
        },
        per_group,
    })
}

/// FATE for each gap metric; `None` where the baseline gap is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FateScores {
    pub eopp0: Option<f64>,
    pub eopp1: Option<f64>,
    pub eodd: Option<f64>,
}

/// What a report is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub name: String,
    pub avg_f1: f64,
    pub gaps: FairnessGaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub samples: usize,
    pub accuracy: f64,
    pub group_accuracy: Vec<Option<f64>>,
    pub metrics: AccuracySummary,
    pub gaps: FairnessGaps,
    pub baseline: BaselineSummary,
    pub fate: FateScores,
}

impl FairnessReport {
    /// Builds a report; with `baseline = None` the log is its own baseline.
    pub fn assemble(
        log: &PredictionLog,
        classes: usize,
        groups: usize,
        baseline: Option<BaselineSummary>,
    ) -> Result<Self> {
        let conf = confusion(log, classes, groups)?;
        let metrics = group_prf1(&conf)?;
        let gaps = eopp_eodd(&conf)?;
        let baseline = baseline.unwrap_or_else(|| BaselineSummary {
            name: "self".into(),
            avg_f1: metrics.avg.f1,
            gaps,
        });
        let acc = metrics.avg.f1;
        let fate = FateScores {
            eopp0: fate(acc, baseline.avg_f1, gaps.eopp0, baseline.gaps.eopp0).ok(),
            eopp1: fate(acc, baseline.avg_f1, gaps.eopp1, baseline.gaps.eopp1).ok(),
            eodd: fate(acc, baseline.avg_f1, gaps.eodd, baseline.gaps.eodd).ok(),
        };
        Ok(Self {
            samples: log.len(),
            accuracy: log.accuracy().unwrap_or(0.0),
            group_accuracy: (0..groups).map(|g| log.filter(|r| r.group == g).accuracy()).collect(),
            metrics,
            gaps,
            baseline,
            fate,
        })
    }

    pub fn summary(&self, name: &str) -> BaselineSummary {
        BaselineSummary {
            name: name.to_string(),
            avg_f1: self.metrics.avg.f1,
            gaps: self.gaps,
        }
    }
}
