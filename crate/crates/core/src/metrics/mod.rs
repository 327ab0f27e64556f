//! Classification exact ratio, segmentation mIoU, and fold aggregation.
//!
//! The default mIoU accumulates TP/FP/FN pixels per class across every
//! query sample of a run before taking per-class ratios (the standard
//! few-shot segmentation protocol); per-episode averaging is available
//! behind [`MiouMode::PerEpisode`] for comparison.

mod report;

pub use report::{
    render_csv, render_table, report_from_json, report_to_json, AvgMetrics, Report, RunReport,
    REPORT_SCHEMA_VERSION,
};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{ClassCounts, EpisodeStatus, ResultLine};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("contract: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Pool TP/FP/FN pixels across all query samples, then take per-class
    /// ratios.
    #[default]
    Accumulate,
    /// Average the per-episode class-mean IoU over episodes.
    PerEpisode,
}

/// Per-class pixel tallies for one run; counts only ever increase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoUAccumulator {
    counts: Vec<ClassCounts>,
}

impl IoUAccumulator {
    pub fn new(n_ways: u32) -> Self {
        Self {
            counts: (1..=n_ways)
                .map(|class| ClassCounts {
                    class,
                    tp: 0,
                    fp: 0,
                    fn_: 0,
                })
                .collect(),
        }
    }

    pub fn n_ways(&self) -> u32 {
        self.counts.len() as u32
    }

    /// Elementwise addition of one episode's per-class pixel counts.
    pub fn accumulate(&mut self, episode_counts: &[ClassCounts]) -> Result<(), MetricError> {
        for c in episode_counts {
            if c.class == 0 || c.class > self.n_ways() {
                return Err(MetricError::Contract(format!(
                    "class {} outside 1..={}",
                    c.class,
                    self.n_ways()
                )));
            }
            let slot = &mut self.counts[(c.class - 1) as usize];
            slot.tp += c.tp;
            slot.fp += c.fp;
            slot.fn_ += c.fn_;
        }
        Ok(())
    }

    /// Merge another accumulator; reduction order is free.
    pub fn merge(&mut self, other: &IoUAccumulator) -> Result<(), MetricError> {
        self.accumulate(&other.counts)
    }

    pub fn counts(&self) -> &[ClassCounts] {
        &self.counts
    }

    /// Per-class TP/(TP+FP+FN); `None` when the class never appeared.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .map(|c| {
                let denominator = c.tp + c.fp + c.fn_;
                (denominator > 0).then(|| c.tp as f64 / denominator as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a nonzero denominator.
    pub fn miou(&self) -> Result<f64, MetricError> {
        let per_class = self.per_class_iou();
        let valid: Vec<f64> = per_class.into_iter().flatten().collect();
        if valid.is_empty() {
            return Err(MetricError::Undefined(
                "every class has TP+FP+FN = 0".into(),
            ));
        }
        Ok(valid.iter().sum::<f64>() / valid.len() as f64)
    }
}

/// Mean of the indicator [predicted set == truth set] over query samples.
pub fn exact_ratio(results: &[(BTreeSet<u32>, BTreeSet<u32>)]) -> Result<f64, MetricError> {
    if results.is_empty() {
        return Err(MetricError::Undefined("exact ratio over zero samples".into()));
    }
    let exact = results.iter().filter(|(pred, truth)| pred == truth).count();
    Ok(exact as f64 / results.len() as f64)
}

/// Arithmetic mean over exactly the configured number of folds.
pub fn fold_average(per_fold: &[f64], expected_folds: usize) -> Result<f64, MetricError> {
    if per_fold.len() != expected_folds {
        return Err(MetricError::Contract(format!(
            "{} fold values, expected {expected_folds}",
            per_fold.len()
        )));
    }
    if per_fold.is_empty() {
        return Err(MetricError::Undefined("average over zero folds".into()));
    }
    Ok(per_fold.iter().sum::<f64>() / per_fold.len() as f64)
}

/// Half-up rounding to one decimal, with a tiny guard so values sitting a
/// float ulp below an exact .x5 boundary still round up.
pub fn round_half_up_1(value: f64) -> f64 {
    ((value * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

/// Render a ratio in percent with one decimal, e.g. 0.579 -> "57.9".
pub fn render_percent(ratio: f64) -> String {
    format!("{:.1}", round_half_up_1(ratio * 100.0))
}

/// Aggregate one fold's result lines into a report row.
///
/// `include_failed` keeps failed episodes scored as empty predictions
/// (conservative, the default); disabling it drops them from both metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: u32,
    pub episodes: u64,
    pub failed: u64,
    pub er: f64,
    pub miou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn fold_report(
    fold: u32,
    lines: &[ResultLine],
    n_ways: u32,
    mode: MiouMode,
    include_failed: bool,
) -> Result<FoldReport, MetricError> {
    let total = lines.len() as u64;
    let failed = lines
        .iter()
        .filter(|l| l.status == EpisodeStatus::Failed)
        .count() as u64;
    let scored: Vec<&ResultLine> = lines
        .iter()
        .filter(|l| include_failed || l.status == EpisodeStatus::Ok)
        .collect();
    if scored.is_empty() {
        return Err(MetricError::Undefined(format!(
            "fold {fold} has no scored episodes"
        )));
    }

    let pairs: Vec<(BTreeSet<u32>, BTreeSet<u32>)> = scored
        .iter()
        .map(|l| {
            (
                l.y_pred.iter().copied().collect(),
                l.y_true.iter().copied().collect(),
            )
        })
        .collect();
    let er = exact_ratio(&pairs)?;

    let mut accumulator = IoUAccumulator::new(n_ways);
    for line in &scored {
        accumulator.accumulate(&line.per_class)?;
    }
    let per_class_iou = accumulator.per_class_iou();
    let miou = match mode {
        MiouMode::Accumulate => accumulator.miou().ok(),
        MiouMode::PerEpisode => {
            let episode_means: Vec<f64> = scored
                .iter()
                .filter_map(|line| {
                    let ious: Vec<f64> = line
                        .per_class
                        .iter()
                        .filter(|c| c.tp + c.fp + c.fn_ > 0)
                        .map(|c| c.tp as f64 / (c.tp + c.fp + c.fn_) as f64)
                        .collect();
                    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
                })
                .collect();
            (!episode_means.is_empty())
                .then(|| episode_means.iter().sum::<f64>() / episode_means.len() as f64)
        }
    };

    Ok(FoldReport {
        fold,
        episodes: total,
        failed,
        er,
        miou,
        per_class_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[u32]) -> BTreeSet<u32> {
        items.iter().copied().collect()
    }

    #[test]
    fn exact_ratio_examples() {
        assert_eq!(exact_ratio(&[(set(&[1]), set(&[1]))]).unwrap(), 1.0);
        assert_eq!(
            exact_ratio(&[(set(&[1]), set(&[1])), (set(&[1, 2]), set(&[2]))]).unwrap(),
            0.5
        );
        // correctly predicting absence counts as an exact match
        assert_eq!(exact_ratio(&[(set(&[]), set(&[]))]).unwrap(), 1.0);
        assert!(exact_ratio(&[]).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let mut acc = IoUAccumulator::new(2);
        acc.accumulate(&[ClassCounts {
            class: 1,
            tp: 50,
            fp: 25,
            fn_: 25,
        }])
        .unwrap();
        assert_eq!(acc.counts()[0].tp, 50);
        acc.accumulate(&[ClassCounts {
            class: 1,
            tp: 50,
            fp: 25,
            fn_: 25,
        }])
        .unwrap();
        assert_eq!(acc.counts()[0].tp, 100);
        assert_eq!(acc.counts()[0].fp, 50);
        assert!(acc
            .accumulate(&[ClassCounts {
                class: 3,
                tp: 1,
                fp: 0,
                fn_: 0
            }])
            .is_err());
    }

    #[test]
    fn miou_worked_example() {
        // class1 50/(50+25+25) = 0.5; class2 30/(30+0+10) = 0.75 -> 0.625
        let mut acc = IoUAccumulator::new(2);
        acc.accumulate(&[
            ClassCounts {
                class: 1,
                tp: 50,
                fp: 25,
                fn_: 25,
            },
            ClassCounts {
                class: 2,
                tp: 30,
                fp: 0,
                fn_: 10,
            },
        ])
        .unwrap();
        assert_eq!(acc.miou().unwrap(), 0.625);
    }

    #[test]
    fn miou_edge_cases() {
        let mut acc = IoUAccumulator::new(2);
        acc.accumulate(&[
            ClassCounts {
                class: 1,
                tp: 10,
                fp: 0,
                fn_: 0,
            },
            ClassCounts {
                class: 2,
                tp: 99,
                fp: 0,
                fn_: 0,
            },
        ])
        .unwrap();
        assert_eq!(acc.miou().unwrap(), 1.0);

        // a class with TP=0 but FP+FN>0 contributes 0 to the mean
        let mut acc = IoUAccumulator::new(2);
        acc.accumulate(&[
            ClassCounts {
                class: 1,
                tp: 0,
                fp: 5,
                fn_: 5,
            },
            ClassCounts {
                class: 2,
                tp: 10,
                fp: 0,
                fn_: 0,
            },
        ])
        .unwrap();
        assert_eq!(acc.miou().unwrap(), 0.5);

        // all denominators zero -> undefined
        let acc = IoUAccumulator::new(2);
        assert!(acc.miou().is_err());

        // zero-denominator classes are excluded, not scored
        let mut acc = IoUAccumulator::new(3);
        acc.accumulate(&[ClassCounts {
            class: 1,
            tp: 10,
            fp: 10,
            fn_: 0,
        }])
        .unwrap();
        assert_eq!(acc.miou().unwrap(), 0.5);
    }

    #[test]
    fn fold_average_reproduces_printed_averages() {
        let miou = fold_average(&[61.9, 55.3, 56.7, 57.5], 4).unwrap();
        assert!((miou - 57.85).abs() < 1e-9);
        assert_eq!(format!("{:.1}", round_half_up_1(miou)), "57.9");

        let er = fold_average(&[92.3, 81.5, 86.7, 91.5], 4).unwrap();
        assert!((er - 88.0).abs() < 1e-9);
        assert_eq!(format!("{:.1}", round_half_up_1(er)), "88.0");

        assert_eq!(fold_average(&[7.0, 7.0, 7.0, 7.0], 4).unwrap(), 7.0);
        assert!(fold_average(&[1.0, 2.0], 4).is_err());
    }

    #[test]
    fn accumulation_is_permutation_invariant() {
        let episodes = [
            vec![ClassCounts { class: 1, tp: 5, fp: 2, fn_: 3 }],
            vec![ClassCounts { class: 2, tp: 9, fp: 0, fn_: 1 }],
            vec![ClassCounts { class: 1, tp: 1, fp: 1, fn_: 1 }],
        ];
        let mut forward = IoUAccumulator::new(2);
        for e in &episodes {
            forward.accumulate(e).unwrap();
        }
        let mut backward = IoUAccumulator::new(2);
        for e in episodes.iter().rev() {
            backward.accumulate(e).unwrap();
        }
        assert_eq!(forward, backward);
        assert_eq!(forward.miou().unwrap(), backward.miou().unwrap());
    }

    #[test]
    fn render_percent_half_up() {
        assert_eq!(render_percent(0.57849), "57.8");
        assert_eq!(render_percent(0.5785), "57.9");
        assert_eq!(render_percent(1.0), "100.0");
        assert_eq!(render_percent(0.0), "0.0");
    }
}
