//! Machine-readable run reports.
//!
//! One CSV row per (run, seed, epoch) plus one summary row per (run, seed)
//! holding the best test top-1 in the `test_top1` column and the epoch it
//! occurred at. Floats are written in Rust's shortest round-trip form with a
//! `.` decimal separator and LF line endings, so `parse(emit(r)) == r` holds
//! bit for bit.

use std::path::Path;

use clkd_core::checkpoint::write_text_atomic;
use clkd_core::trainer::RunMetrics;

use crate::failure::{CliResult, Failure};

pub const CSV_HEADER: &str = "kind,run_id,seed,epoch,lr,loss_ce,loss_ins,loss_cla,loss_cc,loss_feature,train_acc,test_top1,test_topk,wall_clock_s";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Epoch,
    Summary,
}

impl RowKind {
    fn as_str(self) -> &'static str {
        match self {
            RowKind::Epoch => "epoch",
            RowKind::Summary => "summary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub kind: RowKind,
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_ins: f64,
    pub loss_cla: f64,
    pub loss_cc: f64,
    pub loss_feature: f64,
    pub train_acc: f64,
    pub test_top1: f64,
    pub test_topk: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    /// Append all epoch rows of one run plus its summary row.
    pub fn push_run(&mut self, run_id: &str, seed: u64, metrics: &RunMetrics) {
        for em in &metrics.epochs {
            self.rows.push(ReportRow {
                kind: RowKind::Epoch,
                run_id: run_id.to_string(),
                seed,
                epoch: em.epoch,
                lr: em.lr,
                loss_ce: em.components.ce,
                loss_ins: em.components.ins,
                loss_cla: em.components.cla,
                loss_cc: em.components.cc,
                loss_feature: em.components.feature,
                train_acc: em.train_acc,
                test_top1: em.test_top1,
                test_topk: em.test_topk,
                wall_clock_s: em.seconds,
            });
        }
        self.rows.push(ReportRow {
            kind: RowKind::Summary,
            run_id: run_id.to_string(),
            seed,
            epoch: metrics.best_epoch,
            lr: 0.0,
            loss_ce: 0.0,
            loss_ins: 0.0,
            loss_cla: 0.0,
            loss_cc: 0.0,
            loss_feature: 0.0,
            train_acc: 0.0,
            test_top1: metrics.best_top1,
            test_topk: 0.0,
            wall_clock_s: 0.0,
        });
    }

    /// Best test top-1 of one (run, seed), from its summary row.
    pub fn best_top1(&self, run_id: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.kind == RowKind::Summary && r.run_id == run_id && r.seed == seed)
            .map(|r| r.test_top1)
    }

    /// Median of the per-seed best top-1 values for one run id.
    pub fn median_best_top1(&self, run_id: &str) -> Option<f64> {
        let mut best: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.kind == RowKind::Summary && r.run_id == run_id)
            .map(|r| r.test_top1)
            .collect();
        if best.is_empty() {
            return None;
        }
        best.sort_by(f64::total_cmp);
        Some(best[best.len() / 2])
    }

    /// Epoch rows of one (run, seed), in epoch order.
    pub fn epoch_rows(&self, run_id: &str, seed: u64) -> Vec<&ReportRow> {
        self.rows
            .iter()
            .filter(|r| r.kind == RowKind::Epoch && r.run_id == run_id && r.seed == seed)
            .collect()
    }

    pub fn run_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for row in &self.rows {
            if !ids.contains(&row.run_id) {
                ids.push(row.run_id.clone());
            }
        }
        ids
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.kind.as_str(),
                r.run_id,
                r.seed,
                r.epoch,
                r.lr,
                r.loss_ce,
                r.loss_ins,
                r.loss_cla,
                r.loss_cc,
                r.loss_feature,
                r.train_acc,
                r.test_top1,
                r.test_topk,
                r.wall_clock_s
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> CliResult<RunReport> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != CSV_HEADER {
            return Err(Failure {
                code: 4,
                message: format!("unexpected report header {header:?}"),
            });
        }
        let mut rows = Vec::new();
        for (index, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 14 {
                return Err(Failure {
                    code: 4,
                    message: format!("report line {} has {} fields", index + 2, fields.len()),
                });
            }
            let kind = match fields[0] {
                "epoch" => RowKind::Epoch,
                "summary" => RowKind::Summary,
                other => {
                    return Err(Failure {
                        code: 4,
                        message: format!("unknown row kind {other:?} on line {}", index + 2),
                    })
                }
            };
            let parse_f = |i: usize| -> CliResult<f64> {
                fields[i].parse().map_err(|e| Failure {
                    code: 4,
                    message: format!("bad float {:?} on line {}: {e}", fields[i], index + 2),
                })
            };
            let parse_u = |i: usize| -> CliResult<u64> {
                fields[i].parse().map_err(|e| Failure {
                    code: 4,
                    message: format!("bad integer {:?} on line {}: {e}", fields[i], index + 2),
                })
            };
            rows.push(ReportRow {
                kind,
                run_id: fields[1].to_string(),
                seed: parse_u(2)?,
                epoch: parse_u(3)? as usize,
                lr: parse_f(4)?,
                loss_ce: parse_f(5)?,
                loss_ins: parse_f(6)?,
                loss_cla: parse_f(7)?,
                loss_cc: parse_f(8)?,
                loss_feature: parse_f(9)?,
                train_acc: parse_f(10)?,
                test_top1: parse_f(11)?,
                test_topk: parse_f(12)?,
                wall_clock_s: parse_f(13)?,
            });
        }
        Ok(RunReport { rows })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_text_atomic(path, &self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![
            -1e6f64..1e6,
            Just(0.0),
            Just(1.0 / 3.0),
            Just(f64::MIN_POSITIVE),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn csv_round_trips(
            seed in 0u64..100,
            epoch in 0usize..500,
            values in proptest::collection::vec(finite(), 10),
        ) {
            let row = ReportRow {
                kind: RowKind::Epoch,
                run_id: "clkd".into(),
                seed,
                epoch,
                lr: values[0],
                loss_ce: values[1],
                loss_ins: values[2],
                loss_cla: values[3],
                loss_cc: values[4],
                loss_feature: values[5],
                train_acc: values[6],
                test_top1: values[7],
                test_topk: values[8],
                wall_clock_s: values[9],
            };
            let mut summary = row.clone();
            summary.kind = RowKind::Summary;
            let report = RunReport { rows: vec![row, summary] };
            let parsed = RunReport::from_csv(&report.to_csv()).unwrap();
            prop_assert_eq!(report, parsed);
        }
    }

    #[test]
    fn rejects_wrong_header() {
        assert!(RunReport::from_csv("nope\n").is_err());
    }

    #[test]
    fn summary_lookup() {
        let metrics = RunMetrics {
            epochs: vec![],
            best_top1: 0.75,
            best_epoch: 3,
        };
        let mut report = RunReport::default();
        report.push_run("clkd", 7, &metrics);
        assert_eq!(report.best_top1("clkd", 7), Some(0.75));
        assert_eq!(report.median_best_top1("clkd"), Some(0.75));
        assert!(report.best_top1("other", 7).is_none());
    }
}
