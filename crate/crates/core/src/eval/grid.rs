//! Ablation and window-length grids: a list of model configurations, each
//! trained and evaluated by a caller-supplied runner.

use std::fmt::Write as _;

use log::{error, info};

use super::report::{align, EvalReport};
use crate::data::Condition;
use crate::error::Result;
use crate::model::{FusionMode, ModelConfig};
use crate::templates::{StaticFilter, TemplateKind};
use crate::tensor::ReduceMode;

#[derive(Clone, Debug)]
pub struct GridRow {
    /// One entry per mark column: `"x"` for a set flag, `""` otherwise, or a
    /// value for parameter sweeps.
    pub marks: Vec<String>,
    pub config: ModelConfig,
    /// `None` until run; `Err` holds the failure message of a failed cell.
    pub outcome: Option<std::result::Result<EvalReport, String>>,
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub name: String,
    pub mark_columns: Vec<String>,
    pub rows: Vec<GridRow>,
    /// Appends the mean over condition columns.
    pub overall_column: bool,
}

fn mark(on: bool) -> String {
    if on {
        "x".into()
    } else {
        String::new()
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// The static-exclusion template of `base`, median-filtered when `base` uses another kind.
fn t3(base: &ModelConfig) -> TemplateKind {
    match base.bie.template {
        Some(t @ TemplateKind::StaticExcl(_)) => t,
        _ => TemplateKind::StaticExcl(StaticFilter::Median),
    }
}

/// Baseline plus every template × fusion cell, fusion-major. Aggregation is
/// the plain frame mean without the aggregator, so the baseline row is the
/// first row of [`ablation_table2`].
pub fn ablation_table1(base: &ModelConfig) -> GridReport {
    let mut plain = base.clone();
    plain.mfa.enabled = false;
    plain.mfa.final_reduce = ReduceMode::Mean;
    let mut rows = Vec::new();
    let mut baseline = plain.clone();
    baseline.bie.template = None;
    rows.push(GridRow {
        marks: vec![String::new(); 6],
        config: baseline,
        outcome: None,
    });
    let templates = [TemplateKind::Diff, TemplateKind::MultiDiff, t3(base)];
    for (fi, fusion) in FusionMode::ALL.into_iter().enumerate() {
        for (ti, template) in templates.into_iter().enumerate() {
            let mut cfg = plain.clone();
            cfg.bie.template = Some(template);
            cfg.bie.fusion = fusion;
            let marks = (0..6).map(|c| mark(c == ti || c == 3 + fi)).collect();
            rows.push(GridRow {
                marks,
                config: cfg,
                outcome: None,
            });
        }
    }
    GridReport {
        name: "bie".into(),
        mark_columns: strings(&["T1", "T2", "T3", "Micro", "Global", "Adaptive"]),
        rows,
        overall_column: false,
    }
}

/// Statistical function (mean, max) × {plain, aggregator, aggregator with
/// T3 adaptive extractors}: six rows.
pub fn ablation_table2(base: &ModelConfig) -> GridReport {
    let mut rows = Vec::new();
    for (bie, mfa) in [(false, false), (false, true), (true, true)] {
        for stat in [ReduceMode::Mean, ReduceMode::Max] {
            let mut cfg = base.clone();
            cfg.mfa.enabled = mfa;
            cfg.mfa.within = stat;
            cfg.mfa.final_reduce = stat;
            cfg.bie.template = bie.then(|| t3(base));
            cfg.bie.fusion = FusionMode::Adaptive;
            let marks = vec![
                mark(stat == ReduceMode::Mean),
                mark(stat == ReduceMode::Max),
                mark(bie),
                mark(mfa),
            ];
            rows.push(GridRow {
                marks,
                config: cfg,
                outcome: None,
            });
        }
    }
    GridReport {
        name: "mfa".into(),
        mark_columns: strings(&["Mean", "Max", "BIE", "MFA"]),
        rows,
        overall_column: false,
    }
}

/// One row per aggregation window length.
pub fn window_sweep(base: &ModelConfig, windows: &[usize]) -> GridReport {
    let rows = windows
        .iter()
        .map(|&l| {
            let mut cfg = base.clone();
            cfg.mfa.enabled = true;
            cfg.mfa.window = l;
            GridRow {
                marks: vec![l.to_string()],
                config: cfg,
                outcome: None,
            }
        })
        .collect();
    GridReport {
        name: "window".into(),
        mark_columns: strings(&["L"]),
        rows,
        overall_column: true,
    }
}

impl GridReport {
    /// Runs every row; a failing row is recorded and the grid continues.
    pub fn run(&mut self, mut runner: impl FnMut(usize, &ModelConfig) -> Result<EvalReport>) {
        let total = self.rows.len();
        for (i, row) in self.rows.iter_mut().enumerate() {
            info!("{} grid: row {}/{total}", self.name, i + 1);
            row.outcome = Some(runner(i, &row.config).map_err(|e| {
                error!("{} grid row {} failed: {e}", self.name, i + 1);
                e.to_string()
            }));
        }
    }

    /// Condition columns: those reported by any row, or NM/BG/CL when no row
    /// has a report.
    pub fn conditions(&self) -> Vec<Condition> {
        let mut seen: Vec<Condition> = self
            .rows
            .iter()
            .filter_map(|r| r.outcome.as_ref()?.as_ref().ok())
            .flat_map(|rep| rep.conditions.iter().map(|c| c.condition))
            .collect();
        seen.sort();
        seen.dedup();
        if seen.is_empty() {
            Condition::ALL.to_vec()
        } else {
            seen
        }
    }

    pub fn failures(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| matches!(r.outcome, Some(Err(_))))
            .count()
    }

    fn header(&self) -> Vec<String> {
        let mut h = self.mark_columns.clone();
        h.extend(self.conditions().iter().map(|c| c.to_string()));
        if self.overall_column {
            h.push("mean".into());
        }
        h.push("status".into());
        h
    }

    fn values(&self, row: &GridRow, fmt: fn(Option<f64>) -> String) -> Vec<String> {
        let conditions = self.conditions();
        let mut out = Vec::new();
        match &row.outcome {
            Some(Ok(rep)) => {
                out.extend(conditions.iter().map(|&c| fmt(rep.mean(c))));
                if self.overall_column {
                    out.push(fmt(rep.overall_mean()));
                }
                out.push("ok".into());
            }
            other => {
                let n = conditions.len() + usize::from(self.overall_column);
                out.extend(std::iter::repeat_n(fmt(None), n));
                out.push(match other {
                    Some(Err(e)) => format!("failed: {e}"),
                    _ => "not run".into(),
                });
            }
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in &self.rows {
            let mut cells = row.marks.clone();
            cells.extend(self.values(row, |v| v.map(|a| format!("{a:.4}")).unwrap_or_default()));
            let cells: Vec<String> = cells.into_iter().map(csv_field).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn text(&self) -> String {
        let mut rows = vec![self.header()];
        for row in &self.rows {
            let mut cells = row.marks.clone();
            cells.extend(self.values(row, |v| {
                v.map(|a| format!("{a:.1}")).unwrap_or_else(|| "-".into())
            }));
            rows.push(cells);
        }
        align(&rows)
    }
}

fn csv_field(s: String) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::eval::report::{Cell, ConditionReport};

    fn report(acc: usize) -> EvalReport {
        EvalReport {
            views: vec![0, 90],
            exclude_identical_view: true,
            conditions: vec![ConditionReport {
                condition: Condition::Nm,
                cells: vec![
                    vec![
                        Some(Cell {
                            correct: acc,
                            total: 100
                        });
                        2
                    ];
                    2
                ],
            }],
        }
    }

    #[test]
    fn bie_grid_has_baseline_and_nine_cells() {
        let g = ablation_table1(&ModelConfig::default());
        assert_eq!(g.rows.len(), 10);
        assert!(g.rows[0].config.bie.template.is_none());
        assert!(g.rows[0].marks.iter().all(String::is_empty));
        let mut seen = std::collections::HashSet::new();
        for row in &g.rows[1..] {
            assert_eq!(row.marks.iter().filter(|m| *m == "x").count(), 2);
            seen.insert((
                row.config.bie.template.unwrap().table_label(),
                row.config.bie.fusion,
            ));
        }
        assert_eq!(seen.len(), 9);
        assert_eq!(g.rows[1].marks, ["x", "", "", "x", "", ""]);
        assert_eq!(g.rows[9].marks, ["", "", "x", "", "", "x"]);
        assert!(g
            .rows
            .iter()
            .all(|r| !r.config.mfa.enabled && r.config.mfa.final_reduce == ReduceMode::Mean));
    }

    #[test]
    fn mfa_grid_has_six_rows() {
        let g = ablation_table2(&ModelConfig::default());
        assert_eq!(g.rows.len(), 6);
        let flags: Vec<_> = g
            .rows
            .iter()
            .map(|r| {
                (
                    r.config.mfa.final_reduce,
                    r.config.bie.template.is_some(),
                    r.config.mfa.enabled,
                )
            })
            .collect();
        assert_eq!(
            flags,
            [
                (ReduceMode::Mean, false, false),
                (ReduceMode::Max, false, false),
                (ReduceMode::Mean, false, true),
                (ReduceMode::Max, false, true),
                (ReduceMode::Mean, true, true),
                (ReduceMode::Max, true, true),
            ]
        );
        assert_eq!(g.rows[0].config, {
            let t1 = ablation_table1(&ModelConfig::default());
            let mut c = t1.rows[0].config.clone();
            c.mfa.within = ReduceMode::Mean;
            c
        });
    }

    #[test]
    fn failed_rows_are_recorded_and_the_grid_continues() {
        let mut g = window_sweep(&ModelConfig::default(), &[3, 5, 7]);
        g.run(|i, cfg| {
            if i == 1 {
                Err(Error::Config(format!("window {}", cfg.mfa.window)))
            } else {
                Ok(report(50 + i))
            }
        });
        assert_eq!(g.failures(), 1);
        let csv = g.csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "L,NM,mean,status");
        assert_eq!(lines[1], "3,50.0000,50.0000,ok");
        assert_eq!(lines[2], "5,,,failed: configuration error: window 5");
        assert_eq!(lines[3], "7,52.0000,52.0000,ok");
        assert!(g.text().contains("failed"));
    }

    #[test]
    fn unrun_grid_lists_all_conditions() {
        let g = ablation_table2(&ModelConfig::default());
        assert!(g.csv().starts_with("Mean,Max,BIE,MFA,NM,BG,CL,status\n"));
    }
}
