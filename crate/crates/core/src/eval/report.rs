//! Nearest-neighbor rank-1 matching and cross-view accuracy tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use super::features::{FeatureTable, Label};
use crate::data::Condition;
use crate::error::{Error, Result};
use crate::model::forward::euclidean;

/// Matches and probe count of one (probe view, gallery view) cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub correct: usize,
    pub total: usize,
}

impl Cell {
    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.total as f64
    }
}

/// Accuracy matrix for one probe condition; `cells[p][g]` is indexed by the
/// report's view list, `None` when the cell could not be evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub condition: Condition,
    pub cells: Vec<Vec<Option<Cell>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub views: Vec<u32>,
    pub exclude_identical_view: bool,
    pub conditions: Vec<ConditionReport>,
}

impl ConditionReport {
    pub fn accuracy(&self, p: usize, g: usize) -> Option<f64> {
        self.cells[p][g].map(|c| c.accuracy())
    }

    fn included<'a>(
        &'a self,
        exclude_identical: bool,
    ) -> impl Iterator<Item = (usize, usize, f64)> + 'a {
        self.cells.iter().enumerate().flat_map(move |(p, row)| {
            row.iter().enumerate().filter_map(move |(g, c)| {
                let skip = exclude_identical && p == g;
                c.filter(|_| !skip).map(|c| (p, g, c.accuracy()))
            })
        })
    }

    /// Mean over gallery views for probe view `p`.
    pub fn view_mean(&self, p: usize, exclude_identical: bool) -> Option<f64> {
        mean(
            self.included(exclude_identical)
                .filter(|&(q, _, _)| q == p)
                .map(|(_, _, a)| a),
        )
    }

    /// Mean over every included cell.
    pub fn mean(&self, exclude_identical: bool) -> Option<f64> {
        mean(self.included(exclude_identical).map(|(_, _, a)| a))
    }

    pub fn absent(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_none()).count()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

impl EvalReport {
    pub fn condition(&self, condition: Condition) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.condition == condition)
    }

    pub fn view_mean(&self, c: &ConditionReport, p: usize) -> Option<f64> {
        c.view_mean(p, self.exclude_identical_view)
    }

    pub fn mean(&self, condition: Condition) -> Option<f64> {
        self.condition(condition)?.mean(self.exclude_identical_view)
    }

    /// Cells that could not be evaluated, over all conditions.
    pub fn absent(&self) -> usize {
        self.conditions.iter().map(ConditionReport::absent).sum()
    }

    /// Mean of the per-condition means.
    pub fn overall_mean(&self) -> Option<f64> {
        mean(
            self.conditions
                .iter()
                .filter_map(|c| c.mean(self.exclude_identical_view)),
        )
    }

    /// Full matrix of one condition as CSV: one row per probe view, one
    /// column per gallery view, then the row mean.
    pub fn condition_csv(&self, c: &ConditionReport) -> String {
        let mut out = String::from("probe_view");
        for v in &self.views {
            let _ = write!(out, ",{v}");
        }
        out.push_str(",mean\n");
        for (p, pv) in self.views.iter().enumerate() {
            let _ = write!(out, "{pv}");
            for g in 0..self.views.len() {
                let _ = write!(out, ",{}", fmt_csv(c.accuracy(p, g)));
            }
            let _ = writeln!(out, ",{}", fmt_csv(self.view_mean(c, p)));
        }
        out
    }

    pub fn condition_text(&self, c: &ConditionReport) -> String {
        let mut rows = vec![header("probe\\gallery", &self.views)];
        for (p, pv) in self.views.iter().enumerate() {
            let mut row = vec![format!("{pv}°")];
            row.extend((0..self.views.len()).map(|g| fmt_text(c.accuracy(p, g))));
            row.push(fmt_text(self.view_mean(c, p)));
            rows.push(row);
        }
        let mut out = format!("probe condition {}\n", c.condition);
        out.push_str(&align(&rows));
        let _ = writeln!(
            out,
            "mean {}",
            fmt_text(c.mean(self.exclude_identical_view))
        );
        out
    }

    /// One row per condition: the probe-view means and the overall mean.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("condition");
        for v in &self.views {
            let _ = write!(out, ",{v}");
        }
        out.push_str(",mean\n");
        for c in &self.conditions {
            let _ = write!(out, "{}", c.condition);
            for p in 0..self.views.len() {
                let _ = write!(out, ",{}", fmt_csv(self.view_mean(c, p)));
            }
            let _ = writeln!(out, ",{}", fmt_csv(c.mean(self.exclude_identical_view)));
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut rows = vec![header("condition", &self.views)];
        for c in &self.conditions {
            let mut row = vec![c.condition.to_string()];
            row.extend((0..self.views.len()).map(|p| fmt_text(self.view_mean(c, p))));
            row.push(fmt_text(c.mean(self.exclude_identical_view)));
            rows.push(row);
        }
        let mut out = align(&rows);
        if self.exclude_identical_view {
            out.push_str("means exclude identical-view cells\n");
        }
        let absent = self.absent();
        if absent > 0 {
            let _ = writeln!(out, "{absent} cell(s) absent");
        }
        out
    }

    /// Writes `rank1_<cond>.csv`/`.txt` per condition plus `summary.csv`/`.txt`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut files = Vec::new();
        let mut put = |name: String, body: String| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, body)
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            files.push(path);
            Ok(())
        };
        for c in &self.conditions {
            put(
                format!("rank1_{}.csv", c.condition.tag()),
                self.condition_csv(c),
            )?;
            put(
                format!("rank1_{}.txt", c.condition.tag()),
                self.condition_text(c),
            )?;
        }
        put("summary.csv".into(), self.summary_csv())?;
        put("summary.txt".into(), self.summary_text())?;
        Ok(files)
    }
}

fn header(corner: &str, views: &[u32]) -> Vec<String> {
    let mut row = vec![corner.to_string()];
    row.extend(views.iter().map(|v| format!("{v}°")));
    row.push("mean".into());
    row
}

fn fmt_csv(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.4}")).unwrap_or_default()
}

fn fmt_text(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.1}")).unwrap_or_else(|| "-".into())
}

/// Right-aligns every column to its widest entry.
pub(crate) fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|i| {
            rows.iter()
                .filter_map(|r| r.get(i))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}{s}", " ".repeat(widths[i] - s.chars().count())))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Cross-view rank-1 accuracy of `probe` against `gallery` under Euclidean
/// distance between flattened features.
pub fn rank1(
    gallery: &FeatureTable,
    probe: &FeatureTable,
    exclude_identical_view: bool,
) -> EvalReport {
    let distances: Vec<Vec<f64>> = probe
        .entries
        .par_iter()
        .map(|p| {
            gallery
                .entries
                .iter()
                .map(|g| euclidean(p.feature.flat(), g.feature.flat()))
                .collect()
        })
        .collect();
    rank1_from_distances(
        &gallery.labels(),
        &probe.labels(),
        &distances,
        exclude_identical_view,
    )
}

/// Rank-1 matching from a precomputed `[probe][gallery]` distance matrix.
///
/// Within each gallery view a probe is assigned the subject whose closest
/// gallery sequence is nearest; ties go to the smallest subject id.
pub fn rank1_from_distances(
    gallery: &[Label],
    probe: &[Label],
    distances: &[Vec<f64>],
    exclude_identical_view: bool,
) -> EvalReport {
    let views: Vec<u32> = gallery
        .iter()
        .chain(probe)
        .map(|l| l.view)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let conditions: BTreeSet<Condition> = probe.iter().map(|l| l.condition).collect();
    let view_index = |v: u32| views.binary_search(&v).expect("view collected above");
    // Gallery indices grouped by view, each group sorted by subject.
    let mut by_view: Vec<Vec<usize>> = vec![Vec::new(); views.len()];
    for (i, l) in gallery.iter().enumerate() {
        by_view[view_index(l.view)].push(i);
    }
    for group in &mut by_view {
        group.sort_by_key(|&i| gallery[i].subject);
    }

    let mut reports: Vec<ConditionReport> = conditions
        .iter()
        .map(|&condition| ConditionReport {
            condition,
            cells: vec![vec![None; views.len()]; views.len()],
        })
        .collect();
    for (pi, pl) in probe.iter().enumerate() {
        let c = conditions
            .iter()
            .position(|&c| c == pl.condition)
            .expect("condition collected above");
        let p = view_index(pl.view);
        for (g, group) in by_view.iter().enumerate() {
            let Some(predicted) = nearest_subject(group, gallery, &distances[pi]) else {
                continue;
            };
            let cell = reports[c].cells[p][g].get_or_insert(Cell {
                correct: 0,
                total: 0,
            });
            cell.total += 1;
            cell.correct += usize::from(predicted == pl.subject);
        }
    }
    let report = EvalReport {
        views,
        exclude_identical_view,
        conditions: reports,
    };
    for c in &report.conditions {
        for (p, row) in c.cells.iter().enumerate() {
            for (g, cell) in row.iter().enumerate() {
                if cell.is_none() {
                    warn!(
                        "{} probe view {} / gallery view {}: cell absent (no probes or empty gallery)",
                        c.condition, report.views[p], report.views[g]
                    );
                }
            }
        }
    }
    report
}

/// `group` is sorted by subject, so the first strict minimum over per-subject
/// minima is the smallest id among tied subjects.
fn nearest_subject(group: &[usize], gallery: &[Label], row: &[f64]) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    let mut i = 0;
    while i < group.len() {
        let subject = gallery[group[i]].subject;
        let mut d = f64::INFINITY;
        while i < group.len() && gallery[group[i]].subject == subject {
            d = d.min(row[group[i]]);
            i += 1;
        }
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((subject, d));
        }
    }
    best.map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::features::FeatureEntry;
    use crate::model::SequenceFeature;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn label(subject: u32, condition: Condition, view: u32) -> Label {
        Label {
            subject,
            condition,
            run: 1,
            view,
        }
    }

    fn table(rows: Vec<(Label, Vec<f64>)>) -> FeatureTable {
        FeatureTable {
            entries: rows
                .into_iter()
                .map(|(label, v)| FeatureEntry {
                    label,
                    feature: SequenceFeature {
                        map: Tensor::new(vec![v.len()], v).unwrap(),
                    },
                })
                .collect(),
            skipped: Vec::new(),
        }
    }

    fn grid(
        subjects: u32,
        views: &[u32],
        condition: Condition,
        seed: u64,
    ) -> Vec<(Label, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for s in 1..=subjects {
            for &v in views {
                rows.push((
                    label(s, condition, v),
                    (0..6).map(|_| rng.gen::<f64>()).collect(),
                ));
            }
        }
        rows
    }

    #[test]
    fn gallery_equal_to_probe_is_perfect() {
        // Features that depend only on the subject match across every view.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let per_subject: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| rng.gen()).collect())
            .collect();
        let rows: Vec<_> = (1..=5u32)
            .flat_map(|s| {
                [0, 90, 180].map(|v| {
                    (
                        label(s, Condition::Nm, v),
                        per_subject[s as usize - 1].clone(),
                    )
                })
            })
            .collect();
        let r = rank1(&table(rows.clone()), &table(rows), true);
        let c = r.condition(Condition::Nm).unwrap();
        assert!(c
            .cells
            .iter()
            .flatten()
            .all(|c| c.unwrap().accuracy() == 100.0));
        assert_eq!(r.mean(Condition::Nm), Some(100.0));
        assert_eq!(r.absent(), 0);
    }

    #[test]
    fn ties_go_to_the_smallest_subject() {
        let g = vec![
            label(7, Condition::Nm, 0),
            label(3, Condition::Nm, 0),
            label(5, Condition::Nm, 0),
        ];
        let p = vec![label(5, Condition::Nm, 0)];
        let r = rank1_from_distances(&g, &p, &[vec![1.0, 1.0, 1.0]], false);
        assert_eq!(
            r.conditions[0].cells[0][0],
            Some(Cell {
                correct: 0,
                total: 1
            })
        );
        let r = rank1_from_distances(&g, &p, &[vec![1.0, 1.0, 0.5]], false);
        assert_eq!(
            r.conditions[0].cells[0][0],
            Some(Cell {
                correct: 1,
                total: 1
            })
        );
    }

    #[test]
    fn closest_of_several_gallery_entries_counts() {
        let g = vec![
            label(1, Condition::Nm, 0),
            label(2, Condition::Nm, 0),
            label(2, Condition::Nm, 0),
        ];
        let p = vec![label(2, Condition::Nm, 0)];
        let r = rank1_from_distances(&g, &p, &[vec![0.5, 0.9, 0.1]], false);
        assert_eq!(
            r.conditions[0].cells[0][0],
            Some(Cell {
                correct: 1,
                total: 1
            })
        );
    }

    #[test]
    fn empty_gallery_view_is_absent_and_excluded() {
        let g = vec![label(1, Condition::Nm, 0), label(2, Condition::Nm, 0)];
        let p = vec![label(1, Condition::Nm, 0), label(2, Condition::Nm, 90)];
        let r = rank1_from_distances(&g, &p, &[vec![0.0, 1.0], vec![1.0, 0.0]], false);
        assert_eq!(r.views, vec![0, 90]);
        let c = r.condition(Condition::Nm).unwrap();
        assert_eq!(c.cells[0][1], None);
        assert_eq!(c.cells[1][1], None);
        assert_eq!(r.absent(), 2);
        assert_eq!(c.mean(false), Some(100.0));
    }

    #[test]
    fn identical_view_is_excluded_from_means() {
        let g = vec![
            label(1, Condition::Bg, 0),
            label(2, Condition::Bg, 0),
            label(1, Condition::Bg, 90),
            label(2, Condition::Bg, 90),
        ];
        let p = vec![label(1, Condition::Bg, 0)];
        // Right at view 0, wrong at view 90.
        let r = rank1_from_distances(&g, &p, &[vec![0.0, 1.0, 1.0, 0.0]], true);
        let c = r.condition(Condition::Bg).unwrap();
        assert_eq!(c.accuracy(0, 0), Some(100.0));
        assert_eq!(c.accuracy(0, 1), Some(0.0));
        assert_eq!(c.view_mean(0, true), Some(0.0));
        assert_eq!(c.view_mean(0, false), Some(50.0));
    }

    #[test]
    fn empty_probe_set_gives_empty_report() {
        let g = table(grid(3, &[0], Condition::Nm, 0));
        let r = rank1(&g, &FeatureTable::default(), true);
        assert!(r.conditions.is_empty());
        assert_eq!(r.absent(), 0);
    }

    #[test]
    fn random_features_score_near_chance() {
        // 50 subjects, one gallery entry each: chance is 2%.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let subjects = 50u32;
        let draws = 10_000;
        let gallery: Vec<Label> = (1..=subjects).map(|s| label(s, Condition::Nm, 0)).collect();
        let probe: Vec<Label> = (0..draws)
            .map(|i| label(i % subjects + 1, Condition::Nm, 0))
            .collect();
        let distances: Vec<Vec<f64>> = (0..draws)
            .map(|_| (0..subjects).map(|_| rng.gen()).collect())
            .collect();
        let r = rank1_from_distances(&gallery, &probe, &distances, false);
        let acc = r.mean(Condition::Nm).unwrap();
        assert!((acc - 2.0).abs() <= 1.0, "{acc}");
    }

    #[test]
    fn layout_has_view_columns_and_trailing_mean() {
        let views = [0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180];
        let rows = grid(3, &views, Condition::Nm, 4);
        let r = rank1(&table(rows.clone()), &table(rows), true);
        let header = r.summary_csv().lines().next().unwrap().to_string();
        assert_eq!(
            header,
            "condition,0,18,36,54,72,90,108,126,144,162,180,mean"
        );
        let text = r.summary_text();
        let first = text.lines().next().unwrap();
        assert!(first.trim_start().starts_with("condition") && first.ends_with("180°  mean"));
        let m = r.condition_csv(&r.conditions[0]);
        assert_eq!(m.lines().count(), 12);
        assert!(m.lines().skip(1).all(|l| l.split(',').count() == 13));
    }

    #[test]
    fn report_files_are_written() {
        let rows = grid(3, &[0, 90], Condition::Cl, 4);
        let r = rank1(&table(rows.clone()), &table(rows), true);
        let dir = tempfile::tempdir().unwrap();
        let files = r.write(dir.path()).unwrap();
        let names: Vec<_> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            ["rank1_cl.csv", "rank1_cl.txt", "summary.csv", "summary.txt"]
        );
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Label>, Vec<Label>, Vec<Vec<f64>>)> {
        (2usize..6, 1usize..6, 1usize..4).prop_flat_map(|(ng, np, nv)| {
            let g = proptest::collection::vec((1u32..5, 0..nv as u32), ng);
            let p = proptest::collection::vec((1u32..5, 0..nv as u32, 0usize..3), np);
            let d = proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, ng), np);
            (g, p, d).prop_map(|(g, p, d)| {
                let g = g
                    .into_iter()
                    .map(|(s, v)| label(s, Condition::Nm, v * 30))
                    .collect();
                let p = p
                    .into_iter()
                    .map(|(s, v, c)| label(s, Condition::ALL[c], v * 30))
                    .collect();
                (g, p, d)
            })
        })
    }

    proptest! {
        #[test]
        fn monotone_distance_transform_keeps_rank1((g, p, d) in arb_case()) {
            let base = rank1_from_distances(&g, &p, &d, true);
            let warped: Vec<Vec<f64>> = d.iter().map(|r| r.iter().map(|x| (x * 0.7).exp() + x.powi(3)).collect()).collect();
            prop_assert_eq!(rank1_from_distances(&g, &p, &warped, true), base);
        }

        #[test]
        fn relabeling_subjects_keeps_rank1((g, p, d) in arb_case(), shift in 1u32..50) {
            // Reversal plus offset: a bijection that also reverses tie order,
            // so distances are made tie-free first.
            let d: Vec<Vec<f64>> = d.iter().enumerate().map(|(i, r)| r.iter().enumerate().map(|(j, x)| x + 1e-6 * (i * 31 + j) as f64).collect()).collect();
            let relabel = |l: &Label| Label { subject: 1000 + shift - l.subject, ..*l };
            let g2: Vec<Label> = g.iter().map(relabel).collect();
            let p2: Vec<Label> = p.iter().map(relabel).collect();
            prop_assert_eq!(rank1_from_distances(&g2, &p2, &d, true), rank1_from_distances(&g, &p, &d, true));
        }

        #[test]
        fn overall_mean_is_mean_of_included_cells((g, p, d) in arb_case()) {
            let r = rank1_from_distances(&g, &p, &d, true);
            for c in &r.conditions {
                let cells: Vec<f64> = (0..r.views.len())
                    .flat_map(|pv| (0..r.views.len()).map(move |gv| (pv, gv)))
                    .filter(|(pv, gv)| pv != gv)
                    .filter_map(|(pv, gv)| c.accuracy(pv, gv))
                    .collect();
                let expect = (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64);
                match (c.mean(true), expect) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                    (a, b) => prop_assert_eq!(a, b),
                }
                for row in c.cells.iter().flatten().flatten() {
                    prop_assert!((0.0..=100.0).contains(&row.accuracy()));
                }
            }
        }
    }
}
