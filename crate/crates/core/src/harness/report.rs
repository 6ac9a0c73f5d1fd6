//! Report tables computed from run records. Every function here is pure
//! over records (and, for selection gaps, their stored checkpoint logs).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{load_dataset_summaries, load_records, read_run_log, Phase, RunRecord};
use crate::algorithms::{Algorithm, Method, StageScheme};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::selection::{mean_sd, oracle_gap_table, Regime, Strategy};
use crate::shiftgen::ShiftType;

fn final_ok(records: &[RunRecord]) -> impl Iterator<Item = &RunRecord> {
    records.iter().filter(|r| r.phase == Phase::Final && r.is_ok() && r.test.is_some())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Test WGA of final runs keyed by (dataset, regime, method).
fn wga_by_cell(records: &[RunRecord]) -> BTreeMap<(String, Regime, Method), Vec<f64>> {
    let mut out: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    for r in final_ok(records) {
        let c = &r.coordinates;
        out.entry((c.dataset.clone(), c.regime, c.method))
            .or_default()
            .push(r.test_wga().expect("filtered"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: Method,
    pub regime: Regime,
    pub runs: usize,
    pub failed: usize,
    pub mean_wga: Option<f64>,
    /// Sample standard deviation over seeds.
    pub sd_wga: Option<f64>,
    pub mean_avg_acc: Option<f64>,
}

/// Per-cell mean ± sd over the final runs; failures are counted, not averaged.
pub fn summary(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(String, Method, Regime), (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.phase == Phase::Final) {
        let c = &r.coordinates;
        let e = cells.entry((c.dataset.clone(), c.method, c.regime)).or_default();
        match &r.test {
            Some(t) if r.is_ok() => {
                e.0.push(t.worst_group_acc);
                e.1.push(t.avg_acc);
            }
            _ => e.2 += 1,
        }
    }
    cells
        .into_iter()
        .map(|((dataset, method, regime), (wga, acc, failed))| {
            let ms = mean_sd(&wga);
            SummaryRow {
                dataset,
                method,
                regime,
                runs: wga.len(),
                failed,
                mean_wga: ms.map(|m| m.0),
                sd_wga: ms.and_then(|m| m.1),
                mean_avg_acc: mean_sd(&acc).map(|m| m.0),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImprovementRow {
    pub shift: ShiftType,
    pub regime: Regime,
    pub method: Method,
    /// Mean over datasets of `mean WGA(method) − mean WGA(ERM)`.
    pub delta_wga: f64,
    pub datasets: usize,
}

/// Worst-group improvement over ERM per dataset, averaged over the
/// datasets sharing a dominant shift. A dataset with results but no ERM
/// baseline under the same regime is an error.
pub fn improvement_over_erm(records: &[RunRecord], shifts: &BTreeMap<String, ShiftType>) -> Result<Vec<ImprovementRow>> {
    let cells = wga_by_cell(records);
    let erm = Method::Algorithm(Algorithm::ERM);
    let mut acc: BTreeMap<(ShiftType, Regime, Method), Vec<f64>> = BTreeMap::new();
    for ((dataset, regime, method), wga) in &cells {
        let base = cells
            .get(&(dataset.clone(), *regime, erm))
            .ok_or_else(|| Error::Config(format!("no ERM baseline for dataset `{dataset}` under {regime}")))?;
        let shift = *shifts
            .get(dataset)
            .ok_or_else(|| Error::Config(format!("no shift label for dataset `{dataset}`")))?;
        acc.entry((shift, *regime, *method)).or_default().push(mean(wga) - mean(base));
    }
    Ok(acc
        .into_iter()
        .map(|((shift, regime, method), d)| ImprovementRow {
            shift,
            regime,
            method,
            delta_wga: mean(&d),
            datasets: d.len(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageGrid {
    pub shift: ShiftType,
    pub regime: Regime,
    /// `cells[rep][cls]`, indexed in [`StageScheme::ALL`] order; mean over
    /// datasets of the seed-mean test WGA.
    pub cells: [[Option<f64>; 3]; 3],
}

impl StageGrid {
    pub fn cell(&self, rep: StageScheme, cls: StageScheme) -> Option<f64> {
        let i = |s| StageScheme::ALL.iter().position(|&x| x == s).expect("scheme");
        self.cells[i(rep)][i(cls)]
    }
}

/// Representation-scheme × classifier-scheme WGA grid per shift type.
/// The (uniform, uniform) cell falls back to ERM runs when the decoupled
/// cell itself was not run.
pub fn rep_vs_classifier(records: &[RunRecord], shifts: &BTreeMap<String, ShiftType>) -> Vec<StageGrid> {
    let cells = wga_by_cell(records);
    let mut per: BTreeMap<(ShiftType, Regime), [[Vec<f64>; 3]; 3]> = BTreeMap::new();
    let datasets: Vec<(String, Regime)> = {
        let mut d: Vec<_> = cells.keys().map(|(d, r, _)| (d.clone(), *r)).collect();
        d.dedup();
        d
    };
    for (dataset, regime) in datasets {
        let Some(&shift) = shifts.get(&dataset) else { continue };
        for (i, &rep) in StageScheme::ALL.iter().enumerate() {
            for (j, &cls) in StageScheme::ALL.iter().enumerate() {
                let m = Method::Decoupled {
                    representation: rep,
                    classifier: cls,
                };
                let mut v = cells.get(&(dataset.clone(), regime, m));
                if v.is_none() && i == 0 && j == 0 {
                    v = cells.get(&(dataset.clone(), regime, Method::Algorithm(Algorithm::ERM)));
                }
                if let Some(v) = v {
                    per.entry((shift, regime)).or_default()[i][j].push(mean(v));
                }
            }
        }
    }
    per.into_iter()
        .map(|((shift, regime), grid)| StageGrid {
            shift,
            regime,
            cells: grid.map(|row| row.map(|v| (!v.is_empty()).then(|| mean(&v)))),
        })
        .collect()
}

/// Pearson correlation; `None` when either coordinate is constant or
/// fewer than two points are given.
pub fn pearson(points: &[(f64, f64)]) -> Option<f64> {
    let (sxx, syy, sxy) = centered_sums(points)?;
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Least-squares slope of `y` on `x`; `None` when `x` is constant.
pub fn ls_slope(points: &[(f64, f64)]) -> Option<f64> {
    let (sxx, _, sxy) = centered_sums(points)?;
    (sxx > 0.0).then(|| sxy / sxx)
}

fn centered_sums(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut s = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        s.0 += (x - mx) * (x - mx);
        s.1 += (y - my) * (y - my);
        s.2 += (x - mx) * (y - my);
    }
    Some(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub dataset: String,
    pub metric: &'static str,
    pub points: usize,
    /// Pearson r between the metric and test WGA; `None` if undefined.
    pub pearson_r: Option<f64>,
    /// Least-squares slope of WGA on the metric.
    pub slope: Option<f64>,
}

/// (metric, WGA) pairs of every successful run on `dataset`, search and
/// final phases alike; runs where the metric is undefined are dropped.
pub fn scatter(records: &[RunRecord], dataset: &str, metric: Metric) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.is_ok() && r.coordinates.dataset == dataset)
        .filter_map(|r| {
            let t = r.test.as_ref()?;
            Some((metric.value(t)?, t.worst_group_acc))
        })
        .collect()
}

pub fn metric_correlations(records: &[RunRecord], metrics: &[Metric]) -> Vec<CorrelationRow> {
    let mut datasets: Vec<&str> = records.iter().map(|r| r.coordinates.dataset.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    let mut out = Vec::new();
    for d in datasets {
        for &m in metrics {
            let pts = scatter(records, d, m);
            out.push(CorrelationRow {
                dataset: d.to_string(),
                metric: m.name(),
                points: pts.len(),
                pearson_r: pearson(&pts),
                slope: ls_slope(&pts),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReportRow {
    pub regime: Regime,
    pub strategy: Strategy,
    pub mean_gap: f64,
    pub sd_gap: Option<f64>,
    pub units: usize,
}

/// Oracle gaps of every strategy, one selection unit per successful final
/// run, per regime.
pub fn selection_gaps(out: &Path, records: &[RunRecord]) -> Result<Vec<GapReportRow>> {
    let mut by_regime: BTreeMap<Regime, Vec<Vec<Vec<_>>>> = BTreeMap::new();
    for r in final_ok(records) {
        let log = read_run_log(&out.join(&r.run_log))?;
        by_regime.entry(r.coordinates.regime).or_default().push(vec![log]);
    }
    let mut rows = Vec::new();
    for (regime, units) in by_regime {
        for g in oracle_gap_table(&units, &Strategy::ALL, regime)? {
            rows.push(GapReportRow {
                regime,
                strategy: g.strategy,
                mean_gap: g.mean_gap,
                sd_gap: g.sd_gap,
                units: g.units,
            });
        }
    }
    Ok(rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct GridRow {
    shift: ShiftType,
    regime: Regime,
    representation: &'static str,
    uniform: Option<f64>,
    balanced: Option<f64>,
    reweight: Option<f64>,
}

#[derive(Serialize)]
struct ImprovementCsvRow {
    shift: ShiftType,
    regime: Regime,
    method: String,
    delta_wga: f64,
    datasets: usize,
}

/// Writes every report table of the output directory `runs` into
/// `dest` and returns the written paths. The improvement table is skipped
/// (with a note in the returned list's log) when ERM was not run.
pub fn write_reports(runs: &Path, dest: &Path) -> Result<Vec<PathBuf>> {
    let records = load_records(runs)?;
    let shifts: BTreeMap<String, ShiftType> = load_dataset_summaries(runs)?
        .into_iter()
        .map(|s| (s.name, s.dominant_shift))
        .collect();
    fs::create_dir_all(dest.join("scatter")).map_err(|e| Error::io(dest, e))?;
    let mut written = Vec::new();

    let p = dest.join("summary.csv");
    let rows: Vec<_> = summary(&records)
        .into_iter()
        .map(|r| {
            (
                r.dataset,
                r.method.to_string(),
                r.regime.to_string(),
                r.runs,
                r.failed,
                r.mean_wga,
                r.sd_wga,
                r.mean_avg_acc,
            )
        })
        .collect();
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["dataset", "method", "regime", "runs", "failed", "mean_wga", "sd_wga", "mean_avg_acc"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    written.push(p);

    let has_erm = records
        .iter()
        .any(|r| r.coordinates.method == Method::Algorithm(Algorithm::ERM));
    if has_erm {
        let p = dest.join("improvement_over_erm.csv");
        let rows: Vec<_> = improvement_over_erm(&records, &shifts)?
            .into_iter()
            .map(|r| ImprovementCsvRow {
                shift: r.shift,
                regime: r.regime,
                method: r.method.to_string(),
                delta_wga: r.delta_wga,
                datasets: r.datasets,
            })
            .collect();
        write_rows(&p, &rows)?;
        written.push(p);
    } else {
        log::warn!("no ERM runs; improvement table skipped");
    }

    let grids = rep_vs_classifier(&records, &shifts);
    if grids.iter().any(|g| g.cells.iter().flatten().filter(|c| c.is_some()).count() > 1) {
        let p = dest.join("rep_vs_classifier.csv");
        let mut rows = Vec::new();
        for g in &grids {
            for (i, rep) in StageScheme::ALL.iter().enumerate() {
                rows.push(GridRow {
                    shift: g.shift,
                    regime: g.regime,
                    representation: rep.name(),
                    uniform: g.cells[i][0],
                    balanced: g.cells[i][1],
                    reweight: g.cells[i][2],
                });
            }
        }
        write_rows(&p, &rows)?;
        written.push(p);
    }

    let p = dest.join("metric_correlations.csv");
    let corr = metric_correlations(&records, &Metric::ALL);
    write_rows(&p, &corr)?;
    written.push(p);
    for row in corr.iter().filter(|r| r.points > 0) {
        let metric = Metric::ALL.into_iter().find(|m| m.name() == row.metric).expect("known metric");
        let p = dest.join("scatter").join(format!("{}_{}.csv", row.dataset, row.metric));
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record([row.metric, "worst_group_acc"])?;
        for (x, y) in scatter(&records, &row.dataset, metric) {
            w.serialize((x, y))?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }

    let p = dest.join("selection_gaps.csv");
    write_rows(&p, &selection_gaps(runs, &records)?)?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{Coordinates, Status};
    use crate::metrics::MetricsReport;

    fn rec(dataset: &str, method: Method, seed: usize, wga: f64) -> RunRecord {
        let text = r#"{"n":1,"avg_acc":0.9,"worst_group_acc":0.0,"worst_class_acc":0.5,"adjusted_acc":0.5,
            "balanced_acc":0.5,"avg_precision":0.5,"worst_precision":0.5,"weighted_precision":0.5,"avg_f1":0.5,
            "worst_f1":0.5,"class_acc_diff":0.0,"recall_std":0.0,"ece":0.1,"bce":0.7,"auroc":null,"auprc":null,
            "brier":null,"per_group_acc":[],"per_class":{"support":[],"precision":[],"recall":[],"f1":[]}}"#;
        let mut test: MetricsReport = serde_json::from_str(text).unwrap();
        test.worst_group_acc = wga;
        RunRecord {
            coordinates: Coordinates {
                dataset: dataset.into(),
                method,
                regime: Regime::TT,
                trial: 0,
                seed_index: seed,
            },
            phase: Phase::Final,
            seed: 0,
            hparams: Default::default(),
            run_log: PathBuf::new(),
            strategy: Strategy::MaxWorstGroupAcc,
            selected_checkpoint: Some(0),
            selected_step: Some(1),
            test: Some(test),
            wall_time_secs: 0.0,
            status: Status::Ok,
            diagnostic: None,
        }
    }

    fn erm() -> Method {
        Method::Algorithm(Algorithm::ERM)
    }

    #[test]
    fn known_deltas_come_back_exactly() {
        let dro = Method::Algorithm(Algorithm::GroupDRO);
        let records = vec![
            rec("a", erm(), 0, 0.5),
            rec("a", erm(), 1, 0.7),
            rec("a", dro, 0, 0.75),
            rec("a", dro, 1, 0.75),
            rec("b", erm(), 0, 0.25),
            rec("b", dro, 0, 0.5),
        ];
        let shifts = BTreeMap::from([("a".to_string(), ShiftType::SC), ("b".to_string(), ShiftType::SC)]);
        let rows = improvement_over_erm(&records, &shifts).unwrap();
        let get = |m| rows.iter().find(|r| r.method == m).unwrap().delta_wga;
        assert_eq!(get(erm()), 0.0);
        // Dataset a: 0.75 − 0.6; dataset b: 0.5 − 0.25.
        assert!((get(dro) - (0.15 + 0.25) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_erm_is_an_error() {
        let records = vec![rec("a", Method::Algorithm(Algorithm::JTT), 0, 0.5)];
        let shifts = BTreeMap::from([("a".to_string(), ShiftType::SC)]);
        assert!(improvement_over_erm(&records, &shifts).is_err());
    }

    #[test]
    fn two_seed_sd_uses_both_values() {
        let rows = summary(&[rec("a", erm(), 0, 0.5), rec("a", erm(), 1, 0.7)]);
        assert_eq!(rows[0].runs, 2);
        assert!((rows[0].sd_wga.unwrap() - (0.02f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pearson_edge_cases() {
        let line: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 - 2.0 * i as f64)).collect();
        assert!((pearson(&line).unwrap() + 1.0).abs() < 1e-15);
        assert!((ls_slope(&line).unwrap() + 2.0).abs() < 1e-15);
        let flat: Vec<(f64, f64)> = (0..5).map(|i| (1.0, i as f64)).collect();
        assert_eq!(pearson(&flat), None);
        // Closed form for a small cloud.
        let pts = [(1.0, 2.0), (2.0, 1.0), (3.0, 4.0), (4.0, 3.0)];
        assert!((pearson(&pts).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn grid_uses_erm_for_the_uniform_corner() {
        let bal = Method::Decoupled {
            representation: StageScheme::Uniform,
            classifier: StageScheme::Balanced,
        };
        let records = vec![rec("a", erm(), 0, 0.5), rec("a", bal, 0, 0.7)];
        let shifts = BTreeMap::from([("a".to_string(), ShiftType::CI)]);
        let g = &rep_vs_classifier(&records, &shifts)[0];
        assert_eq!(g.cell(StageScheme::Uniform, StageScheme::Uniform), Some(0.5));
        assert_eq!(g.cell(StageScheme::Uniform, StageScheme::Balanced), Some(0.7));
        assert_eq!(g.cell(StageScheme::Balanced, StageScheme::Balanced), None);
    }
}
