use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SCHEMA_VERSION};
use super::synth::{generate_synthetic, SyntheticRun, Truth};
use crate::error::{Error, Result};
use crate::hemo::{build_fir_prior, FirPrior};
use crate::inference::{estimate, EstimationResult, ModelKind, SmoothedMoments};
use crate::metrics::{empirical_fc, model_fc, rho_ec, rho_fc, rmse_ec, sparsity_err_masks, ZERO_TOL};

/// Largest tolerated fraction of failed cells.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

/// Metrics of one (run, assumption) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub rmse: f64,
    pub err: usize,
    /// Correlation of off-diagonal entries with the truth; `None` when either
    /// matrix has constant off-diagonals.
    pub rho_ec: Option<f64>,
    pub rho_fc_est: f64,
    pub rho_fc_test: f64,
    /// Share of truly-zero off-diagonal entries whose hyperparameter was pruned.
    pub pruned_zero_fraction: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub run: usize,
    pub assumption: ModelKind,
    pub metrics: Option<CellMetrics>,
    pub error: Option<String>,
    pub estimate: Option<EstimationResult>,
}

/// Agreement between the estimates of two assumptions on the same run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub run: usize,
    pub first: ModelKind,
    pub second: ModelKind,
    pub rho_ec: Option<f64>,
}

/// Boxplot statistics (linear-interpolation quantiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(Self {
            count: v.len(),
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

/// Quantile of sorted data, interpolating between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    /// Assumption (`w`, `ar`, `var`) or assumption pair (`w-ar`).
    pub group: String,
    pub stats: Quartiles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub runs: Vec<usize>,
    pub truths: Vec<Option<Truth>>,
    pub records: Vec<CellRecord>,
    pub pairs: Vec<PairRecord>,
    pub summary: Vec<SummaryRow>,
    pub failed: usize,
}

impl Report {
    pub fn empty(config: ExperimentConfig) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            seed: config.seed,
            config,
            runs: Vec::new(),
            truths: Vec::new(),
            records: Vec::new(),
            pairs: Vec::new(),
            summary: Vec::new(),
            failed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported report schema {}", report.schema)));
        }
        Ok(report)
    }

    /// Batch error when more than [`MAX_FAILURE_FRACTION`] of the cells failed.
    pub fn check_failures(&self) -> Result<()> {
        let total = self.records.len();
        if total > 0 && self.failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
            return Err(Error::Batch {
                failed: self.failed,
                total,
            });
        }
        Ok(())
    }

    pub fn cell(&self, run: usize, assumption: ModelKind) -> Option<&CellRecord> {
        self.records.iter().find(|r| r.run == run && r.assumption == assumption)
    }

    /// Statistics of `metric` for `group`, if present.
    pub fn stats(&self, metric: &str, group: &str) -> Option<Quartiles> {
        self.summary
            .iter()
            .find(|r| r.metric == metric && r.group == group)
            .map(|r| r.stats)
    }

    pub fn median(&self, metric: &str, group: &str) -> Option<f64> {
        self.stats(metric, group).map(|q| q.median)
    }
}

/// Per-cell metric names, in report order.
pub const CELL_METRICS: [&str; 7] = [
    "rmse",
    "err",
    "rho_ec",
    "rho_fc_est",
    "rho_fc_test",
    "pruned_zero_fraction",
    "iterations",
];

impl CellMetrics {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "rmse" => Some(self.rmse),
            "err" => Some(self.err as f64),
            "rho_ec" => self.rho_ec,
            "rho_fc_est" => Some(self.rho_fc_est),
            "rho_fc_test" => Some(self.rho_fc_test),
            "pruned_zero_fraction" => self.pruned_zero_fraction,
            "iterations" => Some(self.iterations as f64),
            _ => None,
        }
    }
}

/// Evaluates an estimate against its truth and the two splits.
pub fn cell_metrics(
    a_true: &DMatrix<f64>,
    est: &EstimationResult,
    y_est: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
) -> Result<CellMetrics> {
    let n = a_true.nrows();
    let zero_true = a_true.map(|v| v.abs() <= ZERO_TOL);
    let zero_hat = est.zero_mask(ZERO_TOL);
    let fc = model_fc(&est.ssm()?)?;
    let mut zeros = 0usize;
    let mut pruned = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j && zero_true[(i, j)] {
                zeros += 1;
                pruned += usize::from(est.gamma.pruned[i * n + j]);
            }
        }
    }
    Ok(CellMetrics {
        rmse: rmse_ec(a_true, &est.a_hat)?,
        err: sparsity_err_masks(&zero_true, &zero_hat)?,
        rho_ec: rho_ec(a_true, &est.a_hat).ok(),
        rho_fc_est: rho_fc(&empirical_fc(y_est)?, &fc)?,
        rho_fc_test: rho_fc(&empirical_fc(y_test)?, &fc)?,
        pruned_zero_fraction: (zeros > 0).then(|| pruned as f64 / zeros as f64),
        iterations: est.iterations,
    })
}

fn run_cell(data: &SyntheticRun, fir: &FirPrior, cfg: &ExperimentConfig, kind: ModelKind) -> Result<(CellMetrics, EstimationResult)> {
    let mut est = estimate(&data.estimation.y, fir, &cfg.estimation_config(kind))?;
    let m = cell_metrics(&data.truth.a, &est, &data.estimation.y, &data.test.y)?;
    // Smoothed moments are O(N·d²) per cell and not part of the report.
    est.smoothed = SmoothedMoments::default();
    Ok((m, est))
}

fn pair_label(a: ModelKind, b: ModelKind) -> String {
    format!("{a}-{b}")
}

fn summarize(records: &[CellRecord], pairs: &[PairRecord], kinds: &[ModelKind]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for metric in CELL_METRICS {
        for &kind in kinds {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.assumption == kind)
                .filter_map(|r| r.metrics.as_ref().and_then(|m| m.get(metric)))
                .collect();
            if let Some(stats) = Quartiles::from_values(&values) {
                rows.push(SummaryRow {
                    metric: metric.into(),
                    group: kind.to_string(),
                    stats,
                });
            }
        }
    }
    let mut by_pair: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for p in pairs {
        let key = (kind_rank(kinds, p.first), kind_rank(kinds, p.second));
        by_pair.entry(key).or_default().extend(p.rho_ec);
    }
    for ((i, j), values) in by_pair {
        if let Some(stats) = Quartiles::from_values(&values) {
            rows.push(SummaryRow {
                metric: "rho_ec_pair".into(),
                group: pair_label(kinds[i], kinds[j]),
                stats,
            });
        }
    }
    rows
}

fn kind_rank(kinds: &[ModelKind], k: ModelKind) -> usize {
    kinds.iter().position(|&x| x == k).unwrap_or(usize::MAX)
}

fn assumptions(cfg: &ExperimentConfig) -> Vec<ModelKind> {
    let mut kinds = Vec::new();
    for &k in &cfg.assumptions {
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    kinds
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// FIR prior for the study's `s`, `T_R` and seed.
pub fn study_fir_prior(cfg: &ExperimentConfig) -> Result<FirPrior> {
    build_fir_prior(&cfg.hemo, cfg.em.s, cfg.t_r, cfg.em.fir_samples, cfg.seed)
}

/// Runs every (run, assumption) cell on `jobs` threads (`0` = all cores).
/// Failed cells are recorded in the report; only configuration problems are
/// returned as errors. Results do not depend on `jobs`.
pub fn run_cells(cfg: &ExperimentConfig, fir: &FirPrior, jobs: usize) -> Result<Report> {
    cfg.validate()?;
    if fir.s != cfg.em.s || (fir.t_r - cfg.t_r).abs() > 1e-9 * cfg.t_r {
        return Err(Error::Config("FIR prior does not match the study's s and T_R".into()));
    }
    let kinds = assumptions(cfg);
    let runs: Vec<usize> = (0..cfg.runs).collect();
    let (data, cells) = pool(jobs)?.install(|| {
        let data: Vec<Result<SyntheticRun>> = runs.par_iter().map(|&r| generate_synthetic(cfg, r)).collect();
        let jobs: Vec<(usize, ModelKind)> = runs.iter().flat_map(|&r| kinds.iter().map(move |&k| (r, k))).collect();
        let cells: Vec<CellRecord> = jobs
            .par_iter()
            .map(|&(run, kind)| {
                let outcome = match &data[run] {
                    Ok(d) => run_cell(d, fir, cfg, kind),
                    Err(e) => Err(Error::Data(format!("generation failed: {e}"))),
                };
                match outcome {
                    Ok((m, est)) => CellRecord {
                        run,
                        assumption: kind,
                        metrics: Some(m),
                        error: None,
                        estimate: Some(est),
                    },
                    Err(e) => CellRecord {
                        run,
                        assumption: kind,
                        metrics: None,
                        error: Some(e.to_string()),
                        estimate: None,
                    },
                }
            })
            .collect();
        (data, cells)
    });

    let mut pairs = Vec::new();
    for &run in &runs {
        for (i, &a) in kinds.iter().enumerate() {
            for &b in &kinds[i + 1..] {
                let find = |k: ModelKind| {
                    cells
                        .iter()
                        .find(|c| c.run == run && c.assumption == k)
                        .and_then(|c| c.estimate.as_ref())
                };
                if let (Some(ea), Some(eb)) = (find(a), find(b)) {
                    pairs.push(PairRecord {
                        run,
                        first: a,
                        second: b,
                        rho_ec: rho_ec(&ea.a_hat, &eb.a_hat).ok(),
                    });
                }
            }
        }
    }
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    Ok(Report {
        schema: SCHEMA_VERSION,
        config: cfg.clone(),
        seed: cfg.seed,
        summary: summarize(&cells, &pairs, &kinds),
        truths: data.into_iter().map(|d| d.ok().map(|d| d.truth)).collect(),
        runs,
        records: cells,
        pairs,
        failed,
    })
}

/// [`run_cells`] followed by the failure-rate check.
pub fn run_monte_carlo(cfg: &ExperimentConfig, fir: &FirPrior, jobs: usize) -> Result<Report> {
    let report = run_cells(cfg, fir, jobs)?;
    report.check_failures()?;
    Ok(report)
}

/// Recomputes every cell's metrics from the stored estimates and regenerated
/// datasets; returns the recomputed records in report order.
pub fn recompute_metrics(report: &Report) -> Result<Vec<(usize, ModelKind, CellMetrics)>> {
    let mut cache: BTreeMap<usize, SyntheticRun> = BTreeMap::new();
    let mut out = Vec::new();
    for rec in &report.records {
        let Some(est) = &rec.estimate else { continue };
        if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(rec.run) {
            slot.insert(generate_synthetic(&report.config, rec.run)?);
        }
        let data = &cache[&rec.run];
        let m = cell_metrics(&data.truth.a, est, &data.estimation.y, &data.test.y)?;
        out.push((rec.run, rec.assumption, m));
    }
    Ok(out)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `report.json`, one `<metric>.csv` per cell metric (rows: run ×
/// assumption, empty value for failed cells), `rho_ec_pairs.csv` and
/// `summary.csv` into `out_dir`.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    for metric in CELL_METRICS {
        let rows = report.records.iter().map(|r| {
            vec![
                r.run.to_string(),
                r.assumption.to_string(),
                fmt_opt(r.metrics.as_ref().and_then(|m| m.get(metric))),
            ]
        });
        write_csv(&out_dir.join(format!("{metric}.csv")), &["run", "assumption", "value"], rows)?;
    }
    let pair_rows = report
        .pairs
        .iter()
        .map(|p| vec![p.run.to_string(), pair_label(p.first, p.second), fmt_opt(p.rho_ec)]);
    write_csv(&out_dir.join("rho_ec_pairs.csv"), &["run", "pair", "value"], pair_rows)?;
    let summary_rows = report.summary.iter().map(|s| {
        vec![
            s.metric.clone(),
            s.group.clone(),
            s.stats.count.to_string(),
            s.stats.min.to_string(),
            s.stats.q1.to_string(),
            s.stats.median.to_string(),
            s.stats.q3.to_string(),
            s.stats.max.to_string(),
        ]
    });
    write_csv(
        &out_dir.join("summary.csv"),
        &["metric", "group", "count", "min", "q1", "median", "q3", "max"],
        summary_rows,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate_linearly() {
        let q = Quartiles::from_values(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 1.75, 2.5, 3.25, 4.0));
        assert_eq!(Quartiles::from_values(&[7.0]).unwrap().q1, 7.0);
        assert!(Quartiles::from_values(&[]).is_none());
    }

    #[test]
    fn failure_threshold() {
        let mut r = Report::empty(ExperimentConfig::default());
        for run in 0..10 {
            r.records.push(CellRecord {
                run,
                assumption: ModelKind::White,
                metrics: None,
                error: None,
                estimate: None,
            });
        }
        r.failed = 2;
        assert!(r.check_failures().is_ok());
        r.failed = 3;
        assert!(matches!(r.check_failures(), Err(Error::Batch { failed: 3, total: 10 })));
    }
}
