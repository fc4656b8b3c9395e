//! Episodic evaluation, multi-run aggregation and CI-overlap comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{eval_binary, train_baseline};
use crate::data::{LabeledDataset, ProjectionCheckpoint, Split};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::projection::ProjectionModel;
use crate::sampler::{EpisodeSampler, EpisodeSpec};
use crate::seed;
use crate::trainer::{mean_episode_accuracy, train_fsl_model, Method, TrainConfig};

pub const Z_95: f64 = 1.96;

/// Accuracy of every test episode `0..n_episodes` drawn under `spec`.
pub fn evaluate_episodic(
    model: &ProjectionModel,
    dataset: &LabeledDataset,
    spec: EpisodeSpec,
    n_episodes: usize,
    loss: &LossConfig,
) -> Result<Vec<f64>> {
    let sampler = EpisodeSampler::new(dataset, spec)?;
    mean_episode_accuracy(model, dataset, &sampler, n_episodes, loss)
}

pub fn evaluate_checkpoint(
    checkpoint: &ProjectionCheckpoint,
    dataset: &LabeledDataset,
    spec: EpisodeSpec,
    n_episodes: usize,
    loss: &LossConfig,
) -> Result<Vec<f64>> {
    let model = ProjectionModel::from_checkpoint(checkpoint)?;
    evaluate_episodic(&model, dataset, spec, n_episodes, loss)
}

/// Sample unit of the confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CiUnit {
    /// Every episode accuracy of every run.
    #[default]
    Episode,
    /// One mean per run.
    Run,
}

impl FromStr for CiUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "episode" => Ok(CiUnit::Episode),
            "run" => Ok(CiUnit::Run),
            other => Err(Error::Validation(format!("unknown CI unit {other:?}; expected run|episode"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub episode_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub per_run: Vec<RunRecord>,
    pub mean_accuracy: f64,
    pub ci95_half_width: f64,
    pub ci_unit: CiUnit,
}

impl RunReport {
    pub fn interval(&self) -> (f64, f64) {
        (self.mean_accuracy - self.ci95_half_width, self.mean_accuracy + self.ci95_half_width)
    }

    pub fn episodes_per_run(&self) -> usize {
        self.per_run.first().map_or(0, |r| r.episode_accuracies.len())
    }
}

/// Mean and `1.96 * sd / sqrt(n)` with the sample standard deviation.
/// Fewer than two values, or identical values, give a zero half-width.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    if values.iter().all(|&v| v == values[0]) {
        if n < 2 {
            warn!("confidence interval over a single value; reporting half-width 0");
        }
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Z_95 * var.sqrt() / (n as f64).sqrt())
}

pub fn aggregate(
    method: Method,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    per_run: Vec<RunRecord>,
    ci_unit: CiUnit,
) -> Result<RunReport> {
    let e = per_run.first().map(|r| r.episode_accuracies.len()).unwrap_or(0);
    if e == 0 || per_run.iter().any(|r| r.episode_accuracies.len() != e) {
        return Err(Error::Contract("aggregate needs at least one run, all with the same non-zero episode count".into()));
    }
    let values: Vec<f64> = match ci_unit {
        CiUnit::Episode => per_run.iter().flat_map(|r| r.episode_accuracies.iter().copied()).collect(),
        CiUnit::Run => per_run
            .iter()
            .map(|r| r.episode_accuracies.iter().sum::<f64>() / e as f64)
            .collect(),
    };
    let (mean_accuracy, ci95_half_width) = mean_ci(&values);
    Ok(RunReport { method, n_way, k_shot, q_query, per_run, mean_accuracy, ci95_half_width, ci_unit })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    FirstHigher,
    SecondHigher,
    OnPar,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::FirstHigher => "first higher",
            Verdict::SecondHigher => "second higher",
            Verdict::OnPar => "on_par",
        })
    }
}

/// On par when the closed intervals overlap; otherwise the larger mean wins.
pub fn compare_intervals(a: (f64, f64), b: (f64, f64)) -> Verdict {
    if a.0 <= b.1 && b.0 <= a.1 {
        Verdict::OnPar
    } else if a.0 > b.1 {
        Verdict::FirstHigher
    } else {
        Verdict::SecondHigher
    }
}

pub fn compare(a: &RunReport, b: &RunReport) -> Verdict {
    compare_intervals(a.interval(), b.interval())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub methods: Vec<Method>,
    pub ways: Vec<usize>,
    pub shots: Vec<usize>,
    pub runs: usize,
    pub test_episodes: usize,
    pub ci_unit: CiUnit,
    /// Template for every training run; method, way, shot and seed are overridden per cell.
    pub train: TrainConfig,
    pub seed: u64,
}

impl MatrixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.ways.is_empty() || self.shots.is_empty() {
            return Err(Error::Validation("matrix needs at least one method, way and shot".into()));
        }
        if self.runs == 0 || self.test_episodes == 0 {
            return Err(Error::Validation("runs and test episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn run_seed(&self, method: Method, n_way: usize, k_shot: usize, run: usize) -> u64 {
        match method {
            Method::Baseline => seed::derive(self.seed, &[seed::tag("baseline"), run as u64]),
            m => seed::derive(self.seed, &[seed::tag(m.as_str()), n_way as u64, k_shot as u64, run as u64]),
        }
    }

    /// Test episodes depend on the cell and run only, so every method sees the same episodes.
    pub fn test_seed(&self, n_way: usize, k_shot: usize, run: usize) -> u64 {
        seed::derive(self.seed, &[seed::tag("test-episodes"), n_way as u64, k_shot as u64, run as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub n_way: usize,
    pub k_shot: usize,
    pub report: Option<RunReport>,
    pub error: Option<String>,
    /// Whether this cell is on par with the best cell of its (way, shot) column.
    pub best_or_on_par: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub config: MatrixConfig,
    pub cells: Vec<CellResult>,
    /// Expected accuracy of guessing, per way; the baseline's is 0.5.
    pub chance: BTreeMap<usize, f64>,
}

impl MatrixReport {
    pub fn cell(&self, method: Method, n_way: usize, k_shot: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.n_way == n_way && c.k_shot == k_shot)
    }
}

fn train_and_evaluate(
    dataset: &LabeledDataset,
    config: &MatrixConfig,
    method: Method,
    n_way: usize,
    k_shot: usize,
    run: usize,
) -> Result<RunRecord> {
    let run_seed = config.run_seed(method, n_way, k_shot, run);
    let train = TrainConfig { method, n_way, k_shot, seed: run_seed, ..config.train.clone() };
    if method == Method::Baseline {
        let (model, _) = train_baseline(dataset, &train)?;
        let acc = eval_binary(&model, dataset, Split::Test)?;
        return Ok(RunRecord { seed: run_seed, episode_accuracies: vec![acc] });
    }
    let (model, _) = train_fsl_model(dataset, &train)?;
    let spec = train.spec(Split::Test, config.test_seed(n_way, k_shot, run));
    let episode_accuracies = evaluate_episodic(&model, dataset, spec, config.test_episodes, &train.loss)?;
    Ok(RunRecord { seed: run_seed, episode_accuracies })
}

/// Trains and evaluates every cell. The baseline does not depend on way or
/// shot, so it is trained `runs` times once and its report is copied into
/// every baseline cell. Work is spread over the current rayon pool across
/// cells and runs; each training run stays sequential.
pub fn run_matrix(dataset: &LabeledDataset, config: &MatrixConfig) -> Result<MatrixReport> {
    config.validate()?;
    config.train.validate()?;
    let mut jobs: Vec<(Method, usize, usize, usize)> = Vec::new();
    for &method in &config.methods {
        if method == Method::Baseline {
            jobs.extend((0..config.runs).map(|r| (method, 0, 0, r)));
            continue;
        }
        for &w in &config.ways {
            for &k in &config.shots {
                jobs.extend((0..config.runs).map(|r| (method, w, k, r)));
            }
        }
    }
    let results: Vec<Result<RunRecord>> = jobs
        .par_iter()
        .map(|&(m, w, k, r)| train_and_evaluate(dataset, config, m, w, k, r))
        .collect();
    let mut by_cell: BTreeMap<(Method, usize, usize), Vec<Result<RunRecord>>> = BTreeMap::new();
    for (job, res) in jobs.iter().zip(results) {
        by_cell.entry((job.0, job.1, job.2)).or_default().push(res);
    }

    let mut cells = Vec::new();
    for &method in &config.methods {
        for &w in &config.ways {
            for &k in &config.shots {
                let key = if method == Method::Baseline { (method, 0, 0) } else { (method, w, k) };
                let runs = &by_cell[&key];
                let outcome = runs
                    .iter()
                    .map(|r| r.as_ref().cloned().map_err(ToString::to_string))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .and_then(|records| {
                        aggregate(method, w, k, config.train.q_query, records, config.ci_unit).map_err(|e| e.to_string())
                    });
                let (report, error) = match outcome {
                    Ok(r) => (Some(r), None),
                    Err(e) => {
                        warn!("cell {method} {w}-way {k}-shot failed: {e}");
                        (None, Some(e))
                    }
                };
                cells.push(CellResult { method, n_way: w, k_shot: k, report, error, best_or_on_par: false });
            }
        }
    }
    mark_on_par(&mut cells);
    let chance = config.ways.iter().map(|&w| (w, 1.0 / w as f64)).collect();
    Ok(MatrixReport { config: config.clone(), cells, chance })
}

fn mark_on_par(cells: &mut [CellResult]) {
    let columns: Vec<(usize, usize)> = {
        let mut c: Vec<_> = cells.iter().map(|c| (c.n_way, c.k_shot)).collect();
        c.dedup();
        c.sort();
        c.dedup();
        c
    };
    for (w, k) in columns {
        let best = cells
            .iter()
            .filter(|c| c.n_way == w && c.k_shot == k)
            .filter_map(|c| c.report.as_ref())
            .max_by(|a, b| a.mean_accuracy.total_cmp(&b.mean_accuracy))
            .cloned();
        let Some(best) = best else { continue };
        for c in cells.iter_mut().filter(|c| c.n_way == w && c.k_shot == k) {
            c.best_or_on_par = c.report.as_ref().is_some_and(|r| compare(r, &best) == Verdict::OnPar);
        }
    }
}

/// Aligned plain-text table: one row per method, one column per (way, shot).
/// `*` marks the best cell of a column and every cell on par with it.
pub fn summary_table(report: &MatrixReport) -> String {
    let cfg = &report.config;
    let mut columns = Vec::new();
    for &w in &cfg.ways {
        for &k in &cfg.shots {
            columns.push((w, k));
        }
    }
    let mut out = format!("{:<10}", "method");
    for (w, k) in &columns {
        out += &format!(" {:>18}", format!("{w}-way {k}-shot"));
    }
    out.push('\n');
    for &m in &cfg.methods {
        out += &format!("{:<10}", m.as_str().to_uppercase());
        for &(w, k) in &columns {
            let text = match report.cell(m, w, k) {
                Some(CellResult { report: Some(r), best_or_on_par, .. }) => format!(
                    "{}{:.2} ± {:.2}",
                    if *best_or_on_par { "*" } else { "" },
                    100.0 * r.mean_accuracy,
                    100.0 * r.ci95_half_width
                ),
                _ => "error".to_string(),
            };
            out += &format!(" {text:>18}");
        }
        out.push('\n');
    }
    out += &format!("{:<10}", "chance");
    for (w, _) in &columns {
        out += &format!(" {:>18}", format!("{:.2}", 100.0 * report.chance[w]));
    }
    out += "\n(baseline chance: 50.00; * = best or on par within 95% CI)\n";
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(values: &[f64]) -> RunReport {
        aggregate(
            Method::Pn,
            5,
            5,
            5,
            vec![RunRecord { seed: 0, episode_accuracies: values.to_vec() }],
            CiUnit::Episode,
        )
        .unwrap()
    }

    #[test]
    fn constant_accuracies_have_zero_width() {
        let r = report(&[0.8; 10]);
        assert!((r.mean_accuracy - 0.8).abs() < 1e-15);
        assert_eq!(r.ci95_half_width, 0.0);
    }

    #[test]
    fn balanced_binary_accuracies() {
        let values: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
        let r = report(&values);
        assert_eq!(r.mean_accuracy, 0.5);
        // sample sd = sqrt(250 / 999)
        let sd = (250.0f64 / 999.0).sqrt();
        assert!((sd - 0.50025).abs() < 1e-5);
        assert!((r.ci95_half_width - 1.96 * sd / 1000f64.sqrt()).abs() < 1e-15);
        assert!((r.ci95_half_width - 0.031).abs() < 5e-4);
    }

    #[test]
    fn single_value_reports_zero_width() {
        let r = report(&[0.4]);
        assert_eq!((r.mean_accuracy, r.ci95_half_width), (0.4, 0.0));
    }

    #[test]
    fn unequal_runs_are_rejected() {
        let runs = vec![
            RunRecord { seed: 0, episode_accuracies: vec![0.1, 0.2] },
            RunRecord { seed: 1, episode_accuracies: vec![0.3] },
        ];
        assert!(aggregate(Method::Pn, 5, 1, 5, runs, CiUnit::Episode).is_err());
    }

    #[test]
    fn run_unit_uses_run_means() {
        let runs = vec![
            RunRecord { seed: 0, episode_accuracies: vec![0.0, 1.0] },
            RunRecord { seed: 1, episode_accuracies: vec![1.0, 1.0] },
        ];
        let r = aggregate(Method::Pn, 5, 1, 5, runs, CiUnit::Run).unwrap();
        assert_eq!(r.mean_accuracy, 0.75);
        let sd = (2.0 * 0.25f64.powi(2)).sqrt();
        assert!((r.ci95_half_width - 1.96 * sd / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn interval_comparison() {
        assert_eq!(compare_intervals((0.80, 0.90), (0.85, 0.95)), Verdict::OnPar);
        assert_eq!(compare_intervals((0.80, 0.82), (0.90, 0.92)), Verdict::SecondHigher);
        assert_eq!(compare_intervals((0.90, 0.92), (0.80, 0.82)), Verdict::FirstHigher);
        let r = report(&[0.1, 0.5, 0.9]);
        assert_eq!(compare(&r, &r), Verdict::OnPar);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn interval() -> impl Strategy<Value = (f64, f64)> {
            (0.0f64..1.0, 0.0f64..0.2).prop_map(|(m, h)| (m - h, m + h))
        }

        proptest! {
            #[test]
            fn compare_is_symmetric(a in interval(), b in interval()) {
                let (ab, ba) = (compare_intervals(a, b), compare_intervals(b, a));
                match ab {
                    Verdict::OnPar => prop_assert_eq!(ba, Verdict::OnPar),
                    Verdict::FirstHigher => prop_assert_eq!(ba, Verdict::SecondHigher),
                    Verdict::SecondHigher => prop_assert_eq!(ba, Verdict::FirstHigher),
                }
            }

            #[test]
            fn pooled_mean_equals_mean_of_run_means(
                runs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 7), 1..6)
            ) {
                let records: Vec<RunRecord> = runs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| RunRecord { seed: i as u64, episode_accuracies: v.clone() })
                    .collect();
                let pooled = aggregate(Method::Mn, 5, 1, 5, records.clone(), CiUnit::Episode).unwrap();
                let by_run = aggregate(Method::Mn, 5, 1, 5, records, CiUnit::Run).unwrap();
                prop_assert!((pooled.mean_accuracy - by_run.mean_accuracy).abs() < 1e-12);
            }
        }
    }
}
