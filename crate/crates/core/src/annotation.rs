//! From raw engagement traces to a labelled, game-partitioned dataset.
//!
//! Per game: min-max normalise each annotator trace, resample onto a common
//! grid and take the per-tick median, then average into one-second windows
//! shifted back by the reaction delay. Window means pooled over the whole
//! subcorpus give the median `e_bar`; windows farther than `epsilon` from it
//! become high/low samples, are relabelled to `2 * game_id + y`, and games
//! with too few samples in either class are dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingTable, LabeledDataset, LabeledSample, Manifest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub time_s: f64,
    pub value: f64,
}

/// One annotator's continuous engagement signal for one game clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTrace {
    pub game_id: u32,
    pub annotator_id: String,
    pub points: Vec<TracePoint>,
}

impl AnnotationTrace {
    pub fn new(game_id: u32, annotator_id: impl Into<String>, points: Vec<TracePoint>) -> Result<Self> {
        let trace = Self { game_id, annotator_id: annotator_id.into(), points };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Validation(format!(
                "trace for game {} annotator {} has fewer than 2 points",
                self.game_id, self.annotator_id
            )));
        }
        for w in self.points.windows(2) {
            if !(w[1].time_s > w[0].time_s) {
                return Err(Error::Validation(format!(
                    "trace for game {} annotator {}: times not strictly increasing at {}",
                    self.game_id, self.annotator_id, w[1].time_s
                )));
            }
        }
        if self.points.iter().any(|p| !p.time_s.is_finite() || p.time_s < 0.0 || !p.value.is_finite()) {
            return Err(Error::Validation(format!(
                "trace for game {} annotator {} has negative or non-finite entries",
                self.game_id, self.annotator_id
            )));
        }
        Ok(())
    }

    fn start(&self) -> f64 {
        self.points[0].time_s
    }

    fn end(&self) -> f64 {
        self.points[self.points.len() - 1].time_s
    }

    /// Linear interpolation; `t` must lie within the trace span.
    fn value_at(&self, t: f64) -> f64 {
        let i = self.points.partition_point(|p| p.time_s <= t);
        if i == 0 {
            return self.points[0].value;
        }
        if i == self.points.len() {
            return self.points[i - 1].value;
        }
        let (a, b) = (self.points[i - 1], self.points[i]);
        let frac = (t - a.time_s) / (b.time_s - a.time_s);
        a.value + frac * (b.value - a.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    pub epsilon: f64,
    pub min_samples_per_class: usize,
    pub resample_hz: f64,
    pub reaction_shift_s: f64,
    pub window_s: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            min_samples_per_class: 10,
            resample_hz: 10.0,
            reaction_shift_s: 1.0,
            window_s: 1.0,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Validation(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if !(self.window_s > 0.0) || !(self.resample_hz > 0.0) || !(self.reaction_shift_s >= 0.0) {
            return Err(Error::Validation(
                "window_s and resample_hz must be positive, reaction_shift_s non-negative".into(),
            ));
        }
        if self.min_samples_per_class == 0 {
            return Err(Error::Validation("min_samples_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Min-max scales a trace to [0, 1]. A constant trace maps to 0.5 everywhere;
/// the returned flag reports that degenerate case.
pub fn normalize_trace(trace: &AnnotationTrace) -> (AnnotationTrace, bool) {
    let (min, max) = trace
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.value), hi.max(p.value)));
    let degenerate = !(max > min);
    let points = trace
        .points
        .iter()
        .map(|p| TracePoint {
            time_s: p.time_s,
            value: if degenerate { 0.5 } else { (p.value - min) / (max - min) },
        })
        .collect();
    if degenerate {
        log::warn!(
            "constant trace for game {} annotator {} normalised to 0.5",
            trace.game_id,
            trace.annotator_id
        );
    }
    (AnnotationTrace { points, ..trace.clone() }, degenerate)
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Resamples every trace onto `t = k / resample_hz` over the common span and
/// takes the per-tick median across annotators.
pub fn median_trace(traces: &[AnnotationTrace], resample_hz: f64) -> Result<Vec<TracePoint>> {
    if traces.is_empty() {
        return Err(Error::Validation("median of an empty trace list".into()));
    }
    if !(resample_hz > 0.0) {
        return Err(Error::Validation("resample_hz must be positive".into()));
    }
    let start = traces.iter().map(|t| t.start()).fold(f64::NEG_INFINITY, f64::max);
    let end = traces.iter().map(|t| t.end()).fold(f64::INFINITY, f64::min);
    let first = (start * resample_hz - 1e-9).ceil() as i64;
    let last = (end * resample_hz + 1e-9).floor() as i64;
    if !(end > start) || last < first {
        return Err(Error::Validation(format!(
            "traces for game {} have no overlapping time span",
            traces[0].game_id
        )));
    }
    let mut values = Vec::with_capacity(traces.len());
    Ok((first..=last)
        .map(|k| {
            let t = k as f64 / resample_hz;
            values.clear();
            values.extend(traces.iter().map(|tr| tr.value_at(t)));
            values.sort_by(f64::total_cmp);
            TracePoint { time_s: t, value: median_of_sorted(&values) }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowMean {
    pub window_index: u32,
    pub engagement_mean: f64,
}

/// Averages the median trace into windows `[k w, (k+1) w)` that lie fully
/// inside the trace, and re-indexes them by `k - shift / w` so that an
/// annotation window is paired with the video window that preceded it.
pub fn window_average(median: &[TracePoint], window_s: f64, reaction_shift_s: f64) -> Vec<WindowMean> {
    let Some(last) = median.last() else {
        return Vec::new();
    };
    let shift = (reaction_shift_s / window_s).round() as i64;
    let end = last.time_s;
    let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for p in median {
        let k = (p.time_s / window_s + 1e-9).floor() as i64;
        if (k + 1) as f64 * window_s > end + 1e-9 {
            continue;
        }
        let e = sums.entry(k).or_default();
        e.0 += p.value;
        e.1 += 1;
    }
    sums.into_iter()
        .filter_map(|(k, (sum, n))| {
            let idx = k - shift;
            (idx >= 0 && n > 0).then(|| WindowMean {
                window_index: idx as u32,
                engagement_mean: sum / n as f64,
            })
        })
        .collect()
}

/// Median of window means pooled across every game of a subcorpus.
pub fn subcorpus_median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Validation("median of an empty list".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(median_of_sorted(&sorted))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engagement {
    High,
    Low,
    Discarded,
}

/// Strict dead-zone rule around the subcorpus median.
pub fn binarize(e: f64, e_bar: f64, epsilon: f64) -> Engagement {
    if e > e_bar + epsilon {
        Engagement::High
    } else if e < e_bar - epsilon {
        Engagement::Low
    } else {
        Engagement::Discarded
    }
}

/// Maps a domain-agnostic label `y` of domain `n` to the class `|Y| n + y`.
pub fn relabel(y: u32, domain: u32, num_binary_classes: u32) -> Result<u32> {
    if y >= num_binary_classes {
        return Err(Error::Validation(format!(
            "label {y} out of range for {num_binary_classes} classes"
        )));
    }
    num_binary_classes
        .checked_mul(domain)
        .and_then(|v| v.checked_add(y))
        .ok_or_else(|| Error::Validation(format!("class id overflow for domain {domain}")))
}

/// Inverse of [`relabel`]: returns `(y, domain)`.
pub fn decode(y_class: u32, num_binary_classes: u32) -> (u32, u32) {
    (y_class % num_binary_classes, y_class / num_binary_classes)
}

/// Keeps only games with at least `min_samples_per_class` samples in both classes.
pub fn filter_games(samples: Vec<LabeledSample>, min_samples_per_class: usize) -> Result<Vec<LabeledSample>> {
    let mut counts: BTreeMap<u32, [usize; 2]> = BTreeMap::new();
    for s in &samples {
        counts.entry(s.game_id).or_default()[s.y_binary as usize] += 1;
    }
    let kept: BTreeSet<u32> = counts
        .iter()
        .filter(|(_, c)| c[0] >= min_samples_per_class && c[1] >= min_samples_per_class)
        .map(|(&g, _)| g)
        .collect();
    if kept.is_empty() {
        return Err(Error::Pipeline(format!(
            "every game has fewer than {min_samples_per_class} samples in some class"
        )));
    }
    Ok(samples.into_iter().filter(|s| kept.contains(&s.game_id)).collect())
}

/// Table-1 style summary of a prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub games: usize,
    pub train_games: usize,
    pub valid_games: usize,
    pub test_games: usize,
    pub high_samples: usize,
    pub low_samples: usize,
    /// Share of the larger binary class, in percent.
    pub binary_majority_pct: f64,
}

impl DatasetStats {
    pub fn of(dataset: &LabeledDataset) -> Self {
        let games: BTreeSet<u32> = dataset.samples().iter().map(|s| s.game_id).collect();
        let per_split = |split: Split| {
            games
                .iter()
                .filter(|&&g| dataset.manifest().split_of(g) == Some(split))
                .count()
        };
        let high = dataset.samples().iter().filter(|s| s.y_binary == 1).count();
        let n = dataset.samples().len();
        let low = n - high;
        Self {
            samples: n,
            games: games.len(),
            train_games: per_split(Split::Train),
            valid_games: per_split(Split::Valid),
            test_games: per_split(Split::Test),
            high_samples: high,
            low_samples: low,
            binary_majority_pct: if n == 0 { 0.0 } else { 100.0 * high.max(low) as f64 / n as f64 },
        }
    }

    /// One row in the layout `subcorpus | #samples | #games | train/valid/test (classes) | majority`.
    pub fn table_row(&self, subcorpus: &str) -> String {
        format!(
            "{subcorpus:<10} {:>8} {:>7}   {} ({}) / {} ({}) / {} ({})   {:.2}%",
            self.samples,
            self.games,
            self.train_games,
            2 * self.train_games,
            self.valid_games,
            2 * self.valid_games,
            self.test_games,
            2 * self.test_games,
            self.binary_majority_pct
        )
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: LabeledDataset,
    pub stats: DatasetStats,
    pub discarded_games: Vec<u32>,
    pub dropped_missing_embedding: usize,
    pub degenerate_traces: usize,
}

/// Runs the full labelling pipeline. The returned manifest keeps only the
/// retained games and carries the effective labelling parameters.
pub fn prepare(
    manifest: &Manifest,
    traces: &[AnnotationTrace],
    embeddings: &EmbeddingTable,
    config: &LabelingConfig,
) -> Result<Prepared> {
    config.validate()?;
    let mut by_game: BTreeMap<u32, Vec<AnnotationTrace>> = BTreeMap::new();
    let mut degenerate_traces = 0;
    for t in traces {
        t.validate()?;
        if manifest.split_of(t.game_id).is_none() {
            log::warn!("ignoring trace for game {} absent from manifest", t.game_id);
            continue;
        }
        let (norm, degenerate) = normalize_trace(t);
        degenerate_traces += degenerate as usize;
        by_game.entry(t.game_id).or_default().push(norm);
    }

    let mut windows: Vec<(u32, WindowMean)> = Vec::new();
    for (&game, game_traces) in &by_game {
        let median = median_trace(game_traces, config.resample_hz)?;
        windows.extend(
            window_average(&median, config.window_s, config.reaction_shift_s)
                .into_iter()
                .map(|w| (game, w)),
        );
    }
    let pooled: Vec<f64> = windows.iter().map(|(_, w)| w.engagement_mean).collect();
    let e_bar = subcorpus_median(&pooled)
        .map_err(|_| Error::Pipeline("no annotation windows in subcorpus".into()))?;

    let index = embeddings.index();
    let mut dropped_missing_embedding = 0;
    let mut samples = Vec::new();
    for (game, w) in windows {
        let y = match binarize(w.engagement_mean, e_bar, config.epsilon) {
            Engagement::High => 1,
            Engagement::Low => 0,
            Engagement::Discarded => continue,
        };
        let Some(&pos) = index.get(&(game, w.window_index)) else {
            dropped_missing_embedding += 1;
            continue;
        };
        samples.push(LabeledSample {
            game_id: game,
            window_index: w.window_index,
            engagement_mean: w.engagement_mean,
            y_binary: y as u8,
            y_class: relabel(y, game, 2)?,
            vector: embeddings.records()[pos].vector.iter().map(|&v| v as f64).collect(),
        });
    }
    if dropped_missing_embedding > 0 {
        log::warn!("{dropped_missing_embedding} labelled windows lack an embedding record and were dropped");
    }

    let before: BTreeSet<u32> = manifest.games.iter().map(|g| g.game_id).collect();
    let samples = filter_games(samples, config.min_samples_per_class)?;
    let kept: BTreeSet<u32> = samples.iter().map(|s| s.game_id).collect();
    let discarded_games: Vec<u32> = before.difference(&kept).copied().collect();

    let mut out_manifest = manifest.clone();
    out_manifest.games.retain(|g| kept.contains(&g.game_id));
    out_manifest.labeling.epsilon = config.epsilon;
    out_manifest.labeling.min_samples_per_class = config.min_samples_per_class;

    let dataset = LabeledDataset::new(out_manifest, samples, e_bar)?;
    let stats = DatasetStats::of(&dataset);
    Ok(Prepared { dataset, stats, discarded_games, dropped_missing_embedding, degenerate_traces })
}

/// Reads traces from CSV with header `game_id,annotator_id,time_s,value`.
/// Rows are grouped by (game, annotator) in file order.
pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<AnnotationTrace>> {
    #[derive(Deserialize)]
    struct Row {
        game_id: u32,
        annotator_id: String,
        time_s: f64,
        value: f64,
    }
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut grouped: BTreeMap<(u32, String), Vec<TracePoint>> = BTreeMap::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| Error::Format(format!("bad trace row: {e}")))?;
        grouped
            .entry((row.game_id, row.annotator_id))
            .or_default()
            .push(TracePoint { time_s: row.time_s, value: row.value });
    }
    grouped
        .into_iter()
        .map(|((game, annotator), points)| AnnotationTrace::new(game, annotator, points))
        .collect()
}

pub fn traces_to_csv(traces: &[AnnotationTrace]) -> String {
    let mut out = String::from("game_id,annotator_id,time_s,value\n");
    for t in traces {
        for p in &t.points {
            out.push_str(&format!("{},{},{},{}\n", t.game_id, t.annotator_id, p.time_s, p.value));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EmbeddingRecord, GameEntry, LabelingParams, ManifestPaths};
    use proptest::prelude::*;

    fn trace(values: &[f64]) -> AnnotationTrace {
        let points = values
            .iter()
            .enumerate()
            .map(|(i, &value)| TracePoint { time_s: i as f64, value })
            .collect();
        AnnotationTrace::new(0, "a", points).unwrap()
    }

    fn values(t: &AnnotationTrace) -> Vec<f64> {
        t.points.iter().map(|p| p.value).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(values(&normalize_trace(&trace(&[2.0, 4.0, 6.0])).0), vec![0.0, 0.5, 1.0]);
        assert_eq!(values(&normalize_trace(&trace(&[-1.0, 1.0])).0), vec![0.0, 1.0]);
        let (flat, degenerate) = normalize_trace(&trace(&[3.0, 3.0, 3.0]));
        assert_eq!(values(&flat), vec![0.5; 3]);
        assert!(degenerate);
    }

    #[test]
    fn trace_validation() {
        assert!(AnnotationTrace::new(0, "a", vec![TracePoint { time_s: 0.0, value: 1.0 }]).is_err());
        let back = vec![
            TracePoint { time_s: 1.0, value: 1.0 },
            TracePoint { time_s: 1.0, value: 2.0 },
        ];
        assert!(AnnotationTrace::new(0, "a", back).is_err());
    }

    #[test]
    fn median_of_single_trace_is_resampled_trace() {
        let t = trace(&[0.0, 1.0, 0.0]);
        let m = median_trace(&[t], 10.0).unwrap();
        assert_eq!(m.len(), 21);
        assert!((m[5].value - 0.5).abs() < 1e-12);
        assert!((m[10].value - 1.0).abs() < 1e-12);
        assert!((m[13].value - 0.7).abs() < 1e-12);
    }

    #[test]
    fn median_of_three_constants() {
        let ts: Vec<_> = [0.2, 0.5, 0.9].iter().map(|&v| trace(&[v, v, v])).collect();
        let m = median_trace(&ts, 10.0).unwrap();
        assert!(m.iter().all(|p| (p.value - 0.5).abs() < 1e-12));
    }

    #[test]
    fn median_of_two_opposite_ramps_is_half() {
        // Hand interpolation: at t, ramps give t/T and 1 - t/T; mean of two is 0.5.
        let m = median_trace(&[trace(&[0.0, 1.0]), trace(&[1.0, 0.0])], 10.0).unwrap();
        assert_eq!(m.len(), 11);
        assert!(m.iter().all(|p| (p.value - 0.5).abs() < 1e-12));
    }

    #[test]
    fn median_errors() {
        assert!(median_trace(&[], 10.0).is_err());
        let late = AnnotationTrace::new(
            0,
            "b",
            vec![TracePoint { time_s: 5.0, value: 0.0 }, TracePoint { time_s: 6.0, value: 1.0 }],
        )
        .unwrap();
        assert!(median_trace(&[trace(&[0.0, 1.0, 0.0]), late], 10.0).is_err());
    }

    fn grid(seconds: usize, value: impl Fn(f64) -> f64) -> Vec<TracePoint> {
        (0..=seconds * 10)
            .map(|k| {
                let t = k as f64 / 10.0;
                TracePoint { time_s: t, value: value(t) }
            })
            .collect()
    }

    #[test]
    fn sixty_second_trace_yields_59_shifted_windows() {
        let w = window_average(&grid(60, |_| 0.7), 1.0, 1.0);
        assert_eq!(w.len(), 59);
        assert_eq!(w.first().unwrap().window_index, 0);
        assert_eq!(w.last().unwrap().window_index, 58);
        assert!(w.iter().all(|x| (x.engagement_mean - 0.7).abs() < 1e-12));
    }

    #[test]
    fn zero_shift_gives_plain_per_second_means() {
        let w = window_average(&grid(5, |t| t), 1.0, 0.0);
        assert_eq!(w.len(), 5);
        for (k, x) in w.iter().enumerate() {
            assert_eq!(x.window_index, k as u32);
            // Ticks k, k+0.1, ..., k+0.9 average to k + 0.45.
            assert!((x.engagement_mean - (k as f64 + 0.45)).abs() < 1e-9);
        }
        // With a 1 s shift, annotation window k+1 lands on index k.
        let shifted = window_average(&grid(5, |t| t), 1.0, 1.0);
        assert!((shifted[0].engagement_mean - 1.45).abs() < 1e-9);
    }

    #[test]
    fn subcorpus_median_examples() {
        assert_eq!(subcorpus_median(&[0.1, 0.5, 0.9]).unwrap(), 0.5);
        assert!((subcorpus_median(&[0.2, 0.4, 0.6, 0.8]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(subcorpus_median(&[0.3]).unwrap(), 0.3);
        assert!(subcorpus_median(&[]).is_err());
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(0.65, 0.5, 0.1), Engagement::High);
        assert_eq!(binarize(0.55, 0.5, 0.1), Engagement::Discarded);
        assert_eq!(binarize(0.35, 0.5, 0.1), Engagement::Low);
        assert_eq!(binarize(0.75, 0.5, 0.25), Engagement::Discarded);
        assert_eq!(binarize(0.25, 0.5, 0.25), Engagement::Discarded);
    }

    #[test]
    fn relabel_examples() {
        assert_eq!(relabel(1, 0, 2).unwrap(), 1);
        assert_eq!(relabel(0, 2, 2).unwrap(), 4);
        assert_eq!(relabel(0, 0, 2).unwrap(), 0);
        assert!(matches!(relabel(2, 0, 2), Err(Error::Validation(_))));
        assert_eq!(decode(5, 2), (1, 2));
        assert_eq!(decode(0, 2), (0, 0));
        assert_eq!(decode(7, 2), (1, 3));
    }

    fn labeled(game: u32, window: u32, y: u8) -> LabeledSample {
        LabeledSample {
            game_id: game,
            window_index: window,
            engagement_mean: if y == 1 { 0.9 } else { 0.1 },
            y_binary: y,
            y_class: 2 * game + y as u32,
            vector: vec![0.0],
        }
    }

    fn game_samples(game: u32, high: usize, low: usize) -> Vec<LabeledSample> {
        (0..high)
            .map(|i| labeled(game, i as u32, 1))
            .chain((0..low).map(|i| labeled(game, (high + i) as u32, 0)))
            .collect()
    }

    #[test]
    fn filter_examples() {
        assert!(matches!(filter_games(game_samples(0, 12, 3), 10), Err(Error::Pipeline(_))));
        assert_eq!(filter_games(game_samples(0, 10, 10), 10).unwrap().len(), 20);
        let mut both = game_samples(0, 12, 3);
        both.extend(game_samples(1, 11, 10));
        let kept = filter_games(both, 10).unwrap();
        assert_eq!(kept.len(), 21);
        assert!(kept.iter().all(|s| s.game_id == 1));
    }

    /// Builds a subcorpus whose per-window engagement is known exactly:
    /// every annotator's trace is a step function constant inside each
    /// annotation window, so window means equal the step values.
    struct Fixture {
        manifest: Manifest,
        traces: Vec<AnnotationTrace>,
        table: EmbeddingTable,
        expected: BTreeMap<u32, (usize, usize)>,
    }

    fn fixture(pattern: &[(u32, Split, usize, usize, usize)]) -> Fixture {
        // (game, split, high windows, low windows, ambiguous windows)
        let mut traces = Vec::new();
        let mut records = Vec::new();
        let mut expected = BTreeMap::new();
        for &(game, _, high, low, mid) in pattern {
            let mut levels = Vec::new();
            levels.extend(std::iter::repeat_n(0.9, high));
            levels.extend(std::iter::repeat_n(0.1, low));
            levels.extend(std::iter::repeat_n(0.5, mid));
            // annotation window 0 pairs with video window -1 and is dropped;
            // windows run to the last full second.
            let mut values = vec![0.5];
            values.extend(levels.iter().copied());
            let seconds = values.len();
            for annotator in 0..3 {
                let scale = 1.0 + annotator as f64;
                let mut points = Vec::new();
                for (k, &v) in values.iter().enumerate() {
                    // Anchor min (0) and max (1) so min-max scaling is the identity.
                    points.push(TracePoint { time_s: k as f64, value: v * scale });
                    points.push(TracePoint { time_s: k as f64 + 0.999, value: v * scale });
                }
                points.push(TracePoint { time_s: seconds as f64, value: 0.0 });
                points.push(TracePoint { time_s: seconds as f64 + 0.5, value: scale });
                traces.push(AnnotationTrace::new(game, format!("a{annotator}"), points).unwrap());
            }
            for w in 0..levels.len() as u32 {
                records.push(EmbeddingRecord { game_id: game, window_index: w, vector: vec![game as f32, w as f32] });
            }
            expected.insert(game, (high, low));
        }
        let manifest = Manifest {
            subcorpus_id: "synthetic".into(),
            games: pattern
                .iter()
                .map(|&(game_id, split, ..)| GameEntry { game_id, name: format!("game{game_id}"), split })
                .collect(),
            labeling: LabelingParams { epsilon: 0.1, min_samples_per_class: 10 },
            paths: ManifestPaths { embeddings: "e.emb".into(), traces: Some("t.csv".into()) },
            metadata: Default::default(),
        };
        Fixture { manifest, traces, table: EmbeddingTable::new(2, records).unwrap(), expected }
    }

    #[test]
    fn prepare_reproduces_declared_counts() {
        let fx = fixture(&[
            (0, Split::Train, 12, 14, 5),
            (1, Split::Train, 20, 10, 0),
            (2, Split::Valid, 11, 11, 3),
            (3, Split::Test, 15, 12, 4),
            (4, Split::Test, 4, 10, 20), // too few high windows: dropped
        ]);
        let config = LabelingConfig::default();
        let prepared = prepare(&fx.manifest, &fx.traces, &fx.table, &config).unwrap();
        let (mut hi, mut lo) = (0, 0);
        for (&g, &(h, l)) in &fx.expected {
            if g != 4 {
                hi += h;
                lo += l;
            }
        }
        let s = &prepared.stats;
        assert_eq!(s.samples, hi + lo);
        assert_eq!((s.high_samples, s.low_samples), (hi, lo));
        assert_eq!(s.games, 4);
        assert_eq!((s.train_games, s.valid_games, s.test_games), (2, 1, 1));
        assert_eq!(prepared.discarded_games, vec![4]);
        assert!((s.binary_majority_pct - 100.0 * 58.0 / 105.0).abs() < 1e-9);
        for sample in prepared.dataset.samples() {
            assert!((sample.engagement_mean - prepared.dataset.subcorpus_median()).abs() > 0.1);
            let (h, _) = fx.expected[&sample.game_id];
            // High windows come first in the fixture.
            assert_eq!(sample.y_binary == 1, (sample.window_index as usize) < h);
        }
    }

    #[test]
    fn prepare_is_deterministic_and_drops_missing_embeddings() {
        let mut fx = fixture(&[(0, Split::Train, 12, 12, 0), (1, Split::Test, 12, 12, 0)]);
        let config = LabelingConfig::default();
        let a = prepare(&fx.manifest, &fx.traces, &fx.table, &config).unwrap();
        let b = prepare(&fx.manifest, &fx.traces, &fx.table, &config).unwrap();
        assert_eq!(
            crate::data::labels_to_csv(&a.dataset.label_rows()),
            crate::data::labels_to_csv(&b.dataset.label_rows())
        );
        let records: Vec<_> = fx.table.records().iter().filter(|r| !(r.game_id == 0 && r.window_index == 0)).cloned().collect();
        fx.table = EmbeddingTable::new(2, records).unwrap();
        let c = prepare(&fx.manifest, &fx.traces, &fx.table, &config).unwrap();
        assert_eq!(c.dropped_missing_embedding, 1);
        assert_eq!(c.stats.samples, a.stats.samples - 1);
    }

    #[test]
    fn huge_epsilon_discards_everything() {
        let fx = fixture(&[(0, Split::Train, 12, 12, 0)]);
        let config = LabelingConfig { epsilon: 0.45, ..Default::default() };
        assert!(matches!(prepare(&fx.manifest, &fx.traces, &fx.table, &config), Err(Error::Pipeline(_))));
    }

    #[test]
    fn traces_csv_round_trip() {
        let fx = fixture(&[(0, Split::Train, 2, 2, 0)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.csv");
        std::fs::write(&path, traces_to_csv(&fx.traces)).unwrap();
        assert_eq!(read_traces(&path).unwrap(), fx.traces);
    }

    proptest! {
        #[test]
        fn relabel_round_trip(y in 0u32..2, n in 0u32..1_000_000) {
            let c = relabel(y, n, 2).unwrap();
            prop_assert_eq!(decode(c, 2), (y, n));
        }

        #[test]
        fn normalised_trace_spans_unit_interval(vals in prop::collection::vec(-1e3f64..1e3, 2..40)) {
            prop_assume!(vals.iter().any(|&v| v != vals[0]));
            let (t, degenerate) = normalize_trace(&trace(&vals));
            prop_assert!(!degenerate);
            let v = values(&t);
            prop_assert_eq!(v.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            prop_assert_eq!(v.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }

        #[test]
        fn filtered_games_meet_threshold(
            counts in prop::collection::vec((0usize..20, 0usize..20), 1..6),
            min in 1usize..12,
        ) {
            let samples: Vec<_> = counts
                .iter()
                .enumerate()
                .flat_map(|(g, &(h, l))| game_samples(g as u32, h, l))
                .collect();
            if let Ok(kept) = filter_games(samples, min) {
                let mut per: BTreeMap<u32, [usize; 2]> = BTreeMap::new();
                for s in &kept {
                    per.entry(s.game_id).or_default()[s.y_binary as usize] += 1;
                }
                for c in per.values() {
                    prop_assert!(c[0] >= min && c[1] >= min);
                }
            }
        }
    }
}
