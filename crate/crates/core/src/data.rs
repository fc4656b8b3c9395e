//! Domain types shared by every stage and their on-disk formats.
//!
//! Formats (all integers little-endian):
//!
//! * embedding table: `"EMB1" | u32 dim | u64 record_count | records`, each
//!   record `u32 game_id | u32 window_index | dim x f32`. A CSV mirror with
//!   header `game_id,window_index,v0,...,v{D-1}` is accepted on read.
//! * manifest: JSON.
//! * labels: CSV with header `game_id,window_index,engagement_mean,y_binary,y_class`.
//! * checkpoint: `"PRJ1" | u32 d_in | u32 d_out | W (row-major f32) | b (f32) |
//!   u32 length | metadata JSON`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::{self, Engagement};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PRJ1";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.emb";

/// Metadata key under which the subcorpus median is stored in a dataset manifest.
pub const MEDIAN_KEY: &str = "subcorpus_median";

// ---------------------------------------------------------------------------
// Embedding table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub game_id: u32,
    pub window_index: u32,
    pub vector: Vec<f32>,
}

/// Frozen-backbone features, one vector per (game, one-second window).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("embedding dim must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.vector.len() != dim {
                return Err(Error::Validation(format!(
                    "record (game {}, window {}) has {} components, expected {dim}",
                    r.game_id,
                    r.window_index,
                    r.vector.len()
                )));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "record (game {}, window {}) has non-finite components",
                    r.game_id, r.window_index
                )));
            }
            if !seen.insert((r.game_id, r.window_index)) {
                return Err(Error::Validation(format!(
                    "duplicate record (game {}, window {})",
                    r.game_id, r.window_index
                )));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Map from `(game_id, window_index)` to record position.
    pub fn index(&self) -> HashMap<(u32, u32), usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.game_id, r.window_index), i))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.records.len() * (8 + 4 * self.dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.game_id.to_le_bytes());
            out.extend_from_slice(&r.window_index.to_le_bytes());
            for v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(4, "magic")? != EMBEDDING_MAGIC {
            return Err(Error::Format("bad magic bytes, expected \"EMB1\"".into()));
        }
        let dim = cur.u32("dim")? as usize;
        if dim == 0 {
            return Err(Error::Format("embedding dim must be positive".into()));
        }
        let count = cur.u64("record count")?;
        let record_len = 8 + 4 * dim as u64;
        let remaining = cur.remaining() as u64;
        if count.saturating_mul(record_len) > remaining {
            return Err(Error::Format(format!(
                "truncated record section: header declares {count} records, file holds {}",
                remaining / record_len
            )));
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let game_id = cur.u32("game_id")?;
            let window_index = cur.u32("window_index")?;
            let vector = (0..dim).map(|_| cur.f32("vector")).collect::<Result<Vec<_>>>()?;
            records.push(EmbeddingRecord { game_id, window_index, vector });
        }
        if cur.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after record section",
                cur.remaining()
            )));
        }
        Self::new(dim, records)
    }

    fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().map_err(csv_format)?.clone();
        if headers.len() < 3 || &headers[0] != "game_id" || &headers[1] != "window_index" {
            return Err(Error::Format(
                "embedding CSV header must be game_id,window_index,v0,...".into(),
            ));
        }
        let dim = headers.len() - 2;
        for (i, h) in headers.iter().skip(2).enumerate() {
            if h != format!("v{i}") {
                return Err(Error::Format(format!("unexpected embedding CSV column {h:?}")));
            }
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(csv_format)?;
            let field = |i: usize| row.get(i).unwrap_or("").trim();
            let parse_u32 = |i: usize| {
                field(i)
                    .parse::<u32>()
                    .map_err(|e| Error::Format(format!("bad integer {:?}: {e}", field(i))))
            };
            let game_id = parse_u32(0)?;
            let window_index = parse_u32(1)?;
            let vector = (2..dim + 2)
                .map(|i| {
                    field(i)
                        .parse::<f32>()
                        .map_err(|e| Error::Format(format!("bad float {:?}: {e}", field(i))))
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(EmbeddingRecord { game_id, window_index, vector });
        }
        Self::new(dim, records)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("game_id,window_index");
        for i in 0..self.dim {
            out.push_str(&format!(",v{i}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{}", r.game_id, r.window_index));
            for v in &r.vector {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_embedding_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, table.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_embedding_csv(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, table.to_csv()).map_err(|e| Error::io(path, e))
}

/// Reads either the binary format or its CSV mirror, chosen by the leading bytes.
pub fn read_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"game_id") {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Format(format!("embedding CSV is not UTF-8: {e}")))?;
        EmbeddingTable::from_csv(text)
    } else {
        EmbeddingTable::from_bytes(&bytes)
    }
}

fn csv_format(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!("truncated file while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!(
                "unknown split {other:?}; expected train|valid|test"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameEntry {
    pub game_id: u32,
    pub name: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingParams {
    pub epsilon: f64,
    pub min_samples_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPaths {
    pub embeddings: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traces: Option<String>,
}

/// Per-subcorpus game list with split assignment and labelling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcorpus_id: String,
    pub games: Vec<GameEntry>,
    pub labeling: LabelingParams,
    pub paths: ManifestPaths,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for g in &self.games {
            if !ids.insert(g.game_id) {
                return Err(Error::Validation(format!("duplicate game_id {}", g.game_id)));
            }
        }
        let eps = self.labeling.epsilon;
        if !(0.0..0.5).contains(&eps) {
            return Err(Error::Validation(format!("epsilon {eps} outside [0, 0.5)")));
        }
        if self.labeling.min_samples_per_class == 0 {
            return Err(Error::Validation("min_samples_per_class must be positive".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, game_id: u32) -> Option<Split> {
        self.games.iter().find(|g| g.game_id == game_id).map(|g| g.split)
    }

    pub fn games_in(&self, split: Split) -> impl Iterator<Item = &GameEntry> {
        self.games.iter().filter(move |g| g.split == split)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("invalid manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::from_json(&text)
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_json()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Labelled dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub game_id: u32,
    pub window_index: u32,
    pub engagement_mean: f64,
    pub y_binary: u8,
    pub y_class: u32,
    pub vector: Vec<f64>,
}

/// One row of the labels file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub game_id: u32,
    pub window_index: u32,
    pub engagement_mean: f64,
    pub y_binary: u8,
    pub y_class: u32,
}

impl From<&LabeledSample> for LabelRow {
    fn from(s: &LabeledSample) -> Self {
        LabelRow {
            game_id: s.game_id,
            window_index: s.window_index,
            engagement_mean: s.engagement_mean,
            y_binary: s.y_binary,
            y_class: s.y_class,
        }
    }
}

pub fn labels_to_csv(rows: &[LabelRow]) -> String {
    let mut out = String::from("game_id,window_index,engagement_mean,y_binary,y_class\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.game_id, r.window_index, r.engagement_mean, r.y_binary, r.y_class
        ));
    }
    out
}

pub fn labels_from_csv(text: &str) -> Result<Vec<LabelRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_format)?;
    let expected = ["game_id", "window_index", "engagement_mean", "y_binary", "y_class"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!(
            "labels header must be {}",
            expected.join(",")
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Validation(format!("bad labels row: {e}"))))
        .collect()
}

/// Samples with binary, domain and relabelled class labels, attached to a
/// manifest that assigns every game to exactly one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    manifest: Manifest,
    samples: Vec<LabeledSample>,
    subcorpus_median: f64,
}

impl LabeledDataset {
    /// Checks every structural invariant of a labelled dataset.
    pub fn new(manifest: Manifest, samples: Vec<LabeledSample>, subcorpus_median: f64) -> Result<Self> {
        manifest.validate()?;
        if !subcorpus_median.is_finite() {
            return Err(Error::Validation("subcorpus median must be finite".into()));
        }
        let eps = manifest.labeling.epsilon;
        let dim = samples.first().map(|s| s.vector.len()).unwrap_or(0);
        let mut class_owner: BTreeMap<u32, u32> = BTreeMap::new();
        let mut counts: BTreeMap<u32, [usize; 2]> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for s in &samples {
            let at = || format!("sample (game {}, window {})", s.game_id, s.window_index);
            if manifest.split_of(s.game_id).is_none() {
                return Err(Error::Validation(format!("{}: game not in manifest", at())));
            }
            if !seen.insert((s.game_id, s.window_index)) {
                return Err(Error::Validation(format!("{}: duplicate", at())));
            }
            if s.y_binary > 1 {
                return Err(Error::Validation(format!("{}: y_binary {} not 0|1", at(), s.y_binary)));
            }
            let expected = annotation::relabel(s.y_binary as u32, s.game_id, 2)?;
            if s.y_class != expected {
                return Err(Error::Validation(format!(
                    "{}: y_class {} != 2*game_id + y_binary = {expected}",
                    at(),
                    s.y_class
                )));
            }
            let rule = annotation::binarize(s.engagement_mean, subcorpus_median, eps);
            let consistent = matches!(
                (rule, s.y_binary),
                (Engagement::High, 1) | (Engagement::Low, 0)
            );
            if !consistent {
                return Err(Error::Validation(format!(
                    "{}: engagement {} inconsistent with y_binary {} (median {subcorpus_median}, epsilon {eps})",
                    at(),
                    s.engagement_mean,
                    s.y_binary
                )));
            }
            if s.vector.len() != dim || dim == 0 || s.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{}: bad vector", at())));
            }
            if let Some(owner) = class_owner.insert(s.y_class, s.game_id) {
                if owner != s.game_id {
                    return Err(Error::Validation(format!(
                        "class {} appears under games {owner} and {}",
                        s.y_class, s.game_id
                    )));
                }
            }
            counts.entry(s.game_id).or_default()[s.y_binary as usize] += 1;
        }
        let min = manifest.labeling.min_samples_per_class;
        for (game, [low, high]) in &counts {
            if *low < min || *high < min {
                return Err(Error::Validation(format!(
                    "game {game} has {low} low / {high} high samples, below {min} per class"
                )));
            }
        }
        Ok(Self { manifest, samples, subcorpus_median })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn subcorpus_median(&self) -> f64 {
        self.subcorpus_median
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map(|s| s.vector.len()).unwrap_or(0)
    }

    pub fn split_of(&self, sample: &LabeledSample) -> Split {
        self.manifest
            .split_of(sample.game_id)
            .expect("validated at construction")
    }

    /// Sample positions belonging to `split`, in dataset order.
    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.split_of(&self.samples[i]) == split)
            .collect()
    }

    /// Class id -> sample positions for one split, classes ascending.
    pub fn classes_in(&self, split: Split) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in self.indices_in(split) {
            out.entry(self.samples[i].y_class).or_default().push(i);
        }
        out
    }

    /// A copy whose label assignment is randomly permuted within each split:
    /// vectors are shuffled across the samples of a split while every label
    /// stays attached to its (game, window) record. Used for chance-level checks.
    pub fn with_permuted_labels(&self, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut samples = self.samples.clone();
        for split in Split::ALL {
            let idx = self.indices_in(split);
            let mut vectors: Vec<Vec<f64>> =
                idx.iter().map(|&i| self.samples[i].vector.clone()).collect();
            let mut rng = crate::seed::rng(seed, &[crate::seed::tag("permute"), split as u64]);
            vectors.shuffle(&mut rng);
            for (&i, v) in idx.iter().zip(vectors) {
                samples[i].vector = v;
            }
        }
        Self {
            manifest: self.manifest.clone(),
            samples,
            subcorpus_median: self.subcorpus_median,
        }
    }

    pub fn label_rows(&self) -> Vec<LabelRow> {
        self.samples.iter().map(LabelRow::from).collect()
    }

    pub fn embedding_table(&self) -> Result<EmbeddingTable> {
        let records = self
            .samples
            .iter()
            .map(|s| EmbeddingRecord {
                game_id: s.game_id,
                window_index: s.window_index,
                vector: s.vector.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        EmbeddingTable::new(self.dim().max(1), records)
    }

    /// Joins a labels file against an embedding table.
    pub fn from_parts(
        manifest: Manifest,
        rows: &[LabelRow],
        table: &EmbeddingTable,
        subcorpus_median: f64,
    ) -> Result<Self> {
        let index = table.index();
        let samples = rows
            .iter()
            .map(|r| {
                let pos = index.get(&(r.game_id, r.window_index)).ok_or_else(|| {
                    Error::Validation(format!(
                        "labels row (game {}, window {}) has no embedding record",
                        r.game_id, r.window_index
                    ))
                })?;
                Ok(LabeledSample {
                    game_id: r.game_id,
                    window_index: r.window_index,
                    engagement_mean: r.engagement_mean,
                    y_binary: r.y_binary,
                    y_class: r.y_class,
                    vector: table.records()[*pos].vector.iter().map(|&v| v as f64).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, samples, subcorpus_median)
    }
}

/// Writes `manifest.json`, `labels.csv` and `embeddings.emb` into `dir`.
pub fn write_labeled_dataset(dataset: &LabeledDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = dataset.manifest.clone();
    manifest.paths.embeddings = EMBEDDINGS_FILE.to_string();
    manifest
        .metadata
        .insert(MEDIAN_KEY.to_string(), serde_json::json!(dataset.subcorpus_median));
    write_manifest(&manifest, dir.join(MANIFEST_FILE))?;
    let labels_path = dir.join(LABELS_FILE);
    fs::write(&labels_path, labels_to_csv(&dataset.label_rows()))
        .map_err(|e| Error::io(&labels_path, e))?;
    write_embedding_table(&dataset.embedding_table()?, dir.join(EMBEDDINGS_FILE))
}

/// Loads a dataset directory written by [`write_labeled_dataset`], `prepare` or `synth`.
pub fn read_labeled_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir.join(MANIFEST_FILE))?;
    let median = manifest
        .metadata
        .get(MEDIAN_KEY)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Validation(format!("manifest metadata lacks {MEDIAN_KEY}")))?;
    let labels_path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let rows = labels_from_csv(&text)?;
    let table = read_embedding_table(resolve(dir, &manifest.paths.embeddings))?;
    LabeledDataset::from_parts(manifest, &rows, &table, median)
}

/// Resolves a manifest path relative to the manifest's directory.
pub fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

/// Classifier head stored alongside a baseline checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// 2 x d, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub method: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionCheckpoint {
    pub d_in: usize,
    pub d_out: usize,
    /// d_out x d_in, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub metadata: CheckpointMeta,
}

impl ProjectionCheckpoint {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_in != self.d_out {
            return Err(Error::Validation(format!(
                "projection must be square and non-empty, got {}x{}",
                self.d_out, self.d_in
            )));
        }
        if self.weights.len() != self.d_in * self.d_out || self.bias.len() != self.d_out {
            return Err(Error::Validation("checkpoint parameter lengths mismatch".into()));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("checkpoint holds non-finite parameters".into()));
        }
        if let Some(head) = &self.metadata.head {
            if head.weights.len() != 2 * self.d_out || head.bias.len() != 2 {
                return Err(Error::Validation("baseline head must be 2 x d".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.metadata).expect("metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.d_in as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_out as u32).to_le_bytes());
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic bytes, expected \"PRJ1\"".into()));
        }
        let d_in = cur.u32("d_in")? as usize;
        let d_out = cur.u32("d_out")? as usize;
        if d_in == 0 || d_out == 0 {
            return Err(Error::Format("checkpoint dimensions must be positive".into()));
        }
        if (d_in as u64 * d_out as u64 + d_out as u64) * 4 > cur.remaining() as u64 {
            return Err(Error::Format("truncated checkpoint parameters".into()));
        }
        let weights = (0..d_in * d_out).map(|_| cur.f32("W")).collect::<Result<Vec<_>>>()?;
        let bias = (0..d_out).map(|_| cur.f32("b")).collect::<Result<Vec<_>>>()?;
        let len = cur.u32("metadata length")? as usize;
        let raw = cur.take(len, "metadata")?;
        if cur.remaining() != 0 {
            return Err(Error::Format("trailing bytes after checkpoint metadata".into()));
        }
        let metadata: CheckpointMeta = serde_json::from_slice(raw)
            .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
        let ckpt = Self { d_in, d_out, weights, bias, metadata };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

pub fn write_checkpoint(ckpt: &ProjectionCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ProjectionCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ProjectionCheckpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> EmbeddingTable {
        EmbeddingTable::new(
            4,
            vec![
                EmbeddingRecord { game_id: 0, window_index: 0, vector: vec![0.1, -2.0, 3.5, 1e-7] },
                EmbeddingRecord { game_id: 3, window_index: 17, vector: vec![f32::MAX, 0.0, -0.0, 7.25] },
            ],
        )
        .unwrap()
    }

    fn manifest(games: &[(u32, Split)]) -> Manifest {
        Manifest {
            subcorpus_id: "t".into(),
            games: games
                .iter()
                .map(|&(game_id, split)| GameEntry { game_id, name: format!("g{game_id}"), split })
                .collect(),
            labeling: LabelingParams { epsilon: 0.1, min_samples_per_class: 1 },
            paths: ManifestPaths { embeddings: "e.emb".into(), traces: None },
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn embedding_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        write_embedding_table(&table(), &path).unwrap();
        let back = read_embedding_table(&path).unwrap();
        assert_eq!(back, table());
        for (a, b) in back.records().iter().zip(table().records()) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.vector), bits(&b.vector));
        }
    }

    #[test]
    fn embedding_csv_mirror_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_embedding_csv(&table(), &path).unwrap();
        assert_eq!(read_embedding_table(&path).unwrap(), table());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = table().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(EmbeddingTable::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn zero_dim_is_format_error() {
        let mut bytes = Vec::from(&EMBEDDING_MAGIC[..]);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        assert!(matches!(EmbeddingTable::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_records_are_format_error() {
        let records = (0..10)
            .map(|i| EmbeddingRecord { game_id: 0, window_index: i, vector: vec![i as f32; 3] })
            .collect();
        let bytes = EmbeddingTable::new(3, records).unwrap().to_bytes();
        let nine = &bytes[..bytes.len() - (8 + 12)];
        let err = EmbeddingTable::from_bytes(nine).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("truncated")), "{err}");
    }

    #[test]
    fn manifest_parses_three_games() {
        let m = manifest(&[(0, Split::Train), (1, Split::Valid), (2, Split::Test)]);
        let back = Manifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back.games.len(), 3);
        assert_eq!(back.split_of(2), Some(Split::Test));
    }

    #[test]
    fn manifest_rejects_unknown_split() {
        let text = manifest(&[(0, Split::Train)]).to_json().replace("\"train\"", "\"holdout\"");
        assert!(matches!(Manifest::from_json(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn manifest_rejects_duplicate_game() {
        let m = manifest(&[(0, Split::Train), (0, Split::Test)]);
        assert!(matches!(Manifest::from_json(&m.to_json()), Err(Error::Validation(_))));
    }

    #[test]
    fn labels_without_embedding_are_rejected() {
        let rows = vec![LabelRow {
            game_id: 5,
            window_index: 3,
            engagement_mean: 0.9,
            y_binary: 1,
            y_class: 11,
        }];
        let m = manifest(&[(5, Split::Train)]);
        let err = LabeledDataset::from_parts(m, &rows, &table(), 0.5).unwrap_err();
        assert!(matches!(err, Error::Validation(ref msg) if msg.contains("no embedding")));
    }

    fn sample(game_id: u32, window_index: u32, y: u8) -> LabeledSample {
        LabeledSample {
            game_id,
            window_index,
            engagement_mean: if y == 1 { 0.8 } else { 0.2 },
            y_binary: y,
            y_class: 2 * game_id + y as u32,
            vector: vec![window_index as f64, 1.0],
        }
    }

    #[test]
    fn dataset_checks_relabelling_and_epsilon_rule() {
        let m = manifest(&[(0, Split::Train), (1, Split::Test)]);
        let good = vec![sample(0, 0, 0), sample(0, 1, 1), sample(1, 0, 0), sample(1, 1, 1)];
        assert!(LabeledDataset::new(m.clone(), good.clone(), 0.5).is_ok());

        let mut bad_class = good.clone();
        bad_class[2].y_class = 0;
        assert!(LabeledDataset::new(m.clone(), bad_class, 0.5).is_err());

        let mut dead_zone = good.clone();
        dead_zone[0].engagement_mean = 0.45;
        assert!(LabeledDataset::new(m.clone(), dead_zone, 0.5).is_err());

        let mut thin = m.clone();
        thin.labeling.min_samples_per_class = 2;
        assert!(LabeledDataset::new(thin, good, 0.5).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let m = manifest(&[(0, Split::Train), (1, Split::Test)]);
        let ds = LabeledDataset::new(
            m,
            vec![sample(0, 0, 0), sample(0, 1, 1), sample(1, 0, 0), sample(1, 1, 1)],
            0.5,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_labeled_dataset(&ds, dir.path()).unwrap();
        let back = read_labeled_dataset(dir.path()).unwrap();
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(back.subcorpus_median(), 0.5);
    }

    #[test]
    fn permuted_labels_keep_invariants() {
        let m = manifest(&[(0, Split::Train), (1, Split::Test)]);
        let ds = LabeledDataset::new(
            m,
            vec![sample(0, 0, 0), sample(0, 1, 1), sample(1, 0, 0), sample(1, 1, 1)],
            0.5,
        )
        .unwrap();
        let p = ds.with_permuted_labels(3);
        let p = LabeledDataset::new(p.manifest().clone(), p.samples().to_vec(), 0.5).unwrap();
        for split in Split::ALL {
            let mut a: Vec<_> = ds.indices_in(split).iter().map(|&i| ds.samples()[i].vector[0] as i64).collect();
            let mut b: Vec<_> = p.indices_in(split).iter().map(|&i| p.samples()[i].vector[0] as i64).collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let ckpt = ProjectionCheckpoint {
            d_in: 2,
            d_out: 2,
            weights: vec![1.0, 2.0, 3.0, 4.0],
            bias: vec![0.5, -0.5],
            metadata: CheckpointMeta {
                seed: 9,
                method: "pn".into(),
                config_hash: "abc".into(),
                head: None,
            },
        };
        let bytes = ckpt.to_bytes();
        assert_eq!(ProjectionCheckpoint::from_bytes(&bytes).unwrap(), ckpt);
        assert!(matches!(
            ProjectionCheckpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ProjectionCheckpoint::from_bytes(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn embedding_bytes_round_trip(
            dim in 1usize..6,
            rows in prop::collection::vec((0u32..50, prop::collection::vec(-1e6f32..1e6, 6)), 0..20),
        ) {
            let records: Vec<_> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (g, v))| EmbeddingRecord { game_id: g, window_index: i as u32, vector: v[..dim].to_vec() })
                .collect();
            let t = EmbeddingTable::new(dim, records).unwrap();
            prop_assert_eq!(EmbeddingTable::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }
}
