//! Synthetic multidomain datasets.
//!
//! Every domain `n` owns a direction `u_n` orthogonal to one shared axis `w`.
//! Its two class centres `cos(t) u_n +/- sin(t) w` lie on the unit sphere at
//! distance `gap = 2 sin(t)`. Normally the `+w` centre is the high class; the
//! first `ceil(flip_fraction * n_domains)` domains swap that assignment, so
//! with half the domains flipped no single game-agnostic rule beats chance
//! while each domain on its own stays trivially separable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotation::DatasetStats;
use crate::data::{
    labels_to_csv, write_embedding_table, write_manifest, EmbeddingRecord, EmbeddingTable, GameEntry,
    LabelRow, LabeledDataset, LabelingParams, Manifest, ManifestPaths, Split, EMBEDDINGS_FILE, LABELS_FILE,
    MANIFEST_FILE, MEDIAN_KEY,
};
use crate::error::{Error, Result};
use crate::seed;
use crate::vecops::{axpy, dot, norm};

/// Engagement values written for generated samples around a median of 0.5.
const HIGH_ENGAGEMENT: f64 = 0.75;
const LOW_ENGAGEMENT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_domains: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    pub inter_class_gap: f64,
    pub flip_fraction: f64,
    pub split_counts: (usize, usize, usize),
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (tr, va, te) = self.split_counts;
        if tr == 0 || va == 0 || te == 0 || tr + va + te > self.n_domains {
            return Err(Error::Validation(format!(
                "split counts {tr}/{va}/{te} must be positive and sum to at most {} domains",
                self.n_domains
            )));
        }
        if self.samples_per_class < 10 {
            return Err(Error::Validation("samples_per_class must be at least 10".into()));
        }
        if self.dim < 2 {
            return Err(Error::Validation("dim must be at least 2".into()));
        }
        if !(self.cluster_spread > 0.0) {
            return Err(Error::Validation("cluster_spread must be positive".into()));
        }
        if !(self.inter_class_gap > 0.0 && self.inter_class_gap <= 2.0) {
            return Err(Error::Validation("inter_class_gap must lie in (0, 2] for unit-sphere centres".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return Err(Error::Validation("flip_fraction must lie in [0, 1]".into()));
        }
        if u32::try_from(self.n_domains).is_err() {
            return Err(Error::Validation("too many domains".into()));
        }
        Ok(())
    }

    pub fn flipped_domains(&self) -> usize {
        (self.flip_fraction * self.n_domains as f64 - 1e-9).ceil().max(0.0) as usize
    }
}

/// Generated files plus the ground truth used to build them.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub table: EmbeddingTable,
    pub labels: Vec<LabelRow>,
    pub manifest: Manifest,
    /// Per game: (centre of the low class, centre of the high class).
    pub centers: BTreeMap<u32, (Vec<f64>, Vec<f64>)>,
    /// Shared axis along which unflipped domains separate high from low.
    pub axis: Vec<f64>,
}

impl SynthOutput {
    pub fn dataset(&self) -> Result<LabeledDataset> {
        LabeledDataset::from_parts(self.manifest.clone(), &self.labels, &self.table, 0.5)
    }

    /// Writes `manifest.json`, `labels.csv` and `embeddings.emb` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_manifest(&self.manifest, dir.join(MANIFEST_FILE))?;
        let labels = dir.join(LABELS_FILE);
        fs::write(&labels, labels_to_csv(&self.labels)).map_err(|e| Error::io(&labels, e))?;
        write_embedding_table(&self.table, dir.join(EMBEDDINGS_FILE))
    }
}

fn gaussian_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Domain ids in split order: flipped and unflipped ids interleaved, so that
/// consecutive blocks (the splits) mix both kinds evenly.
fn split_order(n_domains: usize, flipped: usize) -> Vec<u32> {
    let (mut a, mut b) = ((0..flipped as u32).peekable(), (flipped as u32..n_domains as u32).peekable());
    let mut out = Vec::with_capacity(n_domains);
    while a.peek().is_some() || b.peek().is_some() {
        out.extend(a.next());
        out.extend(b.next());
    }
    out
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = seed::rng(config.seed, &[seed::tag("synth")]);
    let noise = Normal::new(0.0, config.cluster_spread).expect("positive spread");
    let axis = gaussian_unit(&mut rng, config.dim);
    let half_angle = (config.inter_class_gap / 2.0).asin();
    let (along, across) = (half_angle.sin(), half_angle.cos());
    let flipped = config.flipped_domains();

    let (tr, va, te) = config.split_counts;
    let order = split_order(config.n_domains, flipped);
    let mut games = Vec::new();
    for (pos, &game_id) in order.iter().take(tr + va + te).enumerate() {
        let split = if pos < tr {
            Split::Train
        } else if pos < tr + va {
            Split::Valid
        } else {
            Split::Test
        };
        games.push(GameEntry { game_id, name: format!("synthetic-{game_id}"), split });
    }
    games.sort_by_key(|g| g.game_id);

    let mut centers = BTreeMap::new();
    let mut records = Vec::new();
    let mut labels = Vec::new();
    for game in 0..config.n_domains as u32 {
        // Direction drawn for every domain so a game's geometry does not
        // depend on which games are kept.
        let mut u = gaussian_unit(&mut rng, config.dim);
        let proj = dot(&u, &axis);
        axpy(-proj, &axis, &mut u);
        let n = norm(&u);
        u.iter_mut().for_each(|x| *x /= n);
        let mut plus: Vec<f64> = u.iter().map(|x| across * x).collect();
        let mut minus = plus.clone();
        axpy(along, &axis, &mut plus);
        axpy(-along, &axis, &mut minus);
        let (low, high) = if (game as usize) < flipped { (plus, minus) } else { (minus, plus) };

        let mut window = 0u32;
        let mut samples = Vec::new();
        for _ in 0..config.samples_per_class {
            for (y, center) in [(0u8, &low), (1u8, &high)] {
                let v: Vec<f32> = center.iter().map(|c| (c + noise.sample(&mut rng)) as f32).collect();
                samples.push((window, y, v));
                window += 1;
            }
        }
        if games.iter().any(|g| g.game_id == game) {
            for (window_index, y, vector) in samples {
                records.push(EmbeddingRecord { game_id: game, window_index, vector });
                labels.push(LabelRow {
                    game_id: game,
                    window_index,
                    engagement_mean: if y == 1 { HIGH_ENGAGEMENT } else { LOW_ENGAGEMENT },
                    y_binary: y,
                    y_class: 2 * game + y as u32,
                });
            }
            centers.insert(game, (low, high));
        }
    }

    let mut manifest = Manifest {
        subcorpus_id: format!("synthetic-{}", config.seed),
        games,
        labeling: LabelingParams { epsilon: 0.1, min_samples_per_class: 10 },
        paths: ManifestPaths { embeddings: EMBEDDINGS_FILE.to_string(), traces: None },
        metadata: BTreeMap::new(),
    };
    let table = EmbeddingTable::new(config.dim, records)?;
    let dataset = LabeledDataset::from_parts(manifest.clone(), &labels, &table, 0.5)?;
    let stats = DatasetStats::of(&dataset);
    manifest.metadata.insert(MEDIAN_KEY.into(), serde_json::json!(0.5));
    manifest.metadata.insert("generator".into(), serde_json::to_value(config).expect("config serialises"));
    manifest.metadata.insert("ground_truth".into(), serde_json::to_value(&stats).expect("stats serialise"));
    manifest.metadata.insert(
        "flipped_games".into(),
        serde_json::json!((0..flipped as u32).filter(|g| centers.contains_key(g)).collect::<Vec<_>>()),
    );
    Ok(SynthOutput { table, labels, manifest, centers, axis })
}
