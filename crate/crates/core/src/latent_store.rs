//! Embedding datasets: domain types, the `TLT1` binary and JSONL file
//! formats, and a seeded Gaussian-mixture generator.
//!
//! Values are stored as `f32` on disk and held as `f64` in memory. Loading
//! widens exactly, so a binary save/load cycle is a bitwise identity for
//! any set whose coordinates are `f32`-representable (everything loaded from
//! disk or produced by [`generate_synthetic`]).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"TLT1";

/// A latent vector with finite coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("embedding must have at least one coordinate"));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite coordinate at index {j}")));
        }
        Ok(Embedding(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Embedding(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub embedding: Embedding,
    /// Class index; equal to the owning set's `num_classes` when unlabeled.
    pub label: u32,
}

/// The empirical reference measure: an ordered list of embeddings of a
/// single dimensionality, each carrying a class label or the unlabeled
/// sentinel (`num_classes`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    num_classes: usize,
    items: Vec<LabeledEmbedding>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, num_classes: usize, items: Vec<LabeledEmbedding>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("dimension must be at least 1"));
        }
        if num_classes == 0 {
            return Err(Error::validation("class count must be at least 1"));
        }
        for (i, item) in items.iter().enumerate() {
            if item.embedding.dim() != dim {
                return Err(Error::Corruption {
                    record: i,
                    reason: format!("vector length {} under declared dimension {dim}", item.embedding.dim()),
                });
            }
            if item.label as usize > num_classes {
                return Err(Error::validation(format!(
                    "record {i}: label {} out of range for {num_classes} classes",
                    item.label
                )));
            }
        }
        Ok(EmbeddingSet {
            dim,
            num_classes,
            items,
        })
    }

    /// Builds a set from `(label, vector)` pairs.
    pub fn from_rows<I>(dim: usize, num_classes: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, Vec<f64>)>,
    {
        let items = rows
            .into_iter()
            .map(|(label, v)| {
                Ok(LabeledEmbedding {
                    embedding: Embedding::new(v)?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dim, num_classes, items)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[LabeledEmbedding] {
        &self.items
    }

    pub fn unlabeled(&self) -> u32 {
        self.num_classes as u32
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        (self.items[i].label as usize) < self.num_classes
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.items.iter().map(|it| it.label)
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.items.iter().map(|it| it.embedding.as_slice())
    }

    /// Number of items carrying each valid label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for label in self.labels() {
            if let Some(c) = counts.get_mut(label as usize) {
                *c += 1;
            }
        }
        counts
    }

    pub(crate) fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.items.is_empty() {
            Err(Error::validation(format!("{what} is empty")))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Binary,
    Jsonl,
}

impl Format {
    /// `.jsonl`/`.json` → JSONL, anything else → binary.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Binary,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "bin" | "tlt" => Ok(Format::Binary),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::validation(format!("unknown format `{other}` (expected binary or jsonl)"))),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        Format::Binary => read_binary(reader),
        Format::Jsonl => read_jsonl(reader),
    }
}

pub fn save_dataset(set: &EmbeddingSet, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    check_storable(set)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match format {
        Format::Binary => write_binary(set, &mut writer),
        Format::Jsonl => write_jsonl(set, &mut writer),
    }
    .map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })?;
    writer.flush().map_err(|e| Error::io(path, e))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_binary<R: Read>(mut r: R) -> Result<EmbeddingSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file shorter than the 4-byte magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected TLT1")));
    }
    let header = |r: &mut R| read_u32(r).map_err(|_| Error::Format("truncated header".into()));
    let n = header(&mut r)? as usize;
    let d = header(&mut r)? as usize;
    let c = header(&mut r)? as usize;
    if d == 0 || c == 0 {
        return Err(Error::Format(format!("header declares d={d}, C={c}; both must be positive")));
    }

    let mut items = Vec::with_capacity(n.min(1 << 20));
    let mut record = vec![0u8; 4 * (d + 1)];
    for i in 0..n {
        r.read_exact(&mut record).map_err(|_| Error::Corruption {
            record: i,
            reason: format!("truncated record (expected {} bytes)", record.len()),
        })?;
        let label = u32::from_le_bytes(record[0..4].try_into().expect("4 bytes"));
        if label as usize >= c {
            return Err(Error::validation(format!("record {i}: label {label} >= class count {c}")));
        }
        let values = record[4..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect::<Vec<_>>();
        let embedding = Embedding::new(values).map_err(|e| Error::Corruption {
            record: i,
            reason: e.to_string(),
        })?;
        items.push(LabeledEmbedding { embedding, label });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Corruption {
            record: n,
            reason: "trailing bytes after the declared record count".into(),
        });
    }
    EmbeddingSet::new(d, c, items)
}

/// Files hold labelled f32 records only; reject anything that would not
/// load back.
fn check_storable(set: &EmbeddingSet) -> Result<()> {
    for (i, item) in set.items().iter().enumerate() {
        if item.label as usize >= set.num_classes() {
            return Err(Error::validation(format!("item {i} is unlabeled and cannot be stored")));
        }
        if item.embedding.as_slice().iter().any(|&v| !(v as f32).is_finite()) {
            return Err(Error::validation(format!("item {i} has a value outside the f32 range")));
        }
    }
    Ok(())
}

pub fn write_binary<W: Write>(set: &EmbeddingSet, w: &mut W) -> Result<()> {
    check_storable(set)?;
    w.write_all(MAGIC)?;
    for v in [set.len(), set.dim(), set.num_classes()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for item in set.items() {
        w.write_all(&item.label.to_le_bytes())?;
        for &v in item.embedding.as_slice() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlHeader {
    dim: usize,
    num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    label: u32,
    vec: Vec<f32>,
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<EmbeddingSet> {
    let mut header: Option<JsonlHeader> = None;
    let mut rows: Vec<JsonlRecord> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(trimmed)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if rows.is_empty() && header.is_none() && value.get("dim").is_some() {
            header = Some(
                serde_json::from_value(value)
                    .map_err(|e| Error::Format(format!("line {}: bad header: {e}", lineno + 1)))?,
            );
            continue;
        }
        let rec: JsonlRecord = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        rows.push(rec);
    }

    let (dim, num_classes) = match header {
        Some(h) => (h.dim, h.num_classes),
        None => {
            let first = rows
                .first()
                .ok_or_else(|| Error::Format("no header and no records".into()))?;
            let max_label = rows.iter().map(|r| r.label).max().unwrap_or(0);
            (first.vec.len(), max_label as usize + 1)
        }
    };

    let mut items = Vec::with_capacity(rows.len());
    for (i, rec) in rows.into_iter().enumerate() {
        if rec.vec.len() != dim {
            return Err(Error::Corruption {
                record: i,
                reason: format!("vector length {} under declared dimension {dim}", rec.vec.len()),
            });
        }
        if rec.label as usize >= num_classes {
            return Err(Error::validation(format!(
                "record {i}: label {} >= class count {num_classes}",
                rec.label
            )));
        }
        let embedding = Embedding::new(rec.vec.into_iter().map(f64::from).collect())
            .map_err(|e| Error::Corruption { record: i, reason: e.to_string() })?;
        items.push(LabeledEmbedding { embedding, label: rec.label });
    }
    EmbeddingSet::new(dim, num_classes, items)
}

pub fn write_jsonl<W: Write>(set: &EmbeddingSet, w: &mut W) -> Result<()> {
    check_storable(set)?;
    let header = JsonlHeader {
        dim: set.dim(),
        num_classes: set.num_classes(),
    };
    serde_json::to_writer(&mut *w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    for item in set.items() {
        let rec = JsonlRecord {
            label: item.label,
            vec: item.embedding.as_slice().iter().map(|&v| v as f32).collect(),
        };
        serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parameters of a shifted, optionally corrupted Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShiftSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Items per class under a uniform prior; total is `per_class * num_classes`.
    pub per_class: usize,
    /// Norm of every class centroid.
    pub class_mean_scale: f64,
    pub within_class_std: f64,
    /// Class proportions; counts are apportioned from the same total.
    pub prior_shift: Option<Vec<f64>>,
    /// Norm of a common offset added to every item.
    pub mean_shift_magnitude: f64,
    /// Fraction of items whose label is resampled from the other classes.
    pub corrupt_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        SyntheticShiftSpec {
            num_classes: 5,
            dim: 16,
            per_class: 50,
            class_mean_scale: 3.0,
            within_class_std: 1.0,
            prior_shift: None,
            mean_shift_magnitude: 0.0,
            corrupt_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation(format!(
                "synthetic data needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.dim == 0 {
            return Err(Error::validation("dimension must be at least 1"));
        }
        if self.per_class == 0 {
            return Err(Error::validation("per-class count must be at least 1"));
        }
        if !(self.class_mean_scale > 0.0 && self.class_mean_scale.is_finite()) {
            return Err(Error::validation("class_mean_scale must be positive"));
        }
        if !(self.within_class_std > 0.0 && self.within_class_std.is_finite()) {
            return Err(Error::validation("within_class_std must be positive"));
        }
        if !(self.mean_shift_magnitude >= 0.0 && self.mean_shift_magnitude.is_finite()) {
            return Err(Error::validation("mean_shift_magnitude must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return Err(Error::validation("corrupt_fraction must lie in [0, 1]"));
        }
        if let Some(prior) = &self.prior_shift {
            if prior.len() != self.num_classes {
                return Err(Error::validation(format!(
                    "prior_shift has {} entries for {} classes",
                    prior.len(),
                    self.num_classes
                )));
            }
            if prior.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::validation("prior_shift entries must be nonnegative"));
            }
            let total: f64 = prior.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::validation(format!("prior_shift sums to {total}, expected 1")));
            }
        }
        Ok(())
    }

    /// Items generated for each class, before label corruption.
    ///
    /// With a prior, counts are apportioned from `per_class * num_classes`
    /// by largest remainder (ties to the lower class index), so they always
    /// sum to the uniform total.
    pub fn class_counts(&self) -> Vec<usize> {
        let total = self.per_class * self.num_classes;
        match &self.prior_shift {
            None => vec![self.per_class; self.num_classes],
            Some(prior) => {
                let quotas: Vec<f64> = prior.iter().map(|p| p * total as f64).collect();
                let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
                let assigned: usize = counts.iter().sum();
                let mut order: Vec<usize> = (0..counts.len()).collect();
                order.sort_by(|&a, &b| {
                    let ra = quotas[a] - quotas[a].floor();
                    let rb = quotas[b] - quotas[b].floor();
                    rb.total_cmp(&ra).then(a.cmp(&b))
                });
                for &c in order.iter().take(total.saturating_sub(assigned)) {
                    counts[c] += 1;
                }
                counts
            }
        }
    }
}

fn random_direction(r: &mut rng::Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a labeled Gaussian mixture from `spec`.
///
/// Items are emitted class by class. Each class centroid is a uniformly
/// random direction scaled to `class_mean_scale`; a common offset of norm
/// `mean_shift_magnitude` is added to every item. Exactly
/// `round(corrupt_fraction * n)` items, chosen uniformly, have their label
/// replaced by a uniformly drawn different class. Coordinates are rounded
/// to `f32`.
pub fn generate_synthetic(spec: &SyntheticShiftSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let dim = spec.dim;
    let centroids: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            random_direction(&mut r, dim)
                .into_iter()
                .map(|x| x * spec.class_mean_scale)
                .collect()
        })
        .collect();
    let offset: Vec<f64> = random_direction(&mut r, dim)
        .into_iter()
        .map(|x| x * spec.mean_shift_magnitude)
        .collect();

    let mut rows: Vec<(u32, Vec<f64>)> = Vec::new();
    for (class, &count) in spec.class_counts().iter().enumerate() {
        for _ in 0..count {
            let v = (0..dim)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut r);
                    (centroids[class][j] + offset[j] + spec.within_class_std * noise) as f32 as f64
                })
                .collect();
            rows.push((class as u32, v));
        }
    }

    let n_corrupt = (spec.corrupt_fraction * rows.len() as f64).round() as usize;
    let chosen = rand::seq::index::sample(&mut r, rows.len(), n_corrupt.min(rows.len()));
    let c = spec.num_classes as u32;
    for i in chosen.iter() {
        let original = rows[i].0;
        let offset = r.random_range(1..c);
        rows[i].0 = (original + offset) % c;
    }

    EmbeddingSet::from_rows(dim, spec.num_classes, rows)
}
