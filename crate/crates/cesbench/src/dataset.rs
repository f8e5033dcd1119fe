//! CES taxonomy, dataset manifests, and deterministic data partitioning.
//!
//! A manifest is the unit of input for every pipeline: an ordered list of
//! image records with optional ground-truth labels drawn from the fixed
//! six-class taxonomy. Splits and support/query partitions are pure
//! functions of `(manifest, parameters, seed)`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The six cultural ecosystem service classes.
///
/// Variant order is the taxonomy order used everywhere: prompt rendering,
/// confusion matrices, tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CesClass {
    CulturalReligious,
    FaunaFlora,
    Gastronomy,
    LandscapeNature,
    Sports,
    UrbanRural,
}

impl CesClass {
    pub const ALL: [CesClass; 6] = [
        CesClass::CulturalReligious,
        CesClass::FaunaFlora,
        CesClass::Gastronomy,
        CesClass::LandscapeNature,
        CesClass::Sports,
        CesClass::UrbanRural,
    ];

    /// Canonical display name, hyphenated.
    pub fn canonical_name(&self) -> &'static str {
        match self {
            CesClass::CulturalReligious => "Cultural-Religious",
            CesClass::FaunaFlora => "Fauna-Flora",
            CesClass::Gastronomy => "Gastronomy",
            CesClass::LandscapeNature => "Landscape-Nature",
            CesClass::Sports => "Sports",
            CesClass::UrbanRural => "Urban-Rural",
        }
    }

    /// Accepted alternate spellings beyond separator/case variation.
    pub fn aliases(&self) -> &'static [&'static str] {
        match self {
            CesClass::CulturalReligious => &["Cultural and Religious", "Culture-Religious"],
            CesClass::FaunaFlora => &["Fauna and Flora", "Fauna & Flora"],
            CesClass::Gastronomy => &["Gastronomic"],
            CesClass::LandscapeNature => &["Landscape and Nature", "Nature-Landscape"],
            CesClass::Sports => &["Sport"],
            CesClass::UrbanRural => &["Urban and Rural", "Rural-Urban"],
        }
    }

    /// Position in taxonomy order.
    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap()
    }

    /// Resolve a label string to a class: canonical name or alias,
    /// case-insensitive, with `-`/`_`/space treated as the same separator.
    pub fn parse(label: &str) -> Option<CesClass> {
        let wanted = normalize_label(label);
        if wanted.is_empty() {
            return None;
        }
        for class in Self::ALL {
            if normalize_label(class.canonical_name()) == wanted {
                return Some(class);
            }
            for alias in class.aliases() {
                if normalize_label(alias) == wanted {
                    return Some(class);
                }
            }
        }
        None
    }
}

impl fmt::Display for CesClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl Serialize for CesClass {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.canonical_name())
    }
}

impl<'de> Deserialize<'de> for CesClass {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        CesClass::parse(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown CES class `{raw}`")))
    }
}

impl FromStr for CesClass {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CesClass::parse(s).ok_or_else(|| DatasetError::UnknownLabel {
            value: s.to_string(),
            line: 0,
        })
    }
}

/// Lowercase and collapse `-`, `_`, and whitespace runs to single spaces.
pub(crate) fn normalize_label(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for ch in s.trim().chars() {
        if ch == '-' || ch == '_' || ch.is_whitespace() || ch == '&' {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for low in ch.to_lowercase() {
                out.push(low);
            }
        }
    }
    out
}

/// One image in a collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Local path, URL, or `mock://` reference.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<CesClass>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// An ordered image collection with the fixed taxonomy attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub version: String,
    pub taxonomy: Vec<CesClass>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, version: impl Into<String>, records: Vec<ImageRecord>) -> Self {
        Self {
            name: name.into(),
            version: version.into(),
            taxonomy: CesClass::ALL.to_vec(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Labeled record count per class, taxonomy order.
    pub fn class_counts(&self) -> BTreeMap<CesClass, usize> {
        let mut counts: BTreeMap<CesClass, usize> =
            self.taxonomy.iter().map(|c| (*c, 0)).collect();
        for record in &self.records {
            if let Some(label) = record.label {
                *counts.entry(label).or_insert(0) += 1;
            }
        }
        counts
    }

    /// True when every record is labeled and all classes have equal counts.
    pub fn balanced(&self) -> bool {
        if self.records.iter().any(|r| r.label.is_none()) {
            return false;
        }
        let counts = self.class_counts();
        let mut values = counts.values();
        match values.next() {
            Some(first) => values.all(|v| v == first),
            None => true,
        }
    }

    pub fn labeled_records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.label.is_some())
    }
}

/// Train/test split parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(test_fraction: f64, seed: u64, stratified: bool) -> Result<Self, DatasetError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(DatasetError::InvalidFraction(test_fraction));
        }
        Ok(Self {
            test_fraction,
            seed,
            stratified,
        })
    }
}

impl Default for SplitSpec {
    /// 80/20 stratified at seed 42.
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 42,
            stratified: true,
        }
    }
}

/// Few-shot support/query partition of a labeled manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportQueryPartition {
    pub shots: u32,
    pub seed: u64,
    pub support: BTreeMap<CesClass, Vec<ImageRecord>>,
    pub query: Vec<ImageRecord>,
}

/// Manifest file encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestFormat {
    Csv,
    JsonLines,
}

impl FromStr for ManifestFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ManifestFormat::Csv),
            "jsonl" | "json-lines" | "jsonlines" => Ok(ManifestFormat::JsonLines),
            other => Err(DatasetError::MalformedRow {
                line: 0,
                reason: format!("unknown manifest format `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("duplicate record id `{id}`")]
    DuplicateId { id: String },
    #[error("unknown label `{value}` at line {line}")]
    UnknownLabel { value: String, line: u64 },
    #[error("record `{id}` is unlabeled but a stratified operation was requested")]
    UnlabeledRecord { id: String },
    #[error("class {class} has {have} labeled records, need more than {need}")]
    InsufficientClassSize {
        class: CesClass,
        have: usize,
        need: usize,
    },
    #[error("test fraction {0} is not strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("shots {0} outside the supported range 1..=10")]
    ShotsOutOfRange(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
struct JsonlRow {
    id: String,
    source: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// Read a manifest file. Row order is preserved; unknown labels are errors,
/// never silently dropped.
pub fn ingest_manifest(path: &Path, format: ManifestFormat) -> Result<DatasetManifest, DatasetError> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".to_string());
    ingest_manifest_named(path, format, &name, "1.0")
}

pub fn ingest_manifest_named(
    path: &Path,
    format: ManifestFormat,
    name: &str,
    version: &str,
) -> Result<DatasetManifest, DatasetError> {
    let records = match format {
        ManifestFormat::Csv => read_csv_records(path)?,
        ManifestFormat::JsonLines => read_jsonl_records(path)?,
    };
    if records.is_empty() {
        return Err(DatasetError::MalformedRow {
            line: 0,
            reason: "no records".to_string(),
        });
    }
    let mut seen = HashSet::new();
    for record in &records {
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId {
                id: record.id.clone(),
            });
        }
    }
    Ok(DatasetManifest::new(name, version, records))
}

fn read_csv_records(path: &Path) -> Result<Vec<ImageRecord>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (id_col, source_col) = match (find("id"), find("source")) {
        (Some(i), Some(s)) => (i, s),
        _ => {
            return Err(DatasetError::MalformedRow {
                line: 1,
                reason: "header must contain `id` and `source` columns".to_string(),
            })
        }
    };
    let label_col = find("label");

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DatasetError::MalformedRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let id = row
            .get(id_col)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| DatasetError::MalformedRow {
                line,
                reason: "missing id".to_string(),
            })?
            .to_string();
        let source = row
            .get(source_col)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| DatasetError::MalformedRow {
                line,
                reason: "missing source".to_string(),
            })?
            .to_string();
        let label = match label_col.and_then(|c| row.get(c)).map(str::trim) {
            None | Some("") => None,
            Some(raw) => Some(CesClass::parse(raw).ok_or_else(|| DatasetError::UnknownLabel {
                value: raw.to_string(),
                line,
            })?),
        };
        let mut metadata = BTreeMap::new();
        for (col, header) in headers.iter().enumerate() {
            if col == id_col || col == source_col || Some(col) == label_col {
                continue;
            }
            if let Some(value) = row.get(col).map(str::trim).filter(|s| !s.is_empty()) {
                metadata.insert(header.trim().to_string(), value.to_string());
            }
        }
        records.push(ImageRecord {
            id,
            source,
            label,
            metadata,
        });
    }
    Ok(records)
}

fn read_jsonl_records(path: &Path) -> Result<Vec<ImageRecord>, DatasetError> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| DatasetError::MalformedRow {
            line: line_no,
            reason: e.to_string(),
        })?;
        if row.id.trim().is_empty() || row.source.trim().is_empty() {
            return Err(DatasetError::MalformedRow {
                line: line_no,
                reason: "id and source must be non-empty".to_string(),
            });
        }
        let label = match row.label.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(raw) => Some(CesClass::parse(raw).ok_or_else(|| DatasetError::UnknownLabel {
                value: raw.to_string(),
                line: line_no,
            })?),
        };
        records.push(ImageRecord {
            id: row.id,
            source: row.source,
            label,
            metadata: row.metadata,
        });
    }
    Ok(records)
}

/// Write a manifest's records back to disk in the given format.
///
/// `ingest_manifest` of the written file yields identical records.
pub fn write_manifest(
    manifest: &DatasetManifest,
    path: &Path,
    format: ManifestFormat,
) -> Result<(), DatasetError> {
    match format {
        ManifestFormat::Csv => {
            let mut extra_keys: Vec<String> = Vec::new();
            for record in &manifest.records {
                for key in record.metadata.keys() {
                    if !extra_keys.contains(key) {
                        extra_keys.push(key.clone());
                    }
                }
            }
            let mut writer = csv::Writer::from_path(path)?;
            let mut header = vec!["id".to_string(), "source".to_string(), "label".to_string()];
            header.extend(extra_keys.iter().cloned());
            writer.write_record(&header)?;
            for record in &manifest.records {
                let mut row = vec![
                    record.id.clone(),
                    record.source.clone(),
                    record
                        .label
                        .map(|c| c.canonical_name().to_string())
                        .unwrap_or_default(),
                ];
                for key in &extra_keys {
                    row.push(record.metadata.get(key).cloned().unwrap_or_default());
                }
                writer.write_record(&row)?;
            }
            writer.flush()?;
        }
        ManifestFormat::JsonLines => {
            let mut file = fs::File::create(path)?;
            for record in &manifest.records {
                let line = serde_json::to_string(record).expect("record serializes");
                writeln!(file, "{line}")?;
            }
        }
    }
    Ok(())
}

impl From<csv::Error> for DatasetError {
    fn from(e: csv::Error) -> Self {
        DatasetError::MalformedRow {
            line: 0,
            reason: e.to_string(),
        }
    }
}

fn round_count(fraction: f64, total: usize) -> usize {
    (fraction * total as f64).round() as usize
}

/// Deterministic train/test split.
///
/// Stratified mode shuffles each class's members independently from one
/// seeded stream (classes visited in taxonomy order) and takes
/// `round(test_fraction * per_class_count)` test records per class.
pub fn stratified_split(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>), DatasetError> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(spec.test_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    if spec.stratified {
        if let Some(unlabeled) = manifest.records.iter().find(|r| r.label.is_none()) {
            return Err(DatasetError::UnlabeledRecord {
                id: unlabeled.id.clone(),
            });
        }
        for class in &manifest.taxonomy {
            let mut members: Vec<ImageRecord> = manifest
                .records
                .iter()
                .filter(|r| r.label == Some(*class))
                .cloned()
                .collect();
            members.shuffle(&mut rng);
            let n_test = round_count(spec.test_fraction, members.len());
            let rest = members.split_off(n_test);
            test.extend(members);
            train.extend(rest);
        }
    } else {
        let mut all: Vec<ImageRecord> = manifest.records.clone();
        all.shuffle(&mut rng);
        let n_test = round_count(spec.test_fraction, all.len());
        let rest = all.split_off(n_test);
        test.extend(all);
        train.extend(rest);
    }
    Ok((train, test))
}

/// Sample a support set of `shots` records per class, uniformly without
/// replacement; the query set is every other labeled record in manifest
/// order.
pub fn sample_support_set(
    manifest: &DatasetManifest,
    shots: u32,
    seed: u64,
) -> Result<SupportQueryPartition, DatasetError> {
    if !(1..=10).contains(&shots) {
        return Err(DatasetError::ShotsOutOfRange(shots));
    }
    sample_support_unchecked(manifest, shots, seed)
}

/// Same as [`sample_support_set`] without the 1..=10 gate, for explicit
/// wide-range overrides.
pub fn sample_support_unchecked(
    manifest: &DatasetManifest,
    shots: u32,
    seed: u64,
) -> Result<SupportQueryPartition, DatasetError> {
    if shots == 0 {
        return Err(DatasetError::ShotsOutOfRange(shots));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support: BTreeMap<CesClass, Vec<ImageRecord>> = BTreeMap::new();
    let mut support_ids: HashSet<String> = HashSet::new();
    for class in &manifest.taxonomy {
        let members: Vec<&ImageRecord> = manifest
            .records
            .iter()
            .filter(|r| r.label == Some(*class))
            .collect();
        if members.len() <= shots as usize {
            return Err(DatasetError::InsufficientClassSize {
                class: *class,
                have: members.len(),
                need: shots as usize,
            });
        }
        let chosen: Vec<ImageRecord> = members
            .choose_multiple(&mut rng, shots as usize)
            .map(|r| (*r).clone())
            .collect();
        for record in &chosen {
            support_ids.insert(record.id.clone());
        }
        support.insert(*class, chosen);
    }
    let query: Vec<ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| r.label.is_some() && !support_ids.contains(&r.id))
        .cloned()
        .collect();
    Ok(SupportQueryPartition {
        shots,
        seed,
        support,
        query,
    })
}
