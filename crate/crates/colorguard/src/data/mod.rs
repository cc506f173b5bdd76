//! Dataset manifests and the 1:3 natural-to-colorized pairing protocol.
//!
//! A manifest is an ordered list of labeled image records grouped so that each
//! natural image travels with exactly three colorized derivatives (one per
//! colorization method). Manifests are stored as JSON-lines files: one header
//! object followed by one object per record.

mod colorize;
mod synth;

pub use colorize::{pseudo_colorize, pseudo_colorize_rgb, ColorizerMethod, PALETTE_BINS};
pub use synth::{generate_corpus_with_methods, generate_synthetic_corpus, synthesize_natural_image};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seeds;

/// Number of colorized derivatives paired with each natural image.
pub const COLORIZED_PER_NATURAL: usize = 3;

/// Colorizer id recorded on natural (non-colorized) samples.
pub const NO_COLORIZER: &str = "none";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("natural image '{stem}' has no derivative in colorizer dir '{colorizer_id}'")]
    MissingDerivative { stem: String, colorizer_id: String },
    #[error("ambiguous pairing: stem '{stem}' matches more than one file in {dir}")]
    DuplicateStem { stem: String, dir: PathBuf },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("unsupported channel count: expected an 8-bit RGB image, got {0}")]
    UnsupportedChannelCount(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image failure at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed manifest line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Whether a sample's colors come from a camera or from a colorization algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Natural,
    Colorized,
}

impl Label {
    /// Class index used everywhere downstream: natural=0, colorized=1.
    pub fn class_index(self) -> u8 {
        match self {
            Label::Natural => 0,
            Label::Colorized => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Natural => write!(f, "natural"),
            Label::Colorized => write!(f, "colorized"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub label: Label,
    pub colorizer_id: String,
    pub group_id: String,
    pub split: Split,
}

/// Header line of the JSON-lines manifest format.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    manifest_name: String,
    seed: u64,
    ratio_free: bool,
}

/// A named, seeded collection of [`SampleRecord`]s.
///
/// Unless `ratio_free` is set, every group holds exactly one natural record and
/// three colorized records with distinct colorizer ids, and all records of a
/// group share the same split. `ratio_free` exists for external test corpora
/// that do not follow the 1:3 protocol.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub ratio_free: bool,
    pub records: Vec<SampleRecord>,
    /// Directory that relative record paths resolve against (the manifest
    /// file's parent when loaded from disk). Not serialized.
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

// base_dir is resolution context, not identity: a manifest loaded back from
// disk compares equal to the one that produced it.
impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.seed == other.seed
            && self.ratio_free == other.ratio_free
            && self.records == other.records
    }
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, seed: u64, ratio_free: bool, records: Vec<SampleRecord>) -> Self {
        DatasetManifest {
            name: name.into(),
            seed,
            ratio_free,
            records,
            base_dir: None,
        }
    }

    pub fn with_base_dir(mut self, base: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(base.into());
        self
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    /// Absolute-or-as-given path for a record; relative paths resolve against
    /// the manifest's base directory.
    pub fn resolve_path(&self, record: &SampleRecord) -> PathBuf {
        match (&self.base_dir, record.image_path.is_relative()) {
            (Some(base), true) => base.join(&record.image_path),
            _ => record.image_path.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// (natural, colorized) record counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let natural = self
            .records
            .iter()
            .filter(|r| r.label == Label::Natural)
            .count();
        (natural, self.records.len() - natural)
    }

    /// Natural-to-colorized count ratio; `None` when no colorized records
    /// exist (the 0-group manifest reports no ratio rather than dividing by
    /// zero).
    pub fn ratio(&self) -> Option<f64> {
        let (natural, colorized) = self.class_counts();
        if colorized == 0 {
            None
        } else {
            Some(natural as f64 / colorized as f64)
        }
    }

    /// Distinct group ids in first-appearance order.
    pub fn group_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.group_id.clone()) {
                out.push(r.group_id.clone());
            }
        }
        out
    }

    pub fn group_count(&self) -> usize {
        self.group_ids().len()
    }

    /// Structural validation: label/colorizer consistency, split integrity per
    /// group, and (unless `ratio_free`) the 1-natural-to-3-colorized protocol.
    pub fn validate(&self) -> Result<(), DataError> {
        for r in &self.records {
            let is_none = r.colorizer_id == NO_COLORIZER;
            match r.label {
                Label::Natural if !is_none => {
                    return Err(DataError::InvalidManifest(format!(
                        "natural record '{}' carries colorizer_id '{}'",
                        r.image_path.display(),
                        r.colorizer_id
                    )));
                }
                Label::Colorized if is_none => {
                    return Err(DataError::InvalidManifest(format!(
                        "colorized record '{}' carries colorizer_id 'none'",
                        r.image_path.display()
                    )));
                }
                _ => {}
            }
        }

        let mut groups: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
        for r in &self.records {
            groups.entry(&r.group_id).or_default().push(r);
        }

        for (gid, members) in &groups {
            let split = members[0].split;
            if members.iter().any(|r| r.split != split) {
                return Err(DataError::InvalidManifest(format!(
                    "group '{gid}' straddles splits"
                )));
            }
            if self.ratio_free {
                continue;
            }
            let naturals = members.iter().filter(|r| r.label == Label::Natural).count();
            let colorized: Vec<&str> = members
                .iter()
                .filter(|r| r.label == Label::Colorized)
                .map(|r| r.colorizer_id.as_str())
                .collect();
            let distinct: std::collections::HashSet<&str> = colorized.iter().copied().collect();
            if naturals != 1 || colorized.len() != COLORIZED_PER_NATURAL || distinct.len() != COLORIZED_PER_NATURAL
            {
                return Err(DataError::InvalidManifest(format!(
                    "group '{gid}' violates the 1:{COLORIZED_PER_NATURAL} protocol \
                     ({naturals} natural, {} colorized, {} distinct colorizers)",
                    colorized.len(),
                    distinct.len()
                )));
            }
        }

        if !self.ratio_free {
            let (natural, colorized) = self.class_counts();
            if colorized != COLORIZED_PER_NATURAL * natural {
                return Err(DataError::InvalidManifest(format!(
                    "class counts {natural}:{colorized} break colorized == {COLORIZED_PER_NATURAL} x natural"
                )));
            }
        }
        Ok(())
    }

    /// Writes the manifest as JSON lines: header first, then one record per line.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
            }
        }
        let mut out = Vec::new();
        let header = ManifestHeader {
            manifest_name: self.name.clone(),
            seed: self.seed,
            ratio_free: self.ratio_free,
        };
        serde_json::to_writer(&mut out, &header).expect("header serialization");
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serialization");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
        f.write_all(&out).map_err(|e| DataError::io(path, e))?;
        Ok(())
    }

    /// Loads a manifest; the file's parent directory becomes the base for
    /// relative record paths.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
        let reader = BufReader::new(f);
        let mut lines = reader.lines().enumerate();

        let (_, header_line) = lines
            .next()
            .ok_or_else(|| DataError::InvalidManifest(format!("{}: empty file", path.display())))?;
        let header_line = header_line.map_err(|e| DataError::io(path, e))?;
        let header: ManifestHeader =
            serde_json::from_str(&header_line).map_err(|e| DataError::Parse { line: 1, source: e })?;

        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| DataError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord =
                serde_json::from_str(&line).map_err(|e| DataError::Parse { line: i + 1, source: e })?;
            records.push(record);
        }

        let base = path.parent().map(Path::to_path_buf);
        Ok(DatasetManifest {
            name: header.manifest_name,
            seed: header.seed,
            ratio_free: header.ratio_free,
            records,
            base_dir: base,
        })
    }
}

/// File extensions build_manifest and the corpus scanner accept.
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
        .unwrap_or(false)
}

/// Scans a directory into stem -> file path, rejecting ambiguous stems.
fn scan_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let mut map = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| DataError::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| DataError::InvalidArgument(format!("non-utf8 filename in {}", dir.display())))?
            .to_string();
        if map.insert(stem.clone(), path).is_some() {
            return Err(DataError::DuplicateStem {
                stem,
                dir: dir.to_path_buf(),
            });
        }
    }
    Ok(map)
}

/// Assembles a 1:3 manifest by joining one natural directory against one
/// directory per colorizer, pairing files by filename stem.
///
/// Every natural image must have exactly one same-stem derivative in each
/// colorizer directory. Extra files in colorizer directories are ignored.
/// Group order is shuffled deterministically by `seed`; all records start in
/// the train split.
pub fn build_manifest(
    natural_dir: &Path,
    colorized_dirs: &BTreeMap<String, PathBuf>,
    name: &str,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    let naturals = scan_stems(natural_dir)?;
    let mut colorized_maps: BTreeMap<&str, BTreeMap<String, PathBuf>> = BTreeMap::new();
    for (cid, dir) in colorized_dirs {
        colorized_maps.insert(cid.as_str(), scan_stems(dir)?);
    }

    let mut group_order: Vec<&String> = naturals.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0));
    group_order.shuffle(&mut rng);

    let mut records = Vec::with_capacity(naturals.len() * (1 + colorized_dirs.len()));
    for stem in group_order {
        records.push(SampleRecord {
            image_path: naturals[stem].clone(),
            label: Label::Natural,
            colorizer_id: NO_COLORIZER.to_string(),
            group_id: stem.clone(),
            split: Split::Train,
        });
        for (cid, stems) in &colorized_maps {
            let path = stems.get(stem).ok_or_else(|| DataError::MissingDerivative {
                stem: stem.clone(),
                colorizer_id: cid.to_string(),
            })?;
            records.push(SampleRecord {
                image_path: path.clone(),
                label: Label::Colorized,
                colorizer_id: cid.to_string(),
                group_id: stem.clone(),
                split: Split::Train,
            });
        }
    }

    let ratio_free = colorized_dirs.len() != COLORIZED_PER_NATURAL;
    let manifest = DatasetManifest::new(name, seed, ratio_free, records);
    manifest.validate()?;
    Ok(manifest)
}

/// Splits a manifest at group granularity into a train side and a val side.
///
/// Groups are shuffled by `seed` and the first `round(train_fraction * groups)`
/// go to the train side. No group ever straddles the two outputs; the union of
/// the outputs is the input. Fails with [`DataError::DegenerateSplit`] when a
/// side would receive zero groups.
pub fn split_manifest(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    manifest.validate()?;

    let mut groups = manifest.group_ids();
    let n_groups = groups.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 1));
    groups.shuffle(&mut rng);

    let n_train = (train_fraction * n_groups as f64).round() as usize;
    if n_train == 0 || n_train == n_groups {
        return Err(DataError::DegenerateSplit(format!(
            "{n_groups} groups at fraction {train_fraction} leaves one side empty"
        )));
    }
    let train_set: std::collections::HashSet<&String> = groups.iter().take(n_train).collect();

    let mut train_records = Vec::new();
    let mut val_records = Vec::new();
    for r in &manifest.records {
        if train_set.contains(&r.group_id) {
            let mut r = r.clone();
            r.split = Split::Train;
            train_records.push(r);
        } else {
            let mut r = r.clone();
            r.split = Split::Val;
            val_records.push(r);
        }
    }

    let mut train = DatasetManifest::new(
        format!("{}-train", manifest.name),
        seed,
        manifest.ratio_free,
        train_records,
    );
    let mut val = DatasetManifest::new(
        format!("{}-val", manifest.name),
        seed,
        manifest.ratio_free,
        val_records,
    );
    train.base_dir = manifest.base_dir.clone();
    val.base_dir = manifest.base_dir.clone();
    Ok((train, val))
}

/// Strips a `-train`/`-val`/`-test` suffix so held-out slices of one corpus
/// compare as the same dataset family in cross-dataset reports.
pub fn dataset_family(name: &str) -> &str {
    for suffix in ["-train", "-val", "-test"] {
        if let Some(stripped) = name.strip_suffix(suffix) {
            return stripped;
        }
    }
    name
}
