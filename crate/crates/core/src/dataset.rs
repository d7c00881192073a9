//! Sample manifests and sample loading.
//!
//! Manifest format, one sample per line (UTF-8, tab separated):
//!
//! ```text
//! # split=train
//! <id>\t<feature file>...\t<label file>
//! ```
//!
//! A feature file holds either a single `(h, w)` channel or a `(c, h, w)`
//! stack; channels are concatenated in column order. Relative paths resolve
//! against the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::features::{label_map, stack_features, FeatureError, Task};
use crate::map::Map2;
use crate::npy::{read_npy_file, NpyArray, NpyError};
use crate::synth::{synth_layout, SynthError, SynthProfile};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected {expected} feature channels, found {found}")]
    ChannelCountMismatch { expected: usize, found: usize },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("sample index {0} out of range")]
    OutOfRange(usize),
    #[error("{path}: {source}")]
    Npy { path: PathBuf, source: NpyError },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub features: Vec<PathBuf>,
    pub label: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Option<Split>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Manifest, DatasetError> {
        let mut manifest = Manifest::default();
        let mut ids = HashSet::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let trimmed = raw.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                match comment.trim() {
                    "split=train" => manifest.split = Some(Split::Train),
                    "split=test" => manifest.split = Some(Split::Test),
                    _ => {}
                }
                continue;
            }
            let cols: Vec<&str> = trimmed.split('\t').collect();
            if cols.len() < 3 {
                return Err(DatasetError::Manifest {
                    line,
                    msg: "expected <id>, at least one feature path and a label path".into(),
                });
            }
            let id = cols[0].to_string();
            if !ids.insert(id.clone()) {
                return Err(DatasetError::Manifest { line, msg: format!("duplicate id `{id}`") });
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            manifest.entries.push(ManifestEntry {
                id,
                features: cols[1..cols.len() - 1].iter().map(|p| resolve(p)).collect(),
                label: resolve(cols[cols.len() - 1]),
            });
        }
        Ok(manifest)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let m = Manifest::parse(&text, base)?;
        for e in &m.entries {
            for p in e.features.iter().chain(std::iter::once(&e.label)) {
                if !p.exists() {
                    return Err(DatasetError::MissingFile(p.clone()));
                }
            }
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self.split {
            Some(Split::Train) => out.push_str("# split=train\n"),
            Some(Split::Test) => out.push_str("# split=test\n"),
            None => {}
        }
        for e in &self.entries {
            let _ = write!(out, "{}", e.id);
            for f in &e.features {
                let _ = write!(out, "\t{}", f.display());
            }
            let _ = writeln!(out, "\t{}", e.label.display());
        }
        out
    }
}

/// One training example: channel-first features plus a `[0, 1]` label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `(channels, height, width)` row-major.
    pub features: Vec<f32>,
    /// `(height, width)` row-major.
    pub label: Vec<f32>,
}

impl Sample {
    pub fn label_map(&self) -> Map2 {
        Map2::from_vec(self.height, self.width, self.label.iter().map(|&v| v as f64).collect())
    }
}

fn read(path: &Path) -> Result<NpyArray, DatasetError> {
    read_npy_file(path).map_err(|source| DatasetError::Npy { path: path.to_path_buf(), source })
}

fn min_max_normalize(buf: &mut [f32]) {
    let (lo, hi) = buf.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    for v in buf.iter_mut() {
        *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
    }
}

/// Loads a manifest entry. With `normalize`, each channel is min-max
/// normalized on load; otherwise features are kept as stored.
pub fn load_sample(entry: &ManifestEntry, task: Task, normalize: bool) -> Result<Sample, DatasetError> {
    let mut features = Vec::new();
    let mut channels = 0;
    let mut hw: Option<(usize, usize)> = None;
    for path in &entry.features {
        let arr = read(path)?;
        let (c, h, w) = match arr.shape[..] {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => {
                return Err(DatasetError::ShapeMismatch(format!(
                    "{}: feature array must be (h, w) or (c, h, w), got {:?}",
                    path.display(),
                    arr.shape
                )))
            }
        };
        match hw {
            None => hw = Some((h, w)),
            Some(prev) if prev != (h, w) => {
                return Err(DatasetError::ShapeMismatch(format!(
                    "{}: spatial size {:?} differs from {:?}",
                    path.display(),
                    (h, w),
                    prev
                )))
            }
            _ => {}
        }
        channels += c;
        features.extend_from_slice(&arr.data);
    }
    let (height, width) = hw.ok_or_else(|| DatasetError::ShapeMismatch("no feature files".into()))?;
    if channels != task.channels() {
        return Err(DatasetError::ChannelCountMismatch { expected: task.channels(), found: channels });
    }
    if normalize {
        for ch in features.chunks_mut(height * width) {
            min_max_normalize(ch);
        }
    }
    let label = read(&entry.label)?;
    let label_hw = match label.shape[..] {
        [h, w] | [1, h, w] => (h, w),
        _ => (0, 0),
    };
    if label_hw != (height, width) {
        return Err(DatasetError::ShapeMismatch(format!(
            "label {:?} does not match features ({height}, {width})",
            label.shape
        )));
    }
    let label = label.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Sample { id: entry.id.clone(), channels, height, width, features, label })
}

/// Random-access sample source. Implementations must be pure: the same
/// index always yields the same sample.
pub trait Dataset: Send + Sync {
    fn task(&self) -> Task;
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<Sample, DatasetError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    pub task: Task,
    pub samples: Vec<Sample>,
}

impl InMemoryDataset {
    /// Extracts features and labels from one synthetic layout per seed.
    pub fn synthetic(task: Task, profile: &SynthProfile, seeds: impl IntoIterator<Item = u64>) -> Result<Self, DatasetError> {
        let samples = seeds
            .into_iter()
            .map(|seed| {
                let layout = synth_layout(seed, profile)?;
                let stack = stack_features(task, &layout, &layout.grid)?;
                let label = label_map(task, &layout, &layout.grid)?;
                let (channels, height, width) = stack.shape();
                Ok(Sample {
                    id: format!("synth-{seed}"),
                    channels,
                    height,
                    width,
                    features: stack.to_f32(),
                    label: label.data.iter().map(|&v| v as f32).collect(),
                })
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        Ok(InMemoryDataset { task, samples })
    }
}

impl Dataset for InMemoryDataset {
    fn task(&self) -> Task {
        self.task
    }

    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, index: usize) -> Result<Sample, DatasetError> {
        self.samples.get(index).cloned().ok_or(DatasetError::OutOfRange(index))
    }
}

/// Lazily loads samples from disk on each access.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    pub manifest: Manifest,
    pub task: Task,
    pub normalize: bool,
}

impl ManifestDataset {
    pub fn open(path: impl AsRef<Path>, task: Task, normalize: bool) -> Result<Self, DatasetError> {
        Ok(ManifestDataset { manifest: Manifest::load(path)?, task, normalize })
    }
}

impl Dataset for ManifestDataset {
    fn task(&self) -> Task {
        self.task
    }

    fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    fn sample(&self, index: usize) -> Result<Sample, DatasetError> {
        let entry = self.manifest.entries.get(index).ok_or(DatasetError::OutOfRange(index))?;
        load_sample(entry, self.task, self.normalize)
    }
}
