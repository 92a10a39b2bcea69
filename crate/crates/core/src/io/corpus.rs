//! Corpus layout: a manifest of frames grouped into sequences plus a seeded
//! split assignment.
//!
//! The manifest is `manifest.tsv` in the corpus root, one frame per line:
//!
//! ```text
//! <sequence_id>\t<frame_index>\t<probs_path>\t<gt_path|->\t<pseudo_path|->
//! ```
//!
//! Relative paths resolve against the corpus root. Blank lines and lines
//! starting with `#` are skipped.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest {0} not found")]
    MissingManifest(PathBuf),
    #[error("manifest line {line}: {reason}")]
    ManifestMalformed { line: usize, reason: String },
    #[error("frame file {0} does not exist")]
    MissingFrame(PathBuf),
    #[error("frame id {0} appears more than once")]
    DuplicateFrameId(String),
    #[error("sequence {sequence}: frame index {index} on line {line} does not increase")]
    NonIncreasing {
        sequence: String,
        index: u32,
        line: usize,
    },
    #[error("split ratios {0:?} must be 2 or 3 non-negative values summing to 1")]
    BadRatios(Vec<f64>),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    /// Frames without ground truth; only usable through pseudo labels.
    Unlabeled,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameEntry {
    pub sequence_id: String,
    pub frame_index: u32,
    pub probs: PathBuf,
    pub gt: Option<PathBuf>,
    pub pseudo: Option<PathBuf>,
}

impl FrameEntry {
    /// Unique frame identifier, `<sequence>/<index>`.
    pub fn id(&self) -> String {
        frame_id(&self.sequence_id, self.frame_index)
    }
}

pub fn frame_id(sequence_id: &str, frame_index: u32) -> String {
    format!("{sequence_id}/{frame_index:06}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Two ratios (train, test) or three (train, validation, test).
    pub ratios: Vec<f64>,
    pub seed: u64,
}

impl CorpusConfig {
    /// 80/20 train/test over single frames.
    pub fn single_frame(seed: u64) -> Self {
        Self {
            ratios: vec![0.8, 0.2],
            seed,
        }
    }

    /// 70/10/20 train/validation/test for sequence corpora.
    pub fn sequence(seed: u64) -> Self {
        Self {
            ratios: vec![0.7, 0.1, 0.2],
            seed,
        }
    }

    fn split_names(&self) -> Result<&'static [Split], CorpusError> {
        let ok = self.ratios.iter().all(|r| r.is_finite() && *r >= 0.0)
            && (self.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        match (ok, self.ratios.len()) {
            (true, 2) => Ok(&[Split::Train, Split::Test]),
            (true, 3) => Ok(&[Split::Train, Split::Validation, Split::Test]),
            _ => Err(CorpusError::BadRatios(self.ratios.clone())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusLayout {
    pub root: PathBuf,
    pub frames: Vec<FrameEntry>,
    /// Split of each frame, parallel to `frames`.
    pub splits: Vec<Split>,
}

impl CorpusLayout {
    /// Sequence ids in first-appearance order, each with its frame positions
    /// (indices into `frames`) in increasing frame order.
    pub fn sequences(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut position: HashMap<&str, usize> = HashMap::new();
        for (i, frame) in self.frames.iter().enumerate() {
            let slot = *position.entry(&frame.sequence_id).or_insert_with(|| {
                order.push((frame.sequence_id.clone(), Vec::new()));
                order.len() - 1
            });
            order[slot].1.push(i);
        }
        order
    }

    pub fn frames_in(&self, split: Split) -> impl Iterator<Item = &FrameEntry> {
        self.frames
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(f, _)| f)
    }

    pub fn split_of(&self, frame_id: &str) -> Option<Split> {
        self.frames
            .iter()
            .position(|f| f.id() == frame_id)
            .map(|i| self.splits[i])
    }
}

/// Split sizes for `n` items: floor each ratio share, then hand the
/// remainder out one by one in declared order.
pub fn split_sizes(n: usize, ratios: &[f64]) -> Vec<usize> {
    let mut sizes: Vec<usize> = ratios
        .iter()
        .map(|r| ((n as f64) * r + 1e-9).floor() as usize)
        .collect();
    let mut assigned: usize = sizes.iter().sum();
    let mut slot = 0;
    while assigned < n {
        let k = slot % sizes.len();
        sizes[k] += 1;
        assigned += 1;
        slot += 1;
    }
    sizes
}

/// Assigns `n` items to splits by a seeded shuffle. Returns the split slot
/// (index into `ratios`) of every item.
pub fn assign_splits(n: usize, ratios: &[f64], seed: u64) -> Vec<usize> {
    let sizes = split_sizes(n, ratios);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots = vec![0; n];
    let mut cursor = 0;
    for (slot, &size) in sizes.iter().enumerate() {
        for &item in &order[cursor..cursor + size] {
            slots[item] = slot;
        }
        cursor += size;
    }
    slots
}

pub fn parse_manifest(text: &str, root: &Path) -> Result<Vec<FrameEntry>, CorpusError> {
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    };
    let optional = |p: &str| (p != "-").then(|| resolve(p));

    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(CorpusError::ManifestMalformed {
                line: line_no,
                reason: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let frame_index = fields[1]
            .parse::<u32>()
            .map_err(|_| CorpusError::ManifestMalformed {
                line: line_no,
                reason: format!("frame index {:?} is not a non-negative integer", fields[1]),
            })?;
        if fields[0].is_empty() || fields[2] == "-" {
            return Err(CorpusError::ManifestMalformed {
                line: line_no,
                reason: "sequence id and probability path are required".into(),
            });
        }
        frames.push(FrameEntry {
            sequence_id: fields[0].to_string(),
            frame_index,
            probs: resolve(fields[2]),
            gt: optional(fields[3]),
            pseudo: optional(fields[4]),
        });
    }
    Ok(frames)
}

fn validate(frames: &[FrameEntry]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    let mut last_index: HashMap<&str, u32> = HashMap::new();
    for (line, frame) in frames.iter().enumerate() {
        if !seen.insert(frame.id()) {
            return Err(CorpusError::DuplicateFrameId(frame.id()));
        }
        if let Some(&prev) = last_index.get(frame.sequence_id.as_str()) {
            if frame.frame_index <= prev {
                return Err(CorpusError::NonIncreasing {
                    sequence: frame.sequence_id.clone(),
                    index: frame.frame_index,
                    line: line + 1,
                });
            }
        }
        last_index.insert(&frame.sequence_id, frame.frame_index);
    }
    for frame in frames {
        for path in std::iter::once(&frame.probs).chain(&frame.gt).chain(&frame.pseudo) {
            if !path.is_file() {
                return Err(CorpusError::MissingFrame(path.clone()));
            }
        }
    }
    Ok(())
}

/// Reads `<root>/manifest.tsv`, checks it and assigns splits. Frames with
/// ground truth are shuffled into the configured splits; frames without it
/// are marked [`Split::Unlabeled`].
pub fn load_corpus(root: impl AsRef<Path>, config: &CorpusConfig) -> Result<CorpusLayout, CorpusError> {
    let root = root.as_ref();
    let names = config.split_names()?;
    let manifest = root.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CorpusError::MissingManifest(manifest.clone()),
        _ => CorpusError::Io(e),
    })?;
    let frames = parse_manifest(&text, root)?;
    validate(&frames)?;

    let labeled: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].gt.is_some()).collect();
    let slots = assign_splits(labeled.len(), &config.ratios, config.seed);
    let mut splits = vec![Split::Unlabeled; frames.len()];
    for (&frame, &slot) in labeled.iter().zip(&slots) {
        splits[frame] = names[slot];
    }
    Ok(CorpusLayout {
        root: root.to_path_buf(),
        frames,
        splits,
    })
}

/// Renders manifest lines with paths relative to `root` where possible.
pub fn manifest_text(frames: &[FrameEntry], root: &Path) -> String {
    let show = |p: &Path| {
        p.strip_prefix(root)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let opt = |p: &Option<PathBuf>| p.as_deref().map(show).unwrap_or_else(|| "-".into());
    frames
        .iter()
        .map(|f| {
            format!(
                "{}\t{}\t{}\t{}\t{}\n",
                f.sequence_id,
                f.frame_index,
                show(&f.probs),
                opt(&f.gt),
                opt(&f.pseudo)
            )
        })
        .collect()
}

pub fn write_manifest(frames: &[FrameEntry], root: &Path) -> io::Result<()> {
    super::atomic_write(&root.join(MANIFEST_NAME), manifest_text(frames, root).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(n: usize, skip_file: Option<usize>) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let mut frames = Vec::new();
        for i in 0..n {
            let probs = dir.path().join(format!("p{i}.npy"));
            let gt = dir.path().join(format!("g{i}.npy"));
            if skip_file != Some(i) {
                fs::write(&probs, b"x").unwrap();
            }
            fs::write(&gt, b"x").unwrap();
            frames.push(FrameEntry {
                sequence_id: "seq".into(),
                frame_index: i as u32,
                probs,
                gt: Some(gt),
                pseudo: None,
            });
        }
        write_manifest(&frames, dir.path()).unwrap();
        dir
    }

    #[test]
    fn eighty_twenty_split_is_reproducible() {
        let dir = corpus(10, None);
        let a = load_corpus(dir.path(), &CorpusConfig::single_frame(7)).unwrap();
        assert_eq!(a.frames_in(Split::Train).count(), 8);
        assert_eq!(a.frames_in(Split::Test).count(), 2);
        let b = load_corpus(dir.path(), &CorpusConfig::single_frame(7)).unwrap();
        assert_eq!(a.splits, b.splits);
    }

    #[test]
    fn seventy_ten_twenty() {
        let dir = corpus(10, None);
        let c = load_corpus(dir.path(), &CorpusConfig::sequence(1)).unwrap();
        let count = |s| c.splits.iter().filter(|&&x| x == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Validation), count(Split::Test)),
            (7, 1, 2)
        );
    }

    #[test]
    fn missing_probs_file() {
        let dir = corpus(3, Some(1));
        assert!(matches!(
            load_corpus(dir.path(), &CorpusConfig::single_frame(0)),
            Err(CorpusError::MissingFrame(p)) if p.ends_with("p1.npy")
        ));
    }

    #[test]
    fn duplicate_and_order_checks() {
        let root = Path::new("/r");
        let dup = parse_manifest("a\t1\tp\t-\t-\na\t1\tq\t-\t-\n", root).unwrap();
        assert!(matches!(validate(&dup), Err(CorpusError::DuplicateFrameId(_))));
        let back = parse_manifest("a\t2\tp\t-\t-\na\t1\tq\t-\t-\n", root).unwrap();
        assert!(matches!(validate(&back), Err(CorpusError::NonIncreasing { .. })));
        assert!(matches!(
            parse_manifest("a\tx\tp\t-\t-\n", root),
            Err(CorpusError::ManifestMalformed { line: 1, .. })
        ));
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_corpus(dir.path(), &CorpusConfig::single_frame(0)),
            Err(CorpusError::MissingManifest(_))
        ));
    }

    #[test]
    fn remainder_goes_to_first_splits() {
        assert_eq!(split_sizes(10, &[0.7, 0.1, 0.2]), vec![7, 1, 2]);
        assert_eq!(split_sizes(7, &[0.7, 0.1, 0.2]), vec![5, 1, 1]);
        assert_eq!(split_sizes(3, &[0.8, 0.2]), vec![3, 0]);
    }

    proptest! {
        #[test]
        fn splits_partition_items(n in 0usize..200, seed in any::<u64>(), three in any::<bool>()) {
            let ratios: &[f64] = if three { &[0.7, 0.1, 0.2] } else { &[0.8, 0.2] };
            let slots = assign_splits(n, ratios, seed);
            let sizes = split_sizes(n, ratios);
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            for (slot, &size) in sizes.iter().enumerate() {
                prop_assert_eq!(slots.iter().filter(|&&s| s == slot).count(), size);
                prop_assert!(size >= ((n as f64) * ratios[slot]).floor() as usize);
            }
        }
    }
}
