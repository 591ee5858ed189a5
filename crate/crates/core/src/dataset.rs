//! Clip directory indexing and training-sample extraction.
//!
//! Originals live at `root/<clip id>/frame_<t>.png` (clip ids may contain
//! `/`, e.g. `00001/0266`). Decoded frames for quantization parameter `q`
//! mirror that tree under `decoded_root/qp<q>/`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, QenetError, Result};
use crate::frame::{Clip, Frame, Variant};

/// Frames per training window: one I frame and three P frames.
pub const WINDOW: usize = 4;
pub const DEFAULT_CROP: usize = 256;

pub fn frame_file(t: usize) -> String {
    format!("frame_{t}.png")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub root: PathBuf,
    pub decoded_root: PathBuf,
}

impl Layout {
    /// Decoded tree defaults to a `<root>_decoded` sibling of the original tree.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let mut name = root.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "dataset".into());
        name.push("_decoded");
        let decoded_root = root.with_file_name(name);
        Layout { root, decoded_root }
    }

    pub fn with_decoded_root(mut self, decoded_root: impl Into<PathBuf>) -> Self {
        self.decoded_root = decoded_root.into();
        self
    }

    pub fn original_dir(&self, clip: &str) -> PathBuf {
        self.root.join(clip)
    }

    pub fn decoded_dir(&self, qp: u8, clip: &str) -> PathBuf {
        self.decoded_root.join(format!("qp{qp}")).join(clip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    /// Guesses the split from a list file name (`*test*`/`*eval*` → eval).
    pub fn infer(list: &Path) -> Split {
        let name = list.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
        if name.contains("test") || name.contains("eval") {
            Split::Eval
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub original: Vec<PathBuf>,
    pub decoded: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub layout: Layout,
    pub qp: u8,
    pub split: Split,
    /// Sorted by clip id.
    pub entries: Vec<IndexEntry>,
    pub skipped: Vec<SkipRecord>,
}

/// Reads a split list: one clip id per line, blank lines ignored.
pub fn read_split_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Consecutive `frame_<t>.png` files starting at 0.
fn frame_paths(dir: &Path) -> Vec<PathBuf> {
    (0..).map(|t| dir.join(frame_file(t))).take_while(|p| p.is_file()).collect()
}

/// Clip ids under `root`: every directory (at any depth) holding `frame_0.png`.
pub fn discover_clips(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    if !root.is_dir() {
        return Ok(out);
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(frame_file(0)).is_file() {
            let rel = dir.strip_prefix(root).expect("walk stays under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Indexes the clips named in `ids` (or every clip found under the root).
/// Incomplete clips are skipped and recorded rather than failing the build.
pub fn build_index(layout: &Layout, qp: u8, split: Split, ids: Option<&[String]>) -> Result<DatasetIndex> {
    let ids: Vec<String> = match ids {
        Some(ids) => ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
        None => discover_clips(&layout.root)?,
    };
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for id in ids {
        let original = frame_paths(&layout.original_dir(&id));
        let decoded = frame_paths(&layout.decoded_dir(qp, &id));
        let reason = if original.len() < WINDOW {
            Some(format!("{} original frames, need {WINDOW}", original.len()))
        } else if decoded.len() < original.len() {
            Some(format!("{} of {} decoded frames at qp {qp}", decoded.len(), original.len()))
        } else {
            None
        };
        match reason {
            Some(reason) => {
                log::warn!("skipping clip {id}: {reason}");
                skipped.push(SkipRecord { id, reason });
            }
            None => {
                let n = original.len();
                entries.push(IndexEntry { id, original, decoded: decoded[..n].to_vec() });
            }
        }
    }
    Ok(DatasetIndex { layout: layout.clone(), qp, split, entries, skipped })
}

/// Builds train and eval indices from their split lists, rejecting overlapping ids.
pub fn build_split_indices(layout: &Layout, qp: u8, train_ids: &[String], eval_ids: &[String]) -> Result<(DatasetIndex, DatasetIndex)> {
    let train: BTreeSet<&String> = train_ids.iter().collect();
    if let Some(dup) = eval_ids.iter().find(|id| train.contains(id)) {
        return Err(QenetError::Dataset(format!("clip {dup} is in both train and eval splits")));
    }
    Ok((build_index(layout, qp, Split::Train, Some(train_ids))?, build_index(layout, qp, Split::Eval, Some(eval_ids))?))
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: &str) -> Result<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .map(|i| &self.entries[i])
            .map_err(|_| QenetError::Dataset(format!("clip {id} not in index")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads every frame of a clip, uncropped.
    pub fn load_clip(&self, id: &str) -> Result<Clip> {
        let e = self.entry(id)?;
        let original = load_frames(&e.original, Variant::Original)?;
        let decoded = load_frames(&e.decoded, Variant::Decoded)?;
        Clip::new(e.id.clone(), self.qp, original, decoded)
    }

    /// A 4-frame window from the start of the clip, cropped to `crop`×`crop`
    /// at a uniformly random origin shared by all eight frames.
    pub fn sample(&self, id: &str, rng: &mut impl Rng, crop: usize) -> Result<TrainingSample> {
        let e = self.entry(id)?;
        if e.original.len() < WINDOW {
            return Err(QenetError::Dataset(format!("clip {id} has {} frames", e.original.len())));
        }
        let original = load_frames(&e.original[..WINDOW], Variant::Original)?;
        let decoded = load_frames(&e.decoded[..WINDOW], Variant::Decoded)?;
        let clip = Clip::new(e.id.clone(), self.qp, original, decoded)?;
        TrainingSample::crop_from(&clip, rng, crop)
    }
}

fn load_frames(paths: &[PathBuf], variant: Variant) -> Result<Vec<Frame>> {
    paths.iter().enumerate().map(|(t, p)| Frame::load_png(p, t, variant)).collect()
}

/// Loads `frame_0.png, frame_1.png, ...` from one clip directory.
pub fn load_clip_dir(dir: &Path, variant: Variant) -> Result<Vec<Frame>> {
    let paths = frame_paths(dir);
    if paths.is_empty() {
        return Err(QenetError::Dataset(format!("no frames under {}", dir.display())));
    }
    load_frames(&paths, variant)
}

/// Writes frames as `frame_<index>.png` under `dir`.
pub fn save_clip_dir(dir: &Path, frames: &[Frame]) -> Result<()> {
    frames.iter().try_for_each(|f| f.save_png(&dir.join(frame_file(f.index))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub clip_id: String,
    pub original: Vec<Frame>,
    pub decoded: Vec<Frame>,
    pub crop_origin: (usize, usize),
}

impl TrainingSample {
    /// Crops the first four frames of `clip` at a random origin drawn from `rng`.
    pub fn crop_from(clip: &Clip, rng: &mut impl Rng, crop: usize) -> Result<Self> {
        if clip.len() < WINDOW {
            return Err(QenetError::Dataset(format!("clip {} has {} frames", clip.id, clip.len())));
        }
        let (h, w) = clip.original[0].dims();
        if h < crop || w < crop {
            return Err(QenetError::Dataset(format!("clip {} is {h}x{w}, smaller than crop {crop}", clip.id)));
        }
        let origin = (rng.random_range(0..=h - crop), rng.random_range(0..=w - crop));
        let cut = |frames: &[Frame]| -> Result<Vec<Frame>> {
            frames[..WINDOW].iter().map(|f| Ok(Frame { pixels: f.pixels.crop(origin.0, origin.1, crop, crop)?, ..f.clone() })).collect()
        };
        Ok(TrainingSample { clip_id: clip.id.clone(), original: cut(&clip.original)?, decoded: cut(&clip.decoded)?, crop_origin: origin })
    }

    /// The whole first window without cropping.
    pub fn full(clip: &Clip) -> Result<Self> {
        if clip.len() < WINDOW {
            return Err(QenetError::Dataset(format!("clip {} has {} frames", clip.id, clip.len())));
        }
        Ok(TrainingSample {
            clip_id: clip.id.clone(),
            original: clip.original[..WINDOW].to_vec(),
            decoded: clip.decoded[..WINDOW].to_vec(),
            crop_origin: (0, 0),
        })
    }
}
