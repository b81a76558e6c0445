//! Tracklets, the KITTI-style dataset layout and the synthetic generator.

pub mod kitti;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Box7, PointCloud};

use kitti::{calib_path, label_path, velodyne_path, write_file, Calib, Label};

/// Environment variable naming the dataset root.
pub const DATA_ROOT_ENV: &str = "SIAMTRACK_DATA_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub gt: Option<Box7>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub id: String,
    pub category: String,
    pub frames: Vec<Frame>,
}

impl Tracklet {
    /// Annotated frames as `(cloud, box)` pairs.
    pub fn annotated(&self) -> Vec<(PointCloud, Box7)> {
        self.frames
            .iter()
            .filter_map(|f| f.gt.map(|g| (f.cloud.clone(), g)))
            .collect()
    }
}

/// Sequence split of the tracking benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl Split {
    pub fn contains(&self, seq: u32) -> bool {
        match self {
            Split::Train => seq <= 16,
            Split::Val => (17..=18).contains(&seq),
            Split::Test => (19..=20).contains(&seq),
            Split::All => true,
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// A tracklet located on disk; point clouds are read by [`TrackletIndex::load`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrackletIndex {
    pub root: PathBuf,
    pub sequence: u32,
    pub track_id: i64,
    pub category: String,
    /// `(frame number, box)` in frame order.
    pub frames: Vec<(usize, Box7)>,
}

impl TrackletIndex {
    pub fn id(&self) -> String {
        format!("{:04}-{}", self.sequence, self.track_id)
    }

    pub fn load(&self) -> Result<Tracklet> {
        let frames = self
            .frames
            .iter()
            .map(|&(f, gt)| {
                Ok(Frame {
                    cloud: kitti::read_velodyne(&velodyne_path(&self.root, self.sequence, f))?,
                    gt: Some(gt),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tracklet {
            id: self.id(),
            category: self.category.clone(),
            frames,
        })
    }
}

fn sequences(root: &Path) -> Result<Vec<u32>> {
    let dir = root.join("label_02");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut seqs = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(&dir, err))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".txt") {
            if let Ok(s) = stem.parse::<u32>() {
                seqs.push(s);
            }
        }
    }
    seqs.sort_unstable();
    Ok(seqs)
}

/// Every track of `category` in the split; one tracklet per track id,
/// covering the frames where it is annotated.
pub fn index_tracklets(root: &Path, split: Split, category: &str) -> Result<Vec<TrackletIndex>> {
    let mut out = Vec::new();
    for seq in sequences(root)?.into_iter().filter(|&s| split.contains(s)) {
        let calib = Calib::load(&calib_path(root, seq))?;
        let labels = kitti::load_labels(&label_path(root, seq))?;
        let mut tracks: BTreeMap<i64, Vec<(usize, Box7)>> = BTreeMap::new();
        for l in labels.iter().filter(|l| l.kind == category) {
            tracks.entry(l.track_id).or_default().push((l.frame, calib.label_to_box(l)?));
        }
        for (track_id, mut frames) in tracks {
            frames.sort_by_key(|&(f, _)| f);
            out.push(TrackletIndex {
                root: root.to_path_buf(),
                sequence: seq,
                track_id,
                category: category.to_string(),
                frames,
            });
        }
    }
    Ok(out)
}

/// Reads tracklets in parallel; the result keeps index order.
pub fn load_tracklets(root: &Path, split: Split, category: &str) -> Result<Vec<Tracklet>> {
    index_tracklets(root, split, category)?.par_iter().map(TrackletIndex::load).collect()
}

/// Writes each tracklet as its own sequence (track id 0) in the KITTI layout.
pub fn write_tracklets(root: &Path, tracklets: &[Tracklet]) -> Result<()> {
    let calib = Calib::default();
    for (seq, t) in tracklets.iter().enumerate() {
        let seq = seq as u32;
        let mut labels = String::new();
        for (f, frame) in t.frames.iter().enumerate() {
            kitti::write_velodyne(&frame.cloud, &velodyne_path(root, seq, f))?;
            if let Some(gt) = &frame.gt {
                let l: Label = calib.box_to_label(gt, f, 0, &t.category);
                labels.push_str(&l.to_line());
                labels.push('\n');
            }
        }
        write_file(&label_path(root, seq), labels.as_bytes())?;
        write_file(&calib_path(root, seq), calib.to_text().as_bytes())?;
    }
    Ok(())
}

/// Dataset root from the environment, if set and present.
pub fn data_root_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .filter(|p| p.join("label_02").is_dir())
}
