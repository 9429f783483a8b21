//! Frame-feature stores and utterance/frame episode pairs.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{DropReason, DropReport, UtteranceRecord, Vocabulary};
use crate::error::{Error, Result};

pub const FRAME_RATE: f64 = 3.75;
pub const FRAMES_PER_UTTERANCE: usize = 16;
pub const DEFAULT_FEATURE_DIM: usize = 768;

const GLFX_MAGIC: &[u8; 4] = b"GLFX";
const GLFX_VERSION: u32 = 1;

/// Frozen backbone output for one video frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFeature {
    pub video_id: String,
    pub timestamp_s: f64,
    pub features: Vec<f64>,
}

impl FrameFeature {
    pub fn key(&self) -> String {
        frame_key(&self.video_id, self.timestamp_s)
    }
}

/// Stable textual key for a frame, used by score, accept-list and trial
/// files.
pub fn frame_key(video_id: &str, timestamp_s: f64) -> String {
    format!("{video_id}@{timestamp_s:.4}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameId(pub usize);

/// Read-only collection of frame features indexed by video and time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    frames: Vec<FrameFeature>,
    by_video: HashMap<String, Vec<(f64, FrameId)>>,
    keys: HashMap<String, FrameId>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, frame: FrameFeature) -> Result<FrameId> {
        if frame.features.len() != self.dim {
            return Err(Error::Data(format!(
                "frame {} has {} features, store dimension is {}",
                frame.key(),
                frame.features.len(),
                self.dim
            )));
        }
        if !(frame.timestamp_s >= 0.0 && frame.timestamp_s.is_finite()) {
            return Err(Error::Data(format!("frame {} has a bad timestamp", frame.key())));
        }
        let id = FrameId(self.frames.len());
        let list = self.by_video.entry(frame.video_id.clone()).or_default();
        let pos = list.partition_point(|(t, _)| *t <= frame.timestamp_s);
        list.insert(pos, (frame.timestamp_s, id));
        self.keys.insert(frame.key(), id);
        self.frames.push(frame);
        Ok(id)
    }

    pub fn get(&self, id: FrameId) -> &FrameFeature {
        &self.frames[id.0]
    }

    pub fn frames(&self) -> &[FrameFeature] {
        &self.frames
    }

    pub fn by_key(&self, key: &str) -> Option<FrameId> {
        self.keys.get(key).copied()
    }

    pub fn has_video(&self, video_id: &str) -> bool {
        self.by_video.contains_key(video_id)
    }

    /// Frames of one video in time order.
    pub fn video_frames(&self, video_id: &str) -> impl Iterator<Item = FrameId> + '_ {
        self.by_video.get(video_id).into_iter().flatten().map(|(_, id)| *id)
    }

    /// Timestamp of the last stored frame of a video.
    pub fn video_duration(&self, video_id: &str) -> Option<f64> {
        self.by_video.get(video_id).and_then(|l| l.last()).map(|(t, _)| *t)
    }

    /// Nearest stored frame to `t` within `tolerance` seconds.
    pub fn resolve(&self, video_id: &str, t: f64, tolerance: f64) -> Option<FrameId> {
        let list = self.by_video.get(video_id)?;
        let pos = list.partition_point(|(ts, _)| *ts < t);
        let mut best: Option<(f64, FrameId)> = None;
        for i in [pos.wrapping_sub(1), pos] {
            if let Some(&(ts, id)) = list.get(i) {
                let d = (ts - t).abs();
                if d <= tolerance && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, id));
                }
            }
        }
        best.map(|(_, id)| id)
    }

    /// Little-endian binary: `GLFX`, version u32, dim u32, count u64, then
    /// per frame a u32-length-prefixed UTF-8 video id, f64 timestamp and
    /// `dim` f64 features.
    pub fn write_glfx(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
        put(GLFX_MAGIC)?;
        put(&GLFX_VERSION.to_le_bytes())?;
        put(&(self.dim as u32).to_le_bytes())?;
        put(&(self.frames.len() as u64).to_le_bytes())?;
        for f in &self.frames {
            put(&(f.video_id.len() as u32).to_le_bytes())?;
            put(f.video_id.as_bytes())?;
            put(&f.timestamp_s.to_le_bytes())?;
            for v in &f.features {
                put(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_glfx(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("{}: truncated feature store ({e})", path.display())))?;
            Ok(buf)
        };
        if take(4)?.as_slice() != GLFX_MAGIC {
            return Err(Error::Format(format!("{}: not a GLFX feature store", path.display())));
        }
        let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != GLFX_VERSION {
            return Err(Error::Format(format!("{}: unsupported GLFX version {version}", path.display())));
        }
        let dim = u32_at(take(4)?) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut store = FeatureStore::new(dim);
        for _ in 0..count {
            let len = u32_at(take(4)?) as usize;
            let video_id = String::from_utf8(take(len)?)
                .map_err(|_| Error::Format(format!("{}: video id is not UTF-8", path.display())))?;
            let timestamp_s = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let raw = take(8 * dim)?;
            let features = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store.push(FrameFeature {
                video_id,
                timestamp_s,
                features,
            })?;
        }
        Ok(store)
    }

    /// One JSON object per line with keys `video_id`, `timestamp_s`,
    /// `features`.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store: Option<FeatureStore> = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: FrameFeature = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            store.get_or_insert_with(|| FeatureStore::new(f.features.len())).push(f)?;
        }
        store.ok_or_else(|| Error::Data(format!("{}: no frames", path.display())))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for f in &self.frames {
            let line = serde_json::to_string(f).expect("frame serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads either format, choosing by the `.jsonl` extension.
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => Self::read_jsonl(path),
            _ => Self::read_glfx(path),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingConfig {
    pub max_frames: usize,
    pub frame_rate: f64,
    /// Match tolerance as a fraction of the frame period.
    pub tolerance_periods: f64,
    pub max_len: usize,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            max_frames: FRAMES_PER_UTTERANCE,
            frame_rate: FRAME_RATE,
            tolerance_periods: 0.5,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
        }
    }
}

/// Sample instants `start + k / rate` for `k = 0..max_frames`, dropping
/// those past the end of the video. The first instant is always kept; a
/// start past the end is clamped to it.
pub fn frame_schedule(start_s: f64, video_duration_s: f64, cfg: &PairingConfig) -> Vec<f64> {
    let start = if start_s > video_duration_s {
        log::warn!("utterance start {start_s} after video end {video_duration_s}; clamping");
        video_duration_s
    } else {
        start_s.max(0.0)
    };
    let mut out = vec![start];
    for k in 1..cfg.max_frames {
        let t = start + k as f64 / cfg.frame_rate;
        if t > video_duration_s + 1e-9 {
            break;
        }
        out.push(t);
    }
    out
}

/// One utterance joined to the frames that follow its start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodePair {
    pub video_id: String,
    pub start_s: f64,
    pub text: String,
    pub tokens: Vec<u32>,
    pub frames: Vec<FrameId>,
}

/// Builds one pair per record whose frames can be found. Records from videos
/// absent from `store` or with no resolvable frame are dropped and counted.
pub fn build_pairs(
    records: &[UtteranceRecord],
    store: &FeatureStore,
    vocab: &Vocabulary,
    cfg: &PairingConfig,
) -> (Vec<EpisodePair>, DropReport) {
    let mut report = DropReport::default();
    let tolerance = cfg.tolerance_periods / cfg.frame_rate;
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let Some(duration) = store.video_duration(&r.video_id) else {
            report.add(DropReason::UnknownVideo);
            continue;
        };
        let mut frames: Vec<FrameId> = Vec::with_capacity(cfg.max_frames);
        for t in frame_schedule(r.start_s, duration, cfg) {
            if let Some(id) = store.resolve(&r.video_id, t, tolerance) {
                if frames.last() != Some(&id) {
                    frames.push(id);
                }
            }
        }
        if frames.is_empty() {
            report.add(DropReason::NoFrames);
            continue;
        }
        pairs.push(EpisodePair {
            video_id: r.video_id.clone(),
            start_s: r.start_s,
            text: r.text.clone(),
            tokens: vocab.encode(&r.text, cfg.max_len),
            frames,
        });
    }
    (pairs, report)
}

/// One frame of `pair`, uniformly at random.
pub fn sample_frame<R: rand::Rng + ?Sized>(pair: &EpisodePair, rng: &mut R) -> FrameId {
    pair.frames[rng.random_range(0..pair.frames.len())]
}

/// Additive Gaussian jitter on frame features, standing in for pixel-space
/// augmentation. `sigma == 0` returns the features unchanged.
pub fn jitter<R: rand::Rng + ?Sized>(features: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return features.to_vec();
    }
    features
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect()
}
