//! Assembles transcripts, frame features and a split manifest into
//! per-partition training pairs with a training-set vocabulary.

use serde::{Deserialize, Serialize};

use crate::corpus::{self, CollapseConfig, DropReport, Partition, SplitManifest, SplitStats, UtteranceRecord, Vocabulary};
use crate::error::Result;
use crate::pairing::{build_pairs, EpisodePair, FeatureStore, PairingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    pub min_frequency: usize,
    pub max_len: usize,
    pub max_frames: usize,
    pub frame_rate: f64,
    pub tolerance_periods: f64,
    pub max_phrase_len: usize,
    pub min_repeats: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        let p = PairingConfig::default();
        let c = CollapseConfig::default();
        Self {
            min_frequency: corpus::DEFAULT_MIN_FREQUENCY,
            max_len: p.max_len,
            max_frames: p.max_frames,
            frame_rate: p.frame_rate,
            tolerance_periods: p.tolerance_periods,
            max_phrase_len: c.max_phrase_len,
            min_repeats: c.min_repeats,
        }
    }
}

impl BuildConfig {
    pub fn pairing(&self) -> PairingConfig {
        PairingConfig {
            max_frames: self.max_frames,
            frame_rate: self.frame_rate,
            tolerance_periods: self.tolerance_periods,
            max_len: self.max_len,
        }
    }

    pub fn collapse(&self) -> CollapseConfig {
        CollapseConfig {
            max_phrase_len: self.max_phrase_len,
            min_repeats: self.min_repeats,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<EpisodePair>,
    pub val: Vec<EpisodePair>,
    pub test: Vec<EpisodePair>,
    pub stats: SplitStats,
    pub drops: DropReport,
}

impl Dataset {
    pub fn pairs(&self, p: Partition) -> &[EpisodePair] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// Validates and sorts the records, removes duplicates, builds the
    /// vocabulary from training utterances only, and pairs every partition
    /// with its frames. Corpus statistics count paired utterances only.
    pub fn build(
        records: Vec<UtteranceRecord>,
        store: &FeatureStore,
        manifest: &SplitManifest,
        cfg: &BuildConfig,
    ) -> Result<Self> {
        manifest.validate()?;
        let mut drops = DropReport::default();
        let mut records = corpus::validate_records(records, &mut drops);
        corpus::sort_records(&mut records);
        let (records, d) = corpus::dedup_filter(&records, cfg.collapse());
        drops.merge(&d);

        let lookup = manifest.lookup();
        let mut parts: [Vec<UtteranceRecord>; 3] = Default::default();
        for r in records {
            match lookup.get(r.video_id.as_str()) {
                Some(p) => {
                    parts[*p as usize].push(r);
                }
                None => drops.add(corpus::DropReason::UnknownVideo),
            }
        }
        let vocab = Vocabulary::build(parts[0].iter().map(|r| r.text.as_str()), cfg.min_frequency)?;
        let pcfg = cfg.pairing();
        let mut pairs: [Vec<EpisodePair>; 3] = Default::default();
        let mut frames = [0usize; 3];
        for i in 0..3 {
            let (p, d) = build_pairs(&parts[i], store, &vocab, &pcfg);
            drops.merge(&d);
            frames[i] = p.iter().map(|p| p.frames.len()).sum();
            pairs[i] = p;
        }
        let paired: Vec<UtteranceRecord> = pairs
            .iter()
            .flatten()
            .map(|p| UtteranceRecord {
                video_id: p.video_id.clone(),
                start_s: p.start_s,
                end_s: p.start_s,
                speaker: String::new(),
                text: p.text.clone(),
            })
            .collect();
        let stats = corpus::split_stats(manifest, &paired)?
            .with_frames(frames)
            .with_vocabulary_size(vocab.len());
        let [train, val, test] = pairs;
        Ok(Self {
            vocab,
            train,
            val,
            test,
            stats,
            drops,
        })
    }
}
