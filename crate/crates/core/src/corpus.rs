//! Transcript ingestion, cleaning, deduplication, vocabulary and split
//! statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const DEFAULT_MAX_LEN: usize = 48;
pub const DEFAULT_MIN_FREQUENCY: usize = 2;

/// One transcribed utterance as emitted by the ASR stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub speaker: String,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    EmptyAfterClean,
    BadTimestamps,
    AdjacentDuplicate,
    UnknownVideo,
    NoFrames,
}

/// Counts of records removed, by reason.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub dropped: BTreeMap<DropReason, usize>,
    /// Utterances shortened by repeated-phrase collapse (not dropped).
    pub collapsed: usize,
}

impl DropReport {
    pub fn add(&mut self, reason: DropReason) {
        *self.dropped.entry(reason).or_default() += 1;
    }

    pub fn count(&self, reason: DropReason) -> usize {
        self.dropped.get(&reason).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.dropped.values().sum()
    }

    pub fn merge(&mut self, other: &DropReport) {
        for (r, n) in &other.dropped {
            *self.dropped.entry(*r).or_default() += n;
        }
        self.collapsed += other.collapsed;
    }
}

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").unwrap())
}

/// Lowercases, strips Unicode punctuation (general category P) and
/// collapses whitespace. Returns `None` when nothing is left.
pub fn clean_text(raw: &str) -> Option<String> {
    let lowered = raw.to_lowercase();
    let stripped = punctuation().replace_all(&lowered, "");
    let joined = stripped.split_whitespace().collect::<Vec<_>>().join(" ");
    (!joined.is_empty()).then_some(joined)
}

pub fn tokenize(clean: &str) -> Vec<&str> {
    clean.split(' ').filter(|w| !w.is_empty()).collect()
}

/// Parameters for collapsing hallucinated repetitions inside an utterance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseConfig {
    pub max_phrase_len: usize,
    pub min_repeats: usize,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            max_phrase_len: 8,
            min_repeats: 3,
        }
    }
}

fn collapse_pass<T: PartialEq + Clone>(tokens: &[T], cfg: CollapseConfig) -> Vec<T> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    'outer: while i < tokens.len() {
        for n in 1..=cfg.max_phrase_len.min((tokens.len() - i) / cfg.min_repeats.max(1)) {
            let phrase = &tokens[i..i + n];
            let mut k = 1;
            while i + (k + 1) * n <= tokens.len() && &tokens[i + k * n..i + (k + 1) * n] == phrase {
                k += 1;
            }
            if k >= cfg.min_repeats {
                out.extend_from_slice(phrase);
                i += k * n;
                continue 'outer;
            }
        }
        out.push(tokens[i].clone());
        i += 1;
    }
    out
}

/// Collapses any phrase of `1..=max_phrase_len` tokens that repeats
/// back-to-back at least `min_repeats` times to a single copy, scanning left
/// to right with the shortest phrase first, until nothing changes.
pub fn collapse_repeats<T: PartialEq + Clone>(tokens: &[T], cfg: CollapseConfig) -> Vec<T> {
    let mut cur = tokens.to_vec();
    loop {
        let next = collapse_pass(&cur, cfg);
        if next.len() == cur.len() {
            return cur;
        }
        cur = next;
    }
}

/// Cleans text, collapses in-utterance repetitions and removes adjacent
/// utterances (same video) whose cleaned text is identical, keeping the
/// first. Records whose text cleans to nothing are dropped.
///
/// Expects records ordered by `(video_id, start_s)`; see
/// [`sort_records`].
pub fn dedup_filter(records: &[UtteranceRecord], cfg: CollapseConfig) -> (Vec<UtteranceRecord>, DropReport) {
    let mut report = DropReport::default();
    let mut out: Vec<UtteranceRecord> = Vec::with_capacity(records.len());
    for rec in records {
        let Some(clean) = clean_text(&rec.text) else {
            report.add(DropReason::EmptyAfterClean);
            continue;
        };
        let tokens = tokenize(&clean);
        let collapsed = collapse_repeats(&tokens, cfg);
        if collapsed.len() != tokens.len() {
            report.collapsed += 1;
        }
        let text = collapsed.join(" ");
        if let Some(prev) = out.last() {
            if prev.video_id == rec.video_id && prev.text == text {
                report.add(DropReason::AdjacentDuplicate);
                continue;
            }
        }
        out.push(UtteranceRecord { text, ..rec.clone() });
    }
    (out, report)
}

pub fn sort_records(records: &mut [UtteranceRecord]) {
    records.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(a.start_s.partial_cmp(&b.start_s).unwrap_or(std::cmp::Ordering::Equal))
    });
}

/// Validates timestamps and drops records with bad ones.
pub fn validate_records(records: Vec<UtteranceRecord>, report: &mut DropReport) -> Vec<UtteranceRecord> {
    records
        .into_iter()
        .filter(|r| {
            let ok = r.start_s.is_finite() && r.end_s.is_finite() && r.start_s >= 0.0 && r.end_s >= r.start_s;
            if !ok {
                report.add(DropReason::BadTimestamps);
            }
            ok
        })
        .collect()
}

pub fn read_transcripts(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_transcripts(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Word-level vocabulary with `<pad>`, `<unk>`, `<eos>` at ids 0, 1, 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    min_frequency: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_frequency: usize,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Keeps words occurring more than `min_frequency` times. Ids follow
    /// descending count, ties broken lexicographically.
    pub fn build<I, S>(utterances: I, min_frequency: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for u in utterances {
            for w in tokenize(u.as_ref()) {
                any = true;
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c > min_frequency && ![PAD, UNK, EOS].contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = kept.into_iter().map(|(w, _)| w);
        Ok(Self::from_tokens(tokens, min_frequency))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>, min_frequency: usize) -> Self {
        let mut id_to_token: Vec<String> = vec![PAD.into(), UNK.into(), EOS.into()];
        id_to_token.extend(words);
        let token_to_id = id_to_token.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self {
            token_to_id,
            id_to_token,
            min_frequency,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.token_to_id.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.token_to_id.contains_key(word)
    }

    /// Non-special words in id order.
    pub fn words(&self) -> &[String] {
        &self.id_to_token[3..]
    }

    /// Word ids for `clean` text: OOV maps to `<unk>`, `<eos>` is appended
    /// and the sequence is truncated to `max_len` keeping the final `<eos>`.
    pub fn encode(&self, clean: &str, max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(clean)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .take(max_len.saturating_sub(1))
            .collect();
        ids.push(EOS_ID);
        ids
    }

    /// Inverse of [`Vocabulary::encode`], skipping `<pad>` and `<eos>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD_ID && i != EOS_ID)
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile {
            min_frequency: self.min_frequency,
            tokens: self.words().to_vec(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        let mut seen = HashSet::new();
        for w in &f.tokens {
            if [PAD, UNK, EOS].contains(&w.as_str()) || !seen.insert(w) {
                return Err(Error::Format(format!("vocabulary: duplicate or reserved token {w:?}")));
            }
        }
        Ok(Self::from_tokens(f.tokens, f.min_frequency))
    }
}

/// Right-pads sequences with `<pad>` to the longest one.
pub fn pad_batch(seqs: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut s = s.clone();
            s.resize(len, PAD_ID);
            s
        })
        .collect()
}

/// Train/validation/test partition of one split, by video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub split_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn label(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl SplitManifest {
    /// Fails when a video appears in more than one partition.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, Partition> = HashMap::new();
        for p in Partition::ALL {
            for v in self.videos(p) {
                if let Some(prev) = seen.insert(v, p) {
                    return Err(Error::Data(format!(
                        "manifest {}: video {v} is in both {} and {}",
                        self.split_name,
                        prev.label(),
                        p.label()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn videos(&self, p: Partition) -> &[String] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn partition_of(&self, video: &str) -> Option<Partition> {
        Partition::ALL.into_iter().find(|p| self.videos(*p).iter().any(|v| v == video))
    }

    pub fn lookup(&self) -> HashMap<&str, Partition> {
        Partition::ALL
            .into_iter()
            .flat_map(|p| self.videos(p).iter().map(move |v| (v.as_str(), p)))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SplitManifest = serde_json::from_str(&s).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub videos: usize,
    pub utterances: usize,
    pub avg_utterance_length: f64,
    pub frames: Option<usize>,
    pub avg_frames_per_utterance: Option<f64>,
    pub total_words: usize,
}

impl PartitionStats {
    fn finish(&mut self) {
        self.avg_utterance_length = if self.utterances == 0 {
            0.0
        } else {
            self.total_words as f64 / self.utterances as f64
        };
        self.avg_frames_per_utterance = self
            .frames
            .map(|f| if self.utterances == 0 { 0.0 } else { f as f64 / self.utterances as f64 });
    }
}

/// Per-partition descriptives for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split_name: String,
    pub train: PartitionStats,
    pub val: PartitionStats,
    pub test: PartitionStats,
    pub total: PartitionStats,
    pub vocabulary_size: Option<usize>,
}

impl SplitStats {
    pub fn get(&self, p: Partition) -> &PartitionStats {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    fn get_mut(&mut self, p: Partition) -> &mut PartitionStats {
        match p {
            Partition::Train => &mut self.train,
            Partition::Val => &mut self.val,
            Partition::Test => &mut self.test,
        }
    }

    /// Adds extracted-frame counts per partition.
    pub fn with_frames(mut self, frames: [usize; 3]) -> Self {
        for (p, f) in Partition::ALL.into_iter().zip(frames) {
            self.get_mut(p).frames = Some(f);
            self.get_mut(p).finish();
        }
        self.total.frames = Some(frames.iter().sum());
        self.total.finish();
        self
    }

    pub fn with_vocabulary_size(mut self, size: usize) -> Self {
        self.vocabulary_size = Some(size);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    /// Aligned plain-text table, one row per statistic.
    pub fn to_table(&self) -> String {
        let cols = [&self.train, &self.val, &self.test, &self.total];
        let mut rows: Vec<(String, [String; 4])> = vec![
            ("Number of videos".into(), cols.map(|c| c.videos.to_string())),
            ("Number of utterances".into(), cols.map(|c| c.utterances.to_string())),
            ("Avg. utterance length".into(), cols.map(|c| format!("{:.2}", c.avg_utterance_length))),
        ];
        if self.total.frames.is_some() {
            rows.push((
                "Number of extracted frames".into(),
                cols.map(|c| c.frames.map_or("-".into(), |f| f.to_string())),
            ));
            rows.push((
                "Avg. frames per utterance".into(),
                cols.map(|c| c.avg_frames_per_utterance.map_or("-".into(), |f| format!("{f:.2}"))),
            ));
        }
        rows.push(("Total words".into(), cols.map(|c| c.total_words.to_string())));
        let vocab = self.vocabulary_size.map_or("-".into(), |v| v.to_string());
        rows.push(("Vocabulary size".into(), ["-".into(), "-".into(), "-".into(), vocab]));

        let head = ["Train", "Validation", "Test", "Total"];
        let label_w = rows.iter().map(|r| r.0.len()).max().unwrap().max(self.split_name.len());
        let col_w: Vec<usize> = (0..4)
            .map(|i| rows.iter().map(|r| r.1[i].len()).max().unwrap().max(head[i].len()))
            .collect();
        let mut s = String::new();
        let _ = write!(s, "{:<label_w$}", self.split_name);
        for (h, w) in head.iter().zip(&col_w) {
            let _ = write!(s, "  {h:>w$}");
        }
        s.push('\n');
        for (label, vals) in &rows {
            let _ = write!(s, "{label:<label_w$}");
            for (v, w) in vals.iter().zip(&col_w) {
                let _ = write!(s, "  {v:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

/// Counts videos, utterances and words per partition. Word counts come from
/// the whitespace tokenization of each record's text.
pub fn split_stats(manifest: &SplitManifest, records: &[UtteranceRecord]) -> Result<SplitStats> {
    let lookup = manifest.lookup();
    let mut stats = SplitStats {
        split_name: manifest.split_name.clone(),
        train: PartitionStats::default(),
        val: PartitionStats::default(),
        test: PartitionStats::default(),
        total: PartitionStats::default(),
        vocabulary_size: None,
    };
    for r in records {
        let p = *lookup.get(r.video_id.as_str()).ok_or_else(|| {
            Error::Data(format!(
                "video {} has utterances but is not in manifest {}",
                r.video_id, manifest.split_name
            ))
        })?;
        let words = tokenize(&r.text).len();
        let part = stats.get_mut(p);
        part.utterances += 1;
        part.total_words += words;
        stats.total.utterances += 1;
        stats.total.total_words += words;
    }
    for p in Partition::ALL {
        stats.get_mut(p).videos = manifest.videos(p).len();
        stats.get_mut(p).finish();
    }
    stats.total.videos = Partition::ALL.iter().map(|p| manifest.videos(*p).len()).sum();
    stats.total.finish();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(video: &str, start: f64, text: &str) -> UtteranceRecord {
        UtteranceRecord {
            video_id: video.into(),
            start_s: start,
            end_s: start + 1.0,
            speaker: "SPEAKER_00".into(),
            text: text.into(),
        }
    }

    #[test]
    fn cleaning_examples() {
        assert_eq!(clean_text("Look, a BALL!").as_deref(), Some("look a ball"));
        assert_eq!(clean_text("   "), None);
        assert_eq!(clean_text("don't touch").as_deref(), Some("dont touch"));
        // typographic apostrophe and dashes are punctuation too
        assert_eq!(clean_text("Don\u{2019}t \u{2014} stop").as_deref(), Some("dont stop"));
        assert_eq!(clean_text("?!...").as_deref(), None);
    }

    #[test]
    fn adjacent_duplicates_keep_first() {
        let recs = vec![rec("v", 0.0, "the ball"), rec("v", 2.0, "The ball!"), rec("v", 4.0, "the ball")];
        let (out, rep) = dedup_filter(&recs, CollapseConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].start_s, 0.0);
        assert_eq!(rep.count(DropReason::AdjacentDuplicate), 2);
    }

    #[test]
    fn different_texts_and_videos_are_kept() {
        let recs = vec![rec("v", 0.0, "the ball"), rec("v", 2.0, "a ball"), rec("w", 0.0, "a ball")];
        let (out, rep) = dedup_filter(&recs, CollapseConfig::default());
        assert_eq!(out.len(), 3);
        assert_eq!(rep.total(), 0);
    }

    #[test]
    fn repeated_word_collapses() {
        let cfg = CollapseConfig::default();
        let toks = tokenize("no no no no no no");
        assert_eq!(collapse_repeats(&toks, cfg), vec!["no"]);
        // natural doubles survive
        assert_eq!(collapse_repeats(&tokenize("no no look"), cfg), vec!["no", "no", "look"]);
        assert_eq!(
            collapse_repeats(&tokenize("thank you thank you thank you so much"), cfg),
            vec!["thank", "you", "so", "much"]
        );
    }

    #[test]
    fn vocabulary_threshold_and_ties() {
        let corpus = vec!["ball ball ball ball ball cat cat dog"];
        let v = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(v.words(), &["ball".to_string()]);
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.id(UNK), Some(1));
        assert_eq!(v.id(EOS), Some(2));

        let v = Vocabulary::build(["b a b a b a"], 2).unwrap();
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4));
        assert!(Vocabulary::build(Vec::<String>::new(), 2).is_err());
    }

    #[test]
    fn specials_in_text_do_not_collide() {
        let v = Vocabulary::build(["<pad> <pad> <pad> x x x"], 2).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id(PAD), Some(PAD_ID));
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(["look a ball look a ball look a ball"], 2).unwrap();
        let ids = v.encode("look a ball", DEFAULT_MAX_LEN);
        assert_eq!(ids, vec![v.id("look").unwrap(), v.id("a").unwrap(), v.id("ball").unwrap(), EOS_ID]);
        assert_eq!(v.encode("zyxwv ball", 48), vec![UNK_ID, v.id("ball").unwrap(), EOS_ID]);
        let long = vec!["ball"; 60].join(" ");
        let ids = v.encode(&long, 48);
        assert_eq!(ids.len(), 48);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        let padded = pad_batch(&[vec![5, 2], vec![5, 6, 7, 2]]);
        assert_eq!(padded[0], vec![5, 2, PAD_ID, PAD_ID]);
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = Vocabulary::build(["a a a b b b c"], 2).unwrap();
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
        assert!(Vocabulary::from_json(r#"{"min_frequency":2,"tokens":["a","a"]}"#).is_err());
    }

    #[test]
    fn manifest_must_be_disjoint() {
        let mut m = SplitManifest {
            split_name: "s".into(),
            source: None,
            train: vec!["a".into(), "b".into()],
            val: vec!["c".into()],
            test: vec![],
        };
        assert!(m.validate().is_ok());
        m.test.push("a".into());
        assert!(m.validate().is_err());
    }

    #[test]
    fn stats_average_and_empty_partition() {
        let m = SplitManifest {
            split_name: "s".into(),
            source: None,
            train: vec!["a".into()],
            val: vec![],
            test: vec!["t".into()],
        };
        let recs = vec![rec("a", 0.0, "a b"), rec("a", 1.0, "c d e")];
        let s = split_stats(&m, &recs).unwrap();
        assert_eq!(s.train.avg_utterance_length, 2.5);
        assert_eq!(s.val, PartitionStats::default());
        assert_eq!(s.test.utterances, 0);
        assert_eq!(s.test.avg_utterance_length, 0.0);
        assert!(split_stats(&m, &[rec("zzz", 0.0, "x")]).is_err());
        let table = s.with_frames([3, 0, 0]).with_vocabulary_size(7).to_table();
        assert!(table.contains("Avg. frames per utterance"));
        assert!(table.contains("Vocabulary size"));
    }

    proptest! {
        #[test]
        fn clean_text_is_idempotent(s in "\\PC{0,40}") {
            if let Some(c) = clean_text(&s) {
                prop_assert_eq!(clean_text(&c), Some(c.clone()));
            }
        }

        #[test]
        fn collapse_is_idempotent(toks in prop::collection::vec(0u8..3, 0..40)) {
            let cfg = CollapseConfig::default();
            let once = collapse_repeats(&toks, cfg);
            prop_assert_eq!(collapse_repeats(&once, cfg), once.clone());
        }

        #[test]
        fn dedup_is_idempotent(texts in prop::collection::vec(prop::sample::select(vec!["the ball", "a ball", "no no no", "ball", "?"]), 0..20)) {
            let recs: Vec<_> = texts.iter().enumerate().map(|(i, t)| rec(if i % 7 == 6 { "w" } else { "v" }, i as f64, t)).collect();
            let cfg = CollapseConfig::default();
            let (once, _) = dedup_filter(&recs, cfg);
            let (twice, report) = dedup_filter(&once, cfg);
            prop_assert_eq!(&twice, &once);
            prop_assert_eq!(report.total(), 0);
        }

        #[test]
        fn encode_decode_round_trip(words in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..47)) {
            let v = Vocabulary::build(["a a a b b b c c c d d d"], 2).unwrap();
            let text = words.join(" ");
            let ids = v.encode(&text, DEFAULT_MAX_LEN);
            prop_assert_eq!(v.decode(&ids), text);
        }
    }
}
