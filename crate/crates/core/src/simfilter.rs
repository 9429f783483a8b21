//! Frame-text similarity scoring, validation filtering, and automatic frame
//! labeling for evaluation-set construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::pairing::{sample_frame, EpisodePair, FeatureStore, FrameFeature, FrameId};

pub const DEFAULT_THRESHOLD: f64 = 0.24;
pub const DEFAULT_CONCRETENESS_MIN: f64 = 4.8;
pub const DEFAULT_MIN_INSTANCES: usize = 10;

/// Cosine-like score between a frame and a piece of text, in `[-1, 1]`.
pub trait SimilarityScorer {
    fn score(&self, frame: &FrameFeature, text: &str) -> Result<f64>;
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreLine {
    frame: String,
    concept: String,
    score: f64,
}

/// Precomputed scores keyed by (frame key, text), read from JSON Lines
/// `{"frame": .., "concept": .., "score": ..}`.
#[derive(Clone, Debug, Default)]
pub struct ExternalScores {
    scores: HashMap<(String, String), f64>,
}

impl ExternalScores {
    pub fn insert(&mut self, frame_key: impl Into<String>, text: impl Into<String>, score: f64) -> Result<()> {
        if !(-1.0..=1.0).contains(&score) {
            return Err(Error::Data(format!("score {score} outside [-1, 1]")));
        }
        self.scores.insert((frame_key.into(), text.into()), score);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Self::default();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let l: ScoreLine = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
            out.insert(l.frame, l.concept, l.score).map_err(|e| parse(e.to_string()))?;
        }
        Ok(out)
    }
}

impl SimilarityScorer for ExternalScores {
    fn score(&self, frame: &FrameFeature, text: &str) -> Result<f64> {
        let key = frame.key();
        self.scores
            .get(&(key.clone(), text.to_string()))
            .copied()
            .ok_or_else(|| Error::Data(format!("no external score for frame {key} and text {text:?}")))
    }
}

/// A validation pair with the frame it is always scored on.
#[derive(Clone, Debug)]
pub struct ValPair {
    pub pair: EpisodePair,
    pub frame: FrameId,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub threshold: f64,
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
}

impl FilterReport {
    pub fn to_table(&self) -> String {
        format!(
            "threshold\tinput\tkept\tdropped\n{}\t{}\t{}\t{}\n",
            self.threshold, self.input, self.kept, self.dropped
        )
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [-1, 1]")));
    }
    Ok(())
}

/// Scores each pair on one randomly chosen frame and keeps it iff the score
/// exceeds `threshold`. Frame choices depend only on the RNG, never on the
/// scores, so a higher threshold keeps a subset.
pub fn filter_validation<R: rand::Rng + ?Sized>(
    pairs: &[EpisodePair],
    store: &FeatureStore,
    scorer: &dyn SimilarityScorer,
    threshold: f64,
    rng: &mut R,
) -> Result<(Vec<ValPair>, FilterReport)> {
    check_threshold(threshold)?;
    let mut kept = Vec::new();
    for pair in pairs {
        let frame = sample_frame(pair, rng);
        let score = scorer.score(store.get(frame), &pair.text)?;
        if score > threshold {
            kept.push(ValPair {
                pair: pair.clone(),
                frame,
                score,
            });
        }
    }
    let report = FilterReport {
        threshold,
        input: pairs.len(),
        kept: kept.len(),
        dropped: pairs.len() - kept.len(),
    };
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "validation filter at threshold {threshold} kept none of {} pairs; lower the threshold",
            pairs.len()
        )));
    }
    Ok((kept, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconEntry {
    pub word: String,
    pub concreteness: f64,
    pub pos: String,
}

/// Concreteness ratings with part-of-speech tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConceptLexicon {
    entries: Vec<LexiconEntry>,
}

impl ConceptLexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self> {
        for e in &entries {
            if !(1.0..=5.0).contains(&e.concreteness) {
                return Err(Error::Data(format!(
                    "concreteness {} for {:?} outside [1, 5]",
                    e.concreteness, e.word
                )));
            }
            if e.word != e.word.to_lowercase() || e.word.is_empty() {
                return Err(Error::Data(format!("lexicon word {:?} must be non-empty lowercase", e.word)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    /// CSV with header `word,concreteness,pos`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<LexiconEntry>, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Lexicon words rated strictly above `concreteness_min`, tagged with a POS
/// in `pos_set`, and present in every vocabulary. Sorted, no duplicates.
pub fn candidate_concepts(
    lexicon: &ConceptLexicon,
    vocabularies: &[&Vocabulary],
    concreteness_min: f64,
    pos_set: &[&str],
) -> Result<Vec<String>> {
    if vocabularies.is_empty() {
        return Err(Error::Config("candidate concepts need at least one vocabulary".into()));
    }
    let out: BTreeSet<String> = lexicon
        .entries
        .iter()
        .filter(|e| e.concreteness > concreteness_min)
        .filter(|e| pos_set.iter().any(|p| p.eq_ignore_ascii_case(&e.pos)))
        .filter(|e| vocabularies.iter().all(|v| v.contains(&e.word)))
        .map(|e| e.word.clone())
        .collect();
    Ok(out.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub label: String,
    pub score: f64,
}

/// Highest-scoring concept per frame if that score exceeds `threshold`.
/// Ties go to the lexicographically first concept.
pub fn auto_label(
    frames: &[&FrameFeature],
    concepts: &[String],
    scorer: &dyn SimilarityScorer,
    threshold: f64,
) -> Result<Vec<Option<FrameLabel>>> {
    check_threshold(threshold)?;
    if concepts.is_empty() {
        return Err(Error::Config("auto-labeling needs at least one concept".into()));
    }
    let mut sorted: Vec<&String> = concepts.iter().collect();
    sorted.sort();
    sorted.dedup();
    frames
        .iter()
        .map(|f| {
            let mut best: Option<(&String, f64)> = None;
            for c in &sorted {
                let s = scorer.score(f, c)?;
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((c, s));
                }
            }
            let (c, s) = best.unwrap();
            Ok((s > threshold).then(|| FrameLabel {
                label: c.clone(),
                score: s,
            }))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AcceptRow {
    source: String,
    frame: String,
    label: String,
    verdict: Verdict,
}

/// Manual review verdicts keyed by (source, frame key, label). Anything not
/// listed is accepted.
#[derive(Clone, Debug, Default)]
pub struct AcceptList {
    verdicts: HashMap<(String, String, String), Verdict>,
}

impl AcceptList {
    pub fn insert(&mut self, source: &str, frame_key: &str, label: &str, verdict: Verdict) {
        self.verdicts
            .insert((source.to_string(), frame_key.to_string(), label.to_string()), verdict);
    }

    pub fn accepts(&self, source: &str, frame_key: &str, label: &str) -> bool {
        self.verdicts
            .get(&(source.to_string(), frame_key.to_string(), label.to_string()))
            .is_none_or(|v| *v == Verdict::Accept)
    }

    /// Later verdicts for the same key win.
    pub fn extend(&mut self, other: AcceptList) {
        self.verdicts.extend(other.verdicts);
    }

    /// CSV with header `source,frame,label,verdict`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut out = Self::default();
        for row in r.deserialize() {
            let row: AcceptRow = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            out.insert(&row.source, &row.frame, &row.label, row.verdict);
        }
        Ok(out)
    }
}

/// A labeled frame from one source (one child's recordings, or one
/// synthetic world partition).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub source: String,
    pub frame: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Categories {
    /// Category name to frame keys, in input order.
    pub pools: BTreeMap<String, Vec<String>>,
}

impl Categories {
    pub fn names(&self) -> Vec<&str> {
        self.pools.keys().map(String::as_str).collect()
    }
}

/// Applies manual verdicts, then keeps categories with at least
/// `min_instances` accepted frames in every source.
pub fn finalize_categories(labeled: &[LabeledFrame], accept: &AcceptList, min_instances: usize) -> Result<Categories> {
    let sources: BTreeSet<&str> = labeled.iter().map(|l| l.source.as_str()).collect();
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    let mut pools: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for l in labeled.iter().filter(|l| accept.accepts(&l.source, &l.frame, &l.label)) {
        *counts.entry(&l.label).or_default().entry(&l.source).or_default() += 1;
        pools.entry(l.label.clone()).or_default().push(l.frame.clone());
    }
    pools.retain(|label, _| {
        let c = &counts[label.as_str()];
        sources.iter().all(|s| c.get(s).copied().unwrap_or(0) >= min_instances)
    });
    if pools.is_empty() {
        return Err(Error::Data(format!(
            "no category has {min_instances} or more accepted frames in each of {} sources",
            sources.len()
        )));
    }
    Ok(Categories { pools })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    /// Scores a frame by its first feature, ignoring the text.
    struct FirstFeature;

    impl SimilarityScorer for FirstFeature {
        fn score(&self, frame: &FrameFeature, _: &str) -> Result<f64> {
            Ok(frame.features[0])
        }
    }

    /// Looks the concept up in a per-frame table.
    struct Table(HashMap<(String, String), f64>);

    impl SimilarityScorer for Table {
        fn score(&self, frame: &FrameFeature, text: &str) -> Result<f64> {
            Ok(self.0[&(frame.key(), text.to_string())])
        }
    }

    fn fixture() -> (FeatureStore, Vec<EpisodePair>) {
        let mut store = FeatureStore::new(1);
        let mut pairs = Vec::new();
        for i in 0..20 {
            let mut frames = Vec::new();
            for k in 0..4 {
                let v = ((i * 4 + k) as f64 * 0.37).sin();
                frames.push(
                    store
                        .push(FrameFeature {
                            video_id: "v".into(),
                            timestamp_s: (i * 4 + k) as f64,
                            features: vec![v],
                        })
                        .unwrap(),
                );
            }
            pairs.push(EpisodePair {
                video_id: "v".into(),
                start_s: i as f64 * 4.0,
                text: format!("utt {i}"),
                tokens: vec![3, 2],
                frames,
            });
        }
        (store, pairs)
    }

    #[test]
    fn threshold_minus_one_keeps_all() {
        let (store, pairs) = fixture();
        let (kept, r) = filter_validation(&pairs, &store, &FirstFeature, -1.0, &mut seed::rng(1, 0)).unwrap();
        assert_eq!((kept.len(), r.kept, r.dropped, r.input), (20, 20, 0, 20));
    }

    #[test]
    fn filter_counts_match_brute_force() {
        let (store, pairs) = fixture();
        let mut prev = usize::MAX;
        for t in [-0.5, 0.0, 0.24, 0.5, 0.9] {
            let mut rng = seed::rng(7, 0);
            let picks: Vec<FrameId> = pairs.iter().map(|p| sample_frame(p, &mut rng)).collect();
            let want = picks.iter().filter(|id| store.get(**id).features[0] > t).count();
            match filter_validation(&pairs, &store, &FirstFeature, t, &mut seed::rng(7, 0)) {
                Ok((kept, r)) => {
                    assert_eq!(r.kept, want);
                    assert_eq!(r.kept + r.dropped, 20);
                    assert!(kept.iter().all(|k| k.score > t));
                    assert!(r.kept <= prev);
                    prev = r.kept;
                }
                Err(_) => assert_eq!(want, 0),
            }
        }
    }

    #[test]
    fn empty_filter_result_is_an_error() {
        let (store, pairs) = fixture();
        assert!(filter_validation(&pairs, &store, &FirstFeature, 1.0, &mut seed::rng(1, 0)).is_err());
    }

    fn vocab(words: &str) -> Vocabulary {
        let text: Vec<String> = (0..3).map(|_| words.to_string()).collect();
        Vocabulary::build(text.iter().map(String::as_str), 2).unwrap()
    }

    fn entry(word: &str, concreteness: f64, pos: &str) -> LexiconEntry {
        LexiconEntry {
            word: word.into(),
            concreteness,
            pos: pos.into(),
        }
    }

    #[test]
    fn candidate_rules() {
        let lex = ConceptLexicon::new(vec![
            entry("ball", 4.9, "NOUN"),
            entry("car", 4.8, "NOUN"),
            entry("run", 4.85, "VERB"),
            entry("red", 4.9, "ADJ"),
            entry("cat", 5.0, "NOUN"),
        ])
        .unwrap();
        let a = vocab("ball car run red cat");
        let b = vocab("ball car run red");
        let got = candidate_concepts(&lex, &[&a, &b], 4.8, &["NOUN", "VERB"]).unwrap();
        assert_eq!(got, ["ball", "run"]);
        assert!(candidate_concepts(&lex, &[], 4.8, &["NOUN"]).is_err());
        assert!(ConceptLexicon::new(vec![entry("ball", 5.5, "NOUN")]).is_err());
        assert!(ConceptLexicon::new(vec![entry("Ball", 4.0, "NOUN")]).is_err());
    }

    fn frame(t: f64) -> FrameFeature {
        FrameFeature {
            video_id: "v".into(),
            timestamp_s: t,
            features: vec![0.0],
        }
    }

    #[test]
    fn auto_label_argmax_threshold_and_ties() {
        let f = [frame(0.0), frame(1.0), frame(2.0)];
        let concepts = vec!["cup".to_string(), "ball".to_string()];
        let mut t = HashMap::new();
        let mut set = |i: usize, c: &str, s: f64| t.insert((f[i].key(), c.to_string()), s);
        set(0, "ball", 0.3);
        set(0, "cup", 0.5);
        set(1, "ball", 0.1);
        set(1, "cup", 0.2);
        set(2, "ball", 0.4);
        set(2, "cup", 0.4);
        let table = Table(t);
        let refs: Vec<&FrameFeature> = f.iter().collect();
        let got = auto_label(&refs, &concepts, &table, 0.24).unwrap();
        assert_eq!(got[0].as_ref().unwrap().label, "cup");
        assert!(got[1].is_none());
        assert_eq!(got[2].as_ref().unwrap().label, "ball");
        assert!(auto_label(&refs, &concepts, &table, 0.6).unwrap().iter().all(Option::is_none));

        let scaled = Table(table.0.iter().map(|(k, v)| (k.clone(), v * 2.0)).collect());
        let again = auto_label(&refs, &concepts, &scaled, 0.48).unwrap();
        let labels = |v: &[Option<FrameLabel>]| v.iter().map(|l| l.as_ref().map(|l| l.label.clone())).collect::<Vec<_>>();
        assert_eq!(labels(&got), labels(&again));
    }

    fn lf(source: &str, frame: usize, label: &str) -> LabeledFrame {
        LabeledFrame {
            source: source.into(),
            frame: format!("f{frame}"),
            label: label.into(),
        }
    }

    #[test]
    fn min_instances_in_every_source() {
        let mut labeled = Vec::new();
        for i in 0..10 {
            labeled.push(lf("a", i, "ball"));
            labeled.push(lf("b", 100 + i, "ball"));
            labeled.push(lf("a", 200 + i, "cup"));
        }
        for i in 0..9 {
            labeled.push(lf("b", 300 + i, "cup"));
        }
        let cats = finalize_categories(&labeled, &AcceptList::default(), 10).unwrap();
        assert_eq!(cats.names(), ["ball"]);
        assert_eq!(cats.pools["ball"].len(), 20);

        let mut accept = AcceptList::default();
        accept.insert("a", "f0", "ball", Verdict::Reject);
        assert!(finalize_categories(&labeled, &accept, 10).is_err());
    }

    #[test]
    fn csv_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lex = ConceptLexicon::new(vec![entry("ball", 4.9, "NOUN"), entry("run", 4.2, "VERB")]).unwrap();
        let p = dir.path().join("lex.csv");
        lex.save(&p).unwrap();
        assert_eq!(ConceptLexicon::load(&p).unwrap(), lex);

        let p = dir.path().join("accept.csv");
        std::fs::write(&p, "source,frame,label,verdict\na,v@1.0000,ball,reject\nb,v@2.0000,cup,accept\n").unwrap();
        let acc = AcceptList::load(&p).unwrap();
        assert!(!acc.accepts("a", "v@1.0000", "ball"));
        assert!(acc.accepts("b", "v@2.0000", "cup"));
        assert!(acc.accepts("z", "v@1.0000", "ball"));

        let p = dir.path().join("scores.jsonl");
        std::fs::write(&p, "{\"frame\":\"v@0.0000\",\"concept\":\"ball\",\"score\":0.3}\n").unwrap();
        let s = ExternalScores::load(&p).unwrap();
        assert_eq!(s.score(&frame(0.0), "ball").unwrap(), 0.3);
        assert!(s.score(&frame(0.0), "cup").is_err());
        std::fs::write(&p, "{\"frame\":\"x\",\"concept\":\"c\",\"score\":1.5}\n").unwrap();
        assert!(ExternalScores::load(&p).is_err());
    }
}
