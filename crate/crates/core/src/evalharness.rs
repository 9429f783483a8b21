//! Four-way looking-while-listening trials: construction, classification by
//! cosine similarity, and accuracy aggregation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use numcore::cosine;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, EOS_ID};
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::pairing::{FeatureStore, FrameFeature};
use crate::seed;

pub const DEFAULT_TRIALS_PER_CATEGORY: usize = 100;
pub const N_CHOICES: usize = 4;

/// One trial. The target frame is choice 0; `categories[i]` is the
/// category of choice `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTrial {
    pub target_word: String,
    pub target_frame: String,
    pub distractors: [String; 3],
    pub categories: [String; 4],
}

impl EvalTrial {
    pub fn frames(&self) -> [&str; 4] {
        [
            &self.target_frame,
            &self.distractors[0],
            &self.distractors[1],
            &self.distractors[2],
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub trials: Vec<EvalTrial>,
    /// Categories with no vocabulary entry, never used as targets.
    pub skipped: Vec<String>,
}

/// `trials_per_category` trials per in-vocabulary category. Each trial
/// draws a target frame from its category's pool, then three distinct other
/// categories and one frame from each.
pub fn build_trials<R: Rng + ?Sized>(
    pools: &BTreeMap<String, Vec<String>>,
    trials_per_category: usize,
    vocab: Option<&Vocabulary>,
    rng: &mut R,
) -> Result<TrialSet> {
    if pools.len() < N_CHOICES {
        return Err(Error::Data(format!(
            "4-way trials need at least 4 categories, got {}",
            pools.len()
        )));
    }
    if let Some((c, _)) = pools.iter().find(|(_, p)| p.is_empty()) {
        return Err(Error::Data(format!("category {c} has no frames")));
    }
    let names: Vec<&String> = pools.keys().collect();
    let mut set = TrialSet::default();
    for (ci, &cat) in names.iter().enumerate() {
        if vocab.is_some_and(|v| !v.contains(cat)) {
            set.skipped.push(cat.clone());
            continue;
        }
        for _ in 0..trials_per_category {
            let pool = &pools[cat];
            let target = pool[rng.random_range(0..pool.len())].clone();
            let others = sample(rng, names.len() - 1, 3);
            let mut cats = [cat.clone(), String::new(), String::new(), String::new()];
            let mut distractors = [String::new(), String::new(), String::new()];
            for (k, o) in others.iter().enumerate() {
                let d = names[if o >= ci { o + 1 } else { o }];
                let p = &pools[d];
                distractors[k] = p[rng.random_range(0..p.len())].clone();
                cats[k + 1] = d.clone();
            }
            set.trials.push(EvalTrial {
                target_word: cat.clone(),
                target_frame: target,
                distractors,
                categories: cats,
            });
        }
    }
    if set.trials.is_empty() {
        return Err(Error::Data("every category is out of vocabulary".into()));
    }
    Ok(set)
}

pub fn write_trials(path: &Path, trials: &[EvalTrial]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for t in trials {
        let line = serde_json::to_string(t).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: &Path) -> Result<Vec<EvalTrial>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Anything that maps words and frames into a shared space.
pub trait Embedder {
    fn embed_word(&self, word: &str) -> Result<Vec<f64>>;
    fn embed_frames(&self, frames: &[&FrameFeature]) -> Result<Vec<Vec<f64>>>;
}

/// How a target word is fed to the language encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    /// `[word]` for the embedding encoder, `[word, <eos>]` for transformers.
    #[default]
    Auto,
    Word,
    WordEos,
}

pub struct ModelEmbedder<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
    pub prompt: Prompt,
}

impl Embedder for ModelEmbedder<'_> {
    fn embed_word(&self, word: &str) -> Result<Vec<f64>> {
        let id = self
            .vocab
            .id(word)
            .ok_or_else(|| Error::Data(format!("target word {word:?} is not in the vocabulary")))?;
        let with_eos = match self.prompt {
            Prompt::Auto => self.model.variant().uses_transformer(),
            Prompt::Word => false,
            Prompt::WordEos => true,
        };
        let seq = if with_eos { vec![id, EOS_ID] } else { vec![id] };
        Ok(self.model.embed_utterances(&[seq])?.remove(0))
    }

    fn embed_frames(&self, frames: &[&FrameFeature]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(256) {
            let rows: Vec<&[f64]> = chunk.iter().map(|f| f.features.as_slice()).collect();
            out.extend(self.model.embed_frames(&rows)?);
        }
        Ok(out)
    }
}

/// Independent Gaussian embeddings keyed by a hash of the word or frame
/// key, so every trial is an independent fair guess.
pub struct RandomEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl RandomEmbedder {
    fn vector(&self, key: &str, stream: u64) -> Vec<f64> {
        let h = key
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        let mut rng = seed::rng(self.seed ^ seed::splitmix64(h), stream);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl Embedder for RandomEmbedder {
    fn embed_word(&self, word: &str) -> Result<Vec<f64>> {
        Ok(self.vector(word, 0))
    }

    fn embed_frames(&self, frames: &[&FrameFeature]) -> Result<Vec<Vec<f64>>> {
        Ok(frames.iter().map(|f| self.vector(&f.key(), 1)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub target_word: String,
    pub chosen: usize,
    pub similarities: [f64; 4],
    pub correct: bool,
}

/// Index of the highest similarity. On ties the later index wins, so a tie
/// with the target (index 0) counts as an error.
pub fn choose(similarities: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..N_CHOICES {
        if similarities[i] >= similarities[best] {
            best = i;
        }
    }
    best
}

fn classify_with(word: &[f64], frames: [&[f64]; 4], target_word: &str) -> TrialResult {
    let similarities = frames.map(|f| cosine(word, f));
    let chosen = choose(&similarities);
    TrialResult {
        target_word: target_word.to_string(),
        chosen,
        similarities,
        correct: chosen == 0,
    }
}

fn lookup<'s>(store: &'s FeatureStore, key: &str) -> Result<&'s FrameFeature> {
    store
        .by_key(key)
        .map(|id| store.get(id))
        .ok_or_else(|| Error::Data(format!("trial frame {key} is not in the feature store")))
}

/// Classifies one trial.
pub fn classify(embedder: &dyn Embedder, trial: &EvalTrial, store: &FeatureStore) -> Result<TrialResult> {
    let word = embedder.embed_word(&trial.target_word)?;
    let frames = trial
        .frames()
        .iter()
        .map(|k| lookup(store, k))
        .collect::<Result<Vec<_>>>()?;
    let e = embedder.embed_frames(&frames)?;
    Ok(classify_with(&word, [&e[0], &e[1], &e[2], &e[3]], &trial.target_word))
}

/// Classifies every trial, embedding each distinct word and frame once.
pub fn run_trials(embedder: &dyn Embedder, trials: &[EvalTrial], store: &FeatureStore) -> Result<Vec<TrialResult>> {
    let mut frame_index: HashMap<&str, usize> = HashMap::new();
    let mut frames = Vec::new();
    let mut words: HashMap<&str, Vec<f64>> = HashMap::new();
    for t in trials {
        for k in t.frames() {
            if !frame_index.contains_key(k) {
                frame_index.insert(k, frames.len());
                frames.push(lookup(store, k)?);
            }
        }
        if !words.contains_key(t.target_word.as_str()) {
            words.insert(&t.target_word, embedder.embed_word(&t.target_word)?);
        }
    }
    let emb = embedder.embed_frames(&frames)?;
    Ok(trials
        .iter()
        .map(|t| {
            let f = t.frames().map(|k| emb[frame_index[k]].as_slice());
            classify_with(&words[t.target_word.as_str()], f, &t.target_word)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: BTreeMap<String, CategoryAccuracy>,
    pub overall: f64,
    pub trials: usize,
    pub correct: usize,
    pub seed: Option<u64>,
    pub skipped: Vec<String>,
}

pub fn aggregate(results: &[TrialResult], seed: Option<u64>, skipped: &[String]) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Data("no trial results to aggregate".into()));
    }
    let mut per: BTreeMap<String, CategoryAccuracy> = BTreeMap::new();
    for r in results {
        let c = per.entry(r.target_word.clone()).or_insert(CategoryAccuracy {
            trials: 0,
            correct: 0,
            accuracy: 0.0,
        });
        c.trials += 1;
        c.correct += r.correct as usize;
    }
    for c in per.values_mut() {
        c.accuracy = c.correct as f64 / c.trials as f64;
    }
    let correct = results.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        per_category: per,
        overall: correct as f64 / results.len() as f64,
        trials: results.len(),
        correct,
        seed,
        skipped: skipped.to_vec(),
    })
}

impl EvalReport {
    /// Per-category accuracy, best first, with the overall mean last.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(&String, &CategoryAccuracy)> = self.per_category.iter().collect();
        rows.sort_by(|a, b| b.1.accuracy.total_cmp(&a.1.accuracy).then(a.0.cmp(b.0)));
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
        let mut s = format!("{:<width$}  {:>6}  {:>8}\n", "category", "trials", "accuracy");
        for (n, c) in rows {
            let _ = writeln!(s, "{n:<width$}  {:>6}  {:>7.1}%", c.trials, 100.0 * c.accuracy);
        }
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>7.1}%", "overall", self.trials, 100.0 * self.overall);
        for k in &self.skipped {
            let _ = writeln!(s, "skipped (not in vocabulary): {k}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
