//! Synthetic egocentric corpora with known word-category ground truth.
//!
//! Each utterance comes with a scene showing one category. With probability
//! `alignment_p` the utterance names that category among function words;
//! otherwise it is unrelated speech, which names a category chosen
//! independently of the scene in `misaligned_mention_rate` of cases.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use numcore::cosine;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, Zipf};
use serde::{Deserialize, Serialize};

use crate::corpus::{clean_text, collapse_repeats, tokenize, write_transcripts, CollapseConfig, Partition, SplitManifest, UtteranceRecord};
use crate::error::{Error, Result};
use crate::pairing::{frame_key, frame_schedule, FeatureStore, FrameFeature, PairingConfig};
use crate::seed::{self, streams};
use crate::simfilter::{ConceptLexicon, LexiconEntry, SimilarityScorer};

pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const FEATURES_FILE: &str = "features.glfx";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const LEXICON_FILE: &str = "lexicon.csv";

const CATEGORY_NAMES: [&str; 41] = [
    "ball", "car", "cat", "dog", "cup", "book", "shoe", "apple", "bird", "fish", "hat", "chair", "spoon", "duck",
    "truck", "train", "sock", "bear", "cookie", "phone", "bowl", "kitty", "puzzle", "sand", "window", "table",
    "stairs", "basket", "crib", "foot", "ground", "kitchen", "paper", "road", "room", "toy", "floor", "computer",
    "plate", "flower", "butterfly",
];

const MAX_PROTOTYPE_ATTEMPTS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_categories: usize,
    /// Distinct words in the world: referential words plus function words.
    pub vocab_size: usize,
    pub words_per_category: usize,
    pub feature_dim: usize,
    pub alignment_p: f64,
    pub misaligned_mention_rate: f64,
    pub mean_utterance_length: f64,
    pub zipf_exponent: f64,
    /// Per-dimension standard deviation of frame noise around the prototype.
    pub noise_sigma: f64,
    pub max_prototype_cosine: f64,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub utterances_per_video: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_categories: 20,
            vocab_size: 200,
            words_per_category: 1,
            feature_dim: 64,
            alignment_p: 0.9,
            misaligned_mention_rate: 0.5,
            mean_utterance_length: 4.8,
            zipf_exponent: 1.0,
            noise_sigma: 0.2,
            max_prototype_cosine: 0.5,
            train_videos: 50,
            val_videos: 5,
            test_videos: 5,
            utterances_per_video: 100,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.n_categories == 0 {
            return bad("n_categories", "must be at least 1".into());
        }
        if self.words_per_category == 0 {
            return bad("words_per_category", "must be at least 1".into());
        }
        let content = self.n_categories * self.words_per_category;
        if content >= self.vocab_size {
            return bad(
                "n_categories",
                format!(
                    "{} categories x {} words leave no function words in a vocabulary of {}",
                    self.n_categories, self.words_per_category, self.vocab_size
                ),
            );
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be at least 1".into());
        }
        for (f, v) in [("alignment_p", self.alignment_p), ("misaligned_mention_rate", self.misaligned_mention_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(f, format!("{v} outside [0, 1]"));
            }
        }
        if !(self.mean_utterance_length > 0.0 && self.mean_utterance_length < 40.0) {
            return bad("mean_utterance_length", format!("{} outside (0, 40)", self.mean_utterance_length));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent", format!("{} must be non-negative", self.zipf_exponent));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", format!("{} must be non-negative", self.noise_sigma));
        }
        if !(self.max_prototype_cosine > -1.0 && self.max_prototype_cosine <= 1.0) {
            return bad("max_prototype_cosine", format!("{} outside (-1, 1]", self.max_prototype_cosine));
        }
        if self.train_videos == 0 || self.utterances_per_video == 0 {
            return bad("train_videos", "need at least one training video with utterances".into());
        }
        Ok(())
    }

    pub fn n_function_words(&self) -> usize {
        self.vocab_size - self.n_categories * self.words_per_category
    }
}

/// Ground truth for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTruth {
    pub video_id: String,
    pub start_s: f64,
    /// Category shown in the scene.
    pub category: usize,
    /// Category named by the utterance, if any.
    pub mentioned: Option<usize>,
}

impl EpisodeTruth {
    pub fn aligned(&self) -> bool {
        self.mentioned == Some(self.category)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: WorldSpec,
    pub categories: Vec<String>,
    /// Unit vectors, one per category.
    pub prototypes: Vec<Vec<f64>>,
    /// Referential word to category index.
    pub referential: BTreeMap<String, usize>,
    pub function_words: Vec<String>,
    pub episodes: Vec<EpisodeTruth>,
}

impl GroundTruth {
    /// Category shown in each stored frame, by frame key.
    pub fn frame_categories(&self) -> HashMap<String, usize> {
        let cfg = PairingConfig::default();
        let mut out = HashMap::new();
        for e in &self.episodes {
            for t in episode_timestamps(e.start_s, &cfg) {
                out.insert(frame_key(&e.video_id, t), e.category);
            }
        }
        out
    }

    /// Frame keys per category name, restricted to `videos`.
    pub fn pools(&self, videos: &[String]) -> BTreeMap<String, Vec<String>> {
        let keep: BTreeSet<&str> = videos.iter().map(String::as_str).collect();
        let cfg = PairingConfig::default();
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in self.episodes.iter().filter(|e| keep.contains(e.video_id.as_str())) {
            let pool = out.entry(self.categories[e.category].clone()).or_default();
            pool.extend(episode_timestamps(e.start_s, &cfg).into_iter().map(|t| frame_key(&e.video_id, t)));
        }
        out
    }

    pub fn oracle_scorer(&self) -> OracleScorer<'_> {
        OracleScorer { truth: self }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Referential words rated highly concrete nouns; function words rated
    /// abstract with tag `FUNC`.
    pub fn lexicon(&self) -> ConceptLexicon {
        let mut entries: Vec<LexiconEntry> = self
            .referential
            .keys()
            .map(|w| LexiconEntry {
                word: w.clone(),
                concreteness: 4.9,
                pos: "NOUN".into(),
            })
            .collect();
        entries.extend(self.function_words.iter().enumerate().map(|(i, w)| LexiconEntry {
            word: w.clone(),
            concreteness: 1.0 + (i % 30) as f64 * 0.1,
            pos: "FUNC".into(),
        }));
        ConceptLexicon::new(entries).expect("generated lexicon is valid")
    }
}

/// Cosine between a frame and the mean prototype of the categories the text
/// names. Text naming no category scores 0.
pub struct OracleScorer<'a> {
    truth: &'a GroundTruth,
}

impl SimilarityScorer for OracleScorer<'_> {
    fn score(&self, frame: &FrameFeature, text: &str) -> Result<f64> {
        let Some(clean) = clean_text(text) else {
            return Ok(0.0);
        };
        let cats: BTreeSet<usize> = tokenize(&clean)
            .into_iter()
            .filter_map(|w| self.truth.referential.get(w).copied())
            .collect();
        if cats.is_empty() {
            return Ok(0.0);
        }
        let dim = frame.features.len();
        let mut mean = vec![0.0; dim];
        for &c in &cats {
            let p = &self.truth.prototypes[c];
            if p.len() != dim {
                return Err(Error::Data(format!(
                    "frame has {dim} features, prototypes have {}",
                    p.len()
                )));
            }
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / cats.len() as f64;
            }
        }
        Ok(cosine(&frame.features, &mean).clamp(-1.0, 1.0))
    }
}

fn episode_timestamps(start_s: f64, cfg: &PairingConfig) -> Vec<f64> {
    frame_schedule(start_s, f64::INFINITY, cfg)
}

#[derive(Clone, Debug)]
pub struct World {
    pub records: Vec<UtteranceRecord>,
    pub store: FeatureStore,
    pub manifest: SplitManifest,
    pub truth: GroundTruth,
}

fn category_names(spec: &WorldSpec) -> Vec<String> {
    (0..spec.n_categories)
        .map(|i| CATEGORY_NAMES.get(i).map_or_else(|| format!("thing{i}"), |s| s.to_string()))
        .collect()
}

fn referential_words(spec: &WorldSpec, names: &[String]) -> Vec<Vec<String>> {
    names
        .iter()
        .map(|n| {
            (0..spec.words_per_category)
                .map(|j| if j == 0 { n.clone() } else { format!("{n}{j}") })
                .collect()
        })
        .collect()
}

fn prototypes<R: Rng>(spec: &WorldSpec, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.n_categories);
    while out.len() < spec.n_categories {
        let mut found = None;
        for _ in 0..MAX_PROTOTYPE_ATTEMPTS {
            let mut v: Vec<f64> = (0..spec.feature_dim).map(|_| normal.sample(rng)).collect();
            if !numcore::l2_normalize_in_place(&mut v) {
                continue;
            }
            if out.iter().all(|p| cosine(p, &v) < spec.max_prototype_cosine) {
                found = Some(v);
                break;
            }
        }
        match found {
            Some(v) => out.push(v),
            None => {
                return Err(Error::Config(format!(
                    "max_prototype_cosine: cannot place {} prototypes in {} dimensions below cosine {}",
                    spec.n_categories, spec.feature_dim, spec.max_prototype_cosine
                )))
            }
        }
    }
    Ok(out)
}

struct TextSampler {
    length: Poisson<f64>,
    zipf: Zipf<f64>,
    function_words: Vec<String>,
    referential: Vec<Vec<String>>,
    max_tokens: usize,
}

impl TextSampler {
    fn length<R: Rng>(&self, rng: &mut R) -> usize {
        loop {
            let l = self.length.sample(rng) as usize;
            if (1..=self.max_tokens).contains(&l) {
                return l;
            }
        }
    }

    fn utterance<R: Rng>(&self, mention: Option<usize>, rng: &mut R) -> Vec<String> {
        let len = self.length(rng);
        let mut words: Vec<String> = (0..len)
            .map(|_| self.function_words[self.zipf.sample(rng) as usize - 1].clone())
            .collect();
        if let Some(c) = mention {
            let w = &self.referential[c];
            words[rng.random_range(0..len)] = w[rng.random_range(0..w.len())].clone();
        }
        words
    }
}

/// Generates a world. A pure function of `spec`, including its seed.
pub fn generate(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, streams::WORLD);
    let categories = category_names(spec);
    let referential = referential_words(spec, &categories);
    let function_words: Vec<String> = (0..spec.n_function_words()).map(|i| format!("fw{i:03}")).collect();
    let protos = prototypes(spec, &mut rng)?;
    let sampler = TextSampler {
        length: Poisson::new(spec.mean_utterance_length).unwrap(),
        zipf: Zipf::new(function_words.len() as f64, spec.zipf_exponent)
            .map_err(|e| Error::Config(format!("zipf_exponent: {e}")))?,
        function_words: function_words.clone(),
        referential: referential.clone(),
        max_tokens: crate::corpus::DEFAULT_MAX_LEN - 1,
    };
    let noise = Normal::new(0.0, 1.0).unwrap();
    let collapse = CollapseConfig::default();
    let pcfg = PairingConfig::default();

    let mut records = Vec::new();
    let mut episodes = Vec::new();
    let mut store = FeatureStore::new(spec.feature_dim);
    let mut manifest = SplitManifest {
        split_name: "synthetic".into(),
        source: Some(format!("synthworld seed {}", spec.seed)),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (part, n_videos) in [
        (Partition::Train, spec.train_videos),
        (Partition::Val, spec.val_videos),
        (Partition::Test, spec.test_videos),
    ] {
        let total = n_videos * spec.utterances_per_video;
        let mut scenes: Vec<usize> = (0..total).map(|i| i % spec.n_categories).collect();
        scenes.shuffle(&mut rng);
        let mut scenes = scenes.into_iter();
        for v in 0..n_videos {
            let video_id = format!("{}{v:03}", part.label());
            let mut t: f64 = rng.random_range(0.5..1.5);
            let mut prev: Option<Vec<String>> = None;
            for _ in 0..spec.utterances_per_video {
                let category = scenes.next().unwrap();
                let mentioned = if rng.random_bool(spec.alignment_p) {
                    Some(category)
                } else if rng.random_bool(spec.misaligned_mention_rate) {
                    Some(rng.random_range(0..spec.n_categories))
                } else {
                    None
                };
                // Regenerate text the corpus cleaner would collapse or drop
                // as a duplicate, so ingestion is lossless.
                let words = loop {
                    let w = sampler.utterance(mentioned, &mut rng);
                    if collapse_repeats(&w, collapse).len() == w.len() && prev.as_ref() != Some(&w) {
                        break w;
                    }
                };
                let start_s = t;
                for ts in episode_timestamps(start_s, &pcfg) {
                    let features = protos[category]
                        .iter()
                        .map(|p| p + spec.noise_sigma * noise.sample(&mut rng))
                        .collect();
                    store.push(FrameFeature {
                        video_id: video_id.clone(),
                        timestamp_s: ts,
                        features,
                    })?;
                }
                records.push(UtteranceRecord {
                    video_id: video_id.clone(),
                    start_s,
                    end_s: start_s + 0.2 + 0.3 * words.len() as f64,
                    speaker: "adult".into(),
                    text: words.join(" "),
                });
                episodes.push(EpisodeTruth {
                    video_id: video_id.clone(),
                    start_s,
                    category,
                    mentioned,
                });
                prev = Some(words);
                t += rng.random_range(4.5..7.0);
            }
            match part {
                Partition::Train => manifest.train.push(video_id),
                Partition::Val => manifest.val.push(video_id),
                Partition::Test => manifest.test.push(video_id),
            }
        }
    }
    let truth = GroundTruth {
        spec: spec.clone(),
        categories,
        prototypes: protos,
        referential: referential
            .iter()
            .enumerate()
            .flat_map(|(c, ws)| ws.iter().map(move |w| (w.clone(), c)))
            .collect(),
        function_words,
        episodes,
    };
    Ok(World {
        records,
        store,
        manifest,
        truth,
    })
}

impl World {
    /// Writes transcripts, features, manifest, ground truth and lexicon
    /// into an existing directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_transcripts(&dir.join(TRANSCRIPTS_FILE), &self.records)?;
        self.store.write_glfx(&dir.join(FEATURES_FILE))?;
        self.manifest.save(&dir.join(MANIFEST_FILE))?;
        self.truth.save(&dir.join(TRUTH_FILE))?;
        self.truth.lexicon().save(&dir.join(LEXICON_FILE))?;
        Ok(())
    }
}

/// Plug-in mutual information in nats between paired discrete labels.
pub fn plug_in_mi<A: Ord + Clone, B: Ord + Clone>(pairs: &[(A, B)]) -> f64 {
    let n = pairs.len() as f64;
    let mut joint: BTreeMap<(A, B), f64> = BTreeMap::new();
    let mut pa: BTreeMap<A, f64> = BTreeMap::new();
    let mut pb: BTreeMap<B, f64> = BTreeMap::new();
    for (a, b) in pairs {
        *joint.entry((a.clone(), b.clone())).or_default() += 1.0;
        *pa.entry(a.clone()).or_default() += 1.0;
        *pb.entry(b.clone()).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|((a, b), &c)| c / n * (c * n / (pa[a] * pb[b])).ln())
        .sum()
}
