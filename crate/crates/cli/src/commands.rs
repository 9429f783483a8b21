use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use groundlab::checkpoint;
use groundlab::corpus::{self, SplitManifest, Vocabulary};
use groundlab::dataset::{BuildConfig, Dataset};
use groundlab::encoders::{Model, Variant};
use groundlab::evalharness::{
    aggregate, build_trials, read_trials, run_trials, write_trials, Embedder, EvalReport, EvalTrial, ModelEmbedder,
    Prompt, RandomEmbedder, DEFAULT_TRIALS_PER_CATEGORY,
};
use groundlab::pairing::FeatureStore;
use groundlab::seed::{self, streams};
use groundlab::simfilter::{
    self, auto_label, candidate_concepts, filter_validation, finalize_categories, AcceptList, ConceptLexicon,
    ExternalScores, LabeledFrame, SimilarityScorer, ValPair,
};
use groundlab::synthworld::{self, generate, GroundTruth, WorldSpec};
use groundlab::trainer::{self, RunRecord, TrainConfig, TrainData};

use crate::config::{resolve, user_layer};
use crate::rundir::RunLock;
use crate::{CliError, Global};

pub const INVOCATION_FILE: &str = "invocation.json";
pub const BUNDLE_FILE: &str = "bundle.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const STATS_FILE: &str = "stats.json";
pub const STATS_TABLE_FILE: &str = "stats.txt";
pub const DROPS_FILE: &str = "drops.json";
pub const VAL_FILE: &str = "val.jsonl";
pub const FILTER_FILE: &str = "filter.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DUMP_FILE: &str = "nonfinite_batch.jsonl";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const CATEGORIES_FILE: &str = "categories.json";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const EVAL_TABLE_FILE: &str = "eval.txt";
pub const RESULTS_FILE: &str = "results.jsonl";

type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn require_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| CliError::usage("--out DIR is required"))
}

/// Everything needed to rerun a command: its name, arguments, global flags
/// and fully resolved configuration.
fn write_invocation<A: Serialize, C: Serialize>(dir: &Path, command: &str, g: &Global, args: &A, config: &C) -> Result<()> {
    let v = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "global": g,
        "args": args,
        "config": config,
    });
    write_file(&dir.join(INVOCATION_FILE), &pretty(&v))
}

fn or_file_in(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let p = or_file_in(path, VOCAB_FILE);
    Ok(Vocabulary::from_json(&read_file(&p)?)?)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

enum ScorerSource {
    Oracle(GroundTruth),
    External(ExternalScores),
}

impl ScorerSource {
    fn load(truth: Option<&Path>, scores: Option<&Path>) -> Result<Self> {
        match (truth, scores) {
            (Some(t), None) => Ok(ScorerSource::Oracle(GroundTruth::load(t)?)),
            (None, Some(s)) => Ok(ScorerSource::External(ExternalScores::load(s)?)),
            _ => Err(CliError::usage("give exactly one of --truth or --scores")),
        }
    }

    fn scorer(&self) -> Box<dyn SimilarityScorer + '_> {
        match self {
            ScorerSource::Oracle(t) => Box::new(t.oracle_scorer()),
            ScorerSource::External(s) => Box::new(s.clone()),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {}

pub fn gen(g: &Global, a: &GenArgs) -> Result<()> {
    let out = require_out(g)?;
    let mut spec: WorldSpec = resolve(&WorldSpec::default(), &user_layer(g.config.as_deref(), &g.set)?)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let _lock = RunLock::acquire(out, g.force)?;
    let world = generate(&spec)?;
    world.write(out)?;
    write_invocation(out, "gen", g, a, &spec)?;
    println!(
        "wrote {} utterances, {} frames, {} categories to {}",
        world.records.len(),
        world.store.len(),
        world.truth.categories.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct BuildArgs {
    /// Directory holding transcripts, features and manifest from `gen`.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Sources and settings of a built dataset. The pairs themselves are rebuilt
/// deterministically on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bundle {
    pub transcripts: PathBuf,
    pub features: PathBuf,
    pub manifest: PathBuf,
    pub config: BuildConfig,
}

pub struct Loaded {
    pub bundle: Bundle,
    pub dataset: Dataset,
    pub store: FeatureStore,
    pub manifest: SplitManifest,
}

impl Bundle {
    fn load_sources(&self) -> Result<Loaded> {
        let records = corpus::read_transcripts(&self.transcripts)?;
        let store = FeatureStore::load(&self.features)?;
        let manifest = SplitManifest::load(&self.manifest)?;
        let dataset = Dataset::build(records, &store, &manifest, &self.config)?;
        Ok(Loaded {
            bundle: self.clone(),
            dataset,
            store,
            manifest,
        })
    }
}

/// Rebuilds a bundle's dataset and checks it still matches the saved
/// vocabulary.
pub fn load_bundle(dir: &Path) -> Result<Loaded> {
    let bundle: Bundle = serde_json::from_str(&read_file(&dir.join(BUNDLE_FILE))?)
        .map_err(|e| CliError::data(format!("{}: {e}", dir.join(BUNDLE_FILE).display())))?;
    let loaded = bundle.load_sources()?;
    let saved = load_vocab(&dir.join(VOCAB_FILE))?;
    if saved != loaded.dataset.vocab {
        return Err(CliError::data(format!(
            "sources of {} changed since it was built; rebuild it",
            dir.display()
        )));
    }
    Ok(loaded)
}

pub fn build(g: &Global, a: &BuildArgs) -> Result<()> {
    let out = require_out(g)?;
    let cfg: BuildConfig = resolve(&BuildConfig::default(), &user_layer(g.config.as_deref(), &g.set)?)?;
    let pick = |explicit: &Option<PathBuf>, name: &str, flag: &str| -> Result<PathBuf> {
        match (explicit, &a.world) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(w)) => Ok(w.join(name)),
            (None, None) => Err(CliError::usage(format!("--{flag} (or --world) is required"))),
        }
    };
    let transcripts = pick(&a.transcripts, synthworld::TRANSCRIPTS_FILE, "transcripts")?;
    let features = pick(&a.features, synthworld::FEATURES_FILE, "features")?;
    let manifest = pick(&a.manifest, synthworld::MANIFEST_FILE, "manifest")?;
    let bundle = Bundle {
        transcripts: absolute(&transcripts)?,
        features: absolute(&features)?,
        manifest: absolute(&manifest)?,
        config: cfg,
    };
    let loaded = bundle.load_sources()?;
    let _lock = RunLock::acquire(out, g.force)?;
    let ds = &loaded.dataset;
    write_file(&out.join(BUNDLE_FILE), &pretty(&bundle))?;
    write_file(&out.join(VOCAB_FILE), &ds.vocab.to_json())?;
    write_file(&out.join(STATS_FILE), &ds.stats.to_json())?;
    let table = ds.stats.to_table();
    write_file(&out.join(STATS_TABLE_FILE), &table)?;
    write_file(&out.join(DROPS_FILE), &pretty(&ds.drops))?;
    write_invocation(out, "build", g, a, &cfg)?;
    print!("{table}");
    println!(
        "pairs: train {} val {} test {}; dropped {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        ds.drops.total()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct FilterValArgs {
    /// Dataset bundle directory from `build`.
    #[arg(long)]
    pub data: PathBuf,
    /// Ground truth of a synthetic world, for the oracle scorer.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Precomputed scores (JSONL `{frame, concept, score}`).
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            threshold: simfilter::DEFAULT_THRESHOLD,
        }
    }
}

/// One kept validation pair on disk.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValRow {
    pub video_id: String,
    pub start_s: f64,
    pub frame: String,
    pub score: f64,
}

pub fn filter_val(g: &Global, a: &FilterValArgs) -> Result<()> {
    let out = require_out(g)?;
    let cfg: FilterConfig = resolve(&FilterConfig::default(), &user_layer(g.config.as_deref(), &g.set)?)?;
    let seed = g.seed.unwrap_or(0);
    let loaded = load_bundle(&a.data)?;
    let source = ScorerSource::load(a.truth.as_deref(), a.scores.as_deref())?;
    let scorer = source.scorer();
    let mut rng = seed::rng(seed, streams::VAL_FRAMES);
    let (kept, report) = filter_validation(&loaded.dataset.val, &loaded.store, scorer.as_ref(), cfg.threshold, &mut rng)?;
    let _lock = RunLock::acquire(out, g.force)?;
    let mut body = String::new();
    for v in &kept {
        let row = ValRow {
            video_id: v.pair.video_id.clone(),
            start_s: v.pair.start_s,
            frame: loaded.store.get(v.frame).key(),
            score: v.score,
        };
        body.push_str(&serde_json::to_string(&row).expect("row serializes"));
        body.push('\n');
    }
    write_file(&out.join(VAL_FILE), &body)?;
    write_file(&out.join(FILTER_FILE), &pretty(&report))?;
    write_invocation(out, "filter-val", g, a, &json!({ "filter": cfg, "seed": seed }))?;
    print!("{}", report.to_table());
    Ok(())
}

/// Matches saved validation rows back to the dataset's pairs and frames.
pub fn load_val(path: &Path, ds: &Dataset, store: &FeatureStore) -> Result<Vec<ValPair>> {
    let path = or_file_in(path, VAL_FILE);
    let by_key: BTreeMap<(&str, u64), &groundlab::pairing::EpisodePair> =
        ds.val.iter().map(|p| ((p.video_id.as_str(), p.start_s.to_bits()), p)).collect();
    let mut out = Vec::new();
    for (i, line) in read_file(&path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ValRow = serde_json::from_str(line)
            .map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let pair = by_key.get(&(row.video_id.as_str(), row.start_s.to_bits())).ok_or_else(|| {
            CliError::data(format!(
                "{}:{}: no validation pair at {} {}",
                path.display(),
                i + 1,
                row.video_id,
                row.start_s
            ))
        })?;
        let frame = store
            .by_key(&row.frame)
            .filter(|f| pair.frames.contains(f))
            .ok_or_else(|| CliError::data(format!("{}:{}: frame {} is not in its pair", path.display(), i + 1, row.frame)))?;
        out.push(ValPair {
            pair: (*pair).clone(),
            frame,
            score: row.score,
        });
    }
    Ok(out)
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset bundle directory from `build`.
    #[arg(long)]
    pub data: PathBuf,
    /// Filtered validation pairs from `filter-val` (file or directory).
    #[arg(long)]
    pub val: PathBuf,
    /// cvcl, cvcl_t or cvcl_t_lm; selects that variant's defaults.
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated seeds; one run directory per seed plus a summary.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

/// Variant defaults, then the config file, then `--set`, then `--variant`.
pub fn resolve_train_config(g: &Global, variant: Option<&str>) -> Result<TrainConfig> {
    let mut user = user_layer(g.config.as_deref(), &g.set)?;
    let name = match variant {
        Some(v) => v.to_string(),
        None => match user.get("variant") {
            Some(Value::String(s)) => s.clone(),
            Some(other) => return Err(CliError::usage(format!("config: variant must be a string, got {other}"))),
            None => Variant::Cvcl.name().to_string(),
        },
    };
    let v = Variant::parse(&name).ok_or_else(|| {
        CliError::usage(format!(
            "unknown variant {name:?}; expected one of {}",
            Variant::ALL.map(|v| v.name()).join(", ")
        ))
    })?;
    user.insert("variant".into(), Value::String(name));
    let cfg: TrainConfig = resolve(&TrainConfig::for_variant(v), &user)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    seed: u64,
    best_epoch: usize,
    best_val_loss: f64,
    epochs: usize,
    stopped_early: bool,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    variant: Variant,
    runs: Vec<SeedSummary>,
    mean_best_val_loss: f64,
    sd_best_val_loss: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn train_one(dir: &Path, cfg: &TrainConfig, data: &TrainData) -> Result<RunRecord> {
    let (model, mut record) = match trainer::train(cfg, data) {
        Ok(r) => r,
        Err(e) => {
            if let groundlab::Error::NonFiniteLoss { dump, .. } = &e {
                let path = dir.join(DUMP_FILE);
                write_file(&path, dump)?;
                log::error!("offending batch written to {}", path.display());
            }
            return Err(e.into());
        }
    };
    trainer::write_run_dir(dir, cfg, &model, &mut record)?;
    write_file(&dir.join(VOCAB_FILE), &data.vocab.to_json())?;
    Ok(record)
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let out = require_out(g)?;
    let base = resolve_train_config(g, a.variant.as_deref())?;
    let seeds: Vec<u64> = match (&a.seeds[..], g.seed) {
        ([], None) => vec![base.seed],
        ([], Some(s)) => vec![s],
        (list, None) => list.to_vec(),
        (_, Some(_)) => return Err(CliError::usage("give --seed or --seeds, not both")),
    };
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(CliError::usage("--seeds contains duplicates"));
    }
    let loaded = load_bundle(&a.data)?;
    let val = load_val(&a.val, &loaded.dataset, &loaded.store)?;
    let data = TrainData {
        store: &loaded.store,
        train: &loaded.dataset.train,
        val: &val,
        vocab: &loaded.dataset.vocab,
    };
    let _lock = RunLock::acquire(out, g.force)?;
    if a.seeds.is_empty() {
        let mut cfg = base.clone();
        cfg.seed = seeds[0];
        write_invocation(out, "train", g, a, &cfg)?;
        let rec = train_one(out, &cfg, &data)?;
        println!(
            "{} seed {}: best val loss {:.6} at epoch {} of {}",
            cfg.variant,
            cfg.seed,
            rec.best_val_loss,
            rec.best_epoch,
            rec.epochs.len()
        );
        return Ok(());
    }
    write_invocation(out, "train", g, a, &base)?;
    let mut runs = Vec::new();
    for &s in &seeds {
        let mut cfg = base.clone();
        cfg.seed = s;
        let dir = out.join(format!("seed-{s}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        let rec = train_one(&dir, &cfg, &data)?;
        println!(
            "{} seed {s}: best val loss {:.6} at epoch {} of {}",
            cfg.variant,
            rec.best_val_loss,
            rec.best_epoch,
            rec.epochs.len()
        );
        runs.push(SeedSummary {
            seed: s,
            best_epoch: rec.best_epoch,
            best_val_loss: rec.best_val_loss,
            epochs: rec.epochs.len(),
            stopped_early: rec.stopped_early,
        });
    }
    let (mean, sd) = mean_sd(&runs.iter().map(|r| r.best_val_loss).collect::<Vec<_>>());
    let summary = TrainSummary {
        variant: base.variant,
        runs,
        mean_best_val_loss: mean,
        sd_best_val_loss: sd,
    };
    write_file(&out.join(SUMMARY_FILE), &pretty(&summary))?;
    println!("mean best val loss {mean:.6} (sd {sd:.6}) over {} seeds", seeds.len());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct MakeEvalArgs {
    /// Frame features as `[SOURCE=]PATH`; each file is one labeling source.
    #[arg(long, required = true)]
    pub features: Vec<String>,
    /// Concreteness lexicon CSV (`word,concreteness,pos`).
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Vocabularies every candidate concept must appear in. Repeatable.
    #[arg(long, required = true)]
    pub vocab: Vec<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Manual review verdicts (`source,frame,label,verdict`). Repeatable.
    #[arg(long)]
    pub accept: Vec<PathBuf>,
    /// Restrict frames to one partition of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub partition: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MakeEvalConfig {
    pub threshold: f64,
    pub concreteness_min: f64,
    pub pos: Vec<String>,
    pub min_instances: usize,
    pub trials_per_category: usize,
}

impl Default for MakeEvalConfig {
    fn default() -> Self {
        Self {
            threshold: simfilter::DEFAULT_THRESHOLD,
            concreteness_min: simfilter::DEFAULT_CONCRETENESS_MIN,
            pos: vec!["NOUN".into()],
            min_instances: simfilter::DEFAULT_MIN_INSTANCES,
            trials_per_category: DEFAULT_TRIALS_PER_CATEGORY,
        }
    }
}

fn parse_source(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(arg);
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string());
            (name, p)
        }
    }
}

pub fn make_eval(g: &Global, a: &MakeEvalArgs) -> Result<()> {
    let out = require_out(g)?;
    let cfg: MakeEvalConfig = resolve(&MakeEvalConfig::default(), &user_layer(g.config.as_deref(), &g.set)?)?;
    if cfg.trials_per_category == 0 {
        return Err(CliError::usage("config: trials_per_category must be positive"));
    }
    let seed = g.seed.unwrap_or(0);
    let keep_videos: Option<BTreeSet<String>> = match (&a.manifest, &a.partition) {
        (Some(m), Some(p)) => {
            let manifest = SplitManifest::load(m)?;
            let part = [
                corpus::Partition::Train,
                corpus::Partition::Val,
                corpus::Partition::Test,
            ]
            .into_iter()
            .find(|x| x.label() == p)
            .ok_or_else(|| CliError::usage(format!("unknown partition {p:?}; expected train, val or test")))?;
            Some(manifest.videos(part).iter().cloned().collect())
        }
        (Some(_), None) => return Err(CliError::usage("--manifest needs --partition")),
        _ => None,
    };
    let lexicon = ConceptLexicon::load(&a.lexicon)?;
    let vocabs = a.vocab.iter().map(|p| load_vocab(p)).collect::<Result<Vec<_>>>()?;
    let pos: Vec<&str> = cfg.pos.iter().map(String::as_str).collect();
    let concepts = candidate_concepts(&lexicon, &vocabs.iter().collect::<Vec<_>>(), cfg.concreteness_min, &pos)?;
    if concepts.is_empty() {
        return Err(CliError::data("no lexicon entry passes the concreteness, POS and vocabulary filters"));
    }
    let source = ScorerSource::load(a.truth.as_deref(), a.scores.as_deref())?;
    let scorer = source.scorer();
    let mut accept = AcceptList::default();
    for p in &a.accept {
        accept.extend(AcceptList::load(p)?);
    }

    let mut labeled = Vec::new();
    let mut label_lines = String::new();
    let mut names = BTreeSet::new();
    for arg in &a.features {
        let (name, path) = parse_source(arg);
        if !names.insert(name.clone()) {
            return Err(CliError::usage(format!("source {name} given twice")));
        }
        let store = FeatureStore::load(&path)?;
        let frames: Vec<_> = store
            .frames()
            .iter()
            .filter(|f| keep_videos.as_ref().is_none_or(|k| k.contains(&f.video_id)))
            .collect();
        let labels = auto_label(&frames, &concepts, scorer.as_ref(), cfg.threshold)?;
        for (f, l) in frames.iter().zip(labels) {
            if let Some(l) = l {
                let row = json!({ "source": name, "frame": f.key(), "label": l.label, "score": l.score });
                label_lines.push_str(&row.to_string());
                label_lines.push('\n');
                labeled.push(LabeledFrame {
                    source: name.clone(),
                    frame: f.key(),
                    label: l.label,
                });
            }
        }
    }
    let cats = finalize_categories(&labeled, &accept, cfg.min_instances)?;
    let mut rng = seed::rng(seed, streams::TRIALS);
    let set = build_trials(&cats.pools, cfg.trials_per_category, None, &mut rng)?;

    let _lock = RunLock::acquire(out, g.force)?;
    write_trials(&out.join(TRIALS_FILE), &set.trials)?;
    let sizes: BTreeMap<&String, usize> = cats.pools.iter().map(|(k, v)| (k, v.len())).collect();
    write_file(&out.join(CATEGORIES_FILE), &pretty(&sizes))?;
    write_file(&out.join(LABELS_FILE), &label_lines)?;
    write_invocation(out, "make-eval", g, a, &json!({ "make_eval": cfg, "seed": seed }))?;
    println!(
        "{} candidate concepts, {} labeled frames, {} categories kept, {} trials",
        concepts.len(),
        labeled.len(),
        cats.pools.len(),
        set.trials.len()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Run directory from `train` (checkpoint plus vocabulary).
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Score with random embeddings of this width instead of a model.
    #[arg(long)]
    pub random_dim: Option<usize>,
    /// Trial file or `make-eval` directory.
    #[arg(long)]
    pub trials: PathBuf,
    /// Feature files holding every trial frame. Repeatable.
    #[arg(long, required = true)]
    pub features: Vec<PathBuf>,
    /// auto, word or word_eos.
    #[arg(long, default_value = "auto")]
    pub prompt: String,
}

fn merged_store(paths: &[PathBuf]) -> Result<FeatureStore> {
    let mut stores = paths.iter().map(|p| FeatureStore::load(p)).collect::<groundlab::Result<Vec<_>>>()?;
    if stores.len() == 1 {
        return Ok(stores.remove(0));
    }
    let mut out = FeatureStore::new(stores[0].dim());
    for s in stores {
        for f in s.frames() {
            out.push(f.clone())?;
        }
    }
    Ok(out)
}

/// Splits trials into scorable ones and the sorted target words the
/// vocabulary lacks.
pub fn split_oov(trials: Vec<EvalTrial>, vocab: Option<&Vocabulary>) -> (Vec<EvalTrial>, Vec<String>) {
    let Some(v) = vocab else {
        return (trials, Vec::new());
    };
    let mut skipped = BTreeSet::new();
    let kept = trials
        .into_iter()
        .filter(|t| {
            let ok = v.contains(&t.target_word);
            if !ok {
                skipped.insert(t.target_word.clone());
            }
            ok
        })
        .collect();
    (kept, skipped.into_iter().collect())
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let prompt: Prompt = serde_json::from_value(Value::String(a.prompt.clone()))
        .map_err(|_| CliError::usage(format!("unknown prompt {:?}; expected auto, word or word_eos", a.prompt)))?;
    let store = merged_store(&a.features)?;
    let trials = read_trials(&or_file_in(&a.trials, TRIALS_FILE))?;
    if trials.is_empty() {
        return Err(CliError::data("trial file is empty"));
    }
    let model_and_vocab: Option<(Model, Vocabulary)> = match (&a.run, &a.checkpoint, &a.vocab, a.random_dim) {
        (Some(r), None, None, None) => Some((checkpoint::load(&r.join(trainer::CHECKPOINT_FILE))?, load_vocab(r)?)),
        (None, Some(c), Some(v), None) => Some((checkpoint::load(c)?, load_vocab(v)?)),
        (None, None, None, Some(0)) => return Err(CliError::usage("--random-dim must be positive")),
        (None, None, None, Some(_)) => None,
        _ => {
            return Err(CliError::usage(
                "give one of --run DIR, --checkpoint PATH --vocab PATH, or --random-dim N",
            ))
        }
    };
    let (trials, skipped) = split_oov(trials, model_and_vocab.as_ref().map(|(_, v)| v));
    if trials.is_empty() {
        return Err(CliError::data(format!("every trial target is out of vocabulary: {}", skipped.join(", "))));
    }
    let seed = g.seed;
    let embedder: Box<dyn Embedder + '_> = match &model_and_vocab {
        Some((model, vocab)) => Box::new(ModelEmbedder { model, vocab, prompt }),
        None => Box::new(RandomEmbedder {
            dim: a.random_dim.unwrap(),
            seed: seed.unwrap_or(0),
        }),
    };
    let results = run_trials(embedder.as_ref(), &trials, &store)?;
    let report = aggregate(&results, seed, &skipped)?;
    let table = report.to_table();
    if let Some(out) = &g.out {
        let _lock = RunLock::acquire(out, g.force)?;
        write_file(&out.join(EVAL_FILE), &(report.to_json() + "\n"))?;
        write_file(&out.join(EVAL_TABLE_FILE), &table)?;
        let mut lines = String::new();
        for r in &results {
            lines.push_str(&serde_json::to_string(r).expect("result serializes"));
            lines.push('\n');
        }
        write_file(&out.join(RESULTS_FILE), &lines)?;
        write_invocation(out, "eval", g, a, &json!({ "prompt": prompt, "seed": seed }))?;
    }
    print!("{table}");
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Run directories (`train`) and evaluation directories (`eval`).
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
}

#[derive(Debug, Default, Serialize)]
struct ReportSummary {
    runs: BTreeMap<String, f64>,
    evals: BTreeMap<String, f64>,
    mean_best_val_loss: Option<f64>,
    sd_best_val_loss: Option<f64>,
    mean_accuracy: Option<f64>,
    sd_accuracy: Option<f64>,
    per_category_mean_accuracy: BTreeMap<String, f64>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_file(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn report(g: &Global, a: &ReportArgs) -> Result<()> {
    let mut s = ReportSummary::default();
    let mut per_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for d in &a.dirs {
        let name = d.display().to_string();
        if d.join(EVAL_FILE).is_file() {
            let r: EvalReport = read_json(&d.join(EVAL_FILE))?;
            for (c, acc) in &r.per_category {
                per_cat.entry(c.clone()).or_default().push(acc.accuracy);
            }
            s.evals.insert(name, r.overall);
        } else if d.join(trainer::REPORT_FILE).is_file() {
            let r: RunRecord = read_json(&d.join(trainer::REPORT_FILE))?;
            s.runs.insert(name, r.best_val_loss);
        } else {
            return Err(CliError::data(format!("{} holds neither {EVAL_FILE} nor {}", d.display(), trainer::REPORT_FILE)));
        }
    }
    let mut text = String::new();
    if !s.runs.is_empty() {
        let (m, sd) = mean_sd(&s.runs.values().copied().collect::<Vec<_>>());
        (s.mean_best_val_loss, s.sd_best_val_loss) = (Some(m), Some(sd));
        for (k, v) in &s.runs {
            let _ = writeln!(text, "run   {k}: best val loss {v:.6}");
        }
        let _ = writeln!(text, "mean best val loss {m:.6} (sd {sd:.6}, n={})", s.runs.len());
    }
    if !s.evals.is_empty() {
        let (m, sd) = mean_sd(&s.evals.values().copied().collect::<Vec<_>>());
        (s.mean_accuracy, s.sd_accuracy) = (Some(m), Some(sd));
        for (k, v) in &s.evals {
            let _ = writeln!(text, "eval  {k}: accuracy {:.1}%", 100.0 * v);
        }
        let _ = writeln!(text, "mean accuracy {:.1}% (sd {:.1}, n={})", 100.0 * m, 100.0 * sd, s.evals.len());
        s.per_category_mean_accuracy = per_cat.into_iter().map(|(k, v)| (k, mean_sd(&v).0)).collect();
    }
    if let Some(out) = &g.out {
        let _lock = RunLock::acquire(out, g.force)?;
        write_file(&out.join(SUMMARY_FILE), &pretty(&s))?;
        write_invocation(out, "report", g, a, &Value::Null)?;
    }
    print!("{text}");
    Ok(())
}
