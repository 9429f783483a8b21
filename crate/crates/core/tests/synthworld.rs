use std::collections::{BTreeMap, BTreeSet};

use groundlab::corpus::{self, CollapseConfig, SplitManifest};
use groundlab::dataset::{BuildConfig, Dataset};
use groundlab::pairing::FeatureStore;
use groundlab::seed;
use groundlab::simfilter::{auto_label, filter_validation, SimilarityScorer};
use groundlab::synthworld::{self, generate, plug_in_mi, World, WorldSpec};
use numcore::cosine;

fn ten_thousand(p: f64) -> World {
    generate(&WorldSpec {
        alignment_p: p,
        train_videos: 100,
        val_videos: 0,
        test_videos: 0,
        ..WorldSpec::default()
    })
    .unwrap()
}

/// (scene category, referential word named or none) per utterance.
fn scene_word_pairs(w: &World) -> Vec<(usize, Option<String>)> {
    w.records
        .iter()
        .zip(&w.truth.episodes)
        .map(|(r, e)| {
            let word = r
                .text
                .split(' ')
                .find(|t| w.truth.referential.contains_key(*t))
                .map(str::to_string);
            (e.category, word)
        })
        .collect()
}

#[test]
fn unaligned_speech_carries_no_scene_information() {
    let w = ten_thousand(0.0);
    assert_eq!(w.records.len(), 10_000);
    let pairs = scene_word_pairs(&w);
    let mi = plug_in_mi(&pairs);
    // The plug-in estimate carries a positive bias of about (R-1)(C-1)/2N.
    let rows = pairs.iter().map(|p| p.0).collect::<BTreeSet<_>>().len();
    let cols = pairs.iter().map(|p| p.1.clone()).collect::<BTreeSet<_>>().len();
    let bias = ((rows - 1) * (cols - 1)) as f64 / (2.0 * pairs.len() as f64);
    assert!(mi - bias < 0.02, "corrected MI {}", mi - bias);
    assert!(mi < bias + 0.005, "plug-in MI {mi} vs bias {bias}");
    let aligned = plug_in_mi(&scene_word_pairs(&ten_thousand(1.0)));
    assert!(aligned > 2.5, "aligned MI {aligned}");
}

#[test]
fn function_words_follow_the_zipf_exponent() {
    let w = ten_thousand(0.9);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &w.records {
        for t in r.text.split(' ') {
            if !w.truth.referential.contains_key(t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut freq: Vec<usize> = counts.into_values().collect();
    freq.sort_unstable_by(|a, b| b.cmp(a));
    let pts: Vec<(f64, f64)> = freq
        .iter()
        .enumerate()
        .map(|(i, &c)| (((i + 1) as f64).ln(), (c as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope + 1.0).abs() < 0.1, "slope {slope}");
}

#[test]
fn category_frame_counts_are_balanced() {
    let w = generate(&WorldSpec::default()).unwrap();
    let mut counts = vec![0usize; 20];
    for c in w.truth.frame_categories().values() {
        counts[*c] += 1;
    }
    let mean = counts.iter().sum::<usize>() as f64 / 20.0;
    for c in counts {
        assert!((c as f64 - mean).abs() <= 0.2 * mean, "{c} vs mean {mean}");
    }
}

#[test]
fn oracle_threshold_separates_aligned_pairs() {
    let w = generate(&WorldSpec::default()).unwrap();
    let scorer = w.truth.oracle_scorer();
    let cfg = groundlab::pairing::PairingConfig::default();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (r, e) in w.records.iter().zip(&w.truth.episodes) {
        let t = groundlab::pairing::frame_schedule(r.start_s, f64::INFINITY, &cfg)[0];
        let id = w.store.by_key(&groundlab::pairing::frame_key(&r.video_id, t)).unwrap();
        if scorer.score(w.store.get(id), &r.text).unwrap() > 0.24 {
            if e.aligned() {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let precision = tp as f64 / (tp + fp) as f64;
    assert!(precision >= 0.95, "precision {precision} ({tp} / {})", tp + fp);
}

#[test]
fn misaligned_scores_are_bounded_by_prototype_separation() {
    let w = generate(&WorldSpec {
        noise_sigma: 0.0,
        alignment_p: 0.0,
        misaligned_mention_rate: 1.0,
        ..WorldSpec::default()
    })
    .unwrap();
    let protos = &w.truth.prototypes;
    let mut max_cos = f64::NEG_INFINITY;
    for i in 0..protos.len() {
        for j in 0..i {
            max_cos = max_cos.max(cosine(&protos[i], &protos[j]));
        }
    }
    assert!(max_cos < 0.5);
    let scorer = w.truth.oracle_scorer();
    let cats = w.truth.frame_categories();
    for (r, e) in w.records.iter().zip(&w.truth.episodes).take(2000) {
        if e.aligned() {
            continue;
        }
        let id = w.store.by_key(&groundlab::pairing::frame_key(&r.video_id, r.start_s)).unwrap();
        let f = w.store.get(id);
        assert_eq!(cats[&f.key()], e.category);
        assert!(scorer.score(f, &r.text).unwrap() <= max_cos + 1e-12);
    }
}

#[test]
fn ingestion_drops_nothing() {
    let w = generate(&WorldSpec::default()).unwrap();
    let (deduped, report) = corpus::dedup_filter(&w.records, CollapseConfig::default());
    assert_eq!(report.total(), 0);
    assert_eq!(report.collapsed, 0);
    assert_eq!(deduped, w.records);
    let ds = Dataset::build(w.records.clone(), &w.store, &w.manifest, &BuildConfig::default()).unwrap();
    assert_eq!(ds.drops.total(), 0);
    assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 6000);
    assert!(ds.train.iter().all(|p| p.frames.len() == 16));
}

#[test]
fn files_round_trip() {
    let w = generate(&WorldSpec {
        train_videos: 2,
        val_videos: 1,
        test_videos: 1,
        utterances_per_video: 20,
        ..WorldSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    w.write(dir.path()).unwrap();
    let records = corpus::read_transcripts(&dir.path().join(synthworld::TRANSCRIPTS_FILE)).unwrap();
    assert_eq!(records, w.records);
    let store = FeatureStore::load(&dir.path().join(synthworld::FEATURES_FILE)).unwrap();
    assert_eq!(store.frames(), w.store.frames());
    let manifest = SplitManifest::load(&dir.path().join(synthworld::MANIFEST_FILE)).unwrap();
    assert_eq!(manifest, w.manifest);
    let truth = synthworld::GroundTruth::load(&dir.path().join(synthworld::TRUTH_FILE)).unwrap();
    assert_eq!(truth, w.truth);

    let again = tempfile::tempdir().unwrap();
    generate(&w.truth.spec).unwrap().write(again.path()).unwrap();
    for name in [
        synthworld::TRANSCRIPTS_FILE,
        synthworld::FEATURES_FILE,
        synthworld::MANIFEST_FILE,
        synthworld::TRUTH_FILE,
        synthworld::LEXICON_FILE,
    ] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(again.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

fn val_keep_rate(p: f64) -> f64 {
    let w = generate(&WorldSpec {
        alignment_p: p,
        train_videos: 2,
        val_videos: 5,
        test_videos: 0,
        ..WorldSpec::default()
    })
    .unwrap();
    let ds = Dataset::build(w.records.clone(), &w.store, &w.manifest, &BuildConfig::default()).unwrap();
    let scorer = w.truth.oracle_scorer();
    match filter_validation(&ds.val, &w.store, &scorer, 0.24, &mut seed::rng(1, 5)) {
        Ok((_, r)) => r.kept as f64 / r.input as f64,
        Err(_) => 0.0,
    }
}

#[test]
fn filter_keep_rate_tracks_alignment() {
    assert!(val_keep_rate(1.0) > 0.95);
    assert!(val_keep_rate(0.0) < 0.05);
}

fn label_accuracy(sigma: f64) -> f64 {
    let w = generate(&WorldSpec {
        alignment_p: 1.0,
        noise_sigma: sigma,
        train_videos: 1,
        val_videos: 0,
        test_videos: 5,
        ..WorldSpec::default()
    })
    .unwrap();
    let scorer = w.truth.oracle_scorer();
    let cats = w.truth.frame_categories();
    let frames: Vec<_> = w.store.frames().iter().collect();
    let labels = auto_label(&frames, &w.truth.categories, &scorer, 0.24).unwrap();
    let right = frames
        .iter()
        .zip(&labels)
        .filter(|(f, l)| l.as_ref().is_some_and(|l| l.label == w.truth.categories[cats[&f.key()]]))
        .count();
    right as f64 / frames.len() as f64
}

#[test]
fn oracle_auto_labels_recover_scene_categories() {
    assert_eq!(label_accuracy(0.0), 1.0);
    let noisy = label_accuracy(0.2);
    assert!(noisy >= 0.99, "{noisy}");
}
