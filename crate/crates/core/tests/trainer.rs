use groundlab::checkpoint;
use groundlab::dataset::{BuildConfig, Dataset};
use groundlab::encoders::{Model, Variant};
use groundlab::error::Error;
use groundlab::pairing::{FeatureStore, FrameFeature};
use groundlab::seed;
use groundlab::simfilter::{filter_validation, ValPair};
use groundlab::synthworld::{generate, World, WorldSpec};
use groundlab::trainer::{self, train, validate, write_run_dir, TrainConfig, TrainData};
use numcore::LrSchedule;

struct Fixture {
    world: World,
    ds: Dataset,
    val: Vec<ValPair>,
}

fn fixture() -> Fixture {
    let spec = WorldSpec {
        n_categories: 8,
        vocab_size: 60,
        feature_dim: 16,
        train_videos: 2,
        val_videos: 1,
        test_videos: 1,
        utterances_per_video: 100,
        ..WorldSpec::default()
    };
    let world = generate(&spec).unwrap();
    let ds = Dataset::build(world.records.clone(), &world.store, &world.manifest, &BuildConfig::default()).unwrap();
    assert_eq!(ds.train.len(), 200);
    let scorer = world.truth.oracle_scorer();
    let (val, _) = filter_validation(&ds.val, &world.store, &scorer, 0.24, &mut seed::rng(0, 5)).unwrap();
    Fixture { world, ds, val }
}

fn small(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::for_variant(variant);
    c.embed_dim = 16;
    c.n_heads = 2;
    c.ffn_dim = 64;
    c.batch_size = 16;
    c.max_epochs = 5;
    c.peak_lr = 1e-3;
    c.warmup_steps = 10;
    c.seed = 3;
    c
}

fn data(f: &Fixture) -> TrainData<'_> {
    TrainData {
        store: &f.world.store,
        train: &f.ds.train,
        val: &f.val,
        vocab: &f.ds.vocab,
    }
}

#[test]
fn cvcl_beats_the_chance_baseline_in_five_epochs() {
    let f = fixture();
    let mut cfg = small(Variant::Cvcl);
    cfg.peak_lr = 1e-2;
    let (_, rec) = train(&cfg, &data(&f)).unwrap();
    assert_eq!(rec.epochs.len(), 5);
    let last = rec.epochs.last().unwrap().train_loss;
    assert!(last < 16f64.ln(), "final train loss {last}");
    assert!(last < rec.epochs[0].train_loss);
}

#[test]
fn same_seed_gives_identical_traces() {
    let f = fixture();
    for v in Variant::ALL {
        let mut cfg = small(v);
        cfg.max_epochs = 2;
        let (m1, a) = train(&cfg, &data(&f)).unwrap();
        let (m2, b) = train(&cfg, &data(&f)).unwrap();
        assert_eq!(a, b);
        assert_eq!(trainer::metrics_csv(&a), trainer::metrics_csv(&b));
        assert_eq!(m1.params(), m2.params());
        cfg.seed += 1;
        let (_, c) = train(&cfg, &data(&f)).unwrap();
        assert_ne!(a.epochs, c.epochs);
    }
}

#[test]
fn features_are_untouched_and_lr_follows_the_schedule() {
    let f = fixture();
    let before = f.world.store.frames().to_vec();
    let init = Model::init(small(Variant::CvclT).model_config(16, f.ds.vocab.len()), 3).unwrap();
    let cfg = small(Variant::CvclT);
    let (model, rec) = train(&cfg, &data(&f)).unwrap();
    assert_eq!(f.world.store.frames(), before.as_slice());
    assert_ne!(model.params(), init.params());

    let sched = LrSchedule::new(cfg.peak_lr, rec.warmup_steps, rec.total_steps).unwrap();
    for (step, lr) in rec.lr_trace.iter().enumerate() {
        assert_eq!(*lr, sched.lr_at(step as u64));
    }
    for e in &rec.epochs {
        assert_eq!(e.lr, rec.lr_trace[e.epoch * rec.steps_per_epoch - 1]);
    }
}

#[test]
fn best_epoch_is_argmin_and_checkpoint_reproduces_it() {
    let f = fixture();
    let cfg = small(Variant::CvclTLm);
    let (model, mut rec) = train(&cfg, &data(&f)).unwrap();
    let losses: Vec<f64> = rec.epochs.iter().map(|e| e.val_loss).collect();
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(rec.best_val_loss, min);
    assert_eq!(rec.epochs[rec.best_epoch - 1].val_loss, min);

    let dir = tempfile::tempdir().unwrap();
    write_run_dir(dir.path(), &cfg, &model, &mut rec).unwrap();
    for name in [trainer::CONFIG_FILE, trainer::METRICS_FILE, trainer::CHECKPOINT_FILE, trainer::REPORT_FILE] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let loaded = checkpoint::load(&dir.path().join(trainer::CHECKPOINT_FILE)).unwrap();
    let again = validate(&loaded, &f.world.store, &f.val, &cfg).unwrap();
    assert!((again - rec.best_val_loss).abs() < 1e-12);
    let snapshot: TrainConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(trainer::CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(snapshot, cfg);
}

#[test]
fn validation_is_deterministic_and_near_ln8_untrained() {
    let f = fixture();
    let mut cfg = TrainConfig::for_variant(Variant::Cvcl);
    cfg.embed_dim = 512;
    let model = Model::init(cfg.model_config(16, f.ds.vocab.len()), 5).unwrap();
    let a = validate(&model, &f.world.store, &f.val, &cfg).unwrap();
    let b = validate(&model, &f.world.store, &f.val, &cfg).unwrap();
    assert_eq!(a, b);
    assert!((a - 8f64.ln()).abs() < 0.35, "untrained val loss {a}");
    assert!(f.val.len() < f.ds.val.len());
    assert!(validate(&model, &f.world.store, &[], &cfg).is_err());
}

#[test]
fn non_finite_loss_aborts_with_a_batch_dump() {
    let f = fixture();
    let mut store = FeatureStore::new(16);
    for fr in f.world.store.frames() {
        let mut fr: FrameFeature = fr.clone();
        if f.world.manifest.train.contains(&fr.video_id) {
            fr.features[0] = 1e300;
        }
        store.push(fr).unwrap();
    }
    let d = TrainData {
        store: &store,
        train: &f.ds.train,
        val: &f.val,
        vocab: &f.ds.vocab,
    };
    match train(&small(Variant::Cvcl), &d) {
        Err(Error::NonFiniteLoss { dump, .. }) => assert!(dump.contains("\"frame\"")),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|r| r.1)),
    }
}

#[test]
fn too_few_pairs_for_a_batch() {
    let f = fixture();
    let d = TrainData {
        store: &f.world.store,
        train: &f.ds.train[..10],
        val: &f.val,
        vocab: &f.ds.vocab,
    };
    assert!(train(&small(Variant::Cvcl), &d).is_err());
}
