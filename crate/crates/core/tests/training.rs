use gfss_lidar::config::ToolConfig;
use gfss_lidar::evaluation::ConfusionMatrix;
use gfss_lidar::geometry::{write_labels, write_scan};
use gfss_lidar::model::{Freeze, Version};
use gfss_lidar::protocol::{
    confusion, finetune, predict, sample_shots, train_base, Dataset, Split, TrainConfig,
};
use gfss_lidar::synth::{generate_corpus, CorpusConfig};
use gfss_lidar::taxonomy::{Label, Taxonomy};

struct Setup {
    tax: Taxonomy,
    train: TrainConfig,
    base: Dataset,
    pool: Dataset,
    eval: Dataset,
}

fn setup(epochs: usize) -> Setup {
    let cfg = ToolConfig::synthetic();
    let corpus = generate_corpus(&CorpusConfig {
        base_frames: 8,
        shot_pool_frames: 10,
        eval_frames: 3,
        ..cfg.corpus_config().unwrap()
    })
    .unwrap();
    let mut train = cfg.train_config().unwrap();
    train.base.epochs = epochs;
    train.finetune.epochs = epochs;
    Setup {
        tax: cfg.taxonomy().unwrap(),
        train,
        base: Dataset::new(corpus.base_train, Split::Train),
        pool: Dataset::new(corpus.shot_pool, Split::Train),
        eval: Dataset::new(corpus.eval, Split::Val),
    }
}

#[test]
fn base_training_reduces_the_loss() {
    let s = setup(8);
    let (params, trace) = train_base(&s.base, &s.tax, &s.train).unwrap();
    assert_eq!(params.version, Version::Base);
    assert_eq!(params.class_order(), s.tax.base_stage_classes());
    let first = trace.epochs.first().unwrap();
    let last = trace.epochs.last().unwrap();
    assert!(last.loss < first.loss, "{} -> {}", first.loss, last.loss);
    assert!(last.ce < first.ce, "{} -> {}", first.ce, last.ce);
    assert!(last.lr < first.lr);
}

#[test]
fn freeze_modes_hold_their_parameters() {
    let s = setup(2);
    let (base, _) = train_base(&s.base, &s.tax, &s.train).unwrap();
    let shots = sample_shots(&s.pool, &s.tax, 2, 3);
    for freeze in [Freeze::None, Freeze::Backbone, Freeze::BackboneAndBaseHeads] {
        let mut cfg = s.train.clone();
        cfg.finetune.freeze = freeze;
        let (m, _) = finetune(&base, &s.pool, &shots, &s.tax, &cfg).unwrap();
        assert_eq!(m.version, Version::Extended);
        assert_eq!(m.class_order(), s.tax.all_classes());
        let backbone_same = m.w1 == base.w1 && m.b1 == base.b1;
        let heads_same = m.heads[..base.heads.len()] == base.heads[..];
        match freeze {
            Freeze::None => assert!(!backbone_same && !heads_same),
            Freeze::Backbone => assert!(backbone_same && !heads_same),
            Freeze::BackboneAndBaseHeads => assert!(backbone_same && heads_same),
        }
    }
}

#[test]
fn finetune_rejects_a_finetuned_model() {
    let s = setup(1);
    let (base, _) = train_base(&s.base, &s.tax, &s.train).unwrap();
    let shots = sample_shots(&s.pool, &s.tax, 1, 1);
    let (ext, _) = finetune(&base, &s.pool, &shots, &s.tax, &s.train).unwrap();
    assert!(finetune(&ext, &s.pool, &shots, &s.tax, &s.train).is_err());
}

#[test]
fn merged_frame_confusions_match_a_single_pass() {
    let s = setup(1);
    let (base, _) = train_base(&s.base, &s.tax, &s.train).unwrap();
    let total = confusion(&base, &s.eval, &s.tax, &s.train.projection).unwrap();
    let mut manual = ConfusionMatrix::new(s.tax.all_classes());
    for f in &s.eval.frames {
        let pred: Vec<Label> = predict(&base, &f.cloud, &s.train.projection)
            .unwrap()
            .into_iter()
            .map(Some)
            .collect();
        manual.accumulate(&pred, &f.labels).unwrap();
    }
    assert_eq!(total, manual);
    let labelled = s
        .eval
        .frames
        .iter()
        .flat_map(|f| &f.labels)
        .filter(|l| l.is_some())
        .count();
    assert_eq!(total.total(), labelled as u64);
}

#[test]
fn dataset_round_trips_through_kitti_files() {
    let s = setup(0);
    let dir = tempfile::tempdir().unwrap();
    for sub in ["velodyne", "labels"] {
        std::fs::create_dir(dir.path().join(sub)).unwrap();
    }
    for (i, f) in s.eval.frames.iter().enumerate() {
        write_scan(dir.path().join(format!("velodyne/{i:06}.bin")), &f.cloud).unwrap();
        let raw: Vec<u32> = f
            .labels
            .iter()
            .map(|l| s.tax.class_to_raw(*l).unwrap())
            .collect();
        write_labels(dir.path().join(format!("labels/{i:06}.label")), &raw).unwrap();
    }
    let back = Dataset::from_dir(dir.path(), &s.tax, Split::Val).unwrap();
    assert_eq!(back.len(), s.eval.len());
    for (a, b) in back.frames.iter().zip(&s.eval.frames) {
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.labels, b.labels);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut s = setup(2);
    s.base.frames.truncate(1);
    let (a, _) = train_base(&s.base, &s.tax, &s.train).unwrap();
    s.train.base.lr = 0.0;
    s.train.base.epochs = 0;
    let (init, _) = train_base(&s.base, &s.tax, &s.train).unwrap();
    s.train.base.epochs = 3;
    let (still, _) = train_base(&s.base, &s.tax, &s.train).unwrap();
    assert_eq!(init, still);
    assert_ne!(init, a);
}
