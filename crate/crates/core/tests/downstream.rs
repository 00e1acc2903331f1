use defectsynth::checkpoint::Checkpoint;
use defectsynth::config::RunConfig;
use defectsynth::data::{build_dataset, Split};
use defectsynth::eval::{
    downstream_protocol, train_segmenter, Overlap, SegExample, Segmenter, SegmenterConfig,
    SegmenterTraining,
};
use defectsynth::pipeline::{dataset_config, labeled_split};
use defectsynth::Error;

fn setup() -> (RunConfig, defectsynth::data::Dataset) {
    let config = RunConfig::default();
    let dataset = build_dataset(&dataset_config(&config), config.seed).unwrap();
    (config, dataset)
}

fn segmenter(config: &RunConfig) -> SegmenterConfig {
    SegmenterConfig::new(config.image_size, config.segmenter_width).unwrap()
}

fn training(config: &RunConfig, steps: usize) -> SegmenterTraining {
    SegmenterTraining {
        steps,
        batch_size: config.batch_size,
        learning_rate: config.segmenter_learning_rate,
        weight_decay: config.weight_decay,
    }
}

#[test]
fn training_on_the_test_set_overfits() {
    let (config, dataset) = setup();
    let test = labeled_split(&dataset, Split::Test, false);
    let scores = downstream_protocol(
        &test,
        &test,
        segmenter(&config),
        training(&config, config.segmenter_steps),
        1,
        Overlap::Allow,
    )
    .unwrap();
    assert!(
        scores.pixel_auroc > 0.99,
        "pixel AUROC {}",
        scores.pixel_auroc
    );
}

#[test]
fn overlap_is_a_protocol_error_by_default() {
    let (config, dataset) = setup();
    let test = labeled_split(&dataset, Split::Test, false);
    let err = downstream_protocol(
        &test,
        &test,
        segmenter(&config),
        training(&config, 1),
        1,
        Overlap::Reject,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

#[test]
fn untrained_segmenter_is_near_chance() {
    let (config, dataset) = setup();
    let train = labeled_split(&dataset, Split::Train, false);
    let test = labeled_split(&dataset, Split::Test, false);
    for seed in 0..10 {
        let scores = downstream_protocol(
            &train,
            &test,
            segmenter(&config),
            training(&config, 0),
            seed,
            Overlap::Reject,
        )
        .unwrap();
        assert!(
            (0.4..=0.6).contains(&scores.pixel_auroc),
            "seed {seed}: pixel AUROC {}",
            scores.pixel_auroc
        );
    }
}

#[test]
fn segmenter_checkpoint_roundtrip_is_exact() {
    let (config, dataset) = setup();
    let examples: Vec<SegExample> = dataset
        .split(Split::Train)
        .take(8)
        .map(|s| SegExample {
            image: s.image.clone(),
            mask: s.mask.clone(),
        })
        .collect();
    let (model, _) =
        train_segmenter(segmenter(&config), training(&config, 5), &examples, 3).unwrap();
    let bytes = Checkpoint::new(model.params().clone()).to_bytes();
    let restored = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(restored.to_bytes(), bytes);
    let reloaded = Segmenter::from_params(model.config(), restored.params).unwrap();
    let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
    assert_eq!(
        reloaded.predict(&images).unwrap(),
        model.predict(&images).unwrap()
    );
}
