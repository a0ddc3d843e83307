use std::path::Path;

use swagppm::data::{self, Split, SyntheticSpec};
use swagppm::eval;
use swagppm::trainer::{train, Optimizer, TrainConfig};
use swagppm::ModelSpec;

fn fixture() -> Vec<eval::PerClassRow> {
    eval::load_per_class(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/per_class_test_sizes.csv")).unwrap()
}

#[test]
fn published_test_sizes_have_expected_shape_and_gini() {
    let rows = fixture();
    assert_eq!(rows.len(), 153);
    let sizes: Vec<usize> = rows.iter().map(|r| r.test_size as usize).collect();
    assert_eq!(sizes.iter().sum::<usize>(), 5346);
    assert!(sizes.contains(&99));
    let g = data::gini(&sizes).unwrap();
    assert!((g - 0.6).abs() <= 0.1, "gini {g}");
}

#[test]
fn fixture_round_trips_through_report_writer() {
    let rows = fixture();
    let mut buf = Vec::new();
    eval::write_per_class(&rows, &mut buf).unwrap();
    assert_eq!(eval::read_per_class(buf.as_slice()).unwrap(), rows);
}

#[test]
fn full_signal_makes_classes_linearly_separable() {
    let spec = SyntheticSpec {
        num_classes: 5,
        total_records: 400,
        vocab_size: 400,
        signal_strength: 1.0,
        ..SyntheticSpec::default()
    };
    let ds = data::stratified_split(&data::generate(&spec).unwrap(), 0.5, 0).unwrap();
    let train_records = ds.records(Split::Train, 1024).unwrap();
    let model = ModelSpec::softmax_linear(1024, 5);
    let cfg = TrainConfig::new(Optimizer::Adaptive, 0.05, 16, 20, 1);
    let out = train(&model, &model.init(0).unwrap(), &train_records, None, &cfg).unwrap();
    let tally = eval::evaluate(&model, &out.params, &train_records).unwrap();
    assert!(tally.accuracy() >= 0.99, "training accuracy {}", tally.accuracy());
}
