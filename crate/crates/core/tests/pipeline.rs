use std::path::Path;

use siamtrack::config::Config;
use siamtrack::data::synth::{generate, SynthSpec};
use siamtrack::data::{index_tracklets, load_tracklets, write_tracklets, Frame, Split, Tracklet};
use siamtrack::error::Error;
use siamtrack::experiment::{toy_data, train_model};
use siamtrack::geometry::{Box7, PointCloud};
use siamtrack::model::Model;
use siamtrack::tracker::{self, track_all, ModelPredictor};

fn tiny() -> Config {
    Config {
        steps: 5,
        ..Config::toy()
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(3, 0, 5, 4).unwrap();
    write_tracklets(dir.path(), &data.train).unwrap();
    let index = index_tracklets(dir.path(), Split::All, "Car").unwrap();
    assert_eq!(index.len(), 3);
    let back = load_tracklets(dir.path(), Split::All, "Car").unwrap();
    for (a, b) in data.train.iter().zip(&back) {
        assert_eq!(a.frames.len(), b.frames.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            let (ga, gb) = (fa.gt.unwrap(), fb.gt.unwrap());
            // Labels are written with two decimals.
            assert!(ga.center_distance(&gb) < 0.02, "{ga:?} vs {gb:?}");
            assert_eq!(fa.cloud.len(), fb.cloud.len());
        }
    }
    assert!(load_tracklets(dir.path(), Split::Test, "Car").unwrap().is_empty());
    assert!(load_tracklets(dir.path(), Split::Train, "Pedestrian").unwrap().is_empty());
}

#[test]
fn missing_dataset_names_the_path() {
    let err = load_tracklets(Path::new("/nonexistent/root"), Split::All, "Car").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/root"), "{err}");
}

#[test]
fn training_and_tracking_repeat_bit_for_bit() {
    let data = toy_data(2, 1, 5, 2).unwrap();
    let (a, la) = train_model(&tiny(), &data.train, 3).unwrap();
    let (b, lb) = train_model(&tiny(), &data.train, 3).unwrap();
    assert_eq!(la, lb);
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x.tensor.data(), y.tensor.data());
    }
    let ra = track_all(&mut ModelPredictor::new(&a, false), &data.held_out, 5).unwrap();
    let rb = track_all(&mut ModelPredictor::new(&b, false), &data.held_out, 5).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn checkpoint_restores_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let data = toy_data(1, 1, 4, 6).unwrap();
    let (m, _) = train_model(&cfg, &data.train, 1).unwrap();
    let path = dir.path().join("model.skpt");
    m.save(&path).unwrap();
    let back: Model<f32> = Model::load(&cfg, &path).unwrap();
    let a = track_all(&mut ModelPredictor::new(&m, false), &data.held_out, 0).unwrap();
    let b = track_all(&mut ModelPredictor::new(&back, false), &data.held_out, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_search_area_keeps_the_previous_box() {
    let cfg = Config::toy();
    let model: Model<f32> = Model::new(&cfg, 0).unwrap();
    let spec = SynthSpec::random_car(1, 3);
    let t = generate(&spec, 3, "a").unwrap();
    let gt0 = t.frames[0].gt.unwrap();
    let mut state = tracker::init(&t.frames[0].cloud, gt0, 0).unwrap();
    let far = PointCloud::new(vec![[gt0.x + 100.0, gt0.y, gt0.z]]).unwrap();
    let out = tracker::step(&model, &mut state, &far).unwrap();
    assert!(out.degraded);
    assert_eq!(out.pred, gt0);
}

#[test]
fn empty_first_box_fails_initialization() {
    let cloud = PointCloud::new(vec![[10.0, 0.0, 0.0]]).unwrap();
    let b = Box7::new([0.0; 3], [1.0; 3], 0.0).unwrap();
    assert!(matches!(tracker::init(&cloud, b, 0), Err(Error::Init(_))));
}

#[test]
fn tracklet_without_first_box_is_rejected() {
    let t = Tracklet {
        id: "x".into(),
        category: "Car".into(),
        frames: vec![Frame {
            cloud: PointCloud::new(vec![[0.0; 3]]).unwrap(),
            gt: None,
        }],
    };
    assert!(track_all(&mut tracker::ConstantPredictor::default(), &[t], 0).is_err());
}

#[test]
fn unknown_config_keys_are_listed() {
    let err = Config::parse("heads = 2\nfoo = 1\nbar = true\n", Path::new("c.toml")).unwrap_err();
    match err {
        Error::UnknownConfigKeys(keys) => assert_eq!(keys, vec!["bar", "foo"]),
        other => panic!("{other}"),
    }
}
