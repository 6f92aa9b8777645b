//! Archive round trips, external weight import and name maps.

mod common;

use std::collections::BTreeMap;

use retouch_core::checkpoint::{
    export_external_checkpoint, import_external_checkpoint, load_model, save_model, tensor_shapes, Archive, NameMap,
};
use retouch_core::data::{synth_dataset, BlemishSpec, Split};
use retouch_core::gp::GanPrior;
use retouch_core::train::{TrainConfig, Trainer};
use retouch_core::{Error, GpConfig, Retoucher};

fn shapes_fixture() -> BTreeMap<String, Vec<usize>> {
    serde_json::from_str(include_str!("fixtures/stylegan2_ffhq_1024_shapes.json")).unwrap()
}

#[test]
fn published_layout_maps_without_shape_errors() {
    let config = GpConfig::stylegan2_ffhq_1024();
    NameMap::stylegan2_pytorch(&config).check_shapes(&shapes_fixture(), &config).unwrap();
}

#[test]
fn shipped_name_map_matches_generated() {
    let shipped: NameMap = serde_json::from_str(include_str!("../assets/stylegan2-pytorch-L9.json")).unwrap();
    assert_eq!(shipped, NameMap::stylegan2_pytorch(&GpConfig::stylegan2_ffhq_1024()));
}

#[test]
fn wrong_shape_is_reported_by_name() {
    let config = GpConfig::stylegan2_ffhq_1024();
    let mut shapes = shapes_fixture();
    shapes.insert("convs.3.conv.weight".into(), vec![1, 512, 256, 3, 3]);
    shapes.remove("to_rgbs.2.bias");
    match NameMap::stylegan2_pytorch(&config).check_shapes(&shapes, &config) {
        Err(Error::Checkpoint(problems)) => {
            assert_eq!(problems.len(), 2, "{problems:?}");
            assert!(problems.iter().any(|p| p.contains("convs.3.conv.weight")));
            assert!(problems.iter().any(|p| p.contains("to_rgbs.2.bias")));
        }
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

fn small_gp() -> GpConfig {
    GpConfig { levels: 4, latent_dim: 8, channel_base: 4, channel_max: 8, ..GpConfig::default() }
}

#[test]
fn external_round_trip_is_identity() {
    let config = small_gp();
    let gp = GanPrior::new(config.clone()).unwrap();
    let params = retouch_core::layers::init_params::<f32, _>(&gp.specs(), &mut common::rng(1));
    let dir = tempfile::tempdir().unwrap();
    for map in [NameMap::identity("id", params.names().map(str::to_string)), NameMap::stylegan2_pytorch(&config)] {
        let path = dir.path().join(format!("{}.safetensors", map.id));
        export_external_checkpoint(&path, &params, &map, &config).unwrap();
        let back = import_external_checkpoint(&path, &map, &config).unwrap();
        assert_eq!(back.len(), params.len());
        for (name, a) in params.iter() {
            assert_eq!(back.get(name).unwrap(), a, "{name}");
        }
    }
}

#[test]
fn missing_tensor_refuses_the_load() {
    let config = small_gp();
    let gp = GanPrior::new(config.clone()).unwrap();
    let params = retouch_core::layers::init_params::<f32, _>(&gp.specs(), &mut common::rng(1));
    let full = NameMap::identity("id", params.names().map(str::to_string));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.safetensors");
    export_external_checkpoint(&path, &params, &full, &config).unwrap();
    let mut partial = full.clone();
    partial.map.remove("gp.level2.conv2.conv.weight");
    match import_external_checkpoint(&path, &partial, &config) {
        Err(Error::Checkpoint(problems)) => {
            assert_eq!(problems.len(), 1);
            assert!(problems[0].contains("gp.level2.conv2.conv.weight"));
        }
        other => panic!("expected a checkpoint error, got {:?}", other.map(|s| s.len())),
    }
}

#[test]
fn model_archive_round_trip() {
    let model = Retoucher::<f32>::new(common::tiny_model_config(4), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.safetensors"), dir.path().join("b.safetensors"));
    save_model(&a, &model).unwrap();
    let loaded = load_model(&a).unwrap();
    assert_eq!(loaded.config(), model.config());
    save_model(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(tensor_shapes(&a).unwrap().len(), model.params().len());
}

#[test]
fn wrong_config_gives_shape_report() {
    let model = Retoucher::<f32>::new(common::tiny_model_config(4), 9).unwrap();
    let mut other = common::tiny_model_config(4);
    other.gp.channel_max = 8;
    match Retoucher::from_params(other, model.params().clone()) {
        Err(Error::Checkpoint(problems)) => assert!(problems.iter().any(|p| p.contains("shape")), "{problems:?}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched configuration accepted"),
    }
}

#[test]
fn version_mismatch_refused() {
    let model = Retoucher::<f32>::new(common::tiny_model_config(3), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    save_model(&path, &model).unwrap();
    let mut archive = Archive::load(&path).unwrap();
    archive.meta.format_version = 99;
    let bytes = archive.to_bytes().unwrap();
    assert!(Archive::from_bytes(&bytes).is_err());
}

fn train_data() -> Vec<retouch_core::data::PairedSample> {
    synth_dataset(40, &BlemishSpec::default(), 2, 16)
        .unwrap()
        .into_iter()
        .filter(|(_, s)| *s == Split::Train)
        .map(|(p, _)| p)
        .collect()
}

fn small_train(steps: u64) -> TrainConfig {
    TrainConfig { steps, batch_size: 4, r1_interval: 2, ..TrainConfig::default() }
}

#[test]
fn training_state_round_trip_and_resume() {
    let data = train_data();
    let model_cfg = common::tiny_model_config(3);
    let mut straight = Trainer::new(model_cfg.clone(), small_train(20)).unwrap();
    let full = straight.fit(&data, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(model_cfg, small_train(20)).unwrap();
    for _ in 0..10 {
        let b = first.batch_for_step(&data, first.step()).unwrap();
        first.train_step(&b).unwrap();
    }
    let (a, b) = (dir.path().join("a.safetensors"), dir.path().join("b.safetensors"));
    first.save_state(&a).unwrap();
    let mut resumed = Trainer::load_state(&a).unwrap();
    resumed.save_state(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(resumed.step(), 10);
    let tail = resumed.fit(&data, None, None).unwrap();
    assert_eq!(tail.len(), 10);
    for (x, y) in full[10..].iter().zip(&tail) {
        assert_eq!(x.step, y.step);
        for (u, v) in [(x.l1, y.l1), (x.perc, y.perc), (x.adv_g, y.adv_g), (x.adv_d, y.adv_d), (x.r1, y.r1)] {
            assert!((u - v).abs() <= 1e-6, "step {}: {u} vs {v}", x.step);
        }
    }
}
