use isbnet::pipeline::{infer, ModelConfig, ModelParams, PipelineConfig};
use isbnet::scenegen::io::{read_predictions, read_scene, write_predictions, write_scene};
use isbnet::scenegen::{generate, GenConfig};

#[test]
fn generated_scenes_roundtrip_through_files() {
    let scenes = generate(&GenConfig {
        num_scenes: 3,
        points_per_scene: 600,
        seed: 17,
        ..GenConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (i, s) in scenes.iter().enumerate() {
        let path = dir.path().join(format!("{i}.isbs"));
        write_scene(&path, s).unwrap();
        assert_eq!(&read_scene(&path).unwrap(), s);
    }
}

#[test]
fn predictions_roundtrip_through_files() {
    let scene = &generate(&GenConfig {
        num_scenes: 1,
        points_per_scene: 512,
        seed: 3,
        ..GenConfig::default()
    })
    .unwrap()[0];
    let params = ModelParams::init(ModelConfig::new(5, true), 0).unwrap();
    let preds = infer(scene, &params, &PipelineConfig::desk()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.isbp");
    write_predictions(&path, &preds, scene.len()).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), (scene.len(), preds));
}

#[test]
fn damaged_model_file_is_rejected() {
    let params = ModelParams::init(ModelConfig::new(3, true), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.isbm");
    params.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(ModelParams::load(&path).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&path, &extra).unwrap();
    assert!(ModelParams::load(&path).is_err());
}
