use duet_core::backend::BackendDescriptor;
use duet_core::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use duet_core::latent::gaussian;
use duet_core::{run_edit, AudioLatent, Backends, EditConfig, PromptPair, RunLog, VideoLatent};
use ndarray::Dim;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn descriptor_json_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    for d in [BackendDescriptor::toy_video(3), BackendDescriptor::toy_audio(3)] {
        let path = dir.path().join(format!("{}.json", d.name));
        std::fs::write(&path, d.to_json().unwrap()).unwrap();
        assert_eq!(BackendDescriptor::load(&path).unwrap(), d);
    }
}

#[test]
fn descriptor_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&BackendDescriptor::toy_video(0).to_json().unwrap()).unwrap();
    json["latent_shape"] = serde_json::json!([4, 0, 12]);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, json.to_string()).unwrap();
    assert!(BackendDescriptor::load(&path).unwrap_err().to_string().contains("latent_shape"));

    json["latent_shape"] = serde_json::json!([4, 12, 12]);
    json["surprise"] = serde_json::json!(1);
    std::fs::write(&path, json.to_string()).unwrap();
    assert!(BackendDescriptor::load(&path).unwrap_err().to_string().contains("surprise"));
}

#[test]
fn runlog_jsonl_roundtrip() {
    let backends = Backends::toy(0, 2).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let video = VideoLatent::new(gaussian(&mut r, Dim([4, 4, 6, 6])), 4.0).unwrap();
    let audio = AudioLatent::new(gaussian(&mut r, Dim([2, 16, 8])), 1.0).unwrap();
    let prompts = PromptPair::new(None, "a lion roaring").unwrap();
    let cfg = EditConfig {
        total_steps: 8,
        warmup_steps: 3,
        ..EditConfig::default()
    };
    let out = run_edit(&video, &audio, &prompts, &backends, &cfg).unwrap();
    let text = out.log.to_jsonl().unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 9);
    let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["kind"], "config");
    let step: serde_json::Value = serde_json::from_str(lines[4]).unwrap();
    assert_eq!(step["kind"], "step");
    assert_eq!(step["step"], 3);
    let back = RunLog::from_jsonl(&text).unwrap();
    assert_eq!(back.to_jsonl().unwrap(), text);
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let ckpt = Checkpoint {
        step: 42,
        seed: 5,
        video: gaussian(&mut r, Dim([4, 4, 6, 6])),
        audio: gaussian(&mut r, Dim([2, 16, 8])),
    };
    let path = dir.path().join("step.safetensors");
    save_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
