use duet_core::edit::Objective;
use duet_core::latent::gaussian;
use duet_core::{run_edit, AudioLatent, Backends, EditConfig, PromptPair, VideoLatent};
use duet_core::edit::run_edit_with;
use ndarray::Dim;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn inputs(seed: u64) -> (Backends, VideoLatent, AudioLatent) {
    let backends = Backends::toy(0, 2).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let video = VideoLatent::new(gaussian(&mut r, Dim([4, 4, 6, 6])), 4.0).unwrap();
    let audio = AudioLatent::new(gaussian(&mut r, Dim([2, 16, 8])), 1.0).unwrap();
    (backends, video, audio)
}

fn prompts() -> PromptPair {
    PromptPair::new(Some("a dog barking".into()), "a lion roaring").unwrap()
}

#[test]
fn zero_steps_return_the_inputs() {
    let (backends, video, audio) = inputs(1);
    let cfg = EditConfig {
        total_steps: 0,
        ..EditConfig::default()
    };
    let out = run_edit(&video, &audio, &prompts(), &backends, &cfg).unwrap();
    assert_eq!(out.video.data, video.data);
    assert_eq!(out.audio.data, audio.data);
    assert!(out.log.records.is_empty());
}

#[test]
fn identical_prompts_do_not_move_the_latents_during_warmup() {
    let (backends, video, audio) = inputs(2);
    let same = PromptPair::new(Some("a dog barking".into()), "a dog barking").unwrap();
    let cfg = EditConfig {
        total_steps: 12,
        warmup_steps: 10,
        ..EditConfig::default()
    };
    let mut seen = 0;
    run_edit_with(&video, &audio, &same, &backends, &cfg, |state, out| {
        if out.record.step < cfg.warmup_steps {
            assert_eq!(out.record.loss_dds_video, 0.0);
            assert_eq!(out.record.loss_dds_audio, 0.0);
            assert_eq!(state.theta_video.data, video.data);
            assert_eq!(state.theta_audio.data, audio.data);
            seen += 1;
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 10);
}

#[test]
fn source_latents_are_never_modified() {
    let (backends, video, audio) = inputs(3);
    let cfg = EditConfig {
        total_steps: 20,
        warmup_steps: 5,
        ..EditConfig::default()
    };
    let out = run_edit_with(&video, &audio, &prompts(), &backends, &cfg, |state, _| {
        assert_eq!(state.source_video.data, video.data);
        assert_eq!(state.source_audio.data, audio.data);
        Ok(())
    })
    .unwrap();
    assert_ne!(out.video.data, video.data);
    assert_ne!(out.audio.data, audio.data);
}

#[test]
fn contrastive_term_changes_the_trajectory_after_warmup() {
    let (backends, video, audio) = inputs(4);
    let cfg = EditConfig {
        total_steps: 20,
        warmup_steps: 5,
        ..EditConfig::default()
    };
    let with = run_edit(&video, &audio, &prompts(), &backends, &cfg).unwrap();
    let without = run_edit(
        &video,
        &audio,
        &prompts(),
        &backends,
        &EditConfig {
            objective: Objective::DdsOnly,
            ..cfg.clone()
        },
    )
    .unwrap();
    for (a, b) in with.log.records.iter().zip(&without.log.records).take(5) {
        assert_eq!(a.loss_dds_video.to_bits(), b.loss_dds_video.to_bits(), "warmup steps must agree");
    }
    assert!(with.log.records[5..].iter().all(|r| r.loss_cmds.is_some()));
    assert!(without.log.records.iter().all(|r| r.loss_cmds.is_none()));
    assert_ne!(with.video.data, without.video.data);
}

#[test]
fn different_seeds_give_different_runs() {
    let (backends, video, audio) = inputs(5);
    let base = EditConfig {
        total_steps: 5,
        warmup_steps: 2,
        ..EditConfig::default()
    };
    let a = run_edit(&video, &audio, &prompts(), &backends, &base).unwrap();
    let b = run_edit(&video, &audio, &prompts(), &backends, &EditConfig { seed: 9, ..base }).unwrap();
    assert_ne!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
}

#[test]
fn sds_objective_runs() {
    let (backends, video, audio) = inputs(6);
    let cfg = EditConfig {
        total_steps: 6,
        warmup_steps: 2,
        objective: Objective::SdsOnly,
        ..EditConfig::default()
    };
    let out = run_edit(&video, &audio, &prompts(), &backends, &cfg).unwrap();
    assert_eq!(out.log.records.len(), 6);
    assert!(out.video.data.iter().all(|v| v.is_finite()));
}
