use std::path::Path;
use std::process::{Command, Output};

fn duet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn duet")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "duet failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path) {
    ok(duet(&["synth", "--out", "clip", "--seconds", "2"], dir));
}

const EDIT: &[&str] = &[
    "edit",
    "--clip",
    "clip",
    "--source-prompt",
    "a dog barking",
    "--target-prompt",
    "a lion roaring",
    "--steps",
    "6",
];

fn edit(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args: Vec<&str> = EDIT.to_vec();
    args.extend(["--out", out]);
    args.extend(extra);
    duet(&args, dir)
}

#[test]
fn edit_writes_the_full_output_tree() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    ok(edit(tmp.path(), "out", &[]));
    let out = tmp.path().join("out");
    for name in ["audio.wav", "runlog.jsonl", "config.resolved", "spectrogram.png", "frames.gif", "summary.json"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let frames = std::fs::read_dir(out.join("frames")).unwrap().count();
    assert_eq!(frames, 8);
    let log = std::fs::read_to_string(out.join("runlog.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 7, "config header plus one line per step");
    // no staging directories left behind
    let leftovers: Vec<_> = std::fs::read_dir(tmp.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".partial"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn rerun_reproduces_the_runlog_and_refuses_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    ok(edit(tmp.path(), "a", &[]));
    ok(edit(tmp.path(), "b", &[]));
    let a = std::fs::read(tmp.path().join("a/runlog.jsonl")).unwrap();
    let b = std::fs::read(tmp.path().join("b/runlog.jsonl")).unwrap();
    assert_eq!(a, b);

    let refused = edit(tmp.path(), "a", &[]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    ok(edit(tmp.path(), "a", &["--force", "--seed", "3"]));
    let c = std::fs::read(tmp.path().join("a/runlog.jsonl")).unwrap();
    assert_ne!(a, c, "different seed must change the log");
}

#[test]
fn debug_relevance_writes_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    ok(edit(tmp.path(), "out", &["--debug-relevance"]));
    let n = std::fs::read_dir(tmp.path().join("out/relevance")).unwrap().count();
    assert!(n > 0);
}

#[test]
fn eval_emits_one_row_per_tree_plus_mean() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    ok(edit(tmp.path(), "out", &[]));
    let out = ok(duet(&["eval", "out", "--json", "report.json"], tmp.path()));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert!(lines[0].starts_with("clip,clip_f,clip_t"));
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("mean,"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    assert!(json["provenance"].is_object() || json["provenance"].is_array());
}

#[test]
fn batch_runs_every_job() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    std::fs::write(
        tmp.path().join("jobs.toml"),
        r#"
[edit]
total_steps = 4
warmup_steps = 2

[[job]]
clip = "clip"
target_prompt = "a lion roaring"
out = "j0"

[[job]]
clip = "clip"
target_prompt = "a cat meowing"
out = "j1"
[job.edit]
tau_v = 0.6
"#,
    )
    .unwrap();
    ok(duet(&["batch", "--config", "jobs.toml"], tmp.path()));
    for j in ["j0", "j1"] {
        let resolved = std::fs::read_to_string(tmp.path().join(j).join("config.resolved")).unwrap();
        assert!(resolved.contains("total_steps = 4"), "{resolved}");
    }
    let j1 = std::fs::read_to_string(tmp.path().join("j1/config.resolved")).unwrap();
    assert!(j1.contains("tau_v = 0.6"));
}

#[test]
fn bad_config_field_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    std::fs::write(
        tmp.path().join("bad.toml"),
        "[[job]]\nclip = \"clip\"\ntarget_prompt = \"x\"\nout = \"o\"\n[job.edit]\ntau_a = 1.5\n",
    )
    .unwrap();
    let out = duet(&["batch", "--config", "bad.toml"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau_a"));
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(duet(&["selftest"], tmp.path()));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 6);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn sweep_writes_table_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    ok(duet(
        &[
            "sweep", "--clip", "clip", "--target-prompt", "a lion roaring", "--out", "sw", "--steps", "4",
            "--taus", "0.6,0.8", "--grids", "1,2",
        ],
        tmp.path(),
    ));
    let csv = std::fs::read_to_string(tmp.path().join("sw/sweep.csv")).unwrap();
    // header + 2 taus on each axis + 2 grid sizes
    assert_eq!(csv.lines().count(), 7);
    for svg in ["threshold.svg", "grid.svg"] {
        let text = std::fs::read_to_string(tmp.path().join("sw").join(svg)).unwrap();
        assert!(text.starts_with("<svg") && text.contains("polyline"));
    }
}
