//! End-to-end CLI tests driving the built binary through the full command
//! surface: ingest, ground, edit, morph, personalize, generate, metrics.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use storyreel::imaging::{self, synthetic_frame};
use storyreel::linalg::Matrix;
use storyreel::seed::SeedRng;
use storyreel::store::{write_feature_sidecar, write_matrix, FeatureSidecar};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_storyreel"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let output = cmd.output().expect("spawn storyreel");
    assert!(
        output.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn run_err(cmd: &mut Command) -> Output {
    let output = cmd.output().expect("spawn storyreel");
    assert!(!output.status.success(), "command unexpectedly succeeded: {cmd:?}");
    output
}

/// Write source material for one video and return (frames_dir, features).
fn video_fixture(
    dir: &Path,
    id: &str,
    clips: usize,
    frames: usize,
    seed: u64,
) -> (PathBuf, PathBuf) {
    let frames_dir = dir.join(format!("{id}_src"));
    std::fs::create_dir_all(&frames_dir).unwrap();
    for i in 0..frames {
        let f = synthetic_frame(seed + i as u64, 64, 64);
        imaging::save_frame(&frames_dir.join(imaging::frame_file_name(i)), &f).unwrap();
    }
    let mut rng = SeedRng::new(seed);
    let m = Matrix::gaussian(clips, 16, 1.0, &mut rng);
    let features = dir.join(format!("{id}.features"));
    write_matrix(&features, &m).unwrap();
    write_feature_sidecar(
        &features,
        &FeatureSidecar { num_clips: clips, feature_dim: 16, fps: None },
    )
    .unwrap();
    (frames_dir, features)
}

fn ingest(store: &Path, dir: &Path, id: &str, clips: usize, frames: usize, seed: u64) {
    let (frames_dir, features) = video_fixture(dir, id, clips, frames, seed);
    run_ok(bin().args([
        "store",
        "ingest",
        "--store",
        store.to_str().unwrap(),
        "--video-id",
        id,
        "--frames",
        frames_dir.to_str().unwrap(),
        "--features",
        features.to_str().unwrap(),
        "--fps",
        "8",
    ]));
}

/// Fast edit config: few steps, small resolution, untrained toy backend.
fn edit_config_json() -> serde_json::Value {
    serde_json::json!({
        "edit": { "steps": 4, "resolution": 32 },
        "backend": { "kind": "toy", "pretrain_steps": 0 }
    })
}

#[test]
fn full_command_surface() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let store = dir.join("store");

    // Ingest two videos and inspect the store.
    ingest(&store, dir, "alpha", 2, 4, 10);
    ingest(&store, dir, "beta", 2, 4, 20);
    let info = run_ok(bin().args(["store", "info", "--store", store.to_str().unwrap()]));
    let info_text = String::from_utf8_lossy(&info.stdout).into_owned();
    assert!(info_text.contains("alpha") && info_text.contains("beta"), "{info_text}");
    assert!(info_text.contains("2 videos"), "{info_text}");

    // Ground two queries, driving the weight-archive path explicitly.
    let weights_path = dir.join("grounding.weights");
    storyreel::grounding::GroundingWeights::default_for(16, 8).save(&weights_path).unwrap();
    let queries = dir.join("queries.txt");
    std::fs::write(&queries, "a person dances\na dog swims\n").unwrap();
    let grounding_out = dir.join("grounding.json");
    run_ok(bin().args([
        "ground",
        "--queries",
        queries.to_str().unwrap(),
        "--store",
        store.to_str().unwrap(),
        "--top-k",
        "2",
        "--weights",
        weights_path.to_str().unwrap(),
        "--out",
        grounding_out.to_str().unwrap(),
    ]));
    let grounding: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&grounding_out).unwrap()).unwrap();
    let first = &grounding[0];
    assert_eq!(first["query"], "a person dances");
    assert_eq!(first["candidates"].as_array().unwrap().len(), 2);
    let best = &first["candidates"][0];
    assert!(best["score"].as_f64().unwrap() <= 1.0);

    // Edit a segment from each video.
    let config_path = dir.join("edit.json");
    std::fs::write(&config_path, edit_config_json().to_string()).unwrap();
    for (seg, id) in [("seg_a", "alpha"), ("seg_b", "beta")] {
        let seg_json = dir.join(format!("{seg}.json"));
        std::fs::write(
            &seg_json,
            serde_json::json!({
                "store": store,
                "video_id": id,
                "start_clip": 0,
                "end_clip": 1,
                "query": "a person dances"
            })
            .to_string(),
        )
        .unwrap();
        run_ok(bin().args([
            "edit",
            "--segment",
            seg_json.to_str().unwrap(),
            "--query-edit",
            "a robot dances",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            dir.join(seg).to_str().unwrap(),
        ]));
        let audit: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.join(seg).join("segment.json")).unwrap())
                .unwrap();
        assert_eq!(audit["edited_query"], "a robot dances");
        assert_eq!(audit["frame_count"], 4);
        assert!(dir.join(seg).join("000003.png").exists());
    }

    // Morph between the two edited segments.
    let trans = dir.join("trans");
    run_ok(bin().args([
        "morph",
        "--prev",
        dir.join("seg_a").to_str().unwrap(),
        "--next",
        dir.join("seg_b").to_str().unwrap(),
        "--n",
        "3",
        "--finetune-steps",
        "2",
        "--rank",
        "2",
        "--steps",
        "4",
        "--save-loras",
        "--out",
        trans.to_str().unwrap(),
    ]));
    assert!(trans.join("000000.png").exists());
    assert!(trans.join("000001.png").exists());
    assert!(!trans.join("000002.png").exists(), "n=3 yields exactly 2 frames");
    assert!(trans.join("prev.lora").exists() && trans.join("prev.lora.json").exists());
    assert!(trans.join("next.lora").exists());
    let t_audit: serde_json::Value =
        serde_json::from_slice(&std::fs::read(trans.join("transition.json")).unwrap()).unwrap();
    assert_eq!(t_audit["frame_count"], 2);

    // Metrics on an edited segment.
    let metrics = run_ok(bin().args(["metrics", "--frames", dir.join("seg_a").to_str().unwrap()]));
    let metrics_text = String::from_utf8_lossy(&metrics.stdout).into_owned();
    assert!(metrics_text.contains("temporal_flickering"), "{metrics_text}");
}

#[test]
fn generate_and_personalize_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let store = dir.join("store");
    for (i, id) in ["one", "two", "three"].iter().enumerate() {
        ingest(&store, dir, id, 2, 4, 100 + i as u64 * 10);
    }

    let story = serde_json::json!({
        "queries": [
            {"source": "a person rides a horse", "edited": "a knight rides a horse"},
            {"source": "someone swims in a pool", "edited": "a robot swims in a pool"}
        ],
        "store": store,
        "edit": { "steps": 4, "resolution": 32 },
        "transition": { "n": 3, "finetune_steps": 2, "rank": 2 },
        "backend": { "kind": "toy", "pretrain_steps": 0 },
        "grounding": { "joint_dim": 16 },
        "seed": 5,
        "frame_list": true
    });
    let config_path = dir.join("story.json");
    std::fs::write(&config_path, story.to_string()).unwrap();

    let out = dir.join("run");
    run_ok(bin().args([
        "generate",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "2",
    ]));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let total = manifest["total_frames"].as_u64().unwrap();
    let seg_sum: u64 = manifest["segments"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["frame_count"].as_u64().unwrap())
        .sum();
    let trans_sum: u64 = manifest["transitions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["frame_count"].as_u64().unwrap())
        .sum();
    assert_eq!(total, seg_sum + trans_sum, "frame-count conservation");
    assert!(out.join(imaging::frame_file_name(0)).exists());
    assert!(out.join(imaging::frame_file_name(total as usize - 1)).exists());
    assert!(out.join("frames.txt").exists());
    let flickering = manifest["metrics"]["temporal_flickering"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&flickering));

    // Personalize a backend, then drive generate with the saved weights.
    let subj = dir.join("subject");
    std::fs::create_dir_all(&subj).unwrap();
    for i in 0..3 {
        imaging::save_frame(
            &subj.join(imaging::frame_file_name(i)),
            &synthetic_frame(900 + i as u64, 64, 64),
        )
        .unwrap();
    }
    let weights = dir.join("subject.weights");
    run_ok(bin().args([
        "personalize",
        "--images",
        subj.to_str().unwrap(),
        "--token",
        "[V]",
        "--class",
        "dog",
        "--steps",
        "10",
        "--t-steps",
        "4",
        "--resolution",
        "32",
        "--out",
        weights.to_str().unwrap(),
    ]));
    assert!(weights.exists());

    let out2 = dir.join("run_personalized");
    run_ok(bin().args([
        "generate",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--personalize",
        weights.to_str().unwrap(),
    ]));
    assert!(out2.join("manifest.json").exists());
}

#[test]
fn store_root_env_var_resolves_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let root = dir.join("root");
    std::fs::create_dir_all(&root).unwrap();
    ingest(&root.join("store"), dir, "only", 1, 2, 7);

    let story = serde_json::json!({
        "queries": [{"source": "anything", "edited": "anything else"}],
        "store": "store",
        "edit": { "steps": 2, "resolution": 32 },
        "backend": { "kind": "toy", "pretrain_steps": 0 },
        "grounding": { "joint_dim": 16 },
    });
    let config_path = dir.join("story.json");
    std::fs::write(&config_path, story.to_string()).unwrap();
    let out = dir.join("run");
    run_ok(bin().env("STORYREEL_STORE_ROOT", &root).args([
        "generate",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn error_paths_surface_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Grounding an empty store fails with a message.
    let queries = dir.join("q.txt");
    std::fs::write(&queries, "something\n").unwrap();
    let out = run_err(bin().args([
        "ground",
        "--queries",
        queries.to_str().unwrap(),
        "--store",
        dir.join("nonexistent").to_str().unwrap(),
        "--out",
        dir.join("g.json").to_str().unwrap(),
    ]));
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(stderr.contains("empty"), "{stderr}");

    // Editing an out-of-range span names the span.
    let store = dir.join("store");
    ingest(&store, dir, "vid", 2, 4, 50);
    let seg_json = dir.join("seg.json");
    std::fs::write(
        &seg_json,
        serde_json::json!({
            "store": store,
            "video_id": "vid",
            "start_clip": 3,
            "end_clip": 2,
            "query": "q"
        })
        .to_string(),
    )
    .unwrap();
    let out = run_err(bin().args([
        "edit",
        "--segment",
        seg_json.to_str().unwrap(),
        "--query-edit",
        "r",
        "--out",
        dir.join("seg_out").to_str().unwrap(),
    ]));
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(stderr.contains("(3, 2)"), "{stderr}");

    // Metric plugin failures are recorded, not fatal.
    let frames = dir.join("frames");
    std::fs::create_dir_all(&frames).unwrap();
    for i in 0..3 {
        imaging::save_frame(
            &frames.join(imaging::frame_file_name(i)),
            &synthetic_frame(60 + i as u64, 16, 16),
        )
        .unwrap();
    }
    let out = run_ok(bin().args([
        "metrics",
        "--frames",
        frames.to_str().unwrap(),
        "--plugin",
        dir.join("missing_plugin.sh").to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("unavailable"), "{stdout}");
}
