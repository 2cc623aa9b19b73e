use std::fs;
use std::path::{Path, PathBuf};

use demokit::action::Action;
use demokit::executor::EpisodeResult;
use demokit::harness::{self, Config, OfflineInputs, Session};
use demokit::store::{read_jsonl, save_trajectories, Step, Trajectory};

fn split(dir: &Path, n: usize) -> PathBuf {
    let mut out = Vec::new();
    for t in 0..n {
        let len = 2 + t % 4;
        let steps = (0..len)
            .map(|i| {
                let shot = dir.join(format!("s{t}_{i}.png"));
                image::RgbaImage::from_pixel(40, 80, image::Rgba([(t * 30) as u8, (i * 50) as u8, 9, 255]))
                    .save(&shot)
                    .unwrap();
                let action = match (i + 1 == len, i % 3) {
                    (true, _) => Action::task_complete(None),
                    (_, 0) => Action::click(5 + i as u32, 7),
                    (_, 1) => Action::type_text(format!("word{t}")),
                    _ => Action::PressBack,
                };
                Step {
                    index: i,
                    screenshot: shot,
                    action,
                    description: None,
                }
            })
            .collect();
        out.push(Trajectory {
            task_id: format!("task-{t}"),
            app: ["Mail", "Maps"][t % 2].into(),
            instruction: format!("open the {} view and read item {}", ["Mail", "Maps"][t % 2], t % 3),
            steps,
            screen_width: 40,
            screen_height: 80,
            ui_trees: None,
        });
    }
    let path = dir.join("split.jsonl");
    save_trajectories(&out, &path).unwrap();
    path
}

fn session(root: &Path, sets: &[(&str, &str)]) -> Session {
    let mut config = Config::default();
    config.set("mock", "echo").unwrap();
    for (k, v) in sets {
        config.set(k, v).unwrap();
    }
    Session::new(&config, root, "test", &[]).unwrap()
}

#[test]
fn retrieval_replay_excludes_self_and_is_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let gold = split(dir.path(), 8);

    let mut s = session(&dir.path().join("kb"), &[]);
    harness::parse_demos(&mut s, &gold, false).unwrap();
    s.finish().unwrap();
    let kb = dir.path().join("kb/outputs/knowledge_base.jsonl");

    let mut s = session(&dir.path().join("ix"), &[]);
    harness::index(&mut s, &kb).unwrap();
    s.finish().unwrap();
    let index = dir.path().join("ix/outputs/index.jsonl");

    let mut outputs = Vec::new();
    for workers in ["1", "4"] {
        let root = dir.path().join(format!("run{workers}"));
        let mut s = session(&root, &[("workers", workers), ("k", "2")]);
        let inputs = OfflineInputs {
            trajectories: Some(gold.clone()),
            knowledge_base: Some(kb.clone()),
            index: Some(index.clone()),
            ..OfflineInputs::default()
        };
        let report = harness::run_offline(&mut s, &inputs).unwrap();
        s.finish().unwrap();
        assert_eq!(report["mode"], "retrieval");
        assert_eq!(report["eval"]["overall"]["match"], 1.0);

        let episodes: Vec<EpisodeResult> = read_jsonl(&root.join("outputs/episodes.jsonl")).unwrap();
        for e in &episodes {
            assert_eq!(e.retrieved.len(), 2, "{}", e.task_id);
            assert!(e.retrieved.iter().all(|h| h.entry_id != format!("kb-{}", e.task_id)));
            assert_eq!(e.demos.len(), 2);
        }
        outputs.push(fs::read(root.join("outputs/episodes.jsonl")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn scripted_backend_failure_is_reported_after_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let gold = split(dir.path(), 2);
    let script = dir.path().join("script.jsonl");
    fs::write(&script, "\"CLICK[5,7]\"\n{\"status\": 500}\n").unwrap();
    let root = dir.path().join("run");
    let mut s = session(&root, &[("mock", &format!("scripted:{}", script.display()))]);
    let inputs = OfflineInputs {
        trajectories: Some(gold),
        ..OfflineInputs::default()
    };
    let err = harness::run_offline(&mut s, &inputs).unwrap_err();
    assert!(err.is_backend(), "{err}");
    assert!(root.join("outputs/episodes.jsonl").is_file());
    assert!(root.join("report.json").is_file());
}

#[test]
fn dataset_manifest_without_combos_for_k_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let gold = split(dir.path(), 2);
    let manifest = dir.path().join("dataset.json");
    fs::write(
        &manifest,
        format!(
            "{{\"split\": \"s\", \"k\": [1], \"trajectories\": {:?}, \"combos\": {{}}}}",
            gold.file_name().unwrap()
        ),
    )
    .unwrap();
    let mut s = session(&dir.path().join("run"), &[("k", "3")]);
    let inputs = OfflineInputs {
        dataset: Some(manifest),
        ..OfflineInputs::default()
    };
    let err = harness::run_offline(&mut s, &inputs).unwrap_err();
    assert!(!err.is_backend());
    assert!(err.to_string().contains("k = 3"), "{err}");
}
