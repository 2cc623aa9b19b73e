use std::collections::HashMap;
use std::path::PathBuf;

use demokit::action::Action;
use demokit::dataset::{
    build_kshot, classify_profile, instruction_similarity, ui_document, ui_similarity, SimilarityMatrix,
    SimilarityTables, TfIdfModel, Thresholds,
};
use demokit::describe::DemoParser;
use demokit::executor::{run_replay, DescriptionMode, Executor, ExecutorConfig, Termination};
use demokit::model::{CachingEmbedder, EchoChat, Embedder, HashEmbedder};
use demokit::store::{Quadrant, Step, Trajectory};
use proptest::prelude::*;

fn task(id: &str, app: &str, actions: Vec<Action>, trees: Option<Vec<String>>) -> Trajectory {
    Trajectory {
        task_id: id.into(),
        app: app.into(),
        instruction: format!("do {id}"),
        steps: actions
            .into_iter()
            .enumerate()
            .map(|(index, action)| Step {
                index,
                screenshot: PathBuf::from(format!("/nonexistent/{id}_{index}.png")),
                action,
                description: None,
            })
            .collect(),
        screen_width: 100,
        screen_height: 200,
        ui_trees: trees,
    }
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["button", "ok", "list", "view", "text", "<node/>", "a=b"]), 0..8)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn quadrants_partition_the_plane(ui in 0.0f64..=1.0, act in -1.0f64..=1.0, tu in 0.0f64..=1.0, ta in -1.0f64..=1.0) {
        let t = Thresholds { ui: tu, action: ta };
        let q = classify_profile(ui, act, &t);
        prop_assert_eq!(Quadrant::ALL.iter().filter(|c| **c == q).count(), 1);
        prop_assert_eq!(q, Quadrant::from_levels(ui >= tu, act >= ta));
    }

    #[test]
    fn ui_similarity_is_symmetric_and_bounded(a in words(), b in words(), c in words()) {
        let ts: Vec<Trajectory> = [&a, &b, &c]
            .iter()
            .enumerate()
            .map(|(i, d)| task(&format!("t{i}"), "A", vec![Action::task_complete(None)], Some(vec![(*d).clone()])))
            .collect();
        let docs: Vec<String> = ts.iter().map(|t| ui_document(t).unwrap()).collect();
        let model = TfIdfModel::fit(&docs);
        let ab = ui_similarity(&ts[0], &ts[1], &model).unwrap();
        let ba = ui_similarity(&ts[1], &ts[0], &model).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn instruction_similarity_is_symmetric_and_bounded(a in "[a-z ]{1,30}", b in "[a-z ]{1,30}") {
        let e = HashEmbedder::new(16).unwrap();
        let ab = instruction_similarity(&e, &a, &b).unwrap();
        let ba = instruction_similarity(&e, &b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn embed_preserves_order_and_length(texts in prop::collection::vec("[a-z]{0,6}( [a-z]{1,6}){0,3}", 1..20)) {
        let plain = HashEmbedder::new(8).unwrap();
        let cached = CachingEmbedder::new(HashEmbedder::new(8).unwrap());
        let _ = cached.embed(&texts[..texts.len() / 2 + 1]).unwrap();
        let got = cached.embed(&texts).unwrap();
        prop_assert_eq!(got.len(), texts.len());
        for (t, v) in texts.iter().zip(&got) {
            prop_assert_eq!(v, &plain.embed_one(t).unwrap());
        }
    }

    #[test]
    fn supports_are_the_top_ranked_same_app_candidates(
        sims in prop::collection::vec(-1.0f64..=1.0, 66),
        apps in prop::collection::vec(0usize..2, 12),
        k in 1usize..=3,
        floor in 0.0f64..0.8,
    ) {
        let tasks: Vec<Trajectory> = (0..12)
            .map(|i| task(&format!("t{i:02}"), ["A", "B"][apps[i]], vec![Action::task_complete(None)], None))
            .collect();
        let ids: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
        let mut pairs = Vec::new();
        let mut table = HashMap::new();
        let mut n = 0;
        for a in 0..12 {
            for b in a + 1..12 {
                let s = sims[n];
                n += 1;
                if apps[a] == apps[b] {
                    pairs.push((ids[a].clone(), ids[b].clone(), s));
                    table.insert((a, b), s);
                    table.insert((b, a), s);
                }
            }
        }
        let m = SimilarityMatrix::from_pairs(ids.clone(), pairs).unwrap();
        let tables = SimilarityTables { instruction: m.clone(), ui: m.clone(), action: m };
        let sel = build_kshot(&tasks, &tables, k, floor, &Thresholds::default()).unwrap();
        prop_assert_eq!(sel.combos.len() + sel.dropped.len(), 12);
        for c in &sel.combos {
            let q = ids.iter().position(|i| *i == c.query_task_id).unwrap();
            let mut ranked: Vec<usize> = (0..12).filter(|&j| j != q && apps[j] == apps[q]).collect();
            ranked.sort_by(|&x, &y| table[&(q, y)].total_cmp(&table[&(q, x)]).then(ids[x].cmp(&ids[y])));
            let want: Vec<String> = ranked[..k].iter().map(|&j| ids[j].clone()).collect();
            prop_assert_eq!(&c.support_task_ids, &want);
            let mean = ranked[..k].iter().map(|&j| table[&(q, j)]).sum::<f64>() / k as f64;
            prop_assert!(mean >= floor);
        }
    }

    #[test]
    fn episodes_never_exceed_the_step_limit(len in 1usize..12, limit in 1usize..8) {
        let mut actions: Vec<Action> = (0..len - 1).map(|i| Action::click(i as u32, 1)).collect();
        actions.push(Action::task_complete(None));
        let gold = task("g", "A", actions.clone(), None);
        let chat = EchoChat::new(actions);
        let config = ExecutorConfig {
            max_steps: limit,
            description_mode: DescriptionMode::Mechanical,
            ..ExecutorConfig::default()
        };
        let result = run_replay(&Executor::new(&chat, None, config), &gold, &mut |_| {}).unwrap();
        prop_assert!(result.steps_taken <= limit);
        prop_assert_eq!(result.steps_taken, len.min(limit));
        let want = if len <= limit { Termination::TaskComplete } else { Termination::StepLimit };
        prop_assert_eq!(result.terminated_by, want);
    }
}

#[test]
fn knowledge_generation_is_deterministic_under_the_mock() {
    let dir = tempfile::tempdir().unwrap();
    let shot = |i: usize| {
        let p = dir.path().join(format!("{i}.png"));
        image::RgbaImage::from_pixel(50, 80, image::Rgba([i as u8 * 40, 0, 0, 255])).save(&p).unwrap();
        p
    };
    let mut t = task(
        "det",
        "A",
        vec![Action::click(10, 10), Action::type_text("hi"), Action::task_complete(Some("3"))],
        None,
    );
    for (i, s) in t.steps.iter_mut().enumerate() {
        s.screenshot = shot(i);
    }
    let run = || {
        let chat = EchoChat::new(vec![]);
        serde_json::to_string(&DemoParser::new(&chat).generate_knowledge(&t).unwrap()).unwrap()
    };
    assert_eq!(run(), run());
}
