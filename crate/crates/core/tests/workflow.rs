//! Batch assessment, metrics and annotation exports against both stores.

mod common;

use std::sync::Arc;

use common::*;
use markscope_core::annotation::{to_jsonl, Annotations};
use markscope_core::evaluation::{build_report, build_reports};
use markscope_core::gateway::{mock_assess, ProviderConfig};
use markscope_core::parse::parse_model_output;
use markscope_core::{
    AnswerId, JobState, PreferenceFlag, PromptCompiler, RecordOrigin, RecordStatus, UserId,
};

#[tokio::test]
async fn mixed_providers_reach_terminal_states() {
    for (name, store, _dir) in stores() {
        let engine = engine(store.clone());
        engine
            .gateway()
            .register_with_transport(fast_remote("down"), Arc::new(Failing(503)))
            .unwrap();
        engine
            .gateway()
            .register_with_transport(fast_remote("chatty"), Arc::new(Canned("I like this answer.".into())))
            .unwrap();
        engine
            .gateway()
            .register_with_transport(fast_remote("greedy"), Arc::new(Canned(r#"{"mark": 7, "rationale": "x"}"#.into())))
            .unwrap();
        let q = vinegar_question("q");
        engine.create_question(&q).unwrap();
        engine.add_answers(&q.id, &four_answers("q")).unwrap();

        let providers = ["mock", "down", "chatty", "greedy"].map(Into::into);
        let job = engine.create_batch(&q.id, None, &providers).unwrap();
        let before = engine.get_batch_status(&job.id).unwrap();
        assert_eq!(before.counts.pending, 16, "{name}");
        assert!(!before.terminal);

        let done = engine.run_batch(&job.id).await.unwrap();
        assert!(done.terminal, "{name}");
        assert_eq!(done.job.state, JobState::Finished);
        assert_eq!(done.counts.total(), 16);
        assert_eq!(done.counts.completed, 4);
        assert_eq!(done.counts.provider_failed, 4);
        assert_eq!(done.counts.parse_failed, 8);
        for r in &done.records {
            assert!(r.is_consistent(), "{name}: {r:?}");
            match r.provider_id.as_str() {
                "mock" => {
                    let a = store.get_answer(&r.answer_id).unwrap().unwrap();
                    let expected = parse_model_output(&mock_assess(&q, &a.text), q.max_mark).unwrap();
                    assert_eq!(r.mark, Some(expected.mark));
                    assert_eq!(r.rationale.as_deref(), Some(expected.rationale.as_str()));
                }
                "down" => assert_eq!(r.status, RecordStatus::ProviderFailed),
                "chatty" => assert_eq!(r.failure.as_deref(), Some("no_mark_found")),
                "greedy" => assert_eq!(r.failure.as_deref(), Some("mark_out_of_range")),
                other => panic!("unexpected provider {other}"),
            }
        }
        let marks: Vec<_> = done
            .records
            .iter()
            .filter(|r| r.provider_id.as_str() == "mock")
            .map(|r| r.mark.unwrap())
            .collect();
        assert_eq!(marks, vec![0, 1, 2, 2], "{name}");

        // re-running a finished job changes nothing
        let again = engine.run_batch(&job.id).await.unwrap();
        assert_eq!(again, done);
    }
}

#[tokio::test]
async fn mock_batches_are_deterministic() {
    let (_, store, _dir) = stores().remove(0);
    let engine = engine(store);
    let q = vinegar_question("q");
    engine.create_question(&q).unwrap();
    engine.add_answers(&q.id, &four_answers("q")).unwrap();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let job = engine.create_batch(&q.id, None, &["mock".into()]).unwrap();
        let s = engine.run_batch(&job.id).await.unwrap();
        outputs.push(
            s.records
                .into_iter()
                .map(|r| (r.answer_id, r.mark, r.rationale, r.raw_output))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
    // both runs are kept
    assert_eq!(engine.store().answer_records(&"a1".into()).unwrap().len(), 2);
}

#[tokio::test]
async fn batch_validation_is_atomic() {
    let (_, store, _dir) = stores().remove(0);
    let engine = engine(store.clone());
    let q = vinegar_question("q");
    engine.create_question(&q).unwrap();
    engine.add_answers(&q.id, &four_answers("q")).unwrap();
    let err = engine.create_batch(&q.id, None, &["mock".into(), "nope".into()]).unwrap_err();
    assert_eq!(err.code(), "unknown_provider");
    let ids: Vec<AnswerId> = vec!["a1".into(), "missing".into()];
    let err = engine.create_batch(&q.id, Some(&ids), &["mock".into()]).unwrap_err();
    assert_eq!(err.code(), "answer_not_found");
    assert!(store.question_records(&q.id).unwrap().is_empty());

    // a bad answer in an upload rejects the whole upload
    let bad = vec![answer("q", "b1", "fine", Some(1)), answer("q", "b2", "too high", Some(3))];
    assert!(engine.add_answers(&q.id, &bad).is_err());
    assert!(store.get_answer(&"b1".into()).unwrap().is_none());
}

#[tokio::test]
async fn gold_correction_changes_only_the_corrected_pair() {
    for (name, store, _dir) in stores() {
        let engine = engine(store.clone());
        let q = vinegar_question("q");
        engine.create_question(&q).unwrap();
        let mut answers = four_answers("q");
        answers.push(answer("q", "a5", "no gold for this one", None));
        engine.add_answers(&q.id, &answers).unwrap();

        assert_eq!(
            build_reports(store.as_ref(), &q.id).unwrap_err().code(),
            "no_evaluable_records"
        );
        let job = engine.create_batch(&q.id, None, &["mock".into()]).unwrap();
        engine.run_batch(&job.id).await.unwrap();

        // gold (0,1,2,1) vs mock (0,1,2,2)
        let before = build_report(store.as_ref(), &q.id, &"mock".into()).unwrap();
        assert_eq!(before.n_pairs, 4, "{name}");
        assert_eq!(before.n_excluded, 1);
        assert_eq!(before.accuracy, 0.75);
        assert!((before.macro_f1 - 7.0 / 9.0).abs() < 1e-9);
        assert!((before.qwk - 0.8).abs() < 1e-9);
        assert_eq!(before.confusion, vec![vec![1, 0, 0], vec![0, 1, 1], vec![0, 0, 1]]);

        let ann = Annotations::new(store.clone(), Arc::new(PromptCompiler::builtin()));
        ann.correct_gold_label(&"a4".into(), 2, &"u".into()).unwrap();
        let after = build_report(store.as_ref(), &q.id, &"mock".into()).unwrap();
        assert_eq!((after.accuracy, after.macro_f1, after.qwk), (1.0, 1.0, 1.0));
        assert_eq!(after.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        assert_eq!(after.n_excluded, 1);

        // chat-regenerated and human records never enter the report
        engine
            .run_single(&q.id, &"a1".into(), &"mock".into(), RecordOrigin::Chat, Some("\nbe generous".into()))
            .await
            .unwrap();
        ann.submit_rationale(&"a1".into(), 2, "Generous human.", &"u".into()).unwrap();
        assert_eq!(build_report(store.as_ref(), &q.id, &"mock".into()).unwrap(), after);
        assert_eq!(build_reports(store.as_ref(), &q.id).unwrap(), vec![after]);
    }
}

#[tokio::test]
async fn zero_gold_means_no_evaluable_records() {
    let (_, store, _dir) = stores().remove(0);
    let engine = engine(store.clone());
    let q = vinegar_question("q");
    engine.create_question(&q).unwrap();
    engine
        .add_answers(&q.id, &[answer("q", "x1", "measure mass", None)])
        .unwrap();
    let job = engine.create_batch(&q.id, None, &["mock".into()]).unwrap();
    engine.run_batch(&job.id).await.unwrap();
    let err = build_report(store.as_ref(), &q.id, &"mock".into()).unwrap_err();
    assert_eq!(err.code(), "no_evaluable_records");
}

#[tokio::test]
async fn exports_are_stable_and_parse() {
    for (name, store, _dir) in stores() {
        let engine = engine(store.clone());
        engine
            .gateway()
            .register_provider(ProviderConfig::mock("mock-b"))
            .unwrap();
        let q = vinegar_question("q");
        engine.create_question(&q).unwrap();
        engine.add_answers(&q.id, &four_answers("q")).unwrap();
        let job = engine.create_batch(&q.id, None, &["mock".into(), "mock-b".into()]).unwrap();
        let status = engine.run_batch(&job.id).await.unwrap();

        let ann = Annotations::new(store.clone(), Arc::new(PromptCompiler::builtin()));
        let (u, v): (UserId, UserId) = ("u".into(), "v".into());
        let rec = |a: &str, p: &str| {
            status
                .records
                .iter()
                .find(|r| r.answer_id.as_str() == a && r.provider_id.as_str() == p)
                .unwrap()
                .id
                .clone()
        };
        // u changes their mind on a1/mock; v disagrees with u
        ann.set_preference(&rec("a1", "mock"), PreferenceFlag::NotPreferred, &u).unwrap();
        ann.set_preference(&rec("a1", "mock"), PreferenceFlag::Preferred, &u).unwrap();
        ann.set_preference(&rec("a1", "mock-b"), PreferenceFlag::NotPreferred, &u).unwrap();
        ann.set_preference(&rec("a1", "mock"), PreferenceFlag::NotPreferred, &v).unwrap();
        ann.set_preference(&rec("a1", "mock-b"), PreferenceFlag::Preferred, &v).unwrap();
        ann.set_preference(&rec("a2", "mock"), PreferenceFlag::Preferred, &v).unwrap();
        let (_, human) = ann.submit_rationale(&"a2".into(), 1, "Mentions measuring mass only.", &u).unwrap();
        ann.set_preference(&human.id, PreferenceFlag::NotPreferred, &v).unwrap();

        let pairs = ann.export_preference_pairs(&q.id).unwrap();
        let summary: Vec<_> = pairs
            .iter()
            .map(|p| (p.answer_id.as_str(), p.chosen.provider.as_str(), p.rejected.provider.as_str(), p.annotator.as_str()))
            .collect();
        assert_eq!(
            summary,
            vec![
                ("a1", "mock", "mock-b", "u"),
                ("a1", "mock-b", "mock", "v"),
                ("a2", "mock", "human", "v"),
            ],
            "{name}"
        );

        let first = to_jsonl(&pairs);
        let second = to_jsonl(&ann.export_preference_pairs(&q.id).unwrap());
        assert_eq!(first, second);
        for line in first.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["schema"], "pref-v1");
        }

        let sft = to_jsonl(&ann.export_sft(&q.id, true).unwrap());
        assert_eq!(sft, to_jsonl(&ann.export_sft(&q.id, true).unwrap()));
        let sources: Vec<String> = sft
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["source"].as_str().unwrap().to_owned())
            .collect();
        // human line first, then records someone currently prefers: a1/mock (u), a1/mock-b (v), a2/mock (v)
        assert_eq!(sources, ["human", "preferred_model", "preferred_model", "preferred_model"]);
    }
}
