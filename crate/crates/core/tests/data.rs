use std::fs;

use glcon_core::config::RunConfig;
use glcon_core::data::{
    load_dataset, make_batches, split_sentences, write_dataset, DatasetConfig, ImageStorage, LabelVector,
    SentenceConfig,
};
use glcon_core::prompt::{PromptGrammar, ReportSynthesizer, SynthesisOptions};
use glcon_core::synthetic::generate_splits;
use glcon_core::Error;
use proptest::prelude::*;

fn small_config() -> DatasetConfig {
    DatasetConfig {
        image_size: 2,
        ..DatasetConfig::default()
    }
}

const IMG: &str = "[[0.0, 0.5], [1.0, 0.25]]";

#[test]
fn loads_records_in_file_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let lines: Vec<String> = ["c", "a", "b"]
        .iter()
        .map(|id| format!(r#"{{"id": "{id}", "image": {IMG}, "report": "Shows x. No y."}}"#))
        .collect();
    fs::write(&path, lines.join("\n")).unwrap();
    let recs = load_dataset(&path, &small_config(), None, 0).unwrap();
    let ids: Vec<&str> = recs.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["c", "a", "b"]);
    assert_eq!(recs[0].sentences, ["Shows x.", "No y."]);
    assert_eq!(recs[0].image.pixels(), &[0.0, 0.5, 1.0, 0.25]);
}

#[test]
fn empty_report_without_labels_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let text = format!(
        "{{\"id\": \"a\", \"image\": {IMG}, \"report\": \"Fine.\"}}\n{{\"id\": \"b\", \"image\": {IMG}, \"report\": \"  \"}}\n"
    );
    fs::write(&path, text).unwrap();
    match load_dataset(&path, &small_config(), None, 0) {
        Err(Error::Validation(msg)) => assert!(msg.contains("line 2"), "{msg}"),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn duplicate_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let line = format!(r#"{{"id": "a", "image": {IMG}, "report": "Fine."}}"#);
    fs::write(&path, format!("{line}\n{line}\n")).unwrap();
    assert!(load_dataset(&path, &small_config(), None, 0).is_err());
}

#[test]
fn label_only_records_get_synthesized_reports() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    fs::write(&path, format!(r#"{{"id": "a", "image": {IMG}, "labels": [1, 0, -1, 0, 1, -2]}}"#)).unwrap();
    let options = SynthesisOptions {
        max_negative_classes: None,
        ..SynthesisOptions::default()
    };
    let synth = ReportSynthesizer::new(PromptGrammar::default_grammar(), options).unwrap();
    let recs = load_dataset(&path, &small_config(), Some(&synth), 4).unwrap();
    let (present, absent) = synth.parse_report(&recs[0].sentences).unwrap();
    assert_eq!(present.into_iter().collect::<Vec<_>>(), [0, 4]);
    assert_eq!(absent.into_iter().collect::<Vec<_>>(), [1, 3]);
    assert_eq!(recs[0].labels, Some(LabelVector::new(vec![1, 0, -1, 0, 1, -2]).unwrap()));
    assert!(load_dataset(&path, &small_config(), None, 4).is_err());
}

fn synthetic_records() -> Vec<glcon_core::data::ReportRecord> {
    let mut config = RunConfig::default();
    config.synthetic.train_samples = 12;
    config.synthetic.eval_samples = 1;
    generate_splits(&config, &PromptGrammar::default_grammar()).unwrap().0
}

#[test]
fn serialize_then_load_round_trips() {
    let recs = synthetic_records();
    let dir = tempfile::tempdir().unwrap();
    for storage in [ImageStorage::Inline, ImageStorage::Files("img".into())] {
        let path = dir.path().join("set.jsonl");
        write_dataset(&path, &recs, &storage).unwrap();
        let loaded = load_dataset(&path, &DatasetConfig::default(), None, 0).unwrap();
        assert_eq!(loaded, recs, "{storage:?}");
    }
}

#[test]
fn ten_records_in_batches_of_four() {
    let recs = &synthetic_records()[..10];
    let sizes: Vec<usize> = make_batches(recs, 4, 1).unwrap().iter().map(|b| b.len()).collect();
    assert_eq!(sizes, [4, 4, 2]);
    let ids = |seed| -> Vec<Vec<String>> { make_batches(recs, 4, seed).unwrap().iter().map(|b| b.ids()).collect() };
    assert_eq!(ids(9), ids(9));
}

#[test]
fn worked_splits() {
    let c = SentenceConfig::default();
    assert_eq!(split_sentences("The lungs are clear. No effusion.", &c), ["The lungs are clear.", "No effusion."]);
    assert_eq!(split_sentences("No acute findings", &c), ["No acute findings"]);
    assert_eq!(
        split_sentences("Stable appearance; no pneumothorax. Compared to prior.", &c),
        ["Stable appearance; no pneumothorax.", "Compared to prior."]
    );
    let semi = SentenceConfig {
        split_on_semicolon: true,
        ..SentenceConfig::default()
    };
    assert_eq!(split_sentences("Stable appearance; no pneumothorax. Compared to prior.", &semi).len(), 3);
}

proptest! {
    #[test]
    fn splitting_a_split_sentence_is_idempotent(words in prop::collection::vec("[a-z]{1,6}[.!?]?", 1..12)) {
        let c = SentenceConfig::default();
        for s in split_sentences(&words.join(" "), &c) {
            prop_assert_eq!(split_sentences(&s, &c), vec![s.clone()]);
        }
    }
}
