use std::path::Path;

use nac::analysis::Codebook;
use nac::codes::HashIndex;
use nac::config::TrainConfig;
use nac::data::Dataset;
use nac::model::EncoderModel;
use proptest::prelude::*;

fn round_trip(target: &str, text: &str) {
    match target {
        "dataset_csv" => {
            if let Ok(ds) = Dataset::parse_csv("seed", text) {
                assert_eq!(Dataset::parse_csv("seed", &ds.to_csv()).unwrap().to_csv(), ds.to_csv());
            }
        }
        "train_config" => {
            if let Ok(cfg) = TrainConfig::parse(text) {
                assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap().to_text(), cfg.to_text());
            }
        }
        "checkpoint_json" => {
            if let Ok(m) = EncoderModel::from_json(text) {
                assert_eq!(EncoderModel::from_json(&m.to_json()).unwrap().to_json(), m.to_json());
            }
        }
        "index_import" => {
            if let Ok(ix) = HashIndex::import(text) {
                assert_eq!(HashIndex::import(&ix.export()).unwrap().export(), ix.export());
            }
        }
        "code_file" => {
            if let Ok(b) = Codebook::parse(text) {
                assert_eq!(Codebook::parse(&b.to_text()).unwrap().codes(), b.codes());
            }
        }
        other => panic!("unknown target {other}"),
    }
}

const TARGETS: [&str; 5] = ["dataset_csv", "train_config", "checkpoint_json", "index_import", "code_file"];

#[test]
fn corpus_seeds_round_trip() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let mut seen = 0;
    for target in TARGETS {
        for entry in std::fs::read_dir(root.join(target)).unwrap() {
            let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
            round_trip(target, &text);
            seen += 1;
        }
    }
    assert!(seen >= TARGETS.len());
}

#[test]
fn valid_seeds_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let read = |p: &str| std::fs::read_to_string(root.join(p)).unwrap();
    assert_eq!(Dataset::parse_csv("s", &read("dataset_csv/small.csv")).unwrap().len(), 2);
    assert!(Dataset::parse_csv("s", &read("dataset_csv/ragged.csv")).is_err());
    assert!(TrainConfig::parse(&read("train_config/partial.cfg")).is_ok());
    assert!(EncoderModel::from_json(&read("checkpoint_json/tiny.json")).is_ok());
    assert_eq!(HashIndex::import(&read("index_import/three.txt")).unwrap().len(), 3);
    assert_eq!(Codebook::parse(&read("code_file/header_bits.txt")).unwrap().len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn parsers_never_panic(text in "[0-9a-z_.,=#:{}\\[\\]\" \\n+-]{0,200}") {
        for target in TARGETS {
            round_trip(target, &text);
        }
    }

    #[test]
    fn line_oriented_parsers_survive_structured_noise(
        lines in proptest::collection::vec("[01]{1,6}|[0-9]{1,2},[0-9],[01]{1,6}|f0,f1,label|-?[0-9]\\.[0-9]e-?[0-9],[0-9]", 0..8)
    ) {
        let text = lines.join("\n");
        for target in TARGETS {
            round_trip(target, &text);
        }
    }
}
