// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::io::BufReader;

use geopatch_core::corpus::{build_pairs, distance_phrases, filter_places, parse_geonames, Corpus};
use geopatch_core::toy::reference_vocab;

/// Count recorded when `fixtures/geonames_gb_sample.txt` was written.
const FIXTURE_GB_OVER_50K: usize = 18;

fn fixture() -> geopatch_core::corpus::GeonamesParse {
    let f = std::fs::File::open(common::fixture_path("geonames_gb_sample.txt")).unwrap();
    parse_geonames(BufReader::new(f)).unwrap()
}

#[test]
fn fixture_filter_count() {
    let parsed = fixture();
    assert_eq!(parsed.records.len(), 23);
    assert_eq!(parsed.rejects.len(), 2);
    let names = filter_places(&parsed.records, "GB", 50_000, 'P');
    assert_eq!(names.len(), FIXTURE_GB_OVER_50K);
    assert!(names.contains(&"Overford".to_string()));
    assert!(!names.contains(&"Exactford".to_string()));
    assert!(!names.contains(&"Dublin".to_string()));
    assert!(!names.contains(&"Lake District".to_string()));
    assert_eq!(names.iter().filter(|n| *n == "Newport").count(), 1);
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn filter_ignores_line_order() {
    let mut records = fixture().records;
    let forward = filter_places(&records, "GB", 50_000, 'P');
    records.reverse();
    assert_eq!(filter_places(&records, "GB", 50_000, 'P'), forward);
    records.rotate_left(7);
    assert_eq!(filter_places(&records, "GB", 50_000, 'P'), forward);
}

#[test]
fn fixture_corpus_tokenizes_with_uniform_width() {
    let names = filter_places(&fixture().records, "GB", 50_000, 'P');
    let vocab = reference_vocab();
    let pairs = build_pairs(&names, &distance_phrases(), &vocab).unwrap();
    assert_eq!(pairs.len(), FIXTURE_GB_OVER_50K * 20);
    assert!(pairs.iter().all(|p| p.report_width() == 5));
    for p in &pairs {
        assert_eq!(vocab.decode(&p.clean_tokens.ids).unwrap(), p.clean_text);
    }
    let corpus = Corpus::from_templates(names, distance_phrases());
    assert_eq!(corpus.tokenize(&vocab).unwrap(), pairs);
}

#[test]
fn full_gazetteer_pair_count() {
    let names: Vec<String> = (0..249).map(|i| format!("Place{i}")).collect();
    let corpus = Corpus::from_templates(names, distance_phrases());
    assert_eq!(corpus.pairs.len(), 4980);
}
