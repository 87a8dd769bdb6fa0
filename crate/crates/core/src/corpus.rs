// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gazetteer ingestion and clean/corrupted prompt-pair construction.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{align_at, TokenAlignment, TokenSeq, TokenizerError, Vocab};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus build failed for {placename:?}: {reason}")]
    CorpusBuildError { placename: String, reason: String },
    #[error("unknown distance phrase {0:?}")]
    UnknownPhrase(String),
    #[error("malformed corpus file: {0}")]
    MalformedCorpus(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceRecord {
    pub geoname_id: i64,
    pub name: String,
    pub latitude: f64,
    pub longitude: f64,
    pub feature_class: char,
    pub country_code: String,
    pub population: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct GeonamesParse {
    pub records: Vec<PlaceRecord>,
    pub rejects: Vec<RejectedLine>,
}

const GEONAMES_FIELDS: usize = 19;

/// Parses a GeoNames dump (tab-separated, 19 columns, no header).
///
/// Malformed lines are collected in `rejects` with a reason; only I/O errors
/// are fatal. Line numbers are 1-based.
pub fn parse_geonames(input: impl BufRead) -> Result<GeonamesParse> {
    let mut out = GeonamesParse::default();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejects.push(RejectedLine { line: idx + 1, reason }),
        }
    }
    Ok(out)
}

fn parse_line(line: &str) -> std::result::Result<PlaceRecord, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() < GEONAMES_FIELDS {
        return Err(format!("expected {GEONAMES_FIELDS} fields, found {}", f.len()));
    }
    let geoname_id = f[0].parse().map_err(|_| format!("non-integer id {:?}", f[0]))?;
    let latitude: f64 = f[4].parse().map_err(|_| format!("bad latitude {:?}", f[4]))?;
    let longitude: f64 = f[5].parse().map_err(|_| format!("bad longitude {:?}", f[5]))?;
    if !(-90.0..=90.0).contains(&latitude) || !(-180.0..=180.0).contains(&longitude) {
        return Err(format!("coordinates out of range ({latitude}, {longitude})"));
    }
    let mut class = f[6].chars();
    let feature_class = match (class.next(), class.next()) {
        (Some(c), None) => c,
        _ => return Err(format!("bad feature class {:?}", f[6])),
    };
    let population = f[14]
        .parse()
        .map_err(|_| format!("non-integer population {:?}", f[14]))?;
    Ok(PlaceRecord {
        geoname_id,
        name: f[1].to_owned(),
        latitude,
        longitude,
        feature_class,
        country_code: f[8].to_owned(),
        population,
    })
}

/// Names of places matching country and class with population strictly
/// above `min_pop_exclusive`; duplicates collapse by name, sorted.
pub fn filter_places(records: &[PlaceRecord], country: &str, min_pop_exclusive: u64, feature_class: char) -> Vec<String> {
    let mut best: BTreeMap<&str, u64> = BTreeMap::new();
    for r in records {
        if r.country_code == country && r.feature_class == feature_class && r.population > min_pop_exclusive {
            let e = best.entry(r.name.as_str()).or_insert(r.population);
            *e = (*e).max(r.population);
        }
    }
    best.into_keys().map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DistancePhrase {
    pub text: String,
    pub miles: u32,
}

/// The 20 quantitative distance expressions, in increasing distance.
pub fn distance_phrases() -> Vec<DistancePhrase> {
    const TENS: [&str; 9] = ["ten", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"];
    const UNITS: [&str; 8] = ["two", "three", "four", "five", "six", "seven", "eight", "nine"];
    let mut out = vec![DistancePhrase {
        text: "five miles".into(),
        miles: 5,
    }];
    for (i, w) in TENS.iter().enumerate() {
        out.push(DistancePhrase {
            text: format!("{w} miles"),
            miles: 10 * (i as u32 + 1),
        });
    }
    out.push(DistancePhrase {
        text: "a hundred miles".into(),
        miles: 100,
    });
    for (i, w) in UNITS.iter().enumerate() {
        out.push(DistancePhrase {
            text: format!("{w} hundred miles"),
            miles: 100 * (i as u32 + 2),
        });
    }
    out.push(DistancePhrase {
        text: "a thousand miles".into(),
        miles: 1000,
    });
    out
}

pub fn phrase_by_text(text: &str) -> Result<DistancePhrase> {
    distance_phrases()
        .into_iter()
        .find(|p| p.text == text)
        .ok_or_else(|| CorpusError::UnknownPhrase(text.to_owned()))
}

/// Shared prompt prefix, ending with the anchor word "located".
pub fn prompt_prefix(placename: &str) -> String {
    format!("In the United Kingdom, {placename} is a place located")
}

pub fn clean_prompt(placename: &str) -> String {
    format!("{} near the city of", prompt_prefix(placename))
}

pub fn corrupted_prompt(placename: &str, distance: &DistancePhrase) -> String {
    format!("{} {} from the city of", prompt_prefix(placename), distance.text)
}

/// Words of the prompt templates and distance phrases, as they appear
/// after pre-tokenization (leading space included).
pub fn template_words() -> Vec<String> {
    let mut words: Vec<String> = ["In", ","]
        .into_iter()
        .map(str::to_owned)
        .chain(
            ["the", "United", "Kingdom", "is", "a", "place", "located", "near", "from", "city", "of"]
                .into_iter()
                .map(|w| format!(" {w}")),
        )
        .collect();
    for p in distance_phrases() {
        for w in p.text.split(' ') {
            let w = format!(" {w}");
            if !words.contains(&w) {
                words.push(w);
            }
        }
    }
    words
}

/// A tokenized, aligned clean/corrupted prompt pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub placename: String,
    pub distance: DistancePhrase,
    pub clean_text: String,
    pub corrupted_text: String,
    pub clean_tokens: TokenSeq,
    pub corrupted_tokens: TokenSeq,
    pub alignment: TokenAlignment,
}

impl PromptPair {
    /// Tokenizes and aligns two prompt texts that share the template prefix.
    ///
    /// The anchor is the last token of the encoded prefix, which must decode
    /// to text ending in "located" and must be identical in both encodings.
    pub fn from_texts(
        placename: &str,
        distance: DistancePhrase,
        clean_text: String,
        corrupted_text: String,
        vocab: &Vocab,
    ) -> Result<Self> {
        let fail = |reason: String| CorpusError::CorpusBuildError {
            placename: placename.to_owned(),
            reason,
        };
        let prefix = prompt_prefix(placename);
        if !clean_text.starts_with(&prefix) || !corrupted_text.starts_with(&prefix) {
            return Err(fail(format!("prompts do not start with {prefix:?}")));
        }
        let prefix_tokens = vocab.encode(&prefix)?;
        let clean_tokens = vocab.encode(&clean_text)?;
        let corrupted_tokens = vocab.encode(&corrupted_text)?;
        let n = prefix_tokens.len();
        if clean_tokens.ids.get(..n) != Some(&prefix_tokens.ids[..])
            || corrupted_tokens.ids.get(..n) != Some(&prefix_tokens.ids[..])
        {
            return Err(fail("token prefix is not stable through \"located\"".into()));
        }
        let anchor = n - 1;
        let anchor_text = vocab.token_text(prefix_tokens.ids[anchor])?;
        if !anchor_text.ends_with("located") {
            return Err(fail(format!("anchor token is {anchor_text:?}, expected one ending in \"located\"")));
        }
        let alignment = align_at(&clean_tokens, &corrupted_tokens, anchor).map_err(|e| fail(e.to_string()))?;
        if alignment.divergence_index < clean_tokens.len() && alignment.divergence_index != n {
            return Err(fail(format!(
                "prompts diverge at token {}, expected {n}",
                alignment.divergence_index
            )));
        }
        Ok(Self {
            placename: placename.to_owned(),
            distance,
            clean_text,
            corrupted_text,
            clean_tokens,
            corrupted_tokens,
            alignment,
        })
    }

    /// Builds the template pair for a placename and distance.
    pub fn new(placename: &str, distance: &DistancePhrase, vocab: &Vocab) -> Result<Self> {
        Self::from_texts(
            placename,
            distance.clone(),
            clean_prompt(placename),
            corrupted_prompt(placename, distance),
            vocab,
        )
    }

    /// Number of reported token offsets (anchor through end of clean prompt).
    pub fn report_width(&self) -> usize {
        self.alignment.report_width()
    }
}

/// All placename x phrase pairs, in placename-major order.
///
/// Fails if any pair is prefix-unstable or if reporting widths differ.
pub fn build_pairs(placenames: &[String], phrases: &[DistancePhrase], vocab: &Vocab) -> Result<Vec<PromptPair>> {
    let mut pairs = Vec::with_capacity(placenames.len() * phrases.len());
    for place in placenames {
        for phrase in phrases {
            pairs.push(PromptPair::new(place, phrase, vocab)?);
        }
    }
    check_uniform_width(&pairs)?;
    Ok(pairs)
}

fn check_uniform_width(pairs: &[PromptPair]) -> Result<()> {
    if let Some(first) = pairs.first() {
        let w = first.report_width();
        if let Some(bad) = pairs.iter().find(|p| p.report_width() != w) {
            return Err(CorpusError::CorpusBuildError {
                placename: bad.placename.clone(),
                reason: format!(
                    "reporting width {} for {:?} differs from {w}",
                    bad.report_width(),
                    bad.distance.text
                ),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairText {
    pub placename: String,
    pub distance_text: String,
    pub clean: String,
    pub corrupted: String,
}

/// Tokenizer-independent corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub placenames: Vec<String>,
    pub phrases: Vec<DistancePhrase>,
    pub pairs: Vec<PairText>,
}

impl Corpus {
    /// Template corpus for every placename x phrase.
    pub fn from_templates(placenames: Vec<String>, phrases: Vec<DistancePhrase>) -> Self {
        let pairs = placenames
            .iter()
            .flat_map(|p| {
                phrases.iter().map(move |d| PairText {
                    placename: p.clone(),
                    distance_text: d.text.clone(),
                    clean: clean_prompt(p),
                    corrupted: corrupted_prompt(p, d),
                })
            })
            .collect();
        Self {
            placenames,
            phrases,
            pairs,
        }
    }

    /// Control corpus whose corrupted prompt equals the clean prompt.
    pub fn control(placenames: Vec<String>, phrases: Vec<DistancePhrase>) -> Self {
        let mut c = Self::from_templates(placenames, phrases);
        for p in &mut c.pairs {
            p.corrupted = p.clean.clone();
        }
        c
    }

    /// Keeps only the first `n` placenames (in file order) and their pairs.
    pub fn truncate_placenames(&mut self, n: usize) {
        self.placenames.truncate(n);
        let keep: std::collections::HashSet<&String> = self.placenames.iter().collect();
        self.pairs.retain(|p| keep.contains(&p.placename));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("corpus serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| CorpusError::MalformedCorpus(e.to_string()))
    }

    /// Tokenizes and aligns every pair.
    pub fn tokenize(&self, vocab: &Vocab) -> Result<Vec<PromptPair>> {
        let mut out = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            let distance = self
                .phrases
                .iter()
                .find(|d| d.text == p.distance_text)
                .cloned()
                .ok_or_else(|| CorpusError::UnknownPhrase(p.distance_text.clone()))?;
            out.push(PromptPair::from_texts(
                &p.placename,
                distance,
                p.clean.clone(),
                p.corrupted.clone(),
                vocab,
            )?);
        }
        check_uniform_width(&out)?;
        Ok(out)
    }
}
