// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale fixtures: a word-level BPE vocabulary covering the prompt
//! templates and a seeded random-weight model sized to it.

use std::path::{Path, PathBuf};

use crate::corpus::template_words;
use crate::model::{Activation, Model, ModelConfig, ParameterStore};
use crate::runner::{io_err, RunnerError};
use crate::tokenizer::Vocab;

/// Byte-level vocabulary in which every template word is a single token.
pub fn reference_vocab() -> Vocab {
    let words = template_words();
    Vocab::from_words(words.iter().map(String::as_str)).expect("template words form a valid vocabulary")
}

pub fn toy_config(n_layers: usize, d_model: usize, vocab_size: usize) -> ModelConfig {
    let n_heads = if d_model.is_multiple_of(4) { 4 } else { 1 };
    ModelConfig {
        n_layers,
        d_model,
        n_heads,
        d_head: d_model / n_heads,
        d_mlp: 4 * d_model,
        vocab_size,
        max_seq: 64,
        norm_eps: 1e-5,
        activation: Activation::GeluTanh,
        tie_embeddings: false,
    }
}

/// Random-weight model over [`reference_vocab`].
pub fn toy_model(n_layers: usize, d_model: usize, seed: u64) -> Model {
    let cfg = toy_config(n_layers, d_model, reference_vocab().len());
    let params = ParameterStore::random(&cfg, seed);
    Model::new(cfg, params).expect("random parameters match their config")
}

/// Files written by [`write_toy_files`].
#[derive(Debug, Clone)]
pub struct ToyFiles {
    pub weights: PathBuf,
    pub model_config: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
}

/// Writes a random toy model and the reference tokenizer into `dir`.
pub fn write_toy_files(dir: &Path, n_layers: usize, d_model: usize, seed: u64) -> Result<ToyFiles, RunnerError> {
    let vocab = reference_vocab();
    let cfg = toy_config(n_layers, d_model, vocab.len());
    cfg.validate()?;
    let params = ParameterStore::random(&cfg, seed);
    let files = ToyFiles {
        weights: dir.join("model.safetensors"),
        model_config: dir.join("config.json"),
        vocab: dir.join("vocab.json"),
        merges: dir.join("merges.txt"),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |path: &Path, bytes: &[u8]| std::fs::write(path, bytes).map_err(io_err(path));
    write(&files.weights, &params.to_archive()?)?;
    let mut cfg_json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    cfg_json.push('\n');
    write(&files.model_config, cfg_json.as_bytes())?;
    write(&files.vocab, vocab.vocab_json().as_bytes())?;
    write(&files.merges, vocab.merges_txt().as_bytes())?;
    Ok(files)
}
