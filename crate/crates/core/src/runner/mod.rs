// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment orchestration: every pair x token offset x layer window,
//! averaged over placenames into an [`EffectMatrix`].
//!
//! Pairs are distributed over a bounded worker pool. Each worker owns its
//! forward passes; records are merged by a single sorted reduction, so the
//! matrix does not depend on the worker count.

mod heatmap;
mod output;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, DistancePhrase, PromptPair};
use crate::model::{load_weights, HookSite, Model, ModelConfig, ModelError, NameMap};
use crate::patching::{cache_reuse_plan, sliding_windows, EffectRecord, KlOrder, PatchContext, PatchingError};
use crate::tokenizer::{TokenizerError, Vocab};

pub use heatmap::{heatmap_svg, render_heatmap, HeatmapOptions};
pub use output::{read_matrix, read_raw_csv, round_sig9, write_matrix, CSV_HEADER};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("{path}: malformed results: {reason}")]
    MalformedResults { path: PathBuf, reason: String },
    #[error("nothing to render: the matrix is empty")]
    NothingToRender,
    #[error("incomplete corpus: {0}")]
    IncompleteCorpus(String),
    #[error("pair {placename:?} / {distance:?} failed: {source}")]
    Pair {
        placename: String,
        distance: String,
        #[source]
        source: PatchingError,
    },
    #[error(transparent)]
    Patching(#[from] PatchingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("worker pool: {0}")]
    WorkerPool(String),
}

pub type Result<T> = std::result::Result<T, RunnerError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_owned(),
        source,
    }
}

fn default_site() -> HookSite {
    HookSite::MlpOut
}

fn default_window() -> usize {
    5
}

fn default_workers() -> usize {
    1
}

/// File-level description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub weights: PathBuf,
    pub model_config: PathBuf,
    #[serde(default)]
    pub name_map: Option<PathBuf>,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub corpus: PathBuf,
    #[serde(default = "default_site")]
    pub site: HookSite,
    #[serde(default = "default_window")]
    pub window_width: usize,
    #[serde(default)]
    pub kl_order: KlOrder,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub limit_placenames: Option<usize>,
    pub out_json: PathBuf,
    #[serde(default)]
    pub out_csv: Option<PathBuf>,
    #[serde(default)]
    pub out_svg: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| RunnerError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_width == 0 {
            return Err(RunnerError::InvalidConfig("window_width must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(RunnerError::InvalidConfig("workers must be >= 1".into()));
        }
        let inputs = [
            Some(&self.weights),
            Some(&self.model_config),
            self.name_map.as_ref(),
            Some(&self.vocab),
            Some(&self.merges),
            Some(&self.corpus),
        ];
        for p in inputs.into_iter().flatten() {
            if !p.is_file() {
                return Err(RunnerError::InvalidConfig(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn options(&self) -> RunOptions {
        RunOptions {
            site: self.site,
            window_width: self.window_width,
            kl_order: self.kl_order,
            workers: self.workers,
        }
    }
}

/// Compute settings independent of file locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub site: HookSite,
    pub window_width: usize,
    pub kl_order: KlOrder,
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            site: HookSite::MlpOut,
            window_width: 5,
            kl_order: KlOrder::default(),
            workers: 1,
        }
    }
}

/// Settings echoed into the results file. Worker count is deliberately
/// absent: output bytes must not depend on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEcho {
    pub site: HookSite,
    pub window_width: usize,
    pub kl_order: KlOrder,
    pub n_layers: usize,
    pub placenames: Vec<String>,
}

/// Clean and corrupted token text at one reported offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLabel {
    pub clean: String,
    pub corrupted: String,
}

/// Mean effect indexed `[distance][offset][window]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMatrix {
    pub config: RunEcho,
    pub count: usize,
    pub distances: Vec<DistancePhrase>,
    pub offsets: Vec<usize>,
    /// `[distance][offset]`, taken from the first placename's pair.
    pub token_labels: Vec<Vec<TokenLabel>>,
    /// Window start layers.
    pub windows: Vec<usize>,
    pub mean_effect: Vec<Vec<Vec<f64>>>,
    #[serde(skip)]
    pub raw: Vec<EffectRecord>,
}

impl EffectMatrix {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.distances.len(), self.offsets.len(), self.windows.len())
    }

    pub fn is_empty(&self) -> bool {
        let (d, o, w) = self.shape();
        d == 0 || o == 0 || w == 0
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.mean_effect.iter().flatten().flatten().copied()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub matrix: EffectMatrix,
    /// Forward passes executed by this run.
    pub forward_passes: u64,
}

/// Runs every cell of every pair and averages over placenames.
pub fn run_pairs(model: &Model, vocab: &Vocab, pairs: &[PromptPair], opts: RunOptions) -> Result<RunOutput> {
    if pairs.is_empty() {
        return Err(RunnerError::IncompleteCorpus("no prompt pairs".into()));
    }
    if opts.workers == 0 {
        return Err(RunnerError::InvalidConfig("workers must be >= 1".into()));
    }
    let windows = sliding_windows(model.config().n_layers, opts.window_width)?;
    let width = pairs[0].report_width();
    if let Some(p) = pairs.iter().find(|p| p.report_width() != width) {
        return Err(RunnerError::IncompleteCorpus(format!(
            "{:?} / {:?} reports {} offsets, expected {width}",
            p.placename,
            p.distance.text,
            p.report_width()
        )));
    }
    let offsets: Vec<usize> = (0..width).collect();
    let plan = cache_reuse_plan(&windows, &offsets)?;

    let placenames: Vec<String> = pairs.iter().map(|p| p.placename.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut distances: Vec<DistancePhrase> = pairs.iter().map(|p| p.distance.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    distances.sort_by(|a, b| a.miles.cmp(&b.miles).then_with(|| a.text.cmp(&b.text)));
    let expected = placenames.len() * distances.len();
    let unique: BTreeSet<(&str, &str)> = pairs.iter().map(|p| (p.placename.as_str(), p.distance.text.as_str())).collect();
    if unique.len() != pairs.len() || pairs.len() != expected {
        return Err(RunnerError::IncompleteCorpus(format!(
            "{} pairs ({} distinct) for {} placenames x {} distances",
            pairs.len(),
            unique.len(),
            placenames.len(),
            distances.len()
        )));
    }

    let ctx = PatchContext::new(model).with_site(opts.site).with_kl_order(opts.kl_order);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| RunnerError::WorkerPool(e.to_string()))?;
    let before = model.passes();
    let batches: Vec<std::result::Result<Vec<EffectRecord>, PatchingError>> =
        pool.install(|| pairs.par_iter().map(|pair| ctx.execute(pair, &plan)).collect());
    let forward_passes = model.passes() - before;

    let mut records = Vec::with_capacity(pairs.len() * plan.cells.len());
    for (pair, batch) in pairs.iter().zip(batches) {
        records.extend(batch.map_err(|source| RunnerError::Pair {
            placename: pair.placename.clone(),
            distance: pair.distance.text.clone(),
            source,
        })?);
    }

    let d_index: BTreeMap<&str, usize> = distances.iter().enumerate().map(|(i, d)| (d.text.as_str(), i)).collect();
    records.sort_by(|a, b| {
        (d_index[a.distance.text.as_str()], &a.placename, a.offset, a.window.start).cmp(&(
            d_index[b.distance.text.as_str()],
            &b.placename,
            b.offset,
            b.window.start,
        ))
    });

    let (nd, no, nw) = (distances.len(), offsets.len(), windows.len());
    let mut sums = vec![vec![vec![0.0f64; nw]; no]; nd];
    let mut counts = vec![vec![vec![0usize; nw]; no]; nd];
    for r in &records {
        let d = d_index[r.distance.text.as_str()];
        let w = r.window.start;
        sums[d][r.offset][w] += r.effect;
        counts[d][r.offset][w] += 1;
    }
    let n = placenames.len();
    let mut mean_effect = sums;
    for (d, plane) in mean_effect.iter_mut().enumerate() {
        for (o, row) in plane.iter_mut().enumerate() {
            for (w, v) in row.iter_mut().enumerate() {
                if counts[d][o][w] != n {
                    return Err(RunnerError::IncompleteCorpus(format!(
                        "cell ({d}, {o}, {w}) has {} records for {n} placenames",
                        counts[d][o][w]
                    )));
                }
                *v = round_sig9(*v / n as f64);
            }
        }
    }

    let token_labels = distances
        .iter()
        .map(|d| {
            let pair = pairs.iter().find(|p| p.distance == *d).expect("every distance has a pair");
            offsets
                .iter()
                .map(|&o| {
                    let pos = pair.alignment.anchor + o;
                    Ok(TokenLabel {
                        clean: vocab.token_text(pair.clean_tokens.ids[pos])?,
                        corrupted: vocab.token_text(pair.corrupted_tokens.ids[pos])?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let matrix = EffectMatrix {
        config: RunEcho {
            site: opts.site,
            window_width: opts.window_width,
            kl_order: opts.kl_order,
            n_layers: model.config().n_layers,
            placenames: placenames.clone(),
        },
        count: n,
        distances,
        offsets,
        token_labels,
        windows: windows.iter().map(|w| w.start).collect(),
        mean_effect,
        raw: records,
    };
    Ok(RunOutput { matrix, forward_passes })
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Loaded model, tokenizer and tokenized pairs for one experiment.
#[derive(Debug)]
pub struct Experiment {
    pub model: Model,
    pub vocab: Vocab,
    pub pairs: Vec<PromptPair>,
}

impl Experiment {
    /// Loads everything up front; any failure aborts before compute.
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model_config = ModelConfig::from_json(&read_to_string(&config.model_config)?)?;
        let name_map: Option<NameMap> = match &config.name_map {
            Some(p) => Some(
                serde_json::from_str(&read_to_string(p)?)
                    .map_err(|e| RunnerError::InvalidConfig(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        let archive = std::fs::read(&config.weights).map_err(io_err(&config.weights))?;
        let params = load_weights(&archive, &model_config, name_map.as_ref())?;
        let model = Model::new(model_config, params)?;

        let vocab_file = std::fs::File::open(&config.vocab).map_err(io_err(&config.vocab))?;
        let merges_file = std::fs::File::open(&config.merges).map_err(io_err(&config.merges))?;
        let vocab = Vocab::load(vocab_file, merges_file)?;
        if vocab.len() > model.config().vocab_size {
            return Err(RunnerError::InvalidConfig(format!(
                "tokenizer has {} tokens but the model only {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }

        let mut corpus = Corpus::from_json(&read_to_string(&config.corpus)?)?;
        if let Some(n) = config.limit_placenames {
            corpus.truncate_placenames(n);
        }
        let pairs = corpus.tokenize(&vocab)?;
        let longest = pairs.iter().map(|p| p.corrupted_tokens.len()).max().unwrap_or(0);
        if longest > model.config().max_seq {
            return Err(RunnerError::InvalidConfig(format!(
                "longest prompt has {longest} tokens, max_seq is {}",
                model.config().max_seq
            )));
        }
        Ok(Self { model, vocab, pairs })
    }

    pub fn run(&self, opts: RunOptions) -> Result<RunOutput> {
        run_pairs(&self.model, &self.vocab, &self.pairs, opts)
    }
}

/// Loads, runs and returns the aggregated matrix.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EffectMatrix> {
    let exp = Experiment::load(config)?;
    Ok(exp.run(config.options())?.matrix)
}
