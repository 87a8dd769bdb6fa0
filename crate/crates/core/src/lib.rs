// SPDX-License-Identifier: MIT OR Apache-2.0

//! # geopatch-core
//!
//! Activation patching on a small, hook-equipped CPU transformer, applied to
//! prompts that contrast the relation "near" with quantitative distances:
//!
//! ```text
//! clean:     In the United Kingdom, <place> is a place located near the city of
//! corrupted: In the United Kingdom, <place> is a place located <distance> from the city of
//! ```
//!
//! Clean activations at one hook site (by default each block's MLP output)
//! are injected into the corrupted run over a sliding band of layers, one token
//! position at a time, and each injection is scored by
//! `KL(corrupted || clean) - KL(patched || clean)`.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: tensors, softmax, layer norm, GELU, KL divergence.
//! - [`tokenizer`]: byte-level BPE in the GPT-2 file format, and alignment.
//! - [`model`]: GPT-2-style forward pass with capture/replace hooks.
//! - [`corpus`]: GeoNames filtering, distance phrases, prompt pairs.
//! - [`patching`]: layer windows, the three-pass protocol, the metric.
//! - [`runner`]: parallel experiment runs, results files, SVG heatmap.

pub mod corpus;
pub mod model;
pub mod numerics;
pub mod patching;
pub mod runner;
pub mod tokenizer;
pub mod toy;

pub use corpus::{CorpusError, DistancePhrase, PlaceRecord, PromptPair};
pub use model::{ActivationCache, HookId, HookSite, Model, ModelConfig, ModelError, ParameterStore, PatchSpec};
pub use numerics::{NumericsError, ProbDist, Tensor2};
pub use patching::{EffectRecord, KlOrder, LayerWindow, PatchingError};
pub use runner::{EffectMatrix, ExperimentConfig, RunOptions, RunnerError};
pub use tokenizer::{TokenAlignment, TokenSeq, TokenizerError, Vocab};

/// Short variant name of an error, for one-line machine-readable reports.
pub trait ErrorKind {
    fn kind(&self) -> &'static str;
}

impl ErrorKind for NumericsError {
    fn kind(&self) -> &'static str {
        match self {
            NumericsError::InvalidShape(_) => "InvalidShape",
            NumericsError::NonFiniteInput(_) => "NonFiniteInput",
            NumericsError::DivergenceInfinite { .. } => "DivergenceInfinite",
            NumericsError::InvalidDistribution(_) => "InvalidDistribution",
        }
    }
}

impl ErrorKind for TokenizerError {
    fn kind(&self) -> &'static str {
        match self {
            TokenizerError::MalformedVocab(_) => "MalformedVocab",
            TokenizerError::MalformedMerges(_) => "MalformedMerges",
            TokenizerError::UnknownToken(_) => "UnknownToken",
            TokenizerError::Unencodable(_) => "Unencodable",
            TokenizerError::NoSharedPrefix => "NoSharedPrefix",
            TokenizerError::UnsupportedAsymmetry { .. } => "UnsupportedAsymmetry",
            TokenizerError::AnchorOutsidePrefix { .. } => "AnchorOutsidePrefix",
            TokenizerError::Io(_) => "Io",
        }
    }
}

impl ErrorKind for ModelError {
    fn kind(&self) -> &'static str {
        match self {
            ModelError::InvalidConfig(_) => "InvalidConfig",
            ModelError::MalformedArchive(_) => "MalformedArchive",
            ModelError::MissingTensor(_) => "MissingTensor",
            ModelError::ShapeMismatch { .. } => "ShapeMismatch",
            ModelError::InvalidTokens(_) => "InvalidTokens",
            ModelError::InvalidPatch(_) => "InvalidPatch",
            ModelError::NonFiniteActivation { .. } => "NonFiniteActivation",
            ModelError::Numerics(e) => e.kind(),
        }
    }
}

impl ErrorKind for CorpusError {
    fn kind(&self) -> &'static str {
        match self {
            CorpusError::CorpusBuildError { .. } => "CorpusBuildError",
            CorpusError::UnknownPhrase(_) => "UnknownPhrase",
            CorpusError::MalformedCorpus(_) => "MalformedCorpus",
            CorpusError::Tokenizer(e) => e.kind(),
            CorpusError::Io(_) => "Io",
        }
    }
}

impl ErrorKind for PatchingError {
    fn kind(&self) -> &'static str {
        match self {
            PatchingError::WindowTooWide { .. } => "WindowTooWide",
            PatchingError::InvalidWindow(_) => "InvalidWindow",
            PatchingError::SourceUnavailable { .. } => "SourceUnavailable",
            PatchingError::EmptyPlan => "EmptyPlan",
            PatchingError::Model(e) => e.kind(),
            PatchingError::Numerics(e) => e.kind(),
        }
    }
}

impl ErrorKind for RunnerError {
    fn kind(&self) -> &'static str {
        match self {
            RunnerError::Io { .. } => "Io",
            RunnerError::InvalidConfig(_) => "InvalidConfig",
            RunnerError::MalformedResults { .. } => "MalformedResults",
            RunnerError::NothingToRender => "NothingToRender",
            RunnerError::IncompleteCorpus(_) => "IncompleteCorpus",
            RunnerError::Pair { source, .. } => source.kind(),
            RunnerError::Patching(e) => e.kind(),
            RunnerError::Model(e) => e.kind(),
            RunnerError::Corpus(e) => e.kind(),
            RunnerError::Tokenizer(e) => e.kind(),
            RunnerError::WorkerPool(_) => "WorkerPool",
        }
    }
}
