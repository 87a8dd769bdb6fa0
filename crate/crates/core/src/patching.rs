// SPDX-License-Identifier: MIT OR Apache-2.0

//! Clean/corrupted/patched forward passes and the KL-difference effect.
//!
//! For one prompt pair the protocol is:
//!
//! 1. run the clean prompt, capturing the hook site at every layer;
//! 2. run the corrupted prompt unmodified;
//! 3. run the corrupted prompt again, replacing the site's row at one token
//!    position with the clean row, for every layer in a window.
//!
//! The effect of a cell is `KL(corrupted || clean) - KL(patched || clean)`:
//! positive when patching moves the output back toward the clean output.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DistancePhrase, PromptPair};
use crate::model::{next_token_distribution, ActivationCache, HookId, HookSite, LogitRows, Model, ModelError, PatchSpec};
use crate::numerics::{kl_divergence, NumericsError, ProbDist};

#[derive(Debug, Error)]
pub enum PatchingError {
    #[error("window width {width} exceeds {n_layers} layers")]
    WindowTooWide { width: usize, n_layers: usize },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("no clean activation for token offset {offset} of {placename:?} / {distance:?}")]
    SourceUnavailable {
        offset: usize,
        placename: String,
        distance: String,
    },
    #[error("execution plan has no cells")]
    EmptyPlan,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, PatchingError>;

/// Inclusive band of layers patched together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerWindow {
    pub start: usize,
    pub end: usize,
}

impl LayerWindow {
    pub fn new(start: usize, end: usize, n_layers: usize) -> Result<Self> {
        if start > end || end >= n_layers {
            return Err(PatchingError::InvalidWindow(format!(
                "[{start}, {end}] for {n_layers} layers"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// Full-width windows with starts `0..=n_layers - width`.
pub fn sliding_windows(n_layers: usize, width: usize) -> Result<Vec<LayerWindow>> {
    if width == 0 {
        return Err(PatchingError::InvalidWindow("width must be >= 1".into()));
    }
    if width > n_layers {
        return Err(PatchingError::WindowTooWide { width, n_layers });
    }
    Ok((0..=n_layers - width)
        .map(|start| LayerWindow {
            start,
            end: start + width - 1,
        })
        .collect())
}

/// Argument order of the two KL terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOrder {
    /// `KL(target || clean)`.
    #[default]
    TargetFromClean,
    /// `KL(clean || target)`.
    CleanFromTarget,
}

impl KlOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            KlOrder::TargetFromClean => "target_from_clean",
            KlOrder::CleanFromTarget => "clean_from_target",
        }
    }

    fn divergence(self, target: &ProbDist, clean: &ProbDist) -> Result<f64> {
        Ok(match self {
            KlOrder::TargetFromClean => kl_divergence(target, clean)?,
            KlOrder::CleanFromTarget => kl_divergence(clean, target)?,
        })
    }
}

impl fmt::Display for KlOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KlOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "target_from_clean" => Ok(KlOrder::TargetFromClean),
            "clean_from_target" => Ok(KlOrder::CleanFromTarget),
            _ => Err(format!("unknown KL order {s:?} (expected target_from_clean|clean_from_target)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectScore {
    pub kl_corrupted: f64,
    pub kl_patched: f64,
    pub effect: f64,
}

pub fn effect_metric(p_clean: &ProbDist, p_corrupted: &ProbDist, p_patched: &ProbDist) -> Result<EffectScore> {
    effect_metric_ordered(KlOrder::default(), p_clean, p_corrupted, p_patched)
}

pub fn effect_metric_ordered(
    order: KlOrder,
    p_clean: &ProbDist,
    p_corrupted: &ProbDist,
    p_patched: &ProbDist,
) -> Result<EffectScore> {
    let kl_corrupted = order.divergence(p_corrupted, p_clean)?;
    let kl_patched = order.divergence(p_patched, p_clean)?;
    Ok(EffectScore {
        kl_corrupted,
        kl_patched,
        effect: kl_corrupted - kl_patched,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRecord {
    pub placename: String,
    pub distance: DistancePhrase,
    /// Token offset from the anchor ("located") token.
    pub offset: usize,
    pub window: LayerWindow,
    pub kl_corrupted: f64,
    pub kl_patched: f64,
    pub effect: f64,
}

/// Shared settings for patching runs against one model.
#[derive(Debug, Clone, Copy)]
pub struct PatchContext<'m> {
    pub model: &'m Model,
    pub site: HookSite,
    pub kl_order: KlOrder,
}

impl<'m> PatchContext<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            site: HookSite::MlpOut,
            kl_order: KlOrder::default(),
        }
    }

    pub fn with_site(mut self, site: HookSite) -> Self {
        self.site = site;
        self
    }

    pub fn with_kl_order(mut self, order: KlOrder) -> Self {
        self.kl_order = order;
        self
    }

    fn check_window(&self, window: LayerWindow) -> Result<()> {
        LayerWindow::new(window.start, window.end, self.model.config().n_layers).map(|_| ())
    }

    fn position(&self, pair: &PromptPair, offset: usize) -> Result<usize> {
        pair.alignment
            .position_of(offset)
            .ok_or_else(|| PatchingError::SourceUnavailable {
                offset,
                placename: pair.placename.clone(),
                distance: pair.distance.text.clone(),
            })
    }

    fn capture_all_layers(&self) -> HashSet<HookId> {
        (0..self.model.config().n_layers)
            .map(|l| HookId::new(l, self.site))
            .collect()
    }

    fn distribution(&self, tokens: &[u32], capture: &HashSet<HookId>, patch: &PatchSpec) -> Result<(ProbDist, ActivationCache)> {
        let out = self.model.run(tokens, capture, patch, LogitRows::Last)?;
        Ok((next_token_distribution(&out.logits)?, out.cache))
    }

    fn patched_distribution(
        &self,
        pair: &PromptPair,
        clean_cache: &ActivationCache,
        window: LayerWindow,
        position: usize,
    ) -> Result<ProbDist> {
        let mut spec = PatchSpec::new();
        for layer in window.layers() {
            let hook = HookId::new(layer, self.site);
            let source = clean_cache
                .get(hook)
                .expect("clean pass captures every layer at the patch site");
            spec.insert(hook, position, source.row(position).to_vec())?;
        }
        Ok(self.distribution(&pair.corrupted_tokens.ids, &HashSet::new(), &spec)?.0)
    }

    fn record(&self, pair: &PromptPair, offset: usize, window: LayerWindow, clean: &ProbDist, corrupted: &ProbDist, patched: &ProbDist) -> Result<EffectRecord> {
        let score = effect_metric_ordered(self.kl_order, clean, corrupted, patched)?;
        Ok(EffectRecord {
            placename: pair.placename.clone(),
            distance: pair.distance.clone(),
            offset,
            window,
            kl_corrupted: score.kl_corrupted,
            kl_patched: score.kl_patched,
            effect: score.effect,
        })
    }

    /// One cell, three fresh forward passes.
    pub fn run_pair(&self, pair: &PromptPair, window: LayerWindow, offset: usize) -> Result<EffectRecord> {
        self.check_window(window)?;
        let position = self.position(pair, offset)?;
        let capture: HashSet<HookId> = window.layers().map(|l| HookId::new(l, self.site)).collect();
        let (clean, clean_cache) = self.distribution(&pair.clean_tokens.ids, &capture, &PatchSpec::new())?;
        let (corrupted, _) = self.distribution(&pair.corrupted_tokens.ids, &HashSet::new(), &PatchSpec::new())?;
        let patched = self.patched_distribution(pair, &clean_cache, window, position)?;
        self.record(pair, offset, window, &clean, &corrupted, &patched)
    }

    /// Executes a plan: clean and corrupted passes once, then one patched
    /// pass per cell. Records come back in plan order.
    pub fn execute(&self, pair: &PromptPair, plan: &ExecutionPlan) -> Result<Vec<EffectRecord>> {
        for &(offset, window) in &plan.cells {
            self.check_window(window)?;
            self.position(pair, offset)?;
        }
        let (clean, clean_cache) = self.distribution(&pair.clean_tokens.ids, &self.capture_all_layers(), &PatchSpec::new())?;
        let (corrupted, _) = self.distribution(&pair.corrupted_tokens.ids, &HashSet::new(), &PatchSpec::new())?;
        plan.cells
            .iter()
            .map(|&(offset, window)| {
                let position = self.position(pair, offset)?;
                let patched = self.patched_distribution(pair, &clean_cache, window, position)?;
                self.record(pair, offset, window, &clean, &corrupted, &patched)
            })
            .collect()
    }
}

/// Cells `(offset, window)` for one pair, offset-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub cells: Vec<(usize, LayerWindow)>,
}

impl ExecutionPlan {
    /// Forward passes the plan costs: 2 shared passes plus one per cell.
    pub fn forward_passes(&self) -> usize {
        2 + self.cells.len()
    }
}

pub fn cache_reuse_plan(windows: &[LayerWindow], offsets: &[usize]) -> Result<ExecutionPlan> {
    if windows.is_empty() || offsets.is_empty() {
        return Err(PatchingError::EmptyPlan);
    }
    Ok(ExecutionPlan {
        cells: offsets
            .iter()
            .flat_map(|&o| windows.iter().map(move |&w| (o, w)))
            .collect(),
    })
}
