// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2-style decoder-only transformer with named hook points.
//!
//! Every block exposes four sites (`resid_pre`, `attn_out`, `mlp_out`,
//! `resid_post`). A forward pass can record the activation at any site into an
//! [`ActivationCache`] and can replace individual rows (token positions) at any
//! site with supplied vectors via a [`PatchSpec`]. Replacement happens before
//! the activation is consumed downstream, and captures see the replaced value.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, gelu, gelu_exact, layer_norm, matmul, NumericsError, ProbDist, Tensor2};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("malformed tensor archive: {0}")]
    MalformedArchive(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid tokens: {0}")]
    InvalidTokens(String),
    #[error("invalid patch: {0}")]
    InvalidPatch(String),
    #[error("non-finite activation at layer {layer} {site}")]
    NonFiniteActivation { layer: usize, site: HookSite },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GeluTanh,
    GeluExact,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::GeluTanh => gelu(x),
            Activation::GeluExact => gelu_exact(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f32,
    pub activation: Activation,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(ModelError::InvalidConfig(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(ModelError::InvalidConfig("norm_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical tensor names and shapes this config requires.
    pub fn required_tensors(&self) -> Vec<(String, [usize; 2])> {
        let (d, m, v) = (self.d_model, self.d_mlp, self.vocab_size);
        let mut out = vec![
            ("embed.W".to_owned(), [v, d]),
            ("pos.W".to_owned(), [self.max_seq, d]),
        ];
        for i in 0..self.n_layers {
            let p = |s: &str| format!("layer.{i}.{s}");
            out.extend([
                (p("ln1.g"), [1, d]),
                (p("ln1.b"), [1, d]),
                (p("attn.Wq"), [d, d]),
                (p("attn.bq"), [1, d]),
                (p("attn.Wk"), [d, d]),
                (p("attn.bk"), [1, d]),
                (p("attn.Wv"), [d, d]),
                (p("attn.bv"), [1, d]),
                (p("attn.Wo"), [d, d]),
                (p("attn.bo"), [1, d]),
                (p("ln2.g"), [1, d]),
                (p("ln2.b"), [1, d]),
                (p("mlp.Win"), [d, m]),
                (p("mlp.bin"), [1, m]),
                (p("mlp.Wout"), [m, d]),
                (p("mlp.bout"), [1, d]),
            ]);
        }
        out.push(("final_ln.g".to_owned(), [1, d]));
        out.push(("final_ln.b".to_owned(), [1, d]));
        if !self.tie_embeddings {
            out.push(("unembed.W".to_owned(), [d, v]));
        }
        out
    }
}

/// Named weight tensors keyed by canonical name.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor2>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor2) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.data().len()).sum()
    }

    /// Checks every tensor the config requires is present with its shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (name, [r, c]) in config.required_tensors() {
            let t = self.get(&name)?;
            if t.shape() != (r, c) {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: vec![r, c],
                    found: vec![t.rows(), t.cols()],
                });
            }
        }
        Ok(())
    }

    /// Seeded random weights, scaled so activations stay O(1).
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for (name, [r, c]) in config.required_tensors() {
            let data: Vec<f32> = if name.ends_with(".g") {
                (0..r * c).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect()
            } else if r == 1 {
                (0..r * c).map(|_| rng.gen_range(-0.1..0.1)).collect()
            } else {
                let bound = if name == "embed.W" || name == "pos.W" {
                    1.0
                } else {
                    (3.0 / r as f32).sqrt()
                };
                (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            store.insert(name, Tensor2::new(r, c, data).expect("shape matches data"));
        }
        store
    }

    /// Serializes to the tensor-archive (safetensors) layout as `f32`.
    pub fn to_archive(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                let shape = if t.rows() == 1 { vec![t.cols()] } else { vec![t.rows(), t.cols()] };
                (name.clone(), raw, shape)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, raw, shape)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| ModelError::MalformedArchive(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, &None).map_err(|e| ModelError::MalformedArchive(e.to_string()))
    }
}

/// Checkpoint-name -> canonical-name translation table.
pub type NameMap = HashMap<String, String>;

/// Loads a tensor archive and validates it against `config`.
///
/// Tensors are renamed through `name_map` when an entry exists; names not in
/// the map are kept as-is, and tensors that match no required name are
/// ignored. `f16`/`bf16` payloads are widened to `f32`.
pub fn load_weights(archive: &[u8], config: &ModelConfig, name_map: Option<&NameMap>) -> Result<ParameterStore> {
    config.validate()?;
    if archive.len() < 8 {
        return Err(ModelError::MalformedArchive(format!(
            "{} bytes is shorter than the 8-byte header length",
            archive.len()
        )));
    }
    let st = SafeTensors::deserialize(archive).map_err(|e| ModelError::MalformedArchive(e.to_string()))?;
    let required: HashMap<String, [usize; 2]> = config.required_tensors().into_iter().collect();

    let mut store = ParameterStore::new();
    for (raw_name, view) in st.tensors() {
        let name = name_map
            .and_then(|m| m.get(&raw_name))
            .cloned()
            .unwrap_or(raw_name);
        let Some(&[r, c]) = required.get(&name) else { continue };
        let found = view.shape().to_vec();
        let shape_ok = match found.as_slice() {
            [n] => r == 1 && *n == c,
            [a, b] => *a == r && *b == c,
            _ => false,
        };
        if !shape_ok {
            return Err(ModelError::ShapeMismatch {
                name,
                expected: if r == 1 { vec![c] } else { vec![r, c] },
                found,
            });
        }
        let data = widen(&name, view.dtype(), view.data())?;
        store.insert(name, Tensor2::new(r, c, data)?);
    }
    store.validate(config)?;
    Ok(store)
}

fn widen(name: &str, dtype: Dtype, raw: &[u8]) -> Result<Vec<f32>> {
    let out = match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        other => {
            return Err(ModelError::MalformedArchive(format!(
                "tensor {name} has unsupported dtype {other:?}"
            )))
        }
    };
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookSite {
    ResidPre,
    AttnOut,
    MlpOut,
    ResidPost,
}

impl HookSite {
    pub const ALL: [HookSite; 4] = [
        HookSite::ResidPre,
        HookSite::AttnOut,
        HookSite::MlpOut,
        HookSite::ResidPost,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HookSite::ResidPre => "resid_pre",
            HookSite::AttnOut => "attn_out",
            HookSite::MlpOut => "mlp_out",
            HookSite::ResidPost => "resid_post",
        }
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HookSite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        HookSite::ALL
            .into_iter()
            .find(|site| site.as_str() == s)
            .ok_or_else(|| format!("unknown hook site {s:?} (expected resid_pre|attn_out|mlp_out|resid_post)"))
    }
}

/// Address of a computation site: `blocks.{layer}.{site}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HookId {
    pub layer: usize,
    pub site: HookSite,
}

impl HookId {
    pub fn new(layer: usize, site: HookSite) -> Self {
        Self { layer, site }
    }

    pub fn mlp_out(layer: usize) -> Self {
        Self::new(layer, HookSite::MlpOut)
    }
}

impl fmt::Display for HookId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.layer, self.site)
    }
}

/// Captured activations, each `[seq_len, d_model]`.
#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    entries: HashMap<HookId, Tensor2>,
}

impl ActivationCache {
    pub fn get(&self, hook: HookId) -> Option<&Tensor2> {
        self.entries.get(&hook)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hooks(&self) -> impl Iterator<Item = &HookId> {
        self.entries.keys()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEntry {
    pub hook: HookId,
    pub position: usize,
    pub vector: Vec<f32>,
}

/// Row replacements to apply during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct PatchSpec {
    entries: BTreeMap<(HookId, usize), Vec<f32>>,
}

impl PatchSpec {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one replacement. Rejects a second entry for the same
    /// `(hook, position)` and non-finite vectors.
    pub fn insert(&mut self, hook: HookId, position: usize, vector: Vec<f32>) -> Result<()> {
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::InvalidPatch(format!(
                "{hook} position {position}: component {i} is not finite"
            )));
        }
        if self.entries.contains_key(&(hook, position)) {
            return Err(ModelError::InvalidPatch(format!(
                "{hook} position {position} patched twice"
            )));
        }
        self.entries.insert((hook, position), vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = PatchEntry> + '_ {
        self.entries.iter().map(|(&(hook, position), v)| PatchEntry {
            hook,
            position,
            vector: v.clone(),
        })
    }

    fn rows_for(&self, hook: HookId) -> impl Iterator<Item = (usize, &[f32])> {
        self.entries
            .range((hook, 0)..=(hook, usize::MAX))
            .map(|(&(_, p), v)| (p, v.as_slice()))
    }
}

/// Which logit rows a forward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[seq_len, vocab]`, or `[1, vocab]` for [`LogitRows::Last`].
    pub logits: Tensor2,
    pub cache: ActivationCache,
}

/// Immutable model state plus a forward-pass counter.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParameterStore,
    unembed: Tensor2,
    passes: AtomicU64,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        let unembed = if config.tie_embeddings {
            params.get("embed.W")?.transpose()
        } else {
            params.get("unembed.W")?.clone()
        };
        Ok(Self {
            config,
            params,
            unembed,
            passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    /// Forward passes executed since construction or the last reset.
    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    pub fn forward(&self, tokens: &[u32], capture: &HashSet<HookId>, patch: &PatchSpec) -> Result<ForwardOutput> {
        self.run(tokens, capture, patch, LogitRows::All)
    }

    /// Runs a forward pass producing the requested logit rows.
    pub fn run(
        &self,
        tokens: &[u32],
        capture: &HashSet<HookId>,
        patch: &PatchSpec,
        rows: LogitRows,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let seq = tokens.len();
        if seq == 0 {
            return Err(ModelError::InvalidTokens("empty token sequence".into()));
        }
        if seq > cfg.max_seq {
            return Err(ModelError::InvalidTokens(format!(
                "{seq} tokens exceed max_seq {}",
                cfg.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::InvalidTokens(format!(
                "token {t} outside vocab of {}",
                cfg.vocab_size
            )));
        }
        for e in patch.entries.iter() {
            let (&(hook, position), v) = e;
            if hook.layer >= cfg.n_layers || position >= seq || v.len() != cfg.d_model {
                return Err(ModelError::InvalidPatch(format!(
                    "{hook} position {position} (len {}) invalid for {} layers, seq {seq}, d_model {}",
                    v.len(),
                    cfg.n_layers,
                    cfg.d_model
                )));
            }
        }
        self.passes.fetch_add(1, Ordering::Relaxed);

        let p = &self.params;
        let d = cfg.d_model;
        let embed = p.get("embed.W")?;
        let pos = p.get("pos.W")?;
        let mut resid = Tensor2::zeros(seq, d);
        for (i, &t) in tokens.iter().enumerate() {
            for ((o, e), q) in resid.row_mut(i).iter_mut().zip(embed.row(t as usize)).zip(pos.row(i)) {
                *o = e + q;
            }
        }

        let mut cache = ActivationCache::default();
        let mut hook = |t: &mut Tensor2, layer: usize, site: HookSite| -> Result<()> {
            let id = HookId::new(layer, site);
            for (position, v) in patch.rows_for(id) {
                t.row_mut(position).copy_from_slice(v);
            }
            if !t.is_finite() {
                return Err(ModelError::NonFiniteActivation { layer, site });
            }
            if capture.contains(&id) {
                cache.entries.insert(id, t.clone());
            }
            Ok(())
        };

        for layer in 0..cfg.n_layers {
            let name = |s: &str| format!("layer.{layer}.{s}");
            hook(&mut resid, layer, HookSite::ResidPre)?;

            let h = norm_rows(&resid, p.get(&name("ln1.g"))?, p.get(&name("ln1.b"))?, cfg.norm_eps)?;
            let mut attn = self.attention(&h, layer)?;
            hook(&mut attn, layer, HookSite::AttnOut)?;
            add_in_place(&mut resid, &attn);

            let h = norm_rows(&resid, p.get(&name("ln2.g"))?, p.get(&name("ln2.b"))?, cfg.norm_eps)?;
            let mut pre = matmul(&h, p.get(&name("mlp.Win"))?)?;
            numerics::add_row_bias(&mut pre, p.get(&name("mlp.bin"))?.data())?;
            let act = Tensor2::new(
                pre.rows(),
                pre.cols(),
                pre.data().iter().map(|&x| cfg.activation.apply(x)).collect(),
            )?;
            let mut mlp = matmul(&act, p.get(&name("mlp.Wout"))?)?;
            numerics::add_row_bias(&mut mlp, p.get(&name("mlp.bout"))?.data())?;
            hook(&mut mlp, layer, HookSite::MlpOut)?;
            add_in_place(&mut resid, &mlp);

            hook(&mut resid, layer, HookSite::ResidPost)?;
        }

        let resid = match rows {
            LogitRows::All => resid,
            LogitRows::Last => Tensor2::new(1, d, resid.row(seq - 1).to_vec())?,
        };
        let h = norm_rows(&resid, p.get("final_ln.g")?, p.get("final_ln.b")?, cfg.norm_eps)?;
        let logits = matmul(&h, &self.unembed)?;
        Ok(ForwardOutput { logits, cache })
    }

    /// Causal multi-head self-attention including the output projection.
    fn attention(&self, h: &Tensor2, layer: usize) -> Result<Tensor2> {
        let p = &self.params;
        let name = |s: &str| format!("layer.{layer}.attn.{s}");
        let proj = |w: &str, b: &str| -> Result<Tensor2> {
            let mut t = matmul(h, p.get(&name(w))?)?;
            numerics::add_row_bias(&mut t, p.get(&name(b))?.data())?;
            Ok(t)
        };
        let q = proj("Wq", "bq")?;
        let k = proj("Wk", "bk")?;
        let v = proj("Wv", "bv")?;

        let (seq, dh) = (h.rows(), self.config.d_head);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut z = Tensor2::zeros(seq, self.config.d_model);
        let mut weights = vec![0.0f64; seq];
        for head in 0..self.config.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..seq {
                let qi = &q.row(i)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for (j, w) in weights.iter_mut().enumerate().take(i + 1) {
                    let kj = &k.row(j)[cols.clone()];
                    let dot: f64 = qi.iter().zip(kj).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                    *w = dot * scale;
                    max = max.max(*w);
                }
                let mut total = 0.0;
                for w in weights.iter_mut().take(i + 1) {
                    *w = (*w - max).exp();
                    total += *w;
                }
                let out = &mut z.row_mut(i)[cols.clone()];
                for (c, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for (j, w) in weights.iter().enumerate().take(i + 1) {
                        acc += w / total * f64::from(v.row(j)[head * dh + c]);
                    }
                    *o = acc as f32;
                }
            }
        }
        let mut out = matmul(&z, p.get(&name("Wo"))?)?;
        numerics::add_row_bias(&mut out, p.get(&name("bo"))?.data())?;
        Ok(out)
    }
}

fn norm_rows(x: &Tensor2, g: &Tensor2, b: &Tensor2, eps: f32) -> Result<Tensor2> {
    let mut out = Vec::with_capacity(x.data().len());
    for i in 0..x.rows() {
        out.extend(layer_norm(x.row(i), g.data(), b.data(), eps)?);
    }
    Ok(Tensor2::new(x.rows(), x.cols(), out)?)
}

fn add_in_place(acc: &mut Tensor2, other: &Tensor2) {
    for i in 0..acc.rows() {
        for (a, b) in acc.row_mut(i).iter_mut().zip(other.row(i)) {
            *a += b;
        }
    }
}

/// Softmax over the full vocabulary of the final logit row.
pub fn next_token_distribution(logits: &Tensor2) -> Result<ProbDist> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(NumericsError::InvalidShape("empty logits".into()).into());
    }
    Ok(numerics::softmax(logits.row(logits.rows() - 1))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_mlp: 16,
            vocab_size: 11,
            max_seq: 12,
            norm_eps: 1e-5,
            activation: Activation::GeluTanh,
            tie_embeddings: false,
        }
    }

    fn tiny_model() -> Model {
        let cfg = tiny_config();
        Model::new(cfg.clone(), ParameterStore::random(&cfg, 7)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.d_head = 3;
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
        let mut cfg = tiny_config();
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
        let json = serde_json::to_string(&tiny_config()).unwrap();
        assert!(json.contains("\"activation\":\"gelu_tanh\""));
        assert_eq!(ModelConfig::from_json(&json).unwrap(), tiny_config());
        let extra = json.replace('}', ",\"rope\":true}");
        assert!(ModelConfig::from_json(&extra).is_err());
    }

    #[test]
    fn header_length_is_little_endian_u64() {
        let archive = ParameterStore::random(&tiny_config(), 1).to_archive().unwrap();
        let n = u64::from_le_bytes(archive[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&archive[8..8 + n]).unwrap();
        assert!(header.get("embed.W").is_some());

        // A 64-byte header is announced by 40 00 00 00 00 00 00 00.
        assert_eq!(64u64.to_le_bytes(), [0x40, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn archive_round_trip() {
        let cfg = tiny_config();
        let store = ParameterStore::random(&cfg, 3);
        let loaded = load_weights(&store.to_archive().unwrap(), &cfg, None).unwrap();
        for name in store.names() {
            assert_eq!(store.get(name).unwrap(), loaded.get(name).unwrap());
        }
    }

    #[test]
    fn archive_errors() {
        let cfg = tiny_config();
        let archive = ParameterStore::random(&cfg, 3).to_archive().unwrap();
        assert!(matches!(
            load_weights(&archive[..archive.len() - 10], &cfg, None),
            Err(ModelError::MalformedArchive(_))
        ));
        assert!(matches!(load_weights(&archive[..4], &cfg, None), Err(ModelError::MalformedArchive(_))));

        let mut store = ParameterStore::random(&cfg, 3);
        store.tensors.remove("unembed.W");
        let e = load_weights(&store.to_archive().unwrap(), &cfg, None);
        assert!(matches!(e, Err(ModelError::MissingTensor(n)) if n == "unembed.W"));

        let mut tied = cfg.clone();
        tied.tie_embeddings = true;
        assert!(load_weights(&store.to_archive().unwrap(), &tied, None).is_ok());

        let mut store = ParameterStore::random(&cfg, 3);
        store.insert("mlp_bad", Tensor2::zeros(1, 1));
        store.insert("layer.1.mlp.Win", Tensor2::zeros(8, 15));
        assert!(matches!(
            load_weights(&store.to_archive().unwrap(), &cfg, None),
            Err(ModelError::ShapeMismatch { name, .. }) if name == "layer.1.mlp.Win"
        ));
    }

    #[test]
    fn name_map_and_half_precision() {
        let cfg = tiny_config();
        let store = ParameterStore::random(&cfg, 5);
        let mut raw: Vec<(String, Vec<u8>, Vec<usize>)> = Vec::new();
        let mut map = NameMap::new();
        for name in store.names() {
            let t = store.get(name).unwrap();
            let bytes = t
                .data()
                .iter()
                .flat_map(|&v| half::f16::from_f32(v).to_le_bytes())
                .collect();
            let ckpt = format!("ckpt/{name}");
            map.insert(ckpt.clone(), name.to_owned());
            raw.push((ckpt, bytes, vec![t.rows(), t.cols()]));
        }
        let views: Vec<_> = raw
            .iter()
            .map(|(n, b, s)| (n.clone(), TensorView::new(Dtype::F16, s.clone(), b).unwrap()))
            .collect();
        let archive = safetensors::serialize(views, &None).unwrap();
        assert!(load_weights(&archive, &cfg, None).is_err());
        let loaded = load_weights(&archive, &cfg, Some(&map)).unwrap();
        let a = store.get("layer.0.attn.Wq").unwrap();
        let b = loaded.get("layer.0.attn.Wq").unwrap();
        assert!(a.max_abs_diff(b).unwrap() < 1e-3);
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = tiny_model();
        let none = HashSet::new();
        let out = m.forward(&[1, 2, 3], &none, &PatchSpec::new()).unwrap();
        assert_eq!(out.logits.shape(), (3, 11));
        assert!(out.cache.is_empty());
        assert!(matches!(m.forward(&[], &none, &PatchSpec::new()), Err(ModelError::InvalidTokens(_))));
        assert!(m.forward(&[0; 13], &none, &PatchSpec::new()).is_err());
        assert!(m.forward(&[11], &none, &PatchSpec::new()).is_err());

        let mut patch = PatchSpec::new();
        patch.insert(HookId::mlp_out(0), 3, vec![0.0; 8]).unwrap();
        assert!(matches!(m.forward(&[1, 2, 3], &none, &patch), Err(ModelError::InvalidPatch(_))));
        assert!(patch.insert(HookId::mlp_out(0), 3, vec![0.0; 8]).is_err());
        assert!(patch.insert(HookId::mlp_out(1), 0, vec![f32::NAN; 8]).is_err());
    }

    #[test]
    fn non_finite_activation_reports_site() {
        let m = tiny_model();
        let mut patch = PatchSpec::new();
        // MAX + MAX overflows the residual stream; the next site sees NaN.
        patch.insert(HookId::new(1, HookSite::ResidPre), 0, vec![f32::MAX; 8]).unwrap();
        patch.insert(HookId::new(1, HookSite::AttnOut), 0, vec![f32::MAX; 8]).unwrap();
        let e = m.forward(&[1, 2], &HashSet::new(), &patch).unwrap_err();
        assert!(
            matches!(e, ModelError::NonFiniteActivation { layer: 1, .. }),
            "{e}"
        );
    }

    #[test]
    fn last_row_logits_match_full() {
        let m = tiny_model();
        let full = m.forward(&[4, 5, 6, 7], &HashSet::new(), &PatchSpec::new()).unwrap();
        let last = m.run(&[4, 5, 6, 7], &HashSet::new(), &PatchSpec::new(), LogitRows::Last).unwrap();
        assert_eq!(last.logits.row(0), full.logits.row(3));
        assert_eq!(m.passes(), 2);
        m.reset_passes();
        assert_eq!(m.passes(), 0);
    }

    #[test]
    fn capture_records_all_sites() {
        let m = tiny_model();
        let capture: HashSet<HookId> = (0..2)
            .flat_map(|l| HookSite::ALL.map(|s| HookId::new(l, s)))
            .collect();
        let out = m.forward(&[1, 2, 3], &capture, &PatchSpec::new()).unwrap();
        assert_eq!(out.cache.len(), 8);
        for h in out.cache.hooks() {
            assert_eq!(out.cache.get(*h).unwrap().shape(), (3, 8));
        }
        // resid_post(0) feeds resid_pre(1) unchanged.
        assert_eq!(
            out.cache.get(HookId::new(0, HookSite::ResidPost)),
            out.cache.get(HookId::new(1, HookSite::ResidPre))
        );
    }

    #[test]
    fn capture_sees_replacement() {
        let m = tiny_model();
        let mut patch = PatchSpec::new();
        patch.insert(HookId::mlp_out(1), 1, vec![0.5; 8]).unwrap();
        let capture = HashSet::from([HookId::mlp_out(1)]);
        let out = m.forward(&[1, 2, 3], &capture, &patch).unwrap();
        assert_eq!(out.cache.get(HookId::mlp_out(1)).unwrap().row(1), &[0.5; 8]);
    }

    #[test]
    fn next_token_distribution_uses_final_row() {
        let logits = Tensor2::from_rows(&[vec![5.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let p = next_token_distribution(&logits).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
        let shifted = Tensor2::from_rows(&[vec![5.0, 0.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(next_token_distribution(&shifted).unwrap().probs(), p.probs());
    }

    #[test]
    fn hook_site_parsing() {
        for s in HookSite::ALL {
            assert_eq!(s.as_str().parse::<HookSite>().unwrap(), s);
        }
        assert!("mlp_in".parse::<HookSite>().is_err());
        assert_eq!(HookId::mlp_out(3).to_string(), "blocks.3.mlp_out");
    }
}
