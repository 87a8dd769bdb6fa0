// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test-only reference implementations, written independently of the engine:
//! nested `Vec<f64>` arithmetic, no hook machinery, substitutions applied
//! inline at the four block sites.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use geopatch_core::model::{HookSite, ModelConfig, ParameterStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

/// `(layer, site, position) -> replacement row`.
pub type Substitutions = HashMap<(usize, HookSite, usize), Vec<f32>>;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub struct Oracle<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParameterStore,
}

pub struct OracleRun {
    pub logits: Matrix,
    /// Activations after substitution, keyed by `(layer, site)`.
    pub acts: HashMap<(usize, HookSite), Matrix>,
}

fn to_matrix(params: &ParameterStore, name: &str) -> Matrix {
    let t = params.get(name).unwrap_or_else(|_| panic!("missing {name}"));
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn vector(params: &ParameterStore, name: &str) -> Vec<f64> {
    to_matrix(params, name).remove(0)
}

fn product(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn plus_bias(mut a: Matrix, b: &[f64]) -> Matrix {
    for row in &mut a {
        for (x, y) in row.iter_mut().zip(b) {
            *x += y;
        }
    }
    a
}

fn norm(a: &Matrix, g: &[f64], b: &[f64], eps: f64) -> Matrix {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .zip(g.iter().zip(b))
                .map(|(x, (g, b))| (x - mean) / (var + eps).sqrt() * g + b)
                .collect()
        })
        .collect()
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn kl64(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum()
}

impl<'a> Oracle<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParameterStore) -> Self {
        Self { cfg, params }
    }

    fn substitute(&self, m: &mut Matrix, layer: usize, site: HookSite, subs: &Substitutions) {
        for (pos, row) in m.iter_mut().enumerate() {
            if let Some(v) = subs.get(&(layer, site, pos)) {
                *row = v.iter().map(|&x| f64::from(x)).collect();
            }
        }
    }

    pub fn run(&self, tokens: &[u32], subs: &Substitutions) -> OracleRun {
        let cfg = self.cfg;
        let eps = f64::from(cfg.norm_eps);
        let embed = to_matrix(self.params, "embed.W");
        let pos = to_matrix(self.params, "pos.W");
        let mut x: Matrix = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| embed[t as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
            .collect();
        let mut acts = HashMap::new();
        let n = tokens.len();

        for l in 0..cfg.n_layers {
            let w = |s: &str| to_matrix(self.params, &format!("layer.{l}.{s}"));
            let b = |s: &str| vector(self.params, &format!("layer.{l}.{s}"));

            self.substitute(&mut x, l, HookSite::ResidPre, subs);
            acts.insert((l, HookSite::ResidPre), x.clone());

            let h = norm(&x, &b("ln1.g"), &b("ln1.b"), eps);
            let q = plus_bias(product(&h, &w("attn.Wq")), &b("attn.bq"));
            let k = plus_bias(product(&h, &w("attn.Wk")), &b("attn.bk"));
            let v = plus_bias(product(&h, &w("attn.Wv")), &b("attn.bv"));
            let mut z = vec![vec![0.0; cfg.d_model]; n];
            for head in 0..cfg.n_heads {
                let c0 = head * cfg.d_head;
                for i in 0..n {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..cfg.d_head).map(|c| q[i][c0 + c] * k[j][c0 + c]).sum::<f64>()
                                / (cfg.d_head as f64).sqrt()
                        })
                        .collect();
                    let a = softmax64(&scores);
                    for c in 0..cfg.d_head {
                        z[i][c0 + c] = (0..=i).map(|j| a[j] * v[j][c0 + c]).sum();
                    }
                }
            }
            let mut attn = plus_bias(product(&z, &w("attn.Wo")), &b("attn.bo"));
            self.substitute(&mut attn, l, HookSite::AttnOut, subs);
            acts.insert((l, HookSite::AttnOut), attn.clone());
            for (r, a) in x.iter_mut().zip(&attn) {
                for (xi, ai) in r.iter_mut().zip(a) {
                    *xi += ai;
                }
            }

            let h = norm(&x, &b("ln2.g"), &b("ln2.b"), eps);
            let pre = plus_bias(product(&h, &w("mlp.Win")), &b("mlp.bin"));
            let act: Matrix = pre.iter().map(|r| r.iter().map(|&v| gelu_tanh(v)).collect()).collect();
            let mut mlp = plus_bias(product(&act, &w("mlp.Wout")), &b("mlp.bout"));
            self.substitute(&mut mlp, l, HookSite::MlpOut, subs);
            acts.insert((l, HookSite::MlpOut), mlp.clone());
            for (r, a) in x.iter_mut().zip(&mlp) {
                for (xi, ai) in r.iter_mut().zip(a) {
                    *xi += ai;
                }
            }

            self.substitute(&mut x, l, HookSite::ResidPost, subs);
            acts.insert((l, HookSite::ResidPost), x.clone());
        }

        let h = norm(&x, &vector(self.params, "final_ln.g"), &vector(self.params, "final_ln.b"), eps);
        let unembed = if cfg.tie_embeddings {
            let e = to_matrix(self.params, "embed.W");
            (0..cfg.d_model).map(|c| e.iter().map(|r| r[c]).collect()).collect()
        } else {
            to_matrix(self.params, "unembed.W")
        };
        OracleRun {
            logits: product(&h, &unembed),
            acts,
        }
    }

    /// Final-position next-token distribution.
    pub fn next_token(&self, tokens: &[u32], subs: &Substitutions) -> Vec<f64> {
        softmax64(self.run(tokens, subs).logits.last().unwrap())
    }
}

pub fn max_abs_diff(engine: &[f32], oracle: &[f64]) -> f64 {
    assert_eq!(engine.len(), oracle.len());
    engine
        .iter()
        .zip(oracle)
        .map(|(a, b)| (f64::from(*a) - b).abs())
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Distinct random `(layer, site, position)` replacements.
pub fn random_substitutions(r: &mut ChaCha8Rng, cfg: &ModelConfig, seq: usize, count: usize) -> Substitutions {
    let mut subs = Substitutions::new();
    while subs.len() < count {
        let layer = r.gen_range(0..cfg.n_layers);
        let site = HookSite::ALL[r.gen_range(0..4)];
        let pos = r.gen_range(0..seq);
        let v = (0..cfg.d_model).map(|_| r.gen_range(-2.0f32..2.0)).collect();
        subs.insert((layer, site, pos), v);
    }
    subs
}

pub fn random_tokens(r: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| r.gen_range(0..vocab as u32)).collect()
}
