// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::HashSet;

use common::{max_abs_diff, random_substitutions, random_tokens, rng, Oracle, Substitutions};
use geopatch_core::model::{load_weights, Activation, HookId, HookSite, Model, ModelConfig, ParameterStore, PatchSpec};
use rand::Rng;

fn config(n_layers: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads: 4,
        d_head: d_model / 4,
        d_mlp: 4 * d_model,
        vocab_size: 37,
        max_seq: 16,
        norm_eps: 1e-5,
        activation: Activation::GeluTanh,
        tie_embeddings: false,
    }
}

fn spec_from(subs: &Substitutions) -> PatchSpec {
    let mut spec = PatchSpec::new();
    for (&(layer, site, pos), v) in subs {
        spec.insert(HookId::new(layer, site), pos, v.clone()).unwrap();
    }
    spec
}

#[test]
fn engine_matches_oracle_under_random_patches() {
    let cfg = config(2, 16);
    let params = ParameterStore::random(&cfg, 11);
    let model = Model::new(cfg.clone(), params.clone()).unwrap();
    let oracle = Oracle::new(&cfg, &params);
    let mut r = rng(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = r.gen_range(1..=10);
        let tokens = random_tokens(&mut r, cfg.vocab_size, len);
        let n = r.gen_range(0..=6);
        let subs = random_substitutions(&mut r, &cfg, len, n);
        let out = model.forward(&tokens, &HashSet::new(), &spec_from(&subs)).unwrap();
        let expected: Vec<f64> = oracle.run(&tokens, &subs).logits.concat();
        worst = worst.max(max_abs_diff(out.logits.data(), &expected));
    }
    assert!(worst <= 1e-5, "max logit deviation {worst}");
}

#[test]
fn tied_embeddings_match_oracle() {
    let mut cfg = config(2, 8);
    cfg.tie_embeddings = true;
    let params = ParameterStore::random(&cfg, 2);
    let model = Model::new(cfg.clone(), params.clone()).unwrap();
    let tokens = [3, 1, 4, 1, 5];
    let out = model.forward(&tokens, &HashSet::new(), &PatchSpec::new()).unwrap();
    let expected = Oracle::new(&cfg, &params).run(&tokens, &Substitutions::new()).logits.concat();
    assert!(max_abs_diff(out.logits.data(), &expected) <= 1e-5);
}

#[test]
fn fixture_archive_loads_and_matches_oracle() {
    let cfg = config(2, 8);
    let params = ParameterStore::random(&cfg, 21);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.safetensors");
    std::fs::write(&path, params.to_archive().unwrap()).unwrap();

    let loaded = load_weights(&std::fs::read(&path).unwrap(), &cfg, None).unwrap();
    let model = Model::new(cfg.clone(), loaded).unwrap();
    let tokens = [0, 5, 9, 36, 2];
    let out = model.forward(&tokens, &HashSet::new(), &PatchSpec::new()).unwrap();
    let expected = Oracle::new(&cfg, &params).run(&tokens, &Substitutions::new()).logits.concat();
    assert!(max_abs_diff(out.logits.data(), &expected) <= 1e-5);
}

#[test]
fn one_layer_mlp_patch_formula() {
    // With one block, final logits = final_ln(resid after attention + v) . unembed
    // when mlp_out at the final position is replaced by v.
    let cfg = config(1, 8);
    let params = ParameterStore::random(&cfg, 5);
    let model = Model::new(cfg.clone(), params.clone()).unwrap();
    let tokens = [7, 8, 9];
    let v: Vec<f32> = (0..8).map(|i| 0.25 * i as f32 - 1.0).collect();
    let mut spec = PatchSpec::new();
    spec.insert(HookId::mlp_out(0), 2, v.clone()).unwrap();
    let out = model.forward(&tokens, &HashSet::new(), &spec).unwrap();

    let plain = Oracle::new(&cfg, &params).run(&tokens, &Substitutions::new());
    let resid_pre = &plain.acts[&(0, HookSite::ResidPre)][2];
    let attn = &plain.acts[&(0, HookSite::AttnOut)][2];
    let x: Vec<f64> = (0..8).map(|i| resid_pre[i] + attn[i] + f64::from(v[i])).collect();
    let g = params.get("final_ln.g").unwrap().data();
    let b = params.get("final_ln.b").unwrap().data();
    let mean = x.iter().sum::<f64>() / 8.0;
    let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 8.0;
    let h: Vec<f64> = (0..8)
        .map(|i| (x[i] - mean) / (var + 1e-5).sqrt() * f64::from(g[i]) + f64::from(b[i]))
        .collect();
    let unembed = params.get("unembed.W").unwrap();
    let expected: Vec<f64> = (0..cfg.vocab_size)
        .map(|j| (0..8).map(|i| h[i] * f64::from(unembed.get(i, j))).sum())
        .collect();
    assert!(max_abs_diff(out.logits.row(2), &expected) <= 1e-5);
}

#[test]
fn self_patch_is_bitwise_noop() {
    let cfg = config(3, 16);
    let model = Model::new(cfg.clone(), ParameterStore::random(&cfg, 8)).unwrap();
    let tokens = [1, 2, 3, 4, 5, 6];
    let capture: HashSet<HookId> = (0..3).map(HookId::mlp_out).collect();
    let first = model.forward(&tokens, &capture, &PatchSpec::new()).unwrap();
    let mut spec = PatchSpec::new();
    for &hook in &capture {
        let t = first.cache.get(hook).unwrap();
        for p in 0..tokens.len() {
            spec.insert(hook, p, t.row(p).to_vec()).unwrap();
        }
    }
    let second = model.forward(&tokens, &HashSet::new(), &spec).unwrap();
    assert_eq!(first.logits, second.logits);
}

#[test]
fn patching_never_reaches_backwards() {
    let cfg = config(2, 16);
    let model = Model::new(cfg.clone(), ParameterStore::random(&cfg, 4)).unwrap();
    let tokens = [9, 8, 7, 6, 5, 4, 3];
    let base = model.forward(&tokens, &HashSet::new(), &PatchSpec::new()).unwrap();
    for site in HookSite::ALL {
        for p in 0..tokens.len() {
            let mut spec = PatchSpec::new();
            spec.insert(HookId::new(0, site), p, vec![1.5; 16]).unwrap();
            let out = model.forward(&tokens, &HashSet::new(), &spec).unwrap();
            for row in 0..p {
                let d = out
                    .logits
                    .row(row)
                    .iter()
                    .zip(base.logits.row(row))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(d <= 1e-6, "{site} at {p} changed row {row} by {d}");
            }
        }
    }
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let cfg = config(2, 16);
    let model = Model::new(cfg.clone(), ParameterStore::random(&cfg, 4)).unwrap();
    let tokens = [3, 14, 15, 9, 26];
    let a = model.forward(&tokens, &HashSet::new(), &PatchSpec::new()).unwrap();
    let b = model.forward(&tokens, &HashSet::new(), &PatchSpec::new()).unwrap();
    let bits = |t: &geopatch_core::Tensor2| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.logits), bits(&b.logits));
}

#[test]
fn captured_activations_match_oracle() {
    let cfg = config(2, 8);
    let params = ParameterStore::random(&cfg, 17);
    let model = Model::new(cfg.clone(), params.clone()).unwrap();
    let tokens = [4, 4, 2, 30];
    let capture: HashSet<HookId> = (0..2).flat_map(|l| HookSite::ALL.map(|s| HookId::new(l, s))).collect();
    let out = model.forward(&tokens, &capture, &PatchSpec::new()).unwrap();
    let oracle = Oracle::new(&cfg, &params).run(&tokens, &Substitutions::new());
    for hook in &capture {
        let expected = oracle.acts[&(hook.layer, hook.site)].concat();
        assert!(max_abs_diff(out.cache.get(*hook).unwrap().data(), &expected) <= 1e-5, "{hook}");
    }
}
