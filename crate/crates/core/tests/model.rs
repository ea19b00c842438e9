// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use flowroutes_core::model::toy::{random_weights, write_model_dir};
use flowroutes_core::model::{load_model, next_token, Model, ModelConfig};
use flowroutes_core::tokenizer::Tokenizer;
use flowroutes_core::Error;
use serde_json::Value;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn reference() -> Value {
    let text = std::fs::read_to_string(data_dir().join("reference_outputs.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn ids_of(v: &Value) -> Vec<u32> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap() as u32)
        .collect()
}

fn check_reference_logits(name: &str) {
    let model = Model::load(&data_dir().join(name)).unwrap();
    for row in reference()[name].as_array().unwrap() {
        let ids = ids_of(&row["ids"]);
        let seq = model.tokens_from_ids(&ids, None).unwrap();
        let cache = model.forward(&seq).unwrap();
        let expected: Vec<f64> = row["last_logits"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(cache.logits().len(), expected.len());
        let err = cache
            .logits()
            .iter()
            .zip(&expected)
            .map(|(a, b)| (f64::from(*a) - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-4, "{name} {ids:?}: max logit error {err}");
    }
}

#[test]
fn gpt2_naming_matches_reference_implementation() {
    check_reference_logits("toy-gpt2");
}

#[test]
fn llama_naming_matches_reference_implementation() {
    check_reference_logits("toy-llama");
}

#[test]
fn gpt2_tokenizer_matches_reference_implementation() {
    let tok = Tokenizer::from_dir(&data_dir().join("gpt2-tokenizer")).unwrap();
    for row in reference()["gpt2_tokenizer"].as_array().unwrap() {
        let text = row["text"].as_str().unwrap();
        let seq = tok.encode(text).unwrap();
        assert_eq!(seq.ids, ids_of(&row["ids"]), "{text:?}");
        assert_eq!(tok.decode_seq(&seq), text);
    }
}

#[test]
fn ioi_prompt_word_grouping() {
    let tok = Tokenizer::from_dir(&data_dir().join("gpt2-tokenizer"))
        .unwrap()
        .with_bos(Some(50256), true);
    let seq = tok
        .encode("When Mary and John went to the store, John gave a drink to")
        .unwrap();
    assert_eq!(seq.ids[0], 50256);
    assert_eq!(seq.strings[2], " Mary");
    assert_eq!(seq.len(), 15);
    // every GPT-2 token of this prompt is a whole word
    assert!(seq.is_first_subword.iter().all(|&f| f));
}

#[test]
fn save_load_roundtrip_both_namings() {
    let tmp = tempfile::tempdir().unwrap();
    for (i, cfg) in [
        ModelConfig::gpt2_style(2, 2, 4, 40),
        ModelConfig::llama_style(2, 2, 4, 40),
    ]
    .into_iter()
    .enumerate()
    {
        let w = random_weights(&cfg, i as u64).unwrap();
        let dir = tmp.path().join(format!("m{i}"));
        write_model_dir(&dir, &cfg, &w).unwrap();
        let (cfg2, w2) = load_model(&dir).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(w, w2);
    }
}

#[test]
fn inconsistent_head_width_is_a_load_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::gpt2_style(1, 2, 4, 40);
    write_model_dir(tmp.path(), &cfg, &random_weights(&cfg, 0).unwrap()).unwrap();
    let path = tmp.path().join("config.json");
    let mut json: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["d_head"] = Value::from(3);
    std::fs::write(&path, json.to_string()).unwrap();
    assert!(matches!(load_model(tmp.path()), Err(Error::Load { .. })));
}

#[test]
fn missing_tensor_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::gpt2_style(2, 2, 4, 40);
    write_model_dir(tmp.path(), &cfg, &random_weights(&cfg, 0).unwrap()).unwrap();
    let path = tmp.path().join("config.json");
    let mut json: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["n_layers"] = Value::from(3);
    std::fs::write(&path, json.to_string()).unwrap();
    match load_model(tmp.path()) {
        Err(Error::Load { tensor, .. }) => assert!(tensor.contains("h.2"), "{tensor}"),
        other => panic!("expected load error, got {other:?}"),
    }
}

fn toy(cfg: &ModelConfig, seed: u64) -> Model {
    Model::new("toy", cfg.clone(), random_weights(cfg, seed).unwrap(), None).unwrap()
}

#[test]
fn cache_identities_hold() {
    for cfg in [
        ModelConfig::gpt2_style(3, 2, 4, 50),
        ModelConfig::llama_style(3, 2, 4, 50),
    ] {
        let model = toy(&cfg, 5);
        let ids: Vec<u32> = (0..9).map(|i| (i * 7 + 3) % 50).collect();
        let cache = model
            .forward(&model.tokens_from_ids(&ids, None).unwrap())
            .unwrap();
        for l in 0..cfg.n_layers {
            let lc = cache.layer(l);
            let mid = lc.resid_in.add(&lc.attn_out).unwrap();
            let out = lc.resid_mid.add(&lc.ffn_out).unwrap();
            for (a, b) in mid.data().iter().zip(lc.resid_mid.data()) {
                assert!((a - b).abs() < 1e-4);
            }
            for (a, b) in out.data().iter().zip(cache.resid_out(l).data()) {
                assert!((a - b).abs() < 1e-4);
            }
            for h in 0..cfg.n_heads {
                let m = cache.attn_matrix(l, h);
                for pos in 0..ids.len() {
                    let row = m.row(pos);
                    let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(row[pos + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let cfg = ModelConfig::gpt2_style(2, 3, 4, 20);
    let model = toy(&cfg, 1);
    let cache = model
        .forward(&model.tokens_from_ids(&[4], None).unwrap())
        .unwrap();
    for l in 0..2 {
        for h in 0..3 {
            assert_eq!(cache.attn(l, h, 0, 0), 1.0);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::llama_style(2, 2, 4, 30);
    let model = toy(&cfg, 2);
    let seq = model.tokens_from_ids(&[1, 2, 3, 4, 5], None).unwrap();
    assert_eq!(model.forward(&seq).unwrap(), model.forward(&seq).unwrap());
    assert_eq!(model.forward_calls(), 2);
}

#[test]
fn context_limit_is_enforced() {
    let mut cfg = ModelConfig::gpt2_style(1, 1, 4, 10);
    cfg.n_ctx = 4;
    let model = toy(&cfg, 0);
    let seq = model.tokens_from_ids(&[1; 5], None).unwrap();
    assert!(matches!(
        model.forward(&seq),
        Err(Error::Context { len: 5, limit: 4 })
    ));
    assert!(matches!(
        model.tokens_from_ids(&[10], None),
        Err(Error::Vocabulary { .. })
    ));
}

#[test]
fn rotary_position_zero_is_unrotated() {
    let cfg = ModelConfig::llama_style(2, 2, 4, 30);
    let w = random_weights(&cfg, 3).unwrap();
    let mut other = cfg.clone();
    other.rope_theta = 77.0;
    let a = Model::new("a", cfg, w.clone(), None).unwrap();
    let b = Model::new("b", other, w, None).unwrap();
    let seq = a.tokens_from_ids(&[9], None).unwrap();
    assert_eq!(
        a.forward(&seq).unwrap().logits(),
        b.forward(&seq).unwrap().logits()
    );
    let seq = a.tokens_from_ids(&[9, 8, 7], None).unwrap();
    assert_ne!(
        a.forward(&seq).unwrap().logits(),
        b.forward(&seq).unwrap().logits()
    );
}

#[test]
fn next_token_matches_linear_scan() {
    let cfg = ModelConfig::gpt2_style(2, 2, 4, 64);
    let model = toy(&cfg, 4);
    let cache = model
        .forward(&model.tokens_from_ids(&[3, 1, 4, 1, 5], None).unwrap())
        .unwrap();
    let (id, logit) = next_token(&cache);
    let logits = cache.logits();
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    assert_eq!(id as usize, best);
    assert_eq!(logit, logits[best]);
}

#[test]
fn uniform_logits_pick_id_zero() {
    let cfg = ModelConfig::gpt2_style(1, 1, 4, 12);
    let mut w = random_weights(&cfg, 0).unwrap();
    w.unembed.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let model = Model::new("flat", cfg, w, None).unwrap();
    let cache = model
        .forward(&model.tokens_from_ids(&[5, 6], None).unwrap())
        .unwrap();
    assert_eq!(next_token(&cache), (0, 0.0));
}
