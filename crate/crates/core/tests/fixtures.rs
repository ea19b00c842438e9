// SPDX-License-Identifier: MIT OR Apache-2.0

//! Regenerates the checked-in toy model directories. Run with
//! `cargo test -p flowroutes-core --test fixtures -- --ignored`.

use std::path::PathBuf;

use flowroutes_core::model::toy::{random_weights, write_model_dir, TOY_VOCAB_SIZE};
use flowroutes_core::model::ModelConfig;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

#[test]
#[ignore]
fn regenerate_toy_models() {
    let mut gpt2 = ModelConfig::gpt2_style(2, 2, 4, TOY_VOCAB_SIZE);
    gpt2.n_ctx = 32;
    gpt2.tie_embeddings = true;
    gpt2.prepend_bos = true;
    gpt2.bos_token_id = Some(TOY_VOCAB_SIZE as u32 - 1);
    let w = random_weights(&gpt2, 11).unwrap();
    write_model_dir(&data_dir().join("toy-gpt2"), &gpt2, &w).unwrap();

    let mut llama = ModelConfig::llama_style(2, 2, 4, TOY_VOCAB_SIZE);
    llama.n_ctx = 32;
    let w = random_weights(&llama, 12).unwrap();
    write_model_dir(&data_dir().join("toy-llama"), &llama, &w).unwrap();
}
