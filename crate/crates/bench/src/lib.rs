//! Shared fixtures for the criterion benches.

use gatedxlstm::corpus::{build_context_window, generate_synthetic, StreamSet};
use gatedxlstm::ded::DecodeInput;
use gatedxlstm::{Corpus, ModelConfig, SyntheticConfig};

/// A small model at the gradient-check scale.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        embedding_dim: 64,
        steps: 16,
        hidden_dim: 8,
        layers: 2,
        heads: 2,
        qkv_blocks: 2,
        frames: 3,
        ..ModelConfig::default()
    }
}

pub fn small_corpus(n_dialogues: usize) -> Corpus {
    generate_synthetic(&SyntheticConfig {
        n_dialogues,
        embedding_dim: 64,
        ..SyntheticConfig::default()
    })
    .expect("valid synthetic config")
}

/// The first `rows` prediction targets of `corpus`.
pub fn stream_sets(corpus: &Corpus, frames: usize, rows: usize) -> Vec<StreamSet> {
    corpus
        .dialogues()
        .iter()
        .flat_map(|d| (0..d.len()).map(move |t| build_context_window(d, t, frames)))
        .take(rows)
        .collect()
}

/// A two-speaker decoding instance with deterministic, mildly peaked
/// posteriors.
pub fn decode_input(len: usize) -> DecodeInput {
    let posteriors = (0..len)
        .map(|t| {
            let mut p = [1.0; 4];
            p[(t * 7 + t / 3) % 4] += 2.0 + (t as f64).sin();
            let z: f64 = p.iter().sum();
            p.map(|x| x / z)
        })
        .collect();
    let speakers: Vec<&str> = (0..len).map(|t| if t % 3 == 0 { "a" } else { "b" }).collect();
    DecodeInput::new(posteriors, &speakers).expect("valid decode input")
}
