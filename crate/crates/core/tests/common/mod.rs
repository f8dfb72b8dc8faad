#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slam_core::data::{gen_synthetic_corpus, PairedBatch, SpeechBatch, SyntheticSpec, TextBatch, BatchLimits};
use slam_core::model::{ModelConfig, SlamModel};
use slam_core::nn::ConformerConfig;
use slam_core::params::ParamStore;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A model small enough for finite-difference checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        n_speech_layers: 1,
        n_shared_layers: 1,
        vocab_size: 12,
        codebook_groups: 2,
        codebook_size: 4,
        subsample_channels: 2,
        conformer: ConformerConfig {
            model_dim: 8,
            ffn_hidden: 16,
            num_heads: 2,
            conv_kernel_size: 3,
            conv_groups: 2,
            dropout_rate: 0.0,
        },
        num_negatives: 3,
        ..ModelConfig::default()
    }
}

pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        feature_dim: 8,
        content_symbols: 8,
        frames_per_token: 4,
        min_tokens: 4,
        max_tokens: 8,
        n_speech: 8,
        n_text: 8,
        n_paired: 8,
        n_heldout: 8,
        ..SyntheticSpec::default()
    }
}

pub fn build<S: slam_core::tensor::Scalar>(cfg: ModelConfig, seed: u64) -> (SlamModel, ParamStore<S>) {
    let mut store = ParamStore::new();
    let model = SlamModel::new(cfg, &mut store, &mut rng(seed)).expect("model");
    (model, store)
}

pub struct TinyBatches {
    pub speech: SpeechBatch,
    pub text: TextBatch,
    pub paired: PairedBatch,
}

pub fn tiny_batches(n: usize) -> TinyBatches {
    let corpus = gen_synthetic_corpus(&tiny_spec(), 3).expect("corpus");
    let speech: Vec<_> = corpus.speech.iter().take(n).collect();
    let text: Vec<_> = corpus.text.iter().take(n).collect();
    let paired: Vec<_> = corpus.paired.iter().take(n).collect();
    let limits = BatchLimits::default();
    TinyBatches {
        speech: SpeechBatch::from_examples(&speech, limits.max_frames).unwrap(),
        text: TextBatch::from_examples(&text, limits.max_tokens).unwrap(),
        paired: PairedBatch::from_examples(&paired, &limits).unwrap(),
    }
}
