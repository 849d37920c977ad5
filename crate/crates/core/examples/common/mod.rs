//! A small LM trained on the synthetic corpus, shared by the examples.

#![allow(dead_code)]

use eplab::harness::{encode_all, shuffle_split, synthetic_corpus};
use eplab::tinylm::{train_clm, LMConfig, LMParams, TrainConfig};
use eplab::tokenizer::{TokenSequence, Vocab};

pub struct Fixture {
    pub vocab: Vocab,
    pub lm: LMParams,
    pub train: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
}

/// d=64, 4 layers; about half a minute of training per epoch on one core.
pub fn small_lm(epochs: usize) -> Fixture {
    let (train_lines, test_lines) = shuffle_split(synthetic_corpus(1200, 7), 0.2, 0);
    let vocab = Vocab::build(&train_lines, 1024).expect("vocabulary");
    let cfg = LMConfig {
        vocab_size: vocab.len(),
        hidden_dim: 64,
        layers: 4,
        heads: 4,
        ffn_dim: 256,
        max_seq_len: 64,
        seed: 1,
        ..Default::default()
    };
    let (train, _) = encode_all(&vocab, &train_lines, cfg.max_seq_len);
    let (test, _) = encode_all(&vocab, &test_lines, cfg.max_seq_len);
    let mut lm = LMParams::init(&cfg).expect("config");
    let tc = TrainConfig { epochs, lr: 3e-3, ..Default::default() };
    let out = train_clm(&mut lm, &train, &tc).expect("training");
    if let Some(l) = out.epoch_losses.last() {
        eprintln!("trained {epochs} epochs, final loss {l:.3}");
    }
    Fixture { vocab, lm, train, test }
}
