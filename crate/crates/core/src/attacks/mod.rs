//! Inversion attacks that recover input tokens from hidden states: head
//! decoding (BEI), nearest-embedding search by cosine (HEI), and the learned
//! Embed Parrot that maps deep states back to layer-0 embeddings.

mod parrot;
mod sweep;

pub use parrot::{ep_invert, train_parrot, EPConfig, EPParams, ParrotOutcome};
pub use sweep::{invert, layer_sweep, AttackResult, LayerScores, Method};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{argmax_rows, Matrix, NumericsError};
use crate::tinylm::{LMParams, ModelError};
use crate::tokenizer::{TokenizerError, Vocab, UNK};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("hidden width {got} does not match model width {expected}")]
    Width { got: usize, expected: usize },
    #[error("layer {layer} out of range (model has {layers} layers)")]
    BadLayer { layer: usize, layers: usize },
    #[error("parrot targets layer {expected}, got states from layer {got}")]
    LayerMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid parrot config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Final decoder applied to (restored) hidden states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decoder {
    #[serde(rename = "BEI")]
    Bei,
    #[default]
    #[serde(rename = "HEI")]
    Hei,
}

/// Recovered token ids plus any per-position warnings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inversion {
    pub ids: Vec<u32>,
    pub warnings: Vec<String>,
}

impl Inversion {
    pub fn text(&self, vocab: &Vocab) -> Result<String, AttackError> {
        Ok(vocab.decode(&self.ids)?)
    }
}

fn check_width(lm: &LMParams, h: &Matrix) -> Result<(), AttackError> {
    if h.cols() != lm.hidden_dim() {
        return Err(AttackError::Width { got: h.cols(), expected: lm.hidden_dim() });
    }
    Ok(())
}

/// Decodes `h` through the model's LM head (argmax of the logits; the
/// softmax in between does not change the argmax).
pub fn bei(lm: &LMParams, h: &Matrix) -> Result<Inversion, AttackError> {
    check_width(lm, h)?;
    Ok(Inversion { ids: lm.lm_decode(h)?, warnings: Vec::new() })
}

/// Row-normalised embedding table for repeated HEI queries.
#[derive(Clone, Debug)]
pub struct HeiIndex {
    unit: Matrix,
}

impl HeiIndex {
    pub fn new(lm: &LMParams) -> Self {
        let mut unit = lm.embedding.clone();
        for r in 0..unit.rows() {
            let row = unit.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Self { unit }
    }

    /// For each row of `h`, the vocabulary id whose embedding has the largest
    /// cosine similarity with it (lowest id on ties). Zero rows map to
    /// `<unk>` with a warning.
    pub fn invert(&self, h: &Matrix) -> Result<Inversion, AttackError> {
        if h.cols() != self.unit.cols() {
            return Err(AttackError::Width { got: h.cols(), expected: self.unit.cols() });
        }
        let scores = h.matmul_t(&self.unit)?;
        let mut ids: Vec<u32> = argmax_rows(&scores).into_iter().map(|i| i as u32).collect();
        let mut warnings = Vec::new();
        for (t, id) in ids.iter_mut().enumerate() {
            if h.row(t).iter().all(|&v| v == 0.0) {
                *id = UNK;
                warnings.push(format!("position {t}: zero hidden state decoded as <unk>"));
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(Inversion { ids, warnings })
    }
}

/// Nearest embedding row by cosine similarity, per position.
pub fn hei(lm: &LMParams, h: &Matrix) -> Result<Inversion, AttackError> {
    check_width(lm, h)?;
    HeiIndex::new(lm).invert(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, softmax_rows};
    use crate::tinylm::LMConfig;
    use crate::tokenizer::TokenSequence;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(vocab: usize) -> LMConfig {
        LMConfig { vocab_size: vocab, hidden_dim: 16, layers: 2, heads: 2, ffn_dim: 32, max_seq_len: 32, seed: 4, ..Default::default() }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence { ids: ids.to_vec(), source: String::new() }
    }

    fn orthonormal_lm() -> LMParams {
        let mut lm = LMParams::init(&config(16)).unwrap();
        lm.embedding = Matrix::identity(16);
        lm
    }

    #[test]
    fn bei_on_orthonormal_fixture_recovers_input() {
        let lm = orthonormal_lm();
        let x = [4u32, 9, 9, 0, 15];
        let h0 = lm.embed(&seq(&x)).unwrap();
        assert_eq!(bei(&lm, &h0).unwrap().ids, x);
        assert_eq!(hei(&lm, &h0).unwrap().ids, x);
    }

    #[test]
    fn bei_zero_states_decode_to_id_zero() {
        let lm = LMParams::init(&config(50)).unwrap();
        assert_eq!(bei(&lm, &Matrix::zeros(3, 16)).unwrap().ids, vec![0, 0, 0]);
        assert!(matches!(bei(&lm, &Matrix::zeros(3, 15)), Err(AttackError::Width { .. })));
    }

    #[test]
    fn bei_argmax_equals_softmax_argmax_and_ignores_positive_scale() {
        let lm = LMParams::init(&config(80)).unwrap();
        let h = lm.forward_hidden(&seq(&[3, 7, 11, 19, 40])).unwrap();
        for layer in &h.layers {
            let ids = bei(&lm, layer).unwrap().ids;
            let via_softmax: Vec<u32> =
                argmax_rows(&softmax_rows(&lm.logits(layer).unwrap())).into_iter().map(|i| i as u32).collect();
            assert_eq!(ids, via_softmax);
            assert_eq!(bei(&lm, &layer.scale(2.5)).unwrap().ids, ids);
        }
    }

    #[test]
    fn hei_zero_row_is_unk_with_warning() {
        let lm = LMParams::init(&config(50)).unwrap();
        let mut h = lm.embed(&seq(&[5, 6])).unwrap();
        h.row_mut(1).iter_mut().for_each(|v| *v = 0.0);
        let inv = hei(&lm, &h).unwrap();
        assert_eq!(inv.ids, vec![5, UNK]);
        assert_eq!(inv.warnings.len(), 1);
    }

    #[test]
    fn hei_perturbed_row_matches_brute_force_nearest() {
        let lm = LMParams::init(&config(200)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let index = HeiIndex::new(&lm);
        for _ in 0..200 {
            let k = rng.gen_range(0..200);
            let mut row = lm.embedding.row(k).to_vec();
            row.iter_mut().for_each(|v| *v += rng.gen_range(-0.01..0.01));
            let brute = (0..200)
                .map(|j| (j, cosine(&row, lm.embedding.row(j))))
                .fold((0, f64::NEG_INFINITY), |best, (j, c)| if c > best.1 { (j, c) } else { best });
            let got = index.invert(&Matrix::from_vec(1, 16, row).unwrap()).unwrap().ids[0] as usize;
            assert_eq!(got, brute.0);
            if brute.0 == k {
                assert_eq!(got, k);
            }
        }
    }

    #[test]
    fn bei_equals_hei_at_layer_zero_on_fixture() {
        let lm = orthonormal_lm();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let ids: Vec<u32> = (0..10).map(|_| rng.gen_range(0..16)).collect();
            let h0 = lm.embed(&seq(&ids)).unwrap();
            assert_eq!(bei(&lm, &h0).unwrap(), hei(&lm, &h0).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn hei_is_exact_at_layer_zero(ids in prop::collection::vec(0u32..300, 1..32), scale in 0.01f64..100.0) {
            let lm = LMParams::init(&config(300)).unwrap();
            let h0 = lm.embed(&seq(&ids)).unwrap();
            prop_assert_eq!(&hei(&lm, &h0).unwrap().ids, &ids);
            prop_assert_eq!(&hei(&lm, &h0.scale(scale)).unwrap().ids, &ids);
        }

        #[test]
        fn hei_ignores_per_row_positive_scale(ids in prop::collection::vec(0u32..300, 1..16), seed in 0u64..1000) {
            let lm = LMParams::init(&config(300)).unwrap();
            let h = lm.forward_hidden(&seq(&ids)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = h.last();
            let mut scaled = layer.clone();
            for r in 0..scaled.rows() {
                let f = rng.gen_range(0.1..10.0);
                scaled.row_mut(r).iter_mut().for_each(|v| *v *= f);
            }
            prop_assert_eq!(hei(&lm, layer).unwrap().ids, hei(&lm, &scaled).unwrap().ids);
        }
    }
}
