use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bei, ep_invert, AttackError, Decoder, EPParams, HeiIndex, Inversion};
use crate::metrics::{score_all, ScoreSet};
use crate::numerics::Matrix;
use crate::tinylm::LMParams;
use crate::tokenizer::{TokenSequence, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BEI")]
    Bei,
    #[serde(rename = "HEI")]
    Hei,
    #[serde(rename = "EP+BEI")]
    EpBei,
    #[serde(rename = "EP+HEI")]
    EpHei,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bei, Method::Hei, Method::EpBei, Method::EpHei];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bei => "BEI",
            Method::Hei => "HEI",
            Method::EpBei => "EP+BEI",
            Method::EpHei => "EP+HEI",
        }
    }

    pub fn uses_parrot(self) -> bool {
        matches!(self, Method::EpBei | Method::EpHei)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bei" => Ok(Method::Bei),
            "hei" => Ok(Method::Hei),
            "ep" | "ep+hei" => Ok(Method::EpHei),
            "ep+bei" => Ok(Method::EpBei),
            other => Err(format!("unknown method {other:?} (expected bei, hei, ep, ep+bei or ep+hei)")),
        }
    }
}

/// One reconstructed example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub original: String,
    pub reconstruction: String,
    pub method: Method,
    pub layer: usize,
    /// Length of the original in model tokens.
    pub token_len: usize,
    pub scores: ScoreSet,
}

/// Mean scores of one method at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer: usize,
    pub method: Method,
    pub count: usize,
    pub mean: ScoreSet,
}

/// Runs `method` on states `h` taken from `layer`.
pub fn invert(
    lm: &LMParams,
    index: &HeiIndex,
    method: Method,
    h: &Matrix,
    layer: usize,
    ep: Option<&EPParams>,
) -> Result<Inversion, AttackError> {
    match method {
        Method::Bei => bei(lm, h),
        Method::Hei => index.invert(h),
        Method::EpBei | Method::EpHei => {
            let ep = ep.ok_or_else(|| AttackError::Config(format!("{method} needs a trained parrot")))?;
            if method == Method::EpBei {
                ep_invert(lm, ep, h, layer, Decoder::Bei)
            } else {
                if layer != ep.config.target_layer {
                    return Err(AttackError::LayerMismatch { expected: ep.config.target_layer, got: layer });
                }
                index.invert(&ep.forward(h)?)
            }
        }
    }
}

/// Scores `method` at every requested layer over `dataset`. Returns
/// per-layer means (in the order of `layers`) and every individual result,
/// grouped by layer with examples in dataset order.
pub fn layer_sweep(
    lm: &LMParams,
    vocab: &Vocab,
    method: Method,
    dataset: &[TokenSequence],
    layers: &[usize],
    ep: Option<&EPParams>,
) -> Result<(Vec<LayerScores>, Vec<AttackResult>), AttackError> {
    if dataset.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    if let Some(&bad) = layers.iter().find(|&&l| l > lm.num_layers()) {
        return Err(AttackError::BadLayer { layer: bad, layers: lm.num_layers() });
    }
    let index = HeiIndex::new(lm);
    let per_example: Vec<Vec<AttackResult>> = dataset
        .par_iter()
        .map(|seq| {
            let hs = lm.forward_hidden(seq)?;
            let original = vocab.decode(&seq.ids)?;
            layers
                .iter()
                .map(|&layer| {
                    let inv = invert(lm, &index, method, hs.layer(layer), layer, ep)?;
                    let reconstruction = inv.text(vocab)?;
                    let scores = score_all(lm, vocab, &original, &reconstruction);
                    Ok(AttackResult { original: original.clone(), reconstruction, method, layer, token_len: seq.len(), scores })
                })
                .collect()
        })
        .collect::<Result<_, AttackError>>()?;

    let mut rows = Vec::with_capacity(layers.len() * dataset.len());
    let mut summary = Vec::with_capacity(layers.len());
    for (li, &layer) in layers.iter().enumerate() {
        let start = rows.len();
        rows.extend(per_example.iter().map(|r| r[li].clone()));
        let mean = ScoreSet::mean(rows[start..].iter().map(|r| &r.scores)).unwrap_or_default();
        summary.push(LayerScores { layer, method, count: dataset.len(), mean });
    }
    Ok((summary, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::LMConfig;

    fn setup() -> (LMParams, Vocab, Vec<TokenSequence>) {
        let lines = ["alpha beta gamma", "delta alpha epsilon zeta", "eta theta beta alpha iota"];
        let vocab = Vocab::build(&lines, 300).unwrap();
        let cfg = LMConfig { vocab_size: vocab.len(), hidden_dim: 16, layers: 3, heads: 2, ffn_dim: 32, max_seq_len: 16, ..Default::default() };
        let lm = LMParams::init(&cfg).unwrap();
        let data = lines.iter().map(|l| vocab.encode(l)).collect();
        (lm, vocab, data)
    }

    #[test]
    fn hei_sweep_is_exact_at_layer_zero_and_has_one_row_per_layer() {
        let (lm, vocab, data) = setup();
        let (summary, rows) = layer_sweep(&lm, &vocab, Method::Hei, &data, &[0, 1, 3], None).unwrap();
        assert_eq!(summary.len(), 3);
        assert_eq!(rows.len(), 9);
        assert_eq!(summary[0].mean.rouge1, 100.0);
        assert_eq!(summary[0].mean.f1, 100.0);
        assert_eq!(summary.iter().map(|s| s.layer).collect::<Vec<_>>(), vec![0, 1, 3]);
    }

    #[test]
    fn sweep_errors() {
        let (lm, vocab, data) = setup();
        assert!(matches!(layer_sweep(&lm, &vocab, Method::Hei, &[], &[0], None), Err(AttackError::EmptyDataset)));
        assert!(matches!(layer_sweep(&lm, &vocab, Method::Bei, &data, &[4], None), Err(AttackError::BadLayer { .. })));
        assert!(layer_sweep(&lm, &vocab, Method::EpHei, &data, &[1], None).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert_eq!("ep".parse::<Method>().unwrap(), Method::EpHei);
    }
}
