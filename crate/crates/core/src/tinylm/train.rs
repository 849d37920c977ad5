use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LMParams, ModelError};
use crate::numerics::{clip_global_norm, Adam, SeqLayout, Tape};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 4, lr: 3e-3, batch_size: 16, seed: 0, grad_clip: 1.0, max_steps: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Token-weighted mean loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }
}

/// Causal LM training with Adam. Sequences are truncated to `max_seq_len`;
/// sequences shorter than 2 tokens carry no next-token target and are
/// skipped.
pub fn train_clm(
    params: &mut LMParams,
    corpus: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(ModelError::Config(format!("learning rate must be finite and >= 0, got {}", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let max = params.config.max_seq_len;
    let examples: Vec<&[u32]> =
        corpus.iter().map(|s| &s.ids[..s.len().min(max)]).filter(|ids| ids.len() >= 2).collect();
    if examples.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    for ids in &examples {
        params.check_tokens(ids)?;
    }

    let mut adam = Adam::new(params.tensors().iter().map(|(_, m)| m.shape()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut out = TrainOutcome::default();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut token_count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| out.steps() >= m) {
                break 'epochs;
            }
            let seqs: Vec<&[u32]> = batch.iter().map(|&i| examples[i]).collect();
            let (loss, targets, mut grads) = batch_gradients(params, &seqs)?;
            if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut grads, cfg.grad_clip);
            }
            adam.step(&mut params.tensors_mut(), &grads, cfg.lr)?;
            out.step_losses.push(loss);
            loss_sum += loss * targets as f64;
            token_count += targets;
        }
        let mean = loss_sum / token_count.max(1) as f64;
        log::info!("epoch {} mean loss {mean:.4}", epoch + 1);
        out.epoch_losses.push(mean);
    }
    Ok(out)
}

/// Loss, number of target tokens and per-tensor gradients for one packed
/// batch.
fn batch_gradients(
    params: &LMParams,
    seqs: &[&[u32]],
) -> Result<(f64, usize, Vec<crate::numerics::Matrix>), ModelError> {
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let layout = SeqLayout::from_lengths(&lengths);
    let mut ids = Vec::with_capacity(layout.total_rows());
    let mut targets = Vec::with_capacity(layout.total_rows());
    for s in seqs {
        ids.extend(s.iter().map(|&t| t as usize));
        targets.extend((0..s.len()).map(|t| s.get(t + 1).map(|&n| n as usize)));
    }
    let count = targets.iter().flatten().count();

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let x = tape.gather(vars.embedding, &ids)?;
    let h = params.run_from(&mut tape, &vars, x, 0, &layout)?.pop().unwrap_or(x);
    let logits = params.logits_var(&mut tape, &vars, h)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss)?;
    Ok((value, count, vars.all.iter().map(|&v| g.take(v)).collect()))
}

/// Plain full fine-tuning: [`train_clm`] from the given weights.
pub fn finetune(
    params: &LMParams,
    corpus: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<(LMParams, TrainOutcome), ModelError> {
    let mut tuned = params.clone();
    if cfg.epochs == 0 {
        return Ok((tuned, TrainOutcome::default()));
    }
    let outcome = train_clm(&mut tuned, corpus, cfg)?;
    Ok((tuned, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::LMConfig;
    use rand::Rng;

    fn config(seed: u64) -> LMConfig {
        LMConfig {
            vocab_size: 64,
            hidden_dim: 16,
            layers: 2,
            heads: 2,
            ffn_dim: 32,
            max_seq_len: 16,
            seed,
            ..LMConfig::default()
        }
    }

    fn seq(ids: Vec<u32>) -> TokenSequence {
        TokenSequence { ids, source: String::new() }
    }

    /// Sentences from a small template language over ids 10..64.
    fn corpus(n: usize, seed: u64) -> Vec<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let subj = rng.gen_range(10..20);
                let verb = rng.gen_range(20..30);
                let len = rng.gen_range(3..8);
                let mut ids = vec![subj, verb];
                ids.extend((0..len).map(|i| 30 + ((subj + verb + i) % 34)));
                seq(ids)
            })
            .collect()
    }

    #[test]
    fn memorizes_a_repeated_sentence() {
        let mut p = LMParams::init(&config(3)).unwrap();
        let sentence = seq(vec![12, 40, 41, 17, 55, 23, 9, 60]);
        let data = vec![sentence.clone(); 8];
        let cfg = TrainConfig { epochs: 200, lr: 1e-2, batch_size: 8, max_steps: Some(200), ..Default::default() };
        let out = train_clm(&mut p, &data, &cfg).unwrap();
        assert!(out.steps() <= 200);
        let best = out.step_losses.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(best < 0.1, "best loss {best}");
        assert!(p.perplexity(&sentence).unwrap() < 1.2);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut p = LMParams::init(&config(1)).unwrap();
        let before = p.clone();
        let cfg = TrainConfig { epochs: 3, lr: 0.0, ..Default::default() };
        let out = train_clm(&mut p, &corpus(40, 1), &cfg).unwrap();
        assert_eq!(p, before);
        for l in &out.epoch_losses {
            assert!((l - out.epoch_losses[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_loss_is_near_log_vocab() {
        let mut p = LMParams::init(&config(5)).unwrap();
        let cfg = TrainConfig { epochs: 1, max_steps: Some(1), ..Default::default() };
        let out = train_clm(&mut p, &corpus(16, 2), &cfg).unwrap();
        let ln_v = (64f64).ln();
        assert!((out.step_losses[0] - ln_v).abs() < 0.05 * ln_v, "{}", out.step_losses[0]);
    }

    #[test]
    fn loss_decreases_across_seeds() {
        for seed in 0..20 {
            let mut p = LMParams::init(&config(seed)).unwrap();
            let cfg = TrainConfig { epochs: 2, seed, ..Default::default() };
            let out = train_clm(&mut p, &corpus(100, seed), &cfg).unwrap();
            assert!(out.epoch_losses[1] < out.epoch_losses[0], "seed {seed}: {:?}", out.epoch_losses);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut p = LMParams::init(&config(2)).unwrap();
            let out = train_clm(&mut p, &corpus(30, 4), &TrainConfig { epochs: 1, ..Default::default() }).unwrap();
            (p.checksum(), out)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let mut p = LMParams::init(&config(0)).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(train_clm(&mut p, &[], &cfg), Err(ModelError::EmptyCorpus)));
        assert!(matches!(train_clm(&mut p, &[seq(vec![5])], &cfg), Err(ModelError::EmptyCorpus)));
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let p = LMParams::init(&config(0)).unwrap();
        let (q, out) = finetune(&p, &corpus(10, 0), &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(p, q);
        assert!(out.step_losses.is_empty());
    }

    #[test]
    fn finetune_on_held_out_split_lowers_its_loss() {
        let mut p = LMParams::init(&config(7)).unwrap();
        train_clm(&mut p, &corpus(100, 7), &TrainConfig { epochs: 2, ..Default::default() }).unwrap();
        let held_out = corpus(100, 99);
        let (_, out) = finetune(&p, &held_out, &TrainConfig { epochs: 3, seed: 1, ..Default::default() }).unwrap();
        assert!(out.epoch_losses[1] < out.epoch_losses[0] && out.epoch_losses[2] < out.epoch_losses[1]);
    }
}
