//! Embed Parrot: input adapter, a small transformer stack and an output
//! adapter, trained to map `H^i` of a frozen LM back to its `H^0`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bei, AttackError, Decoder, HeiIndex, Inversion};
use crate::numerics::{clip_global_norm, Adam, Matrix, SeqLayout, Tape, Var};
use crate::tinylm::{
    normal_matrix, BlockParams, BlockSpec, BlockVars, Checkpoint, LMParams, ModelError, TrainConfig,
    TENSORS_PER_BLOCK,
};
use crate::tokenizer::TokenSequence;

fn default_parrot_dim() -> usize {
    256
}
fn default_parrot_layers() -> usize {
    4
}
fn default_parrot_heads() -> usize {
    4
}
fn default_max_seq_len() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EPConfig {
    /// Layer whose states the parrot consumes. `0` is accepted as a sanity
    /// mode in which input and target coincide.
    pub target_layer: usize,
    pub target_dim: usize,
    #[serde(default = "default_parrot_dim")]
    pub parrot_dim: usize,
    #[serde(default = "default_parrot_layers")]
    pub parrot_layers: usize,
    #[serde(default = "default_parrot_heads")]
    pub parrot_heads: usize,
    /// Defaults to `4 · parrot_dim`.
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    /// Weight of the reported perplexity term.
    #[serde(default)]
    pub ppl_weight: f64,
    /// Causal attention in the parrot stack (full attention by default).
    #[serde(default)]
    pub causal: bool,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EPConfig {
    /// Defaults for attacking `lm` at `layer`.
    pub fn for_model(lm: &LMParams, layer: usize) -> Self {
        Self {
            target_layer: layer,
            target_dim: lm.hidden_dim(),
            parrot_dim: default_parrot_dim(),
            parrot_layers: default_parrot_layers(),
            parrot_heads: default_parrot_heads(),
            ffn_dim: None,
            ppl_weight: 0.0,
            causal: false,
            max_seq_len: lm.config.max_seq_len,
            seed: 0,
        }
    }

    pub fn ffn(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.parrot_dim)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let err = |m: String| Err(AttackError::Config(m));
        if self.parrot_dim < 8 {
            return err(format!("parrot_dim must be >= 8, got {}", self.parrot_dim));
        }
        if self.parrot_heads == 0 || self.parrot_dim % self.parrot_heads != 0 || (self.parrot_dim / self.parrot_heads) % 2 != 0
        {
            return err("parrot_dim must split into an even head dimension".into());
        }
        if !(self.ppl_weight.is_finite() && self.ppl_weight >= 0.0) {
            return err(format!("ppl_weight must be finite and >= 0, got {}", self.ppl_weight));
        }
        if self.target_dim == 0 || self.max_seq_len == 0 {
            return err("target_dim and max_seq_len must be positive".into());
        }
        Ok(())
    }

    fn validate_for(&self, lm: &LMParams) -> Result<(), AttackError> {
        self.validate()?;
        if self.target_layer > lm.num_layers() {
            return Err(AttackError::BadLayer { layer: self.target_layer, layers: lm.num_layers() });
        }
        if self.target_dim != lm.hidden_dim() {
            return Err(AttackError::Width { got: self.target_dim, expected: lm.hidden_dim() });
        }
        Ok(())
    }

    fn block_spec(&self) -> BlockSpec {
        BlockSpec { heads: self.parrot_heads, causal: self.causal, rope_base: 10000.0, norm_eps: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EPParams {
    pub config: EPConfig,
    pub input_w: Matrix,
    pub input_b: Matrix,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Matrix,
    pub output_w: Matrix,
    pub output_b: Matrix,
}

struct EpVars {
    all: Vec<Var>,
}

impl EPParams {
    pub fn init(config: &EPConfig) -> Result<Self, AttackError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, p) = (config.target_dim, config.parrot_dim);
        let input_w = normal_matrix(&mut rng, d, p, 1.0 / (d as f64).sqrt());
        let blocks = (0..config.parrot_layers)
            .map(|_| BlockParams::init(&mut rng, p, config.ffn(), config.parrot_layers))
            .collect();
        let output_w = normal_matrix(&mut rng, p, d, 1.0 / (p as f64).sqrt());
        Ok(Self {
            config: config.clone(),
            input_w,
            input_b: Matrix::zeros(1, p),
            blocks,
            final_norm: Matrix::filled(1, p, 1.0),
            output_w,
            output_b: Matrix::zeros(1, d),
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("input.weight".to_string(), &self.input_w), ("input.bias".to_string(), &self.input_b)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(BlockParams::names(&format!("blocks.{i}")).into_iter().zip(b.tensors()));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("output.weight".into(), &self.output_w));
        out.push(("output.bias".into(), &self.output_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.input_w, &mut self.input_b];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.final_norm, &mut self.output_w, &mut self.output_b]);
        out
    }

    fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> EpVars {
        let all = self
            .tensors()
            .into_iter()
            .map(|(_, m)| if trainable { tape.param(m) } else { tape.constant_ref(m) })
            .collect();
        EpVars { all }
    }

    fn run(&self, tape: &mut Tape<'_>, vars: &EpVars, x: Var, layout: &SeqLayout) -> Result<Var, AttackError> {
        let v = &vars.all;
        let spec = self.config.block_spec();
        let mut h = tape.matmul(x, v[0])?;
        h = tape.add_row(h, v[1])?;
        for i in 0..self.blocks.len() {
            let bv = BlockVars::from_slice(&v[2 + i * TENSORS_PER_BLOCK..2 + (i + 1) * TENSORS_PER_BLOCK]);
            h = bv.forward(tape, h, layout, &spec)?;
        }
        let base = 2 + self.blocks.len() * TENSORS_PER_BLOCK;
        h = tape.rms_norm(h, v[base], spec.norm_eps)?;
        h = tape.matmul(h, v[base + 1])?;
        Ok(tape.add_row(h, v[base + 2])?)
    }

    /// Restored `Ĥ^0` for one sequence of states.
    pub fn forward(&self, h: &Matrix) -> Result<Matrix, AttackError> {
        if h.cols() != self.config.target_dim {
            return Err(AttackError::Width { got: h.cols(), expected: self.config.target_dim });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant_ref(h);
        let out = self.run(&mut tape, &vars, x, &SeqLayout::single(h.rows()))?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, AttackError> {
        Ok(Checkpoint {
            component: "parrot".into(),
            config: serde_json::to_value(&self.config).map_err(ModelError::from)?,
            tensors: self.tensors().into_iter().map(|(n, m)| (n, m.clone())).collect(),
        })
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self, AttackError> {
        ck.expect_component("parrot")?;
        let config: EPConfig = serde_json::from_value(ck.config.clone()).map_err(ModelError::from)?;
        config.validate()?;
        let (d, p, f) = (config.target_dim, config.parrot_dim, config.ffn());
        let input_w = ck.take("input.weight", (d, p))?;
        let input_b = ck.take("input.bias", (1, p))?;
        let mut blocks = Vec::with_capacity(config.parrot_layers);
        for i in 0..config.parrot_layers {
            let names = BlockParams::names(&format!("blocks.{i}"));
            let t = names
                .iter()
                .zip(BlockParams::expected_shapes(p, f))
                .map(|(n, s)| ck.take(n, s))
                .collect::<Result<Vec<_>, _>>()?;
            blocks.push(BlockParams::from_tensors(t));
        }
        let final_norm = ck.take("final_norm", (1, p))?;
        let output_w = ck.take("output.weight", (p, d))?;
        let output_b = ck.take("output.bias", (1, d))?;
        if let Some((name, _)) = ck.tensors.first() {
            return Err(ModelError::Checkpoint(format!("unexpected tensor {name}")).into());
        }
        Ok(Self { config, input_w, input_b, blocks, final_norm, output_w, output_b })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), AttackError> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AttackError> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParrotOutcome {
    /// Reported loss per step: cosine term plus `ppl_weight` times the NLL term.
    pub step_losses: Vec<f64>,
    pub cosine_losses: Vec<f64>,
    /// Mean LM negative log-likelihood of the HEI decode of the restored
    /// states; only computed when `ppl_weight > 0`.
    pub nll_terms: Vec<f64>,
    /// Position-weighted mean cosine loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a parrot against the frozen `lm`. Only the cosine term carries
/// gradient; the perplexity term is scored on the discrete decode and added
/// to the reported loss.
pub fn train_parrot(
    lm: &LMParams,
    config: &EPConfig,
    corpus: &[TokenSequence],
    train: &TrainConfig,
) -> Result<(EPParams, ParrotOutcome), AttackError> {
    config.validate_for(lm)?;
    if train.batch_size == 0 || !(train.lr >= 0.0 && train.lr.is_finite()) {
        return Err(AttackError::Config("batch_size must be positive and lr finite and >= 0".into()));
    }
    let max = lm.config.max_seq_len.min(config.max_seq_len);
    let mut pairs: Vec<(Matrix, Matrix)> = Vec::new();
    for s in corpus.iter().filter(|s| !s.is_empty()) {
        let ids = TokenSequence { ids: s.ids[..s.len().min(max)].to_vec(), source: String::new() };
        let hs = lm.forward_hidden(&ids)?;
        pairs.push((hs.layers[config.target_layer].clone(), hs.layers[0].clone()));
    }
    if pairs.is_empty() {
        return Err(AttackError::EmptyDataset);
    }

    let mut ep = EPParams::init(config)?;
    let index = (config.ppl_weight > 0.0).then(|| HeiIndex::new(lm));
    let mut adam = Adam::new(ep.tensors().iter().map(|(_, m)| m.shape()));
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut out = ParrotOutcome::default();

    'epochs: for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut rows) = (0.0, 0usize);
        for batch in order.chunks(train.batch_size) {
            if train.max_steps.is_some_and(|m| out.step_losses.len() >= m) {
                break 'epochs;
            }
            let inputs: Vec<&Matrix> = batch.iter().map(|&i| &pairs[i].0).collect();
            let targets: Vec<&Matrix> = batch.iter().map(|&i| &pairs[i].1).collect();
            let lengths: Vec<usize> = inputs.iter().map(|m| m.rows()).collect();
            let layout = SeqLayout::from_lengths(&lengths);
            let x = Matrix::vstack(&inputs)?;
            let y = Matrix::vstack(&targets)?;

            let mut tape = Tape::new();
            let vars = ep.bind(&mut tape, true);
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let pred = ep.run(&mut tape, &vars, xv, &layout)?;
            let loss = tape.cosine_loss(pred, yv)?;
            let cos = tape.value(loss).item();
            let nll = match &index {
                Some(index) => Some(batch_nll(lm, index, tape.value(pred), &layout)?),
                None => None,
            };
            let mut g = tape.backward(loss)?;
            let mut grads: Vec<Matrix> = vars.all.iter().map(|&v| g.take(v)).collect();
            drop(tape);
            if train.grad_clip > 0.0 {
                clip_global_norm(&mut grads, train.grad_clip);
            }
            adam.step(&mut ep.tensors_mut(), &grads, train.lr)?;

            out.cosine_losses.push(cos);
            out.step_losses.push(cos + nll.map_or(0.0, |n| config.ppl_weight * n));
            if let Some(n) = nll {
                out.nll_terms.push(n);
            }
            let n_rows = layout.total_rows();
            sum += cos * n_rows as f64;
            rows += n_rows;
        }
        let mean = sum / rows.max(1) as f64;
        log::info!("parrot epoch {} cosine loss {mean:.4}", epoch + 1);
        out.epoch_losses.push(mean);
    }
    Ok((ep, out))
}

fn batch_nll(lm: &LMParams, index: &HeiIndex, pred: &Matrix, layout: &SeqLayout) -> Result<f64, AttackError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for &(start, len) in layout.segments() {
        if len < 2 {
            continue;
        }
        let ids = index.invert(&pred.slice_rows(start, start + len))?.ids;
        total += lm.mean_nll(&TokenSequence { ids, source: String::new() })?;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Restores `Ĥ^0` from `h` (states of `layer`) and decodes it.
pub fn ep_invert(
    lm: &LMParams,
    ep: &EPParams,
    h: &Matrix,
    layer: usize,
    decoder: Decoder,
) -> Result<Inversion, AttackError> {
    if layer != ep.config.target_layer {
        return Err(AttackError::LayerMismatch { expected: ep.config.target_layer, got: layer });
    }
    let restored = ep.forward(h)?;
    match decoder {
        Decoder::Bei => bei(lm, &restored),
        Decoder::Hei => HeiIndex::new(lm).invert(&restored),
    }
}
