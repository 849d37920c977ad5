//! A small decoder-only transformer: causal LM training, per-layer hidden
//! states, logit decoding and perplexity.
//!
//! Hidden-state convention: `H^0` is the raw embedding gather (no positional
//! term; positions enter through rotary encoding inside attention), `H^i`
//! for `0 < i < N` is the residual stream after block `i`, and `H^N` is the
//! output of block `N` after the final RMS norm, i.e. exactly what the LM
//! head consumes.

mod block;
mod checkpoint;
mod train;

pub use block::{BlockParams, BlockSpec};
pub use checkpoint::{Checkpoint, Manifest, TensorEntry, FORMAT_VERSION, MAGIC};
pub use train::{finetune, train_clm, TrainConfig, TrainOutcome};

pub(crate) use block::{normal_matrix, BlockVars, TENSORS_PER_BLOCK};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{argmax_rows, Matrix, NumericsError, SeqLayout, Tape, Var};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("layer {layer} out of range (model has {layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("perplexity needs at least 2 tokens, got {0}")]
    TooShort(usize),
    #[error("no usable training examples (need at least 2 tokens each)")]
    EmptyCorpus,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn default_true() -> bool {
    true
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Tie the head to the embedding (`w = Wᵀ`, `b = 0`).
    #[serde(default = "default_true")]
    pub tie_head: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8192,
            hidden_dim: 128,
            layers: 8,
            heads: 4,
            ffn_dim: 512,
            max_seq_len: 128,
            seed: 0,
            tie_head: true,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.validate_shapes()?;
        if self.layers < 2 {
            return Err(ModelError::Config(format!("layers must be >= 2, got {}", self.layers)));
        }
        Ok(())
    }

    /// Shape consistency only; also accepts degenerate depths (0 or 1 layers).
    pub fn validate_shapes(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return err(format!("hidden_dim {} must be divisible by heads {}", self.hidden_dim, self.heads));
        }
        if (self.hidden_dim / self.heads) % 2 != 0 {
            return err("head dimension must be even for rotary encoding".into());
        }
        if self.max_seq_len < 8 {
            return err(format!("max_seq_len must be >= 8, got {}", self.max_seq_len));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 {
            return err("vocab_size and ffn_dim must be positive".into());
        }
        if !(self.norm_eps > 0.0 && self.rope_base > 1.0) {
            return err("norm_eps must be > 0 and rope_base > 1".into());
        }
        Ok(())
    }

    pub(crate) fn block_spec(&self) -> BlockSpec {
        BlockSpec { heads: self.heads, causal: true, rope_base: self.rope_base, norm_eps: self.norm_eps }
    }
}

/// Untied LM head: `logits = H·weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LMParams {
    pub config: LMConfig,
    /// Word embedding `W`, `|V| x d`.
    pub embedding: Matrix,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Matrix,
    /// `None` when the head is tied to `embedding`.
    pub head: Option<LmHead>,
}

/// `H^0..H^N` for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Matrix>,
}

impl HiddenStates {
    pub fn layer(&self, i: usize) -> &Matrix {
        &self.layers[i]
    }

    pub fn last(&self) -> &Matrix {
        self.layers.last().expect("at least H^0")
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Tape handles for the whole model, in [`LMParams::tensors`] order.
pub(crate) struct LmVars {
    pub all: Vec<Var>,
    pub embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub head: Option<(Var, Var)>,
}

impl LMParams {
    /// Random initialisation from `config.seed`.
    pub fn init(config: &LMConfig) -> Result<Self, ModelError> {
        config.validate_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let embedding = normal_matrix(&mut rng, config.vocab_size, d, 0.02);
        let blocks = (0..config.layers).map(|_| BlockParams::init(&mut rng, d, config.ffn_dim, config.layers)).collect();
        let head = (!config.tie_head).then(|| LmHead {
            weight: normal_matrix(&mut rng, d, config.vocab_size, 0.02),
            bias: Matrix::zeros(1, config.vocab_size),
        });
        Ok(Self { config: config.clone(), embedding, blocks, final_norm: Matrix::filled(1, d, 1.0), head })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(BlockParams::names(&format!("blocks.{i}")).into_iter().zip(b.tensors()));
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head.weight".into(), &h.weight));
            out.push(("head.bias".into(), &h.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.head {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        crate::fnv64_f64(self.tensors().iter().flat_map(|(_, m)| m.data().iter().copied()))
    }

    pub(crate) fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> LmVars {
        let all: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, m)| if trainable { tape.param(m) } else { tape.constant_ref(m) })
            .collect();
        let embedding = all[0];
        let nb = self.blocks.len();
        let blocks = (0..nb)
            .map(|i| BlockVars::from_slice(&all[1 + i * TENSORS_PER_BLOCK..1 + (i + 1) * TENSORS_PER_BLOCK]))
            .collect();
        let final_norm = all[1 + nb * TENSORS_PER_BLOCK];
        let head = self.head.as_ref().map(|_| (all[2 + nb * TENSORS_PER_BLOCK], all[3 + nb * TENSORS_PER_BLOCK]));
        LmVars { all, embedding, blocks, final_norm, head }
    }

    pub(crate) fn check_tokens(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong { len: ids.len(), max: self.config.max_seq_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(ModelError::TokenOutOfRange { id, size: self.vocab_size() });
        }
        Ok(())
    }

    /// Runs blocks `from..self.num_layers()` on `x`, pushing every produced
    /// `H^i` (the last one after the final norm). With zero blocks nothing is
    /// produced and `H^0` is the final state.
    pub(crate) fn run_from(
        &self,
        tape: &mut Tape<'_>,
        vars: &LmVars,
        mut x: Var,
        from: usize,
        layout: &SeqLayout,
    ) -> Result<Vec<Var>, ModelError> {
        let spec = self.config.block_spec();
        let n = self.blocks.len();
        let mut out = Vec::with_capacity(n.saturating_sub(from));
        for i in from..n {
            x = vars.blocks[i].forward(tape, x, layout, &spec)?;
            if i + 1 == n {
                x = tape.rms_norm(x, vars.final_norm, self.config.norm_eps)?;
            }
            out.push(x);
        }
        Ok(out)
    }

    pub(crate) fn logits_var(&self, tape: &mut Tape<'_>, vars: &LmVars, h: Var) -> Result<Var, ModelError> {
        Ok(match vars.head {
            None => tape.matmul_t(h, vars.embedding)?,
            Some((w, b)) => {
                let l = tape.matmul(h, w)?;
                tape.add_row(l, b)?
            }
        })
    }

    /// `H^0`: the embedding rows of `tokens`.
    pub fn embed(&self, tokens: &TokenSequence) -> Result<Matrix, ModelError> {
        self.check_tokens(&tokens.ids)?;
        Ok(self.embedding.gather_rows(&tokens.ids_usize())?)
    }

    pub fn forward_hidden(&self, tokens: &TokenSequence) -> Result<HiddenStates, ModelError> {
        let h0 = self.embed(tokens)?;
        let mut layers = vec![h0];
        layers.extend(self.continue_from(0, &layers[0])?);
        Ok(HiddenStates { layers })
    }

    /// Given `H^k`, returns `H^{k+1}..H^N`.
    pub fn continue_from(&self, layer: usize, h: &Matrix) -> Result<Vec<Matrix>, ModelError> {
        if layer > self.num_layers() {
            return Err(ModelError::LayerOutOfRange { layer, layers: self.num_layers() });
        }
        self.check_width(h)?;
        if h.rows() > self.config.max_seq_len {
            return Err(ModelError::TooLong { len: h.rows(), max: self.config.max_seq_len });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant_ref(h);
        let out = self.run_from(&mut tape, &vars, x, layer, &SeqLayout::single(h.rows()))?;
        Ok(out.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    fn check_width(&self, h: &Matrix) -> Result<(), ModelError> {
        if h.cols() != self.hidden_dim() {
            return Err(NumericsError::dims("hidden width", h.shape(), (h.rows(), self.hidden_dim())).into());
        }
        Ok(())
    }

    /// `H·w + b` (or `H·Wᵀ` when tied).
    pub fn logits(&self, h: &Matrix) -> Result<Matrix, ModelError> {
        self.check_width(h)?;
        Ok(match &self.head {
            None => h.matmul_t(&self.embedding)?,
            Some(head) => {
                let mut l = h.matmul(&head.weight)?;
                for r in 0..l.rows() {
                    for (v, b) in l.row_mut(r).iter_mut().zip(head.bias.data()) {
                        *v += b;
                    }
                }
                l
            }
        })
    }

    /// Per-position argmax of the logits, lowest id on ties.
    pub fn lm_decode(&self, h: &Matrix) -> Result<Vec<u32>, ModelError> {
        Ok(argmax_rows(&self.logits(h)?).into_iter().map(|i| i as u32).collect())
    }

    /// Mean next-token NLL under teacher forcing.
    pub fn mean_nll(&self, tokens: &TokenSequence) -> Result<f64, ModelError> {
        self.check_tokens(&tokens.ids)?;
        let h0 = self.embedding.gather_rows(&tokens.ids_usize())?;
        self.mean_nll_from(0, &h0, &tokens.ids)
    }

    /// Mean next-token NLL of `ids` when the forward pass resumes from a
    /// (possibly modified) `H^layer`.
    pub fn mean_nll_from(&self, layer: usize, h: &Matrix, ids: &[u32]) -> Result<f64, ModelError> {
        if ids.len() < 2 {
            return Err(ModelError::TooShort(ids.len()));
        }
        self.check_tokens(ids)?;
        if h.rows() != ids.len() {
            return Err(NumericsError::dims("mean_nll_from", h.shape(), (ids.len(), self.hidden_dim())).into());
        }
        let last = self.continue_from(layer, h)?.pop().unwrap_or_else(|| h.clone());
        let logits = self.logits(&last)?;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let targets: Vec<Option<usize>> =
            (0..ids.len()).map(|t| ids.get(t + 1).map(|&n| n as usize)).collect();
        let loss = tape.cross_entropy(l, &targets)?;
        Ok(tape.value(loss).item())
    }

    pub fn perplexity(&self, tokens: &TokenSequence) -> Result<f64, ModelError> {
        Ok(self.mean_nll(tokens)?.exp())
    }

    /// The first `k` blocks and the embedding, as held by a split-inference
    /// client.
    pub fn prefix(&self, k: usize) -> Result<LMPrefix, ModelError> {
        if k >= self.num_layers() {
            return Err(ModelError::LayerOutOfRange { layer: k, layers: self.num_layers() });
        }
        Ok(LMPrefix { config: self.config.clone(), embedding: self.embedding.clone(), blocks: self.blocks[..k].to_vec() })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, ModelError> {
        Ok(Checkpoint {
            component: "lm".into(),
            config: serde_json::to_value(&self.config)?,
            tensors: self.tensors().into_iter().map(|(n, m)| (n, m.clone())).collect(),
        })
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self, ModelError> {
        ck.expect_component("lm")?;
        let config: LMConfig = serde_json::from_value(ck.config.clone())?;
        config.validate_shapes()?;
        let (v, d, f) = (config.vocab_size, config.hidden_dim, config.ffn_dim);
        let embedding = ck.take("embedding", (v, d))?;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let names = BlockParams::names(&format!("blocks.{i}"));
            let shapes = BlockParams::expected_shapes(d, f);
            let t = names.iter().zip(shapes).map(|(n, s)| ck.take(n, s)).collect::<Result<Vec<_>, _>>()?;
            blocks.push(BlockParams::from_tensors(t));
        }
        let final_norm = ck.take("final_norm", (1, d))?;
        let head = if config.tie_head {
            None
        } else {
            Some(LmHead { weight: ck.take("head.weight", (d, v))?, bias: ck.take("head.bias", (1, v))? })
        };
        if let Some((name, _)) = ck.tensors.first() {
            return Err(ModelError::Checkpoint(format!("unexpected tensor {name}")));
        }
        Ok(Self { config, embedding, blocks, final_norm, head })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Embedding plus blocks `1..=k`: computes `H^k` locally.
#[derive(Clone, Debug)]
pub struct LMPrefix {
    pub config: LMConfig,
    pub embedding: Matrix,
    pub blocks: Vec<BlockParams>,
}

impl LMPrefix {
    pub fn split_layer(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, tokens: &TokenSequence) -> Result<Matrix, ModelError> {
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= self.embedding.rows()) {
            return Err(ModelError::TokenOutOfRange { id, size: self.embedding.rows() });
        }
        let h0 = self.embedding.gather_rows(&tokens.ids_usize())?;
        let spec = self.config.block_spec();
        let layout = SeqLayout::single(h0.rows());
        let params: Vec<&Matrix> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|m| tape.constant_ref(m)).collect();
        let mut x = tape.constant(h0);
        for i in 0..self.blocks.len() {
            let bv = BlockVars::from_slice(&vars[i * TENSORS_PER_BLOCK..(i + 1) * TENSORS_PER_BLOCK]);
            x = bv.forward(&mut tape, x, &layout, &spec)?;
        }
        Ok(tape.value(x).clone())
    }
}
