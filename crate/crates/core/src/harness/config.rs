use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attacks::{EPConfig, Method};
use crate::metrics::Metric;
use crate::tinylm::{LMConfig, LMParams, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Training corpus (text lines or JSONL); the synthetic generator is used
    /// when absent.
    pub train: Option<PathBuf>,
    /// Explicit test corpus; otherwise `split_fraction` of `train` is held out.
    pub test: Option<PathBuf>,
    /// Further held-out corpora evaluated by the EP experiment.
    pub extra_test: Vec<PathBuf>,
    pub synthetic_lines: usize,
    pub synthetic_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { train: None, test: None, extra_test: Vec::new(), synthetic_lines: 3000, synthetic_seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParrotSettings {
    /// Attacked layer; the deepest layer when absent.
    pub target_layer: Option<usize>,
    pub parrot_dim: usize,
    pub parrot_layers: usize,
    pub parrot_heads: usize,
    pub ffn_dim: Option<usize>,
    pub ppl_weight: f64,
    pub causal: bool,
    pub seed: u64,
}

impl Default for ParrotSettings {
    fn default() -> Self {
        Self {
            target_layer: None,
            parrot_dim: 256,
            parrot_layers: 4,
            parrot_heads: 4,
            ffn_dim: None,
            ppl_weight: 0.0,
            causal: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub enabled: bool,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    /// Per-example matrix choice is seeded with `choice_seed + example index`.
    pub choice_seed: u64,
    /// Layers at which the transform is applied; layer 0 and the parrot's
    /// target layer when absent.
    pub layers: Option<Vec<usize>>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self { enabled: true, k: 4, seed: 0, choice_seed: 0, layers: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub split_fraction: f64,
    /// Seed of the shuffle-then-split step.
    pub seed: u64,
    pub lm: LMConfig,
    pub lm_train: TrainConfig,
    pub ep: ParrotSettings,
    pub ep_train: TrainConfig,
    pub defense: DefenseConfig,
    pub finetune: TrainConfig,
    /// Metrics shown in summary tables (rows always carry all of them).
    pub metrics: Vec<Metric>,
    /// Methods run by the sweep.
    pub methods: Vec<Method>,
    /// Layers swept; every layer `0..=N` when absent.
    pub sweep_layers: Option<Vec<usize>>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            split_fraction: 0.2,
            seed: 0,
            lm: LMConfig::default(),
            lm_train: TrainConfig { epochs: 8, lr: 3e-3, batch_size: 16, seed: 0, grad_clip: 1.0, max_steps: None },
            ep: ParrotSettings::default(),
            ep_train: TrainConfig { epochs: 10, lr: 1e-3, batch_size: 16, seed: 0, grad_clip: 1.0, max_steps: None },
            defense: DefenseConfig::default(),
            finetune: TrainConfig { epochs: 3, lr: 1e-3, batch_size: 16, seed: 0, grad_clip: 1.0, max_steps: None },
            metrics: Metric::ALL.to_vec(),
            methods: vec![Method::Bei, Method::Hei],
            sweep_layers: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Sets every seed in the config from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.lm.seed = seed;
        self.lm_train.seed = seed;
        self.ep.seed = seed;
        self.ep_train.seed = seed;
        self.defense.seed = seed;
        self.defense.choice_seed = seed;
        self.finetune.seed = seed;
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return err(format!("split_fraction must be in (0, 1), got {}", self.split_fraction));
        }
        self.lm.validate()?;
        for p in self.corpus.train.iter().chain(&self.corpus.test).chain(&self.corpus.extra_test) {
            if !p.exists() {
                return err(format!("corpus file {} does not exist", p.display()));
            }
        }
        if self.corpus.train.is_none() && self.corpus.synthetic_lines < 10 {
            return err("synthetic corpus needs at least 10 lines".into());
        }
        if self.corpus.train.is_none() && self.corpus.test.is_some() {
            return err("an explicit test corpus requires an explicit train corpus".into());
        }
        let n = self.lm.layers;
        for &l in self.sweep_layers.iter().flatten().chain(self.defense.layers.iter().flatten()) {
            if l > n {
                return err(format!("layer {l} exceeds model depth {n}"));
            }
        }
        if let Some(t) = self.ep.target_layer {
            if t > n {
                return err(format!("parrot target layer {t} exceeds model depth {n}"));
            }
        }
        if self.defense.k == 0 || self.defense.k >= self.lm.hidden_dim {
            return err(format!("defense K must be in 1..{}", self.lm.hidden_dim));
        }
        if self.metrics.is_empty() || self.methods.is_empty() {
            return err("metrics and methods must be non-empty".into());
        }
        Ok(())
    }

    pub fn target_layer(&self) -> usize {
        self.ep.target_layer.unwrap_or(self.lm.layers)
    }

    pub fn sweep_layers(&self) -> Vec<usize> {
        self.sweep_layers.clone().unwrap_or_else(|| (0..=self.lm.layers).collect())
    }

    pub fn defense_layers(&self) -> Vec<usize> {
        self.defense.layers.clone().unwrap_or_else(|| {
            let t = self.target_layer();
            if t == 0 {
                vec![0]
            } else {
                vec![0, t]
            }
        })
    }

    pub fn ep_config(&self, lm: &LMParams) -> EPConfig {
        EPConfig {
            target_layer: self.target_layer(),
            target_dim: lm.hidden_dim(),
            parrot_dim: self.ep.parrot_dim,
            parrot_layers: self.ep.parrot_layers,
            parrot_heads: self.ep.parrot_heads,
            ffn_dim: self.ep.ffn_dim,
            ppl_weight: self.ep.ppl_weight,
            causal: self.ep.causal,
            max_seq_len: lm.config.max_seq_len,
            seed: self.ep.seed,
        }
    }

    /// FNV-1a of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        format!("{:016x}", crate::fnv64(value.to_string().as_bytes()))
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.out_dir.join("artifacts")
    }
}
