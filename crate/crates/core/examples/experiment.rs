//! The full harness on a reduced config: vocabulary, LM, sweep, parrot,
//! defense and fine-tuning, with reports written under a temp directory.

use eplab::harness::{self, ExperimentConfig};
use eplab::tinylm::{LMConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("eplab-example-run");
    let mut cfg = ExperimentConfig {
        lm: LMConfig { hidden_dim: 32, layers: 2, heads: 2, ffn_dim: 64, max_seq_len: 48, ..Default::default() },
        out_dir: out.clone(),
        ..Default::default()
    };
    cfg.corpus.synthetic_lines = 300;
    cfg.lm_train = TrainConfig { epochs: 2, ..cfg.lm_train };
    cfg.ep.parrot_dim = 32;
    cfg.ep.parrot_layers = 1;
    cfg.ep_train = TrainConfig { epochs: 2, ..cfg.ep_train };
    cfg.finetune = TrainConfig { epochs: 1, ..cfg.finetune };
    cfg.set_seed(3);

    harness::build_vocab(&cfg)?;
    harness::train_lm(&cfg)?;
    harness::run_sweep(&cfg)?;
    harness::train_parrot_stage(&cfg)?;
    harness::run_ep_experiment(&cfg)?;
    let defense = harness::run_defense_experiment(&cfg)?;
    harness::run_finetune_experiment(&cfg)?;

    println!("{}", harness::render_summary(&defense.rows, Some(&defense.header), &cfg.metrics));
    println!("reports under {}", out.display());
    Ok(())
}
