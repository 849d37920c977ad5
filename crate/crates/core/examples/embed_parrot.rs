//! Trains an Embed Parrot on the deepest layer and compares EP+HEI with
//! plain HEI there.

mod common;

use eplab::attacks::{layer_sweep, train_parrot, EPConfig, Method};
use eplab::tinylm::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = common::small_lm(3);
    let layer = fx.lm.num_layers();
    let cfg = EPConfig { parrot_dim: 128, parrot_layers: 2, ..EPConfig::for_model(&fx.lm, layer) };
    let tc = TrainConfig { epochs: 4, lr: 1e-3, ..Default::default() };
    let (ep, out) = train_parrot(&fx.lm, &cfg, &fx.train, &tc)?;
    for (i, l) in out.epoch_losses.iter().enumerate() {
        println!("epoch {} cosine loss {l:.4}", i + 1);
    }
    for m in [Method::Hei, Method::EpHei] {
        let (scores, results) = layer_sweep(&fx.lm, &fx.vocab, m, &fx.test, &[layer], Some(&ep))?;
        println!("{:>7} at layer {layer}: ROUGE-1 {:.2}", m.as_str(), scores[0].mean.rouge1);
        println!("        e.g. {:?}", results[0].reconstruction);
    }
    Ok(())
}
