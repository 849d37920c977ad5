//! Reads a sentence back out of every layer: the LM head (BEI) and the
//! nearest input embedding (HEI).

mod common;

use eplab::attacks::{bei, HeiIndex};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = common::small_lm(3);
    let text = fx.vocab.decode(&fx.test[0].ids)?;
    let hs = fx.lm.forward_hidden(&fx.test[0])?;
    let index = HeiIndex::new(&fx.lm);
    println!("input: {text}\n");
    for layer in 0..hs.num_layers() {
        let h = hs.layer(layer);
        println!("layer {layer}");
        println!("  BEI: {}", bei(&fx.lm, h)?.text(&fx.vocab)?);
        println!("  HEI: {}", index.invert(h)?.text(&fx.vocab)?);
    }
    Ok(())
}
