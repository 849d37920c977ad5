//! BEI and HEI ROUGE-1 at every layer over the held-out split.

mod common;

use eplab::attacks::{layer_sweep, Method};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = common::small_lm(3);
    let layers: Vec<usize> = (0..=fx.lm.num_layers()).collect();
    println!("{:>5} {:>8} {:>8}", "layer", "BEI", "HEI");
    let (b, _) = layer_sweep(&fx.lm, &fx.vocab, Method::Bei, &fx.test, &layers, None)?;
    let (h, _) = layer_sweep(&fx.lm, &fx.vocab, Method::Hei, &fx.test, &layers, None)?;
    for (b, h) in b.iter().zip(&h) {
        println!("{:>5} {:>8.2} {:>8.2}", b.layer, b.mean.rouge1, h.mean.rouge1);
    }
    Ok(())
}
