//! Trains the toy LM on a synthetic corpus and reports held-out perplexity.

mod common;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let fx = common::small_lm(epochs);
    let ppl: Vec<f64> = fx.test.iter().filter(|s| s.len() >= 2).map(|s| fx.lm.perplexity(s).unwrap()).collect();
    println!("vocabulary {} tokens, {} train / {} test examples", fx.vocab.len(), fx.train.len(), fx.test.len());
    println!("mean held-out perplexity {:.2}", ppl.iter().sum::<f64>() / ppl.len() as f64);

    let path = std::env::temp_dir().join("eplab-example-lm.ckpt");
    fx.lm.save(&path)?;
    let back = eplab::tinylm::LMParams::load(&path)?;
    assert_eq!(back.checksum(), fx.lm.checksum());
    println!("checkpoint {} ({:016x})", path.display(), back.checksum());
    Ok(())
}
