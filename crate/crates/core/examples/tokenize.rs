//! Word-level vocabulary with byte fallback: build, encode, decode, save.

use eplab::harness::synthetic_corpus;
use eplab::tokenizer::Vocab;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synthetic_corpus(500, 1);
    let vocab = Vocab::build(&corpus, 400)?;
    println!("vocabulary: {} tokens", vocab.len());

    let text = "Shares of Zyxtrel jumped 4.5% on Tuesday";
    let seq = vocab.encode(text);
    let pieces: Vec<String> = seq
        .ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("?").to_string())
        .collect();
    // words outside the vocabulary fall back to byte tokens
    println!("{text:?}\n -> {:?}\n -> {}", seq.ids, pieces.join(" "));
    println!("decoded: {:?}", vocab.decode(&seq.ids)?);

    let path = std::env::temp_dir().join("eplab-example-vocab.json");
    vocab.save(&path)?;
    assert_eq!(Vocab::load(&path)?.encode(text), seq);
    println!("saved and reloaded {}", path.display());
    Ok(())
}
