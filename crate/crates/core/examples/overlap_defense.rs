//! The overlap-matrix defense: construction, what it does to HEI at layer 0
//! and what it costs in perplexity.

mod common;

use eplab::attacks::HeiIndex;
use eplab::defense::{apply_defense, build_overlap_set, OverlapMatrixSet};
use eplab::metrics::rouge1;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tiny = OverlapMatrixSet::from_permutation(1, vec![2, 0, 3, 1])?;
    println!("d=4, K=1, permutation [2, 0, 3, 1]; O_1 =\n{:?}\n", tiny.matrices[0]);

    let fx = common::small_lm(3);
    let set = build_overlap_set(fx.lm.hidden_dim(), 4, 11)?;
    println!("K={} blocks of sizes {:?}", set.k, set.partition.iter().map(Vec::len).collect::<Vec<_>>());
    let index = HeiIndex::new(&fx.lm);
    let (mut plain, mut defended, mut ppl0, mut ppl1) = (0.0, 0.0, 0.0, 0.0);
    let n = fx.test.len().min(60);
    for (i, seq) in fx.test.iter().take(n).enumerate() {
        let text = fx.vocab.decode(&seq.ids)?;
        let h0 = fx.lm.embed(seq)?;
        let d0 = apply_defense(&h0, &set, i as u64)?;
        plain += rouge1(&text, &index.invert(&h0)?.text(&fx.vocab)?);
        defended += rouge1(&text, &index.invert(&d0)?.text(&fx.vocab)?);
        ppl0 += fx.lm.mean_nll_from(0, &h0, &seq.ids)?.exp();
        ppl1 += fx.lm.mean_nll_from(0, &d0, &seq.ids)?.exp();
    }
    let k = n as f64;
    println!("HEI ROUGE-1 at layer 0: {:.2} without defense, {:.2} with", plain / k, defended / k);
    println!("perplexity: {:.2} without defense, {:.2} with", ppl0 / k, ppl1 / k);
    Ok(())
}
