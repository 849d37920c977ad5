//! ROUGE-1, ROUGE-L, token F1 and length buckets.

use eplab::metrics::{bucket_by_length, lcs_len, rouge1, rouge_l, token_f1, ScoreSet, DEFAULT_BUCKET_EDGES};

fn main() {
    let pairs = [
        ("the cat sat", "the cat ran"),
        ("profits rose sharply in march", "profits fell in march"),
        ("a b c d", "d c b a"),
        ("identical text", "identical text"),
    ];
    println!("{:<32} {:<24} {:>7} {:>7} {:>7}", "reference", "candidate", "R-1", "R-L", "F1");
    let mut rows = Vec::new();
    for (r, c) in pairs {
        let s = ScoreSet { rouge1: rouge1(r, c), rouge_l: rouge_l(r, c), f1: token_f1(r, c), semsim: 0.0 };
        println!("{r:<32} {c:<24} {:>7.2} {:>7.2} {:>7.2}", s.rouge1, s.rouge_l, s.f1);
        rows.push((r.split_whitespace().count(), s));
    }
    println!("\nLCS of \"a b c d\" and \"d c b a\": {}", lcs_len(&["a", "b", "c", "d"], &["d", "c", "b", "a"]));
    for b in bucket_by_length(&rows, &DEFAULT_BUCKET_EDGES) {
        if let Some(m) = b.mean {
            println!("bucket {}: {} examples, mean ROUGE-1 {:.2}", b.label(), b.count, m.rouge1);
        }
    }
}
