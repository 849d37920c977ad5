//! Reconstruction scores on a 0..100 scale: ROUGE-1, ROUGE-L (F-measure),
//! bag-of-tokens F1 and an embedding-cosine similarity proxy, plus
//! aggregation by token length.
//!
//! Text scores tokenize by lowercasing and splitting on whitespace,
//! independently of the model tokenizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numerics::cosine;
use crate::tinylm::LMParams;
use crate::tokenizer::Vocab;

pub const DEFAULT_BUCKET_EDGES: [usize; 8] = [8, 16, 32, 64, 128, 256, 512, 1024];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub f1: f64,
    pub semsim: f64,
}

impl ScoreSet {
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a ScoreSet>) -> Option<ScoreSet> {
        let mut acc = ScoreSet::default();
        let mut n = 0usize;
        for s in items {
            acc.rouge1 += s.rouge1;
            acc.rouge_l += s.rouge_l;
            acc.f1 += s.f1;
            acc.semsim += s.semsim;
            n += 1;
        }
        (n > 0).then(|| {
            let k = n as f64;
            ScoreSet { rouge1: acc.rouge1 / k, rouge_l: acc.rouge_l / k, f1: acc.f1 / k, semsim: acc.semsim / k }
        })
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Rouge1 => self.rouge1,
            Metric::RougeL => self.rouge_l,
            Metric::F1 => self.f1,
            Metric::SemSim => self.semsim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rougeL")]
    RougeL,
    #[serde(rename = "f1")]
    F1,
    #[serde(rename = "semsim")]
    SemSim,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Rouge1, Metric::RougeL, Metric::F1, Metric::SemSim];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rouge1 => "ROUGE-1",
            Metric::RougeL => "ROUGE-L",
            Metric::F1 => "F1",
            Metric::SemSim => "SemSim",
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn f_measure(overlap: usize, ref_len: usize, cand_len: usize) -> f64 {
    match (ref_len, cand_len) {
        (0, 0) => 100.0,
        (0, _) | (_, 0) => 0.0,
        _ if overlap == 0 => 0.0,
        _ => {
            let p = overlap as f64 / cand_len as f64;
            let r = overlap as f64 / ref_len as f64;
            200.0 * p * r / (p + r)
        }
    }
}

fn bag_overlap(a: &[String], b: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in a {
        *counts.entry(t).or_default() += 1;
    }
    b.iter()
        .filter(|t| match counts.get_mut(t.as_str()) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count()
}

/// Unigram-overlap F-measure, counting repeated tokens with multiplicity.
pub fn rouge1(reference: &str, candidate: &str) -> f64 {
    let (r, c) = (tokenize(reference), tokenize(candidate));
    f_measure(bag_overlap(&r, &c), r.len(), c.len())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Longest-common-subsequence F-measure.
pub fn rouge_l(reference: &str, candidate: &str) -> f64 {
    let (r, c) = (tokenize(reference), tokenize(candidate));
    f_measure(lcs_len(&r, &c), r.len(), c.len())
}

/// SQuAD-style token F1: harmonic mean of bag precision and recall.
pub fn token_f1(reference: &str, candidate: &str) -> f64 {
    let (r, c) = (tokenize(reference), tokenize(candidate));
    f_measure(bag_overlap(&r, &c), r.len(), c.len())
}

/// Mean of the model's input embedding rows for `text`.
fn mean_embedding(lm: &LMParams, vocab: &Vocab, text: &str) -> Option<Vec<f64>> {
    let ids = vocab.encode(text).ids;
    if ids.is_empty() {
        return None;
    }
    let d = lm.hidden_dim();
    let mut acc = vec![0.0; d];
    for &id in &ids {
        let row = lm.embedding.row((id as usize).min(lm.vocab_size() - 1));
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    let n = ids.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Some(acc)
}

/// `100 · max(0, cos)` between the mean-pooled embeddings of both texts.
pub fn semsim(lm: &LMParams, vocab: &Vocab, reference: &str, candidate: &str) -> f64 {
    let (Some(a), Some(b)) = (mean_embedding(lm, vocab, reference), mean_embedding(lm, vocab, candidate)) else {
        log::warn!("semsim on empty text scores 0");
        return 0.0;
    };
    if vocab.encode(reference).ids == vocab.encode(candidate).ids {
        return 100.0;
    }
    100.0 * cosine(&a, &b).max(0.0)
}

pub fn score_all(lm: &LMParams, vocab: &Vocab, reference: &str, candidate: &str) -> ScoreSet {
    ScoreSet {
        rouge1: rouge1(reference, candidate),
        rouge_l: rouge_l(reference, candidate),
        f1: token_f1(reference, candidate),
        semsim: semsim(lm, vocab, reference, candidate),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Inclusive lower bound (0 for the first bucket, which excludes 0 itself).
    pub lo: usize,
    /// Exclusive upper bound; `None` for the open-ended last bucket.
    pub hi: Option<usize>,
    pub count: usize,
    /// `None` marks an empty bucket.
    pub mean: Option<ScoreSet>,
}

impl Bucket {
    pub fn label(&self) -> String {
        match (self.lo, self.hi) {
            (0, Some(hi)) => format!("(0,{hi})"),
            (lo, Some(hi)) => format!("[{lo},{hi})"),
            (lo, None) => format!("[{lo},inf)"),
        }
    }
}

/// Groups `(token_length, scores)` pairs into `(0,e0) [e0,e1) ... [e_last,inf)`.
/// Length 0 falls in no bucket.
pub fn bucket_by_length(results: &[(usize, ScoreSet)], edges: &[usize]) -> Vec<Bucket> {
    let mut bounds = vec![0];
    bounds.extend_from_slice(edges);
    (0..bounds.len())
        .map(|i| {
            let lo = bounds[i];
            let hi = bounds.get(i + 1).copied();
            let members: Vec<&ScoreSet> = results
                .iter()
                .filter(|(len, _)| *len > 0 && *len >= lo && hi.map_or(true, |h| *len < h))
                .map(|(_, s)| s)
                .collect();
            Bucket { lo, hi, count: members.len(), mean: ScoreSet::mean(members) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::tinylm::LMConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 0.01
    }

    #[test]
    fn rouge1_fixtures() {
        assert_eq!(rouge1("the cat sat", "the cat sat"), 100.0);
        assert_eq!(rouge1("the cat sat", "a dog ran"), 0.0);
        assert!(close(rouge1("the cat sat", "the cat ran"), 66.67));
        assert_eq!(rouge1("", ""), 100.0);
        assert_eq!(rouge1("", "x"), 0.0);
        assert_eq!(rouge1("x", ""), 0.0);
        // multiplicity: one "the" in the candidate matches only once
        assert!(close(rouge1("the the cat", "the cat"), 80.0));
    }

    #[test]
    fn rouge_l_fixtures() {
        assert_eq!(rouge_l("a b c", "a b c"), 100.0);
        assert!(close(rouge_l("the cat sat", "cat the sat"), 66.67));
    }

    #[test]
    fn f1_fixtures() {
        assert_eq!(token_f1("a b c d", "a b c d"), 100.0);
        assert!(close(token_f1("a b c d", "c"), 40.0));
        assert_eq!(token_f1("a b c d", "d c b a"), 100.0);
        assert_eq!(token_f1("a b c", "c a x"), token_f1("a b c", "x c a"));
    }

    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
            if sub.len() <= best {
                continue;
            }
            let mut it = b.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn lcs_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let la = rng.gen_range(0..=12);
            let lb = rng.gen_range(0..=12);
            let a: Vec<u8> = (0..la).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.gen_range(0..4)).collect();
            assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b), "{a:?} {b:?}");
        }
    }

    fn fixture_lm() -> (LMParams, Vocab) {
        let vocab = Vocab::build(&["stock share price banana"], 264).unwrap();
        let cfg = LMConfig { vocab_size: 264, hidden_dim: 4, layers: 0, heads: 1, ffn_dim: 4, max_seq_len: 8, ..Default::default() };
        let mut lm = LMParams::init(&cfg).unwrap();
        let mut w = Matrix::zeros(264, 4);
        // stock and share point almost the same way, banana is orthogonal
        for (word, row) in [("stock", [1.0, 0.0, 0.0, 0.0]), ("share", [0.9, 0.1, 0.0, 0.0]), ("banana", [0.0, 0.0, 1.0, 0.0]), ("price", [0.0, 1.0, 0.0, 0.0])] {
            w.row_mut(vocab.id(word).unwrap() as usize).copy_from_slice(&row);
        }
        lm.embedding = w;
        (lm, vocab)
    }

    #[test]
    fn semsim_fixtures() {
        let (lm, vocab) = fixture_lm();
        assert_eq!(semsim(&lm, &vocab, "stock price", "stock price"), 100.0);
        assert_eq!(semsim(&lm, &vocab, "stock", "banana"), 0.0);
        assert!(semsim(&lm, &vocab, "stock", "share") > semsim(&lm, &vocab, "stock", "banana"));
        assert_eq!(semsim(&lm, &vocab, "", "stock"), 0.0);
    }

    #[test]
    fn buckets_are_half_open() {
        let s = |v: f64| ScoreSet { rouge1: v, rouge_l: v, f1: v, semsim: v };
        let b = bucket_by_length(&[(10, s(50.0))], &DEFAULT_BUCKET_EDGES);
        let hits: Vec<_> = b.iter().filter(|b| b.count > 0).collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].label(), "[8,16)");
        let b = bucket_by_length(&[(8, s(1.0)), (7, s(2.0))], &DEFAULT_BUCKET_EDGES);
        assert_eq!(b[0].label(), "(0,8)");
        assert_eq!(b[0].mean.unwrap().rouge1, 2.0);
        assert_eq!(b[1].mean.unwrap().rouge1, 1.0);
        assert!(b[2].mean.is_none());
        let b = bucket_by_length(&[(20, s(30.0)), (25, s(60.0))], &DEFAULT_BUCKET_EDGES);
        assert_eq!(b[2].mean.unwrap().f1, 45.0);
        assert_eq!(b[2].count, 2);
    }

    proptest! {
        #[test]
        fn bounded_and_case_insensitive(
            a in prop::collection::vec(prop::sample::select(vec!["a", "B", "c", "Dd", "e"]), 0..10),
            b in prop::collection::vec(prop::sample::select(vec!["A", "b", "x", "dd"]), 0..10),
        ) {
            let (ra, rb) = (a.join(" "), b.join(" "));
            for f in [rouge1, rouge_l, token_f1] {
                let v = f(&ra, &rb);
                prop_assert!((0.0..=100.0).contains(&v));
                prop_assert_eq!(v, f(&format!("  {}  ", ra.to_uppercase()), &rb.to_lowercase()));
                prop_assert_eq!(f(&ra, &ra), 100.0);
            }
            prop_assert_eq!(rouge_l(&ra, &ra), rouge1(&ra, &ra));
        }
    }
}
