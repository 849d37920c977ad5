//! Frequency-domain obfuscation of hidden states with binary overlap
//! matrices.
//!
//! A random permutation of `0..d` is cut into `K` contiguous, near-equal
//! blocks. For a block `v = (v_0, …, v_m)`, the matrix `M` gets ones at
//! `(v_j, v_j)` and `(v_j, v_{j+1})` for every `j < m`; the last index of
//! the block gets no entry at all, so its coefficient is dropped. The overlap
//! matrix is `O = Mᵀ`. A hidden-state matrix `E` (n×d) is transformed as
//! `idct_rows(dct_rows(E) · O)` with one of the `K` matrices chosen by seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dct_rows, idct_rows, Matrix, NumericsError};

const FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("subset count K={k} must be in 1..={max} for d={d}")]
    BadK { k: usize, d: usize, max: usize },
    #[error("invalid permutation: {0}")]
    BadPermutation(String),
    #[error("overlap set checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed overlap set file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMatrixSet {
    pub d: usize,
    pub k: usize,
    /// `None` when the permutation was supplied directly.
    pub seed: Option<u64>,
    pub permutation: Vec<usize>,
    pub partition: Vec<Vec<usize>>,
    /// The `O_i = M_iᵀ`, entries in {0, 1}.
    pub matrices: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
struct OverlapFile {
    version: u32,
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    seed: Option<u64>,
    permutation: Vec<usize>,
    partition: Vec<Vec<usize>>,
    checksum: u64,
}

/// Splits `perm` into `k` contiguous blocks whose sizes differ by at most one
/// (the first `len % k` blocks are one longer).
fn split_blocks(perm: &[usize], k: usize) -> Vec<Vec<usize>> {
    let (base, extra) = (perm.len() / k, perm.len() % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(perm[start..start + len].to_vec());
        start += len;
    }
    out
}

/// `M` for one block, before transposition.
fn link_matrix(d: usize, block: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    for w in block.windows(2) {
        m.set(w[0], w[0], 1.0);
        m.set(w[0], w[1], 1.0);
    }
    m
}

fn check_k(d: usize, k: usize) -> Result<(), DefenseError> {
    let max = d.saturating_sub(1);
    if k == 0 || k > max {
        return Err(DefenseError::BadK { k, d, max });
    }
    Ok(())
}

/// Seeded construction of `K` overlap matrices for dimension `d`.
pub fn build_overlap_set(d: usize, k: usize, seed: u64) -> Result<OverlapMatrixSet, DefenseError> {
    check_k(d, k)?;
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut set = OverlapMatrixSet::from_permutation(k, perm)?;
    set.seed = Some(seed);
    Ok(set)
}

impl OverlapMatrixSet {
    /// Builds the set from an explicit permutation of `0..d`.
    pub fn from_permutation(k: usize, permutation: Vec<usize>) -> Result<Self, DefenseError> {
        let d = permutation.len();
        check_k(d, k)?;
        let mut seen = vec![false; d];
        for &p in &permutation {
            if p >= d || std::mem::replace(&mut seen[p], true) {
                return Err(DefenseError::BadPermutation(format!("{permutation:?} is not a bijection on 0..{d}")));
            }
        }
        let partition = split_blocks(&permutation, k);
        let matrices = partition.iter().map(|b| link_matrix(d, b).transpose()).collect();
        Ok(Self { d, k, seed: None, permutation, partition, matrices })
    }

    /// FNV-1a over the matrices' entries as bytes, in order.
    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self.matrices.iter().flat_map(|m| m.data().iter().map(|&v| v as u8)).collect();
        crate::fnv64(&bytes)
    }

    /// Index of the matrix picked by `choice_seed`, uniform over `0..K`.
    pub fn choose(&self, choice_seed: u64) -> usize {
        ChaCha8Rng::seed_from_u64(choice_seed).gen_range(0..self.k)
    }

    pub fn to_json(&self) -> Result<String, DefenseError> {
        let file = OverlapFile {
            version: FILE_VERSION,
            d: self.d,
            k: self.k,
            seed: self.seed,
            permutation: self.permutation.clone(),
            partition: self.partition.clone(),
            checksum: self.checksum(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses a saved set, regenerating the matrices and verifying them
    /// against the stored checksum (and against the seed, when present).
    pub fn from_json(text: &str) -> Result<Self, DefenseError> {
        let file: OverlapFile = serde_json::from_str(text)?;
        if file.version != FILE_VERSION {
            return Err(DefenseError::Malformed(format!("unsupported version {}", file.version)));
        }
        if file.permutation.len() != file.d {
            return Err(DefenseError::Malformed("permutation length differs from d".into()));
        }
        let mut set = Self::from_permutation(file.k, file.permutation)?;
        set.seed = file.seed;
        let computed = set.checksum();
        if computed != file.checksum {
            return Err(DefenseError::Checksum { stored: file.checksum, computed });
        }
        if set.partition != file.partition {
            return Err(DefenseError::Malformed("partition does not match permutation".into()));
        }
        if let Some(seed) = file.seed {
            let regenerated = build_overlap_set(set.d, set.k, seed)?.checksum();
            if regenerated != file.checksum {
                return Err(DefenseError::Checksum { stored: file.checksum, computed: regenerated });
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), DefenseError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DefenseError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `idct_rows(dct_rows(e) · o)` for an explicit `o` (d×d).
pub fn apply_with_matrix(e: &Matrix, o: &Matrix) -> Result<Matrix, DefenseError> {
    if o.rows() != e.cols() || o.cols() != e.cols() {
        return Err(NumericsError::dims("apply_defense", e.shape(), o.shape()).into());
    }
    Ok(idct_rows(&dct_rows(e).matmul(o)?))
}

/// Transforms `e` with the overlap matrix selected by `choice_seed`.
pub fn apply_defense(e: &Matrix, set: &OverlapMatrixSet, choice_seed: u64) -> Result<Matrix, DefenseError> {
    if e.cols() != set.d {
        return Err(NumericsError::dims("apply_defense", e.shape(), (set.d, set.d)).into());
    }
    apply_with_matrix(e, &set.matrices[set.choose(choice_seed)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn ones(m: &Matrix) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                if m.get(r, c) != 0.0 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    #[test]
    fn four_dim_fixture_by_hand() {
        let set = OverlapMatrixSet::from_permutation(1, vec![2, 0, 3, 1]).unwrap();
        let m = set.matrices[0].transpose();
        let mut expected = vec![(2, 2), (2, 0), (0, 0), (0, 3), (3, 3), (3, 1)];
        expected.sort();
        assert_eq!(ones(&m), expected);
        assert!(set.matrices[0].data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn four_dim_one_hot_transform_by_hand() {
        let set = OverlapMatrixSet::from_permutation(1, vec![2, 0, 3, 1]).unwrap();
        let n = 4usize;
        let s = |k: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for hot in 0..4 {
            let mut x = [0.0; 4];
            x[hot] = 1.0;
            let c: Vec<f64> = (0..n).map(|k| s(k) * (PI * (2 * hot + 1) as f64 * k as f64 / (2 * n) as f64).cos()).collect();
            // (c·O)_j = sum over unit entries (j, i) of M of c_i
            let routed = [c[0] + c[3], 0.0, c[2] + c[0], c[3] + c[1]];
            let want: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|k| s(k) * routed[k] * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()).sum())
                .collect();
            let got = apply_defense(&Matrix::from_vec(1, 4, x.to_vec()).unwrap(), &set, 0).unwrap();
            for i in 0..n {
                assert!((got.get(0, i) - want[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn structure_and_determinism() {
        for (d, k) in [(16, 1), (16, 3), (33, 4), (128, 4), (10, 9)] {
            let a = build_overlap_set(d, k, 7).unwrap();
            assert_eq!(a, build_overlap_set(d, k, 7).unwrap());
            assert_eq!(a.partition.iter().map(Vec::len).sum::<usize>(), d);
            let sizes: Vec<usize> = a.partition.iter().map(Vec::len).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for (o, block) in a.matrices.iter().zip(&a.partition) {
                let m = o.transpose();
                for r in 0..d {
                    assert!(o.row(r).iter().filter(|&&v| v != 0.0).count() <= 2);
                    assert!(m.row(r).iter().filter(|&&v| v != 0.0).count() <= 2);
                }
                let last = *block.last().unwrap();
                assert!(m.row(last).iter().all(|&v| v == 0.0));
            }
        }
        assert_ne!(build_overlap_set(16, 2, 1).unwrap(), build_overlap_set(16, 2, 2).unwrap());
    }

    #[test]
    fn k_range_checked() {
        assert!(matches!(build_overlap_set(4, 0, 0), Err(DefenseError::BadK { .. })));
        assert!(matches!(build_overlap_set(4, 4, 0), Err(DefenseError::BadK { .. })));
        assert!(build_overlap_set(4, 3, 0).is_ok());
        assert!(OverlapMatrixSet::from_permutation(1, vec![0, 0, 1]).is_err());
    }

    #[test]
    fn identity_and_zero_injection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random(&mut rng, 5, 32);
        assert!(apply_with_matrix(&e, &Matrix::identity(32)).unwrap().max_abs_diff(&e) < 1e-9);
        let z = apply_with_matrix(&e, &Matrix::zeros(32, 32)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(apply_with_matrix(&e, &Matrix::identity(31)).is_err());
    }

    #[test]
    fn linear_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = build_overlap_set(64, 4, 11).unwrap();
        let (a, b) = (random(&mut rng, 6, 64), random(&mut rng, 6, 64));
        let (alpha, beta) = (1.7, -0.4);
        let combo = a.scale(alpha).add(&b.scale(beta)).unwrap();
        let lhs = apply_defense(&combo, &set, 5).unwrap();
        let rhs = apply_defense(&a, &set, 5).unwrap().scale(alpha).add(&apply_defense(&b, &set, 5).unwrap().scale(beta)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        assert_eq!(apply_defense(&a, &set, 5).unwrap(), apply_defense(&a, &set, 5).unwrap());
    }

    #[test]
    fn destroys_information_at_default_size() {
        let mut failures = 0;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let set = build_overlap_set(128, 4, seed).unwrap();
            let e = random(&mut rng, 8, 128);
            let t = apply_defense(&e, &set, seed).unwrap();
            if t.sub(&e).unwrap().frobenius_norm() / e.frobenius_norm() <= 0.1 {
                failures += 1;
            }
        }
        assert!(failures <= 2, "{failures} near-identity transforms");
    }

    #[test]
    fn choice_covers_all_matrices() {
        let set = build_overlap_set(32, 4, 0).unwrap();
        let mut hit = [false; 4];
        for s in 0..200 {
            hit[set.choose(s)] = true;
        }
        assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn persistence_round_trip_and_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlap.json");
        let set = build_overlap_set(24, 3, 9).unwrap();
        set.save(&path).unwrap();
        let loaded = OverlapMatrixSet::load(&path).unwrap();
        assert_eq!(loaded, set);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = random(&mut rng, 4, 24);
        assert_eq!(apply_defense(&e, &loaded, 2).unwrap(), apply_defense(&e, &set, 2).unwrap());

        let text = set.to_json().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let perm = v["permutation"].as_array_mut().unwrap();
        perm.swap(0, 1);
        let tampered = serde_json::to_string(&v).unwrap();
        assert!(matches!(OverlapMatrixSet::from_json(&tampered), Err(DefenseError::Checksum { .. })));

        let custom = OverlapMatrixSet::from_permutation(1, vec![2, 0, 3, 1]).unwrap();
        assert_eq!(OverlapMatrixSet::from_json(&custom.to_json().unwrap()).unwrap(), custom);
        assert!(OverlapMatrixSet::from_json("{}").is_err());
    }
}
