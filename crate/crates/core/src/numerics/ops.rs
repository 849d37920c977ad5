use super::{Matrix, NumericsError};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // fully masked row
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Cosine similarity of two vectors; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): exactly 1 for v vs v
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Row-paired cosine similarity. When `b` has a single row it is compared
/// against every row of `a`.
pub fn cosine_rows(a: &Matrix, b: &Matrix) -> Result<Vec<f64>, NumericsError> {
    if a.cols() != b.cols() || (a.rows() != b.rows() && b.rows() != 1) {
        return Err(NumericsError::dims("cosine_rows", a.shape(), b.shape()));
    }
    Ok((0..a.rows())
        .map(|r| {
            let br = if b.rows() == 1 { 0 } else { r };
            cosine(a.row(r), b.row(br))
        })
        .collect())
}

/// Per-row argmax; ties resolve to the lowest column index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
