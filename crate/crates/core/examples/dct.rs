//! Orthonormal DCT-II along rows: round trip, energy preservation and
//! compaction of smooth signals.

use eplab::numerics::{dct_rows, idct_rows, Matrix};

fn main() {
    let d = 64;
    let smooth: Vec<f64> = (0..d).map(|i| (i as f64 / d as f64 * 3.0).sin() + 0.2).collect();
    let x = Matrix::from_vec(1, d, smooth).unwrap();
    let c = dct_rows(&x);
    let back = idct_rows(&c);
    println!("round-trip max error {:.2e}", back.max_abs_diff(&x));

    let energy = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>();
    println!("energy: signal {:.6}, coefficients {:.6}", energy(&x), energy(&c));
    let head: f64 = c.data()[..8].iter().map(|v| v * v).sum();
    println!("first 8 of {d} coefficients hold {:.2}% of the energy", 100.0 * head / energy(&c));

    // Dropping the high band barely changes a smooth signal.
    let mut low = c.clone();
    for v in &mut low.data_mut()[8..] {
        *v = 0.0;
    }
    println!("low-pass reconstruction error {:.3e}", idct_rows(&low).max_abs_diff(&x));
}
