//! The tape: build a small graph, backpropagate, compare one gradient with a
//! central difference.

use eplab::numerics::{Matrix, Tape};

fn loss(w: &Matrix, x: &Matrix, g: &Matrix) -> f64 {
    let mut tape = Tape::new();
    let (vw, vx, vg) = (tape.param(w), tape.constant_ref(x), tape.param(g));
    let h = tape.matmul(vx, vw).unwrap();
    let h = tape.gelu(h);
    let h = tape.rms_norm(h, vg, 1e-6).unwrap();
    let out = tape.mean(h);
    tape.value(out).item()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.2, -0.3]]);
    let w = Matrix::from_rows(&[[0.1, 0.4], [-0.2, 0.3], [0.7, -0.5]]);
    let g = Matrix::from_rows(&[[1.0, 0.8]]);

    let mut tape = Tape::new();
    let (vw, vx, vg) = (tape.param(&w), tape.constant_ref(&x), tape.param(&g));
    let h = tape.matmul(vx, vw)?;
    let h = tape.gelu(h);
    let h = tape.rms_norm(h, vg, 1e-6)?;
    let out = tape.mean(h);
    let grads = tape.backward(out)?;
    println!("loss {:.6}", tape.value(out).item());
    println!("dL/dW =\n{:?}", grads.get(vw));

    let eps = 1e-5;
    for idx in 0..w.data().len() {
        let (mut p, mut m) = (w.clone(), w.clone());
        p.data_mut()[idx] += eps;
        m.data_mut()[idx] -= eps;
        let fd = (loss(&p, &x, &g) - loss(&m, &x, &g)) / (2.0 * eps);
        println!("W[{idx}]  tape {:+.8}  central diff {fd:+.8}", grads.get(vw).data()[idx]);
    }
    Ok(())
}
