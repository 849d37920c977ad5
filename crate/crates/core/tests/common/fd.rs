//! Randomized composite graphs touching every tape operation, checked
//! against central finite differences.

use eplab::numerics::{Matrix, SeqLayout, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub struct Case {
    pub params: Vec<Matrix>,
    ids: Vec<usize>,
    targets: Vec<Option<usize>>,
    cos_target: Matrix,
    layout: SeqLayout,
    causal: bool,
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn make_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 7;
    let d = 8;
    let lengths = if seed % 2 == 0 { vec![5] } else { vec![3, 2] };
    let n: usize = lengths.iter().sum();
    let table = random(&mut rng, vocab, d, 1.0);
    let w1 = random(&mut rng, d, d, 0.6);
    let gain = Matrix::from_vec(1, d, (0..d).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    let wq = random(&mut rng, d, d, 0.5);
    let wk = random(&mut rng, d, d, 0.5);
    let wv = random(&mut rng, d, d, 0.5);
    let bias = random(&mut rng, 1, d, 0.3);
    let ids = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
    let targets = (0..n).map(|t| if t % 3 == 2 { None } else { Some(rng.gen_range(0..vocab)) }).collect();
    Case {
        params: vec![table, w1, gain, wq, wk, wv, bias],
        ids,
        targets,
        cos_target: random(&mut rng, n, d, 1.0),
        layout: SeqLayout::from_lengths(&lengths),
        causal: seed % 3 != 0,
    }
}

/// Three stacked stages: embedding + FFN, rotary attention block, tied head.
pub fn build<'a>(tape: &mut Tape<'a>, case: &'a Case, params: &'a [Matrix]) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let [table, w1, gain, wq, wk, wv, bias] = vars[..] else { unreachable!() };
    let x = tape.gather(table, &case.ids).unwrap();
    let h = tape.matmul(x, w1).unwrap();
    let h = tape.gelu(h);
    let h = tape.add_row(h, bias).unwrap();
    let n = tape.rms_norm(h, gain, 1e-6).unwrap();
    let q = tape.matmul(n, wq).unwrap();
    let q = tape.rope(q, 2, &case.layout, 10000.0).unwrap();
    let k = tape.matmul(n, wk).unwrap();
    let k = tape.rope(k, 2, &case.layout, 10000.0).unwrap();
    let v = tape.matmul(n, wv).unwrap();
    let a = tape.attention(q, k, v, 2, &case.layout, case.causal).unwrap();
    let r = tape.add(a, h).unwrap();
    let logits = tape.matmul_t(r, table).unwrap();
    let ce = tape.cross_entropy(logits, &case.targets).unwrap();
    let target = tape.constant_ref(&case.cos_target);
    let cos = tape.cosine_loss(r, target).unwrap();
    let sq = tape.mul(r, r).unwrap();
    let sq = tape.mean(sq);
    let extra = tape.scale(sq, 0.1);
    let total = tape.add(ce, cos).unwrap();
    let total = tape.add(total, extra).unwrap();
    // sum of a 1x1 is the identity, kept to exercise the op
    (tape.sum(total), vars)
}

fn loss_at(case: &Case, params: &[Matrix]) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = build(&mut tape, case, params);
    tape.value(loss).item()
}

pub fn max_relative_error(seed: u64) -> f64 {
    let case = make_case(seed);
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, &case, &case.params);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for idx in 0..case.params[pi].data().len() {
            let mut plus = case.params.clone();
            plus[pi].data_mut()[idx] += H;
            let mut minus = case.params.clone();
            minus[pi].data_mut()[idx] -= H;
            let numeric = (loss_at(&case, &plus) - loss_at(&case, &minus)) / (2.0 * H);
            let a = analytic.data()[idx];
            // relative error with a floor so components that are ~0 are
            // compared absolutely
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}
