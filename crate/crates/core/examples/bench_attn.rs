use posegen::attention::*;
use posegen::tensor::{Tape, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let d = 64; let n = 192;
    let params = TransformerModuleParams::init(d, 2, true, &mut rng).unwrap();

    let data: Vec<f64> = (0..n*d).map(|i| ((i % 13) as f64 - 6.0) * 0.05).collect();
    let map: Vec<f64> = (0..d*16*12).map(|i| ((i % 13) as f64 - 6.0) * 0.05).collect();

    // one full module
    let mut tape = Tape::new();
    let v = params.vars(&mut tape);
    let fr = tape.constant(Tensor::new(vec![d, 16, 12], map.clone()).unwrap());
    let ft = tape.constant(Tensor::new(vec![d, 16, 12], map.clone()).unwrap());
    let sr = TokenSequence::from_map(&mut tape, fr).unwrap();
    let st = TokenSequence::from_map(&mut tape, ft).unwrap();
    let t = Instant::now();
    let _ = transformer_stack(&mut tape, &sr, &st, std::slice::from_ref(&v), 1e-5).unwrap();
    println!("one transformer module fwd: {:.1?} ({} nodes)", t.elapsed(), tape.len());

    // mhsa alone
    let mut t2 = Tape::new();
    let v2 = params.vars(&mut t2);
    let x = t2.constant(Tensor::new(vec![n, d], data.clone()).unwrap());
    let t = Instant::now();
    let _ = mha(&mut t2, x, x, x, &v2.mhsa).unwrap();
    println!("mhsa fwd: {:.1?}", t.elapsed());

    // instance norm alone on [64,16,12]
    let mut t3 = Tape::new();
    let m = t3.constant(Tensor::new(vec![d, 16, 12], map.clone()).unwrap());
    let t = Instant::now();
    for _ in 0..10 { let _ = t3.instance_norm(m, 1e-5).unwrap(); }
    println!("instance_norm x10: {:.1?}", t.elapsed());

    // layer-norm-ish / softmax on [192,192]
    let big: Vec<f64> = (0..n*n).map(|i| ((i % 13) as f64 - 6.0) * 0.05).collect();
    let mut t4 = Tape::new();
    let s = t4.constant(Tensor::new(vec![n, n], big).unwrap());
    let t = Instant::now();
    for _ in 0..10 { let _ = t4.softmax_rows(s).unwrap(); }
    println!("softmax_rows [192x192] x10: {:.1?}", t.elapsed());

    // matmul via tape [192x64]@[64x192]
    let a = t4.constant(Tensor::new(vec![n, d], data.clone()).unwrap());
    let bt = t4.constant(Tensor::new(vec![d, n], (0..d*n).map(|i| (i%7) as f64 * 0.1).collect()).unwrap());
    let t = Instant::now();
    for _ in 0..10 { let _ = t4.matmul(a, bt).unwrap(); }
    println!("tape matmul [192x64x192] x10: {:.1?}", t.elapsed());
}
// appended: fft block timing
