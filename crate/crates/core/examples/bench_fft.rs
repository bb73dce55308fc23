use posegen::fourier::*;
use posegen::tensor::{Tape, Tensor};
use std::time::Instant;

fn main() {
    let d = 64usize;
    let (h, w) = (16usize, 12usize);
    let map: Vec<f64> = (0..d * h * w).map(|i| ((i % 13) as f64 - 6.0) * 0.05).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let params = FftBlockParams::init(d, true, &mut rng);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![d, h, w], map.clone()).unwrap());
    let t = Instant::now();
    for _ in 0..10 {
        let _ = tape.rfft2(x).unwrap();
    }
    println!("rfft2 [64,16,12] x10: {:.1?}", t.elapsed());

    let spec = tape.rfft2(x).unwrap();
    let t = Instant::now();
    for _ in 0..10 {
        let _ = tape.irfft2(spec, w).unwrap();
    }
    println!("irfft2 x10: {:.1?}", t.elapsed());
    println!("spec shape: {:?}", tape.value(spec).shape());

    let v = params.vars(&mut tape);
    let t = Instant::now();
    for _ in 0..10 {
        let _ = fft_block(&mut tape, x, &v, false).unwrap();
    }
    println!("fft_block x10: {:.1?}", t.elapsed());

    // 1x1 conv on the spectrum shape alone
    let sv = tape.value(spec).clone();
    let sc = sv.shape()[0];
    let s2 = tape.constant(sv);
    let t = Instant::now();
    for _ in 0..10 {
        let _ = tape.conv2d(s2, v.w1, v.b1, 1).unwrap();
    }
    println!("1x1 conv {}ch on spectrum x10: {:.1?}", sc, t.elapsed());

    // backward through one fft_block
    let mut t5 = Tape::new();
    let xv = t5.leaf(Tensor::new(vec![d, h, w], map).unwrap());
    let v5 = params.vars(&mut t5);
    let y = fft_block(&mut t5, xv, &v5, false).unwrap();
    let m = t5.mean(y).unwrap();
    let t = Instant::now();
    t5.backward(m).unwrap();
    println!("fft_block backward: {:.1?}", t.elapsed());
}
