use posegen::tensor::{conv_out_len, matmul_raw, Tape, Tensor};
use posegen::tensor::conv2d_raw as conv2d_raw_pub_real;
use std::time::Instant;

fn timeit(label: &str, reps: usize, mut f: impl FnMut()) {
    let t = Instant::now();
    for _ in 0..reps { f(); }
    println!("{label}: {:.2?}/iter", t.elapsed() / reps as u32);
}

fn main() {
    // conv 3->32 k3 s2 on 64x48 (texture encoder stage 1)
    let x: Vec<f64> = (0..3*64*48).map(|i| (i % 7) as f64 * 0.1).collect();
    let w: Vec<f64> = (0..32*3*9).map(|i| (i % 5) as f64 * 0.01).collect();
    let b = vec![0.1; 32];
    let ho = conv_out_len(64, 3, 2); let wo = conv_out_len(48, 3, 2);
    let mut out = vec![0.0; 32*ho*wo];
    timeit("raw conv 3->32 s2 @64x48", 200, || {
        conv2d_raw_pub_real(&x, &w, &b, &mut out, 3, 64, 48, 32, 3, 2);
    });

    // conv 32->64 k3 s2 on 32x24 (texture encoder stage 2)
    let x2: Vec<f64> = (0..32*32*24).map(|i| (i % 7) as f64 * 0.1).collect();
    let w2: Vec<f64> = (0..64*32*9).map(|i| (i % 5) as f64 * 0.01).collect();
    let b2 = vec![0.1; 64];
    let mut out2 = vec![0.0; 64*16*12];
    timeit("raw conv 32->64 s2 @32x24", 200, || {
        conv2d_raw_pub_real(&x2, &w2, &b2, &mut out2, 32, 32, 24, 64, 3, 2);
    });

    // conv 64->32 k3 s1 on 32x24 (decoder stage 1)
    let x3: Vec<f64> = (0..64*32*24).map(|i| (i % 7) as f64 * 0.1).collect();
    let w3: Vec<f64> = (0..32*64*9).map(|i| (i % 5) as f64 * 0.01).collect();
    let b3 = vec![0.1; 32];
    let mut out3 = vec![0.0; 32*32*24];
    timeit("raw conv 64->32 s1 @32x24", 200, || {
        conv2d_raw_pub_real(&x3, &w3, &b3, &mut out3, 64, 32, 24, 32, 3, 1);
    });

    // conv 32->16 s1 @64x48 (decoder stage 2)
    let x4: Vec<f64> = (0..32*64*48).map(|i| (i % 7) as f64 * 0.1).collect();
    let w4: Vec<f64> = (0..16*32*9).map(|i| (i % 5) as f64 * 0.01).collect();
    let b4 = vec![0.1; 16];
    let mut out4 = vec![0.0; 16*64*48];
    timeit("raw conv 32->16 s1 @64x48", 200, || {
        conv2d_raw_pub_real(&x4, &w4, &b4, &mut out4, 32, 64, 48, 16, 3, 1);
    });

    // matmul 192x64 @ 64x192
    let a: Vec<f64> = (0..192*64).map(|i| (i%9) as f64 * 0.1).collect();
    let bm: Vec<f64> = (0..64*192).map(|i| (i%9) as f64 * 0.1).collect();
    let mut c = vec![0.0; 192*192];
    timeit("raw matmul 192x64x192", 200, || { c.fill(0.0); matmul_raw(&a, &bm, &mut c, 192, 64, 192); });

    // tape overhead: tiny ops
    timeit("tape: 1000 scalar adds", 100, || {
        let mut t = Tape::new();
        let mut v = t.scalar(1.0);
        for _ in 0..1000 { let w = t.scalar(2.0); v = t.add(v, w).unwrap(); }
    });

    // full tape conv op (incl alloc)
    let xt = Tensor::new(vec![32, 32, 24], x2.clone()).unwrap();
    let wt2 = Tensor::new(vec![64, 32, 3, 3], w2.clone()).unwrap();
    let bt2 = Tensor::new(vec![64], b2.clone()).unwrap();
    timeit("tape conv 32->64 s2 @32x24", 200, || {
        let mut t = Tape::new();
        let xv = t.constant(xt.clone());
        let wv = t.constant(wt2.clone());
        let bv = t.constant(bt2.clone());
        let _ = t.conv2d(xv, wv, bv, 2).unwrap();
    });
}
