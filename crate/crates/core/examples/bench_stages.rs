use posegen::config::Config;
use posegen::data::make_dataset;
use posegen::networks::*;
use posegen::tensor::Tape;
use std::time::Instant;

fn main() {
    let ds = make_dataset(1, 2, 0).unwrap();
    let s = &ds[0];
    let cfg = Config::default();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let gen = GeneratorParams::init(&cfg.arch(), &mut rng).unwrap();

    let mut tape = Tape::new();
    let gv = gen.vars(&mut tape);
    let ri = tape.constant(s.ref_image.clone());
    let rp = tape.constant(s.ref_pose.clone());
    let tp = tape.constant(s.tgt_pose.clone());

    let t = Instant::now();
    let f_r = encode_reference(&mut tape, ri, rp, tp, &gv).unwrap();
    println!("encode_reference: {:.1?}", t.elapsed());

    let t = Instant::now();
    let f_t = encode_target_pose(&mut tape, tp, &gv).unwrap();
    println!("encode_target_pose: {:.1?}", t.elapsed());

    let t = Instant::now();
    let f_rt = pose_transfer(&mut tape, f_r, f_t, &gv).unwrap();
    println!("pose_transfer: {:.1?}", t.elapsed());

    let t = Instant::now();
    let f_c = posegen::parts::texture_code(&mut tape, &s.ref_image, &s.ref_masks, &gv.parts).unwrap();
    println!("texture_code: {:.1?}", t.elapsed());

    let t = Instant::now();
    let out = decode(&mut tape, f_rt, f_c, &gv).unwrap();
    println!("decode: {:.1?}", t.elapsed());

    let m = tape.mean(out).unwrap();
    let t = Instant::now();
    tape.backward(m).unwrap();
    println!("backward(G only): {:.1?}", t.elapsed());
}
