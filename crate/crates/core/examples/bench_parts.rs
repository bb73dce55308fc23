use posegen::config::Config;
use posegen::data::make_dataset;
use posegen::losses::*;
use posegen::networks::*;
use posegen::tensor::Tape;
use std::time::Instant;

fn main() {
    let ds = make_dataset(1, 2, 0).unwrap();
    let s = &ds[0];
    let cfg = Config::default();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let gen = GeneratorParams::init(&cfg.arch(), &mut rng).unwrap();
    let disc = DiscriminatorParams::init(&mut rng);
    let net = FrozenFeatureNet::init(42);

    // G forward only
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let gv = gen.vars(&mut tape);
    let fake = generate(&mut tape, &s.ref_image, &s.ref_pose, &s.tgt_pose, &s.ref_masks, &gv).unwrap();
    println!("G forward: {:.0?} ({} tape nodes)", t0.elapsed(), tape.len());

    // disc + losses forward
    let t1 = Instant::now();
    let dv = disc.vars(&mut tape);
    let nv = net.vars(&mut tape);
    let truth = tape.constant(s.tgt_image.clone());
    let f_out = discriminate(&mut tape, fake, &dv).unwrap();
    let terms = LossTerms {
        l1: l1_loss(&mut tape, fake, truth).unwrap(),
        adv: adv_loss_g(&mut tape, &f_out.means).unwrap(),
        perceptual: perceptual_loss(&mut tape, fake, truth, &nv).unwrap(),
        style: style_loss(&mut tape, fake, truth, &nv).unwrap(),
        partial: partial_loss(&mut tape, fake, truth, &s.tgt_masks, &nv).unwrap(),
    };
    let w = LossWeights::default();
    let total = total_loss(&mut tape, &terms, &w).unwrap();
    println!("D+losses forward: {:.0?} ({} nodes)", t1.elapsed(), tape.len());

    let t2 = Instant::now();
    tape.backward(total).unwrap();
    println!("backward: {:.0?}", t2.elapsed());

    // individual: frozen features on one image
    let t3 = Instant::now();
    let mut tp2 = Tape::new();
    let nv2 = net.vars(&mut tp2);
    let img = tp2.constant(s.tgt_image.clone());
    let _ = features(&mut tp2, img, &nv2).unwrap();
    println!("frozen features fwd: {:.0?}", t3.elapsed());

    // texture encoder alone
    let t4 = Instant::now();
    let mut tp3 = Tape::new();
    let gv3 = gen.vars(&mut tp3);
    let _ = posegen::parts::texture_code(&mut tp3, &s.ref_image, &s.ref_masks, &gv3.parts).unwrap();
    println!("texture_code fwd: {:.0?}", t4.elapsed());
}
