use posegen::config::Config;
use posegen::data::make_dataset;
use posegen::train::Trainer;
use std::time::Instant;

fn main() {
    let ds = make_dataset(2, 2, 0).unwrap();
    let cfg = Config::default();
    let mut tr = Trainer::new(&cfg).unwrap();
    let batch: Vec<_> = ds.iter().cycle().take(8).collect();
    let t0 = Instant::now();
    let stats = tr.step(1, &batch).unwrap();
    println!("one step (batch 8, d=64): {:.2?}  total={:.3}", t0.elapsed(), stats.total);
    let t1 = Instant::now();
    for i in 2..=4 { tr.step(i, &batch).unwrap(); }
    println!("3 more steps: {:.2?} avg {:.2?}", t1.elapsed(), t1.elapsed()/3);
}
