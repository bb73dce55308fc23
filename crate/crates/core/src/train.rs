//! Adversarial training loop: per batch one discriminator update on real vs
//! detached fake images, then one generator update on the full weighted
//! loss. Everything is deterministic given the config seed — batches come
//! from a seeded shuffle and all gradient reductions run in fixed order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{PersonSample, Split};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_d, adv_loss_g, features, l1_loss, partial_loss, perceptual_from_stages,
    style_from_stages, total_loss, FrozenFeatureNet, LossTerms,
};
use crate::networks::{discriminate, generate, DiscriminatorParams, GeneratorParams};
use crate::tensor::{Tape, Tensor, Var};

/// Adam with the usual defaults; first/second moments are keyed by parameter
/// name so the state survives independent of traversal details.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one update to `p` from the summed gradient times `scale`.
    pub fn update(&mut self, name: &str, p: &mut Tensor, grad_sum: &[f64], scale: f64) {
        let n = p.len();
        debug_assert_eq!(n, grad_sum.len());
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..n {
            let g = grad_sum[i] * scale;
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p.data_mut()[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Per-iteration batch-mean loss values.
#[derive(Debug, Clone, Copy)]
pub struct IterStats {
    pub iter: usize,
    pub l1: f64,
    pub adv: f64,
    pub perceptual: f64,
    pub style: f64,
    pub partial: f64,
    pub total: f64,
    pub d_loss: f64,
}

impl IterStats {
    /// One trace line; f64 Display round-trips, so traces compare bitwise.
    pub fn trace_row(&self) -> String {
        format!(
            "{} {} {} {} {} {} {} {}",
            self.iter, self.l1, self.adv, self.perceptual, self.style, self.partial, self.total,
            self.d_loss
        )
    }
}

fn accumulate_grads(
    tape: &Tape,
    names: &[String],
    vars: &[Var],
    into: &mut BTreeMap<String, Vec<f64>>,
) {
    debug_assert_eq!(names.len(), vars.len());
    for (name, &v) in names.iter().zip(vars) {
        if let Some(g) = tape.grad(v) {
            match into.get_mut(name) {
                Some(acc) => {
                    for (a, &x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
                None => {
                    into.insert(name.clone(), g.to_vec());
                }
            }
        }
    }
}

/// Fold one item's gradient map into the running batch sum.
fn merge_grads(into: &mut BTreeMap<String, Vec<f64>>, from: BTreeMap<String, Vec<f64>>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

pub struct Trainer {
    pub cfg: Config,
    pub gen: GeneratorParams,
    pub disc: DiscriminatorParams,
    pub frozen: FrozenFeatureNet,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    gen_names: Vec<String>,
    disc_names: Vec<String>,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Trainer> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gen = GeneratorParams::init(&cfg.arch(), &mut rng)?;
        let disc = DiscriminatorParams::init(&mut rng);
        let mut gen_names = Vec::new();
        gen.for_each("gen", &mut |n, _| gen_names.push(n));
        let mut disc_names = Vec::new();
        disc.for_each("disc", &mut |n, _| disc_names.push(n));
        Ok(Trainer {
            cfg: cfg.clone(),
            gen,
            disc,
            frozen: FrozenFeatureNet::init(cfg.frozen_net_seed),
            opt_g: Adam::new(cfg.train_lr),
            opt_d: Adam::new(cfg.train_lr),
            rng,
            order: Vec::new(),
            cursor: 0,
            gen_names,
            disc_names,
        })
    }

    /// Next batch of indices into the training list, reshuffling per epoch.
    pub fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let bs = self.cfg.train_batch_size;
        let mut out = Vec::with_capacity(bs);
        while out.len() < bs {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Generator forward only, returning the image as a plain value.
    pub fn fake_value(&self, s: &PersonSample) -> Result<Tensor> {
        synthesize(&self.gen, s)
    }

    /// One full iteration: D update on the batch, then G update on the same
    /// batch. The generator runs forward once per item; those tapes stay
    /// alive so the D step can read the fakes as constants and the G step
    /// can continue the same tapes against the refreshed discriminator.
    pub fn step(&mut self, iter: usize, batch: &[&PersonSample]) -> Result<IterStats> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let weights = self.cfg.weights();
        weights.validate()?;
        // parallel sections work on disjoint per-item tapes; everything that
        // touches shared state (grad reduction, optimizer updates) runs
        // sequentially in item order, so results are independent of thread
        // scheduling
        let mut tapes = batch
            .par_iter()
            .map(|s| {
                let mut tape = Tape::new();
                let mut gv = self.gen.vars(&mut tape);
                let gvars: Vec<Var> = gv.slots().into_iter().map(|r| *r).collect();
                let fake = generate(
                    &mut tape, &s.ref_image, &s.ref_pose, &s.tgt_pose, &s.ref_masks, &gv,
                )?;
                Ok((tape, gvars, fake))
            })
            .collect::<Result<Vec<_>>>()?;

        let d_items = batch
            .par_iter()
            .zip(&tapes)
            .map(|(s, (gtape, _, fake))| {
                let mut tape = Tape::new();
                let mut dv = self.disc.vars(&mut tape);
                let dvars: Vec<Var> = dv.slots().into_iter().map(|r| *r).collect();
                let real = tape.constant(s.tgt_image.clone());
                let fk = tape.constant(gtape.value(*fake).clone());
                let r_out = discriminate(&mut tape, real, &dv)?;
                let f_out = discriminate(&mut tape, fk, &dv)?;
                let loss = adv_loss_d(&mut tape, &r_out.means, &f_out.means)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { term: "adv_d", value });
                }
                tape.backward(loss)?;
                let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                accumulate_grads(&tape, &self.disc_names, &dvars, &mut grads);
                Ok((value, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut d_grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut d_sum = 0.0;
        for (value, grads) in d_items {
            d_sum += value;
            merge_grads(&mut d_grads, grads);
        }
        let scale = 1.0 / batch.len() as f64;
        self.opt_d.begin_step();
        let opt = &mut self.opt_d;
        self.disc.for_each_mut("disc", &mut |name, p| {
            if let Some(g) = d_grads.get(&name) {
                opt.update(&name, p, g, scale);
            }
        });

        let g_items = batch
            .par_iter()
            .zip(std::mem::take(&mut tapes))
            .map(|(s, (mut tape, gvars, fake))| {
                let dv = self.disc.vars_const(&mut tape);
                let nv = self.frozen.vars(&mut tape);
                let truth = tape.constant(s.tgt_image.clone());
                let f_out = discriminate(&mut tape, fake, &dv)?;
                let ffake = features(&mut tape, fake, &nv)?;
                let ftruth = features(&mut tape, truth, &nv)?;
                let terms = LossTerms {
                    l1: l1_loss(&mut tape, fake, truth)?,
                    adv: adv_loss_g(&mut tape, &f_out.means)?,
                    perceptual: perceptual_from_stages(&mut tape, &ffake, &ftruth)?,
                    style: style_from_stages(&mut tape, &ffake, &ftruth)?,
                    partial: partial_loss(&mut tape, fake, truth, &s.tgt_masks, &nv)?,
                };
                let total = total_loss(&mut tape, &terms, &weights)?;
                let mut vals = [0.0f64; 6]; // l1, adv, perceptual, style, partial, total
                for (acc, var) in vals.iter_mut().zip([
                    terms.l1, terms.adv, terms.perceptual, terms.style, terms.partial, total,
                ]) {
                    *acc = tape.value(var).data()[0];
                }
                tape.backward(total)?;
                let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                accumulate_grads(&tape, &self.gen_names, &gvars, &mut grads);
                Ok((vals, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut sums = [0.0f64; 6];
        for (vals, item_grads) in g_items {
            for (acc, v) in sums.iter_mut().zip(vals) {
                *acc += v;
            }
            merge_grads(&mut grads, item_grads);
        }
        self.opt_g.begin_step();
        let opt = &mut self.opt_g;
        self.gen.for_each_mut("gen", &mut |name, p| {
            if let Some(g) = grads.get(&name) {
                opt.update(&name, p, g, scale);
            }
        });
        Ok(IterStats {
            iter,
            l1: sums[0] * scale,
            adv: sums[1] * scale,
            perceptual: sums[2] * scale,
            style: sums[3] * scale,
            partial: sums[4] * scale,
            total: sums[5] * scale,
            d_loss: d_sum * scale,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_models(&self.cfg.to_text(), &self.gen, &self.disc)
    }
}

/// Run the generator on one sample outside of training, returning the image.
pub fn synthesize(gen: &GeneratorParams, s: &PersonSample) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = gen.vars(&mut tape);
    let out = generate(&mut tape, &s.ref_image, &s.ref_pose, &s.tgt_pose, &s.ref_masks, &g)?;
    Ok(tape.value(out).clone())
}

fn check_sample(cfg: &Config, s: &PersonSample) -> Result<()> {
    let want = [3, cfg.data_h, cfg.data_w];
    for (what, t) in [("reference image", &s.ref_image), ("target image", &s.tgt_image)] {
        if t.shape() != want {
            return Err(Error::Config(format!(
                "{what} of pair {}_{}->{}_{} has shape {:?}, config says {:?}",
                s.identity, s.ref_pose_id, s.identity, s.tgt_pose_id, t.shape(), want
            )));
        }
    }
    Ok(())
}

/// Runs the configured number of iterations over the train split of
/// `samples`, writing `trace.txt`, periodic checkpoints, a final checkpoint,
/// and the resolved config into `out_dir`.
pub fn train_loop(
    samples: &[PersonSample],
    cfg: &Config,
    out_dir: &Path,
    mut on_iter: Option<&mut dyn FnMut(&IterStats)>,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let train: Vec<&PersonSample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Config("dataset has no training pairs".into()));
    }
    for s in &train {
        check_sample(cfg, s)?;
    }
    fs::write(out_dir.join("config.resolved.txt"), cfg.to_text())?;
    let mut tr = Trainer::new(cfg)?;
    let mut trace = String::from("# iter l1 adv perceptual style partial total d_adv\n");
    for iter in 1..=cfg.train_iters {
        let idx = tr.next_indices(train.len());
        let batch: Vec<&PersonSample> = idx.iter().map(|&i| train[i]).collect();
        let stats = tr.step(iter, &batch)?;
        if let Some(cb) = on_iter.as_deref_mut() {
            cb(&stats);
        }
        if iter % 10 == 0 {
            let _ = writeln!(trace, "{}", stats.trace_row());
        }
        if iter % 500 == 0 {
            tr.checkpoint().save(&out_dir.join(format!("ckpt_{iter:06}.pdgn")))?;
            fs::write(out_dir.join("trace.txt"), &trace)?;
        }
    }
    tr.checkpoint().save(&out_dir.join("ckpt_final.pdgn"))?;
    fs::write(out_dir.join("trace.txt"), &trace)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_dataset;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.model_d = 8;
        cfg.model_s_texture = 8;
        cfg.model_n_transformer = 1;
        cfg.train_batch_size = 2;
        cfg.train_iters = 2;
        cfg.train_lr = 1e-3;
        cfg
    }

    #[test]
    fn adam_moves_params_toward_minimum() {
        // minimize (x-3)^2 by hand-fed gradients
        let mut opt = Adam::new(0.1);
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        for _ in 0..200 {
            let g = vec![2.0 * (p.data()[0] - 3.0)];
            opt.begin_step();
            opt.update("x", &mut p, &g, 1.0);
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-2, "got {}", p.data()[0]);
    }

    #[test]
    fn one_training_step_updates_both_nets() {
        let ds = make_dataset(2, 2, 7).unwrap();
        let cfg = tiny_cfg();
        let mut tr = Trainer::new(&cfg).unwrap();
        let before_g: Vec<f64> = {
            let mut v = Vec::new();
            tr.gen.for_each("gen", &mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        let before_d: Vec<f64> = {
            let mut v = Vec::new();
            tr.disc.for_each("disc", &mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        let batch: Vec<&PersonSample> = ds.iter().take(2).collect();
        let stats = tr.step(1, &batch).unwrap();
        for (name, v) in [
            ("l1", stats.l1),
            ("adv", stats.adv),
            ("perceptual", stats.perceptual),
            ("style", stats.style),
            ("partial", stats.partial),
            ("total", stats.total),
            ("d", stats.d_loss),
        ] {
            assert!(v.is_finite(), "{name} loss not finite");
        }
        assert!(stats.total > 0.0);
        let mut after_g = Vec::new();
        tr.gen.for_each("gen", &mut |_, t| after_g.extend_from_slice(t.data()));
        let mut after_d = Vec::new();
        tr.disc.for_each("disc", &mut |_, t| after_d.extend_from_slice(t.data()));
        assert_ne!(before_g, after_g, "generator unchanged");
        assert_ne!(before_d, after_d, "discriminator unchanged");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = make_dataset(2, 2, 8).unwrap();
        let cfg = tiny_cfg();
        let run = || {
            let mut tr = Trainer::new(&cfg).unwrap();
            let mut rows = Vec::new();
            for iter in 1..=2 {
                let idx = tr.next_indices(ds.len());
                let batch: Vec<&PersonSample> = idx.iter().map(|&i| &ds[i]).collect();
                rows.push(tr.step(iter, &batch).unwrap().trace_row());
            }
            let mut params = Vec::new();
            tr.gen.for_each("gen", &mut |_, t| params.extend_from_slice(t.data()));
            (rows, params)
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn train_loop_writes_artifacts() {
        let dir = std::env::temp_dir().join(format!("posegen-train-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let ds = make_dataset(2, 2, 9).unwrap();
        let mut cfg = tiny_cfg();
        cfg.train_iters = 10;
        let mut seen = 0;
        train_loop(&ds, &cfg, &dir, Some(&mut |_s: &IterStats| seen += 1)).unwrap();
        assert_eq!(seen, 10);
        let trace = fs::read_to_string(dir.join("trace.txt")).unwrap();
        let rows: Vec<&str> = trace.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 1); // one row at iter 10
        assert!(rows[0].starts_with("10 "));
        assert!(dir.join("ckpt_final.pdgn").exists());
        assert!(dir.join("config.resolved.txt").exists());
        let ck = Checkpoint::load(&dir.join("ckpt_final.pdgn")).unwrap();
        assert_eq!(ck.config_text, cfg.to_text());
        let _ = fs::remove_dir_all(&dir);
    }
}
