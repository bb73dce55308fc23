//! Finite-difference verification of every differentiable operation.
//!
//! Each entry rebuilds a small graph from seeded random inputs, compares
//! analytic gradients against central differences, and reports the worst
//! relative error. Entries are grouped by module and always run in the same
//! order, so reports are comparable across builds and seeds. The composite
//! checks (full generator, discriminator, total loss) reuse the same
//! machinery with sampled coordinates to stay fast.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    mha, scaled_dot_attention, transformer_module, MhaParams, TokenSequence,
    TransformerModuleParams,
};
use crate::fourier::{fft_block, FftBlockVars};
use crate::losses::{
    adv_loss_d, adv_loss_g, gram, l1_loss, partial_loss, perceptual_loss, style_loss, total_loss,
    FrozenFeatureNet, LossTerms, LossWeights,
};
use crate::networks::{
    decode, discriminate, encode_reference, encode_target_pose, generate, pose_transfer,
    DiscriminatorParams, GeneratorArch, GeneratorParams,
};
use crate::parts::{encode_part, texture_code, PartEncoderParams, PartMaskSet, PART_COUNT};
use crate::tensor::{grad_check_sampled, Tape, Tensor, Var};
use crate::{Error, Result};

/// Largest max-relative-error accepted for any entry.
pub const TOLERANCE: f64 = 1e-4;

/// Central-difference step used throughout.
pub const FD_EPS: f64 = 1e-6;

/// Module names accepted by [`check_module`], in report order.
pub const MODULES: [&str; 6] = ["tensor", "fourier", "attention", "parts", "networks", "losses"];

/// Probe every coordinate of every input.
const FULL: usize = 1_000_000;

/// One line per checked operation: name and worst relative error.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub lines: Vec<(String, f64)>,
}

impl CheckReport {
    /// Worst error over all entries.
    pub fn worst(&self) -> f64 {
        self.lines.iter().fold(0.0, |m, (_, e)| m.max(*e))
    }

    /// True when every entry is within [`TOLERANCE`].
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|(_, e)| *e <= TOLERANCE)
    }

    /// Names of entries over [`TOLERANCE`].
    pub fn failures(&self) -> Vec<&str> {
        self.lines.iter().filter(|(_, e)| *e > TOLERANCE).map(|(n, _)| n.as_str()).collect()
    }
}

/// Runs the gradient checks for one module (or `all`) under one seed.
pub fn check_module(module: &str, seed: u64) -> Result<CheckReport> {
    let mut lines = Vec::new();
    if module == "all" {
        for name in MODULES {
            run_module(name, seed, &mut lines)?;
        }
    } else if MODULES.contains(&module) {
        run_module(module, seed, &mut lines)?;
    } else {
        return Err(Error::Config(format!(
            "unknown module `{module}`; expected one of tensor, fourier, attention, parts, \
             networks, losses, all"
        )));
    }
    Ok(CheckReport { lines })
}

fn run_module(name: &str, seed: u64, lines: &mut Vec<(String, f64)>) -> Result<()> {
    match name {
        "tensor" => check_tensor(seed, lines),
        "fourier" => check_fourier(seed, lines),
        "attention" => check_attention(seed, lines),
        "parts" => check_parts(seed, lines),
        "networks" => check_networks(seed, lines),
        "losses" => check_losses(seed, lines),
        _ => unreachable!(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect())
        .expect("static shape")
}

/// Magnitudes in (0.2, 1.0) with random signs, so a finite-difference step
/// never crosses the kink of relu or abs at zero.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = r.random_range(0.2..1.0);
            if r.random_range(0..2) == 0 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

fn label_masks(r: &mut ChaCha8Rng, h: usize, w: usize) -> PartMaskSet {
    let labels: Vec<u8> = (0..h * w).map(|_| r.random_range(0..PART_COUNT as u8)).collect();
    PartMaskSet::from_labels(h, w, &labels).expect("valid labels")
}

/// Small deterministic hash so each entry pins against its own weights.
fn salt(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Checks one graph builder. Non-scalar outputs are dotted against a fixed
/// random coefficient tensor before reduction, so positional mix-ups in a
/// backward rule cannot cancel out of the loss. The loss is then normalized
/// to magnitude ~1e-4: relative errors of live coordinates are invariant
/// under loss scaling, while coordinates with exactly zero gradient (dead
/// activation paths, masked-out weights) compare float roundoff of the loss
/// against the error floor, and that roundoff shrinks with the loss.
fn check_op(
    lines: &mut Vec<(String, f64)>,
    name: &str,
    seed: u64,
    inputs: &[Tensor],
    max_per_input: usize,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<()> {
    let mut dry = Tape::new();
    let v0: Vec<Var> = inputs.iter().map(|t| dry.leaf(t.clone())).collect();
    let out0 = f(&mut dry, &v0)?;
    let out_shape = dry.value(out0).shape().to_vec();
    let pin = if dry.value(out0).len() > 1 {
        Some(uniform(&mut rng(seed ^ salt(name)), &out_shape, -1.0, 1.0))
    } else {
        None
    };
    let l0: f64 = match &pin {
        Some(p) => dry.value(out0).data().iter().zip(p.data()).map(|(a, b)| a * b).sum(),
        None => dry.value(out0).data()[0],
    };
    let scale = if l0.abs() > 1e-9 { 1e-4 / l0.abs() } else { 1.0 };
    let err = grad_check_sampled(
        inputs,
        |tape, vs| {
            let out = f(tape, vs)?;
            let loss = match &pin {
                Some(p) => {
                    let w = tape.constant(p.clone());
                    let m = tape.mul(out, w)?;
                    tape.sum(m)?
                }
                None => out,
            };
            tape.scale(loss, scale)
        },
        FD_EPS,
        max_per_input,
    )?;
    lines.push((name.to_string(), err));
    Ok(())
}

fn check_tensor(seed: u64, lines: &mut Vec<(String, f64)>) -> Result<()> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    check_op(lines, "tensor.add", seed, &[a.clone(), b.clone()], FULL, |t, v| t.add(v[0], v[1]))?;
    check_op(lines, "tensor.sub", seed, &[a.clone(), b.clone()], FULL, |t, v| t.sub(v[0], v[1]))?;
    check_op(lines, "tensor.mul", seed, &[a.clone(), b.clone()], FULL, |t, v| t.mul(v[0], v[1]))?;
    check_op(lines, "tensor.scale", seed, &[a.clone()], FULL, |t, v| t.scale(v[0], -0.7))?;

    let n1 = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let n2 = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let n3 = uniform(&mut r, &[2, 3], -1.0, 1.0);
    check_op(lines, "tensor.add_n", seed, &[n1, n2, n3], FULL, |t, v| t.add_n(v))?;

    let m = uniform(&mut r, &[3, 4], -1.0, 1.0);
    check_op(lines, "tensor.sum", seed, &[m.clone()], FULL, |t, v| t.sum(v[0]))?;
    check_op(lines, "tensor.mean", seed, &[m.clone()], FULL, |t, v| t.mean(v[0]))?;

    let k = off_zero(&mut r, &[2, 3, 4]);
    check_op(lines, "tensor.relu", seed, &[k.clone()], FULL, |t, v| t.relu(v[0]))?;
    check_op(lines, "tensor.abs", seed, &[k.clone()], FULL, |t, v| t.abs(v[0]))?;
    let s = uniform(&mut r, &[2, 3, 4], -2.0, 2.0);
    check_op(lines, "tensor.sigmoid", seed, &[s.clone()], FULL, |t, v| t.sigmoid(v[0]))?;
    check_op(lines, "tensor.log_sigmoid", seed, &[s.clone()], FULL, |t, v| t.log_sigmoid(v[0]))?;

    let ma = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let mb = uniform(&mut r, &[4, 5], -1.0, 1.0);
    check_op(lines, "tensor.matmul", seed, &[ma, mb], FULL, |t, v| t.matmul(v[0], v[1]))?;
    let tr = uniform(&mut r, &[3, 5], -1.0, 1.0);
    check_op(lines, "tensor.transpose2d", seed, &[tr], FULL, |t, v| t.transpose2d(v[0]))?;
    let rs = uniform(&mut r, &[2, 6], -1.0, 1.0);
    check_op(lines, "tensor.reshape", seed, &[rs], FULL, |t, v| t.reshape(v[0], &[3, 4]))?;
    let rv = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let row = uniform(&mut r, &[4], -1.0, 1.0);
    check_op(lines, "tensor.add_row_vec", seed, &[rv, row], FULL, |t, v| t.add_row_vec(v[0], v[1]))?;
    let sm = uniform(&mut r, &[3, 5], -2.0, 2.0);
    check_op(lines, "tensor.softmax_rows", seed, &[sm], FULL, |t, v| t.softmax_rows(v[0]))?;
    let inx = uniform(&mut r, &[2, 4, 4], -1.0, 1.0);
    check_op(lines, "tensor.instance_norm", seed, &[inx], FULL, |t, v| {
        t.instance_norm(v[0], 1e-5)
    })?;

    let x1 = uniform(&mut r, &[3, 4, 5], -1.0, 1.0);
    let w1 = uniform(&mut r, &[2, 3, 1, 1], -1.0, 1.0);
    let b1 = uniform(&mut r, &[2], -1.0, 1.0);
    check_op(lines, "tensor.conv2d_1x1", seed, &[x1, w1, b1], FULL, |t, v| {
        t.conv2d(v[0], v[1], v[2], 1)
    })?;
    let x3 = uniform(&mut r, &[2, 5, 6], -1.0, 1.0);
    let w3 = uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let b3 = uniform(&mut r, &[3], -1.0, 1.0);
    check_op(lines, "tensor.conv2d_3x3", seed, &[x3, w3, b3], FULL, |t, v| {
        t.conv2d(v[0], v[1], v[2], 1)
    })?;
    let xs = uniform(&mut r, &[2, 7, 9], -1.0, 1.0);
    let ws = uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let bs = uniform(&mut r, &[3], -1.0, 1.0);
    check_op(lines, "tensor.conv2d_3x3_s2", seed, &[xs, ws, bs], FULL, |t, v| {
        t.conv2d(v[0], v[1], v[2], 2)
    })?;

    let up = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    check_op(lines, "tensor.upsample_nearest2", seed, &[up], FULL, |t, v| {
        t.upsample_nearest2(v[0])
    })?;
    let ap = uniform(&mut r, &[2, 4, 6], -1.0, 1.0);
    check_op(lines, "tensor.avg_pool2", seed, &[ap], FULL, |t, v| t.avg_pool2(v[0]))?;
    let gp = uniform(&mut r, &[3, 4, 5], -1.0, 1.0);
    check_op(lines, "tensor.global_avg_pool", seed, &[gp], FULL, |t, v| t.global_avg_pool(v[0]))?;
    let cr = uniform(&mut r, &[2, 5, 6], -1.0, 1.0);
    check_op(lines, "tensor.crop_spatial", seed, &[cr], FULL, |t, v| {
        t.crop_spatial(v[0], 1, 2, 3, 3)
    })?;
    let bl = uniform(&mut r, &[2, 4, 6], -1.0, 1.0);
    check_op(lines, "tensor.bilinear_resize", seed, &[bl], FULL, |t, v| {
        t.bilinear_resize(v[0], 6, 9)
    })?;

    let c1 = uniform(&mut r, &[1, 3, 4], -1.0, 1.0);
    let c2 = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let c3 = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    check_op(lines, "tensor.concat_channels", seed, &[c1, c2, c3], FULL, |t, v| {
        t.concat_channels(v)
    })?;
    let sc = uniform(&mut r, &[4, 3, 4], -1.0, 1.0);
    check_op(lines, "tensor.slice_channels", seed, &[sc], FULL, |t, v| {
        t.slice_channels(v[0], 1, 3)
    })?;
    let q1 = uniform(&mut r, &[3, 2], -1.0, 1.0);
    let q2 = uniform(&mut r, &[3, 4], -1.0, 1.0);
    check_op(lines, "tensor.concat_cols", seed, &[q1, q2], FULL, |t, v| t.concat_cols(v))?;
    let qc = uniform(&mut r, &[3, 6], -1.0, 1.0);
    check_op(lines, "tensor.slice_cols", seed, &[qc], FULL, |t, v| t.slice_cols(v[0], 2, 5))?;

    let chx = uniform(&mut r, &[3, 4, 5], -1.0, 1.0);
    let chs = uniform(&mut r, &[3], -1.0, 1.0);
    let chb = uniform(&mut r, &[3], -1.0, 1.0);
    check_op(lines, "tensor.scale_channels", seed, &[chx.clone(), chs], FULL, |t, v| {
        t.scale_channels(v[0], v[1])
    })?;
    check_op(lines, "tensor.shift_channels", seed, &[chx, chb], FULL, |t, v| {
        t.shift_channels(v[0], v[1])
    })?;
    Ok(())
}

fn check_fourier(seed: u64, lines: &mut Vec<(String, f64)>) -> Result<()> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 4, 6], -1.0, 1.0);
    check_op(lines, "fourier.rfft2", seed, &[x], FULL, |t, v| t.rfft2(v[0]))?;
    // spectrum of a [2, 4, 6] map: re/im stacked to 4 channels, 4 x (6/2+1)
    let spec = uniform(&mut r, &[4, 4, 4], -1.0, 1.0);
    check_op(lines, "fourier.irfft2", seed, &[spec], FULL, |t, v| t.irfft2(v[0], 6))?;

    let fx = uniform(&mut r, &[4, 4, 6], -1.0, 1.0);
    let cf = 8; // spectrum channels of a 4-channel map
    let fw1 = uniform(&mut r, &[cf, cf, 1, 1], -0.5, 0.5);
    let fb1 = uniform(&mut r, &[cf], -0.5, 0.5);
    let fw2 = uniform(&mut r, &[cf, cf, 1, 1], -0.5, 0.5);
    let fb2 = uniform(&mut r, &[cf], -0.5, 0.5);
    check_op(lines, "fourier.fft_block", seed, &[fx, fw1, fb1, fw2, fb2], 12, |t, v| {
        let p = FftBlockVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
        fft_block(t, v[0], &p, false)
    })?;
    Ok(())
}

fn check_attention(seed: u64, lines: &mut Vec<(String, f64)>) -> Result<()> {
    let mut r = rng(seed);
    let q = uniform(&mut r, &[4, 6], -1.0, 1.0);
    let k = uniform(&mut r, &[5, 6], -1.0, 1.0);
    let v = uniform(&mut r, &[5, 6], -1.0, 1.0);
    check_op(lines, "attention.scaled_dot", seed, &[q, k, v], FULL, |t, vs| {
        scaled_dot_attention(t, vs[0], vs[1], vs[2])
    })?;

    let x = uniform(&mut r, &[6, 8], -1.0, 1.0);
    let mp = MhaParams::init(8, 2, true, &mut r)?;
    let mut inputs = vec![x];
    mp.for_each("a", &mut |_, t| inputs.push(t.clone()));
    check_op(lines, "attention.mha", seed, &inputs, 12, move |t, vs| {
        let mut pv = mp.vars(t);
        let slots = pv.slots();
        debug_assert_eq!(slots.len() + 1, vs.len());
        for (slot, &v) in slots.into_iter().zip(&vs[1..]) {
            *slot = v;
        }
        mha(t, vs[0], vs[0], vs[0], &pv)
    })?;

    let fr = uniform(&mut r, &[8, 4, 4], -1.0, 1.0);
    let ft = uniform(&mut r, &[8, 4, 4], -1.0, 1.0);
    let tp = TransformerModuleParams::init(8, 2, true, &mut r)?;
    let mut inputs = vec![fr, ft];
    tp.for_each("m", &mut |_, t| inputs.push(t.clone()));
    check_op(lines, "attention.transformer_module", seed, &inputs, 6, move |t, vs| {
        let mut pv = tp.vars(t);
        let slots = pv.slots();
        debug_assert_eq!(slots.len() + 2, vs.len());
        for (slot, &v) in slots.into_iter().zip(&vs[2..]) {
            *slot = v;
        }
        let sr = TokenSequence::from_map(t, vs[0])?;
        let st = TokenSequence::from_map(t, vs[1])?;
        let out = transformer_module(t, &sr, &st, &pv, 1e-5)?;
        out.to_map(t)
    })?;
    Ok(())
}

fn check_parts(seed: u64, lines: &mut Vec<(String, f64)>) -> Result<()> {
    let mut r = rng(seed);
    let mut params = PartEncoderParams::init(8, &[], &mut r)?;
    // biases away from zero keep ReLU pre-activations off the kink
    params.for_each_mut("p", &mut |_, t| {
        if t.shape().len() == 1 {
            let bump = off_zero(&mut rng(seed ^ 0x70), &[t.len()]);
            for (dst, src) in t.data_mut().iter_mut().zip(bump.data()) {
                *dst += 0.2 * src;
            }
        }
    });

    let img = uniform(&mut r, &[3, 8, 8], 0.0, 1.0);
    let mut inputs = vec![img.clone()];
    params.for_each("p", &mut |_, t| inputs.push(t.clone()));
    let pe = params.clone();
    check_op(lines, "parts.encode_part", seed, &inputs, 4, move |t, vs| {
        let mut pv = pe.vars(t);
        let slots = pv.slots();
        for (slot, &v) in slots.into_iter().zip(&vs[1..]) {
            *slot = v;
        }
        encode_part(t, vs[0], &pv)
    })?;

    let masks = label_masks(&mut r, 8, 8);
    let mut inputs = Vec::new();
    params.for_each("p", &mut |_, t| inputs.push(t.clone()));
    check_op(lines, "parts.texture_code", seed, &inputs, 4, move |t, vs| {
        let mut pv = params.vars(t);
        let slots = pv.slots();
        for (slot, &v) in slots.into_iter().zip(vs) {
            *slot = v;
        }
        texture_code(t, &img, &masks, &pv)
    })?;
    Ok(())
}

fn tiny_arch() -> GeneratorArch {
    GeneratorArch { d: 8, heads: 2, n_modules: 1, s_texture: 8, k_pose: 3, ..GeneratorArch::default() }
}

fn bumped_generator(seed: u64) -> Result<GeneratorParams> {
    let mut params = GeneratorParams::init(&tiny_arch(), &mut rng(seed))?;
    let mut bump = 0u64;
    params.for_each_mut("g", &mut |_, t| {
        if t.shape().len() == 1 {
            bump += 1;
            let b = off_zero(&mut rng(seed ^ (0x100 + bump)), &[t.len()]);
            for (dst, src) in t.data_mut().iter_mut().zip(b.data()) {
                *dst += 0.2 * src;
            }
        }
    });
    Ok(params)
}

fn check_networks(seed: u64, lines: &mut Vec<(String, f64)>) -> Result<()> {
    let mut r = rng(seed);
    let params = bumped_generator(seed)?;

    let ri = uniform(&mut r, &[3, 8, 8], 0.0, 1.0);
    let rp = uniform(&mut r, &[3, 8, 8], 0.0, 1.0);
    let tp = uniform(&mut r, &[3, 8, 8], 0.0, 1.0);
    let pr = params.clone();
    check_op(lines, "networks.encode_reference", seed, &[ri.clone(), rp.clone(), tp.clone()], 20, move |t, vs| {
        let g = pr.vars(t);
        encode_reference(t, vs[0], vs[1], vs[2], &g)
    })?;
    let pr = params.clone();
    check_op(lines, "networks.encode_target_pose", seed, &[tp.clone()], 20, move |t, vs| {
        let g = pr.vars(t);
        encode_target_pose(t, vs[0], &g)
    })?;

    let fr = uniform(&mut r, &[8, 4, 4], -1.0, 1.0);
    let ftm = uniform(&mut r, &[8, 4, 4], -1.0, 1.0);
    let pr = params.clone();
    check_op(lines, "networks.pose_transfer", seed, &[fr.clone(), ftm], 20, move |t, vs| {
        let g = pr.vars(t);
        pose_transfer(t, vs[0], vs[1], &g)
    })?;

    let code = uniform(&mut r, &[8], -1.0, 1.0);
    let pr = params.clone();
    check_op(lines, "networks.decode", seed, &[fr, code], 20, move |t, vs| {
        let g = pr.vars(t);
        decode(t, vs[0], vs[1], &g)
    })?;

    let masks = label_masks(&mut r, 8, 8);
    let target = uniform(&mut r, &[3, 8, 8], 0.0, 1.0);
    let mut inputs = Vec::new();
    params.for_each("g", &mut |_, t| inputs.push(t.clone()));
    check_op(lines, "networks.generator", seed, &inputs, 4, move |t, vs| {
        let mut g = params.vars(t);
        let slots = g.slots();
        debug_assert_eq!(slots.len(), vs.len());
        for (slot, &v) in slots.into_iter().zip(vs) {
            *slot = v;
        }
        let out = generate(t, &ri, &rp, &tp, &masks, &g)?;
        let tv = t.constant(target.clone());
        let d = t.sub(out, tv)?;
        let a = t.abs(d)?;
        t.mean(a)
    })?;

    let mut disc = DiscriminatorParams::init(&mut r);
    disc.for_each_mut("d", &mut |_, t| {
        if t.shape().len() == 1 {
            *t = uniform(&mut rng(seed ^ 0x200), &[t.len()], -1.0, 1.0);
        }
    });
    let dimg = uniform(&mut r, &[3, 16, 16], 0.0, 1.0);
    let mut inputs = Vec::new();
    disc.for_each("d", &mut |_, t| inputs.push(t.clone()));
    check_op(lines, "networks.discriminator", seed, &inputs, 10, move |t, vs| {
        let mut d = disc.vars(t);
        let slots = d.slots();
        for (slot, &v) in slots.into_iter().zip(vs) {
            *slot = v;
        }
        let iv = t.constant(dimg.clone());
        let out = discriminate(t, iv, &d)?;
        let sum = t.add(out.means[0], out.means[1])?;
        let sq = t.mul(sum, sum)?;
        t.mean(sq)
    })?;
    Ok(())
}

fn check_losses(seed: u64, lines: &mut Vec<(String, f64)>) -> Result<()> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 6, 6], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 6, 6], -1.0, 1.0);
    check_op(lines, "losses.l1", seed, &[a, b], FULL, |t, v| l1_loss(t, v[0], v[1]))?;

    let r0 = uniform(&mut r, &[1], -1.0, 1.0);
    let r1 = uniform(&mut r, &[1], -1.0, 1.0);
    let f0 = uniform(&mut r, &[1], -1.0, 1.0);
    let f1 = uniform(&mut r, &[1], -1.0, 1.0);
    check_op(lines, "losses.adv_d", seed, &[r0, r1, f0.clone(), f1.clone()], FULL, |t, v| {
        adv_loss_d(t, &[v[0], v[1]], &[v[2], v[3]])
    })?;
    check_op(lines, "losses.adv_g", seed, &[f0, f1], FULL, |t, v| adv_loss_g(t, &[v[0], v[1]]))?;

    let g = uniform(&mut r, &[3, 4, 5], -1.0, 1.0);
    check_op(lines, "losses.gram", seed, &[g], FULL, |t, v| gram(t, v[0]))?;

    let net = FrozenFeatureNet::init(seed.wrapping_add(42));
    let ig = uniform(&mut r, &[3, 16, 16], 0.0, 1.0);
    let it = uniform(&mut r, &[3, 16, 16], 0.0, 1.0);
    let np = net.clone();
    check_op(lines, "losses.perceptual", seed, &[ig.clone(), it.clone()], 12, move |t, v| {
        let nv = np.vars(t);
        perceptual_loss(t, v[0], v[1], &nv)
    })?;
    let np = net.clone();
    check_op(lines, "losses.style", seed, &[ig.clone(), it.clone()], 12, move |t, v| {
        let nv = np.vars(t);
        style_loss(t, v[0], v[1], &nv)
    })?;

    let masks = label_masks(&mut r, 16, 16);
    let np = net.clone();
    let pm = masks.clone();
    check_op(lines, "losses.partial", seed, &[ig.clone(), it.clone()], 8, move |t, v| {
        let nv = np.vars(t);
        partial_loss(t, v[0], v[1], &pm, &nv)
    })?;

    let mut disc = DiscriminatorParams::init(&mut r);
    disc.for_each_mut("d", &mut |_, t| {
        if t.shape().len() == 1 {
            *t = uniform(&mut rng(seed ^ 0x300), &[t.len()], -1.0, 1.0);
        }
    });
    check_op(lines, "losses.total", seed, &[ig], 20, move |t, v| {
        let i_g = v[0];
        let i_t = t.constant(it.clone());
        let nv = net.vars(t);
        let dv = disc.vars_const(t);
        let out = discriminate(t, i_g, &dv)?;
        let terms = LossTerms {
            l1: l1_loss(t, i_g, i_t)?,
            adv: adv_loss_g(t, &out.means)?,
            perceptual: perceptual_loss(t, i_g, i_t, &nv)?,
            style: style_loss(t, i_g, i_t, &nv)?,
            partial: partial_loss(t, i_g, i_t, &masks, &nv)?,
        };
        total_loss(t, &terms, &LossWeights::default())
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_rejected() {
        assert!(check_module("bogus", 0).is_err());
    }

    #[test]
    fn tensor_module_within_tolerance() {
        let report = check_module("tensor", 0).unwrap();
        assert_eq!(report.lines.len(), 31);
        assert!(report.passed(), "failures: {:?} worst {}", report.failures(), report.worst());
    }

    #[test]
    fn fourier_module_within_tolerance() {
        let report = check_module("fourier", 0).unwrap();
        assert_eq!(report.lines.len(), 3);
        assert!(report.passed(), "failures: {:?} worst {}", report.failures(), report.worst());
    }

    #[test]
    fn report_order_is_stable() {
        let a = check_module("attention", 1).unwrap();
        let b = check_module("attention", 2).unwrap();
        let na: Vec<_> = a.lines.iter().map(|(n, _)| n.clone()).collect();
        let nb: Vec<_> = b.lines.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(na, nb);
    }
}
