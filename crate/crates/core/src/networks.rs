//! Generator and discriminator assemblies.
//!
//! The generator encodes (reference image, reference pose, target pose) into
//! F_R, the target pose alone into F_T, mixes them with the transformer stack
//! (or a conv fallback when ablated), and decodes under AdaIN modulation by
//! the texture code F_C from the part encoder. The discriminator scores an
//! image at two scales with independent residual conv stacks.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{transformer_stack, TokenSequence, TransformerModuleParams, TransformerModuleVars};
use crate::error::{Error, Result};
use crate::parts::{texture_code, PartEncoderParams, PartEncoderVars, PartLabel, PartMaskSet};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture knobs for [`GeneratorParams::init`].
#[derive(Debug, Clone)]
pub struct GeneratorArch {
    /// Feature channels at the bottleneck; must be divisible by 4 and by `heads`.
    pub d: usize,
    pub heads: usize,
    /// Transformer modules in the stack (ignored when `use_transformer` is off).
    pub n_modules: usize,
    /// Texture code length S.
    pub s_texture: usize,
    /// Pose heatmap channels K.
    pub k_pose: usize,
    pub use_transformer: bool,
    pub use_fft: bool,
    pub exclude: Vec<PartLabel>,
    pub eps: f64,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        GeneratorArch {
            d: 64,
            heads: 2,
            n_modules: 2,
            s_texture: 128,
            k_pose: 10,
            use_transformer: true,
            use_fft: true,
            exclude: Vec::new(),
            eps: 1e-5,
        }
    }
}

fn conv_init(oc: usize, ic: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / (ic * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = oc * ic * k * k;
    Tensor::new(vec![oc, ic, k, k], (0..n).map(|_| dist.sample(rng)).collect())
        .expect("static shape")
}

fn dense_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("valid std");
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect())
        .expect("static shape")
}

/// Linear head mapping the texture code to per-channel (gamma, beta).
/// Gamma biases start at 1 so an untrained head leaves scales near identity.
#[derive(Debug, Clone)]
struct AffineHead {
    wg: Tensor,
    bg: Tensor,
    wb: Tensor,
    bb: Tensor,
}

impl AffineHead {
    fn init(s: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        AffineHead {
            wg: dense_init(s, c, rng),
            bg: Tensor::full(&[c], 1.0),
            wb: dense_init(s, c, rng),
            bb: Tensor::zeros(&[c]),
        }
    }

    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.wg"), &self.wg);
        f(format!("{prefix}.bg"), &self.bg);
        f(format!("{prefix}.wb"), &self.wb);
        f(format!("{prefix}.bb"), &self.bb);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.wg"), &mut self.wg);
        f(format!("{prefix}.bg"), &mut self.bg);
        f(format!("{prefix}.wb"), &mut self.wb);
        f(format!("{prefix}.bb"), &mut self.bb);
    }
}

struct AffineHeadVars {
    wg: Var,
    bg: Var,
    wb: Var,
    bb: Var,
}

impl AffineHeadVars {
    fn slots(&mut self) -> Vec<&mut Var> {
        vec![&mut self.wg, &mut self.bg, &mut self.wb, &mut self.bb]
    }
}

impl AffineHead {
    fn vars(&self, tape: &mut Tape) -> AffineHeadVars {
        AffineHeadVars {
            wg: tape.leaf(self.wg.clone()),
            bg: tape.leaf(self.bg.clone()),
            wb: tape.leaf(self.wb.clone()),
            bb: tape.leaf(self.bb.clone()),
        }
    }
}

/// Conv fallback used when the transformer stack is ablated: F_T is
/// channel-concatenated once at entry, merged back to d channels, then two
/// conv+IN+ReLU residual blocks refine the map.
#[derive(Debug, Clone)]
pub struct FallbackParams {
    merge_w: Tensor,
    merge_b: Tensor,
    res1_w: Tensor,
    res1_b: Tensor,
    res2_w: Tensor,
    res2_b: Tensor,
}

pub struct FallbackVars {
    merge_w: Var,
    merge_b: Var,
    res1_w: Var,
    res1_b: Var,
    res2_w: Var,
    res2_b: Var,
}

impl FallbackParams {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        FallbackParams {
            merge_w: conv_init(d, 2 * d, 3, rng),
            merge_b: Tensor::zeros(&[d]),
            res1_w: conv_init(d, d, 3, rng),
            res1_b: Tensor::zeros(&[d]),
            res2_w: conv_init(d, d, 3, rng),
            res2_b: Tensor::zeros(&[d]),
        }
    }

    fn vars(&self, tape: &mut Tape) -> FallbackVars {
        FallbackVars {
            merge_w: tape.leaf(self.merge_w.clone()),
            merge_b: tape.leaf(self.merge_b.clone()),
            res1_w: tape.leaf(self.res1_w.clone()),
            res1_b: tape.leaf(self.res1_b.clone()),
            res2_w: tape.leaf(self.res2_w.clone()),
            res2_b: tape.leaf(self.res2_b.clone()),
        }
    }

    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.merge_w"), &self.merge_w);
        f(format!("{prefix}.merge_b"), &self.merge_b);
        f(format!("{prefix}.res1_w"), &self.res1_w);
        f(format!("{prefix}.res1_b"), &self.res1_b);
        f(format!("{prefix}.res2_w"), &self.res2_w);
        f(format!("{prefix}.res2_b"), &self.res2_b);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.merge_w"), &mut self.merge_w);
        f(format!("{prefix}.merge_b"), &mut self.merge_b);
        f(format!("{prefix}.res1_w"), &mut self.res1_w);
        f(format!("{prefix}.res1_b"), &mut self.res1_b);
        f(format!("{prefix}.res2_w"), &mut self.res2_w);
        f(format!("{prefix}.res2_b"), &mut self.res2_b);
    }
}

impl FallbackVars {
    fn slots(&mut self) -> Vec<&mut Var> {
        vec![
            &mut self.merge_w,
            &mut self.merge_b,
            &mut self.res1_w,
            &mut self.res1_b,
            &mut self.res2_w,
            &mut self.res2_b,
        ]
    }
}

/// All generator learnables plus the architecture they were built for.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    arch: GeneratorArch,
    ref_w1: Tensor,
    ref_b1: Tensor,
    ref_w2: Tensor,
    ref_b2: Tensor,
    pose_w1: Tensor,
    pose_b1: Tensor,
    pose_w2: Tensor,
    pose_b2: Tensor,
    stack: Vec<TransformerModuleParams>,
    fallback: Option<FallbackParams>,
    pub parts: PartEncoderParams,
    dec1_w: Tensor,
    dec1_b: Tensor,
    dec2_w: Tensor,
    dec2_b: Tensor,
    rgb_w: Tensor,
    rgb_b: Tensor,
    ada1: AffineHead,
    ada2: AffineHead,
}

/// Tape handles for every generator leaf.
pub struct GeneratorVars {
    pub eps: f64,
    k_pose: usize,
    ref_w1: Var,
    ref_b1: Var,
    ref_w2: Var,
    ref_b2: Var,
    pose_w1: Var,
    pose_b1: Var,
    pose_w2: Var,
    pose_b2: Var,
    stack: Vec<TransformerModuleVars>,
    fallback: Option<FallbackVars>,
    pub parts: PartEncoderVars,
    dec1_w: Var,
    dec1_b: Var,
    dec2_w: Var,
    dec2_b: Var,
    rgb_w: Var,
    rgb_b: Var,
    ada1: AffineHeadVars,
    ada2: AffineHeadVars,
}

impl GeneratorParams {
    pub fn init(arch: &GeneratorArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = arch.d;
        if d == 0 || d % 4 != 0 {
            return Err(Error::Config(format!("d={d} must be a positive multiple of 4")));
        }
        if arch.k_pose == 0 {
            return Err(Error::Config("k_pose must be positive".into()));
        }
        let mid = d / 2;
        let in_ref = 3 + 2 * arch.k_pose;
        let ref_w1 = conv_init(mid, in_ref, 3, rng);
        let ref_b1 = Tensor::zeros(&[mid]);
        let ref_w2 = conv_init(d, mid, 3, rng);
        let ref_b2 = Tensor::zeros(&[d]);
        let pose_w1 = conv_init(mid, arch.k_pose, 3, rng);
        let pose_b1 = Tensor::zeros(&[mid]);
        let pose_w2 = conv_init(d, mid, 3, rng);
        let pose_b2 = Tensor::zeros(&[d]);
        let (stack, fallback) = if arch.use_transformer {
            if arch.n_modules == 0 {
                return Err(Error::Config("transformer stack needs at least one module".into()));
            }
            let mut stack = Vec::with_capacity(arch.n_modules);
            for _ in 0..arch.n_modules {
                stack.push(TransformerModuleParams::init(d, arch.heads, arch.use_fft, rng)?);
            }
            (stack, None)
        } else {
            (Vec::new(), Some(FallbackParams::init(d, rng)))
        };
        let parts = PartEncoderParams::init(arch.s_texture, &arch.exclude, rng)?;
        Ok(GeneratorParams {
            arch: arch.clone(),
            ref_w1,
            ref_b1,
            ref_w2,
            ref_b2,
            pose_w1,
            pose_b1,
            pose_w2,
            pose_b2,
            stack,
            fallback,
            parts,
            dec1_w: conv_init(mid, d, 3, rng),
            dec1_b: Tensor::zeros(&[mid]),
            dec2_w: conv_init(d / 4, mid, 3, rng),
            dec2_b: Tensor::zeros(&[d / 4]),
            rgb_w: conv_init(3, d / 4, 3, rng),
            rgb_b: Tensor::zeros(&[3]),
            ada1: AffineHead::init(arch.s_texture, mid, rng),
            ada2: AffineHead::init(arch.s_texture, d / 4, rng),
        })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn vars(&self, tape: &mut Tape) -> GeneratorVars {
        GeneratorVars {
            eps: self.arch.eps,
            k_pose: self.arch.k_pose,
            ref_w1: tape.leaf(self.ref_w1.clone()),
            ref_b1: tape.leaf(self.ref_b1.clone()),
            ref_w2: tape.leaf(self.ref_w2.clone()),
            ref_b2: tape.leaf(self.ref_b2.clone()),
            pose_w1: tape.leaf(self.pose_w1.clone()),
            pose_b1: tape.leaf(self.pose_b1.clone()),
            pose_w2: tape.leaf(self.pose_w2.clone()),
            pose_b2: tape.leaf(self.pose_b2.clone()),
            stack: self.stack.iter().map(|m| m.vars(tape)).collect(),
            fallback: self.fallback.as_ref().map(|f| f.vars(tape)),
            parts: self.parts.vars(tape),
            dec1_w: tape.leaf(self.dec1_w.clone()),
            dec1_b: tape.leaf(self.dec1_b.clone()),
            dec2_w: tape.leaf(self.dec2_w.clone()),
            dec2_b: tape.leaf(self.dec2_b.clone()),
            rgb_w: tape.leaf(self.rgb_w.clone()),
            rgb_b: tape.leaf(self.rgb_b.clone()),
            ada1: self.ada1.vars(tape),
            ada2: self.ada2.vars(tape),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.ref_w1"), &self.ref_w1);
        f(format!("{prefix}.ref_b1"), &self.ref_b1);
        f(format!("{prefix}.ref_w2"), &self.ref_w2);
        f(format!("{prefix}.ref_b2"), &self.ref_b2);
        f(format!("{prefix}.pose_w1"), &self.pose_w1);
        f(format!("{prefix}.pose_b1"), &self.pose_b1);
        f(format!("{prefix}.pose_w2"), &self.pose_w2);
        f(format!("{prefix}.pose_b2"), &self.pose_b2);
        for (i, m) in self.stack.iter().enumerate() {
            m.for_each(&format!("{prefix}.stack{i}"), f);
        }
        if let Some(fb) = &self.fallback {
            fb.for_each(&format!("{prefix}.fallback"), f);
        }
        self.parts.for_each(&format!("{prefix}.parts"), f);
        f(format!("{prefix}.dec1_w"), &self.dec1_w);
        f(format!("{prefix}.dec1_b"), &self.dec1_b);
        f(format!("{prefix}.dec2_w"), &self.dec2_w);
        f(format!("{prefix}.dec2_b"), &self.dec2_b);
        f(format!("{prefix}.rgb_w"), &self.rgb_w);
        f(format!("{prefix}.rgb_b"), &self.rgb_b);
        self.ada1.for_each(&format!("{prefix}.ada1"), f);
        self.ada2.for_each(&format!("{prefix}.ada2"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.ref_w1"), &mut self.ref_w1);
        f(format!("{prefix}.ref_b1"), &mut self.ref_b1);
        f(format!("{prefix}.ref_w2"), &mut self.ref_w2);
        f(format!("{prefix}.ref_b2"), &mut self.ref_b2);
        f(format!("{prefix}.pose_w1"), &mut self.pose_w1);
        f(format!("{prefix}.pose_b1"), &mut self.pose_b1);
        f(format!("{prefix}.pose_w2"), &mut self.pose_w2);
        f(format!("{prefix}.pose_b2"), &mut self.pose_b2);
        for (i, m) in self.stack.iter_mut().enumerate() {
            m.for_each_mut(&format!("{prefix}.stack{i}"), f);
        }
        if let Some(fb) = &mut self.fallback {
            fb.for_each_mut(&format!("{prefix}.fallback"), f);
        }
        self.parts.for_each_mut(&format!("{prefix}.parts"), f);
        f(format!("{prefix}.dec1_w"), &mut self.dec1_w);
        f(format!("{prefix}.dec1_b"), &mut self.dec1_b);
        f(format!("{prefix}.dec2_w"), &mut self.dec2_w);
        f(format!("{prefix}.dec2_b"), &mut self.dec2_b);
        f(format!("{prefix}.rgb_w"), &mut self.rgb_w);
        f(format!("{prefix}.rgb_b"), &mut self.rgb_b);
        self.ada1.for_each_mut(&format!("{prefix}.ada1"), f);
        self.ada2.for_each_mut(&format!("{prefix}.ada2"), f);
    }

    /// Total learnable scalar count.
    pub fn count_params(&self) -> usize {
        let mut n = 0;
        self.for_each("g", &mut |_, t| n += t.len());
        n
    }
}

impl GeneratorVars {
    /// Leaf handles in [`GeneratorParams::for_each`] order; used to rebind a
    /// whole parameter set onto externally supplied tape leaves.
    pub fn slots(&mut self) -> Vec<&mut Var> {
        let mut v = vec![
            &mut self.ref_w1,
            &mut self.ref_b1,
            &mut self.ref_w2,
            &mut self.ref_b2,
            &mut self.pose_w1,
            &mut self.pose_b1,
            &mut self.pose_w2,
            &mut self.pose_b2,
        ];
        for m in &mut self.stack {
            v.extend(m.slots());
        }
        if let Some(fb) = &mut self.fallback {
            v.extend(fb.slots());
        }
        v.extend(self.parts.slots());
        v.push(&mut self.dec1_w);
        v.push(&mut self.dec1_b);
        v.push(&mut self.dec2_w);
        v.push(&mut self.dec2_b);
        v.push(&mut self.rgb_w);
        v.push(&mut self.rgb_b);
        v.extend(self.ada1.slots());
        v.extend(self.ada2.slots());
        v
    }
}

fn enc_block(tape: &mut Tape, x: Var, w: Var, b: Var, eps: f64) -> Result<Var> {
    let x = tape.conv2d(x, w, b, 2)?;
    let x = tape.instance_norm(x, eps)?;
    tape.relu(x)
}

fn check_spatial(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    let (_, h, w) = tape.value(v).dims3()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidShape {
            op,
            shape: tape.value(v).shape().to_vec(),
            reason: "spatial size must be divisible by 4".into(),
        });
    }
    Ok((h, w))
}

/// Concatenates (image, reference pose, target pose) by channel and encodes
/// to F_R at quarter resolution with d channels.
pub fn encode_reference(
    tape: &mut Tape,
    ref_img: Var,
    ref_pose: Var,
    tgt_pose: Var,
    g: &GeneratorVars,
) -> Result<Var> {
    let (h, w) = check_spatial(tape, ref_img, "encode_reference")?;
    for &p in &[ref_pose, tgt_pose] {
        let (k, ph, pw) = tape.value(p).dims3()?;
        if (ph, pw) != (h, w) || k != g.k_pose {
            return Err(Error::ShapeMismatch {
                op: "encode_reference",
                lhs: vec![g.k_pose, h, w],
                rhs: tape.value(p).shape().to_vec(),
            });
        }
    }
    let x = tape.concat_channels(&[ref_img, ref_pose, tgt_pose])?;
    let x = enc_block(tape, x, g.ref_w1, g.ref_b1, g.eps)?;
    enc_block(tape, x, g.ref_w2, g.ref_b2, g.eps)
}

/// Encodes the target pose heatmaps alone to F_T, mirroring the reference
/// encoder with independent weights.
pub fn encode_target_pose(tape: &mut Tape, tgt_pose: Var, g: &GeneratorVars) -> Result<Var> {
    check_spatial(tape, tgt_pose, "encode_target_pose")?;
    let (k, _, _) = tape.value(tgt_pose).dims3()?;
    if k != g.k_pose {
        return Err(Error::ShapeMismatch {
            op: "encode_target_pose",
            lhs: vec![g.k_pose],
            rhs: vec![k],
        });
    }
    let x = enc_block(tape, tgt_pose, g.pose_w1, g.pose_b1, g.eps)?;
    enc_block(tape, x, g.pose_w2, g.pose_b2, g.eps)
}

/// Mixes F_R toward the target pose: transformer stack when present,
/// otherwise the conv fallback.
pub fn pose_transfer(tape: &mut Tape, f_r: Var, f_t: Var, g: &GeneratorVars) -> Result<Var> {
    if let Some(fb) = &g.fallback {
        let x = tape.concat_channels(&[f_r, f_t])?;
        let mut x = tape.conv2d(x, fb.merge_w, fb.merge_b, 1)?;
        for (w, b) in [(fb.res1_w, fb.res1_b), (fb.res2_w, fb.res2_b)] {
            let r = tape.conv2d(x, w, b, 1)?;
            let r = tape.instance_norm(r, g.eps)?;
            let r = tape.relu(r)?;
            x = tape.add(x, r)?;
        }
        Ok(x)
    } else {
        let fr = TokenSequence::from_map(tape, f_r)?;
        let ft = TokenSequence::from_map(tape, f_t)?;
        let out = transformer_stack(tape, &fr, &ft, &g.stack, g.eps)?;
        out.to_map(tape)
    }
}

fn affine(tape: &mut Tape, code: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.value(code).len();
    let row = tape.reshape(code, &[1, s])?;
    let out = tape.matmul(row, w)?;
    let c = tape.value(out).len();
    let flat = tape.reshape(out, &[c])?;
    tape.add(flat, b)
}

fn adain(tape: &mut Tape, x: Var, code: Var, head: &AffineHeadVars, eps: f64) -> Result<Var> {
    let gamma = affine(tape, code, head.wg, head.bg)?;
    let beta = affine(tape, code, head.wb, head.bb)?;
    let x = tape.instance_norm(x, eps)?;
    let x = tape.scale_channels(x, gamma)?;
    tape.shift_channels(x, beta)
}

/// Decodes the pose-transferred feature map under AdaIN modulation by the
/// texture code, returning an RGB image in (0,1).
pub fn decode(tape: &mut Tape, f_rt: Var, f_c: Var, g: &GeneratorVars) -> Result<Var> {
    let x = tape.upsample_nearest2(f_rt)?;
    let x = tape.conv2d(x, g.dec1_w, g.dec1_b, 1)?;
    let x = adain(tape, x, f_c, &g.ada1, g.eps)?;
    let x = tape.relu(x)?;
    let x = tape.upsample_nearest2(x)?;
    let x = tape.conv2d(x, g.dec2_w, g.dec2_b, 1)?;
    let x = adain(tape, x, f_c, &g.ada2, g.eps)?;
    let x = tape.relu(x)?;
    let x = tape.conv2d(x, g.rgb_w, g.rgb_b, 1)?;
    tape.sigmoid(x)
}

/// Full generator forward pass from raw sample tensors.
pub fn generate(
    tape: &mut Tape,
    ref_img: &Tensor,
    ref_pose: &Tensor,
    tgt_pose: &Tensor,
    ref_masks: &PartMaskSet,
    g: &GeneratorVars,
) -> Result<Var> {
    let ri = tape.constant(ref_img.clone());
    let rp = tape.constant(ref_pose.clone());
    let tp = tape.constant(tgt_pose.clone());
    let f_r = encode_reference(tape, ri, rp, tp, g)?;
    let f_t = encode_target_pose(tape, tp, g)?;
    let f_rt = pose_transfer(tape, f_r, f_t, g)?;
    let f_c = texture_code(tape, ref_img, ref_masks, &g.parts)?;
    decode(tape, f_rt, f_c, g)
}

const DISC_MIN: usize = 16;
const DISC_C1: usize = 32;
const DISC_C2: usize = 64;

/// One residual conv stack scoring image patches at a single scale.
#[derive(Debug, Clone)]
struct DiscBranch {
    w1: Tensor,
    b1: Tensor,
    res1_w: Tensor,
    res1_b: Tensor,
    w2: Tensor,
    b2: Tensor,
    res2_w: Tensor,
    res2_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

impl DiscBranch {
    fn init(rng: &mut ChaCha8Rng) -> Self {
        DiscBranch {
            w1: conv_init(DISC_C1, 3, 3, rng),
            b1: Tensor::zeros(&[DISC_C1]),
            res1_w: conv_init(DISC_C1, DISC_C1, 3, rng),
            res1_b: Tensor::zeros(&[DISC_C1]),
            w2: conv_init(DISC_C2, DISC_C1, 3, rng),
            b2: Tensor::zeros(&[DISC_C2]),
            res2_w: conv_init(DISC_C2, DISC_C2, 3, rng),
            res2_b: Tensor::zeros(&[DISC_C2]),
            out_w: conv_init(1, DISC_C2, 3, rng),
            out_b: Tensor::zeros(&[1]),
        }
    }

    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.res1_w"), &self.res1_w);
        f(format!("{prefix}.res1_b"), &self.res1_b);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
        f(format!("{prefix}.res2_w"), &self.res2_w);
        f(format!("{prefix}.res2_b"), &self.res2_b);
        f(format!("{prefix}.out_w"), &self.out_w);
        f(format!("{prefix}.out_b"), &self.out_b);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.res1_w"), &mut self.res1_w);
        f(format!("{prefix}.res1_b"), &mut self.res1_b);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
        f(format!("{prefix}.res2_w"), &mut self.res2_w);
        f(format!("{prefix}.res2_b"), &mut self.res2_b);
        f(format!("{prefix}.out_w"), &mut self.out_w);
        f(format!("{prefix}.out_b"), &mut self.out_b);
    }
}

struct DiscBranchVars {
    w1: Var,
    b1: Var,
    res1_w: Var,
    res1_b: Var,
    w2: Var,
    b2: Var,
    res2_w: Var,
    res2_b: Var,
    out_w: Var,
    out_b: Var,
}

impl DiscBranchVars {
    fn slots(&mut self) -> Vec<&mut Var> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.res1_w,
            &mut self.res1_b,
            &mut self.w2,
            &mut self.b2,
            &mut self.res2_w,
            &mut self.res2_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }
}

impl DiscBranch {
    fn vars_by(&self, tape: &mut Tape, leaf: bool) -> DiscBranchVars {
        let mk = |tape: &mut Tape, t: &Tensor| {
            if leaf { tape.leaf(t.clone()) } else { tape.constant(t.clone()) }
        };
        DiscBranchVars {
            w1: mk(tape, &self.w1),
            b1: mk(tape, &self.b1),
            res1_w: mk(tape, &self.res1_w),
            res1_b: mk(tape, &self.res1_b),
            w2: mk(tape, &self.w2),
            b2: mk(tape, &self.b2),
            res2_w: mk(tape, &self.res2_w),
            res2_b: mk(tape, &self.res2_b),
            out_w: mk(tape, &self.out_w),
            out_b: mk(tape, &self.out_b),
        }
    }

    fn vars(&self, tape: &mut Tape) -> DiscBranchVars {
        self.vars_by(tape, true)
    }
}

fn disc_branch(tape: &mut Tape, img: Var, b: &DiscBranchVars) -> Result<Var> {
    let x = tape.conv2d(img, b.w1, b.b1, 2)?;
    let mut x = tape.relu(x)?;
    let r = tape.conv2d(x, b.res1_w, b.res1_b, 1)?;
    let r = tape.relu(r)?;
    x = tape.add(x, r)?;
    let x = tape.conv2d(x, b.w2, b.b2, 2)?;
    let mut x = tape.relu(x)?;
    let r = tape.conv2d(x, b.res2_w, b.res2_b, 1)?;
    let r = tape.relu(r)?;
    x = tape.add(x, r)?;
    tape.conv2d(x, b.out_w, b.out_b, 1)
}

/// Two-scale patch discriminator with independent branch weights.
#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    full: DiscBranch,
    half: DiscBranch,
}

pub struct DiscriminatorVars {
    full: DiscBranchVars,
    half: DiscBranchVars,
}

impl DiscriminatorVars {
    /// Leaf handles in [`DiscriminatorParams::for_each`] order.
    pub fn slots(&mut self) -> Vec<&mut Var> {
        let mut v = self.full.slots();
        v.extend(self.half.slots());
        v
    }
}

impl DiscriminatorParams {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        DiscriminatorParams { full: DiscBranch::init(rng), half: DiscBranch::init(rng) }
    }

    pub fn vars(&self, tape: &mut Tape) -> DiscriminatorVars {
        DiscriminatorVars { full: self.full.vars(tape), half: self.half.vars(tape) }
    }

    /// Constant handles for tapes that score images without ever updating
    /// the discriminator, so its gradients are never materialized.
    pub fn vars_const(&self, tape: &mut Tape) -> DiscriminatorVars {
        DiscriminatorVars {
            full: self.full.vars_by(tape, false),
            half: self.half.vars_by(tape, false),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.full.for_each(&format!("{prefix}.full"), f);
        self.half.for_each(&format!("{prefix}.half"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.full.for_each_mut(&format!("{prefix}.full"), f);
        self.half.for_each_mut(&format!("{prefix}.half"), f);
    }

    pub fn count_params(&self) -> usize {
        let mut n = 0;
        self.for_each("d", &mut |_, t| n += t.len());
        n
    }
}

/// Patch logit maps and their per-scale means.
pub struct DiscOutput {
    pub maps: Vec<Var>,
    pub means: Vec<Var>,
}

/// Scores an RGB image at full and half resolution. Logits are raw; the loss
/// applies the sigmoid.
pub fn discriminate(tape: &mut Tape, img: Var, d: &DiscriminatorVars) -> Result<DiscOutput> {
    let (c, h, w) = tape.value(img).dims3()?;
    if c != 3 || h < DISC_MIN || w < DISC_MIN {
        return Err(Error::InvalidShape {
            op: "discriminate",
            shape: tape.value(img).shape().to_vec(),
            reason: format!("need a 3-channel image at least {DISC_MIN}x{DISC_MIN}"),
        });
    }
    let full = disc_branch(tape, img, &d.full)?;
    let small = tape.avg_pool2(img)?;
    let half = disc_branch(tape, small, &d.half)?;
    let maps = vec![full, half];
    let means = maps.iter().map(|&m| tape.mean(m)).collect::<Result<Vec<_>>>()?;
    Ok(DiscOutput { maps, means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parts::PART_COUNT;
    use crate::tensor::grad_check_sampled;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random01(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn random_masks(h: usize, w: usize, seed: u64) -> PartMaskSet {
        let mut r = rng(seed);
        let labels: Vec<u8> = (0..h * w).map(|_| r.random_range(0..PART_COUNT as u8)).collect();
        PartMaskSet::from_labels(h, w, &labels).unwrap()
    }

    fn tiny_arch() -> GeneratorArch {
        GeneratorArch {
            d: 8,
            heads: 2,
            n_modules: 1,
            s_texture: 8,
            k_pose: 3,
            ..GeneratorArch::default()
        }
    }

    #[test]
    fn reference_encoder_shape_contract() {
        let params = GeneratorParams::init(&GeneratorArch::default(), &mut rng(1)).unwrap();
        let mut tape = Tape::new();
        let g = params.vars(&mut tape);
        let img = tape.constant(random01(&[3, 64, 48], 2));
        let rp = tape.constant(random01(&[10, 64, 48], 3));
        let tp = tape.constant(random01(&[10, 64, 48], 4));
        let f_r = encode_reference(&mut tape, img, rp, tp, &g).unwrap();
        assert_eq!(tape.value(f_r).shape(), [64, 16, 12]);
        let f_t = encode_target_pose(&mut tape, tp, &g).unwrap();
        assert_eq!(tape.value(f_t).shape(), [64, 16, 12]);
    }

    #[test]
    fn encoders_reject_bad_shapes() {
        let params = GeneratorParams::init(&tiny_arch(), &mut rng(2)).unwrap();
        let mut tape = Tape::new();
        let g = params.vars(&mut tape);
        let img = tape.constant(random01(&[3, 16, 12], 5));
        let good = tape.constant(random01(&[3, 16, 12], 6));
        let short = tape.constant(random01(&[2, 16, 12], 7));
        assert!(encode_reference(&mut tape, img, good, short, &g).is_err());
        let off = tape.constant(random01(&[3, 16, 10], 8));
        assert!(encode_reference(&mut tape, img, good, off, &g).is_err());
        let odd = tape.constant(random01(&[3, 14, 12], 9));
        assert!(encode_target_pose(&mut tape, odd, &g).is_err());
    }

    #[test]
    fn zero_inputs_give_bias_only_output() {
        // with zero-initialized biases the whole encoder collapses to zero:
        // conv of zeros is the bias, IN of a constant map is zero
        let params = GeneratorParams::init(&tiny_arch(), &mut rng(3)).unwrap();
        let mut tape = Tape::new();
        let g = params.vars(&mut tape);
        let img = tape.constant(Tensor::zeros(&[3, 16, 12]));
        let pose = tape.constant(Tensor::zeros(&[3, 16, 12]));
        let f_r = encode_reference(&mut tape, img, pose, pose, &g).unwrap();
        assert!(tape.value(f_r).data().iter().all(|&v| v == 0.0));
        let f_t = encode_target_pose(&mut tape, pose, &g).unwrap();
        assert!(tape.value(f_t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_poses_give_distinct_features() {
        let params = GeneratorParams::init(&tiny_arch(), &mut rng(4)).unwrap();
        let mut tape = Tape::new();
        let g = params.vars(&mut tape);
        let pa = tape.constant(random01(&[3, 16, 12], 10));
        let pb = tape.constant(random01(&[3, 16, 12], 11));
        let fa = encode_target_pose(&mut tape, pa, &g).unwrap();
        let fb = encode_target_pose(&mut tape, pb, &g).unwrap();
        let diff = tape.value(fa).max_abs_diff(tape.value(fb));
        assert!(diff > 1e-6, "distinct poses collapsed: {diff}");
    }

    #[test]
    fn generate_shape_range_and_determinism() {
        let params = GeneratorParams::init(&tiny_arch(), &mut rng(5)).unwrap();
        let img = random01(&[3, 16, 12], 12);
        let rp = random01(&[3, 16, 12], 13);
        let tp = random01(&[3, 16, 12], 14);
        let masks = random_masks(16, 12, 15);
        let run = || {
            let mut tape = Tape::new();
            let g = params.vars(&mut tape);
            let out = generate(&mut tape, &img, &rp, &tp, &masks, &g).unwrap();
            tape.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), [3, 16, 12]);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let b = run();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn texture_change_moves_output() {
        let params = GeneratorParams::init(&tiny_arch(), &mut rng(6)).unwrap();
        let img_a = random01(&[3, 16, 12], 16);
        let img_b = random01(&[3, 16, 12], 17);
        let rp = random01(&[3, 16, 12], 18);
        let tp = random01(&[3, 16, 12], 19);
        let masks = random_masks(16, 12, 20);
        let mut tape = Tape::new();
        let g = params.vars(&mut tape);
        let oa = generate(&mut tape, &img_a, &rp, &tp, &masks, &g).unwrap();
        let ob = generate(&mut tape, &img_b, &rp, &tp, &masks, &g).unwrap();
        assert!(tape.value(oa).max_abs_diff(tape.value(ob)) > 1e-9);
    }

    #[test]
    fn fallback_path_works_and_differs() {
        let mut arch = tiny_arch();
        arch.use_transformer = false;
        let params = GeneratorParams::init(&arch, &mut rng(7)).unwrap();
        let img = random01(&[3, 16, 12], 21);
        let rp = random01(&[3, 16, 12], 22);
        let tp = random01(&[3, 16, 12], 23);
        let masks = random_masks(16, 12, 24);
        let mut tape = Tape::new();
        let g = params.vars(&mut tape);
        let out = generate(&mut tape, &img, &rp, &tp, &masks, &g).unwrap();
        assert_eq!(tape.value(out).shape(), [3, 16, 12]);
        assert!(tape.value(out).is_finite());
    }

    #[test]
    fn ablations_strictly_shrink_param_count() {
        let full = GeneratorParams::init(&GeneratorArch::default(), &mut rng(8)).unwrap();
        let wo_trans = GeneratorParams::init(
            &GeneratorArch { use_transformer: false, ..GeneratorArch::default() },
            &mut rng(8),
        )
        .unwrap();
        let wo_fft = GeneratorParams::init(
            &GeneratorArch { use_fft: false, ..GeneratorArch::default() },
            &mut rng(8),
        )
        .unwrap();
        let wo_face = GeneratorParams::init(
            &GeneratorArch { exclude: vec![PartLabel::Face], ..GeneratorArch::default() },
            &mut rng(8),
        )
        .unwrap();
        let n_full = full.count_params();
        assert!(wo_trans.count_params() < n_full);
        assert!(wo_fft.count_params() < n_full);
        assert!(wo_face.count_params() < n_full);
        // counts are construction-determined, not RNG-dependent
        let again = GeneratorParams::init(&GeneratorArch::default(), &mut rng(99)).unwrap();
        assert_eq!(again.count_params(), n_full);
    }

    #[test]
    fn conv_param_arithmetic_matches_hand_count() {
        // a single 3x3 conv mapping 2 -> 4 channels with bias carries
        // 4*2*3*3 + 4 = 76 scalars
        let w = conv_init(4, 2, 3, &mut rng(9));
        let b = Tensor::zeros(&[4]);
        assert_eq!(w.len() + b.len(), 76);
    }

    #[test]
    fn discriminator_shapes_and_zero_weights() {
        let params = DiscriminatorParams::init(&mut rng(10));
        let mut tape = Tape::new();
        let d = params.vars(&mut tape);
        let img = tape.constant(random01(&[3, 64, 48], 25));
        let out = discriminate(&mut tape, img, &d).unwrap();
        assert_eq!(out.maps.len(), 2);
        assert_eq!(tape.value(out.maps[0]).shape(), [1, 16, 12]);
        assert_eq!(tape.value(out.maps[1]).shape(), [1, 8, 6]);
        for &m in &out.means {
            assert_eq!(tape.value(m).shape(), [1]);
            assert!(tape.value(m).is_finite());
        }

        let mut zeroed = params.clone();
        zeroed.for_each_mut("d", &mut |_, t| *t = Tensor::zeros(t.shape()));
        let mut tape = Tape::new();
        let d = zeroed.vars(&mut tape);
        let img = tape.constant(random01(&[3, 32, 32], 26));
        let out = discriminate(&mut tape, img, &d).unwrap();
        for &m in &out.maps {
            assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn discriminator_rejects_small_images() {
        let params = DiscriminatorParams::init(&mut rng(11));
        let mut tape = Tape::new();
        let d = params.vars(&mut tape);
        let img = tape.constant(random01(&[3, 12, 32], 27));
        assert!(discriminate(&mut tape, img, &d).is_err());
        let gray = tape.constant(random01(&[1, 32, 32], 28));
        assert!(discriminate(&mut tape, gray, &d).is_err());
    }

    #[test]
    fn discriminator_gradients_flow_through_both_scales() {
        let mut params = DiscriminatorParams::init(&mut rng(12));
        // bias off the ReLU kinks
        params.for_each_mut("d", &mut |name, t| {
            if name.contains(".b") || name.contains("_b") {
                let n = t.len();
                *t = random(&[n], 29);
            }
        });
        let img = random01(&[3, 16, 16], 30);
        let mut leaves = Vec::new();
        params.for_each("d", &mut |_, t| leaves.push(t.clone()));
        let err = grad_check_sampled(
            &leaves,
            |tape, vs| {
                let mut d = params.vars(tape);
                let slots = d.slots();
                assert_eq!(slots.len(), vs.len());
                for (slot, &v) in slots.into_iter().zip(vs) {
                    *slot = v;
                }
                let img_v = tape.constant(img.clone());
                let out = discriminate(tape, img_v, &d)?;
                let sum = tape.add(out.means[0], out.means[1])?;
                let sq = tape.mul(sum, sum)?;
                tape.mean(sq)
            },
            1e-6,
            25,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn generator_end_to_end_gradients_spot_checked() {
        let mut arch = tiny_arch();
        arch.n_modules = 1;
        let mut params = GeneratorParams::init(&arch, &mut rng(13)).unwrap();
        // nonzero biases keep ReLU pre-activations off the kink
        let mut bump = 0;
        params.for_each_mut("g", &mut |_, t| {
            if t.shape().len() == 1 {
                bump += 1;
                let n = t.len();
                let r = random(&[n], 31 + bump);
                for (dst, src) in t.data_mut().iter_mut().zip(r.data()) {
                    *dst += 0.2 * src;
                }
            }
        });
        let img = random01(&[3, 8, 8], 40);
        let rp = random01(&[3, 8, 8], 41);
        let tp = random01(&[3, 8, 8], 42);
        let masks = random_masks(8, 8, 43);
        let target = random01(&[3, 8, 8], 44);

        let mut leaves = Vec::new();
        params.for_each("g", &mut |_, t| leaves.push(t.clone()));
        let err = grad_check_sampled(
            &leaves,
            |tape, vs| {
                let mut g = params.vars(tape);
                let slots = g.slots();
                assert_eq!(slots.len(), vs.len());
                for (slot, &v) in slots.into_iter().zip(vs) {
                    *slot = v;
                }
                let out = generate(tape, &img, &rp, &tp, &masks, &g)?;
                let t = tape.constant(target.clone());
                let d = tape.sub(out, t)?;
                let a = tape.abs(d)?;
                let m = tape.mean(a)?;
                // keep the loss small so central-difference cancellation
                // noise stays below the comparison's absolute floor
                tape.scale(m, 0.01)
            },
            1e-6,
            4,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
