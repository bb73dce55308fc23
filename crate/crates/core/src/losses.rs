//! Generator and discriminator training objectives.
//!
//! Feature-space terms run through a small frozen conv net whose weights are
//! drawn once from a seeded normal and never trained; it plays the role a
//! large pretrained backbone would at full scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::parts::PartMaskSet;
use crate::tensor::{Tape, Tensor, Var};

/// Stage channel plan of the frozen feature net.
const STAGE_CH: [usize; 5] = [3, 16, 32, 64, 64];
/// Crops are resized to this square before feature extraction.
pub const CROP_SIZE: usize = 16;
/// Bounding-box margin around a part mask, in pixels.
pub const CROP_MARGIN: usize = 2;

/// Four stages of conv3x3 + ReLU + half average-pool, 3->16->32->64->64.
/// Frozen: the weights live on the tape as constants, so no gradient ever
/// reaches them.
#[derive(Debug, Clone)]
pub struct FrozenFeatureNet {
    stages: Vec<(Tensor, Tensor)>,
    seed: u64,
}

/// Constant tape handles for the frozen net.
pub struct FrozenNetVars {
    stages: Vec<(Var, Var)>,
}

impl FrozenFeatureNet {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Weights are a pure function of the seed, bitwise stable across runs.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = STAGE_CH
            .windows(2)
            .map(|io| {
                let (ic, oc) = (io[0], io[1]);
                let std = (2.0 / (ic * 9) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                let w = Tensor::new(
                    vec![oc, ic, 3, 3],
                    (0..oc * ic * 9).map(|_| dist.sample(&mut rng)).collect(),
                )
                .expect("static shape");
                let b = Tensor::new(vec![oc], (0..oc).map(|_| dist.sample(&mut rng)).collect())
                    .expect("static shape");
                (w, b)
            })
            .collect();
        FrozenFeatureNet { stages, seed }
    }

    pub fn vars(&self, tape: &mut Tape) -> FrozenNetVars {
        FrozenNetVars {
            stages: self
                .stages
                .iter()
                .map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone())))
                .collect(),
        }
    }
}

/// The four stage outputs (post-pool) for a 3xHxW image; needs H,W >= 16 so
/// the deepest stage keeps at least one pixel.
pub fn features(tape: &mut Tape, img: Var, net: &FrozenNetVars) -> Result<Vec<Var>> {
    let (c, h, w) = tape.value(img).dims3()?;
    if c != 3 || h < CROP_SIZE || w < CROP_SIZE {
        return Err(Error::InvalidShape {
            op: "features",
            shape: tape.value(img).shape().to_vec(),
            reason: format!("need a 3-channel image at least {CROP_SIZE}x{CROP_SIZE}"),
        });
    }
    let mut x = img;
    let mut out = Vec::with_capacity(net.stages.len());
    for &(w, b) in &net.stages {
        let y = tape.conv2d(x, w, b, 1)?;
        let y = tape.relu(y)?;
        x = tape.avg_pool2(y)?;
        out.push(x);
    }
    Ok(out)
}

/// Mean absolute difference.
pub fn l1_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

fn neg(tape: &mut Tape, v: Var) -> Result<Var> {
    tape.scale(v, -1.0)
}

/// Discriminator objective from per-scale mean logits: the stable negated
/// form of log D(real) + log(1 - D(fake)), averaged over scales.
pub fn adv_loss_d(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "adv_loss_d",
            lhs: vec![real.len()],
            rhs: vec![fake.len()],
        });
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        let lr = tape.log_sigmoid(r)?;
        let nf = neg(tape, f)?;
        let lf = tape.log_sigmoid(nf)?;
        let s = tape.add(lr, lf)?;
        terms.push(neg(tape, s)?);
    }
    let sum = tape.add_n(&terms)?;
    tape.scale(sum, 1.0 / terms.len() as f64)
}

/// Non-saturating generator objective -log D(fake), averaged over scales.
pub fn adv_loss_g(tape: &mut Tape, fake: &[Var]) -> Result<Var> {
    if fake.is_empty() {
        return Err(Error::ShapeMismatch { op: "adv_loss_g", lhs: vec![0], rhs: vec![0] });
    }
    let mut terms = Vec::with_capacity(fake.len());
    for &f in fake {
        let lf = tape.log_sigmoid(f)?;
        terms.push(neg(tape, lf)?);
    }
    let sum = tape.add_n(&terms)?;
    tape.scale(sum, 1.0 / terms.len() as f64)
}

fn stage_l1_sum(tape: &mut Tape, a: &[Var], b: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(a.len());
    for (&fa, &fb) in a.iter().zip(b) {
        terms.push(l1_loss(tape, fa, fb)?);
    }
    tape.add_n(&terms)
}

/// Sum over stages of the mean absolute feature difference.
pub fn perceptual_loss(tape: &mut Tape, i_g: Var, i_t: Var, net: &FrozenNetVars) -> Result<Var> {
    let fg = features(tape, i_g, net)?;
    let ft = features(tape, i_t, net)?;
    perceptual_from_stages(tape, &fg, &ft)
}

/// Same as [`perceptual_loss`] but on precomputed stage outputs, so callers
/// evaluating several feature losses can share one tower per image.
pub fn perceptual_from_stages(tape: &mut Tape, fg: &[Var], ft: &[Var]) -> Result<Var> {
    stage_l1_sum(tape, ft, fg)
}

/// Channel covariance-style Gram matrix: flatten to C x HW, multiply by the
/// transpose, divide by C*H*W.
pub fn gram(tape: &mut Tape, f: Var) -> Result<Var> {
    let (c, h, w) = tape.value(f).dims3()?;
    let flat = tape.reshape(f, &[c, h * w])?;
    let t = tape.transpose2d(flat)?;
    let g = tape.matmul(flat, t)?;
    tape.scale(g, 1.0 / (c * h * w) as f64)
}

/// Sum over stages of the mean absolute Gram difference.
pub fn style_loss(tape: &mut Tape, i_g: Var, i_t: Var, net: &FrozenNetVars) -> Result<Var> {
    let fg = features(tape, i_g, net)?;
    let ft = features(tape, i_t, net)?;
    style_from_stages(tape, &fg, &ft)
}

/// Same as [`style_loss`] but on precomputed stage outputs.
pub fn style_from_stages(tape: &mut Tape, fg: &[Var], ft: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(fg.len());
    for (&a, &b) in ft.iter().zip(fg) {
        let ga = gram(tape, a)?;
        let gb = gram(tape, b)?;
        terms.push(l1_loss(tape, ga, gb)?);
    }
    tape.add_n(&terms)
}

/// Bounding box of a mask's nonzero pixels, expanded by `margin` and clamped
/// to the mask bounds. `None` means the part is absent.
pub fn mask_bbox(mask: &Tensor, margin: usize) -> Result<Option<(usize, usize, usize, usize)>> {
    let (h, w) = mask.dims2()?;
    let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] != 0.0 {
                any = true;
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    if !any {
        return Ok(None);
    }
    let y0 = y0.saturating_sub(margin);
    let x0 = x0.saturating_sub(margin);
    let y1 = (y1 + margin).min(h - 1);
    let x1 = (x1 + margin).min(w - 1);
    Ok(Some((y0, x0, y1 - y0 + 1, x1 - x0 + 1)))
}

/// Crops an image to the mask's padded bounding box; `None` when the mask is
/// empty.
pub fn crop_part(tape: &mut Tape, img: Var, mask: &Tensor, margin: usize) -> Result<Option<Var>> {
    let (_, h, w) = tape.value(img).dims3()?;
    let (mh, mw) = mask.dims2()?;
    if (mh, mw) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "crop_part",
            lhs: vec![h, w],
            rhs: vec![mh, mw],
        });
    }
    match mask_bbox(mask, margin)? {
        Some((y0, x0, ch, cw)) => Ok(Some(tape.crop_spatial(img, y0, x0, ch, cw)?)),
        None => Ok(None),
    }
}

/// Per-part feature loss: for every part present in the target masks, crop
/// both images to the part's box, resize to a fixed square, and accumulate
/// the perceptual stage differences.
pub fn partial_loss(
    tape: &mut Tape,
    i_g: Var,
    i_t: Var,
    target_masks: &PartMaskSet,
    net: &FrozenNetVars,
) -> Result<Var> {
    let mut terms = Vec::new();
    for mask in target_masks.masks() {
        let (cg, ct) = match (
            crop_part(tape, i_g, mask, CROP_MARGIN)?,
            crop_part(tape, i_t, mask, CROP_MARGIN)?,
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => continue,
        };
        let rg = tape.bilinear_resize(cg, CROP_SIZE, CROP_SIZE)?;
        let rt = tape.bilinear_resize(ct, CROP_SIZE, CROP_SIZE)?;
        let fg = features(tape, rg, net)?;
        let ft = features(tape, rt, net)?;
        terms.push(stage_l1_sum(tape, &ft, &fg)?);
    }
    if terms.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    tape.add_n(&terms)
}

/// Weights for the five generator loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub l1: f64,
    pub adv: f64,
    pub perceptual: f64,
    pub style: f64,
    pub partial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 2.0, adv: 0.25, perceptual: 200.0, style: 2.5, partial: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.l1),
            ("lambda2", self.adv),
            ("lambda3", self.perceptual),
            ("lambda4", self.style),
            ("lambda5", self.partial),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// The five scalar terms entering the weighted total.
pub struct LossTerms {
    pub l1: Var,
    pub adv: Var,
    pub perceptual: Var,
    pub style: Var,
    pub partial: Var,
}

/// Weighted total generator loss; any non-finite term aborts with the term
/// named.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let named: [(&'static str, Var, f64); 5] = [
        ("l1", terms.l1, w.l1),
        ("adv", terms.adv, w.adv),
        ("perceptual", terms.perceptual, w.perceptual),
        ("style", terms.style, w.style),
        ("partial", terms.partial, w.partial),
    ];
    let mut weighted = Vec::with_capacity(named.len());
    for (name, v, lambda) in named {
        let value = tape.value(v).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term: name, value });
        }
        weighted.push(tape.scale(v, lambda)?);
    }
    tape.add_n(&weighted)
}
