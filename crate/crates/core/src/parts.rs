//! Body-part decoupling and the texture code F_C.
//!
//! A reference image is split into per-part images by binary masks that
//! partition the pixel grid, each part runs through one weight-shared conv
//! encoder, and the stacked features are fused by a 1x1 conv and pooled into
//! a single texture vector.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Number of canonical part labels.
pub const PART_COUNT: usize = 8;
/// Channels produced by the shared part encoder.
pub const PART_FEAT: usize = 64;
const ENC_MID: usize = 32;

/// Canonical part labels in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartLabel {
    Hair,
    UpperClothes,
    Dress,
    Pants,
    Face,
    UpperSkin,
    Leg,
    Background,
}

impl PartLabel {
    pub const ALL: [PartLabel; PART_COUNT] = [
        PartLabel::Hair,
        PartLabel::UpperClothes,
        PartLabel::Dress,
        PartLabel::Pants,
        PartLabel::Face,
        PartLabel::UpperSkin,
        PartLabel::Leg,
        PartLabel::Background,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<PartLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PartLabel::Hair => "hair",
            PartLabel::UpperClothes => "upper-clothes",
            PartLabel::Dress => "dress",
            PartLabel::Pants => "pants",
            PartLabel::Face => "face",
            PartLabel::UpperSkin => "upper-skin",
            PartLabel::Leg => "leg",
            PartLabel::Background => "background",
        }
    }

    pub fn from_name(s: &str) -> Option<PartLabel> {
        Self::ALL.iter().copied().find(|l| l.name() == s)
    }
}

/// Eight binary masks of equal spatial size that partition the pixel grid:
/// at every pixel exactly one mask is 1 and the rest are 0.
#[derive(Debug, Clone)]
pub struct PartMaskSet {
    masks: Vec<Tensor>,
    h: usize,
    w: usize,
}

impl PartMaskSet {
    /// Validates shape agreement, {0,1} values, and the partition invariant.
    pub fn new(masks: Vec<Tensor>) -> Result<Self> {
        if masks.len() != PART_COUNT {
            return Err(Error::InvalidShape {
                op: "part_masks",
                shape: vec![masks.len()],
                reason: format!("expected {PART_COUNT} masks"),
            });
        }
        let (h, w) = masks[0].dims2()?;
        for m in &masks {
            if m.shape() != [h, w] {
                return Err(Error::ShapeMismatch {
                    op: "part_masks",
                    lhs: vec![h, w],
                    rhs: m.shape().to_vec(),
                });
            }
        }
        for row in 0..h {
            for col in 0..w {
                let mut sum = 0.0;
                for m in &masks {
                    let v = m.data()[row * w + col];
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::MaskPartition { row, col });
                    }
                    sum += v;
                }
                if sum != 1.0 {
                    return Err(Error::MaskPartition { row, col });
                }
            }
        }
        Ok(PartMaskSet { masks, h, w })
    }

    /// Builds one-hot masks from a row-major label map; labels must be < 8.
    pub fn from_labels(h: usize, w: usize, labels: &[u8]) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::InvalidShape {
                op: "part_masks",
                shape: vec![labels.len()],
                reason: format!("label map must have {} entries", h * w),
            });
        }
        let mut masks = vec![vec![0.0; h * w]; PART_COUNT];
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= PART_COUNT {
                return Err(Error::InvalidShape {
                    op: "part_masks",
                    shape: vec![i / w, i % w],
                    reason: format!("label {l} out of range"),
                });
            }
            masks[l as usize][i] = 1.0;
        }
        let masks =
            masks.into_iter().map(|d| Tensor::new(vec![h, w], d)).collect::<Result<Vec<_>>>()?;
        Ok(PartMaskSet { masks, h, w })
    }

    /// Row-major label map; inverse of [`PartMaskSet::from_labels`].
    pub fn to_labels(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.h * self.w];
        for (li, m) in self.masks.iter().enumerate() {
            for (i, &v) in m.data().iter().enumerate() {
                if v == 1.0 {
                    out[i] = li as u8;
                }
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn mask(&self, label: PartLabel) -> &Tensor {
        &self.masks[label.index()]
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }
}

/// Splits an image into 8 per-part images by masking; the mask broadcasts
/// over channels. Because the masks partition the grid, the part images sum
/// back to the input bit for bit.
pub fn decouple(image: &Tensor, masks: &PartMaskSet) -> Result<Vec<Tensor>> {
    let (c, h, w) = image.dims3()?;
    if h != masks.height() || w != masks.width() {
        return Err(Error::ShapeMismatch {
            op: "decouple",
            lhs: vec![c, h, w],
            rhs: vec![masks.height(), masks.width()],
        });
    }
    let mut out = Vec::with_capacity(PART_COUNT);
    for m in masks.masks() {
        let md = m.data();
        let mut d = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                d[ch * h * w + i] = image.data()[ch * h * w + i] * md[i];
            }
        }
        out.push(Tensor::new(vec![c, h, w], d)?);
    }
    Ok(out)
}

/// Shared part encoder plus the 1x1 fusion conv. One weight set serves every
/// part branch; the fusion input width tracks how many parts are included.
#[derive(Debug, Clone)]
pub struct PartEncoderParams {
    include: Vec<PartLabel>,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    fuse_w: Tensor,
    fuse_b: Tensor,
}

/// Tape handles for [`PartEncoderParams`] leaves.
pub struct PartEncoderVars {
    pub include: Vec<PartLabel>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

fn conv_init(oc: usize, ic: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / (ic * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = oc * ic * k * k;
    Tensor::new(vec![oc, ic, k, k], (0..n).map(|_| dist.sample(rng)).collect())
        .expect("static shape")
}

impl PartEncoderParams {
    /// `exclude` drops whole part branches; the fusion conv shrinks to match.
    pub fn init(s_texture: usize, exclude: &[PartLabel], rng: &mut ChaCha8Rng) -> Result<Self> {
        let include: Vec<PartLabel> =
            PartLabel::ALL.iter().copied().filter(|l| !exclude.contains(l)).collect();
        if include.is_empty() {
            return Err(Error::Config("every part is excluded".into()));
        }
        if s_texture == 0 {
            return Err(Error::Config("texture size must be positive".into()));
        }
        let n = include.len();
        Ok(PartEncoderParams {
            include,
            w1: conv_init(ENC_MID, 3, 3, rng),
            b1: Tensor::zeros(&[ENC_MID]),
            w2: conv_init(PART_FEAT, ENC_MID, 3, rng),
            b2: Tensor::zeros(&[PART_FEAT]),
            fuse_w: conv_init(s_texture, n * PART_FEAT, 1, rng),
            fuse_b: Tensor::zeros(&[s_texture]),
        })
    }

    pub fn include(&self) -> &[PartLabel] {
        &self.include
    }

    pub fn s_texture(&self) -> usize {
        self.fuse_b.len()
    }

    pub fn vars(&self, tape: &mut Tape) -> PartEncoderVars {
        PartEncoderVars {
            include: self.include.clone(),
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            fuse_w: tape.leaf(self.fuse_w.clone()),
            fuse_b: tape.leaf(self.fuse_b.clone()),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
        f(format!("{prefix}.fuse_w"), &self.fuse_w);
        f(format!("{prefix}.fuse_b"), &self.fuse_b);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
        f(format!("{prefix}.fuse_w"), &mut self.fuse_w);
        f(format!("{prefix}.fuse_b"), &mut self.fuse_b);
    }
}

impl PartEncoderVars {
    /// Leaf handles in `for_each` order.
    pub fn slots(&mut self) -> Vec<&mut Var> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.fuse_w,
            &mut self.fuse_b,
        ]
    }
}

/// Runs one part image through the shared encoder: two stride-2 3x3 convs
/// with ReLU, 3 -> 32 -> 64 channels, so a (3,H,W) part maps to (64,H/4,W/4).
pub fn encode_part(tape: &mut Tape, part: Var, p: &PartEncoderVars) -> Result<Var> {
    let (_, h, w) = tape.value(part).dims3()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidShape {
            op: "encode_part",
            shape: tape.value(part).shape().to_vec(),
            reason: "spatial size must be divisible by 4".into(),
        });
    }
    let x = tape.conv2d(part, p.w1, p.b1, 2)?;
    let x = tape.relu(x)?;
    let x = tape.conv2d(x, p.w2, p.b2, 2)?;
    tape.relu(x)
}

/// Encodes every part image with the same weights.
pub fn encode_parts(tape: &mut Tape, parts: &[Var], p: &PartEncoderVars) -> Result<Vec<Var>> {
    parts.iter().map(|&v| encode_part(tape, v, p)).collect()
}

/// Concatenates part features by channel, mixes them with the 1x1 fusion
/// conv, and global-average-pools to the texture vector F_C of length S.
pub fn fuse(tape: &mut Tape, feats: &[Var], p: &PartEncoderVars) -> Result<Var> {
    let cat = tape.concat_channels(feats)?;
    let mixed = tape.conv2d(cat, p.fuse_w, p.fuse_b, 1)?;
    tape.global_avg_pool(mixed)
}

/// Full pipeline: decouple by masks, encode the included parts, fuse.
pub fn texture_code(
    tape: &mut Tape,
    image: &Tensor,
    masks: &PartMaskSet,
    p: &PartEncoderVars,
) -> Result<Var> {
    let part_images = decouple(image, masks)?;
    let mut feats = Vec::with_capacity(p.include.len());
    for l in &p.include {
        let v = tape.constant(part_images[l.index()].clone());
        feats.push(encode_part(tape, v, p)?);
    }
    fuse(tape, &feats, p)
}
