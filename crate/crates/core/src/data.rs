//! Procedural paired-pose dataset: articulated stick figures with exact part
//! masks and keypoints, plus a plain-file on-disk format (PPM/PGM/text) that
//! external data can also use.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::parts::{PartLabel, PartMaskSet, PART_COUNT};
use crate::tensor::Tensor;

pub const K_KEYPOINTS: usize = 10;
pub const KEYPOINT_NAMES: [&str; K_KEYPOINTS] = [
    "head", "neck", "l-shoulder", "r-shoulder", "l-elbow", "r-elbow", "l-hand", "r-hand",
    "l-foot", "r-foot",
];
pub const HEATMAP_SIGMA: f64 = 1.5;
pub const CANVAS_H: usize = 64;
pub const CANVAS_W: usize = 48;

/// Full description of one rendered figure: articulation plus appearance.
/// Angles are radians measured from straight down; for paired limbs index 0
/// is the figure's left (drawn on the -x side).
#[derive(Debug, Clone)]
pub struct FigureSpec {
    pub h: usize,
    pub w: usize,
    pub neck: f64,
    pub shoulders: [f64; 2],
    /// Relative to the upper-arm direction.
    pub elbows: [f64; 2],
    pub hips: [f64; 2],
    /// Relative to the thigh direction.
    pub knees: [f64; 2],
    pub arm_width: f64,
    pub leg_width: f64,
    /// RGB in [0,1], indexed by `PartLabel::index()`.
    pub colors: [[f64; 3]; PART_COUNT],
    /// Dress identities paint torso and thighs with the dress color instead
    /// of upper-clothes and pants.
    pub dress: bool,
}

impl Default for FigureSpec {
    fn default() -> Self {
        let mut colors = [[0.5, 0.5, 0.5]; PART_COUNT];
        colors[PartLabel::Hair.index()] = [0.15, 0.1, 0.05];
        colors[PartLabel::UpperClothes.index()] = [0.2, 0.35, 0.7];
        colors[PartLabel::Dress.index()] = [0.7, 0.25, 0.4];
        colors[PartLabel::Pants.index()] = [0.25, 0.25, 0.3];
        colors[PartLabel::Face.index()] = [0.85, 0.7, 0.6];
        colors[PartLabel::UpperSkin.index()] = [0.85, 0.7, 0.6];
        colors[PartLabel::Leg.index()] = [0.85, 0.7, 0.6];
        colors[PartLabel::Background.index()] = [0.08, 0.09, 0.1];
        FigureSpec {
            h: CANVAS_H,
            w: CANVAS_W,
            neck: 0.0,
            shoulders: [-0.25, 0.25],
            elbows: [-0.1, 0.1],
            hips: [-0.12, 0.12],
            knees: [-0.03, 0.03],
            arm_width: 2.2,
            leg_width: 2.8,
            colors,
            dress: false,
        }
    }
}

struct Skeleton {
    head_c: (f64, f64),
    head_r: f64,
    head_dir: (f64, f64),
    neck: (f64, f64),
    shoulder: [(f64, f64); 2],
    elbow: [(f64, f64); 2],
    hand: [(f64, f64); 2],
    hip: [(f64, f64); 2],
    knee: [(f64, f64); 2],
    foot: [(f64, f64); 2],
    /// x0, y0, x1, y1
    torso: (f64, f64, f64, f64),
    arm_r: f64,
    leg_r: f64,
}

fn polar(from: (f64, f64), angle: f64, len: f64) -> (f64, f64) {
    (from.0 + len * angle.sin(), from.1 + len * angle.cos())
}

fn skeleton(spec: &FigureSpec) -> Skeleton {
    // proportions are fixed in units of canvas-height/64
    let s = spec.h as f64 / 64.0;
    let cx = (spec.w as f64 - 1.0) / 2.0;
    let neck = (cx, 15.0 * s);
    let head_dir = (spec.neck.sin(), -spec.neck.cos());
    let head_c = (neck.0 + 6.5 * s * head_dir.0, neck.1 + 6.5 * s * head_dir.1);
    let shoulder = [(cx - 7.0 * s, 17.5 * s), (cx + 7.0 * s, 17.5 * s)];
    let hip = [(cx - 4.0 * s, 34.0 * s), (cx + 4.0 * s, 34.0 * s)];
    let mut elbow = [(0.0, 0.0); 2];
    let mut hand = [(0.0, 0.0); 2];
    let mut knee = [(0.0, 0.0); 2];
    let mut foot = [(0.0, 0.0); 2];
    for i in 0..2 {
        elbow[i] = polar(shoulder[i], spec.shoulders[i], 9.0 * s);
        hand[i] = polar(elbow[i], spec.shoulders[i] + spec.elbows[i], 9.0 * s);
        knee[i] = polar(hip[i], spec.hips[i], 11.0 * s);
        foot[i] = polar(knee[i], spec.hips[i] + spec.knees[i], 11.0 * s);
    }
    Skeleton {
        head_c,
        head_r: 5.5 * s,
        head_dir,
        neck,
        shoulder,
        elbow,
        hand,
        hip,
        knee,
        foot,
        torso: (cx - 7.5 * s, 15.5 * s, cx + 7.5 * s, 34.0 * s),
        arm_r: spec.arm_width * s,
        leg_r: spec.leg_width * s,
    }
}

fn dist2_seg(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (px - qx) * (px - qx) + (py - qy) * (py - qy)
}

fn paint_capsule(labels: &mut [u8], h: usize, w: usize, a: (f64, f64), b: (f64, f64), r: f64, lab: PartLabel) {
    let y0 = ((a.1.min(b.1) - r).floor().max(0.0)) as usize;
    let y1 = ((a.1.max(b.1) + r).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((a.0.min(b.0) - r).floor().max(0.0)) as usize;
    let x1 = ((a.0.max(b.0) + r).ceil().min(w as f64 - 1.0)) as usize;
    for row in y0..=y1 {
        for col in x0..=x1 {
            if dist2_seg(col as f64, row as f64, a, b) <= r * r {
                labels[row * w + col] = lab.index() as u8;
            }
        }
    }
}

/// Rasterizes the figure. Returns the color image [3,H,W], the exact part
/// masks, and the K=10 keypoints as rows (x, y) in `KEYPOINT_NAMES` order.
pub fn render_figure(spec: &FigureSpec) -> Result<(Tensor, PartMaskSet, Tensor)> {
    if spec.h < 16 || spec.w < 16 {
        return Err(Error::Config(format!("canvas {}x{} too small", spec.h, spec.w)));
    }
    let sk = skeleton(spec);
    let (h, w) = (spec.h, spec.w);
    let inside = |p: (f64, f64), r: f64| {
        p.0 - r >= 0.0 && p.0 + r <= w as f64 - 1.0 && p.1 - r >= 0.0 && p.1 + r <= h as f64 - 1.0
    };
    let mut checks: Vec<((f64, f64), f64)> = vec![(sk.head_c, sk.head_r)];
    for i in 0..2 {
        checks.push((sk.shoulder[i], sk.arm_r));
        checks.push((sk.elbow[i], sk.arm_r));
        checks.push((sk.hand[i], sk.arm_r));
        checks.push((sk.hip[i], sk.leg_r));
        checks.push((sk.knee[i], sk.leg_r));
        checks.push((sk.foot[i], sk.leg_r));
    }
    checks.push(((sk.torso.0, sk.torso.1), 0.0));
    checks.push(((sk.torso.2, sk.torso.3), 0.0));
    for (p, r) in checks {
        if !inside(p, r) {
            return Err(Error::OffCanvas(format!(
                "point ({:.2},{:.2}) with radius {:.2} exceeds {}x{}",
                p.0, p.1, r, w, h
            )));
        }
    }

    let torso_label = if spec.dress { PartLabel::Dress } else { PartLabel::UpperClothes };
    let pants_label = if spec.dress { PartLabel::Dress } else { PartLabel::Pants };
    let mut labels = vec![PartLabel::Background.index() as u8; h * w];
    // paint order: later strokes sit on top
    for i in 0..2 {
        paint_capsule(&mut labels, h, w, sk.knee[i], sk.foot[i], sk.leg_r, PartLabel::Leg);
    }
    for i in 0..2 {
        paint_capsule(&mut labels, h, w, sk.hip[i], sk.knee[i], sk.leg_r, pants_label);
    }
    for row in 0..h {
        for col in 0..w {
            let (x, y) = (col as f64, row as f64);
            if x >= sk.torso.0 && x <= sk.torso.2 && y >= sk.torso.1 && y <= sk.torso.3 {
                labels[row * w + col] = torso_label.index() as u8;
            }
        }
    }
    for i in 0..2 {
        paint_capsule(&mut labels, h, w, sk.shoulder[i], sk.elbow[i], sk.arm_r, PartLabel::UpperSkin);
        paint_capsule(&mut labels, h, w, sk.elbow[i], sk.hand[i], sk.arm_r, PartLabel::UpperSkin);
    }
    for row in 0..h {
        for col in 0..w {
            let (dx, dy) = (col as f64 - sk.head_c.0, row as f64 - sk.head_c.1);
            if dx * dx + dy * dy <= sk.head_r * sk.head_r {
                // hair on the crown side of the tilted head axis
                let up = dx * sk.head_dir.0 + dy * sk.head_dir.1;
                let lab = if up > 0.15 * sk.head_r { PartLabel::Hair } else { PartLabel::Face };
                labels[row * w + col] = lab.index() as u8;
            }
        }
    }

    let masks = PartMaskSet::from_labels(h, w, &labels)?;
    let mut img = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        let c = spec.colors[labels[p] as usize];
        for ch in 0..3 {
            img[ch * h * w + p] = c[ch];
        }
    }
    let kp_pts = [
        sk.head_c, sk.neck, sk.shoulder[0], sk.shoulder[1], sk.elbow[0], sk.elbow[1],
        sk.hand[0], sk.hand[1], sk.foot[0], sk.foot[1],
    ];
    let mut kp = Vec::with_capacity(K_KEYPOINTS * 2);
    for (x, y) in kp_pts {
        kp.push(x);
        kp.push(y);
    }
    Ok((
        Tensor::new(vec![3, h, w], img)?,
        masks,
        Tensor::new(vec![K_KEYPOINTS, 2], kp)?,
    ))
}

/// One Gaussian bump per keypoint, rescaled so the nearest pixel center is
/// exactly 1.0. Off-canvas keypoints produce an all-zero channel and set the
/// matching warning flag.
pub fn pose_to_heatmaps(
    keypoints: &Tensor,
    h: usize,
    w: usize,
    sigma: f64,
) -> Result<(Tensor, Vec<bool>)> {
    let (k, two) = keypoints.dims2()?;
    if two != 2 {
        return Err(Error::InvalidShape {
            op: "pose_to_heatmaps",
            shape: keypoints.shape().to_vec(),
            reason: "keypoints must be Kx2".into(),
        });
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let mut out = vec![0.0; k * h * w];
    let mut warned = vec![false; k];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in 0..k {
        let x = keypoints.data()[i * 2];
        let y = keypoints.data()[i * 2 + 1];
        let (nx, ny) = (x.round(), y.round());
        if nx < 0.0 || nx > w as f64 - 1.0 || ny < 0.0 || ny > h as f64 - 1.0 {
            warned[i] = true;
            continue;
        }
        let d2_min = (nx - x) * (nx - x) + (ny - y) * (ny - y);
        for row in 0..h {
            for col in 0..w {
                let d2 = (col as f64 - x) * (col as f64 - x) + (row as f64 - y) * (row as f64 - y);
                out[i * h * w + row * w + col] = (-(d2 - d2_min) * inv).exp();
            }
        }
    }
    Ok((Tensor::new(vec![k, h, w], out)?, warned))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One (reference, target) training pair. Both renders come from the same
/// identity, so they share per-part colors; only the pose differs.
#[derive(Debug, Clone)]
pub struct PersonSample {
    pub ref_image: Tensor,
    pub tgt_image: Tensor,
    pub ref_pose: Tensor,
    pub tgt_pose: Tensor,
    pub ref_masks: PartMaskSet,
    pub tgt_masks: PartMaskSet,
    pub ref_kp: Tensor,
    pub tgt_kp: Tensor,
    pub identity: usize,
    pub ref_pose_id: usize,
    pub tgt_pose_id: usize,
    pub split: Split,
}

fn sample_colors(rng: &mut ChaCha8Rng) -> [[f64; 3]; PART_COUNT] {
    let mut c = [[0.0; 3]; PART_COUNT];
    let r = rng.random_range(0.55..0.9);
    let g = r * rng.random_range(0.72..0.9);
    let b = g * rng.random_range(0.65..0.9);
    let skin = [r, g, b];
    c[PartLabel::Face.index()] = skin;
    c[PartLabel::UpperSkin.index()] = skin;
    c[PartLabel::Leg.index()] = skin;
    for lab in [PartLabel::Hair] {
        c[lab.index()] = std::array::from_fn(|_| rng.random_range(0.03..0.35));
    }
    for lab in [PartLabel::UpperClothes, PartLabel::Pants, PartLabel::Dress] {
        c[lab.index()] = std::array::from_fn(|_| rng.random_range(0.15..0.95));
    }
    c[PartLabel::Background.index()] = std::array::from_fn(|_| rng.random_range(0.03..0.18));
    c
}

fn sample_pose(rng: &mut ChaCha8Rng, base: &FigureSpec) -> FigureSpec {
    let mut spec = base.clone();
    spec.neck = rng.random_range(-0.15..0.15);
    spec.shoulders = [-rng.random_range(0.08..0.55), rng.random_range(0.08..0.55)];
    spec.elbows = [-rng.random_range(-0.25..0.6), rng.random_range(-0.25..0.6)];
    spec.hips = [-rng.random_range(0.03..0.3), rng.random_range(0.03..0.3)];
    spec.knees = [-rng.random_range(-0.1..0.35), rng.random_range(-0.1..0.35)];
    spec
}

/// Builds the full paired dataset: per identity, every ordered pose pair.
/// The train/test split is identity-disjoint (last ~10% of identities are
/// test). Pure function of its arguments.
pub fn make_dataset(
    n_identities: usize,
    poses_per_identity: usize,
    seed: u64,
) -> Result<Vec<PersonSample>> {
    if n_identities == 0 || poses_per_identity == 0 {
        return Err(Error::Config("dataset needs at least one identity and one pose".into()));
    }
    let n_test = if n_identities >= 10 {
        n_identities / 10
    } else if n_identities >= 2 {
        1
    } else {
        0
    };
    let n_train = n_identities - n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for id in 0..n_identities {
        let mut base = FigureSpec::default();
        base.colors = sample_colors(&mut rng);
        base.dress = rng.random_bool(1.0 / 3.0);
        base.arm_width = rng.random_range(1.9..2.4);
        base.leg_width = rng.random_range(2.4..3.0);
        let mut renders = Vec::with_capacity(poses_per_identity);
        for _ in 0..poses_per_identity {
            let spec = sample_pose(&mut rng, &base);
            let (img, masks, kp) = render_figure(&spec)?;
            let (heat, _) = pose_to_heatmaps(&kp, spec.h, spec.w, HEATMAP_SIGMA)?;
            renders.push((img, masks, kp, heat));
        }
        let split = if id < n_train { Split::Train } else { Split::Test };
        for p in 0..poses_per_identity {
            for q in 0..poses_per_identity {
                if p == q {
                    continue;
                }
                let r = &renders[p];
                let t = &renders[q];
                samples.push(PersonSample {
                    ref_image: r.0.clone(),
                    tgt_image: t.0.clone(),
                    ref_pose: r.3.clone(),
                    tgt_pose: t.3.clone(),
                    ref_masks: r.1.clone(),
                    tgt_masks: t.1.clone(),
                    ref_kp: r.2.clone(),
                    tgt_kp: t.2.clone(),
                    identity: id,
                    ref_pose_id: p,
                    tgt_pose_id: q,
                    split,
                });
            }
        }
    }
    Ok(samples)
}

fn data_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data { path: path.to_path_buf(), reason: reason.into() }
}

fn write_pnm(path: &Path, magic: &str, w: usize, h: usize, payload: &[u8]) -> Result<()> {
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| data_err(path, e.to_string()))
}

/// Header tokens after the magic, skipping whitespace and # comments.
fn read_pnm(path: &Path, magic: &str) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| data_err(path, e.to_string()))?;
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(data_err(path, format!("expected {magic} header")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(data_err(path, "malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| data_err(path, "malformed header"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(data_err(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace byte before payload
    let per_pixel = if magic == "P6" { 3 } else { 1 };
    let need = w * h * per_pixel;
    if bytes.len() < pos + need {
        return Err(data_err(path, format!("payload truncated: need {need} bytes")));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "save_dataset",
            shape: img.shape().to_vec(),
            reason: "image must have 3 channels".into(),
        });
    }
    let mut payload = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in 0..3 {
            payload.push((img.data()[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_pnm(path, "P6", w, h, &payload)
}

fn read_image(path: &Path) -> Result<Tensor> {
    let (w, h, payload) = read_pnm(path, "P6")?;
    let mut img = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            img[ch * h * w + p] = payload[p * 3 + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], img)
}

fn write_kp(path: &Path, kp: &Tensor) -> Result<()> {
    let (k, _) = kp.dims2()?;
    let mut text = String::new();
    for i in 0..k {
        let name = KEYPOINT_NAMES.get(i).copied().unwrap_or("extra");
        // f64 Display is shortest-round-trip, so the text is lossless
        text.push_str(&format!("{} {} {}\n", name, kp.data()[i * 2], kp.data()[i * 2 + 1]));
    }
    fs::write(path, text).map_err(|e| data_err(path, e.to_string()))
}

fn read_kp(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e.to_string()))?;
    let mut vals = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(data_err(path, format!("bad keypoint line '{line}'")));
        }
        for p in &parts[1..] {
            vals.push(
                p.parse::<f64>()
                    .map_err(|_| data_err(path, format!("bad coordinate '{p}'")))?,
            );
        }
    }
    if vals.is_empty() {
        return Err(data_err(path, "no keypoints"));
    }
    let k = vals.len() / 2;
    Tensor::new(vec![k, 2], vals)
}

fn stem(identity: usize, pose: usize) -> String {
    format!("{identity}_{pose}")
}

fn parse_stem(path: &Path, stem: &str) -> Result<(usize, usize)> {
    let mut it = stem.splitn(2, '_');
    let id = it.next().and_then(|s| s.parse().ok());
    let pose = it.next().and_then(|s| s.parse().ok());
    match (id, pose) {
        (Some(i), Some(p)) => Ok((i, p)),
        _ => Err(data_err(path, format!("bad stem '{stem}', expected <id>_<pose>"))),
    }
}

/// Writes every referenced figure once (`<id>_<pose>.ppm/.mask.pgm/.kp.txt`)
/// plus a `pairs.txt` listing `ref tgt split` per sample.
pub fn save_dataset(samples: &[PersonSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| data_err(dir, e.to_string()))?;
    let mut pairs = String::new();
    let mut written = std::collections::BTreeSet::new();
    for s in samples {
        let rs = stem(s.identity, s.ref_pose_id);
        let ts = stem(s.identity, s.tgt_pose_id);
        for (st, img, masks, kp) in [
            (&rs, &s.ref_image, &s.ref_masks, &s.ref_kp),
            (&ts, &s.tgt_image, &s.tgt_masks, &s.tgt_kp),
        ] {
            if written.insert(st.clone()) {
                write_image(&dir.join(format!("{st}.ppm")), img)?;
                write_pnm(
                    &dir.join(format!("{st}.mask.pgm")),
                    "P5",
                    masks.width(),
                    masks.height(),
                    &masks.to_labels(),
                )?;
                write_kp(&dir.join(format!("{st}.kp.txt")), kp)?;
            }
        }
        pairs.push_str(&format!("{rs} {ts} {}\n", s.split.name()));
    }
    let ppath = dir.join("pairs.txt");
    fs::write(&ppath, pairs).map_err(|e| data_err(&ppath, e.to_string()))
}

/// Reads a dataset directory back into memory. Heatmaps are rebuilt from the
/// stored keypoints with the default sigma.
pub fn load_dataset(dir: &Path) -> Result<Vec<PersonSample>> {
    let ppath = dir.join("pairs.txt");
    let text = fs::read_to_string(&ppath).map_err(|e| data_err(&ppath, e.to_string()))?;
    let mut listed: Vec<(String, String, Split)> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(data_err(&ppath, format!("bad pair line '{line}'")));
        }
        listed.push((parts[0].into(), parts[1].into(), Split::from_name(parts[2])?));
    }
    let mut figures: BTreeMap<String, (Tensor, PartMaskSet, Tensor, Tensor)> = BTreeMap::new();
    for (r, t, _) in &listed {
        for st in [r, t] {
            if figures.contains_key(st) {
                continue;
            }
            let img = read_image(&dir.join(format!("{st}.ppm")))?;
            let mpath = dir.join(format!("{st}.mask.pgm"));
            let (mw, mh, labels) = read_pnm(&mpath, "P5")?;
            let masks = PartMaskSet::from_labels(mh, mw, &labels)
                .map_err(|e| data_err(&mpath, e.to_string()))?;
            let kp = read_kp(&dir.join(format!("{st}.kp.txt")))?;
            let (_, h, w) = img.dims3()?;
            if (mh, mw) != (h, w) {
                return Err(data_err(&mpath, format!("mask {mh}x{mw} vs image {h}x{w}")));
            }
            let (heat, _) = pose_to_heatmaps(&kp, h, w, HEATMAP_SIGMA)?;
            figures.insert(st.clone(), (img, masks, kp, heat));
        }
    }
    let mut samples = Vec::with_capacity(listed.len());
    for (r, t, split) in &listed {
        let (id, rp) = parse_stem(&ppath, r)?;
        let (tid, tp) = parse_stem(&ppath, t)?;
        if id != tid {
            return Err(data_err(&ppath, format!("pair {r} {t} crosses identities")));
        }
        let rf = &figures[r];
        let tf = &figures[t];
        samples.push(PersonSample {
            ref_image: rf.0.clone(),
            tgt_image: tf.0.clone(),
            ref_pose: rf.3.clone(),
            tgt_pose: tf.3.clone(),
            ref_masks: rf.1.clone(),
            tgt_masks: tf.1.clone(),
            ref_kp: rf.2.clone(),
            tgt_kp: tf.2.clone(),
            identity: id,
            ref_pose_id: rp,
            tgt_pose_id: tp,
            split: *split,
        });
    }
    Ok(samples)
}
