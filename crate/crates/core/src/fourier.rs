//! Discrete Fourier transforms over real 2-D inputs and the residual
//! frequency-domain block used inside the transformer module.
//!
//! Conventions: the forward transform is unnormalized; the inverse carries
//! the full 1/(H·W) factor. Real inputs keep only the non-redundant half
//! spectrum of width ⌊W/2⌋+1.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;

/// Half-width spectrum of a (C,H,W) real map: both parts are (C,H,⌊W/2⌋+1).
#[derive(Debug, Clone)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexSpectrum {
    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }
}

/// Precomputed twiddle factors for one transform length and direction, so
/// batched transforms don't pay the trig cost per row.
struct Twiddles {
    n: usize,
    // radix-2: per-level tables concatenated (level with half-size m starts
    // at m-1); direct: the n distinct roots, indexed by (j*k) mod n
    table: Vec<(f64, f64)>,
}

impl Twiddles {
    fn new(n: usize, sign: f64) -> Twiddles {
        let mut table = Vec::new();
        if n > 1 {
            if n.is_power_of_two() {
                let mut len = 2;
                while len <= n {
                    let half = len / 2;
                    let ang = sign * TAU / len as f64;
                    table.extend((0..half).map(|k| (ang * k as f64).sin_cos()));
                    len <<= 1;
                }
            } else {
                table.extend((0..n).map(|m| (sign * TAU * m as f64 / n as f64).sin_cos()));
            }
        }
        Twiddles { n, table }
    }
}

/// Unnormalized complex transform in place; sign −1 is the forward direction.
fn dft_inplace(re: &mut [f64], im: &mut [f64], sign: f64) {
    let tw = Twiddles::new(re.len(), sign);
    dft_with(re, im, &tw);
}

fn dft_with(re: &mut [f64], im: &mut [f64], tw: &Twiddles) {
    let n = re.len();
    debug_assert_eq!(n, tw.n);
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        // radix-2 Cooley–Tukey
        let mut j = 0usize;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let t = &tw.table[half - 1..2 * half - 1];
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (s, c) = t[k];
                    let i = start + k;
                    let j = i + half;
                    let (vr, vi) = (re[j] * c - im[j] * s, re[j] * s + im[j] * c);
                    let (ur, ui) = (re[i], im[i]);
                    re[i] = ur + vr;
                    im[i] = ui + vi;
                    re[j] = ur - vr;
                    im[j] = ui - vi;
                }
            }
            len <<= 1;
        }
    } else {
        // direct O(n^2) evaluation for the remaining small sizes
        let mut out_re = vec![0.0; n];
        let mut out_im = vec![0.0; n];
        for k in 0..n {
            let mut ar = 0.0;
            let mut ai = 0.0;
            for j in 0..n {
                let (s, c) = tw.table[j * k % n];
                ar += re[j] * c - im[j] * s;
                ai += re[j] * s + im[j] * c;
            }
            out_re[k] = ar;
            out_im[k] = ai;
        }
        re.copy_from_slice(&out_re);
        im.copy_from_slice(&out_im);
    }
}

/// Complex 1-D transform; the inverse direction includes the 1/n factor.
pub fn fft_1d(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let mut r = re.to_vec();
    let mut i = im.to_vec();
    dft_inplace(&mut r, &mut i, if inverse { 1.0 } else { -1.0 });
    if inverse {
        let n = r.len() as f64;
        for v in r.iter_mut().chain(i.iter_mut()) {
            *v /= n;
        }
    }
    (r, i)
}

fn gather_col(src: &[f64], h: usize, w: usize, col: usize, out: &mut [f64]) {
    for (y, o) in out.iter_mut().enumerate() {
        *o = src[y * w + col];
    }
    debug_assert_eq!(out.len(), h);
}

fn scatter_col(dst: &mut [f64], w: usize, col: usize, src: &[f64]) {
    for (y, &v) in src.iter().enumerate() {
        dst[y * w + col] = v;
    }
}

/// Forward real transform of each channel: row FFTs keeping the half
/// spectrum, then column FFTs. Unnormalized.
pub fn rfft2(x: &Tensor) -> Result<ComplexSpectrum> {
    let (c, h, w) = x.dims3()?;
    let wh = w / 2 + 1;
    let mut re = vec![0.0; c * h * wh];
    let mut im = vec![0.0; c * h * wh];
    let mut row_re = vec![0.0; w];
    let mut row_im = vec![0.0; w];
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    let tw_row = Twiddles::new(w, -1.0);
    let tw_col = Twiddles::new(h, -1.0);
    for ch in 0..c {
        let xc = &x.data()[ch * h * w..(ch + 1) * h * w];
        let rc = &mut re[ch * h * wh..(ch + 1) * h * wh];
        let ic = &mut im[ch * h * wh..(ch + 1) * h * wh];
        for y in 0..h {
            row_re.copy_from_slice(&xc[y * w..(y + 1) * w]);
            row_im.fill(0.0);
            dft_with(&mut row_re, &mut row_im, &tw_row);
            rc[y * wh..(y + 1) * wh].copy_from_slice(&row_re[..wh]);
            ic[y * wh..(y + 1) * wh].copy_from_slice(&row_im[..wh]);
        }
        for b in 0..wh {
            gather_col(rc, h, wh, b, &mut col_re);
            gather_col(ic, h, wh, b, &mut col_im);
            dft_with(&mut col_re, &mut col_im, &tw_col);
            scatter_col(rc, wh, b, &col_re);
            scatter_col(ic, wh, b, &col_im);
        }
    }
    Ok(ComplexSpectrum {
        re: Tensor::new(vec![c, h, wh], re)?,
        im: Tensor::new(vec![c, h, wh], im)?,
    })
}

/// Exact inverse of [`rfft2`]; `out_width` resolves the width ambiguity of
/// the half spectrum.
pub fn irfft2(s: &ComplexSpectrum, out_width: usize) -> Result<Tensor> {
    let (c, h, wh) = s.re.dims3()?;
    if s.im.shape() != s.re.shape() {
        return Err(Error::ShapeMismatch {
            op: "irfft2",
            lhs: s.re.shape().to_vec(),
            rhs: s.im.shape().to_vec(),
        });
    }
    if out_width / 2 + 1 != wh {
        return Err(Error::InvalidShape {
            op: "irfft2",
            shape: vec![out_width],
            reason: format!("width inconsistent with half spectrum of {wh} bins"),
        });
    }
    let w = out_width;
    let mut out = vec![0.0; c * h * w];
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    let mut full_re = vec![0.0; w];
    let mut full_im = vec![0.0; w];
    let mut work_re = vec![0.0; h * wh];
    let mut work_im = vec![0.0; h * wh];
    let tw_col = Twiddles::new(h, 1.0);
    let tw_row = Twiddles::new(w, 1.0);
    for ch in 0..c {
        let rc = &s.re.data()[ch * h * wh..(ch + 1) * h * wh];
        let ic = &s.im.data()[ch * h * wh..(ch + 1) * h * wh];
        for b in 0..wh {
            gather_col(rc, h, wh, b, &mut col_re);
            gather_col(ic, h, wh, b, &mut col_im);
            dft_with(&mut col_re, &mut col_im, &tw_col);
            for v in col_re.iter_mut().chain(col_im.iter_mut()) {
                *v /= h as f64;
            }
            scatter_col(&mut work_re, wh, b, &col_re);
            scatter_col(&mut work_im, wh, b, &col_im);
        }
        for y in 0..h {
            full_re[..wh].copy_from_slice(&work_re[y * wh..(y + 1) * wh]);
            full_im[..wh].copy_from_slice(&work_im[y * wh..(y + 1) * wh]);
            for b in wh..w {
                full_re[b] = work_re[y * wh + (w - b)];
                full_im[b] = -work_im[y * wh + (w - b)];
            }
            dft_with(&mut full_re, &mut full_im, &tw_row);
            for (o, &v) in out[(ch * h + y) * w..(ch * h + y + 1) * w].iter_mut().zip(&full_re) {
                *o = v / w as f64;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// [`rfft2`] with real and imaginary parts stacked as channels:
/// (C,H,W) -> (2C,H,⌊W/2⌋+1), real halves first.
pub fn rfft2_stacked(x: &Tensor) -> Result<Tensor> {
    let (c, h, _) = x.dims3()?;
    let s = rfft2(x)?;
    let wh = s.re.shape()[2];
    let mut data = Vec::with_capacity(2 * c * h * wh);
    data.extend_from_slice(s.re.data());
    data.extend_from_slice(s.im.data());
    Tensor::new(vec![2 * c, h, wh], data)
}

/// Inverse of [`rfft2_stacked`].
pub fn irfft2_stacked(t: &Tensor, out_width: usize) -> Result<Tensor> {
    let (c2, h, wh) = t.dims3()?;
    if c2 % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "irfft2_stacked",
            shape: t.shape().to_vec(),
            reason: "channel count must be even (re/im pairs)".into(),
        });
    }
    let c = c2 / 2;
    let n = h * wh;
    let s = ComplexSpectrum {
        re: Tensor::new(vec![c, h, wh], t.data()[..c * n].to_vec())?,
        im: Tensor::new(vec![c, h, wh], t.data()[c * n..].to_vec())?,
    };
    irfft2(&s, out_width)
}

/// Vector–Jacobian product of [`rfft2_stacked`]: maps a spectrum-shaped
/// gradient back to input space.
pub fn rfft2_stacked_adjoint(g: &Tensor, out_width: usize) -> Result<Tensor> {
    let (c2, h, wh) = g.dims3()?;
    if c2 % 2 != 0 || out_width / 2 + 1 != wh {
        return Err(Error::InvalidShape {
            op: "rfft2_adjoint",
            shape: g.shape().to_vec(),
            reason: format!("incompatible with output width {out_width}"),
        });
    }
    let c = c2 / 2;
    let w = out_width;
    let n = h * wh;
    let mut out = vec![0.0; c * h * w];
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    let mut work_re = vec![0.0; h * wh];
    let mut work_im = vec![0.0; h * wh];
    let mut full_re = vec![0.0; w];
    let mut full_im = vec![0.0; w];
    for ch in 0..c {
        let gr = &g.data()[ch * n..(ch + 1) * n];
        let gi = &g.data()[(c + ch) * n..(c + ch + 1) * n];
        for b in 0..wh {
            gather_col(gr, h, wh, b, &mut col_re);
            gather_col(gi, h, wh, b, &mut col_im);
            dft_inplace(&mut col_re, &mut col_im, 1.0);
            scatter_col(&mut work_re, wh, b, &col_re);
            scatter_col(&mut work_im, wh, b, &col_im);
        }
        for y in 0..h {
            full_re.fill(0.0);
            full_im.fill(0.0);
            full_re[..wh].copy_from_slice(&work_re[y * wh..(y + 1) * wh]);
            full_im[..wh].copy_from_slice(&work_im[y * wh..(y + 1) * wh]);
            dft_inplace(&mut full_re, &mut full_im, 1.0);
            out[(ch * h + y) * w..(ch * h + y + 1) * w].copy_from_slice(&full_re);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Vector–Jacobian product of [`irfft2_stacked`]: maps an image-shaped
/// gradient back to spectrum space.
pub fn irfft2_stacked_adjoint(g: &Tensor) -> Result<Tensor> {
    let (c, h, w) = g.dims3()?;
    let wh = w / 2 + 1;
    let n = h * wh;
    let mut out = vec![0.0; 2 * c * n];
    let mut row_re = vec![0.0; w];
    let mut row_im = vec![0.0; w];
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    let mut work_re = vec![0.0; h * wh];
    let mut work_im = vec![0.0; h * wh];
    let norm = 1.0 / (h * w) as f64;
    for ch in 0..c {
        let gc = &g.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            row_re.copy_from_slice(&gc[y * w..(y + 1) * w]);
            row_im.fill(0.0);
            dft_inplace(&mut row_re, &mut row_im, -1.0);
            work_re[y * wh..(y + 1) * wh].copy_from_slice(&row_re[..wh]);
            work_im[y * wh..(y + 1) * wh].copy_from_slice(&row_im[..wh]);
        }
        for b in 0..wh {
            // interior bins carry double weight: their conjugate mirror
            // lives outside the stored half spectrum
            let cb = if b == 0 || (w % 2 == 0 && b == w / 2) { 1.0 } else { 2.0 };
            gather_col(&work_re, h, wh, b, &mut col_re);
            gather_col(&work_im, h, wh, b, &mut col_im);
            dft_inplace(&mut col_re, &mut col_im, -1.0);
            for y in 0..h {
                out[ch * n + y * wh + b] = col_re[y] * cb * norm;
                out[(c + ch) * n + y * wh + b] = col_im[y] * cb * norm;
            }
        }
    }
    Tensor::new(vec![2 * c, h, wh], out)
}

/// Weights of the residual frequency block: two 1×1 convolutions over the
/// stacked re/im channels.
#[derive(Debug, Clone)]
pub struct FftBlockParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub with_bias: bool,
}

/// Tape handles for [`FftBlockParams`] during one forward/backward pass.
#[derive(Debug, Clone, Copy)]
pub struct FftBlockVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FftBlockParams {
    /// Random init for a block over C spatial channels (2C in frequency).
    pub fn init(c: usize, with_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let cf = 2 * c;
        let std = (2.0 / cf as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let mut draw = |n: usize| Tensor::from_vec((0..n).map(|_| dist.sample(rng)).collect());
        Self {
            w1: draw(cf * cf).reshaped(&[cf, cf, 1, 1]).expect("w1"),
            w2: draw(cf * cf).reshaped(&[cf, cf, 1, 1]).expect("w2"),
            b1: Tensor::zeros(&[cf]),
            b2: Tensor::zeros(&[cf]),
            with_bias,
        }
    }

    /// Both convolutions pass channels straight through; useful in tests.
    pub fn identity(c: usize) -> Self {
        let cf = 2 * c;
        let mut w = Tensor::zeros(&[cf, cf, 1, 1]);
        for i in 0..cf {
            w.data_mut()[i * cf + i] = 1.0;
        }
        Self {
            w1: w.clone(),
            w2: w,
            b1: Tensor::zeros(&[cf]),
            b2: Tensor::zeros(&[cf]),
            with_bias: false,
        }
    }

    pub fn vars(&self, tape: &mut Tape) -> FftBlockVars {
        let w1 = tape.leaf(self.w1.clone());
        let w2 = tape.leaf(self.w2.clone());
        let (b1, b2) = if self.with_bias {
            (tape.leaf(self.b1.clone()), tape.leaf(self.b2.clone()))
        } else {
            (tape.constant(self.b1.clone()), tape.constant(self.b2.clone()))
        };
        FftBlockVars { w1, b1, w2, b2 }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.w2"), &self.w2);
        if self.with_bias {
            f(format!("{prefix}.b1"), &self.b1);
            f(format!("{prefix}.b2"), &self.b2);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.w2"), &mut self.w2);
        if self.with_bias {
            f(format!("{prefix}.b1"), &mut self.b1);
            f(format!("{prefix}.b2"), &mut self.b2);
        }
    }
}

impl FftBlockVars {
    /// Leaf handles in `for_each` order; assumes learnable biases.
    pub fn slots(&mut self) -> Vec<&mut Var> {
        vec![&mut self.w1, &mut self.w2, &mut self.b1, &mut self.b2]
    }
}

/// Frequency-domain residual path: transform, two pointwise convolutions
/// with an activation between, transform back. The caller adds the result
/// to its input.
pub fn fft_block(tape: &mut Tape, x: Var, p: &FftBlockVars, skip_relu: bool) -> Result<Var> {
    let (_, _, w) = tape.value(x).dims3()?;
    let spec = tape.rfft2(x)?;
    let y = tape.conv2d(spec, p.w1, p.b1, 1)?;
    let y = if skip_relu { y } else { tape.relu(y)? };
    let y = tape.conv2d(y, p.w2, p.b2, 1)?;
    tape.irfft2(y, w)
}
