//! Multi-head self/cross attention and the transformer module that moves
//! reference texture features into the target pose.
//!
//! Feature maps travel through attention as token sequences: a (C,H,W) map
//! flattens to H·W tokens of width C. Normalization and the frequency
//! branch act on the unflattened map view, so a sequence remembers its
//! spatial extent.

use crate::error::{Error, Result};
use crate::fourier::{fft_block, FftBlockParams, FftBlockVars};
use crate::tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// An (L,d) token matrix on the tape plus the spatial extent it came from.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

impl TokenSequence {
    /// Flatten a (C,H,W) map into H·W tokens of width C.
    pub fn from_map(tape: &mut Tape, map: Var) -> Result<Self> {
        let (c, h, w) = tape.value(map).dims3()?;
        let flat = tape.reshape(map, &[c, h * w])?;
        let tokens = tape.transpose2d(flat)?;
        Ok(Self { tokens, h, w })
    }

    /// Restore the (C,H,W) map view.
    pub fn to_map(&self, tape: &mut Tape) -> Result<Var> {
        let (l, c) = tape.value(self.tokens).dims2()?;
        if l != self.h * self.w {
            return Err(Error::InvalidShape {
                op: "token_unflatten",
                shape: vec![l, c],
                reason: format!("token count does not cover {}x{}", self.h, self.w),
            });
        }
        let t = tape.transpose2d(self.tokens)?;
        tape.reshape(t, &[c, self.h, self.w])
    }

    fn with(self, tokens: Var) -> Self {
        Self { tokens, ..self }
    }
}

/// Per-head projection matrices plus the optional output mixer.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub heads: usize,
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Option<Tensor>,
}

/// Tape handles for [`MhaParams`].
#[derive(Debug, Clone)]
pub struct MhaVars {
    pub heads: usize,
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Option<Var>,
}

impl MhaParams {
    pub fn init(d: usize, heads: usize, output_proj: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidShape {
                op: "mha_init",
                shape: vec![d, heads],
                reason: "head count must divide embedding width".into(),
            });
        }
        let dk = d / heads;
        let dist = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let mut draw = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| dist.sample(rng)).collect()).expect("shape")
        };
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for _ in 0..heads {
            wq.push(draw(d, dk));
            wk.push(draw(d, dk));
            wv.push(draw(d, dk));
        }
        let wo = output_proj.then(|| draw(d, d));
        Ok(Self { heads, wq, wk, wv, wo })
    }

    /// Single head, identity projections, no output mixing: mha reduces to
    /// plain scaled dot attention. Test helper.
    pub fn identity(d: usize) -> Self {
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        Self {
            heads: 1,
            wq: vec![eye.clone()],
            wk: vec![eye.clone()],
            wv: vec![eye],
            wo: None,
        }
    }

    pub fn vars(&self, tape: &mut Tape) -> MhaVars {
        MhaVars {
            heads: self.heads,
            wq: self.wq.iter().map(|t| tape.leaf(t.clone())).collect(),
            wk: self.wk.iter().map(|t| tape.leaf(t.clone())).collect(),
            wv: self.wv.iter().map(|t| tape.leaf(t.clone())).collect(),
            wo: self.wo.as_ref().map(|t| tape.leaf(t.clone())),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, t) in self.wq.iter().enumerate() {
            f(format!("{prefix}.wq{i}"), t);
        }
        for (i, t) in self.wk.iter().enumerate() {
            f(format!("{prefix}.wk{i}"), t);
        }
        for (i, t) in self.wv.iter().enumerate() {
            f(format!("{prefix}.wv{i}"), t);
        }
        if let Some(t) = &self.wo {
            f(format!("{prefix}.wo"), t);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, t) in self.wq.iter_mut().enumerate() {
            f(format!("{prefix}.wq{i}"), t);
        }
        for (i, t) in self.wk.iter_mut().enumerate() {
            f(format!("{prefix}.wk{i}"), t);
        }
        for (i, t) in self.wv.iter_mut().enumerate() {
            f(format!("{prefix}.wv{i}"), t);
        }
        if let Some(t) = &mut self.wo {
            f(format!("{prefix}.wo"), t);
        }
    }
}

impl MhaVars {
    /// Leaf handles in `for_each` order.
    pub fn slots(&mut self) -> Vec<&mut Var> {
        let mut v: Vec<&mut Var> = Vec::new();
        v.extend(self.wq.iter_mut());
        v.extend(self.wk.iter_mut());
        v.extend(self.wv.iter_mut());
        if let Some(o) = &mut self.wo {
            v.push(o);
        }
        v
    }
}

/// softmax(QKᵀ/√d_k)·V for token matrices Q:(Lq,dk), K:(Lk,dk), V:(Lk,dv).
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (_, dk) = tape.value(q).dims2()?;
    let (lk, dk2) = tape.value(k).dims2()?;
    let (lv, _) = tape.value(v).dims2()?;
    if dk != dk2 || lk != lv {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: tape.value(k).shape().to_vec(),
            rhs: if dk != dk2 {
                tape.value(q).shape().to_vec()
            } else {
                tape.value(v).shape().to_vec()
            },
        });
    }
    let kt = tape.transpose2d(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (dk as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}

/// Multi-head attention over token matrices: per-head projections, scaled
/// dot attention, head concatenation, optional output mixing.
pub fn mha(tape: &mut Tape, q: Var, k: Var, v: Var, p: &MhaVars) -> Result<Var> {
    let (_, d) = tape.value(q).dims2()?;
    if p.heads == 0 || d % p.heads != 0 || p.wq.len() != p.heads {
        return Err(Error::InvalidShape {
            op: "mha",
            shape: vec![d, p.heads],
            reason: "head count must divide embedding width".into(),
        });
    }
    let mut heads = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let qi = tape.matmul(q, p.wq[i])?;
        let ki = tape.matmul(k, p.wk[i])?;
        let vi = tape.matmul(v, p.wv[i])?;
        heads.push(scaled_dot_attention(tape, qi, ki, vi)?);
    }
    let cat = tape.concat_cols(&heads)?;
    match p.wo {
        Some(wo) => tape.matmul(cat, wo),
        None => Ok(cat),
    }
}

/// Weights of one transformer module: self-attention, cross-attention,
/// two frequency blocks (absent when the spectral path is disabled), and
/// the per-token MLP.
#[derive(Debug, Clone)]
pub struct TransformerModuleParams {
    pub mhsa: MhaParams,
    pub mhca: MhaParams,
    pub fft1: Option<FftBlockParams>,
    pub fft2: Option<FftBlockParams>,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// Tape handles for [`TransformerModuleParams`].
#[derive(Debug, Clone)]
pub struct TransformerModuleVars {
    pub mhsa: MhaVars,
    pub mhca: MhaVars,
    pub fft1: Option<FftBlockVars>,
    pub fft2: Option<FftBlockVars>,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl TransformerModuleParams {
    pub fn init(d: usize, heads: usize, use_fft: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = 4 * d;
        let dist = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("valid std");
        let dist2 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).expect("valid std");
        let mhsa = MhaParams::init(d, heads, true, rng)?;
        let mhca = MhaParams::init(d, heads, true, rng)?;
        let fft1 = use_fft.then(|| FftBlockParams::init(d, true, rng));
        let fft2 = use_fft.then(|| FftBlockParams::init(d, true, rng));
        let mlp_w1 = Tensor::new(
            vec![d, hidden],
            (0..d * hidden).map(|_| dist.sample(rng)).collect(),
        )?;
        let mlp_w2 = Tensor::new(
            vec![hidden, d],
            (0..hidden * d).map(|_| dist2.sample(rng)).collect(),
        )?;
        Ok(Self {
            mhsa,
            mhca,
            fft1,
            fft2,
            mlp_w1,
            mlp_b1: Tensor::zeros(&[hidden]),
            mlp_w2,
            mlp_b2: Tensor::zeros(&[d]),
        })
    }

    pub fn vars(&self, tape: &mut Tape) -> TransformerModuleVars {
        TransformerModuleVars {
            mhsa: self.mhsa.vars(tape),
            mhca: self.mhca.vars(tape),
            fft1: self.fft1.as_ref().map(|p| p.vars(tape)),
            fft2: self.fft2.as_ref().map(|p| p.vars(tape)),
            mlp_w1: tape.leaf(self.mlp_w1.clone()),
            mlp_b1: tape.leaf(self.mlp_b1.clone()),
            mlp_w2: tape.leaf(self.mlp_w2.clone()),
            mlp_b2: tape.leaf(self.mlp_b2.clone()),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.mhsa.for_each(&format!("{prefix}.mhsa"), f);
        self.mhca.for_each(&format!("{prefix}.mhca"), f);
        if let Some(p) = &self.fft1 {
            p.for_each(&format!("{prefix}.fft1"), f);
        }
        if let Some(p) = &self.fft2 {
            p.for_each(&format!("{prefix}.fft2"), f);
        }
        f(format!("{prefix}.mlp_w1"), &self.mlp_w1);
        f(format!("{prefix}.mlp_b1"), &self.mlp_b1);
        f(format!("{prefix}.mlp_w2"), &self.mlp_w2);
        f(format!("{prefix}.mlp_b2"), &self.mlp_b2);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.mhsa.for_each_mut(&format!("{prefix}.mhsa"), f);
        self.mhca.for_each_mut(&format!("{prefix}.mhca"), f);
        if let Some(p) = &mut self.fft1 {
            p.for_each_mut(&format!("{prefix}.fft1"), f);
        }
        if let Some(p) = &mut self.fft2 {
            p.for_each_mut(&format!("{prefix}.fft2"), f);
        }
        f(format!("{prefix}.mlp_w1"), &mut self.mlp_w1);
        f(format!("{prefix}.mlp_b1"), &mut self.mlp_b1);
        f(format!("{prefix}.mlp_w2"), &mut self.mlp_w2);
        f(format!("{prefix}.mlp_b2"), &mut self.mlp_b2);
    }
}

impl TransformerModuleVars {
    /// Leaf handles in `for_each` order.
    pub fn slots(&mut self) -> Vec<&mut Var> {
        let mut v = self.mhsa.slots();
        v.extend(self.mhca.slots());
        if let Some(p) = &mut self.fft1 {
            v.extend(p.slots());
        }
        if let Some(p) = &mut self.fft2 {
            v.extend(p.slots());
        }
        v.push(&mut self.mlp_w1);
        v.push(&mut self.mlp_b1);
        v.push(&mut self.mlp_w2);
        v.push(&mut self.mlp_b2);
        v
    }
}

/// Per-token MLP d→4d→d with a ReLU between.
fn mlp(tape: &mut Tape, x: Var, p: &TransformerModuleVars) -> Result<Var> {
    let h = tape.matmul(x, p.mlp_w1)?;
    let h = tape.add_row_vec(h, p.mlp_b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, p.mlp_w2)?;
    tape.add_row_vec(o, p.mlp_b2)
}

/// One transformer module:
///   stage 1: normalize(F_R + freq(F_R) + self_attention(F_R))
///   stage 2: normalize(stage1 + cross_attention(query=F_T, key=value=stage1))
///   stage 3: normalize(stage2 + mlp(stage2) + freq(stage2))
/// Normalization and the frequency branch act on the map view; attention
/// and the MLP act on tokens.
pub fn transformer_module(
    tape: &mut Tape,
    f_r: &TokenSequence,
    f_t: &TokenSequence,
    p: &TransformerModuleVars,
    eps: f64,
) -> Result<TokenSequence> {
    let (lr, dr) = tape.value(f_r.tokens).dims2()?;
    let (lt, dt) = tape.value(f_t.tokens).dims2()?;
    if (f_r.h, f_r.w) != (f_t.h, f_t.w) || lr != lt || dr != dt {
        return Err(Error::ShapeMismatch {
            op: "transformer_module",
            lhs: vec![lr, dr],
            rhs: vec![lt, dt],
        });
    }

    let fr_map = f_r.to_map(tape)?;
    let sa = mha(tape, f_r.tokens, f_r.tokens, f_r.tokens, &p.mhsa)?;
    let sa_map = f_r.with(sa).to_map(tape)?;
    let mut sum1 = tape.add(fr_map, sa_map)?;
    if let Some(fv) = &p.fft1 {
        let fr_freq = fft_block(tape, fr_map, fv, false)?;
        sum1 = tape.add(sum1, fr_freq)?;
    }
    let f1_map = tape.instance_norm(sum1, eps)?;

    let f1 = TokenSequence::from_map(tape, f1_map)?;
    let ca = mha(tape, f_t.tokens, f1.tokens, f1.tokens, &p.mhca)?;
    let ca_map = f1.with(ca).to_map(tape)?;
    let sum2 = tape.add(f1_map, ca_map)?;
    let f2_map = tape.instance_norm(sum2, eps)?;

    let f2 = TokenSequence::from_map(tape, f2_map)?;
    let ff = mlp(tape, f2.tokens, p)?;
    let ff_map = f2.with(ff).to_map(tape)?;
    let mut sum3 = tape.add(f2_map, ff_map)?;
    if let Some(fv) = &p.fft2 {
        let f2_freq = fft_block(tape, f2_map, fv, false)?;
        sum3 = tape.add(sum3, f2_freq)?;
    }
    let out_map = tape.instance_norm(sum3, eps)?;
    TokenSequence::from_map(tape, out_map)
}

/// N modules applied in sequence; the target-pose feature feeds every
/// module's cross-attention.
pub fn transformer_stack(
    tape: &mut Tape,
    f_r: &TokenSequence,
    f_t: &TokenSequence,
    params: &[TransformerModuleVars],
    eps: f64,
) -> Result<TokenSequence> {
    if params.is_empty() {
        return Err(Error::Config("transformer stack needs at least one module".into()));
    }
    let mut x = *f_r;
    for p in params {
        x = transformer_module(tape, &x, f_t, p, eps)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_multi;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn constant_on(tape: &mut Tape, t: Tensor) -> Var {
        tape.constant(t)
    }

    #[test]
    fn single_key_returns_its_value_row() {
        let mut tape = Tape::new();
        let q = constant_on(&mut tape, random(&[3, 4], 1));
        let k = constant_on(&mut tape, random(&[1, 4], 2));
        let v = constant_on(&mut tape, Tensor::new(vec![1, 2], vec![5.0, -3.0]).unwrap());
        let o = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        for row in 0..3 {
            assert_eq!(tape.value(o).data()[row * 2..(row + 1) * 2], [5.0, -3.0]);
        }
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let mut tape = Tape::new();
        // q ⟂ every key row → all logits 0 → uniform weights
        let q = constant_on(&mut tape, Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let k = constant_on(&mut tape, random(&[4, 2], 3));
        let v = constant_on(&mut tape, random(&[4, 3], 4));
        let o = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        let vd = tape.value(v).data().to_vec();
        for col in 0..3 {
            let mean = (0..4).map(|r| vd[r * 3 + col]).sum::<f64>() / 4.0;
            assert!((tape.value(o).data()[col] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn worked_two_by_two_example() {
        let mut tape = Tape::new();
        let q = constant_on(&mut tape, Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let k = constant_on(&mut tape, Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = constant_on(&mut tape, Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let o = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        // softmax([1/√2, 0]) = [0.669761549, 0.330238451]
        assert!((tape.value(o).data()[0] - 1.660476901347).abs() < 1e-5);
        assert!((tape.value(o).data()[1] - 2.660476901347).abs() < 1e-5);

        // cross-check against a scalar oracle computed right here
        let z = 1.0 / 2.0_f64.sqrt();
        let w1 = z.exp() / (z.exp() + 1.0);
        let w2 = 1.0 - w1;
        assert!((tape.value(o).data()[0] - (w1 + 3.0 * w2)).abs() < 1e-12);
        assert!((tape.value(o).data()[1] - (2.0 * w1 + 4.0 * w2)).abs() < 1e-12);
    }

    #[test]
    fn attention_weight_rows_sum_to_one() {
        // recompute the weight matrix the public path uses internally
        let q = random(&[5, 4], 5);
        let k = random(&[6, 4], 6);
        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let kv = tape.constant(k);
        let kt = tape.transpose2d(kv).unwrap();
        let logits = tape.matmul(qv, kt).unwrap();
        let scaled = tape.scale(logits, 0.5).unwrap();
        let w = tape.softmax_rows(scaled).unwrap();
        for row in 0..5 {
            let s: f64 = tape.value(w).data()[row * 6..(row + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn key_value_permutation_invariance() {
        let q = random(&[3, 4], 7);
        let k = random(&[5, 4], 8);
        let v = random(&[5, 4], 9);
        let p = MhaParams::init(4, 2, true, &mut rng(10)).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |t: &Tensor| {
            let (r, c) = t.dims2().unwrap();
            let mut out = Tensor::zeros(&[r, c]);
            for (dst, &src) in perm.iter().enumerate() {
                out.data_mut()[dst * c..(dst + 1) * c]
                    .copy_from_slice(&t.data()[src * c..(src + 1) * c]);
            }
            out
        };
        let run = |k: &Tensor, v: &Tensor| {
            let mut tape = Tape::new();
            let qv = tape.constant(q.clone());
            let kv = tape.constant(k.clone());
            let vv = tape.constant(v.clone());
            let pv = p.vars(&mut tape);
            let o = mha(&mut tape, qv, kv, vv, &pv).unwrap();
            tape.value(o).clone()
        };
        let base = run(&k, &v);
        let shuffled = run(&permute(&k), &permute(&v));
        assert!(base.max_abs_diff(&shuffled) < 1e-12);

        // permuting queries permutes output rows identically
        let qperm = {
            let mut t = Tensor::zeros(&[3, 4]);
            let order = [2usize, 0, 1];
            for (dst, &src) in order.iter().enumerate() {
                t.data_mut()[dst * 4..(dst + 1) * 4]
                    .copy_from_slice(&q.data()[src * 4..(src + 1) * 4]);
            }
            t
        };
        let mut tape = Tape::new();
        let qv = tape.constant(qperm);
        let kv = tape.constant(k.clone());
        let vv = tape.constant(v.clone());
        let pv = p.vars(&mut tape);
        let o = mha(&mut tape, qv, kv, vv, &pv).unwrap();
        let od = tape.value(o).data();
        for (dst, &src) in [2usize, 0, 1].iter().enumerate() {
            for c in 0..4 {
                assert!((od[dst * 4 + c] - base.data()[src * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_single_head_equals_plain_attention() {
        let q = random(&[3, 4], 11);
        let k = random(&[5, 4], 12);
        let v = random(&[5, 4], 13);
        let p = MhaParams::identity(4);
        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let kv = tape.constant(k);
        let vv = tape.constant(v);
        let pv = p.vars(&mut tape);
        let a = mha(&mut tape, qv, kv, vv, &pv).unwrap();
        let b = scaled_dot_attention(&mut tape, qv, kv, vv).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-15);
    }

    /// Independent multi-head oracle: plain nested loops and scalar math.
    fn mha_oracle(q: &Tensor, k: &Tensor, v: &Tensor, p: &MhaParams) -> Tensor {
        let (lq, d) = q.dims2().unwrap();
        let (lk, _) = k.dims2().unwrap();
        let dk = d / p.heads;
        let proj = |x: &Tensor, w: &Tensor, l: usize| -> Vec<f64> {
            let mut out = vec![0.0; l * dk];
            for i in 0..l {
                for j in 0..dk {
                    for t in 0..d {
                        out[i * dk + j] += x.data()[i * d + t] * w.data()[t * dk + j];
                    }
                }
            }
            out
        };
        let mut cat = vec![0.0; lq * d];
        for h in 0..p.heads {
            let qh = proj(q, &p.wq[h], lq);
            let kh = proj(k, &p.wk[h], lk);
            let vh = proj(v, &p.wv[h], lk);
            for i in 0..lq {
                let mut logits = vec![0.0; lk];
                for j in 0..lk {
                    for t in 0..dk {
                        logits[j] += qh[i * dk + t] * kh[j * dk + t];
                    }
                    logits[j] /= (dk as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&z| (z - mx).exp()).collect();
                let zsum: f64 = exps.iter().sum();
                for t in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..lk {
                        acc += exps[j] / zsum * vh[j * dk + t];
                    }
                    cat[i * d + h * dk + t] = acc;
                }
            }
        }
        match &p.wo {
            None => Tensor::new(vec![lq, d], cat).unwrap(),
            Some(wo) => {
                let mut out = vec![0.0; lq * d];
                for i in 0..lq {
                    for j in 0..d {
                        for t in 0..d {
                            out[i * d + j] += cat[i * d + t] * wo.data()[t * d + j];
                        }
                    }
                }
                Tensor::new(vec![lq, d], out).unwrap()
            }
        }
    }

    #[test]
    fn two_heads_match_per_head_loop_oracle() {
        let q = random(&[3, 4], 14);
        let k = random(&[3, 4], 15);
        let v = random(&[3, 4], 16);
        let p = MhaParams::init(4, 2, true, &mut rng(17)).unwrap();
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let kv = tape.constant(k.clone());
        let vv = tape.constant(v.clone());
        let pv = p.vars(&mut tape);
        let o = mha(&mut tape, qv, kv, vv, &pv).unwrap();
        let want = mha_oracle(&q, &k, &v, &p);
        assert!(tape.value(o).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let m = random(&[3, 2, 4], 18);
        let mut tape = Tape::new();
        let mv = tape.constant(m.clone());
        let seq = TokenSequence::from_map(&mut tape, mv).unwrap();
        assert_eq!(tape.value(seq.tokens).shape(), &[8, 3]);
        let back = seq.to_map(&mut tape).unwrap();
        assert!(tape.value(back).max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn module_preserves_shape() {
        let p = TransformerModuleParams::init(8, 2, true, &mut rng(19)).unwrap();
        let mut tape = Tape::new();
        let fr = tape.constant(random(&[8, 2, 2], 20));
        let ft = tape.constant(random(&[8, 2, 2], 21));
        let fr = TokenSequence::from_map(&mut tape, fr).unwrap();
        let ft = TokenSequence::from_map(&mut tape, ft).unwrap();
        let pv = p.vars(&mut tape);
        let out = transformer_module(&mut tape, &fr, &ft, &pv, 1e-5).unwrap();
        assert_eq!(tape.value(out.tokens).shape(), &[4, 8]);
        assert_eq!((out.h, out.w), (2, 2));
    }

    #[test]
    fn zeroed_weights_reduce_to_triple_normalization() {
        let d = 4;
        let mut p = TransformerModuleParams::init(d, 2, true, &mut rng(22)).unwrap();
        p.for_each_mut("m", &mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        let x = random(&[d, 2, 2], 23);
        let eps = 1e-5;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fr = TokenSequence::from_map(&mut tape, xv).unwrap();
        let ftv = tape.constant(random(&[d, 2, 2], 24));
        let ft = TokenSequence::from_map(&mut tape, ftv).unwrap();
        let pv = p.vars(&mut tape);
        let out = transformer_module(&mut tape, &fr, &ft, &pv, eps).unwrap();
        let out_map = out.to_map(&mut tape).unwrap();

        let mv = tape.constant(x);
        let n1 = tape.instance_norm(mv, eps).unwrap();
        let n2 = tape.instance_norm(n1, eps).unwrap();
        let n3 = tape.instance_norm(n2, eps).unwrap();
        let diff = tape.value(out_map).max_abs_diff(tape.value(n3));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn stack_composes_modules() {
        let p1 = TransformerModuleParams::init(4, 2, true, &mut rng(25)).unwrap();
        let p2 = TransformerModuleParams::init(4, 2, true, &mut rng(26)).unwrap();
        let fr_t = random(&[4, 2, 2], 27);
        let ft_t = random(&[4, 2, 2], 28);
        let eps = 1e-5;

        let mut tape = Tape::new();
        let fr_v = tape.constant(fr_t.clone());
        let ft_v = tape.constant(ft_t.clone());
        let fr = TokenSequence::from_map(&mut tape, fr_v).unwrap();
        let ft = TokenSequence::from_map(&mut tape, ft_v).unwrap();
        let v1 = p1.vars(&mut tape);
        let v2 = p2.vars(&mut tape);

        let single = transformer_stack(&mut tape, &fr, &ft, std::slice::from_ref(&v1), eps).unwrap();
        let manual = transformer_module(&mut tape, &fr, &ft, &v1, eps).unwrap();
        assert!(tape.value(single.tokens).max_abs_diff(tape.value(manual.tokens)) < 1e-15);

        let stacked =
            transformer_stack(&mut tape, &fr, &ft, &[v1.clone(), v2.clone()], eps).unwrap();
        let manual2 = transformer_module(&mut tape, &manual, &ft, &v2, eps).unwrap();
        assert!(tape.value(stacked.tokens).max_abs_diff(tape.value(manual2.tokens)) < 1e-15);

        assert!(transformer_stack(&mut tape, &fr, &ft, &[], eps).is_err());
    }

    #[test]
    fn module_gradient_checks_out() {
        let p = TransformerModuleParams::init(4, 2, true, &mut rng(29)).unwrap();
        let fr = random(&[4, 2, 2], 30);
        let ft = random(&[4, 2, 2], 31);
        let target = random(&[4, 2, 2], 32);
        let err = grad_check_multi(
            &[fr, ft],
            |tape, vars| {
                let fr = TokenSequence::from_map(tape, vars[0])?;
                let ft = TokenSequence::from_map(tape, vars[1])?;
                let pv = p.vars(tape);
                let out = transformer_module(tape, &fr, &ft, &pv, 1e-5)?;
                let out_map = out.to_map(tape)?;
                let t = tape.constant(target.clone());
                let d = tape.sub(out_map, t)?;
                let sq = tape.mul(d, d)?;
                tape.mean(sq)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_learnable_gets_gradient() {
        let p = TransformerModuleParams::init(4, 2, true, &mut rng(33)).unwrap();
        let mut tape = Tape::new();
        let frv = tape.constant(random(&[4, 2, 2], 34));
        let ftv = tape.constant(random(&[4, 2, 2], 35));
        let fr = TokenSequence::from_map(&mut tape, frv).unwrap();
        let ft = TokenSequence::from_map(&mut tape, ftv).unwrap();
        let pv = p.vars(&mut tape);
        let out = transformer_module(&mut tape, &fr, &ft, &pv, 1e-5).unwrap();
        let out_map = out.to_map(&mut tape).unwrap();
        let target = tape.constant(random(&[4, 2, 2], 36));
        let d = tape.sub(out_map, target).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss).unwrap();

        let mut vars: Vec<(String, Var)> = Vec::new();
        let push_mha = |name: &str, m: &MhaVars, vars: &mut Vec<(String, Var)>| {
            for (i, &v) in m.wq.iter().enumerate() {
                vars.push((format!("{name}.wq{i}"), v));
            }
            for (i, &v) in m.wk.iter().enumerate() {
                vars.push((format!("{name}.wk{i}"), v));
            }
            for (i, &v) in m.wv.iter().enumerate() {
                vars.push((format!("{name}.wv{i}"), v));
            }
            if let Some(v) = m.wo {
                vars.push((format!("{name}.wo"), v));
            }
        };
        push_mha("mhsa", &pv.mhsa, &mut vars);
        push_mha("mhca", &pv.mhca, &mut vars);
        for (tag, f) in [("fft1", &pv.fft1), ("fft2", &pv.fft2)] {
            let f = f.as_ref().unwrap();
            vars.push((format!("{tag}.w1"), f.w1));
            vars.push((format!("{tag}.b1"), f.b1));
            vars.push((format!("{tag}.w2"), f.w2));
            vars.push((format!("{tag}.b2"), f.b2));
        }
        vars.push(("mlp_w1".into(), pv.mlp_w1));
        vars.push(("mlp_b1".into(), pv.mlp_b1));
        vars.push(("mlp_w2".into(), pv.mlp_w2));
        vars.push(("mlp_b2".into(), pv.mlp_b2));
        for (name, v) in vars {
            let g = tape.grad(v).unwrap_or_else(|| panic!("{name} has no grad"));
            let mag: f64 = g.iter().map(|x| x.abs()).sum();
            assert!(mag > 0.0, "{name} gradient is identically zero");
        }
    }
}
