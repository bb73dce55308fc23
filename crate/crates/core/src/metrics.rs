//! Image-quality metrics: PSNR, Fréchet distance over pooled features, and a
//! normalized-feature perceptual distance.
//!
//! All metrics are value-level (no gradients). Feature-based metrics reuse
//! the frozen conv net from the loss module, so absolute values are tied to
//! that backbone and the report labels it.

use crate::error::{Error, Result};
use crate::losses::{features, FrozenFeatureNet};
use crate::tensor::{matmul_raw, Tape, Tensor};

/// Mean and unbiased covariance summary of a feature sample.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// F x F, exactly symmetric by construction.
    pub cov: Tensor,
    pub n: usize,
}

/// Peak signal-to-noise ratio in dB; identical inputs give +infinity.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if !(max_val > 0.0) {
        return Err(Error::Config("psnr max_val must be positive".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Sample mean and unbiased covariance of row-vector features (n x F).
pub fn fit_gaussian(features: &Tensor) -> Result<GaussianStats> {
    let (n, f) = features.dims2()?;
    if n < 2 {
        return Err(Error::Numeric(format!(
            "fit_gaussian needs at least 2 samples, got {n}"
        )));
    }
    let x = features.data();
    let mut mean = vec![0.0; f];
    for row in 0..n {
        for j in 0..f {
            mean[j] += x[row * f + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; f * f];
    for j in 0..f {
        for k in j..f {
            let mut acc = 0.0;
            for row in 0..n {
                acc += (x[row * f + j] - mean[j]) * (x[row * f + k] - mean[k]);
            }
            let v = acc / (n - 1) as f64;
            cov[j * f + k] = v;
            cov[k * f + j] = v;
        }
    }
    Ok(GaussianStats { mean, cov: Tensor::new(vec![f, f], cov)?, n })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the matrix whose columns are the eigenvectors.
fn jacobi_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (f, f2) = a.dims2()?;
    debug_assert_eq!(f, f2);
    let mut m = a.data().to_vec();
    let mut v = vec![0.0; f * f];
    for i in 0..f {
        v[i * f + i] = 1.0;
    }
    let scale = m.iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..f {
            for q in p + 1..f {
                off = off.max(m[p * f + q].abs());
            }
        }
        if off < 1e-14 * scale {
            break;
        }
        for p in 0..f {
            for q in p + 1..f {
                let apq = m[p * f + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * f + q] - m[p * f + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e12 {
                    1.0 / (2.0 * theta)
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let (app, aqq) = (m[p * f + p], m[q * f + q]);
                m[p * f + p] = app - t * apq;
                m[q * f + q] = aqq + t * apq;
                m[p * f + q] = 0.0;
                m[q * f + p] = 0.0;
                for k in 0..f {
                    if k != p && k != q {
                        let akp = m[k * f + p];
                        let akq = m[k * f + q];
                        m[k * f + p] = c * akp - s * akq;
                        m[k * f + q] = s * akp + c * akq;
                        m[p * f + k] = m[k * f + p];
                        m[q * f + k] = m[k * f + q];
                    }
                }
                for k in 0..f {
                    let vkp = v[k * f + p];
                    let vkq = v[k * f + q];
                    v[k * f + p] = c * vkp - s * vkq;
                    v[k * f + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..f).map(|i| m[i * f + i]).collect();
    Ok((eig, Tensor::new(vec![f, f], v)?))
}

/// Principal square root of a symmetric PSD matrix. Asymmetry beyond 1e-8 is
/// rejected; small negative eigenvalues (roundoff) are clamped to zero.
pub fn matrix_sqrt_psd(a: &Tensor) -> Result<Tensor> {
    let (f, f2) = a.dims2()?;
    if f != f2 {
        return Err(Error::InvalidShape {
            op: "matrix_sqrt_psd",
            shape: a.shape().to_vec(),
            reason: "matrix must be square".into(),
        });
    }
    let tol = 1e-8;
    let mut max_asym = 0.0f64;
    for i in 0..f {
        for j in i + 1..f {
            max_asym = max_asym.max((a.data()[i * f + j] - a.data()[j * f + i]).abs());
        }
    }
    if max_asym > tol {
        return Err(Error::NotSymmetric { tol, max: max_asym });
    }
    // work on the symmetrized matrix so roundoff asymmetry cannot drift
    let mut sym = a.data().to_vec();
    for i in 0..f {
        for j in 0..f {
            sym[i * f + j] = 0.5 * (a.data()[i * f + j] + a.data()[j * f + i]);
        }
    }
    let (eig, v) = jacobi_eigen(&Tensor::new(vec![f, f], sym)?)?;
    let roots: Vec<f64> = eig.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let vd = v.data();
    let mut out = vec![0.0; f * f];
    for i in 0..f {
        for j in i..f {
            let mut acc = 0.0;
            for k in 0..f {
                acc += vd[i * f + k] * roots[k] * vd[j * f + k];
            }
            out[i * f + j] = acc;
            out[j * f + i] = acc;
        }
    }
    Tensor::new(vec![f, f], out)
}

fn mat_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "fid",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_raw(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Fréchet distance between two Gaussian summaries, in the symmetrized form
/// |mu1-mu2|^2 + Tr(S1 + S2 - 2*sqrt(sqrt(S1) S2 sqrt(S1))).
pub fn fid(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    let f = s1.mean.len();
    if s2.mean.len() != f {
        return Err(Error::ShapeMismatch {
            op: "fid",
            lhs: vec![f],
            rhs: vec![s2.mean.len()],
        });
    }
    let mean_term: f64 =
        s1.mean.iter().zip(&s2.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let root1 = matrix_sqrt_psd(&s1.cov)?;
    let inner = mat_mul(&mat_mul(&root1, &s2.cov)?, &root1)?;
    let cross = matrix_sqrt_psd(&inner)?;
    let trace = |t: &Tensor| (0..f).map(|i| t.data()[i * f + i]).sum::<f64>();
    Ok(mean_term + trace(&s1.cov) + trace(&s2.cov) - 2.0 * trace(&cross))
}

/// Runs the frozen net on an image and returns the stage outputs as values.
pub fn stage_values(img: &Tensor, net: &FrozenFeatureNet) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let nv = net.vars(&mut tape);
    let v = tape.constant(img.clone());
    let fs = features(&mut tape, v, &nv)?;
    Ok(fs.into_iter().map(|f| tape.value(f).clone()).collect())
}

fn unit_normalize_channels(stage: &Tensor) -> Result<Tensor> {
    let (c, h, w) = stage.dims3()?;
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        let mut norm = 0.0;
        for ch in 0..c {
            let v = stage.data()[ch * h * w + p];
            norm += v * v;
        }
        let norm = norm.sqrt();
        if norm > 0.0 {
            for ch in 0..c {
                out[ch * h * w + p] = stage.data()[ch * h * w + p] / norm;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// LPIPS-style distance: per stage, normalize each spatial position's
/// channel vector to unit length, then take the mean squared difference;
/// stages are summed.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, net: &FrozenFeatureNet) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "perceptual_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let fa = stage_values(a, net)?;
    let fb = stage_values(b, net)?;
    let mut total = 0.0;
    for (sa, sb) in fa.iter().zip(&fb) {
        let na = unit_normalize_channels(sa)?;
        let nb = unit_normalize_channels(sb)?;
        let mse = na
            .data()
            .iter()
            .zip(nb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / na.len() as f64;
        total += mse;
    }
    Ok(total)
}

/// Global average pool of the deepest stage: the pooled feature vector used
/// for FID.
pub fn pooled_feature(img: &Tensor, net: &FrozenFeatureNet) -> Result<Vec<f64>> {
    let stages = stage_values(img, net)?;
    let last = stages.last().expect("net has stages");
    let (c, h, w) = last.dims3()?;
    Ok((0..c)
        .map(|ch| last.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect())
}

/// Aggregate quality report for a set of (generated, truth) pairs.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    pub mean_psnr: f64,
    pub perceptual: Vec<f64>,
    pub mean_perceptual: f64,
    /// Absent when fewer than 2 pairs exist (covariance undefined).
    pub fid: Option<f64>,
    pub n_pairs: usize,
    pub dataset: String,
    pub config_hash: String,
    pub backbone: String,
}

/// Per-pair PSNR and perceptual distance plus FID over pooled stage-4
/// features of the generated set against the truth set.
pub fn evaluate_set(pairs: &[(Tensor, Tensor)], net: &FrozenFeatureNet) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Numeric("evaluate_set needs at least one pair".into()));
    }
    let mut psnrs = Vec::with_capacity(pairs.len());
    let mut percs = Vec::with_capacity(pairs.len());
    let mut feat_g = Vec::new();
    let mut feat_t = Vec::new();
    for (gen, truth) in pairs {
        psnrs.push(psnr(gen, truth, 1.0)?);
        percs.push(perceptual_distance(gen, truth, net)?);
        feat_g.extend(pooled_feature(gen, net)?);
        feat_t.extend(pooled_feature(truth, net)?);
    }
    let n = pairs.len();
    let fid_value = if n >= 2 {
        let f = feat_g.len() / n;
        let sg = fit_gaussian(&Tensor::new(vec![n, f], feat_g)?)?;
        let st = fit_gaussian(&Tensor::new(vec![n, f], feat_t)?)?;
        Some(fid(&sg, &st)?)
    } else {
        None
    };
    Ok(MetricReport {
        mean_psnr: psnrs.iter().sum::<f64>() / n as f64,
        mean_perceptual: percs.iter().sum::<f64>() / n as f64,
        psnr: psnrs,
        perceptual: percs,
        fid: fid_value,
        n_pairs: n,
        dataset: String::new(),
        config_hash: String::new(),
        backbone: format!("frozen-conv4(seed={})", net.seed()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random01(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_fixed_cases() {
        let a = random01(&[3, 4, 4], 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);

        let zero = Tensor::zeros(&[2, 3]);
        let one = Tensor::full(&[2, 3], 1.0);
        assert!((psnr(&zero, &one, 1.0).unwrap()).abs() < 1e-12);

        let half = Tensor::full(&[2, 3], 0.5);
        let p = psnr(&zero, &half, 1.0).unwrap();
        assert!((p - 10.0 * 4.0f64.log10()).abs() < 1e-6);
        assert!((p - 6.0206).abs() < 1e-4);

        assert!(psnr(&zero, &Tensor::zeros(&[3, 2]), 1.0).is_err());
        assert!(psnr(&zero, &zero, 0.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = random01(&[3, 8, 8], 2);
        let mut prev = f64::INFINITY;
        for (i, amp) in [0.05, 0.15, 0.4].iter().enumerate() {
            let mut r = rng(3 + i as u64);
            let mut noisy = base.clone();
            for v in noisy.data_mut() {
                *v += amp * r.random_range(-1.0..1.0);
            }
            let p = psnr(&base, &noisy, 1.0).unwrap();
            assert!(p < prev, "noise {amp} gave psnr {p} >= {prev}");
            prev = p;
        }
    }

    #[test]
    fn gaussian_fit_hand_case() {
        let pts = Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let s = fit_gaussian(&pts).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.cov.data(), [2.0, 2.0, 2.0, 2.0]);
        assert_eq!(s.n, 2);

        let same = Tensor::new(vec![3, 2], vec![0.5, 0.25, 0.5, 0.25, 0.5, 0.25]).unwrap();
        let s = fit_gaussian(&same).unwrap();
        assert!(s.cov.data().iter().all(|&v| v == 0.0));

        assert!(fit_gaussian(&Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn gaussian_fit_is_permutation_invariant() {
        let mut r = rng(4);
        let rows: Vec<Vec<f64>> =
            (0..5).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut shuffled_rows = rows.clone();
        shuffled_rows.swap(0, 3);
        shuffled_rows.swap(1, 4);
        let flat2: Vec<f64> = shuffled_rows.iter().flatten().copied().collect();
        let a = fit_gaussian(&Tensor::new(vec![5, 3], flat).unwrap()).unwrap();
        let b = fit_gaussian(&Tensor::new(vec![5, 3], flat2).unwrap()).unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.cov.max_abs_diff(&b.cov) < 1e-12);
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = matrix_sqrt_psd(&eye).unwrap();
        assert!(r.max_abs_diff(&eye) < 1e-12);

        let d = Tensor::new(vec![2, 2], vec![4.0, 0.0, 0.0, 9.0]).unwrap();
        let r = matrix_sqrt_psd(&d).unwrap();
        let want = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        assert!(r.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn sqrt_squares_back_on_random_psd() {
        let mut r = rng(5);
        for trial in 0..10 {
            let f = 2 + (trial % 4) * 10; // up to 32x32 here; bigger sizes in the acceptance suite
            let b: Vec<f64> = (0..f * f).map(|_| r.random_range(-1.0..1.0)).collect();
            // A = B Bᵀ is PSD
            let mut a = vec![0.0; f * f];
            for i in 0..f {
                for j in 0..f {
                    let mut acc = 0.0;
                    for k in 0..f {
                        acc += b[i * f + k] * b[j * f + k];
                    }
                    a[i * f + j] = acc;
                }
            }
            let at = Tensor::new(vec![f, f], a.clone()).unwrap();
            let root = matrix_sqrt_psd(&at).unwrap();
            let sq = mat_mul(&root, &root).unwrap();
            let num: f64 =
                sq.data().iter().zip(&a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            assert!(num / den < 1e-6, "relative Frobenius error {}", num / den);
            // root itself symmetric PSD
            for i in 0..f {
                for j in 0..f {
                    assert!((root.data()[i * f + j] - root.data()[j * f + i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn sqrt_rejects_asymmetry() {
        let bad = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.2, 1.0]).unwrap();
        match matrix_sqrt_psd(&bad).unwrap_err() {
            Error::NotSymmetric { tol, max } => {
                assert_eq!(tol, 1e-8);
                assert!((max - 0.3).abs() < 1e-12);
            }
            e => panic!("unexpected error {e:?}"),
        }
    }

    #[test]
    fn fid_fixed_cases() {
        // identical stats
        let mut r = rng(6);
        let feats: Vec<f64> = (0..6 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let s = fit_gaussian(&Tensor::new(vec![6, 3], feats).unwrap()).unwrap();
        assert!(fid(&s, &s).unwrap().abs() < 1e-8);

        // 1-D: mean 0 vs 1, var 1 vs 1 -> 1.0
        let s1 = GaussianStats { mean: vec![0.0], cov: Tensor::new(vec![1, 1], vec![1.0]).unwrap(), n: 10 };
        let s2 = GaussianStats { mean: vec![1.0], cov: Tensor::new(vec![1, 1], vec![1.0]).unwrap(), n: 10 };
        assert!((fid(&s1, &s2).unwrap() - 1.0).abs() < 1e-10);

        // 1-D: equal means, var 1 vs 4 -> (1-2)^2 = 1.0
        let s3 = GaussianStats { mean: vec![0.0], cov: Tensor::new(vec![1, 1], vec![4.0]).unwrap(), n: 10 };
        assert!((fid(&s1, &s3).unwrap() - 1.0).abs() < 1e-10);

        // symmetry
        let feats2: Vec<f64> = (0..6 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let t = fit_gaussian(&Tensor::new(vec![6, 3], feats2).unwrap()).unwrap();
        let ab = fid(&s, &t).unwrap();
        let ba = fid(&t, &s).unwrap();
        assert!((ab - ba).abs() < 1e-6);

        // dimension mismatch
        assert!(fid(&s, &s1).is_err());
    }

    #[test]
    fn perceptual_distance_properties() {
        let net = FrozenFeatureNet::init(42);
        let a = random01(&[3, 16, 16], 7);
        let b = random01(&[3, 16, 16], 8);
        assert_eq!(perceptual_distance(&a, &a, &net).unwrap(), 0.0);
        let ab = perceptual_distance(&a, &b, &net).unwrap();
        let ba = perceptual_distance(&b, &a, &net).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);

        // oracle recomputation from raw stage values
        let fa = stage_values(&a, &net).unwrap();
        let fb = stage_values(&b, &net).unwrap();
        let mut want = 0.0;
        for (sa, sb) in fa.iter().zip(&fb) {
            let (c, h, w) = sa.dims3().unwrap();
            let mut acc = 0.0;
            for p in 0..h * w {
                let norm = |t: &Tensor| {
                    (0..c)
                        .map(|ch| t.data()[ch * h * w + p].powi(2))
                        .sum::<f64>()
                        .sqrt()
                };
                let (na, nb) = (norm(sa), norm(sb));
                for ch in 0..c {
                    let x = if na > 0.0 { sa.data()[ch * h * w + p] / na } else { 0.0 };
                    let y = if nb > 0.0 { sb.data()[ch * h * w + p] / nb } else { 0.0 };
                    acc += (x - y) * (x - y);
                }
            }
            want += acc / (c * h * w) as f64;
        }
        assert!((ab - want).abs() < 1e-12);
    }

    #[test]
    fn evaluate_set_aggregates_and_edge_cases() {
        let net = FrozenFeatureNet::init(42);
        let imgs: Vec<Tensor> = (0..3).map(|i| random01(&[3, 16, 16], 20 + i)).collect();

        // identical pairs: perceptual 0, psnr infinite, fid near zero
        let pairs: Vec<(Tensor, Tensor)> =
            imgs.iter().map(|t| (t.clone(), t.clone())).collect();
        let rep = evaluate_set(&pairs, &net).unwrap();
        assert_eq!(rep.n_pairs, 3);
        assert!(rep.psnr.iter().all(|p| p.is_infinite()));
        assert!(rep.mean_perceptual == 0.0);
        assert!(rep.fid.unwrap().abs() < 1e-8);
        assert!(rep.backbone.contains("42"));

        // aggregates recomputable from the per-pair lists
        let mixed: Vec<(Tensor, Tensor)> = (0..3)
            .map(|i| (random01(&[3, 16, 16], 30 + i), random01(&[3, 16, 16], 40 + i)))
            .collect();
        let rep = evaluate_set(&mixed, &net).unwrap();
        let mp: f64 = rep.psnr.iter().sum::<f64>() / 3.0;
        assert!((rep.mean_psnr - mp).abs() < 1e-12);
        let mq: f64 = rep.perceptual.iter().sum::<f64>() / 3.0;
        assert!((rep.mean_perceptual - mq).abs() < 1e-12);

        // single pair: psnr fine, fid unavailable
        let rep = evaluate_set(&mixed[..1], &net).unwrap();
        assert!(rep.fid.is_none());

        assert!(evaluate_set(&[], &net).is_err());
    }
}
