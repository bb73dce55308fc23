//! Binary checkpoint container: `PDGN` magic, a format version, the resolved
//! config text, named f64 tensors, and a trailing CRC-32 over everything
//! before it. Byte layout is fixed little-endian so files are portable and
//! re-saves are bit-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::{DiscriminatorParams, GeneratorParams};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PDGN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    /// Order is part of the format: re-saving preserves bytes.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            if t.shape().len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor rank too large: {name}")));
            }
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 4 + 4 + 4 + 4 + 4 {
            return Err(fail("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(fail("truncated record"));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4")) as usize;
        let config_text = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
            .map_err(|_| fail("config text is not UTF-8"))?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4")) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2")) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| fail("tensor name is not UTF-8"))?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4")) as usize);
            }
            let n: usize = shape.iter().product();
            let payload = take(&mut pos, n * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if pos != body.len() {
            return Err(fail("trailing bytes after last tensor"));
        }
        Ok(Checkpoint { config_text, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(Error::Io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Packs generator + discriminator weights under "gen."/"disc." prefixes.
    pub fn from_models(
        config_text: &str,
        gen: &GeneratorParams,
        disc: &DiscriminatorParams,
    ) -> Checkpoint {
        let mut tensors = Vec::new();
        gen.for_each("gen", &mut |name, t| tensors.push((name, t.clone())));
        disc.for_each("disc", &mut |name, t| tensors.push((name, t.clone())));
        Checkpoint { config_text: config_text.to_string(), tensors }
    }

    /// Writes stored tensors back into freshly-initialized models. Every
    /// model tensor must be present with a matching shape, and no stored
    /// tensor may be left over.
    pub fn into_models(
        &self,
        gen: &mut GeneratorParams,
        disc: &mut DiscriminatorParams,
    ) -> Result<()> {
        let mut by_name: std::collections::BTreeMap<&str, &Tensor> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if by_name.len() != self.tensors.len() {
            return Err(Error::Checkpoint("duplicate tensor name".into()));
        }
        let mut missing = Vec::new();
        let mut apply = |name: String, dst: &mut Tensor| {
            match by_name.remove(name.as_str()) {
                Some(src) if src.shape() == dst.shape() => *dst = src.clone(),
                Some(src) => missing.push(format!(
                    "{name}: shape {:?} in file, {:?} in model",
                    src.shape(),
                    dst.shape()
                )),
                None => missing.push(format!("{name}: absent from checkpoint")),
            }
        };
        gen.for_each_mut("gen", &mut apply);
        disc.for_each_mut("disc", &mut apply);
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("tensor mismatch: {}", missing.join("; "))));
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(Error::Checkpoint(format!("unused tensor '{name}' in checkpoint")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::networks::GeneratorArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_models(seed: u64) -> (GeneratorParams, DiscriminatorParams) {
        let arch = GeneratorArch {
            d: 8,
            heads: 2,
            n_modules: 1,
            s_texture: 8,
            k_pose: 3,
            ..GeneratorArch::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = GeneratorParams::init(&arch, &mut rng).unwrap();
        let disc = DiscriminatorParams::init(&mut rng);
        (gen, disc)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (gen, disc) = tiny_models(1);
        let cfg = Config::default().to_text();
        let ck = Checkpoint::from_models(&cfg, &gen, &disc);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config_text, cfg);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
        // save -> load -> save reproduces the bytes exactly
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (gen, disc) = tiny_models(2);
        let ck = Checkpoint::from_models("", &gen, &disc);
        let mut bytes = ck.to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::ChecksumMismatch { stored, computed }) => assert_ne!(stored, computed),
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
        assert!(matches!(
            Checkpoint::from_bytes(&[0u8; 8]),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn restores_into_models() {
        let (gen, disc) = tiny_models(3);
        let ck = Checkpoint::from_models("x = y", &gen, &disc);
        let (mut gen2, mut disc2) = tiny_models(99); // different weights
        ck.into_models(&mut gen2, &mut disc2).unwrap();
        // compare every tensor after restore
        let mut want = Vec::new();
        gen.for_each("gen", &mut |n, t| want.push((n, t.clone())));
        disc.for_each("disc", &mut |n, t| want.push((n, t.clone())));
        let mut got = Vec::new();
        gen2.for_each("gen", &mut |n, t| got.push((n, t.clone())));
        disc2.for_each("disc", &mut |n, t| got.push((n, t.clone())));
        for ((n1, t1), (n2, t2)) in want.iter().zip(&got) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "tensor {n1} not restored");
        }
    }

    #[test]
    fn shape_mismatch_and_leftovers_rejected() {
        let (gen, disc) = tiny_models(4);
        let mut ck = Checkpoint::from_models("", &gen, &disc);
        ck.tensors.push(("extra.weight".into(), Tensor::zeros(&[2])));
        let (mut g2, mut d2) = tiny_models(4);
        assert!(matches!(ck.into_models(&mut g2, &mut d2), Err(Error::Checkpoint(_))));

        let mut ck2 = Checkpoint::from_models("", &gen, &disc);
        ck2.tensors.remove(0);
        assert!(matches!(ck2.into_models(&mut g2, &mut d2), Err(Error::Checkpoint(_))));
    }
}
