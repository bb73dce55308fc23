//! Flat text configuration: `key = value` lines, `#` comments, a fixed key
//! vocabulary with defaults, and a canonical serialization so resolved
//! configs diff cleanly.

use crate::error::{Error, Result};
use crate::networks::GeneratorArch;
use crate::parts::{PartLabel, PART_COUNT};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model_d: usize,
    pub model_heads: usize,
    pub model_n_transformer: usize,
    pub model_s_texture: usize,
    pub model_use_transformer: bool,
    pub model_use_fft: bool,
    pub parts_count: usize,
    pub parts_exclude: Vec<PartLabel>,
    pub train_lr: f64,
    pub train_batch_size: usize,
    pub train_iters: usize,
    pub loss_lambda1: f64,
    pub loss_lambda2: f64,
    pub loss_lambda3: f64,
    pub loss_lambda4: f64,
    pub loss_lambda5: f64,
    pub seed: u64,
    pub data_h: usize,
    pub data_w: usize,
    pub norm_eps: f64,
    pub frozen_net_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model_d: 64,
            model_heads: 2,
            model_n_transformer: 2,
            model_s_texture: 128,
            model_use_transformer: true,
            model_use_fft: true,
            parts_count: PART_COUNT,
            parts_exclude: Vec::new(),
            train_lr: 1e-5,
            train_batch_size: 8,
            train_iters: 2000,
            loss_lambda1: 2.0,
            loss_lambda2: 0.25,
            loss_lambda3: 200.0,
            loss_lambda4: 2.5,
            loss_lambda5: 0.5,
            seed: 0,
            data_h: 64,
            data_w: 48,
            norm_eps: 1e-5,
            frozen_net_seed: 42,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key '{key}': cannot parse '{value}' as {want}"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v, "an unsigned integer"))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad(key, v, "an unsigned integer"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| bad(key, v, "a number"))?;
    if !x.is_finite() {
        return Err(bad(key, v, "a finite number"));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn parse_parts(key: &str, v: &str) -> Result<Vec<PartLabel>> {
    let mut out = Vec::new();
    for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let lab = PartLabel::from_name(name)
            .ok_or_else(|| Error::Config(format!("key '{key}': unknown part '{name}'")))?;
        if out.contains(&lab) {
            return Err(Error::Config(format!("key '{key}': part '{name}' listed twice")));
        }
        out.push(lab);
    }
    Ok(out)
}

impl Config {
    /// Parses overrides on top of the defaults. Unknown and duplicated keys
    /// are rejected.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key '{key}' appears more than once")));
            }
            match key {
                "model.d" => cfg.model_d = parse_usize(key, value)?,
                "model.heads" => cfg.model_heads = parse_usize(key, value)?,
                "model.n_transformer" => cfg.model_n_transformer = parse_usize(key, value)?,
                "model.s_texture" => cfg.model_s_texture = parse_usize(key, value)?,
                "model.use_transformer" => cfg.model_use_transformer = parse_bool(key, value)?,
                "model.use_fft" => cfg.model_use_fft = parse_bool(key, value)?,
                "parts.count" => cfg.parts_count = parse_usize(key, value)?,
                "parts.exclude" => cfg.parts_exclude = parse_parts(key, value)?,
                "train.lr" => cfg.train_lr = parse_f64(key, value)?,
                "train.batch_size" => cfg.train_batch_size = parse_usize(key, value)?,
                "train.iters" => cfg.train_iters = parse_usize(key, value)?,
                "loss.lambda1" => cfg.loss_lambda1 = parse_f64(key, value)?,
                "loss.lambda2" => cfg.loss_lambda2 = parse_f64(key, value)?,
                "loss.lambda3" => cfg.loss_lambda3 = parse_f64(key, value)?,
                "loss.lambda4" => cfg.loss_lambda4 = parse_f64(key, value)?,
                "loss.lambda5" => cfg.loss_lambda5 = parse_f64(key, value)?,
                "seed" => cfg.seed = parse_u64(key, value)?,
                "data.h" => cfg.data_h = parse_usize(key, value)?,
                "data.w" => cfg.data_w = parse_usize(key, value)?,
                "norm.eps" => cfg.norm_eps = parse_f64(key, value)?,
                "frozen_net.seed" => cfg.frozen_net_seed = parse_u64(key, value)?,
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts_count != PART_COUNT {
            return Err(Error::Config(format!(
                "parts.count must be {PART_COUNT} (the canonical part list is fixed), got {}",
                self.parts_count
            )));
        }
        for (name, v) in [
            ("model.d", self.model_d),
            ("model.heads", self.model_heads),
            ("model.s_texture", self.model_s_texture),
            ("train.batch_size", self.train_batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.train_lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm.eps must be positive".into()));
        }
        if self.data_h % 4 != 0 || self.data_w % 4 != 0 || self.data_h < 16 || self.data_w < 16 {
            return Err(Error::Config(format!(
                "data.h/data.w must be multiples of 4 and at least 16, got {}x{}",
                self.data_h, self.data_w
            )));
        }
        Ok(())
    }

    /// Canonical serialization: fixed key order, one `key = value` per line.
    /// parse(to_text(c)) == c.
    pub fn to_text(&self) -> String {
        let exclude: Vec<&str> = self.parts_exclude.iter().map(|l| l.name()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("model.d", self.model_d.to_string());
        kv("model.heads", self.model_heads.to_string());
        kv("model.n_transformer", self.model_n_transformer.to_string());
        kv("model.s_texture", self.model_s_texture.to_string());
        kv("model.use_transformer", self.model_use_transformer.to_string());
        kv("model.use_fft", self.model_use_fft.to_string());
        kv("parts.count", self.parts_count.to_string());
        kv("parts.exclude", exclude.join(","));
        kv("train.lr", self.train_lr.to_string());
        kv("train.batch_size", self.train_batch_size.to_string());
        kv("train.iters", self.train_iters.to_string());
        kv("loss.lambda1", self.loss_lambda1.to_string());
        kv("loss.lambda2", self.loss_lambda2.to_string());
        kv("loss.lambda3", self.loss_lambda3.to_string());
        kv("loss.lambda4", self.loss_lambda4.to_string());
        kv("loss.lambda5", self.loss_lambda5.to_string());
        kv("seed", self.seed.to_string());
        kv("data.h", self.data_h.to_string());
        kv("data.w", self.data_w.to_string());
        kv("norm.eps", self.norm_eps.to_string());
        kv("frozen_net.seed", self.frozen_net_seed.to_string());
        s
    }

    /// CRC-32 of the canonical text, as printed in reports.
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.to_text().as_bytes()))
    }

    pub fn arch(&self) -> GeneratorArch {
        GeneratorArch {
            d: self.model_d,
            heads: self.model_heads,
            n_modules: self.model_n_transformer,
            s_texture: self.model_s_texture,
            k_pose: crate::data::K_KEYPOINTS,
            use_transformer: self.model_use_transformer,
            use_fft: self.model_use_fft,
            exclude: self.parts_exclude.clone(),
            eps: self.norm_eps,
        }
    }

    pub fn weights(&self) -> crate::losses::LossWeights {
        crate::losses::LossWeights {
            l1: self.loss_lambda1,
            adv: self.loss_lambda2,
            perceptual: self.loss_lambda3,
            style: self.loss_lambda4,
            partial: self.loss_lambda5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_round_trip() {
        let c = Config::default();
        let text = c.to_text();
        let back = Config::parse(&text).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.model_d, 64);
        assert_eq!(back.train_lr, 1e-5);
        assert_eq!(back.loss_lambda3, 200.0);
        assert_eq!(back.frozen_net_seed, 42);
    }

    #[test]
    fn overrides_comments_and_lists() {
        let text = "\n# comment line\nmodel.d = 32   # trailing comment\nparts.exclude = face,hair\ntrain.lr = 0.001\nmodel.use_fft = false\n";
        let c = Config::parse(text).unwrap();
        assert_eq!(c.model_d, 32);
        assert_eq!(c.parts_exclude, vec![PartLabel::Face, PartLabel::Hair]);
        assert_eq!(c.train_lr, 1e-3);
        assert!(!c.model_use_fft);
        // unchanged keys keep defaults
        assert_eq!(c.model_heads, 2);

        let again = Config::parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(Config::parse("model.depth = 3"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("model.d = 8\nmodel.d = 16"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("model.d 8"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("model.d = eight"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("model.use_fft = yes"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("parts.exclude = torso"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("parts.exclude = face,face"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("parts.count = 7"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("train.lr = 0"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("data.h = 30"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(a.hash(), b.hash());
        b.model_d = 32;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 8);
    }
}
