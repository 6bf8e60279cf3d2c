use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{read_to_string, Error, Result};
use crate::losses::LossWeights;
use crate::seq2seq::ModelDims;

/// Everything a training or evaluation run needs, parsed from `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_key: usize,
    pub d_val: usize,
    pub mem_rows: usize,
    /// Attention temperatures; `0` means "use the key width".
    pub lambda1: f64,
    pub lambda2: f64,
    pub d_img: usize,
    pub shared_embeddings: bool,
    pub cosine: bool,
    pub margin: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Parameter-name prefixes trained in stages 3–4.
    pub image_trainable: Vec<String>,
    /// Stop gradients into the encoded `v` through the reconstruction loss.
    pub detach_rec_target: bool,
    /// Learning rate per stage, index 0 is stage 1.
    pub lr: [f64; 4],
    pub epochs: [usize; 4],
    pub batch_size: usize,
    pub beam_width: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Feed concepts in a fresh random order every epoch.
    pub shuffle_concepts: bool,
    pub allow_out_of_order: bool,
    /// Write a checkpoint after every epoch, not only at stage end.
    pub epoch_checkpoints: bool,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            d_k: 16,
            d_v: 16,
            d_key: 16,
            d_val: 16,
            mem_rows: 1,
            lambda1: 0.0,
            lambda2: 0.0,
            d_img: 64,
            shared_embeddings: true,
            cosine: false,
            margin: 0.2,
            beta: 1.0,
            gamma: 1.0,
            detach_rec_target: true,
            image_trainable: ["emb.", "enc.", "dec.", "rec.", "sim."].map(String::from).to_vec(),
            lr: [3e-3, 3e-3, 3e-4, 3e-4],
            epochs: [20, 10, 5, 5],
            batch_size: 16,
            beam_width: 3,
            max_len: 16,
            seed: 0,
            shuffle_concepts: true,
            allow_out_of_order: false,
            epoch_checkpoints: true,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, &path.display().to_string())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Parse {
                path: origin.to_string(),
                line: n + 1,
                detail,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected `key = value`".into()))?;
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        let flag = |v: &str| parse_bool(v).ok_or_else(|| format!("bad boolean `{v}` for `{key}`"));
        match key {
            "d" => self.d = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_k" => self.d_k = num(key, value)?,
            "d_v" => self.d_v = num(key, value)?,
            "d_key" => self.d_key = num(key, value)?,
            "d_val" => self.d_val = num(key, value)?,
            "mem_rows" => self.mem_rows = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "d_img" => self.d_img = num(key, value)?,
            "shared_embeddings" => self.shared_embeddings = flag(value)?,
            "cosine" => self.cosine = flag(value)?,
            "margin" => self.margin = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "detach_rec_target" => self.detach_rec_target = flag(value)?,
            "image_trainable" => {
                self.image_trainable = value.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
            }
            "lr1" | "lr2" | "lr3" | "lr4" => {
                let k = key[2..].parse::<usize>().expect("digit") - 1;
                self.lr[k] = num(key, value)?;
            }
            "epochs1" | "epochs2" | "epochs3" | "epochs4" => {
                let k = key[6..].parse::<usize>().expect("digit") - 1;
                self.epochs[k] = num(key, value)?;
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "beam_width" => self.beam_width = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "shuffle_concepts" => self.shuffle_concepts = flag(value)?,
            "allow_out_of_order" => self.allow_out_of_order = flag(value)?,
            "epoch_checkpoints" => self.epoch_checkpoints = flag(value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self.d == 0 || self.heads == 0 || self.d_img == 0 || self.mem_rows == 0 {
            return bad("d, heads, d_img and mem_rows must be positive".into());
        }
        if self.heads * self.d_v != self.d || self.heads * self.d_val != self.d {
            return bad(format!(
                "heads·d_v ({}) and heads·d_val ({}) must both equal d ({})",
                self.heads * self.d_v,
                self.heads * self.d_val,
                self.d
            ));
        }
        if self.d_k == 0 || self.d_key == 0 {
            return bad("key widths must be positive".into());
        }
        if !(self.margin >= 0.0) {
            return bad(format!("margin must be non-negative, got {}", self.margin));
        }
        if self.lr.iter().any(|&l| !(l > 0.0)) {
            return bad(format!("learning rates must be positive, got {:?}", self.lr));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return bad("λ, β and γ must be non-negative".into());
        }
        if self.image_trainable.is_empty() {
            return bad("image_trainable lists no parameters".into());
        }
        if self.batch_size == 0 || self.beam_width == 0 || self.max_len == 0 {
            return bad("batch_size, beam_width and max_len must be positive".into());
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        let pick = |lambda: f64, width: usize| if lambda > 0.0 { lambda } else { width as f64 };
        ModelDims {
            vocab,
            d: self.d,
            heads: self.heads,
            d_k: self.d_k,
            d_v: self.d_v,
            d_key: self.d_key,
            d_val: self.d_val,
            mem_rows: self.mem_rows,
            lambda1: pick(self.lambda1, self.d_k),
            lambda2: pick(self.lambda2, self.d_key),
            d_img: self.d_img,
            shared_embeddings: self.shared_embeddings,
            head_bias: true,
            cosine: self.cosine,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
            margin: self.margin,
        }
    }

    /// Serialises every key; `parse(to_text())` gives back the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("d", self.d.to_string());
        kv("heads", self.heads.to_string());
        kv("d_k", self.d_k.to_string());
        kv("d_v", self.d_v.to_string());
        kv("d_key", self.d_key.to_string());
        kv("d_val", self.d_val.to_string());
        kv("mem_rows", self.mem_rows.to_string());
        kv("lambda1", self.lambda1.to_string());
        kv("lambda2", self.lambda2.to_string());
        kv("d_img", self.d_img.to_string());
        kv("shared_embeddings", self.shared_embeddings.to_string());
        kv("cosine", self.cosine.to_string());
        kv("margin", self.margin.to_string());
        kv("beta", self.beta.to_string());
        kv("gamma", self.gamma.to_string());
        kv("detach_rec_target", self.detach_rec_target.to_string());
        kv("image_trainable", self.image_trainable.join(","));
        for k in 0..4 {
            kv(&format!("lr{}", k + 1), self.lr[k].to_string());
            kv(&format!("epochs{}", k + 1), self.epochs[k].to_string());
        }
        kv("batch_size", self.batch_size.to_string());
        kv("beam_width", self.beam_width.to_string());
        kv("max_len", self.max_len.to_string());
        kv("seed", self.seed.to_string());
        kv("shuffle_concepts", self.shuffle_concepts.to_string());
        kv("allow_out_of_order", self.allow_out_of_order.to_string());
        kv("epoch_checkpoints", self.epoch_checkpoints.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = TrainConfig::parse("# desk run\nd = 32\nlr3 = 1e-4  # slower\nbeam_width=1\n", "c").unwrap();
        assert_eq!(c.lr[2], 1e-4);
        assert_eq!(c.beam_width, 1);
        let d = TrainConfig::default();
        assert!((d.lr[0] / d.lr[2] - 10.0).abs() < 1e-12);
        assert_eq!(TrainConfig::parse(&c.to_text(), "c").unwrap(), c);
    }

    #[test]
    fn rejects_bad_lines() {
        match TrainConfig::parse("d = 32\nwidth = 3\n", "c") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(TrainConfig::parse("d = 30\n", "c"), Err(Error::Contract(_))));
        assert!(matches!(TrainConfig::parse("margin = -1\n", "c"), Err(Error::Contract(_))));
        assert!(matches!(TrainConfig::parse("lr2 = 0\n", "c"), Err(Error::Contract(_))));
    }
}
